//! Multi-view partial-shape synthesis.
//!
//! A cloud is rendered into an orthographic depth map from a random
//! viewpoint (nearest point wins per pixel) and the map is back-projected
//! into a new, more occluded cloud. Everything here is plain data: the
//! synthesizer never participates in differentiation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{add, cross, dot, farthest_point_sample, norm, scaled, Point3, PointCloud};
use crate::error::{invalid, Error, Result};

pub const AZIMUTH_RANGE: (f64, f64) = (0.0, 360.0);
pub const ELEVATION_RANGE: (f64, f64) = (-20.0, 40.0);
pub const CAMERA_RADIUS: f64 = 2.5;
/// Width of the square image plane in model units; covers the unit ball with margin.
pub const VIEW_EXTENT: f64 = 2.2;

/// Camera pose on a sphere around the origin, looking at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint {
    azimuth: f64,
    elevation: f64,
    radius: f64,
}

impl Viewpoint {
    /// Angles in degrees. Azimuth 0, elevation 0 puts the camera on `+z`
    /// looking down `-z`, with `+y` up.
    pub fn new(azimuth: f64, elevation: f64, radius: f64) -> Result<Self> {
        if !(AZIMUTH_RANGE.0..=AZIMUTH_RANGE.1).contains(&azimuth) {
            return Err(invalid(format!("azimuth {azimuth} outside [0, 360]")));
        }
        if !(ELEVATION_RANGE.0..=ELEVATION_RANGE.1).contains(&elevation) {
            return Err(invalid(format!("elevation {elevation} outside [-20, 40]")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid(format!(
                "camera radius must be positive, got {radius}"
            )));
        }
        Ok(Self {
            azimuth,
            elevation,
            radius,
        })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn position(&self) -> Point3 {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        scaled(
            [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()],
            self.radius,
        )
    }

    /// Orthonormal camera frame `(right, up, forward)`.
    pub fn frame(&self) -> (Point3, Point3, Point3) {
        let c = self.position();
        let forward = scaled(c, -1.0 / norm(c));
        let r = cross(forward, [0.0, 1.0, 0.0]);
        let right = scaled(r, 1.0 / norm(r));
        let up = cross(right, forward);
        (right, up, forward)
    }
}

/// Azimuth ~ U[0, 360), elevation ~ U[-20, 40], fixed radius.
pub fn sample_viewpoint<R: Rng + ?Sized>(rng: &mut R) -> Viewpoint {
    let azimuth = rng.gen_range(AZIMUTH_RANGE.0..AZIMUTH_RANGE.1);
    let elevation = rng.gen_range(ELEVATION_RANGE.0..=ELEVATION_RANGE.1);
    Viewpoint {
        azimuth,
        elevation,
        radius: CAMERA_RADIUS,
    }
}

/// Square z-buffer image. Pixel `(u, v)` lives at `v * resolution + u`,
/// with `u` along the camera's right axis and `v` along its up axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub resolution: usize,
    /// Distance from the camera along the view axis; `f64::INFINITY` where invalid.
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub viewpoint: Viewpoint,
    pub pixel_scale: f64,
}

impl DepthMap {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Pixel holding `p`, if it falls on the image.
    pub fn pixel_of(&self, p: Point3) -> Option<(usize, usize)> {
        let (right, up, _) = self.viewpoint.frame();
        let half = self.resolution as f64 / 2.0;
        let u = (dot(p, right) / self.pixel_scale + half).floor();
        let v = (dot(p, up) / self.pixel_scale + half).floor();
        let r = self.resolution as f64;
        (u >= 0.0 && v >= 0.0 && u < r && v < r).then_some((u as usize, v as usize))
    }

    /// Binary 16-bit PGM (`P5`, big-endian samples). Rows run top to bottom;
    /// invalid pixels are 0 and depths in `[radius - 1.1, radius + 1.1]` map
    /// linearly onto `1..=65535`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let r = self.resolution;
        let near = self.viewpoint.radius - VIEW_EXTENT / 2.0;
        let mut out = format!("P5\n{r} {r}\n65535\n").into_bytes();
        out.reserve(r * r * 2);
        for v in (0..r).rev() {
            for u in 0..r {
                let i = v * r + u;
                let sample: u16 = if self.valid[i] {
                    let t = ((self.depth[i] - near) / VIEW_EXTENT).clamp(0.0, 1.0);
                    1 + (t * 65534.0).round() as u16
                } else {
                    0
                };
                out.extend_from_slice(&sample.to_be_bytes());
            }
        }
        out
    }
}

/// Orthographic projection with a per-pixel z-buffer keeping the nearest
/// point. Pixel size is `2.2 / resolution`.
pub fn project_depth(p: &PointCloud, view: Viewpoint, resolution: usize) -> Result<DepthMap> {
    if resolution == 0 {
        return Err(invalid("depth map resolution must be positive"));
    }
    let mut map = DepthMap {
        resolution,
        depth: vec![f64::INFINITY; resolution * resolution],
        valid: vec![false; resolution * resolution],
        viewpoint: view,
        pixel_scale: VIEW_EXTENT / resolution as f64,
    };
    let (_, _, forward) = view.frame();
    for &q in p.points() {
        let Some((u, v)) = map.pixel_of(q) else {
            continue;
        };
        let depth = dot(q, forward) + view.radius;
        let i = v * resolution + u;
        if depth < map.depth[i] {
            map.depth[i] = depth;
            map.valid[i] = true;
        }
    }
    Ok(map)
}

/// Inverts the projection at every valid pixel center.
pub fn backproject(map: &DepthMap) -> Result<PointCloud> {
    let (right, up, forward) = map.viewpoint.frame();
    let camera = map.viewpoint.position();
    let r = map.resolution;
    let half = r as f64 / 2.0;
    let mut points = Vec::with_capacity(map.valid_count());
    for v in 0..r {
        for u in 0..r {
            let i = v * r + u;
            if !map.valid[i] {
                continue;
            }
            let x = (u as f64 + 0.5 - half) * map.pixel_scale;
            let y = (v as f64 + 0.5 - half) * map.pixel_scale;
            let along = add(camera, scaled(forward, map.depth[i]));
            points.push(add(along, add(scaled(right, x), scaled(up, y))));
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyView);
    }
    PointCloud::new(points)
}

/// Resizes a cloud to exactly `target` points: FPS when larger, all points
/// plus uniform draws with replacement when smaller.
pub fn resample<R: Rng + ?Sized>(p: &PointCloud, target: usize, rng: &mut R) -> Result<PointCloud> {
    if target == 0 {
        return Err(invalid("resample target must be at least 1"));
    }
    let n = p.len();
    if n == target {
        return Ok(p.clone());
    }
    if n > target {
        let idx = farthest_point_sample(p, target, rng.gen())?;
        return p.select(&idx);
    }
    let mut points = p.points().to_vec();
    points.extend((n..target).map(|_| p.get(rng.gen_range(0..n))));
    PointCloud::new(points)
}

/// Renders and back-projects `p` from one viewpoint, then resamples to `target`.
pub fn synthesize_view<R: Rng + ?Sized>(
    p: &PointCloud,
    view: Viewpoint,
    resolution: usize,
    target: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    let map = project_depth(p, view, resolution)?;
    resample(&backproject(&map)?, target, rng)
}

/// A synthesized view and the depth map it was read from.
#[derive(Clone, Debug)]
pub struct SynthesizedView {
    pub cloud: PointCloud,
    pub depth: DepthMap,
}

/// `n` augmented partials of `p` from independent random viewpoints.
///
/// Each view draws its own seed from `rng`, so views are reproducible
/// individually and could be built in any order.
pub fn synthesize_views<R: Rng + ?Sized>(
    p: &PointCloud,
    n: usize,
    target: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<Vec<PointCloud>> {
    Ok(synthesize_views_with_depth(p, n, target, resolution, rng)?
        .into_iter()
        .map(|v| v.cloud)
        .collect())
}

/// As [`synthesize_views`], keeping each view's depth map.
pub fn synthesize_views_with_depth<R: Rng + ?Sized>(
    p: &PointCloud,
    n: usize,
    target: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<Vec<SynthesizedView>> {
    if target == 0 {
        return Err(invalid("view target must be at least 1"));
    }
    let seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    seeds
        .into_iter()
        .map(|seed| {
            let mut view_rng = ChaCha8Rng::seed_from_u64(seed);
            let view = sample_viewpoint(&mut view_rng);
            let depth = project_depth(p, view, resolution)?;
            let cloud = resample(&backproject(&depth)?, target, &mut view_rng)?;
            Ok(SynthesizedView { cloud, depth })
        })
        .collect()
}
