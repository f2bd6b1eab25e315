//! Procedural shapes with exact surfaces, and partial scans of them.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{add, norm, sub, Point3, PointCloud};
use crate::error::{invalid, Result};
use crate::synth::{synthesize_view, Viewpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Composite,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Cylinder,
        ShapeKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Composite => "composite",
        }
    }
}

/// A closed surface. Cylinders have their axis along `y`.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: [f64; 3],
    },
    Cylinder {
        radius: f64,
        half_height: f64,
    },
    /// Disjoint parts, each translated by its offset.
    Composite(Vec<(Shape, Point3)>),
}

impl Shape {
    /// Fixed reference instance of each kind.
    pub fn canonical(kind: ShapeKind) -> Shape {
        match kind {
            ShapeKind::Sphere => Shape::Sphere { radius: 1.0 },
            ShapeKind::Box => Shape::Box {
                half_extents: [0.8, 0.5, 0.6],
            },
            ShapeKind::Cylinder => Shape::Cylinder {
                radius: 0.5,
                half_height: 0.8,
            },
            ShapeKind::Composite => Shape::Composite(vec![
                (
                    Shape::Box {
                        half_extents: [0.6, 0.2, 0.6],
                    },
                    [0.0, -0.3, 0.0],
                ),
                (Shape::Sphere { radius: 0.35 }, [0.0, 0.35, 0.0]),
            ]),
        }
    }

    /// Instance of `kind` with randomized dimensions, fitting in the unit ball.
    pub fn random<R: Rng + ?Sized>(kind: ShapeKind, rng: &mut R) -> Shape {
        match kind {
            ShapeKind::Sphere => Shape::Sphere {
                radius: rng.gen_range(0.5..1.0),
            },
            ShapeKind::Box => Shape::Box {
                half_extents: [(); 3].map(|_| rng.gen_range(0.2..0.55)),
            },
            ShapeKind::Cylinder => Shape::Cylinder {
                radius: rng.gen_range(0.25..0.6),
                half_height: rng.gen_range(0.3..0.75),
            },
            ShapeKind::Composite => {
                let base = [
                    rng.gen_range(0.35..0.6),
                    rng.gen_range(0.1..0.2),
                    rng.gen_range(0.35..0.6),
                ];
                let r = rng.gen_range(0.15..0.3);
                let base_y = -0.25;
                Shape::Composite(vec![
                    (Shape::Box { half_extents: base }, [0.0, base_y, 0.0]),
                    (
                        Shape::Sphere { radius: r },
                        [0.0, base_y + base[1] + r + 0.05, 0.0],
                    ),
                ])
            }
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::Box {
                half_extents: [a, b, c],
            } => 8.0 * (a * b + b * c + a * c),
            Shape::Cylinder {
                radius,
                half_height,
            } => 2.0 * PI * radius * (2.0 * half_height + radius),
            Shape::Composite(parts) => parts.iter().map(|(s, _)| s.area()).sum(),
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn surface_distance(&self, p: Point3) -> f64 {
        match self {
            Shape::Sphere { radius } => (norm(p) - radius).abs(),
            Shape::Box { half_extents: h } => {
                let d = [0, 1, 2].map(|i| p[i].abs() - h[i]);
                if d.iter().all(|&v| v <= 0.0) {
                    -d.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    norm(d.map(|v| v.max(0.0)))
                }
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let side = p[0].hypot(p[2]) - radius;
                let cap = p[1].abs() - half_height;
                if side <= 0.0 && cap <= 0.0 {
                    -side.max(cap)
                } else {
                    side.max(0.0).hypot(cap.max(0.0))
                }
            }
            Shape::Composite(parts) => parts
                .iter()
                .map(|(s, off)| s.surface_distance(sub(p, *off)))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// One point drawn uniformly by area.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3 {
        match self {
            Shape::Sphere { radius } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi = rng.gen_range(0.0..2.0 * PI);
                let rho = (1.0 - z * z).sqrt();
                [
                    radius * rho * phi.cos(),
                    radius * rho * phi.sin(),
                    radius * z,
                ]
            }
            Shape::Box { half_extents: h } => {
                // face pairs normal to x, y, z weighted by area
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let mut pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let mut q = [0.0; 3];
                for i in 0..3 {
                    q[i] = if i == axis {
                        if rng.gen::<bool>() {
                            h[i]
                        } else {
                            -h[i]
                        }
                    } else {
                        rng.gen_range(-h[i]..=h[i])
                    };
                }
                q
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let side = 2.0 * half_height;
                let phi = rng.gen_range(0.0..2.0 * PI);
                if rng.gen_range(0.0..side + radius) < side {
                    let y = rng.gen_range(-half_height..=*half_height);
                    [radius * phi.cos(), y, radius * phi.sin()]
                } else {
                    let r = radius * rng.gen::<f64>().sqrt();
                    let y = if rng.gen::<bool>() {
                        *half_height
                    } else {
                        -half_height
                    };
                    [r * phi.cos(), y, r * phi.sin()]
                }
            }
            Shape::Composite(parts) => {
                let total = self.area();
                let mut pick = rng.gen_range(0.0..total);
                for (s, off) in parts {
                    let a = s.area();
                    if pick < a {
                        return add(s.sample_point(rng), *off);
                    }
                    pick -= a;
                }
                let (s, off) = parts.last().expect("composite has parts");
                add(s.sample_point(rng), *off)
            }
        }
    }
}

/// `n` uniform surface samples of `shape`, reproducible from `seed`.
pub fn gen_shape(shape: &Shape, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    if let Shape::Composite(parts) = shape {
        if parts.is_empty() {
            return Err(invalid("composite shape without parts"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new((0..n).map(|_| shape.sample_point(&mut rng)).collect())
}

/// A scan-like partial of `p` seen from `view`, resized to `target` points.
pub fn make_partial<R: Rng + ?Sized>(
    p: &PointCloud,
    view: Viewpoint,
    target: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    synthesize_view(p, view, resolution, target, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{coverage, ucd};
    use crate::synth::VIEW_EXTENT;

    #[test]
    fn sphere_samples_have_unit_norm() {
        let p = gen_shape(&Shape::Sphere { radius: 1.0 }, 4096, 1).unwrap();
        assert!(p.points().iter().all(|&q| (norm(q) - 1.0).abs() < 1e-9));
        assert!(norm(p.centroid()) < 0.05);
    }

    #[test]
    fn every_kind_samples_its_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in ShapeKind::ALL {
            for shape in [Shape::canonical(kind), Shape::random(kind, &mut rng)] {
                let p = gen_shape(&shape, 2000, 3).unwrap();
                for &q in p.points() {
                    assert!(shape.surface_distance(q) < 1e-9, "{kind:?} {q:?}");
                    assert!(
                        norm(q) <= 1.0 + 1e-9 || matches!(kind, ShapeKind::Box),
                        "{kind:?} {q:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn box_points_sit_on_a_face() {
        let h = [0.3, 0.5, 0.7];
        let p = gen_shape(&Shape::Box { half_extents: h }, 1000, 4).unwrap();
        for q in p.points() {
            assert!((0..3).any(|i| q[i].abs() == h[i]));
            assert!((0..3).all(|i| q[i].abs() <= h[i]));
        }
    }

    #[test]
    fn box_faces_are_area_weighted() {
        let h = [1.0, 0.25, 1.0];
        let p = gen_shape(&Shape::Box { half_extents: h }, 20000, 5).unwrap();
        let top = p.points().iter().filter(|q| q[1].abs() == 0.25).count() as f64 / 20000.0;
        // y faces: 2·(2·2) of total 2·(2·2) + 4·(2·0.5) = 12
        assert!((top - 8.0 / 12.0).abs() < 0.02, "{top}");
    }

    #[test]
    fn cylinder_side_fraction_matches_area() {
        let (r, hh) = (0.5, 0.8);
        let p = gen_shape(
            &Shape::Cylinder {
                radius: r,
                half_height: hh,
            },
            20000,
            6,
        )
        .unwrap();
        let side = p.points().iter().filter(|q| q[1].abs() < hh).count() as f64 / 20000.0;
        assert!((side - 2.0 * hh / (2.0 * hh + r)).abs() < 0.02, "{side}");
    }

    #[test]
    fn generation_is_seeded() {
        let s = Shape::canonical(ShapeKind::Composite);
        assert_eq!(
            gen_shape(&s, 100, 7).unwrap(),
            gen_shape(&s, 100, 7).unwrap()
        );
        assert_ne!(
            gen_shape(&s, 100, 7).unwrap(),
            gen_shape(&s, 100, 8).unwrap()
        );
        assert!(gen_shape(&s, 0, 7).is_err());
    }

    #[test]
    fn partial_is_an_occluded_subset() {
        // dense enough for several front samples per pixel
        let full = gen_shape(&Shape::Sphere { radius: 1.0 }, 32768, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let view = Viewpoint::new(0.0, 0.0, 2.5).unwrap();
        let partial = make_partial(&full, view, 1024, 64, &mut rng).unwrap();
        assert_eq!(partial.len(), 1024);
        // the far hemisphere is gone, apart from sparse rim pixels that only
        // caught far-side samples
        let behind = partial.points().iter().filter(|q| q[2] < -0.2).count();
        assert!(behind < 1024 / 20, "{behind}");
        assert!(partial.centroid()[2] > 0.4);
        assert!(coverage(&partial, &full) > 0.1);
        // back-projected points lie within half a pixel diagonal of the source
        let pixel = VIEW_EXTENT / 64.0;
        assert!(ucd(&partial, &full) < pixel * 0.75);
    }
}
