//! Point-set distances, evaluation metrics, and the training losses.
//!
//! All distances are plain (non-squared) Euclidean, so `cd = precision +
//! coverage` holds exactly.

use crate::autodiff::{Graph, Var};
use crate::cloud::{dist2, PointCloud};
use crate::error::{invalid, Error, Result};

/// For every point of `from`, the index of its nearest point in `to` and the
/// distance to it. Ties go to the lowest index.
pub fn nearest(from: &PointCloud, to: &PointCloud) -> Vec<(usize, f64)> {
    let targets = to.points();
    from.points()
        .iter()
        .map(|&x| {
            let mut best = (0, f64::INFINITY);
            for (j, &y) in targets.iter().enumerate() {
                let d = dist2(x, y);
                if d < best.1 {
                    best = (j, d);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

/// Mean over `a` of the distance to the nearest point of `b`.
pub fn directional_dist(a: &PointCloud, b: &PointCloud) -> f64 {
    let total: f64 = nearest(a, b).iter().map(|&(_, d)| d).sum();
    total / a.len() as f64
}

/// How far predicted points stray from the reference.
pub fn precision(pred: &PointCloud, gt: &PointCloud) -> f64 {
    directional_dist(pred, gt)
}

/// How well the prediction covers the reference.
pub fn coverage(pred: &PointCloud, gt: &PointCloud) -> f64 {
    directional_dist(gt, pred)
}

pub fn cd(pred: &PointCloud, gt: &PointCloud) -> f64 {
    precision(pred, gt) + coverage(pred, gt)
}

/// Unidirectional Chamfer distance from the partial input to the prediction.
pub fn ucd(partial: &PointCloud, pred: &PointCloud) -> f64 {
    directional_dist(partial, pred)
}

/// Unidirectional Hausdorff distance from the partial input to the prediction.
pub fn uhd(partial: &PointCloud, pred: &PointCloud) -> f64 {
    nearest(partial, pred)
        .iter()
        .map(|&(_, d)| d)
        .fold(0.0, f64::max)
}

/// Evaluation metrics for one prediction. Values are unscaled; see
/// [`MetricReport::table_scaled`] for the customary reporting units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub precision: f64,
    pub coverage: f64,
    pub cd: f64,
    pub ucd: Option<f64>,
    pub uhd: Option<f64>,
}

pub const CSV_HEADER: &str = "name,precision,coverage,cd,ucd,uhd";

impl MetricReport {
    pub fn evaluate(pred: &PointCloud, gt: &PointCloud, partial: Option<&PointCloud>) -> Self {
        let precision = precision(pred, gt);
        let coverage = coverage(pred, gt);
        Self {
            precision,
            coverage,
            cd: precision + coverage,
            ucd: partial.map(|p| ucd(p, pred)),
            uhd: partial.map(|p| uhd(p, pred)),
        }
    }

    /// Precision/coverage/CD ×100, UCD ×10⁴, UHD ×100.
    pub fn table_scaled(&self) -> Self {
        Self {
            precision: self.precision * 100.0,
            coverage: self.coverage * 100.0,
            cd: self.cd * 100.0,
            ucd: self.ucd.map(|v| v * 10_000.0),
            uhd: self.uhd.map(|v| v * 100.0),
        }
    }

    /// `name,precision,coverage,cd,ucd,uhd` with empty fields for absent metrics.
    pub fn to_csv_line(&self, name: &str) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{name},{},{},{},{},{}",
            self.precision,
            self.coverage,
            self.cd,
            opt(self.ucd),
            opt(self.uhd)
        )
    }

    pub fn from_csv_line(line: &str) -> Result<(String, Self)> {
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: 1,
                msg: format!("{s:?}: {e}"),
            })
        };
        let opt = |s: &str| {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        Ok((
            fields[0].to_string(),
            Self {
                precision: num(fields[1])?,
                coverage: num(fields[2])?,
                cd: num(fields[3])?,
                ucd: opt(fields[4])?,
                uhd: opt(fields[5])?,
            },
        ))
    }
}

/// Weights of the completion and consistency losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.9,
            gamma: 15.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn cloud_of(g: &Graph, c: Var) -> Result<PointCloud> {
    let shape = g.shape(c);
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::Shape {
            op: "point tensor",
            lhs: shape.to_vec(),
            rhs: vec![3],
        });
    }
    PointCloud::from_flat(g.value(c))
}

/// Weighted Chamfer loss between the fixed partial `p` and the prediction
/// `c: [n_c, 3]`:
/// `α·mean_{x∈C} min_{y∈P} ‖x−y‖ + β·mean_{y∈P} min_{x∈C} ‖y−x‖`.
///
/// Nearest-neighbor assignments are taken from the forward values and held
/// fixed for the backward pass.
pub fn loss_com(g: &mut Graph, p: &PointCloud, c: Var, w: &LossWeights) -> Result<Var> {
    let pred = cloud_of(g, c)?;
    let n_c = pred.len();

    let to_partial: Vec<f64> = nearest(&pred, p)
        .iter()
        .flat_map(|&(j, _)| p.get(j))
        .collect();
    let targets = g.constant(vec![n_c, 3], to_partial)?;
    let diff = g.sub(c, targets)?;
    let norms = g.row_norms(diff)?;
    let term_pred = g.mean(norms);

    let rows: Vec<usize> = nearest(p, &pred).into_iter().map(|(j, _)| j).collect();
    let matched = g.gather_rows(c, &rows)?;
    let partial = g.constant(vec![p.len(), 3], p.to_flat())?;
    let diff = g.sub(matched, partial)?;
    let norms = g.row_norms(diff)?;
    let term_partial = g.mean(norms);

    let a = g.scale(term_pred, w.alpha);
    let b = g.scale(term_partial, w.beta);
    g.add(a, b)
}

/// Consistency between view predictions and the main prediction:
/// `1/(n_c·n) Σ_i ‖C_i − C‖²`, pointwise by output index.
pub fn loss_con(g: &mut Graph, views: &[Var], c: Var) -> Result<Var> {
    if views.is_empty() {
        return Err(invalid("consistency loss needs at least one view"));
    }
    let shape = g.shape(c).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "loss_con",
            lhs: shape,
            rhs: vec![],
        });
    }
    let mut total: Option<Var> = None;
    for &v in views {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::Shape {
                op: "loss_con",
                lhs: shape,
                rhs: g.shape(v).to_vec(),
            });
        }
        let d = g.sub(v, c)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("views is non-empty");
    Ok(g.scale(total, 1.0 / (shape[0] * views.len()) as f64))
}

/// The three loss values of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub completion: Var,
    pub consistency: Var,
}

/// `L = L_com + γ·L_con`.
pub fn loss_total(
    g: &mut Graph,
    p: &PointCloud,
    c: Var,
    views: &[Var],
    w: &LossWeights,
) -> Result<LossTerms> {
    let completion = loss_com(g, p, c, w)?;
    let consistency = loss_con(g, views, c)?;
    let weighted = g.scale(consistency, w.gamma);
    let total = g.add(completion, weighted)?;
    Ok(LossTerms {
        total,
        completion,
        consistency,
    })
}
