//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Leave out coordinates whose left and right difference quotients
    /// disagree, i.e. where `x ± eps` straddles a kink (ReLU, max, a switch
    /// of nearest neighbor). There the central difference is not a gradient.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords: None,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest norm-wise relative error over the checked inputs.
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates left out as kinks.
    pub skipped: usize,
}

/// Largest norm-wise relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` over the
/// tracked `inputs`, where `g` is the backpropagated gradient of the scalar
/// built by `build` and `g_fd` its central-difference estimate.
///
/// Inputs whose analytic and numeric gradients both vanish count as exact.
pub fn max_relative_error<F>(inputs: &[Tensor], opts: GradCheckOptions, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(check_gradients(inputs, opts, build)?.max_error)
}

/// As [`max_relative_error`], also counting checked and skipped coordinates.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    opts: GradCheckOptions,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let center = g.value(out)[0];
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if !t.is_tracked() {
            continue;
        }
        let analytic = g
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(c) if c < t.numel() => sample(&mut rng, t.numel(), c).into_vec(),
            _ => (0..t.numel()).collect(),
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let x = t.data()[j];
            probe[i].data_mut()[j] = x + opts.eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - opts.eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            if opts.skip_kinks {
                let (right, left) = ((up - center) / opts.eps, (center - down) / opts.eps);
                if (right - left).abs() > 1e-3 * (1.0 + right.abs() + left.abs()) {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            let numeric = (up - down) / (2.0 * opts.eps);
            diff += (analytic[j] - numeric).powi(2);
            na += analytic[j].powi(2);
            nn += numeric.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 0.0 {
            report.max_error = report.max_error.max(diff.sqrt() / scale);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_polynomial() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0])
            .unwrap()
            .requires_grad();
        let err = max_relative_error(&[x], GradCheckOptions::default(), |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let cube = g.mul(sq, v[0])?;
            Ok(g.sum(cube))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependence from backward but not from the probe
        let x = Tensor::new(vec![2], vec![1.0, 2.0])
            .unwrap()
            .requires_grad();
        let err = max_relative_error(&[x], GradCheckOptions::default(), |g, v| {
            let hidden = g.detach(v[0]);
            let sq = g.mul(hidden, v[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn kinks_are_skipped_only_on_request() {
        // |x| at 1e-7 is within eps of its kink
        let x = Tensor::new(vec![2], vec![1e-7, 0.5])
            .unwrap()
            .requires_grad();
        let build = |g: &mut Graph, v: &[Var]| {
            let pos = g.relu(v[0]);
            let neg = g.neg(v[0]);
            let neg = g.relu(neg);
            let abs = g.add(pos, neg)?;
            Ok(g.sum(abs))
        };
        let plain =
            check_gradients(std::slice::from_ref(&x), GradCheckOptions::default(), build).unwrap();
        assert!(plain.max_error > 0.1);
        let opts = GradCheckOptions {
            skip_kinks: true,
            ..GradCheckOptions::default()
        };
        let r = check_gradients(&[x], opts, build).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.max_error < 1e-8);
    }
}
