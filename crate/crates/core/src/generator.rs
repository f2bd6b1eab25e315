//! Fully connected decoder from the global feature to `n_c` points.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, GLOBAL_DIM};

/// Handles of the three generator layers.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub w: [Var; 3],
    pub b: [Var; 3],
}

impl GeneratorVars {
    pub fn from_bound(b: &Bound) -> Self {
        Self {
            w: [1, 2, 3].map(|i| b.var(&format!("gen.fc{i}.w"))),
            b: [1, 2, 3].map(|i| b.var(&format!("gen.fc{i}.b"))),
        }
    }
}

/// Decodes a batch of global features `[batch, 512]` into
/// `[batch, 3·n_c]` rows: `fc3(relu(fc2(relu(fc1(g)))))`.
pub fn generate_rows(g: &mut Graph, w: &GeneratorVars, features: Var) -> Result<Var> {
    let shape = g.shape(features);
    if shape.len() != 2 || shape[1] != GLOBAL_DIM {
        return Err(Error::Shape {
            op: "generate",
            lhs: shape.to_vec(),
            rhs: vec![GLOBAL_DIM],
        });
    }
    let h = g.linear(features, w.w[0], w.b[0])?;
    let h = g.relu(h);
    let h = g.linear(h, w.w[1], w.b[1])?;
    let h = g.relu(h);
    g.linear(h, w.w[2], w.b[2])
}

/// One `[n_c, 3]` cloud per `[512]` feature. The clouds share one pass
/// through the layers.
pub fn generate_batch(g: &mut Graph, w: &GeneratorVars, features: &[Var]) -> Result<Vec<Var>> {
    for &f in features {
        if g.shape(f) != [GLOBAL_DIM] {
            return Err(Error::Shape {
                op: "generate",
                lhs: g.shape(f).to_vec(),
                rhs: vec![GLOBAL_DIM],
            });
        }
    }
    let batch = features.len();
    let stacked = g.concat(features, 0)?;
    let stacked = g.reshape(stacked, vec![batch, GLOBAL_DIM])?;
    let rows = generate_rows(g, w, stacked)?;
    let width = g.shape(rows)[1];
    (0..batch)
        .map(|i| {
            let row = g.narrow(rows, 0, i, 1)?;
            g.reshape(row, vec![width / 3, 3])
        })
        .collect()
}

/// `[n_c, 3]` cloud from a single `[512]` feature.
pub fn generate(g: &mut Graph, w: &GeneratorVars, feature: Var) -> Result<Var> {
    Ok(generate_batch(g, w, &[feature])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{max_relative_error, GradCheckOptions};
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HIDDEN: usize = 24;
    const N_C: usize = 10;

    fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .unwrap()
    }

    fn layer_tensors(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![
            uniform(vec![GLOBAL_DIM, HIDDEN], 0.1, rng),
            uniform(vec![HIDDEN, HIDDEN], 0.3, rng),
            uniform(vec![HIDDEN, 3 * N_C], 0.3, rng),
            uniform(vec![HIDDEN], 0.1, rng),
            uniform(vec![HIDDEN], 0.1, rng),
            uniform(vec![3 * N_C], 0.1, rng),
        ]
    }

    fn vars(v: &[Var]) -> GeneratorVars {
        GeneratorVars {
            w: [v[0], v[1], v[2]],
            b: [v[3], v[4], v[5]],
        }
    }

    fn run(layers: &[Tensor], feature: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let v: Vec<Var> = layers.iter().map(|t| g.leaf(t.clone())).collect();
        let f = g.leaf(feature.clone());
        let out = generate(&mut g, &vars(&v), f).unwrap();
        assert_eq!(g.shape(out), &[N_C, 3]);
        g.value(out).to_vec()
    }

    #[test]
    fn zero_weights_put_every_point_at_origin() {
        let layers = vec![
            Tensor::zeros(vec![GLOBAL_DIM, HIDDEN]),
            Tensor::zeros(vec![HIDDEN, HIDDEN]),
            Tensor::zeros(vec![HIDDEN, 3 * N_C]),
            Tensor::zeros(vec![HIDDEN]),
            Tensor::zeros(vec![HIDDEN]),
            Tensor::zeros(vec![3 * N_C]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = run(&layers, &uniform(vec![GLOBAL_DIM], 1.0, &mut rng));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_features_give_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers = layer_tensors(&mut rng);
        let f = uniform(vec![GLOBAL_DIM], 1.0, &mut rng);
        let mut g = Graph::new();
        let v: Vec<Var> = layers.iter().map(|t| g.leaf(t.clone())).collect();
        let a = g.leaf(f.clone());
        let b = g.leaf(f.clone());
        let other = g.leaf(uniform(vec![GLOBAL_DIM], 1.0, &mut rng));
        let outs = generate_batch(&mut g, &vars(&v), &[a, other, b]).unwrap();
        assert_eq!(g.value(outs[0]), g.value(outs[2]));
        assert_ne!(g.value(outs[0]), g.value(outs[1]));
        // batching does not change any member's result
        assert_eq!(g.value(outs[0]), run(&layers, &f).as_slice());
    }

    #[test]
    fn rejects_wrong_feature_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = layer_tensors(&mut rng);
        let mut g = Graph::new();
        let v: Vec<Var> = layers.iter().map(|t| g.leaf(t.clone())).collect();
        let f = g.leaf(Tensor::zeros(vec![100]));
        assert!(generate(&mut g, &vars(&v), f).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            let mut inputs: Vec<Tensor> = layer_tensors(&mut rng)
                .into_iter()
                .map(Tensor::requires_grad)
                .collect();
            inputs.push(uniform(vec![GLOBAL_DIM], 1.0, &mut rng).requires_grad());
            let probe = uniform(vec![N_C, 3], 1.0, &mut rng);
            let opts = GradCheckOptions {
                max_coords: Some(30),
                seed,
                ..GradCheckOptions::default()
            };
            let err = max_relative_error(&inputs, opts, |g, v| {
                let out = generate(g, &vars(v), v[6])?;
                let p = g.constant(vec![N_C, 3], probe.data().to_vec())?;
                let prod = g.mul(out, p)?;
                Ok(g.sum(prod))
            })
            .unwrap();
            assert!(err < 1e-4, "instance {seed}: {err}");
        }
    }
}
