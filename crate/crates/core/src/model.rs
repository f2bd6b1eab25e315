//! Model hyperparameters and the named learnable parameter set.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::checkpoint::{read_params, write_params};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Number of stacked SSM blocks.
pub const BLOCKS: usize = 8;
/// Blocks whose outputs are tapped for fusion, 1-based.
pub const TAPS: [usize; 2] = [2, 4];
/// Width of the global feature.
pub const GLOBAL_DIM: usize = 512;
/// Hidden width of the edge-feature MLP in the patch embedder.
pub const EMBED_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Key points (tokens) per cloud.
    pub m: usize,
    /// Points per patch.
    pub k: usize,
    pub d_model: usize,
    pub d_state: usize,
    /// `d_inner = expand · d_model`.
    pub expand: usize,
    pub conv_width: usize,
    /// Generator hidden width.
    pub gen_hidden: usize,
    /// Output points.
    pub n_c: usize,
    pub hilbert_order: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 64,
            k: 16,
            d_model: 128,
            d_state: 16,
            expand: 2,
            conv_width: 4,
            gen_hidden: 1024,
            n_c: 512,
            hilbert_order: 6,
        }
    }
}

impl ModelConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Rank of the low-rank Δ projection.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("k", self.k),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("conv_width", self.conv_width),
            ("gen_hidden", self.gen_hidden),
            ("n_c", self.n_c),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(1..=21).contains(&self.hilbert_order) {
            return Err(Error::Config(format!(
                "hilbert_order must be in 1..=21, got {}",
                self.hilbert_order
            )));
        }
        Ok(())
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, di, n, r) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank());
        let h = self.gen_hidden;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("enc.embed.fc1.w".into(), vec![6, EMBED_HIDDEN]),
            ("enc.embed.fc1.b".into(), vec![EMBED_HIDDEN]),
            ("enc.embed.fc2.w".into(), vec![EMBED_HIDDEN, d]),
            ("enc.embed.fc2.b".into(), vec![d]),
        ];
        for i in 1..=BLOCKS {
            let p = |s: &str| format!("enc.block{i}.{s}");
            out.extend([
                (p("norm.w"), vec![d]),
                (p("in_proj.w"), vec![d, 2 * di]),
                (p("conv.w"), vec![di, self.conv_width]),
                (p("conv.b"), vec![di]),
                (p("x_proj.w"), vec![di, r + 2 * n]),
                (p("dt_proj.w"), vec![r, di]),
                (p("dt_proj.b"), vec![di]),
                (p("A_log"), vec![di, n]),
                (p("out_proj.w"), vec![di, d]),
            ]);
        }
        for t in TAPS {
            out.push((format!("enc.fuse.norm{t}.w"), vec![d]));
            out.push((format!("enc.fuse.tap{t}.w"), vec![d, d]));
            out.push((format!("enc.fuse.tap{t}.b"), vec![d]));
        }
        out.push((format!("enc.fuse.norm{BLOCKS}.w"), vec![d]));
        out.push(("enc.fuse.proj.w".into(), vec![3 * d, GLOBAL_DIM]));
        out.push(("enc.fuse.proj.b".into(), vec![GLOBAL_DIM]));
        for (i, (fan_in, fan_out)) in [(GLOBAL_DIM, h), (h, h), (h, 3 * self.n_c)]
            .into_iter()
            .enumerate()
        {
            out.push((format!("gen.fc{}.w", i + 1), vec![fan_in, fan_out]));
            out.push((format!("gen.fc{}.b", i + 1), vec![fan_out]));
        }
        out
    }
}

/// `y` such that `softplus(y) = x`, for `x > 0`.
fn inverse_softplus(x: f64) -> f64 {
    x + (-(-x).exp_m1()).ln()
}

fn fan_in_of(name: &str, cfg: &ModelConfig) -> usize {
    match name.rsplit_once('.').map(|(stem, _)| stem).unwrap_or(name) {
        s if s.ends_with("embed.fc1") => 6,
        s if s.ends_with("embed.fc2") => EMBED_HIDDEN,
        s if s.ends_with("in_proj") => cfg.d_model,
        s if s.ends_with("conv") => cfg.conv_width,
        s if s.ends_with("x_proj") => cfg.d_inner(),
        s if s.ends_with("dt_proj") => cfg.dt_rank(),
        s if s.ends_with("out_proj") => cfg.d_inner(),
        s if s.contains("fuse.tap") => cfg.d_model,
        s if s.ends_with("fuse.proj") => 3 * cfg.d_model,
        "gen.fc1" => GLOBAL_DIM,
        _ => cfg.gen_hidden,
    }
}

/// The full learnable state, addressed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Fresh parameters: uniform `±1/√fan_in` for weights and biases, RMS
    /// scales at 1, `A_log[d, n] = ln(n + 1)`, Δ biases so that
    /// `softplus(bias)` is log-uniform in `[1e-3, 1e-1]`, and zero `out_proj`.
    /// Patch-embedding biases start at zero: patch offsets are small, and a
    /// random bias would swamp them.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("norm.w") || name.contains(".fuse.norm") {
                vec![1.0; numel]
            } else if name.ends_with("out_proj.w")
                || name.starts_with("enc.embed.") && name.ends_with(".b")
            {
                vec![0.0; numel]
            } else if name.ends_with("A_log") {
                (0..numel)
                    .map(|i| ((i % config.d_state) as f64 + 1.0).ln())
                    .collect()
            } else if name.ends_with("dt_proj.b") {
                let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
                (0..numel)
                    .map(|_| inverse_softplus(rng.gen_range(lo..hi).exp()))
                    .collect()
            } else {
                let bound = 1.0 / (fan_in_of(&name, config) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            entries.push((name, Tensor::new(shape, data)?));
        }
        Self::from_entries(config.clone(), entries)
    }

    /// Parameters from explicit tensors; names and shapes must match
    /// `config` exactly.
    pub fn from_entries(config: ModelConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut given: HashMap<String, Tensor> = HashMap::with_capacity(entries.len());
        for (name, t) in entries {
            if given.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let t = given
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if let Some(bad) = t.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name} holds {bad}")));
            }
            names.push(name);
            tensors.push(t.detach());
        }
        if let Some(extra) = given.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Records every parameter as a tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.detach().requires_grad()))
            .collect();
        Bound { params: self, vars }
    }

    /// Records every parameter as an untracked constant, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| g.leaf(t.detach())).collect();
        Bound { params: self, vars }
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        write_params(out, self.iter())
    }

    pub fn load<R: Read>(input: R, config: &ModelConfig) -> Result<Self> {
        Self::from_entries(config.clone(), read_params(input)?)
    }
}

/// Parameters recorded on a graph.
pub struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Handle of a named parameter.
    ///
    /// # Panics
    /// If `name` is not a parameter of this configuration.
    pub fn var(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("no parameter named {name}"),
        }
    }

    /// Handles in canonical parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients accumulated on every parameter, zeros where none reached.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(&v, t)| {
                g.grad(v)
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect()
    }
}

pub(crate) fn check_points(n: usize, cfg: &ModelConfig) -> Result<()> {
    if n < cfg.k || n < cfg.m {
        return Err(invalid(format!(
            "cloud of {n} points is smaller than m = {} or k = {}",
            cfg.m, cfg.k
        )));
    }
    Ok(())
}
