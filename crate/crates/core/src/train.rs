//! Self-supervised training: one partial cloud plus `n` synthesized views
//! per step, weighted Chamfer and consistency losses, Adam updates.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::cloud::PointCloud;
use crate::encoder::encode;
use crate::error::{invalid, Error, Result};
use crate::generator::{generate_batch, GeneratorVars};
use crate::metrics::{loss_total, LossWeights};
use crate::model::{check_points, ModelConfig, ModelParams};
use crate::synth::synthesize_views;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub n_views: usize,
    pub weights: LossWeights,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Depth-map side length for view synthesis.
    pub resolution: usize,
    /// Points per synthesized view.
    pub view_points: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            n_views: 8,
            weights: LossWeights::default(),
            steps: 500,
            learning_rate: 1e-3,
            seed: 0,
            resolution: 64,
            view_points: 512,
            clip_norm: 10.0,
            checkpoint_every: 100,
        }
    }
}

const KEYS: &[&str] = &[
    "m",
    "k",
    "d_model",
    "d_state",
    "expand",
    "conv_width",
    "gen_hidden",
    "n_c",
    "hilbert_order",
    "n_views",
    "alpha",
    "beta",
    "gamma",
    "steps",
    "lr",
    "seed",
    "resolution",
    "view_points",
    "clip_norm",
    "checkpoint_every",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.n_views == 0 {
            return Err(Error::Config("n_views must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if self.resolution == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "resolution and checkpoint_every must be at least 1".into(),
            ));
        }
        if self.view_points < self.model.m.max(self.model.k) {
            return Err(Error::Config(format!(
                "view_points = {} is below m = {} or k = {}",
                self.view_points, self.model.m, self.model.k
            )));
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it yields `self` again.
    pub fn to_config_text(&self) -> String {
        let m = &self.model;
        let w = &self.weights;
        let mut out = String::new();
        for (key, value) in [
            ("m", m.m.to_string()),
            ("k", m.k.to_string()),
            ("d_model", m.d_model.to_string()),
            ("d_state", m.d_state.to_string()),
            ("expand", m.expand.to_string()),
            ("conv_width", m.conv_width.to_string()),
            ("gen_hidden", m.gen_hidden.to_string()),
            ("n_c", m.n_c.to_string()),
            ("hilbert_order", m.hilbert_order.to_string()),
            ("n_views", self.n_views.to_string()),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("gamma", w.gamma.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("resolution", self.resolution.to_string()),
            ("view_points", self.view_points.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ] {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_config_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Parse {
        line,
        msg: format!("{key}: {e}"),
    })
}

impl FromStr for TrainConfig {
    type Err = Error;

    /// Flat `key = value` lines over the defaults; `#` starts a comment.
    /// Unknown or repeated keys are errors.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key {key:?}"),
                });
            }
            if seen.contains(&key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            seen.push(key);
            let m = &mut cfg.model;
            match key {
                "m" => m.m = parse_value(key, value, line)?,
                "k" => m.k = parse_value(key, value, line)?,
                "d_model" => m.d_model = parse_value(key, value, line)?,
                "d_state" => m.d_state = parse_value(key, value, line)?,
                "expand" => m.expand = parse_value(key, value, line)?,
                "conv_width" => m.conv_width = parse_value(key, value, line)?,
                "gen_hidden" => m.gen_hidden = parse_value(key, value, line)?,
                "n_c" => m.n_c = parse_value(key, value, line)?,
                "hilbert_order" => m.hilbert_order = parse_value(key, value, line)?,
                "n_views" => cfg.n_views = parse_value(key, value, line)?,
                "alpha" => cfg.weights.alpha = parse_value(key, value, line)?,
                "beta" => cfg.weights.beta = parse_value(key, value, line)?,
                "gamma" => cfg.weights.gamma = parse_value(key, value, line)?,
                "steps" => cfg.steps = parse_value(key, value, line)?,
                "lr" => cfg.learning_rate = parse_value(key, value, line)?,
                "seed" => cfg.seed = parse_value(key, value, line)?,
                "resolution" => cfg.resolution = parse_value(key, value, line)?,
                "view_points" => cfg.view_points = parse_value(key, value, line)?,
                "clip_norm" => cfg.clip_norm = parse_value(key, value, line)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_value(key, value, line)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected update of `param` in place; `t` is the 1-based
    /// step number.
    pub fn update(
        &self,
        param: &mut [f64],
        grad: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        t: usize,
        lr: f64,
    ) {
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Loss values recorded for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub completion: f64,
    pub consistency: f64,
}

pub const HISTORY_HEADER: &str = "step,L,L_com,L_con";

/// Loss history as CSV. Floats use the shortest exact representation, so
/// identical runs give identical bytes.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step, r.total, r.completion, r.consistency
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            params,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Fresh parameters initialized from `cfg.seed`.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self::new(ModelParams::init(&cfg.model, cfg.seed)?))
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Applies one Adam step with the given gradients.
    pub fn apply_gradients(&mut self, grads: &[Vec<f64>], lr: f64) {
        let t = self.step + 1;
        let adam = Adam::default();
        for (i, tensor) in self.params.tensors_mut().iter_mut().enumerate() {
            adam.update(
                tensor.data_mut(),
                &grads[i],
                &mut self.first_moment[i],
                &mut self.second_moment[i],
                t,
                lr,
            );
        }
        self.step = t;
    }
}

/// Loss values and gradients of one step, before the update.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: LossRecord,
    pub grads: Vec<Vec<f64>>,
    pub grad_norm: f64,
}

/// Forward and backward pass for `p` and its views, without updating.
///
/// `p` is used in its own frame; views are synthesized from it, so they
/// share that frame, and enter the graph as plain data.
pub fn compute_step<R: Rng + ?Sized>(
    params: &ModelParams,
    p: &PointCloud,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    if cfg.n_views == 0 {
        return Err(invalid("n_views must be at least 1"));
    }
    check_points(p.len(), &cfg.model)?;
    let seed: u64 = rng.gen();
    let views = synthesize_views(p, cfg.n_views, cfg.view_points, cfg.resolution, rng)?;
    let view_seeds: Vec<u64> = (0..views.len()).map(|_| rng.gen()).collect();

    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let mut features = vec![encode(&mut g, &b, p, seed)?];
    for (v, &s) in views.iter().zip(&view_seeds) {
        features.push(encode(&mut g, &b, v, s)?);
    }
    let clouds = generate_batch(&mut g, &GeneratorVars::from_bound(&b), &features)?;
    let terms = loss_total(&mut g, p, clouds[0], &clouds[1..], &cfg.weights)?;
    let record = LossRecord {
        step: 0,
        total: g.value(terms.total)[0],
        completion: g.value(terms.completion)[0],
        consistency: g.value(terms.consistency)[0],
    };
    if !record.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", record.total)));
    }
    g.backward(terms.total)?;
    let mut grads = b.grads(&g);
    if grads.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    Ok(StepOutcome {
        record,
        grads,
        grad_norm,
    })
}

/// One training step on `p`, which should already be unit-normalized.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    p: &PointCloud,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossRecord> {
    let outcome = compute_step(&state.params, p, cfg, rng)?;
    state.apply_gradients(&outcome.grads, cfg.learning_rate);
    let record = LossRecord {
        step: state.step,
        ..outcome.record
    };
    state.history.push(record);
    Ok(record)
}

/// Trains fresh parameters on `dataset`, visiting clouds in a reshuffled
/// order every epoch. Clouds are unit-normalized first. `on_checkpoint`
/// runs after every `cfg.checkpoint_every` steps.
pub fn train_with<F>(
    dataset: &[PointCloud],
    cfg: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    let clouds: Vec<PointCloud> = dataset.iter().map(|p| p.normalize_unit().0).collect();
    let mut state = TrainState::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    while state.step < cfg.steps {
        if order.is_empty() {
            order = (0..clouds.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let i = order.pop().expect("refilled above");
        train_step(&mut state, &clouds[i], cfg, &mut rng)?;
        if state.step % cfg.checkpoint_every == 0 {
            on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

pub fn train(dataset: &[PointCloud], cfg: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, cfg, |_| Ok(()))
}

/// Predictions for clouds already in the model frame, one per input.
pub fn predict(params: &ModelParams, clouds: &[PointCloud], seed: u64) -> Result<Vec<PointCloud>> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let mut features = Vec::with_capacity(clouds.len());
    for p in clouds {
        features.push(encode(&mut g, &b, p, seed)?);
    }
    let outs = generate_batch(&mut g, &GeneratorVars::from_bound(&b), &features)?;
    outs.into_iter()
        .map(|v| PointCloud::from_flat(g.value(v)))
        .collect()
}

/// Completion of `p` in its own frame: normalize, encode, generate, and map
/// back.
pub fn complete(params: &ModelParams, p: &PointCloud, seed: u64) -> Result<PointCloud> {
    check_points(p.len(), params.config())?;
    let (normalized, frame) = p.normalize_unit();
    let out = predict(params, &[normalized], seed)?.remove(0);
    Ok(out.map(|q| frame.invert(q)))
}

/// Mean over all view pairs of `‖C_i − C_j‖² / n_c` for predictions from
/// views that share one frame.
pub fn pairwise_consistency(params: &ModelParams, views: &[PointCloud], seed: u64) -> Result<f64> {
    if views.len() < 2 {
        return Err(invalid("pairwise consistency needs at least two views"));
    }
    let preds = predict(params, views, seed)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let sq: f64 = preds[i]
                .to_flat()
                .iter()
                .zip(preds[j].to_flat())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += sq / preds[i].len() as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Text stored next to a checkpoint.
pub fn sidecar_text(step: usize, cfg: &TrainConfig) -> String {
    format!(
        "step = {step}\nconfig_hash = {}\n{}",
        cfg.hash(),
        cfg.to_config_text()
    )
}

/// Step count and config from [`sidecar_text`] output; the stored hash must
/// match the config.
pub fn parse_sidecar(text: &str) -> Result<(usize, TrainConfig)> {
    let mut lines = text.lines();
    let mut field = |key: &str| -> Result<String> {
        let line = lines.next().unwrap_or("");
        match line.split_once('=') {
            Some((k, v)) if k.trim() == key => Ok(v.trim().to_string()),
            _ => Err(Error::Checkpoint(format!("sidecar lacks {key}"))),
        }
    };
    let step = field("step")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("sidecar step: {e}")))?;
    let hash = field("config_hash")?;
    let cfg: TrainConfig = lines.collect::<Vec<_>>().join("\n").parse()?;
    if cfg.hash() != hash {
        return Err(Error::Checkpoint(
            "sidecar config does not match its hash".into(),
        ));
    }
    Ok((step, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BLOCKS;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                m: 8,
                k: 4,
                d_model: 16,
                d_state: 4,
                gen_hidden: 32,
                n_c: 32,
                ..ModelConfig::default()
            },
            n_views: 2,
            steps: 3,
            resolution: 16,
            view_points: 48,
            ..TrainConfig::default()
        }
    }

    fn sphere(n: usize) -> PointCloud {
        // Fibonacci sphere
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        PointCloud::new(
            (0..n)
                .map(|i| {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - y * y).sqrt();
                    let t = golden * i as f64;
                    [r * t.cos(), y, r * t.sin()]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = toy_cfg();
        let back: TrainConfig = cfg.to_config_text().parse().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(TrainConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn config_parsing_rules() {
        let cfg: TrainConfig = "# comment\n\ngamma = 0 # ablation\nsteps=10\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.weights.gamma, 0.0);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.model.d_model, 128);
        let err = "steps = 10\nlearning_rat = 0.1\n"
            .parse::<TrainConfig>()
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!("steps = 1\nsteps = 2".parse::<TrainConfig>().is_err());
        assert!("steps = ten".parse::<TrainConfig>().is_err());
        assert!("n_views = 0".parse::<TrainConfig>().is_err());
        assert!("lr = 0".parse::<TrainConfig>().is_err());
        assert!("just words".parse::<TrainConfig>().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -2.0, 3.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        Adam::default().update(&mut p, &[0.5, -4.0, 0.0], &mut m, &mut v, 1, 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert_eq!(p[2], 3.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn update_replays_from_recorded_gradients() {
        let cfg = toy_cfg();
        let p = sphere(200);
        let mut state = TrainState::init(&cfg).unwrap();
        let before = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        train_step(&mut state, &p, &cfg, &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let outcome = compute_step(&before.params, &p, &cfg, &mut rng).unwrap();
        let mut replay = before;
        replay.apply_gradients(&outcome.grads, cfg.learning_rate);
        assert_eq!(replay.params, state.params);
        assert_eq!(replay.moments(), state.moments());
    }

    #[test]
    fn zero_views_rejected() {
        let cfg = TrainConfig {
            n_views: 0,
            ..toy_cfg()
        };
        let mut state = TrainState::init(&toy_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(train_step(&mut state, &sphere(100), &cfg, &mut rng).is_err());
        assert!(train(&[sphere(100)], &cfg).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(train(&[], &toy_cfg()).is_err());
    }

    #[test]
    fn history_and_determinism() {
        let cfg = toy_cfg();
        let data = [sphere(150), sphere(120).map(|q| [q[0] * 2.0, q[1], q[2]])];
        let mut checkpoints = Vec::new();
        let cfg_ck = TrainConfig {
            checkpoint_every: 2,
            steps: 5,
            ..cfg.clone()
        };
        let a = train_with(&data, &cfg_ck, |s| {
            checkpoints.push(s.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(checkpoints, vec![2, 4]);
        assert_eq!(a.history.len(), 5);
        assert_eq!(
            a.history.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
        let b = train(&data, &cfg_ck).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert!(history_csv(&a.history).starts_with("step,L,L_com,L_con\n1,"));
    }

    #[test]
    fn consistency_gradient_moves_params_only_when_views_disagree() {
        let mut cfg = toy_cfg();
        cfg.weights = LossWeights::new(0.0, 0.0, 15.0).unwrap();
        let p = sphere(200);

        // zero generator weights: every prediction equals the fc3 bias, so views agree
        let mut params = ModelParams::init(&cfg.model, 1).unwrap();
        params
            .get_mut("gen.fc3.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = compute_step(&params, &p, &cfg, &mut rng).unwrap();
        assert_eq!(out.record.consistency, 0.0);
        assert!(out.grads.iter().flatten().all(|&g| g == 0.0));

        let params = ModelParams::init(&cfg.model, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = compute_step(&params, &p, &cfg, &mut rng).unwrap();
        assert!(out.record.consistency > 0.0);
        assert!(out.grads.iter().flatten().any(|&g| g != 0.0));
    }

    #[test]
    fn complete_returns_n_c_points_in_input_frame() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg.model, 3).unwrap();
        let p = sphere(100);
        let out = complete(&params, &p, 0).unwrap();
        assert_eq!(out.len(), cfg.model.n_c);
        let moved = p.map(|q| [q[0] * 3.0 + 5.0, q[1] * 3.0, q[2] * 3.0 - 1.0]);
        let out_moved = complete(&params, &moved, 0).unwrap();
        for (a, b) in out.points().iter().zip(out_moved.points()) {
            assert!((a[0] * 3.0 + 5.0 - b[0]).abs() < 1e-9);
        }
        assert!(complete(&params, &sphere(3), 0).is_err());
    }

    #[test]
    fn zeroed_output_layer_gives_input_independent_completion() {
        let cfg = toy_cfg();
        let mut params = ModelParams::init(&cfg.model, 4).unwrap();
        params
            .get_mut("gen.fc3.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let a = predict(&params, &[sphere(100)], 0).unwrap();
        let b = predict(&params, &[sphere(90).map(|q| [q[0], q[1] * 0.5, q[2]])], 1).unwrap();
        assert_eq!(a, b);
        // fresh blocks are identities, so the encoder reduces to embed + fusion
        for i in 1..=BLOCKS {
            let w = params.get(&format!("enc.block{i}.out_proj.w")).unwrap();
            assert!(w.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sidecar_names_step_and_hash() {
        let cfg = toy_cfg();
        let text = sidecar_text(300, &cfg);
        assert!(text.starts_with(&format!("step = 300\nconfig_hash = {}\n", cfg.hash())));
        assert_eq!(parse_sidecar(&text).unwrap(), (300, cfg));
        let tampered = text.replace("gamma = 15", "gamma = 1");
        assert!(parse_sidecar(&tampered).is_err());
    }
}
