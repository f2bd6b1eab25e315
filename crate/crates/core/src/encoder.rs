//! Patch embedding, the stacked selective-SSM blocks, and feature fusion.
//!
//! Activations are `[tokens, channels]` matrices. One cloud is encoded per
//! call; the result is a `[GLOBAL_DIM]` vector.

use crate::autodiff::{Graph, Var};
use crate::cloud::{PatchSet, PointCloud};
use crate::error::Result;
use crate::model::{check_points, Bound, BLOCKS, EMBED_HIDDEN, TAPS};

/// Handles of the patch-embedding weights.
#[derive(Clone, Copy, Debug)]
pub struct EmbedVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl EmbedVars {
    pub fn from_bound(b: &Bound) -> Self {
        Self {
            fc1_w: b.var("enc.embed.fc1.w"),
            fc1_b: b.var("enc.embed.fc1.b"),
            fc2_w: b.var("enc.embed.fc2.w"),
            fc2_b: b.var("enc.embed.fc2.b"),
        }
    }
}

/// Handles of one SSM block's weights.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm_w: Var,
    pub in_proj_w: Var,
    pub conv_w: Var,
    pub conv_b: Var,
    pub x_proj_w: Var,
    pub dt_proj_w: Var,
    pub dt_proj_b: Var,
    pub a_log: Var,
    pub out_proj_w: Var,
}

impl BlockVars {
    /// Block `i`, 1-based.
    pub fn from_bound(b: &Bound, i: usize) -> Self {
        let v = |s: &str| b.var(&format!("enc.block{i}.{s}"));
        Self {
            norm_w: v("norm.w"),
            in_proj_w: v("in_proj.w"),
            conv_w: v("conv.w"),
            conv_b: v("conv.b"),
            x_proj_w: v("x_proj.w"),
            dt_proj_w: v("dt_proj.w"),
            dt_proj_b: v("dt_proj.b"),
            a_log: v("A_log"),
            out_proj_w: v("out_proj.w"),
        }
    }
}

/// Per-point edge features `[x_j, x_j − mean(patch)]`, `[m·k, 6]`.
pub fn edge_features(patches: &PatchSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(patches.patches.len() * 6);
    for i in 0..patches.len() {
        let patch = patches.patch(i);
        let mut mean = [0.0; 3];
        for q in patch {
            for c in 0..3 {
                mean[c] += q[c];
            }
        }
        let mean = mean.map(|s| s / patch.len() as f64);
        for q in patch {
            out.extend_from_slice(q);
            out.extend((0..3).map(|c| q[c] - mean[c]));
        }
    }
    out
}

/// One token per patch: a shared two-layer ReLU MLP over edge features,
/// max-pooled over the patch points. Output `[m, d_model]`.
pub fn patch_embed(g: &mut Graph, w: &EmbedVars, patches: &PatchSet) -> Result<Var> {
    let (m, k) = (patches.len(), patches.k);
    let feats = g.constant(vec![m * k, 6], edge_features(patches))?;
    let h = g.linear(feats, w.fc1_w, w.fc1_b)?;
    let h = g.relu(h);
    debug_assert_eq!(g.shape(h)[1], EMBED_HIDDEN);
    let h = g.linear(h, w.fc2_w, w.fc2_b)?;
    let h = g.relu(h);
    let d = g.shape(h)[1];
    let h = g.reshape(h, vec![m, k, d])?;
    g.max_axis(h, 1)
}

/// Residual selective-SSM block over `x: [m, d_model]`:
/// `x + out_proj(scan(silu(conv(xs))) ⊙ silu(z))` with `[xs | z]` the input
/// projection of the RMS-normalized tokens and Δ, B, C projected from the
/// convolved branch.
pub fn mamba_block(g: &mut Graph, w: &BlockVars, x: Var) -> Result<Var> {
    let di = g.shape(w.conv_w)[0];
    let n = g.shape(w.a_log)[1];
    let r = g.shape(w.dt_proj_w)[0];

    let xn = g.rms_norm(x, w.norm_w)?;
    let xz = g.matmul(xn, w.in_proj_w)?;
    let xs = g.narrow(xz, 1, 0, di)?;
    let z = g.narrow(xz, 1, di, di)?;

    let xc = g.causal_conv1d(xs, w.conv_w, w.conv_b)?;
    let xc = g.silu(xc);

    let dbc = g.matmul(xc, w.x_proj_w)?;
    let dt_low = g.narrow(dbc, 1, 0, r)?;
    let b = g.narrow(dbc, 1, r, n)?;
    let c = g.narrow(dbc, 1, r + n, n)?;
    let delta = g.linear(dt_low, w.dt_proj_w, w.dt_proj_b)?;
    let delta = g.softplus(delta);
    let a = g.exp(w.a_log);
    let a = g.neg(a);

    let y = g.selective_scan(xc, delta, a, b, c)?;
    let gate = g.silu(z);
    let y = g.mul(y, gate)?;
    let out = g.matmul(y, w.out_proj_w)?;
    g.add(x, out)
}

/// Tokens → blocks → fusion of blocks 2, 4 and the last → max-pool.
///
/// Each fused stream is RMS-normalized first; tapped streams then pass a
/// per-token linear layer.
pub fn encode_tokens(g: &mut Graph, b: &Bound, tokens: Var) -> Result<Var> {
    let mut x = tokens;
    let mut taps = Vec::with_capacity(TAPS.len() + 1);
    for i in 1..=BLOCKS {
        x = mamba_block(g, &BlockVars::from_bound(b, i), x)?;
        if TAPS.contains(&i) {
            let xn = g.rms_norm(x, b.var(&format!("enc.fuse.norm{i}.w")))?;
            let w = b.var(&format!("enc.fuse.tap{i}.w"));
            let bias = b.var(&format!("enc.fuse.tap{i}.b"));
            taps.push(g.linear(xn, w, bias)?);
        }
    }
    taps.push(g.rms_norm(x, b.var(&format!("enc.fuse.norm{BLOCKS}.w")))?);
    let fused = g.concat(&taps, 1)?;
    let f = g.linear(fused, b.var("enc.fuse.proj.w"), b.var("enc.fuse.proj.b"))?;
    g.max_axis(f, 0)
}

/// Global feature of an already-built patch set.
pub fn encode_patches(g: &mut Graph, b: &Bound, patches: &PatchSet) -> Result<Var> {
    let tokens = patch_embed(g, &EmbedVars::from_bound(b), patches)?;
    encode_tokens(g, b, tokens)
}

/// Global feature of `p`, taken in the caller's frame. `seed` fixes the
/// first FPS key point.
pub fn encode(g: &mut Graph, b: &Bound, p: &PointCloud, seed: u64) -> Result<Var> {
    let cfg = b.config();
    check_points(p.len(), cfg)?;
    let patches = PatchSet::from_cloud(p, cfg.m, cfg.k, cfg.hilbert_order, seed)?;
    encode_patches(g, b, &patches)
}
