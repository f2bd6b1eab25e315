use super::kernels::gemm;
use super::{Graph, Op, Var};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    ScalarLhs,
    ScalarRhs,
}

#[derive(Debug)]
pub(crate) struct ScanSaved {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    steps: usize,
    channels: usize,
    states: usize,
    // h[t, d, n] for every step
    hidden: Vec<f64>,
    // exp(Δ[t, d]·A[d, n]) for every step
    decay: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Graph {
    fn broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<(Vec<usize>, Broadcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok((sa.to_vec(), Broadcast::Same))
        } else if sa.is_empty() {
            Ok((sb.to_vec(), Broadcast::ScalarLhs))
        } else if sb.is_empty() {
            Ok((sa.to_vec(), Broadcast::ScalarRhs))
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_with(&self, a: Var, b: Var, mode: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        match mode {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::ScalarLhs => vb.iter().map(|&y| f(va[0], y)).collect(),
            Broadcast::ScalarRhs => va.iter().map(|&x| f(x, vb[0])).collect(),
        }
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a])
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            0.0,
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Affine map `x·w + bias` with `bias` added to every row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if sb != [sw[1]] {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: sw.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bv = self.value(bias);
        let mut out: Vec<f64> = (0..m).flat_map(|_| bv.iter().copied()).collect();
        gemm(
            m,
            k,
            n,
            self.value(x),
            false,
            self.value(w),
            false,
            1.0,
            &mut out,
        );
        Ok(self.push(
            vec![m, n],
            out,
            Op::Linear {
                x,
                w,
                bias,
                m,
                k,
                n,
            },
            &[x, w, bias],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, mode) = self.broadcast(a, b, "add")?;
        let data = self.zip_with(a, b, mode, |x, y| x + y);
        Ok(self.push(shape, data, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, mode) = self.broadcast(a, b, "sub")?;
        let data = self.zip_with(a, b, mode, |x, y| x - y);
        Ok(self.push(shape, data, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, mode) = self.broadcast(a, b, "mul")?;
        let data = self.zip_with(a, b, mode, |x, y| x * y);
        Ok(self.push(shape, data, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale { a, factor }, |x| x * factor)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, Op::Neg(a), |x| -x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(a), &[a])
    }

    /// Maximum along `axis`; gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis, "max_axis")?;
        let v = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &v[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (i, &x) in row.iter().enumerate() {
                    let slot = o * inner + i;
                    if x > out[slot] || j == 0 {
                        out[slot] = x;
                        argmax[slot] = j;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(
            out_shape,
            out,
            Op::MaxAxis {
                a,
                len,
                inner,
                argmax,
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape(a), &[a]))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            widths,
            inner,
        };
        Ok(self.push(shape, out, op, parts))
    }

    /// Slice `[start, start + width)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis, "narrow")?;
        if width == 0 || start + width > len {
            return Err(Error::Shape {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, width],
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            out.extend_from_slice(&v[from..from + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let op = Op::Narrow {
            a,
            outer,
            len,
            start,
            width,
            inner,
        };
        Ok(self.push(out_shape, out, op, &[a]))
    }

    /// Picks rows of a `[r, c]` matrix: `out[i] = a[rows[i]]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) || rows.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![rows.len()],
            });
        }
        let width = shape[1];
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&v[r * width..(r + 1) * width]);
        }
        let op = Op::GatherRows {
            a,
            rows: rows.to_vec(),
            width,
        };
        Ok(self.push(vec![rows.len(), width], out, op, &[a]))
    }

    /// Euclidean norm of every row of a `[r, c]` matrix.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "row_norms",
                lhs: shape,
                rhs: vec![],
            });
        }
        let width = shape[1];
        let out = self
            .value(a)
            .chunks(width)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(vec![shape[0]], out, Op::RowNorms { a, width }, &[a]))
    }

    /// Row-wise RMS normalization of `x: [r, c]` followed by a per-column scale `w: [c]`.
    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw != [sx[1]] {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: sx,
                rhs: sw,
            });
        }
        let c = sx[1];
        let (xv, wv) = (self.value(x), self.value(w));
        let inv_rms: Vec<f64> = xv
            .chunks(c)
            .map(|r| 1.0 / (r.iter().map(|v| v * v).sum::<f64>() / c as f64 + RMS_EPS).sqrt())
            .collect();
        let out = xv
            .chunks(c)
            .zip(&inv_rms)
            .flat_map(|(r, &s)| r.iter().zip(wv).map(move |(v, g)| v * s * g))
            .collect();
        Ok(self.push(sx, out, Op::RmsNorm { x, w, inv_rms }, &[x, w]))
    }

    /// Depthwise causal convolution over the time axis of `x: [steps, channels]`
    /// with kernel `w: [channels, width]` and `bias: [channels]`:
    /// `y[t, c] = bias[c] + Σ_j w[c, j] · x[t - (width - 1) + j, c]`, zero before `t = 0`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(bias));
        if sx.len() != 2 || sw.len() != 2 || sw[0] != sx[1] || sb != [sx[1]] {
            return Err(Error::Shape {
                op: "causal_conv1d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (steps, channels, width) = (sx[0], sx[1], sw[1]);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let mut out = vec![0.0; steps * channels];
        for t in 0..steps {
            for c in 0..channels {
                let mut acc = bv[c];
                for j in 0..width {
                    let src = t + j;
                    if src + 1 >= width {
                        acc += wv[c * width + j] * xv[(src + 1 - width) * channels + c];
                    }
                }
                out[t * channels + c] = acc;
            }
        }
        let op = Op::CausalConv {
            x,
            w,
            bias,
            steps,
            channels,
            width,
        };
        Ok(self.push(vec![steps, channels], out, op, &[x, w, bias]))
    }

    /// Selective state-space scan with zero initial state.
    ///
    /// Shapes: `u, delta: [steps, channels]`, `a: [channels, states]`,
    /// `b, c: [steps, states]`. Per channel `d` and state `n`:
    /// `h_t = exp(Δ_t·A) h_{t-1} + Δ_t·B_t·u_t`, `y_t = Σ_n C_t·h_t`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let su = self.shape(u).to_vec();
        let sa = self.shape(a).to_vec();
        let shape_err = |rhs: &[usize]| Error::Shape {
            op: "selective_scan",
            lhs: su.clone(),
            rhs: rhs.to_vec(),
        };
        if su.len() != 2 || sa.len() != 2 || sa[0] != su[1] {
            return Err(shape_err(&sa));
        }
        let (steps, channels, states) = (su[0], su[1], sa[1]);
        for (v, want) in [
            (delta, vec![steps, channels]),
            (b, vec![steps, states]),
            (c, vec![steps, states]),
        ] {
            if self.shape(v) != want.as_slice() {
                return Err(shape_err(self.shape(v)));
            }
        }
        if let Some(&bad) = self.value(delta).iter().find(|&&d| d.is_nan() || d <= 0.0) {
            return Err(Error::NonPositiveDelta(bad));
        }
        let (uv, dv, av, bv, cv) = (
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        let plane = channels * states;
        let mut hidden = vec![0.0; steps * plane];
        let mut decay = vec![0.0; steps * plane];
        let mut out = vec![0.0; steps * channels];
        for t in 0..steps {
            let (prev, cur) = hidden.split_at_mut(t * plane);
            let prev = if t == 0 {
                None
            } else {
                Some(&prev[(t - 1) * plane..])
            };
            let cur = &mut cur[..plane];
            let (bt, ct) = (
                &bv[t * states..(t + 1) * states],
                &cv[t * states..(t + 1) * states],
            );
            for d in 0..channels {
                let dt = dv[t * channels + d];
                let drive = dt * uv[t * channels + d];
                let mut y = 0.0;
                for n in 0..states {
                    let i = d * states + n;
                    let a_bar = (dt * av[i]).exp();
                    decay[t * plane + i] = a_bar;
                    let carried = prev.map_or(0.0, |p| a_bar * p[i]);
                    let h = carried + drive * bt[n];
                    cur[i] = h;
                    y += ct[n] * h;
                }
                out[t * channels + d] = y;
            }
        }
        let saved = ScanSaved {
            u,
            delta,
            a,
            b,
            c,
            steps,
            channels,
            states,
            hidden,
            decay,
        };
        Ok(self.push(
            vec![steps, channels],
            out,
            Op::Scan(Box::new(saved)),
            &[u, delta, a, b, c],
        ))
    }

    pub(super) fn backward_node(&self, id: usize, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                self.send(grads, a, |ga| {
                    gemm(m, n, k, go, false, self.value(b), true, 1.0, ga)
                });
                self.send(grads, b, |gb| {
                    gemm(k, m, n, self.value(a), true, go, false, 1.0, gb)
                });
            }
            &Op::Linear {
                x,
                w,
                bias,
                m,
                k,
                n,
            } => {
                self.send(grads, x, |gx| {
                    gemm(m, n, k, go, false, self.value(w), true, 1.0, gx)
                });
                self.send(grads, w, |gw| {
                    gemm(k, m, n, self.value(x), true, go, false, 1.0, gw)
                });
                self.send(grads, bias, |gb| {
                    for row in go.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(g, r)| *g += r);
                    }
                });
            }
            &Op::Add { a, b } => {
                self.send_broadcast(grads, a, go, |g, _| g);
                self.send_broadcast(grads, b, go, |g, _| g);
            }
            &Op::Sub { a, b } => {
                self.send_broadcast(grads, a, go, |g, _| g);
                self.send_broadcast(grads, b, go, |g, _| -g);
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                self.send_broadcast(grads, a, go, |g, i| g * pick(vb, i));
                self.send_broadcast(grads, b, go, |g, i| g * pick(va, i));
            }
            &Op::Scale { a, factor } => self.send(grads, a, |ga| {
                ga.iter_mut().zip(go).for_each(|(g, o)| *g += factor * o)
            }),
            &Op::Neg(a) => self.send(grads, a, |ga| {
                ga.iter_mut().zip(go).for_each(|(g, o)| *g -= o)
            }),
            &Op::Relu(a) => {
                let x = self.value(a);
                self.send(grads, a, |ga| {
                    for ((g, o), &x) in ga.iter_mut().zip(go).zip(x) {
                        if x > 0.0 {
                            *g += o;
                        }
                    }
                })
            }
            &Op::Silu(a) => {
                let x = self.value(a);
                self.send(grads, a, |ga| {
                    for ((g, o), &x) in ga.iter_mut().zip(go).zip(x) {
                        let s = sigmoid(x);
                        *g += o * s * (1.0 + x * (1.0 - s));
                    }
                })
            }
            &Op::Exp(a) => {
                let y = &node.data;
                self.send(grads, a, |ga| {
                    ga.iter_mut()
                        .zip(go)
                        .zip(y)
                        .for_each(|((g, o), y)| *g += o * y)
                })
            }
            &Op::Softplus(a) => {
                let x = self.value(a);
                self.send(grads, a, |ga| {
                    for ((g, o), &x) in ga.iter_mut().zip(go).zip(x) {
                        *g += o * sigmoid(x);
                    }
                })
            }
            &Op::Sum(a) => self.send(grads, a, |ga| ga.iter_mut().for_each(|g| *g += go[0])),
            &Op::Mean(a) => self.send(grads, a, |ga| {
                let s = go[0] / ga.len() as f64;
                ga.iter_mut().for_each(|g| *g += s)
            }),
            Op::MaxAxis {
                a,
                len,
                inner,
                argmax,
            } => self.send(grads, *a, |ga| {
                for (slot, (&j, o)) in argmax.iter().zip(go).enumerate() {
                    let (outer_i, i) = (slot / inner, slot % inner);
                    ga[(outer_i * len + j) * inner + i] += o;
                }
            }),
            &Op::Reshape(a) => self.send(grads, a, |ga| {
                ga.iter_mut().zip(go).for_each(|(g, o)| *g += o)
            }),
            Op::Concat {
                parts,
                outer,
                widths,
                inner,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    self.send(grads, p, |gp| {
                        for o in 0..*outer {
                            let src =
                                &go[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            let dst = &mut gp[o * w * inner..(o + 1) * w * inner];
                            dst.iter_mut().zip(src).for_each(|(g, s)| *g += s);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Narrow {
                a,
                outer,
                len,
                start,
                width,
                inner,
            } => self.send(grads, a, |ga| {
                for o in 0..outer {
                    let dst = &mut ga[(o * len + start) * inner..(o * len + start + width) * inner];
                    let src = &go[o * width * inner..(o + 1) * width * inner];
                    dst.iter_mut().zip(src).for_each(|(g, s)| *g += s);
                }
            }),
            Op::GatherRows { a, rows, width } => self.send(grads, *a, |ga| {
                for (i, &r) in rows.iter().enumerate() {
                    let src = &go[i * width..(i + 1) * width];
                    ga[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(g, s)| *g += s);
                }
            }),
            &Op::RowNorms { a, width } => {
                let x = self.value(a);
                let norms = &node.data;
                self.send(grads, a, |ga| {
                    for (r, (&nrm, o)) in norms.iter().zip(go).enumerate() {
                        // Subgradient 0 at the origin.
                        if nrm == 0.0 {
                            continue;
                        }
                        for c in r * width..(r + 1) * width {
                            ga[c] += o * x[c] / nrm;
                        }
                    }
                })
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c = wv.len();
                self.send(grads, *w, |gw| {
                    for ((row, gorow), &s) in xv.chunks(c).zip(go.chunks(c)).zip(inv_rms) {
                        for j in 0..c {
                            gw[j] += gorow[j] * row[j] * s;
                        }
                    }
                });
                self.send(grads, *x, |gx| {
                    for (r, &s) in inv_rms.iter().enumerate() {
                        let row = &xv[r * c..(r + 1) * c];
                        let gorow = &go[r * c..(r + 1) * c];
                        let dot: f64 = (0..c).map(|j| gorow[j] * wv[j] * row[j]).sum();
                        let k = s * s * s * dot / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += s * wv[j] * gorow[j] - row[j] * k;
                        }
                    }
                });
            }
            &Op::CausalConv {
                x,
                w,
                bias,
                steps,
                channels,
                width,
            } => {
                let (xv, wv) = (self.value(x), self.value(w));
                self.send(grads, bias, |gb| {
                    for row in go.chunks(channels) {
                        gb.iter_mut().zip(row).for_each(|(g, r)| *g += r);
                    }
                });
                self.send(grads, w, |gw| {
                    for t in 0..steps {
                        for j in 0..width {
                            if t + j + 1 < width {
                                continue;
                            }
                            let src = (t + j + 1 - width) * channels;
                            for c in 0..channels {
                                gw[c * width + j] += go[t * channels + c] * xv[src + c];
                            }
                        }
                    }
                });
                self.send(grads, x, |gx| {
                    for t in 0..steps {
                        for j in 0..width {
                            if t + j + 1 < width {
                                continue;
                            }
                            let src = (t + j + 1 - width) * channels;
                            for c in 0..channels {
                                gx[src + c] += go[t * channels + c] * wv[c * width + j];
                            }
                        }
                    }
                });
            }
            Op::Scan(saved) => self.scan_backward(saved, go, grads),
        }
    }

    fn send_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        go: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        self.send(grads, v, |gv| {
            if gv.len() == go.len() {
                for (i, (g, &o)) in gv.iter_mut().zip(go).enumerate() {
                    *g += f(o, i);
                }
            } else {
                gv[0] += go.iter().enumerate().map(|(i, &o)| f(o, i)).sum::<f64>();
            }
        });
    }

    fn scan_backward(&self, s: &ScanSaved, go: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (steps, channels, states) = (s.steps, s.channels, s.states);
        let plane = channels * states;
        let (uv, dv, av, bv, cv) = (
            self.value(s.u),
            self.value(s.delta),
            self.value(s.a),
            self.value(s.b),
            self.value(s.c),
        );
        let mut du = vec![0.0; steps * channels];
        let mut ddelta = vec![0.0; steps * channels];
        let mut da = vec![0.0; plane];
        let mut db = vec![0.0; steps * states];
        let mut dc = vec![0.0; steps * states];
        // gradient flowing into h_t from later steps
        let mut carry = vec![0.0; plane];
        for t in (0..steps).rev() {
            let h = &s.hidden[t * plane..(t + 1) * plane];
            let h_prev = (t > 0).then(|| &s.hidden[(t - 1) * plane..t * plane]);
            for d in 0..channels {
                let dt = dv[t * channels + d];
                let ut = uv[t * channels + d];
                let gy = go[t * channels + d];
                let (mut gdt, mut gut) = (0.0, 0.0);
                for n in 0..states {
                    let i = d * states + n;
                    let bn = bv[t * states + n];
                    let g = carry[i] + cv[t * states + n] * gy;
                    dc[t * states + n] += gy * h[i];
                    let decay = s.decay[t * plane + i];
                    if let Some(hp) = h_prev {
                        let gdecay = g * hp[i] * decay;
                        gdt += gdecay * av[i];
                        da[i] += gdecay * dt;
                    }
                    gdt += g * bn * ut;
                    gut += g * dt * bn;
                    db[t * states + n] += g * dt * ut;
                    carry[i] = g * decay;
                }
                ddelta[t * channels + d] += gdt;
                du[t * channels + d] += gut;
            }
        }
        for (v, delta) in [
            (s.u, du),
            (s.delta, ddelta),
            (s.a, da),
            (s.b, db),
            (s.c, dc),
        ] {
            self.send(grads, v, |g| {
                g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d)
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn var(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap().requires_grad())
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = var(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = var(&mut g, vec![2, 1], vec![3.0, 4.0]);
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);
        let r = var(&mut g, vec![1, 2], vec![1.0, 2.0]);
        let y = g.matmul(r, x).unwrap();
        assert_eq!(g.value(y), &[11.0]);
        assert_eq!(g.shape(y), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = var(&mut g, vec![2, 3], vec![0.0; 6]);
        let b = var(&mut g, vec![2, 3], vec![0.0; 6]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = var(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = var(&mut g, vec![], vec![0.0]);
        let s = g.silu(z);
        assert_eq!(g.value(s), &[0.0]);
        let sp = g.softplus(z);
        assert!((g.value(sp)[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn broadcasting_is_scalar_or_equal_only() {
        let mut g = Graph::new();
        let a = var(&mut g, vec![2], vec![1.0, 2.0]);
        let b = var(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        let s = var(&mut g, vec![], vec![10.0]);
        let y = g.mul(s, a).unwrap();
        assert_eq!(g.value(y), &[10.0, 20.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[3.0]);
        assert_eq!(g.grad(a).unwrap(), &[10.0, 10.0]);
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = var(&mut g, vec![2, 2], vec![1.0, 5.0, 7.0, 2.0]);
        let m = g.max_axis(x, 0).unwrap();
        assert_eq!(g.value(m), &[7.0, 5.0]);
        assert!(g.max_axis(x, 2).is_err());
        let v = var(&mut g, vec![2], vec![2.0, 4.0]);
        let mean = g.mean(v);
        assert_eq!(g.value(mean), &[3.0]);
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = var(&mut g, vec![3, 1], vec![2.0, 2.0, 1.0]);
        let m = g.max_axis(x, 0).unwrap();
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn squared_sum_gradient() {
        let mut g = Graph::new();
        let w = var(&mut g, vec![2], vec![1.0, 2.0]);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let mut g = Graph::new();
        let a = var(&mut g, vec![2, 1], vec![1.0, 2.0]);
        let b = var(&mut g, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = g.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(b));
        let rows = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.shape(rows), &[4, 1]);
    }

    #[test]
    fn scan_rejects_non_positive_delta() {
        let mut g = Graph::new();
        let u = var(&mut g, vec![1, 1], vec![1.0]);
        let d = var(&mut g, vec![1, 1], vec![0.0]);
        let a = var(&mut g, vec![1, 1], vec![-1.0]);
        let b = var(&mut g, vec![1, 1], vec![1.0]);
        let c = var(&mut g, vec![1, 1], vec![1.0]);
        assert!(matches!(
            g.selective_scan(u, d, a, b, c),
            Err(Error::NonPositiveDelta(_))
        ));
    }

    #[test]
    fn causal_conv_only_sees_the_past() {
        let mut g = Graph::new();
        let x = var(&mut g, vec![3, 1], vec![1.0, 10.0, 100.0]);
        let w = var(&mut g, vec![1, 2], vec![0.5, 2.0]);
        let b = var(&mut g, vec![1], vec![0.0]);
        let y = g.causal_conv1d(x, w, b).unwrap();
        // y_t = 0.5 x_{t-1} + 2 x_t
        assert_eq!(g.value(y), &[2.0, 20.5, 205.0]);
    }
}
