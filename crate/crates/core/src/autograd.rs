//! A small reverse-mode tape over [`Mat`] values.
//!
//! Every op used by the encoder/decoder has a hand-written backward rule.
//! The heavy ops (attention, layer norm) are fused so the tape stays short
//! even for a full training batch.

use crate::tensor::{gemm, Mat};

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a trainable parameter in the caller's parameter list.
pub type ParamIndex = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Input,
    Param(ParamIndex),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    SignSte(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        seg_len: usize,
    },
    Assemble {
        kept: Var,
        fill: Var,
        layout: Vec<Option<usize>>,
    },
    /// Scalar whose gradient w.r.t. `input` was computed alongside its value.
    Precomputed {
        input: Var,
        grad: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Graph::backward`], indexed like the
/// parameter list whose entries were passed to [`Graph::param`].
pub struct ParamGrads {
    pub grads: Vec<Option<Mat>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, index: ParamIndex, value: &Mat) -> Var {
        self.push(value.clone(), Op::Param(index), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a 1 x c row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), b.cols(), "bias width mismatch");
        let bias_row = b.as_slice().to_vec();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias_row) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Straight-through sign: forward `sign` with `sign(0) = +1`, backward
    /// passes the incoming gradient through unchanged.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sign);
        let ng = self.ng(x);
        self.push(out, Op::SignSte(x), ng)
    }

    /// Multi-head scaled dot-product self-attention over consecutive blocks
    /// of `seq_len` rows. `q`, `k`, `v` are `(batch * seq_len) x width`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        assert_eq!(kv.shape(), (rows, width));
        assert_eq!(vv.shape(), (rows, width));
        assert!(seq_len > 0 && rows % seq_len == 0, "rows not a multiple of seq_len");
        assert!(heads > 0 && width % heads == 0, "width not divisible by heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let l = seq_len;
        let mut probs = vec![0.0; batch * heads * l * l];
        let mut out = Mat::zeros(rows, width);
        let (qs, ks, vs) = (qv.as_slice(), kv.as_slice(), vv.as_slice());
        let os = out.as_mut_slice();
        for s in 0..batch {
            let base = s * l;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                for i in 0..l {
                    let qi = &qs[(base + i) * width + off..(base + i) * width + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..l {
                        let kj = &ks[(base + j) * width + off..(base + j) * width + off + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        let sc = dot * scale;
                        p[i * l + j] = sc;
                        mx = mx.max(sc);
                    }
                    let mut z = 0.0;
                    for j in 0..l {
                        let e = (p[i * l + j] - mx).exp();
                        p[i * l + j] = e;
                        z += e;
                    }
                    for j in 0..l {
                        p[i * l + j] /= z;
                    }
                    let oi = &mut os[(base + i) * width + off..(base + i) * width + off + dh];
                    for j in 0..l {
                        let pij = p[i * l + j];
                        let vj = &vs[(base + j) * width + off..(base + j) * width + off + dh];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Rows of `table` at `idx`; gradient scatters back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let out = self.value(table).select_rows(&idx);
        let ng = self.ng(table);
        self.push(out, Op::GatherRows { table, idx }, ng)
    }

    /// Mean of each consecutive block of `seg_len` rows.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert!(seg_len > 0 && rows % seg_len == 0);
        let segs = rows / seg_len;
        let mut out = Mat::zeros(segs, cols);
        for s in 0..segs {
            let o = out.row_mut(s);
            for r in s * seg_len..(s + 1) * seg_len {
                for (a, b) in o.iter_mut().zip(xv.row(r)) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a /= seg_len as f64;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SegmentMean { x, seg_len }, ng)
    }

    /// Builds a matrix whose row `r` is `kept[layout[r]]` or, where the
    /// layout holds `None`, the single row of `fill`.
    pub fn assemble(&mut self, kept: Var, fill: Var, layout: Vec<Option<usize>>) -> Var {
        let kv = self.value(kept);
        let fv = self.value(fill);
        assert_eq!(fv.rows(), 1);
        assert_eq!(kv.cols(), fv.cols());
        let cols = kv.cols();
        let mut out = Mat::zeros(layout.len(), cols);
        for (r, slot) in layout.iter().enumerate() {
            match slot {
                Some(i) => out.row_mut(r).copy_from_slice(kv.row(*i)),
                None => out.row_mut(r).copy_from_slice(fv.row(0)),
            }
        }
        let ng = self.ng(kept) || self.ng(fill);
        self.push(out, Op::Assemble { kept, fill, layout }, ng)
    }

    /// Records a scalar `value` whose gradient w.r.t. `input` is `grad`.
    pub fn precomputed(&mut self, input: Var, value: f64, grad: Mat) -> Var {
        assert_eq!(grad.shape(), self.value(input).shape());
        let ng = self.ng(input);
        self.push(Mat::scalar(value), Op::Precomputed { input, grad }, ng)
    }

    /// Reverse pass from the scalar `loss`. `num_params` sizes the output.
    pub fn backward(&self, loss: Var, num_params: usize) -> ParamGrads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = ParamGrads {
            grads: (0..num_params).map(|_| None).collect(),
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => accumulate(&mut out.grads[*p], g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut da = Mat::zeros(g.rows(), bv.rows());
                        gemm(&g, false, bv, true, &mut da, 0.0);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut db = Mat::zeros(av.cols(), g.cols());
                        gemm(av, true, &g, false, &mut db, 0.0);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.ng(*b) {
                        let mut db = Mat::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) && self.ng(*b) {
                        accumulate(&mut grads[a.0], g.clone());
                        accumulate(&mut grads[b.0], g);
                    } else if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    } else if self.ng(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale_assign(*s);
                    accumulate(&mut grads[a.0], g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = g.shape();
                    if self.ng(*gain) || self.ng(*bias) {
                        let mut dg = Mat::zeros(1, cols);
                        let mut db = Mat::zeros(1, cols);
                        for r in 0..rows {
                            let gr = g.row(r);
                            let xr = xhat.row(r);
                            for c in 0..cols {
                                dg.as_mut_slice()[c] += gr[c] * xr[c];
                                db.as_mut_slice()[c] += gr[c];
                            }
                        }
                        accumulate(&mut grads[gain.0], dg);
                        accumulate(&mut grads[bias.0], db);
                    }
                    if self.ng(*x) {
                        let gv = self.value(*gain).as_slice();
                        let mut dx = Mat::zeros(rows, cols);
                        let mut dxh = vec![0.0; cols];
                        for r in 0..rows {
                            let gr = g.row(r);
                            let xr = xhat.row(r);
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..cols {
                                dxh[c] = gr[c] * gv[c];
                                m1 += dxh[c];
                                m2 += dxh[c] * xr[c];
                            }
                            m1 /= cols as f64;
                            m2 /= cols as f64;
                            let o = dx.row_mut(r);
                            for c in 0..cols {
                                o[c] = rstd[r] * (dxh[c] - m1 - xr[c] * m2);
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                        let dt = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dt;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Tanh(x) => {
                    let mut dx = g;
                    for (d, &t) in dx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *d *= 1.0 - t * t;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SignSte(x) => accumulate(&mut grads[x.0], g),
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_len,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *seq_len, *heads, probs, &g);
                    if self.ng(*q) {
                        accumulate(&mut grads[q.0], dq);
                    }
                    if self.ng(*k) {
                        accumulate(&mut grads[k.0], dk);
                    }
                    if self.ng(*v) {
                        accumulate(&mut grads[v.0], dv);
                    }
                }
                Op::GatherRows { table, idx } => {
                    let tv = self.value(*table);
                    let mut dt = Mat::zeros(tv.rows(), tv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::SegmentMean { x, seg_len } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    let inv = 1.0 / *seg_len as f64;
                    for r in 0..xv.rows() {
                        let src = g.row(r / seg_len);
                        for (d, v) in dx.row_mut(r).iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Assemble { kept, fill, layout } => {
                    let kv = self.value(*kept);
                    let mut dk = Mat::zeros(kv.rows(), kv.cols());
                    let mut df = Mat::zeros(1, kv.cols());
                    for (r, slot) in layout.iter().enumerate() {
                        let dst = match slot {
                            Some(i) => dk.row_mut(*i),
                            None => df.row_mut(0),
                        };
                        for (d, v) in dst.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    if self.ng(*kept) {
                        accumulate(&mut grads[kept.0], dk);
                    }
                    if self.ng(*fill) {
                        accumulate(&mut grads[fill.0], df);
                    }
                }
                Op::Precomputed { input, grad } => {
                    let mut d = grad.clone();
                    d.scale_assign(g.item());
                    accumulate(&mut grads[input.0], d);
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        l: usize,
        heads: usize,
        probs: &[f64],
        g: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / l;
        let mut dq = Mat::zeros(rows, width);
        let mut dk = Mat::zeros(rows, width);
        let mut dv = Mat::zeros(rows, width);
        let (qs, ks, vs, gs) = (qv.as_slice(), kv.as_slice(), vv.as_slice(), g.as_slice());
        let mut dp = vec![0.0; l * l];
        for s in 0..batch {
            let base = s * l;
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[(s * heads + h) * l * l..(s * heads + h + 1) * l * l];
                let span = |i: usize| (base + i) * width + off..(base + i) * width + off + dh;
                // dP = dO V^T, dV = P^T dO
                for i in 0..l {
                    let gi = &gs[span(i)];
                    for j in 0..l {
                        let vj = &vs[span(j)];
                        dp[i * l + j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let pij = p[i * l + j];
                        let dvj = &mut dv.as_mut_slice()[span(j)];
                        for (d, gg) in dvj.iter_mut().zip(gi) {
                            *d += pij * gg;
                        }
                    }
                }
                // softmax backward, then dQ = dS K * scale, dK = dS^T Q * scale
                for i in 0..l {
                    let dot: f64 = (0..l).map(|j| p[i * l + j] * dp[i * l + j]).sum();
                    for j in 0..l {
                        let ds = p[i * l + j] * (dp[i * l + j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &ks[span(j)];
                        let dqi = &mut dq.as_mut_slice()[span(i)];
                        for (d, kk) in dqi.iter_mut().zip(kj) {
                            *d += ds * kk;
                        }
                        let qi = &qs[span(i)];
                        let dkj = &mut dk.as_mut_slice()[span(j)];
                        for (d, qq) in dkj.iter_mut().zip(qi) {
                            *d += ds * qq;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

/// `sign` with the single tie rule `sign(0) = +1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Builds a scalar from params via `f`, then compares backward() with
    /// central differences on every parameter entry.
    fn check(params: Vec<Mat>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |ps: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out, params.len());
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.grads[pi].clone().unwrap_or_else(|| Mat::zeros(p.rows(), p.cols()));
            for e in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].as_mut_slice()[e] += h;
                let mut minus = params.clone();
                minus[pi].as_mut_slice()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice()[e];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi} entry {e}: fd {fd} analytic {a}"
                );
            }
        }
    }

    // Weighted sum to a scalar so each output entry gets a distinct gradient.
    fn reduce(g: &mut Graph, x: Var, seed: u64) -> Var {
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_mat(&mut rng, c, 1);
        let wv = g.input(w);
        let col = g.matmul(x, wv);
        let ones = g.input(Mat::filled(1, r, 1.0));
        g.matmul(ones, col)
    }

    #[test]
    fn linear_layer_norm_gelu_tanh_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            rand_mat(&mut rng, 3, 5),
            rand_mat(&mut rng, 5, 4),
            rand_mat(&mut rng, 1, 4),
            rand_mat(&mut rng, 1, 4),
            rand_mat(&mut rng, 1, 4),
        ];
        check(params, |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let y = g.layer_norm(y, v[3], v[4]);
            let y = g.gelu(y);
            let y2 = g.scale(y, 0.7);
            let y = g.add(y, y2);
            let y = g.tanh(y);
            reduce(g, y, 9)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            rand_mat(&mut rng, 6, 4),
            rand_mat(&mut rng, 6, 4),
            rand_mat(&mut rng, 6, 4),
        ];
        check(params, |g, v| {
            let y = g.attention(v[0], v[1], v[2], 3, 2);
            reduce(g, y, 3)
        });
    }

    #[test]
    fn gather_mean_assemble_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![rand_mat(&mut rng, 5, 3), rand_mat(&mut rng, 1, 3)];
        check(params, |g, v| {
            let rows = g.gather_rows(v[0], vec![4, 1, 1, 0]);
            let asm = g.assemble(rows, v[1], vec![Some(0), None, Some(3), None, Some(1), Some(2)]);
            let m = g.segment_mean(asm, 2);
            reduce(g, m, 4)
        });
    }

    #[test]
    fn sign_ste_is_identity_backward() {
        let x = Mat::from_vec(1, 4, vec![-0.3, 0.0, 0.2, 1.5]);
        let mut g = Graph::new();
        let xv = g.param(0, &x);
        let s = g.sign_ste(xv);
        assert_eq!(g.value(s).as_slice(), &[-1.0, 1.0, 1.0, 1.0]);
        let w = g.input(Mat::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(s, w);
        let grads = g.backward(out, 1);
        assert_eq!(grads.grads[0].as_ref().unwrap().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn inputs_receive_no_gradient_work() {
        let mut g = Graph::new();
        let a = g.input(Mat::filled(2, 2, 1.0));
        let b = g.input(Mat::filled(2, 1, 1.0));
        let c = g.matmul(a, b);
        let ones = g.input(Mat::filled(1, 2, 1.0));
        let out = g.matmul(ones, c);
        let grads = g.backward(out, 0);
        assert!(grads.grads.is_empty());
    }
}
