//! Small f32 neural-network toolkit with hand-written backward passes.
//!
//! Activations are row-major `rows × features` buffers. Every layer's
//! `forward` returns what its `backward` needs; parameter gradients are
//! accumulated into [`Param::grad`].

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f32, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        for v in &mut p.value {
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

/// Anything that owns parameters in a fixed, named order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// `c = a · b + beta · c` with optional transposes; all row-major.
///
/// `a` is `m × k` (or `k × m` when `ta`), `b` is `k × n` (or `n × k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made through these strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `in × out`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[fan_in, fan_out], bound, rng),
            bias: Param::zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn zeroed(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), &[fan_in, fan_out]),
            bias: Param::zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let (i, o) = (self.fan_in(), self.fan_out());
        assert_eq!(x.len(), rows * i, "{}: input width", self.weight.name);
        let mut y = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(rows, i, o, x, false, &self.weight.value, false, 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&mut self, x: &[f32], dy: &[f32], rows: usize) -> Vec<f32> {
        let (i, o) = (self.fan_in(), self.fan_out());
        gemm(i, rows, o, x, true, dy, false, 1.0, &mut self.weight.grad);
        for r in 0..rows {
            for (g, d) in self.bias.grad.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; rows * i];
        gemm(rows, o, i, dy, false, &self.weight.value, true, 0.0, &mut dx);
        dx
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn backward_params(&mut self, x: &[f32], dy: &[f32], rows: usize) {
        let (i, o) = (self.fan_in(), self.fan_out());
        gemm(i, rows, o, x, true, dy, false, 1.0, &mut self.weight.grad);
        for r in 0..rows {
            for (g, d) in self.bias.grad.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| v * sigmoid32(*v)).collect()
}

pub fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(v, d)| {
            let s = sigmoid32(*v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub struct LayerNormCache {
    xhat: Vec<f32>,
    rstd: Vec<f32>,
}

const LN_EPS: f32 = 1e-5;

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        let mut gamma = Param::zeros(format!("{name}.gamma"), &[width]);
        gamma.value.iter_mut().for_each(|g| *g = 1.0);
        Self {
            gamma,
            beta: Param::zeros(format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> (Vec<f32>, LayerNormCache) {
        let w = self.gamma.len();
        let mut y = vec![0.0; rows * w];
        let mut xhat = vec![0.0; rows * w];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * w..(r + 1) * w];
            let mean = row.iter().map(|v| f64::from(*v)).sum::<f64>() / w as f64;
            let var = row
                .iter()
                .map(|v| (f64::from(*v) - mean).powi(2))
                .sum::<f64>()
                / w as f64;
            let rs = (1.0 / (var + f64::from(LN_EPS)).sqrt()) as f32;
            rstd[r] = rs;
            for c in 0..w {
                let h = (row[c] - mean as f32) * rs;
                xhat[r * w + c] = h;
                y[r * w + c] = h * self.gamma.value[c] + self.beta.value[c];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &[f32], rows: usize) -> Vec<f32> {
        let w = self.gamma.len();
        let mut dx = vec![0.0; rows * w];
        for r in 0..rows {
            let xh = &cache.xhat[r * w..(r + 1) * w];
            let d = &dy[r * w..(r + 1) * w];
            let mut sum_g = 0.0f32;
            let mut sum_gx = 0.0f32;
            for c in 0..w {
                self.gamma.grad[c] += d[c] * xh[c];
                self.beta.grad[c] += d[c];
                let g = d[c] * self.gamma.value[c];
                sum_g += g;
                sum_gx += g * xh[c];
            }
            let inv_w = 1.0 / w as f32;
            for c in 0..w {
                let g = d[c] * self.gamma.value[c];
                dx[r * w + c] = cache.rstd[r] * (g - inv_w * sum_g - xh[c] * inv_w * sum_gx);
            }
        }
        dx
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Lookup table of `count × width` vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: Param,
}

impl Embedding {
    pub fn new(name: &str, count: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: Param::uniform(format!("{name}.table"), &[count, width], 0.5, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.table.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.width();
        &self.table.value[i * w..(i + 1) * w]
    }

    pub fn accumulate(&mut self, i: usize, d: &[f32]) {
        let w = self.width();
        for (g, v) in self.table.grad[i * w..(i + 1) * w].iter_mut().zip(d) {
            *g += v;
        }
    }
}

impl Module for Embedding {
    fn params(&self) -> Vec<&Param> {
        vec![&self.table]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.table]
    }
}

/// Rearranges a channels-last `[X, Y, Z, C]` field into one row per
/// `2 × 2 × 1` patch: `[(X/2)(Y/2)Z, 4C]`. Row order is x fastest, then y,
/// then z, matching the voxel grid layout.
pub fn patchify(x: &[f32], dims: [usize; 3], channels: usize) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    assert!(nx % 2 == 0 && ny % 2 == 0);
    let (hx, hy) = (nx / 2, ny / 2);
    let mut out = vec![0.0; x.len()];
    for z in 0..nz {
        for py in 0..hy {
            for px in 0..hx {
                let row = px + hx * (py + hy * z);
                for (k, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                    let src = (2 * px + dx) + nx * ((2 * py + dy) + ny * z);
                    out[(row * 4 + k) * channels..(row * 4 + k + 1) * channels]
                        .copy_from_slice(&x[src * channels..(src + 1) * channels]);
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`]; `dims` are the full-resolution dims.
pub fn unpatchify(rows: &[f32], dims: [usize; 3], channels: usize) -> Vec<f32> {
    let [nx, ny, nz] = dims;
    let (hx, hy) = (nx / 2, ny / 2);
    let mut out = vec![0.0; rows.len()];
    for z in 0..nz {
        for py in 0..hy {
            for px in 0..hx {
                let row = px + hx * (py + hy * z);
                for (k, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                    let dst = (2 * px + dx) + nx * ((2 * py + dy) + ny * z);
                    out[dst * channels..(dst + 1) * channels]
                        .copy_from_slice(&rows[(row * 4 + k) * channels..(row * 4 + k + 1) * channels]);
                }
            }
        }
    }
    out
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut [f32], width: usize) {
    for row in x.chunks_mut(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Summed cross-entropy over the rows where `mask` is set (all rows when
/// `None`), with the gradient of `scale · loss` w.r.t. the logits.
pub fn softmax_cross_entropy(
    logits: &[f32],
    width: usize,
    targets: &[usize],
    mask: Option<&[bool]>,
    scale: f32,
) -> (f64, Vec<f32>) {
    let rows = targets.len();
    assert_eq!(logits.len(), rows * width);
    let mut probs = logits.to_vec();
    softmax_rows(&mut probs, width);
    let mut loss = 0.0f64;
    for r in 0..rows {
        let row = &mut probs[r * width..(r + 1) * width];
        if mask.is_some_and(|m| !m[r]) {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let l = &logits[r * width..(r + 1) * width];
        let max = l.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = f64::from(max)
            + l.iter()
                .map(|v| f64::from(*v - max).exp())
                .sum::<f64>()
                .ln();
        loss += lse - f64::from(l[targets[r]]);
        row[targets[r]] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    (loss, probs)
}

/// Causal multi-head self-attention over independent sequences laid out as
/// `[seqs, time, width]`. Query `t` only sees keys `s <= t`.
#[derive(Clone, Debug)]
pub struct CausalAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    x: Vec<f32>,
    qkv: Vec<f32>,
    /// `[seqs, heads, time, time]`, zero above the diagonal.
    pub weights: Vec<f32>,
    ctx: Vec<f32>,
}

impl CausalAttention {
    pub fn new(name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && width.is_multiple_of(heads), "width must split evenly over heads");
        Self {
            qkv: Linear::new(&format!("{name}.qkv"), width, 3 * width, rng),
            proj: Linear::new(&format!("{name}.proj"), width, width, rng),
            heads,
        }
    }

    pub fn forward(&self, x: &[f32], seqs: usize, time: usize) -> (Vec<f32>, AttentionCache) {
        let e = self.proj.fan_in();
        let rows = seqs * time;
        let hd = e / self.heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let qkv = self.qkv.forward(x, rows);
        let mut weights = vec![0.0f32; seqs * self.heads * time * time];
        let mut ctx = vec![0.0f32; rows * e];
        for s in 0..seqs {
            for h in 0..self.heads {
                let w_base = (s * self.heads + h) * time * time;
                for t in 0..time {
                    let q = &qkv[(s * time + t) * 3 * e + h * hd..][..hd];
                    let w = &mut weights[w_base + t * time..w_base + t * time + time];
                    let mut max = f32::NEG_INFINITY;
                    for u in 0..=t {
                        let k = &qkv[(s * time + u) * 3 * e + e + h * hd..][..hd];
                        let dot: f32 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                        w[u] = dot * scale;
                        max = max.max(w[u]);
                    }
                    let mut sum = 0.0f32;
                    for wu in w[..=t].iter_mut() {
                        *wu = (*wu - max).exp();
                        sum += *wu;
                    }
                    for wu in w[..=t].iter_mut() {
                        *wu /= sum;
                    }
                    let out = &mut ctx[(s * time + t) * e + h * hd..][..hd];
                    for u in 0..=t {
                        let v = &qkv[(s * time + u) * 3 * e + 2 * e + h * hd..][..hd];
                        for (o, vv) in out.iter_mut().zip(v) {
                            *o += w[u] * vv;
                        }
                    }
                }
            }
        }
        let y = self.proj.forward(&ctx, rows);
        (
            y,
            AttentionCache {
                x: x.to_vec(),
                qkv,
                weights,
                ctx,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &[f32], seqs: usize, time: usize) -> Vec<f32> {
        let e = self.proj.fan_in();
        let rows = seqs * time;
        let hd = e / self.heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let dctx = self.proj.backward(&cache.ctx, dy, rows);
        let qkv = &cache.qkv;
        let mut dqkv = vec![0.0f32; rows * 3 * e];
        let mut dw = vec![0.0f32; time];
        for s in 0..seqs {
            for h in 0..self.heads {
                let w_base = (s * self.heads + h) * time * time;
                for t in 0..time {
                    let w = &cache.weights[w_base + t * time..w_base + t * time + time];
                    let dout = &dctx[(s * time + t) * e + h * hd..][..hd];
                    let q_off = (s * time + t) * 3 * e + h * hd;
                    // dV and dW
                    for u in 0..=t {
                        let v_off = (s * time + u) * 3 * e + 2 * e + h * hd;
                        let mut acc = 0.0f32;
                        for c in 0..hd {
                            dqkv[v_off + c] += w[u] * dout[c];
                            acc += dout[c] * qkv[v_off + c];
                        }
                        dw[u] = acc;
                    }
                    let dot: f32 = (0..=t).map(|u| w[u] * dw[u]).sum();
                    for u in 0..=t {
                        let ds = w[u] * (dw[u] - dot) * scale;
                        let k_off = (s * time + u) * 3 * e + e + h * hd;
                        for c in 0..hd {
                            dqkv[q_off + c] += ds * qkv[k_off + c];
                            dqkv[k_off + c] += ds * qkv[q_off + c];
                        }
                    }
                }
            }
        }
        self.qkv.backward(&cache.x, &dqkv, rows)
    }
}

impl Module for CausalAttention {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.qkv.params();
        p.extend(self.proj.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.qkv.params_mut();
        p.extend(self.proj.params_mut());
        p
    }
}

/// Pre-norm transformer block: attention then a SiLU MLP, both residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: CausalAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LayerNormCache,
    pub attn: AttentionCache,
    ln2: LayerNormCache,
    h_in: Vec<f32>,
    h_pre: Vec<f32>,
    h_act: Vec<f32>,
}

impl TransformerBlock {
    pub fn new(name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), width),
            attn: CausalAttention::new(&format!("{name}.attn"), width, heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), width),
            fc1: Linear::new(&format!("{name}.fc1"), width, 2 * width, rng),
            fc2: Linear::new(&format!("{name}.fc2"), 2 * width, width, rng),
        }
    }

    pub fn forward(&self, x: &[f32], seqs: usize, time: usize) -> (Vec<f32>, BlockCache) {
        let rows = seqs * time;
        let (a_in, ln1) = self.ln1.forward(x, rows);
        let (a_out, attn) = self.attn.forward(&a_in, seqs, time);
        let x1: Vec<f32> = x.iter().zip(&a_out).map(|(a, b)| a + b).collect();
        let (h_in, ln2) = self.ln2.forward(&x1, rows);
        let h_pre = self.fc1.forward(&h_in, rows);
        let h_act = silu(&h_pre);
        let m_out = self.fc2.forward(&h_act, rows);
        let y = x1.iter().zip(&m_out).map(|(a, b)| a + b).collect();
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                h_in,
                h_pre,
                h_act,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &[f32], seqs: usize, time: usize) -> Vec<f32> {
        let rows = seqs * time;
        let dh_act = self.fc2.backward(&cache.h_act, dy, rows);
        let dh_pre = silu_backward(&cache.h_pre, &dh_act);
        let dh_in = self.fc1.backward(&cache.h_in, &dh_pre, rows);
        let dx1_ln = self.ln2.backward(&cache.ln2, &dh_in, rows);
        let dx1: Vec<f32> = dy.iter().zip(&dx1_ln).map(|(a, b)| a + b).collect();
        let da_in = self.attn.backward(&cache.attn, &dx1, seqs, time);
        let dx_ln = self.ln1.backward(&cache.ln1, &da_in, rows);
        dx1.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
    }
}

impl Module for TransformerBlock {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.ln1.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    #[serde(skip)]
    m: Vec<Vec<f32>>,
    #[serde(skip)]
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f32) -> f32 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| f64::from(*g).powi(2))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

pub const CHECKPOINT_FORMAT: &str = "occsplat-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
}

/// Builds the manifest and little-endian f32 payload for `params`.
pub fn encode_checkpoint(
    kind: &str,
    params: &[&Param],
    seed: u64,
    config: serde_json::Value,
    payload_name: &str,
) -> (Manifest, Vec<u8>) {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for p in params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            dtype: "f32".into(),
            offset: payload.len(),
        });
        for v in &p.value {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    (
        Manifest {
            format: CHECKPOINT_FORMAT.into(),
            kind: kind.into(),
            seed,
            config,
            payload: payload_name.into(),
            tensors,
        },
        payload,
    )
}

/// Copies tensors from a payload into `params`, matching by name and shape.
pub fn decode_checkpoint(manifest: &Manifest, payload: &[u8], params: &mut [&mut Param]) -> Result<()> {
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, manifest has {}",
            params.len(),
            manifest.tensors.len()
        )));
    }
    for (entry, p) in manifest.tensors.iter().zip(params.iter_mut()) {
        if entry.name != p.name || entry.shape != p.shape || entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match {} {:?}",
                entry.name, entry.shape, p.name, p.shape
            )));
        }
        let end = entry.offset + p.len() * 4;
        if end > payload.len() {
            return Err(Error::TruncatedPayload {
                expected: end,
                found: payload.len(),
            });
        }
        for (v, b) in p.value.iter_mut().zip(payload[entry.offset..end].chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    Ok(())
}

fn payload_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn save_checkpoint(
    manifest_path: &Path,
    kind: &str,
    params: &[&Param],
    seed: u64,
    config: serde_json::Value,
) -> Result<()> {
    let bin = payload_path(manifest_path);
    let name = bin
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (manifest, payload) = encode_checkpoint(kind, params, seed, config, &name);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
    std::fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    std::fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}

/// Reads a manifest and its payload without interpreting the tensors.
pub fn read_checkpoint(manifest_path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    let bin = manifest_path.with_file_name(&manifest.payload);
    let payload = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    Ok((manifest, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `loss` w.r.t. every entry of `values`.
    fn fd_check(values: &mut [f32], analytic: &[f32], mut loss: impl FnMut(&[f32]) -> f64) {
        let h = 1e-2f32;
        for i in 0..values.len() {
            let orig = values[i];
            values[i] = orig + h;
            let lp = loss(values);
            values[i] = orig - h;
            let lm = loss(values);
            values[i] = orig;
            let num = (lp - lm) / (2.0 * f64::from(h));
            let a = f64::from(analytic[i]);
            assert!(
                (a - num).abs() <= 1e-2 * a.abs().max(num.abs()) + 2e-3,
                "entry {i}: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn gemm_matches_naive_all_transposes() {
        let mut r = rng();
        let (m, k, n) = (5, 7, 3);
        for ta in [false, true] {
            for tb in [false, true] {
                let a = rand_vec(&mut r, m * k);
                let b = rand_vec(&mut r, k * n);
                let mut c = vec![0.5f32; m * n];
                let c0 = c.clone();
                gemm(m, k, n, &a, ta, &b, tb, 1.0, &mut c);
                for i in 0..m {
                    for j in 0..n {
                        let mut want = f64::from(c0[i * n + j]);
                        for p in 0..k {
                            let av = if ta { a[p * m + i] } else { a[i * k + p] };
                            let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                            want += f64::from(av) * f64::from(bv);
                        }
                        assert!((f64::from(c[i * n + j]) - want).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut lin = Linear::new("l", 4, 3, &mut r);
        let mut x = rand_vec(&mut r, 2 * 4);
        let g = rand_vec(&mut r, 2 * 3);
        let dx = lin.backward(&x, &g, 2);
        let probe = lin.clone();
        let gg = g.clone();
        fd_check(&mut x, &dx, |x| {
            probe.forward(x, 2).iter().zip(&gg).map(|(a, b)| f64::from(a * b)).sum()
        });
        let wgrad = lin.weight.grad.clone();
        let xx = x.clone();
        let mut w = lin.weight.value.clone();
        fd_check(&mut w, &wgrad, |w| {
            let mut l = lin.clone();
            l.weight.value.copy_from_slice(w);
            l.forward(&xx, 2).iter().zip(&g).map(|(a, b)| f64::from(a * b)).sum()
        });
    }

    #[test]
    fn layer_norm_and_silu_gradients() {
        let mut r = rng();
        let mut ln = LayerNorm::new("ln", 6);
        ln.gamma.value = rand_vec(&mut r, 6);
        ln.beta.value = rand_vec(&mut r, 6);
        let mut x: Vec<f32> = rand_vec(&mut r, 12).iter().map(|v| v * 3.0).collect();
        let g = rand_vec(&mut r, 12);
        let (_, cache) = ln.forward(&x, 2);
        let dx = ln.backward(&cache, &g, 2);
        fd_check(&mut x, &dx, |x| {
            ln.forward(x, 2).0.iter().zip(&g).map(|(a, b)| f64::from(a * b)).sum()
        });

        let mut s = rand_vec(&mut r, 8);
        let gs = rand_vec(&mut r, 8);
        let ds = silu_backward(&s, &gs);
        fd_check(&mut s, &ds, |s| silu(s).iter().zip(&gs).map(|(a, b)| f64::from(a * b)).sum());
    }

    #[test]
    fn attention_is_causal_normalized_and_differentiable() {
        let mut r = rng();
        let (seqs, time, e) = (2, 4, 8);
        let mut attn = CausalAttention::new("a", e, 2, &mut r);
        let mut x = rand_vec(&mut r, seqs * time * e);
        let (y, cache) = attn.forward(&x, seqs, time);
        for row in cache.weights.chunks(time).enumerate() {
            let t = row.0 % time;
            let s: f32 = row.1.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.1[t + 1..].iter().all(|w| *w == 0.0));
        }
        // later inputs never reach earlier outputs
        let mut x2 = x.clone();
        for v in &mut x2[(time - 1) * e..time * e] {
            *v += 3.0;
        }
        let (y2, _) = attn.forward(&x2, seqs, time);
        assert_eq!(&y[..(time - 1) * e], &y2[..(time - 1) * e]);

        let g = rand_vec(&mut r, seqs * time * e);
        let dx = attn.backward(&cache, &g, seqs, time);
        let probe = attn.clone();
        fd_check(&mut x, &dx, |x| {
            probe.forward(x, seqs, time).0.iter().zip(&g).map(|(a, b)| f64::from(a * b)).sum()
        });
    }

    #[test]
    fn transformer_block_gradients() {
        let mut r = rng();
        let (seqs, time, e) = (2, 3, 8);
        let mut block = TransformerBlock::new("b", e, 2, &mut r);
        let mut x = rand_vec(&mut r, seqs * time * e);
        let g = rand_vec(&mut r, seqs * time * e);
        let (_, cache) = block.forward(&x, seqs, time);
        let dx = block.backward(&cache, &g, seqs, time);
        let probe = block.clone();
        fd_check(&mut x, &dx, |x| {
            probe.forward(x, seqs, time).0.iter().zip(&g).map(|(a, b)| f64::from(a * b)).sum()
        });
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let logits = vec![0.0f32; 6];
        let (loss, grad) = softmax_cross_entropy(&logits, 2, &[0, 1, 1], None, 1.0);
        assert!((loss - 3.0 * 2f64.ln()).abs() < 1e-6);
        assert_eq!(grad, vec![-0.5, 0.5, 0.5, -0.5, 0.5, -0.5]);
        let (masked, g2) = softmax_cross_entropy(&logits, 2, &[0, 1, 1], Some(&[true, false, false]), 1.0);
        assert!((masked - 2f64.ln()).abs() < 1e-6);
        assert_eq!(&g2[2..], &[0.0; 4]);

        let mut r = rng();
        let mut l = rand_vec(&mut r, 12);
        let t = [2, 0, 3];
        let (_, g) = softmax_cross_entropy(&l, 4, &t, None, 1.0);
        fd_check(&mut l, &g, |l| softmax_cross_entropy(l, 4, &t, None, 1.0).0);
    }

    #[test]
    fn patchify_round_trip() {
        let mut r = rng();
        let x = rand_vec(&mut r, 4 * 6 * 2 * 3);
        let p = patchify(&x, [4, 6, 2], 3);
        assert_eq!(unpatchify(&p, [4, 6, 2], 3), x);
        // first row holds voxels (0,0,0),(1,0,0),(0,1,0),(1,1,0)
        assert_eq!(&p[..3], &x[..3]);
        assert_eq!(&p[3..6], &x[3..6]);
        assert_eq!(&p[6..9], &x[4 * 3..4 * 3 + 3]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::zeros("p", &[2]);
        p.value = vec![3.0, -2.0];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad = p.value.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [&mut p]);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng();
        let lin = Linear::new("enc.0", 5, 4, &mut r);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&path, "test", &lin.params(), 9, serde_json::json!({"k": 1})).unwrap();
        let (manifest, payload) = read_checkpoint(&path).unwrap();
        assert_eq!(manifest.seed, 9);
        assert_eq!(manifest.tensors[1].offset, 5 * 4 * 4);
        let mut back = Linear::zeroed("enc.0", 5, 4);
        decode_checkpoint(&manifest, &payload, &mut back.params_mut()).unwrap();
        assert_eq!(back.weight.value, lin.weight.value);

        let mut wrong = Linear::zeroed("enc.1", 5, 4);
        assert!(decode_checkpoint(&manifest, &payload, &mut wrong.params_mut()).is_err());
        assert!(matches!(
            decode_checkpoint(&manifest, &payload[..10], &mut back.params_mut()),
            Err(Error::TruncatedPayload { .. })
        ));
        let (_, again) = encode_checkpoint("test", &back.params(), 9, manifest.config.clone(), "model.bin");
        assert_eq!(again, payload);
    }
}
