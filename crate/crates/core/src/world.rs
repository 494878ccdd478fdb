//! Multi-scale temporal world model over codec tokens, the Lovász-softmax
//! loss and the two training stages.
//!
//! Each frame is embedded per latent column: the air and non-air token
//! embeddings at every height are summed, concatenated over height and
//! projected to width `E` (scale 0). Scale `i + 1` is a 2x2 mean-pool of
//! scale `i` followed by a linear mix. Every scale runs its own causal
//! transformer over time only, one sequence per spatial site; coarse
//! outputs are upsampled by nearest neighbor and added to the next finer
//! scale's inputs. The ego token is one extra scale-0 sequence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::am_vae::{self, CodecKind, SceneTokens, TokenGrid, TrainRecord, VqCodec};
use crate::error::{Error, Result};
use crate::harness::SceneSequence;
use crate::metrics::{self, EvalReport, Prediction, MARK_FRAMES};
use crate::nn::{self, Adam, BlockCache, Embedding, LayerNorm, LayerNormCache, Linear, Module, Param, TransformerBlock};
use crate::occupancy::SemanticVoxelGrid;

// ---------------------------------------------------------------- Lovász

/// Gradient of the Jaccard loss along errors sorted in decreasing order;
/// `fg_sorted` is the ground truth in that order.
fn jaccard_steps(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|f| **f).count() as f64;
    let (mut cum_fg, mut cum_bg, mut prev) = (0.0, 0.0, 0.0);
    fg_sorted
        .iter()
        .map(|f| {
            if *f {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let j = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let step = j - prev;
            prev = j;
            step
        })
        .collect()
}

/// Lovász extension of the Jaccard loss of one class. `errors[i]` is
/// `|fg_i − p_i|`; returns the value and its gradient w.r.t. `errors`.
/// Sorting is stable on index so ties are deterministic.
pub fn lovasz_extension(errors: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(errors.len(), fg.len());
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|a, b| errors[*b].total_cmp(&errors[*a]).then(a.cmp(b)));
    let fg_sorted: Vec<bool> = order.iter().map(|i| fg[*i]).collect();
    let steps = jaccard_steps(&fg_sorted);
    let mut grad = vec![0.0; errors.len()];
    let mut loss = 0.0;
    for (r, i) in order.iter().enumerate() {
        loss += errors[*i] * steps[r];
        grad[*i] = steps[r];
    }
    (loss, grad)
}

/// Binary Lovász loss of foreground probabilities against a foreground mask.
pub fn lovasz_binary(fg_probs: &[f64], fg: &[bool]) -> f64 {
    let errors: Vec<f64> = fg_probs
        .iter()
        .zip(fg)
        .map(|(p, f)| if *f { 1.0 - p } else { *p })
        .collect();
    lovasz_extension(&errors, fg).0
}

/// Lovász-softmax over `probs` laid out `[voxels, classes]`: the mean over
/// classes present in `labels` of the per-class extension.
pub fn lovasz_softmax(probs: &[f64], classes: usize, labels: &[u8]) -> f64 {
    lovasz_softmax_grad(probs, classes, labels).0
}

/// [`lovasz_softmax`] and its gradient w.r.t. `probs`.
pub fn lovasz_softmax_grad(probs: &[f64], classes: usize, labels: &[u8]) -> (f64, Vec<f64>) {
    assert_eq!(probs.len(), labels.len() * classes);
    let mut grad = vec![0.0; probs.len()];
    let present: Vec<usize> = (0..classes)
        .filter(|c| labels.iter().any(|l| *l as usize == *c))
        .collect();
    if present.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    for &c in &present {
        let fg: Vec<bool> = labels.iter().map(|l| *l as usize == c).collect();
        let errors: Vec<f64> = fg
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let p = probs[i * classes + c];
                if *f {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let (l, g) = lovasz_extension(&errors, &fg);
        loss += l * inv;
        for (i, f) in fg.iter().enumerate() {
            grad[i * classes + c] += if *f { -g[i] } else { g[i] } * inv;
        }
    }
    (loss, grad)
}

fn softmax_f64(logits: &[f32], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f64> = row.iter().map(|v| f64::from(*v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// `dL/dlogits` from `dL/dprobs` for row-wise softmax.
fn softmax_backward_f64(probs: &[f64], dprobs: &[f64], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(probs.len());
    for (p, d) in probs.chunks(width).zip(dprobs.chunks(width)) {
        let dot: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(d).map(|(a, b)| (a * (b - dot)) as f32));
    }
    out
}

/// Per-voxel class probabilities of a codec's logits. For the air-mask
/// codec the air branch gates the non-air distribution:
/// `p_0 = a + (1 − a) q_0`, `p_c = (1 − a) q_c`.
pub fn class_probabilities(kind: CodecKind, class_count: usize, logits: &[&[f32]]) -> Vec<f64> {
    match kind {
        CodecKind::SingleBranch => softmax_f64(logits[0], class_count),
        CodecKind::AirMask => {
            let air = softmax_f64(logits[0], 2);
            let q = softmax_f64(logits[1], class_count);
            let mut p = q.clone();
            for v in 0..air.len() / 2 {
                let a = air[v * 2 + 1];
                let row = &mut p[v * class_count..(v + 1) * class_count];
                row.iter_mut().for_each(|x| *x *= 1.0 - a);
                row[0] += a;
            }
            p
        }
    }
}

/// `λ ·` Lovász-softmax of the codec's class probabilities, as an extra
/// codec training objective.
pub fn lovasz_objective(
    kind: CodecKind,
    class_count: usize,
    lambda: f32,
) -> impl Fn(&SemanticVoxelGrid, &[&[f32]]) -> (f64, Vec<Vec<f32>>) {
    move |grid, logits| {
        let zeros = || logits.iter().map(|l| vec![0.0f32; l.len()]).collect::<Vec<_>>();
        if lambda == 0.0 {
            return (0.0, zeros());
        }
        let c = class_count;
        let lam = f64::from(lambda);
        let p = class_probabilities(kind, c, logits);
        let (loss, dp) = lovasz_softmax_grad(&p, c, grid.labels());
        let dp: Vec<f64> = dp.iter().map(|v| v * lam).collect();
        let grads = match kind {
            CodecKind::SingleBranch => vec![softmax_backward_f64(&p, &dp, c)],
            CodecKind::AirMask => {
                let air = softmax_f64(logits[0], 2);
                let q = softmax_f64(logits[1], c);
                let voxels = air.len() / 2;
                let mut dair = vec![0.0f64; air.len()];
                let mut dq = vec![0.0f64; q.len()];
                for v in 0..voxels {
                    let a = air[v * 2 + 1];
                    let qr = &q[v * c..(v + 1) * c];
                    let dr = &dp[v * c..(v + 1) * c];
                    let mut da = dr[0] * (1.0 - qr[0]);
                    for k in 1..c {
                        da -= dr[k] * qr[k];
                    }
                    dair[v * 2 + 1] = da;
                    for k in 0..c {
                        dq[v * c + k] = dr[k] * (1.0 - a);
                    }
                }
                vec![softmax_backward_f64(&air, &dair, 2), softmax_backward_f64(&q, &dq, c)]
            }
        };
        (loss * lam, grads)
    }
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Number of spatial scales (coarser scales = scales − 1).
    pub scales: usize,
    pub embed_dim: usize,
    /// Width of the per-height token embedding before projection.
    pub token_width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Maximum frames in one attention window.
    pub context: usize,
    pub lambda_lovasz: f32,
    pub lambda_l2: f32,
    pub stage1_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            scales: 2,
            embed_dim: 128,
            token_width: 16,
            heads: 4,
            layers: 2,
            context: 8,
            lambda_lovasz: 1.0,
            lambda_l2: 1.0,
            stage1_steps: 200,
            steps: 1000,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scales", self.scales),
            ("embed_dim", self.embed_dim),
            ("token_width", self.token_width),
            ("heads", self.heads),
            ("layers", self.layers),
            ("context", self.context),
            ("batch_size", self.batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config("heads", "must divide embed_dim"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        for (field, v) in [("lambda_lovasz", self.lambda_lovasz), ("lambda_l2", self.lambda_l2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be non-negative and finite"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- tokens

/// One scale of embedded scene tokens: `dims[0] × dims[1]` sites of
/// `width` values, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenField {
    pub dims: [usize; 2],
    pub width: usize,
    pub data: Vec<f32>,
}

/// Embedded scene tokens at every scale, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPyramid {
    pub scales: Vec<TokenField>,
}

/// Ego embedding and the displacement (meters) it carries: the previous
/// displacement for an input token, the decoded one for a prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct EgoToken {
    pub embedding: Vec<f32>,
    pub displacement: [f64; 2],
}

/// Model input for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub air: Vec<u16>,
    pub nonair: Vec<u16>,
    /// Displacement that led into this frame; zero for the first frame.
    pub prev_disp: [f32; 2],
}

impl FrameInput {
    pub fn from_tokens(tokens: &SceneTokens, prev_disp: [f64; 2]) -> Self {
        Self {
            air: tokens.air.tokens.clone(),
            nonair: tokens.nonair.tokens.clone(),
            prev_disp: prev_disp.map(|v| v as f32),
        }
    }
}

/// Inputs for a tokenized sequence: frame `t` carries displacement `t − 1`.
pub fn sequence_inputs(tokens: &[SceneTokens], displacements: &[[f64; 2]]) -> Vec<FrameInput> {
    tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| {
            let prev = if t == 0 { [0.0; 2] } else { displacements[t - 1] };
            FrameInput::from_tokens(tok, prev)
        })
        .collect()
}

/// Site dims at each scale, finest first.
pub fn scale_dims(base: [usize; 2], scales: usize) -> Vec<[usize; 2]> {
    let mut out = vec![base];
    for _ in 1..scales {
        let d = *out.last().unwrap();
        out.push([d[0].div_ceil(2), d[1].div_ceil(2)]);
    }
    out
}

fn parent(s: usize, dims: [usize; 2]) -> usize {
    let (x, y) = (s % dims[0], s / dims[0]);
    x / 2 + dims[0].div_ceil(2) * (y / 2)
}

/// 2x2 mean-pool of `[time, sites, e]` rows.
fn pool2(f: &[f32], dims: [usize; 2], time: usize, e: usize) -> Vec<f32> {
    let sites = dims[0] * dims[1];
    let coarse = dims[0].div_ceil(2) * dims[1].div_ceil(2);
    let mut counts = vec![0.0f32; coarse];
    for s in 0..sites {
        counts[parent(s, dims)] += 1.0;
    }
    let mut out = vec![0.0f32; time * coarse * e];
    for t in 0..time {
        for s in 0..sites {
            let p = parent(s, dims);
            let src = &f[(t * sites + s) * e..][..e];
            let dst = &mut out[(t * coarse + p) * e..][..e];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v / counts[p];
            }
        }
    }
    out
}

fn pool2_adjoint(dg: &[f32], dims: [usize; 2], time: usize, e: usize, df: &mut [f32]) {
    let sites = dims[0] * dims[1];
    let coarse = dims[0].div_ceil(2) * dims[1].div_ceil(2);
    let mut counts = vec![0.0f32; coarse];
    for s in 0..sites {
        counts[parent(s, dims)] += 1.0;
    }
    for t in 0..time {
        for s in 0..sites {
            let p = parent(s, dims);
            let src = &dg[(t * coarse + p) * e..][..e];
            let dst = &mut df[(t * sites + s) * e..][..e];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v / counts[p];
            }
        }
    }
}

// ---------------------------------------------------------------- model

/// Temporal transformer of one scale.
#[derive(Clone, Debug)]
pub struct SubWorldModel {
    /// `[context, E]`
    pub time_pos: Param,
    /// `[sequences, E]`; at scale 0 the last row is the ego sequence.
    pub site_pos: Param,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

struct ScaleTrace {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

impl SubWorldModel {
    fn new(name: &str, sequences: usize, config: &WorldConfig, rng: &mut impl Rng) -> Self {
        let e = config.embed_dim;
        Self {
            time_pos: Param::uniform(format!("{name}.time_pos"), &[config.context, e], 0.1, rng),
            site_pos: Param::uniform(format!("{name}.site_pos"), &[sequences, e], 0.1, rng),
            blocks: (0..config.layers)
                .map(|l| TransformerBlock::new(&format!("{name}.block{l}"), e, config.heads, rng))
                .collect(),
            norm: LayerNorm::new(&format!("{name}.norm"), e),
        }
    }

    fn width(&self) -> usize {
        self.time_pos.shape[1]
    }

    fn add_positions(&self, x: &mut [f32], seqs: usize, time: usize) {
        let e = self.width();
        for s in 0..seqs {
            for t in 0..time {
                let row = &mut x[(s * time + t) * e..][..e];
                let tp = &self.time_pos.value[t * e..][..e];
                let sp = &self.site_pos.value[s * e..][..e];
                for c in 0..e {
                    row[c] += tp[c] + sp[c];
                }
            }
        }
    }

    /// Transformer stack over `[seqs, time, E]` rows (positions included).
    fn run(&self, x: Vec<f32>, seqs: usize, time: usize) -> (Vec<f32>, ScaleTrace) {
        let mut h = x;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&h, seqs, time);
            blocks.push(c);
            h = y;
        }
        let (out, norm) = self.norm.forward(&h, seqs * time);
        (out, ScaleTrace { blocks, norm })
    }

    fn backward(&mut self, trace: &ScaleTrace, dout: &[f32], seqs: usize, time: usize) -> Vec<f32> {
        let e = self.width();
        let mut dx = self.norm.backward(&trace.norm, dout, seqs * time);
        for (b, c) in self.blocks.iter_mut().zip(&trace.blocks).rev() {
            dx = b.backward(c, &dx, seqs, time);
        }
        for s in 0..seqs {
            for t in 0..time {
                let row = &dx[(s * time + t) * e..][..e];
                for c in 0..e {
                    self.time_pos.grad[t * e + c] += row[c];
                    self.site_pos.grad[s * e + c] += row[c];
                }
            }
        }
        dx
    }
}

impl Module for SubWorldModel {
    fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.time_pos, &self.site_pos];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.norm.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.time_pos, &mut self.site_pos];
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.norm.params_mut());
        p
    }
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldConfig,
    /// Codec latent dims `[X, Y, Z]`.
    pub latent_dims: [usize; 3],
    pub codebook_size: usize,
    pub air_embed: Embedding,
    pub nonair_embed: Embedding,
    /// `Z · token_width → E`
    pub proj: Linear,
    /// One `E → E` mix per coarser scale.
    pub pool: Vec<Linear>,
    pub subs: Vec<SubWorldModel>,
    pub ego_start: Param,
    pub ego_disp: Linear,
    pub ego_scene: Linear,
    /// `E → 2 · Z · K` next-token logits.
    pub head: Linear,
    pub ego_hidden: Linear,
    pub ego_out: Linear,
}

/// Everything the backward pass needs from one forward pass.
pub struct WorldTrace {
    time: usize,
    /// Input token ids, frame after frame.
    air: Vec<u16>,
    nonair: Vec<u16>,
    u: Vec<f32>,
    /// Token fields per scale, `[time, sites, E]`.
    fields: Vec<Vec<f32>>,
    /// Pool outputs feeding each coarser scale's mix.
    pooled: Vec<Vec<f32>>,
    means: Vec<f32>,
    disp: Vec<f32>,
    scales: Vec<ScaleTrace>,
    /// Normalized transformer output per scale, `[seqs, time, E]`.
    pub hidden: Vec<Vec<f32>>,
    ego_pre: Vec<f32>,
    ego_act: Vec<f32>,
    /// `[sites, time, 2 · Z · K]`
    pub logits: Vec<f32>,
    /// `[time, 2]`
    pub ego: Vec<f32>,
}

impl WorldTrace {
    /// Attention weights `[seqs, heads, time, time]` of one layer.
    pub fn attention_weights(&self, scale: usize, layer: usize) -> &[f32] {
        &self.scales[scale].blocks[layer].attn.weights
    }

    pub fn time(&self) -> usize {
        self.time
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorldLoss {
    pub token_ce: f64,
    pub ego_l2: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldRecord {
    pub step: usize,
    pub loss: WorldLoss,
}

/// Training window: inputs plus the displacement each frame leads into.
pub struct Window<'a> {
    pub inputs: &'a [FrameInput],
    pub next_disp: &'a [Option<[f32; 2]>],
}

impl WorldModel {
    pub fn new(config: WorldConfig, latent_dims: [usize; 3], codebook_size: usize) -> Result<Self> {
        config.validate()?;
        if latent_dims.contains(&0) || codebook_size == 0 {
            return Err(Error::config("latent_dims", "dims and codebook size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let [x, y, z] = latent_dims;
        let (e, w, k) = (config.embed_dim, config.token_width, codebook_size);
        let dims = scale_dims([x, y], config.scales);
        let air_embed = Embedding::new("tok.air", k, w, &mut rng);
        let nonair_embed = Embedding::new("tok.nonair", k, w, &mut rng);
        let proj = Linear::new("tok.proj", z * w, e, &mut rng);
        let pool = (1..config.scales)
            .map(|i| Linear::new(&format!("tok.pool{i}"), e, e, &mut rng))
            .collect();
        let subs = dims
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let seqs = d[0] * d[1] + usize::from(i == 0);
                SubWorldModel::new(&format!("scale{i}"), seqs, &config, &mut rng)
            })
            .collect();
        Ok(Self {
            ego_start: Param::uniform("ego.start", &[e], 0.1, &mut rng),
            ego_disp: Linear::new("ego.disp", 2, e, &mut rng),
            ego_scene: Linear::new("ego.scene", e, e, &mut rng),
            head: Linear::new("head", e, 2 * z * k, &mut rng),
            ego_hidden: Linear::new("ego.dec1", e, e, &mut rng),
            ego_out: Linear::new("ego.dec2", e, 2, &mut rng),
            config,
            latent_dims,
            codebook_size,
            air_embed,
            nonair_embed,
            proj,
            pool,
            subs,
        })
    }

    fn sites(&self) -> usize {
        self.latent_dims[0] * self.latent_dims[1]
    }

    fn slots(&self) -> usize {
        2 * self.latent_dims[2]
    }

    fn check_inputs(&self, inputs: &[FrameInput]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::config("history", "need at least one frame"));
        }
        if inputs.len() > self.config.context {
            return Err(Error::ContextOverflow {
                len: inputs.len(),
                max: self.config.context,
            });
        }
        let n: usize = self.latent_dims.iter().product();
        for f in inputs {
            if f.air.len() != n || f.nonair.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "frame has {}/{} tokens, model expects {n}",
                    f.air.len(),
                    f.nonair.len()
                )));
            }
            if f.air.iter().chain(&f.nonair).any(|t| *t as usize >= self.codebook_size) {
                return Err(Error::DimensionMismatch("token outside the codebook".into()));
            }
        }
        Ok(())
    }

    /// Per-height token embedding sums concatenated over height:
    /// `[time, sites, Z · w]`.
    fn embed_inputs(&self, inputs: &[FrameInput]) -> Vec<f32> {
        let [_, _, nz] = self.latent_dims;
        let (sites, w) = (self.sites(), self.config.token_width);
        let mut u = vec![0.0f32; inputs.len() * sites * nz * w];
        for (t, f) in inputs.iter().enumerate() {
            for s in 0..sites {
                for z in 0..nz {
                    let i = s + sites * z;
                    let a = self.air_embed.row(f.air[i] as usize);
                    let b = self.nonair_embed.row(f.nonair[i] as usize);
                    let dst = &mut u[((t * sites + s) * nz + z) * w..][..w];
                    for c in 0..w {
                        dst[c] = a[c] + b[c];
                    }
                }
            }
        }
        u
    }

    /// Token fields for every scale, `[time, sites, E]` each.
    fn fields(&self, u: &[f32], time: usize) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let e = self.config.embed_dim;
        let dims = scale_dims([self.latent_dims[0], self.latent_dims[1]], self.config.scales);
        let mut fields = vec![self.proj.forward(u, time * self.sites())];
        let mut pooled = Vec::new();
        for i in 1..self.config.scales {
            let g = pool2(&fields[i - 1], dims[i - 1], time, e);
            fields.push(self.pool[i - 1].forward(&g, time * dims[i][0] * dims[i][1]));
            pooled.push(g);
        }
        (fields, pooled)
    }

    /// Embeds one frame's tokens at every scale and builds its ego token.
    pub fn tokenize_frame(&self, input: &FrameInput) -> Result<(TokenPyramid, EgoToken)> {
        self.check_inputs(std::slice::from_ref(input))?;
        let e = self.config.embed_dim;
        let u = self.embed_inputs(std::slice::from_ref(input));
        let (fields, _) = self.fields(&u, 1);
        let dims = scale_dims([self.latent_dims[0], self.latent_dims[1]], self.config.scales);
        let means = mean_rows(&fields[0], 1, self.sites(), e);
        let ego = self.ego_inputs(&means, &input.prev_disp, 1);
        Ok((
            TokenPyramid {
                scales: fields
                    .into_iter()
                    .zip(dims)
                    .map(|(data, dims)| TokenField { dims, width: e, data })
                    .collect(),
            },
            EgoToken {
                embedding: ego,
                displacement: input.prev_disp.map(f64::from),
            },
        ))
    }

    /// Scene tokens of `grid` under a trained codec. The ego token carries
    /// `prev_disp`.
    pub fn tokenize_scene(
        &self,
        grid: &SemanticVoxelGrid,
        codec: &VqCodec,
        prev_disp: [f64; 2],
    ) -> Result<(TokenPyramid, EgoToken)> {
        if !codec.trained {
            return Err(Error::UntrainedTokenizer);
        }
        let tokens = codec.encode_scene(grid)?;
        self.tokenize_frame(&FrameInput::from_tokens(&tokens, prev_disp))
    }

    fn ego_inputs(&self, means: &[f32], disp: &[f32], time: usize) -> Vec<f32> {
        let e = self.config.embed_dim;
        let a = self.ego_disp.forward(disp, time);
        let b = self.ego_scene.forward(means, time);
        (0..time * e)
            .map(|i| self.ego_start.value[i % e] + a[i] + b[i])
            .collect()
    }

    /// Forward pass over a window of at most `context` frames.
    pub fn forward(&self, inputs: &[FrameInput]) -> Result<WorldTrace> {
        self.check_inputs(inputs)?;
        let time = inputs.len();
        let e = self.config.embed_dim;
        let sites = self.sites();
        let dims = scale_dims([self.latent_dims[0], self.latent_dims[1]], self.config.scales);
        let u = self.embed_inputs(inputs);
        let (fields, pooled) = self.fields(&u, time);
        let means = mean_rows(&fields[0], time, sites, e);
        let disp: Vec<f32> = inputs.iter().flat_map(|f| f.prev_disp).collect();
        let ego_in = self.ego_inputs(&means, &disp, time);

        let mut hidden: Vec<Vec<f32>> = vec![Vec::new(); self.config.scales];
        let mut scales: Vec<Option<ScaleTrace>> = (0..self.config.scales).map(|_| None).collect();
        for i in (0..self.config.scales).rev() {
            let n = dims[i][0] * dims[i][1];
            let seqs = n + usize::from(i == 0);
            let mut x = vec![0.0f32; seqs * time * e];
            for s in 0..n {
                for t in 0..time {
                    x[(s * time + t) * e..][..e].copy_from_slice(&fields[i][(t * n + s) * e..][..e]);
                }
            }
            if i + 1 < self.config.scales {
                let coarse = &hidden[i + 1];
                for s in 0..n {
                    let p = parent(s, dims[i]);
                    for t in 0..time {
                        let src = &coarse[(p * time + t) * e..][..e];
                        for (d, v) in x[(s * time + t) * e..][..e].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            if i == 0 {
                x[n * time * e..].copy_from_slice(&ego_in);
            }
            self.subs[i].add_positions(&mut x, seqs, time);
            let (h, tr) = self.subs[i].run(x, seqs, time);
            hidden[i] = h;
            scales[i] = Some(tr);
        }
        let h0 = &hidden[0];
        let logits = self.head.forward(&h0[..sites * time * e], sites * time);
        let ego_pre = self.ego_hidden.forward(&h0[sites * time * e..], time);
        let ego_act = nn::silu(&ego_pre);
        let ego = self.ego_out.forward(&ego_act, time);
        Ok(WorldTrace {
            time,
            air: inputs.iter().flat_map(|f| f.air.iter().copied()).collect(),
            nonair: inputs.iter().flat_map(|f| f.nonair.iter().copied()).collect(),
            u,
            fields,
            pooled,
            means,
            disp,
            scales: scales.into_iter().map(Option::unwrap).collect(),
            hidden,
            ego_pre,
            ego_act,
            logits,
            ego,
        })
    }

    /// Next-token cross-entropy (mean over sites, slots and the first
    /// `time − 1` steps) plus `λ2 ·` mean squared ego displacement error.
    /// Returns the loss and `scale ·` its gradients w.r.t. logits and ego
    /// outputs.
    pub fn objective(
        &self,
        trace: &WorldTrace,
        window: &Window,
        scale: f32,
    ) -> (WorldLoss, Vec<f32>, Vec<f32>) {
        let (sites, slots, k, time) = (self.sites(), self.slots(), self.codebook_size, trace.time);
        let nz = self.latent_dims[2];
        let rows = sites * time * slots;
        let mut targets = vec![0usize; rows];
        let mut mask = vec![false; rows];
        for s in 0..sites {
            for t in 0..time.saturating_sub(1) {
                let next = &window.inputs[t + 1];
                for z in 0..nz {
                    let i = s + sites * z;
                    let r = (s * time + t) * slots;
                    targets[r + z] = next.air[i] as usize;
                    targets[r + nz + z] = next.nonair[i] as usize;
                    mask[r + z] = true;
                    mask[r + nz + z] = true;
                }
            }
        }
        let count = sites * slots * time.saturating_sub(1);
        let mut loss = WorldLoss::default();
        let d_logits = if count == 0 {
            vec![0.0; trace.logits.len()]
        } else {
            let (sum, g) = nn::softmax_cross_entropy(&trace.logits, k, &targets, Some(&mask), scale / count as f32);
            loss.token_ce = sum / count as f64;
            g
        };
        let mut d_ego = vec![0.0f32; time * 2];
        let known: Vec<(usize, [f32; 2])> = window
            .next_disp
            .iter()
            .take(time)
            .enumerate()
            .filter_map(|(t, d)| d.map(|d| (t, d)))
            .collect();
        if !known.is_empty() {
            let lam = self.config.lambda_l2;
            let inv = 1.0 / known.len() as f64;
            for (t, d) in known {
                for a in 0..2 {
                    let diff = f64::from(trace.ego[t * 2 + a]) - f64::from(d[a]);
                    loss.ego_l2 += diff * diff * inv;
                    d_ego[t * 2 + a] = (2.0 * diff * inv) as f32 * lam * scale;
                }
            }
        }
        loss.total = loss.token_ce + f64::from(self.config.lambda_l2) * loss.ego_l2;
        (loss, d_logits, d_ego)
    }

    /// Accumulates parameter gradients for output gradients `d_logits`
    /// and `d_ego`.
    pub fn backward(&mut self, trace: &WorldTrace, d_logits: &[f32], d_ego: &[f32]) {
        let time = trace.time;
        let e = self.config.embed_dim;
        let sites = self.sites();
        let dims = scale_dims([self.latent_dims[0], self.latent_dims[1]], self.config.scales);
        let h0 = &trace.hidden[0];
        let mut dh = vec![0.0f32; (sites + 1) * time * e];
        let dsites = self.head.backward(&h0[..sites * time * e], d_logits, sites * time);
        dh[..sites * time * e].copy_from_slice(&dsites);
        let d_act = self.ego_out.backward(&trace.ego_act, d_ego, time);
        let d_pre = nn::silu_backward(&trace.ego_pre, &d_act);
        let d_ego_h = self.ego_hidden.backward(&h0[sites * time * e..], &d_pre, time);
        dh[sites * time * e..].copy_from_slice(&d_ego_h);

        let mut dfields: Vec<Vec<f32>> = trace.fields.iter().map(|f| vec![0.0; f.len()]).collect();
        let mut d_ego_in = Vec::new();
        for i in 0..self.config.scales {
            let n = dims[i][0] * dims[i][1];
            let seqs = n + usize::from(i == 0);
            let dx = self.subs[i].backward(&trace.scales[i], &dh, seqs, time);
            for s in 0..n {
                for t in 0..time {
                    dfields[i][(t * n + s) * e..][..e].copy_from_slice(&dx[(s * time + t) * e..][..e]);
                }
            }
            if i == 0 {
                d_ego_in = dx[n * time * e..].to_vec();
            }
            if i + 1 < self.config.scales {
                let cn = dims[i + 1][0] * dims[i + 1][1];
                let mut dcoarse = vec![0.0f32; cn * time * e];
                for s in 0..n {
                    let p = parent(s, dims[i]);
                    for t in 0..time {
                        let src = &dx[(s * time + t) * e..][..e];
                        for (d, v) in dcoarse[(p * time + t) * e..][..e].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                dh = dcoarse;
            }
        }
        for i in (1..self.config.scales).rev() {
            let n = dims[i][0] * dims[i][1];
            let dg = self.pool[i - 1].backward(&trace.pooled[i - 1], &dfields[i], time * n);
            pool2_adjoint(&dg, dims[i - 1], time, e, &mut dfields[i - 1]);
        }
        for t in 0..time {
            for c in 0..e {
                self.ego_start.grad[c] += d_ego_in[t * e + c];
            }
        }
        self.ego_disp.backward_params(&trace.disp, &d_ego_in, time);
        let dmeans = self.ego_scene.backward(&trace.means, &d_ego_in, time);
        for t in 0..time {
            for s in 0..sites {
                for c in 0..e {
                    dfields[0][(t * sites + s) * e + c] += dmeans[t * e + c] / sites as f32;
                }
            }
        }
        let du = self.proj.backward(&trace.u, &dfields[0], time * sites);
        self.accumulate_embeddings(&du, trace);
    }

    fn accumulate_embeddings(&mut self, du: &[f32], trace: &WorldTrace) {
        let nz = self.latent_dims[2];
        let (sites, w) = (self.sites(), self.config.token_width);
        for t in 0..trace.time {
            for s in 0..sites {
                for z in 0..nz {
                    let i = t * sites * nz + s + sites * z;
                    let d = &du[((t * sites + s) * nz + z) * w..][..w];
                    self.air_embed.accumulate(trace.air[i] as usize, d);
                    self.nonair_embed.accumulate(trace.nonair[i] as usize, d);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.air_embed.params();
        p.extend(self.nonair_embed.params());
        p.extend(self.proj.params());
        for l in &self.pool {
            p.extend(l.params());
        }
        for s in &self.subs {
            p.extend(s.params());
        }
        p.push(&self.ego_start);
        p.extend(self.ego_disp.params());
        p.extend(self.ego_scene.params());
        p.extend(self.head.params());
        p.extend(self.ego_hidden.params());
        p.extend(self.ego_out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.air_embed.params_mut();
        p.extend(self.nonair_embed.params_mut());
        p.extend(self.proj.params_mut());
        for l in &mut self.pool {
            p.extend(l.params_mut());
        }
        for s in &mut self.subs {
            p.extend(s.params_mut());
        }
        p.push(&mut self.ego_start);
        p.extend(self.ego_disp.params_mut());
        p.extend(self.ego_scene.params_mut());
        p.extend(self.head.params_mut());
        p.extend(self.ego_hidden.params_mut());
        p.extend(self.ego_out.params_mut());
        p
    }
}

fn mean_rows(f: &[f32], time: usize, sites: usize, e: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; time * e];
    for t in 0..time {
        for s in 0..sites {
            for c in 0..e {
                out[t * e + c] += f[(t * sites + s) * e + c];
            }
        }
        out[t * e..(t + 1) * e].iter_mut().for_each(|v| *v /= sites as f32);
    }
    out
}

/// Row-wise argmax over `width` logits, ties to the lowest index.
fn argmax_tokens(logits: &[f32], width: usize) -> Vec<u16> {
    logits
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}

impl WorldModel {
    /// Predicted next-frame tokens and ego token from time `t` of a trace.
    fn predict_at(&self, trace: &WorldTrace, t: usize) -> (FrameInput, EgoToken) {
        let (sites, slots, k, time) = (self.sites(), self.slots(), self.codebook_size, trace.time);
        let nz = self.latent_dims[2];
        let e = self.config.embed_dim;
        let mut air = vec![0u16; sites * nz];
        let mut nonair = vec![0u16; sites * nz];
        for s in 0..sites {
            let row = &trace.logits[(s * time + t) * slots * k..][..slots * k];
            let best = argmax_tokens(row, k);
            for z in 0..nz {
                air[s + sites * z] = best[z];
                nonair[s + sites * z] = best[nz + z];
            }
        }
        let disp = [trace.ego[t * 2], trace.ego[t * 2 + 1]];
        let embedding = trace.hidden[0][(sites * time + t) * e..][..e].to_vec();
        (
            FrameInput {
                air,
                nonair,
                prev_disp: disp,
            },
            EgoToken {
                embedding,
                displacement: disp.map(f64::from),
            },
        )
    }

    /// Autoregressive rollout: each step predicts the next frame from the
    /// last `context` frames and feeds the prediction back.
    pub fn rollout(&self, history: &[FrameInput], horizon: usize) -> Result<Vec<(FrameInput, EgoToken)>> {
        if horizon == 0 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        self.check_inputs(history)?;
        let mut frames = history.to_vec();
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let start = frames.len().saturating_sub(self.config.context);
            let trace = self.forward(&frames[start..])?;
            let step = self.predict_at(&trace, trace.time - 1);
            frames.push(step.0.clone());
            out.push(step);
        }
        Ok(out)
    }

    /// Forecasts `horizon` frames after `frames`. `displacements[t]` is the
    /// ego motion from frame `t` to `t + 1`; at least `frames.len() − 1`
    /// entries are needed.
    pub fn forecast(
        &self,
        codec: &VqCodec,
        frames: &[SemanticVoxelGrid],
        displacements: &[[f64; 2]],
        horizon: usize,
    ) -> Result<Forecast> {
        if !codec.trained {
            return Err(Error::UntrainedTokenizer);
        }
        let last = frames.last().ok_or_else(|| Error::config("history", "need at least one frame"))?;
        if displacements.len() + 1 < frames.len() {
            return Err(Error::LengthMismatch(format!(
                "{} displacements for {} history frames",
                displacements.len(),
                frames.len()
            )));
        }
        let tokens = frames.iter().map(|g| codec.encode_scene(g)).collect::<Result<Vec<_>>>()?;
        let history = sequence_inputs(&tokens, displacements);
        let steps = self.rollout(&history, horizon)?;
        let mut out = Forecast {
            grids: Vec::with_capacity(horizon),
            tokens: Vec::with_capacity(horizon),
            ego: Vec::with_capacity(horizon),
        };
        for (input, ego) in steps {
            let grid = |t: Vec<u16>| TokenGrid {
                dims: self.latent_dims,
                codebook_size: self.codebook_size,
                tokens: t,
            };
            let st = SceneTokens {
                air: grid(input.air),
                nonair: grid(input.nonair),
            };
            out.grids.push(codec.decode_scene_tokens(&st, last)?);
            out.tokens.push(st);
            out.ego.push(ego);
        }
        Ok(out)
    }

    pub fn manifest_config(&self) -> serde_json::Value {
        serde_json::json!({
            "world": self.config,
            "latent_dims": self.latent_dims,
            "codebook_size": self.codebook_size,
        })
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        nn::save_checkpoint(
            manifest_path,
            "world_model",
            &self.params(),
            self.config.seed,
            self.manifest_config(),
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (manifest, payload) = nn::read_checkpoint(manifest_path)?;
        #[derive(Deserialize)]
        struct Header {
            world: WorldConfig,
            latent_dims: [usize; 3],
            codebook_size: usize,
        }
        if manifest.kind != "world_model" {
            return Err(Error::Checkpoint(format!("expected a world_model checkpoint, got {}", manifest.kind)));
        }
        let h: Header = serde_json::from_value(manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("world header: {e}")))?;
        let mut model = Self::new(h.world, h.latent_dims, h.codebook_size)?;
        nn::decode_checkpoint(&manifest, &payload, &mut model.params_mut())?;
        Ok(model)
    }
}

/// Output of [`WorldModel::forecast`]: one grid, token set and ego token
/// per horizon step.
#[derive(Clone, Debug)]
pub struct Forecast {
    pub grids: Vec<SemanticVoxelGrid>,
    pub tokens: Vec<SceneTokens>,
    pub ego: Vec<EgoToken>,
}

impl Forecast {
    pub fn displacements(&self) -> Vec<[f64; 2]> {
        self.ego.iter().map(|e| e.displacement).collect()
    }
}

/// A sequence as model inputs plus per-frame displacement targets.
#[derive(Clone, Debug)]
pub struct TokenizedSequence {
    pub inputs: Vec<FrameInput>,
    pub next_disp: Vec<Option<[f32; 2]>>,
}

pub fn tokenize_sequence(codec: &VqCodec, seq: &SceneSequence) -> Result<TokenizedSequence> {
    if !codec.trained {
        return Err(Error::UntrainedTokenizer);
    }
    let tokens = seq
        .frames
        .iter()
        .map(|g| codec.encode_scene(g))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenizedSequence {
        inputs: sequence_inputs(&tokens, &seq.displacements),
        next_disp: (0..tokens.len())
            .map(|t| seq.displacements.get(t).map(|d| d.map(|v| v as f32)))
            .collect(),
    })
}

/// Stage 1: continues codec training with cross-entropy plus
/// `λ1 ·` Lovász-softmax on the decoded class probabilities.
pub fn stage1_train(
    codec: &mut VqCodec,
    grids: &[SemanticVoxelGrid],
    lambda_lovasz: f32,
    steps: usize,
) -> Result<Vec<TrainRecord>> {
    if grids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let objective = lovasz_objective(codec.kind, codec.class_count as usize, lambda_lovasz);
    am_vae::continue_training_with(codec, grids, steps, Some(&objective))
}

/// Stage 2: trains a fresh world model on sequences tokenized by a frozen
/// codec, with teacher forcing.
pub fn stage2_train(
    sequences: &[SceneSequence],
    codec: &VqCodec,
    config: &WorldConfig,
) -> Result<(WorldModel, Vec<WorldRecord>)> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if sequences.iter().any(|s| s.frames.len() < 2) {
        return Err(Error::config("sequences", "every sequence needs at least 2 frames"));
    }
    let data = sequences
        .iter()
        .map(|s| tokenize_sequence(codec, s))
        .collect::<Result<Vec<_>>>()?;
    let latent_dims = am_vae::latent_dims(sequences[0].frames[0].dims());
    let mut model = WorldModel::new(config.clone(), latent_dims, codec.config.codebook_size)?;
    let curve = train_world(&mut model, &data, config.steps)?;
    Ok((model, curve))
}

/// Runs `steps` teacher-forced Adam steps. Each batch element is a random
/// window of at most `context` frames from a random sequence.
pub fn train_world(model: &mut WorldModel, data: &[TokenizedSequence], steps: usize) -> Result<Vec<WorldRecord>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0077_0a1d);
    let mut adam = Adam::new(cfg.learning_rate);
    let scale = 1.0 / cfg.batch_size as f32;
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        model.zero_grad();
        let mut loss = WorldLoss::default();
        for _ in 0..cfg.batch_size {
            let seq = &data[rng.gen_range(0..data.len())];
            let len = seq.inputs.len().min(cfg.context);
            let start = rng.gen_range(0..=seq.inputs.len() - len);
            let window = Window {
                inputs: &seq.inputs[start..start + len],
                next_disp: &seq.next_disp[start..start + len],
            };
            let trace = model.forward(window.inputs)?;
            let (l, d_logits, d_ego) = model.objective(&trace, &window, scale);
            model.backward(&trace, &d_logits, &d_ego);
            let s = f64::from(scale);
            loss.token_ce += l.token_ce * s;
            loss.ego_l2 += l.ego_l2 * s;
            loss.total += l.total * s;
        }
        let mut params = model.params_mut();
        nn::clip_grad_norm(&mut params, 5.0);
        adam.step(&mut params);
        curve.push(WorldRecord { step, loss });
    }
    Ok(curve)
}

/// Forecasts 6 frames after the first `history` frames of every sequence
/// and scores them at the 1 s / 2 s / 3 s marks beside copy-paste.
pub fn evaluate(
    model: &WorldModel,
    codec: &VqCodec,
    sequences: &[SceneSequence],
    history: usize,
) -> Result<EvalReport> {
    let horizon = MARK_FRAMES[2];
    if history == 0 {
        return Err(Error::config("history", "must be at least 1"));
    }
    let preds = sequences
        .iter()
        .map(|seq| {
            if seq.frames.len() < history || seq.displacements.len() + 1 < history {
                return Err(Error::LengthMismatch(format!(
                    "sequence of {} frames is shorter than the history {history}",
                    seq.frames.len()
                )));
            }
            let f = model.forecast(codec, &seq.frames[..history], &seq.displacements[..history - 1], horizon)?;
            Ok(Prediction {
                displacements: f.displacements(),
                grids: f.grids,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::score_forecasts(&preds, sequences, history)
}
