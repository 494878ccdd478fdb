//! Vector-quantized occupancy codec with separate air and non-air branches.
//!
//! Each branch is a two-layer patch encoder (`2×2×1` kernels, stride 2 in
//! X and Y, so the latent is `X/4 × Y/4 × Z`), a nearest-neighbour
//! codebook maintained by exponential moving averages, and the mirrored
//! transposed decoder. Gradients cross the quantizer straight through.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Adam, Linear, Module, Param};
use crate::occupancy::{recombine, split_air, ClassSet, SemanticVoxelGrid, AIR};

/// Horizontal reduction between grid and latent.
pub const REDUCTION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub beta: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub ema_decay: f32,
    pub dead_after: u32,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            latent_dim: 128,
            hidden: 32,
            beta: 0.25,
            steps: 2000,
            batch_size: 2,
            learning_rate: 2e-3,
            ema_decay: 0.99,
            dead_after: 200,
            seed: 0,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=u16::MAX as usize).contains(&self.codebook_size) {
            return Err(Error::config("codebook_size", "must be in [2, 65535]"));
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::config("latent_dim", "widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be finite and non-negative"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("ema_decay", "must lie in (0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Continuous latent field, channels last, sites in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentField {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl LatentField {
    pub fn sites(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn site(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub dims: [usize; 3],
    pub codebook_size: usize,
    pub tokens: Vec<u16>,
}

/// `K × D` codebook with moving-average statistics.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub entries: Param,
    pub ema_count: Param,
    pub ema_sum: Param,
    /// Consecutive update steps without an assignment, per entry.
    pub idle: Param,
    /// Lifetime assignment counts, per entry.
    pub usage: Vec<u64>,
    initialized: bool,
}

impl Codebook {
    pub fn new(name: &str, size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        assert!(size >= 2, "codebook needs at least two entries");
        let entries = Param::uniform(format!("{name}.entries"), &[size, dim], 1.0 / size as f32, rng);
        let mut ema_count = Param::zeros(format!("{name}.ema_count"), &[size]);
        ema_count.value.iter_mut().for_each(|v| *v = 1.0);
        let mut ema_sum = Param::zeros(format!("{name}.ema_sum"), &[size, dim]);
        ema_sum.value.copy_from_slice(&entries.value);
        Self {
            entries,
            ema_count,
            ema_sum,
            idle: Param::zeros(format!("{name}.idle"), &[size]),
            usage: vec![0; size],
            initialized: false,
        }
    }

    pub fn from_entries(name: &str, dim: usize, entries: Vec<f32>) -> Self {
        let size = entries.len() / dim;
        let mut cb = Self::new(name, size, dim, &mut ChaCha8Rng::seed_from_u64(0));
        cb.entries.value.copy_from_slice(&entries);
        cb.ema_sum.value.copy_from_slice(&entries);
        cb.initialized = true;
        cb
    }

    pub fn size(&self) -> usize {
        self.entries.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape[1]
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        let d = self.dim();
        &self.entries.value[k * d..(k + 1) * d]
    }

    fn set_entry(&mut self, k: usize, v: &[f32]) {
        let d = self.dim();
        self.entries.value[k * d..(k + 1) * d].copy_from_slice(v);
        self.ema_sum.value[k * d..(k + 1) * d].copy_from_slice(v);
        self.ema_count.value[k] = 1.0;
        self.idle.value[k] = 0.0;
    }

    /// Nearest entry per row of `latents` (`rows × D`), ties to the lowest
    /// index. A single-precision distance pass shortlists candidates; the
    /// shortlist is resolved with exact double-precision distances.
    pub fn nearest(&self, latents: &[f32]) -> Vec<u16> {
        let (k, d) = (self.size(), self.dim());
        let rows = latents.len() / d;
        let norms: Vec<f32> = (0..k)
            .map(|i| self.entry(i).iter().map(|v| v * v).sum())
            .collect();
        let max_norm = norms.iter().copied().fold(0.0f32, f32::max);
        let mut cross = vec![0.0f32; rows * k];
        nn::gemm(rows, d, k, latents, false, &self.entries.value, true, 0.0, &mut cross);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let z = &latents[r * d..(r + 1) * d];
            let zn: f32 = z.iter().map(|v| v * v).sum();
            let approx: Vec<f32> = (0..k).map(|i| norms[i] - 2.0 * cross[r * k + i]).collect();
            let best = approx.iter().copied().fold(f32::INFINITY, f32::min);
            let margin = 1e-4 * (zn + max_norm) + 1e-30;
            let mut best_idx = 0usize;
            let mut best_dist = f64::INFINITY;
            for (i, a) in approx.iter().enumerate() {
                if *a > best + margin {
                    continue;
                }
                let dist = exact_sq_dist(z, self.entry(i));
                if dist < best_dist {
                    best_dist = dist;
                    best_idx = i;
                }
            }
            out.push(best_idx as u16);
        }
        out
    }

    /// One moving-average step from a batch of latents and their
    /// assignments. Entries idle for `dead_after` steps are reseeded from
    /// the batch latents worst served by their current entry, one latent per
    /// entry, largest error first.
    pub fn ema_update(&mut self, latents: &[f32], tokens: &[u16], decay: f32, dead_after: u32) {
        let (k, d) = (self.size(), self.dim());
        let errors: Vec<f64> = tokens
            .iter()
            .enumerate()
            .map(|(r, t)| exact_sq_dist(&latents[r * d..(r + 1) * d], self.entry(*t as usize)))
            .collect();
        let mut counts = vec![0u64; k];
        let mut sums = vec![0.0f64; k * d];
        for (r, t) in tokens.iter().enumerate() {
            let t = *t as usize;
            counts[t] += 1;
            for c in 0..d {
                sums[t * d + c] += f64::from(latents[r * d + c]);
            }
        }
        for i in 0..k {
            let n = counts[i] as f32;
            self.ema_count.value[i] = decay * self.ema_count.value[i] + (1.0 - decay) * n;
            for c in 0..d {
                let s = &mut self.ema_sum.value[i * d + c];
                *s = decay * *s + (1.0 - decay) * sums[i * d + c] as f32;
            }
            if counts[i] > 0 {
                self.usage[i] += counts[i];
                self.idle.value[i] = 0.0;
                let inv = 1.0 / self.ema_count.value[i];
                for c in 0..d {
                    self.entries.value[i * d + c] = self.ema_sum.value[i * d + c] * inv;
                }
            } else {
                self.idle.value[i] += 1.0;
            }
        }
        let rows = tokens.len();
        if rows == 0 {
            return;
        }
        let mut worst: Vec<usize> = (0..rows).collect();
        worst.sort_by(|a, b| errors[*b].total_cmp(&errors[*a]).then(a.cmp(b)));
        let dead: Vec<usize> = (0..k).filter(|i| self.idle.value[*i] >= dead_after as f32).collect();
        for (i, r) in dead.into_iter().zip(worst.into_iter().cycle()) {
            let v = latents[r * d..(r + 1) * d].to_vec();
            self.set_entry(i, &v);
        }
    }

    /// Seeds every entry from distinct batch latents (shuffled); used once
    /// before the first update.
    pub fn init_from(&mut self, latents: &[f32], rng: &mut impl Rng) {
        let d = self.dim();
        let rows = latents.len() / d;
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(rng);
        for i in 0..self.size() {
            let r = order[i % rows];
            let mut v = latents[r * d..(r + 1) * d].to_vec();
            if i >= rows {
                for x in &mut v {
                    *x += rng.gen_range(-1e-3..1e-3);
                }
            }
            self.set_entry(i, &v);
        }
        self.initialized = true;
    }
}

fn exact_sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let t = f64::from(*x) - f64::from(*y);
            t * t
        })
        .sum()
}

impl Module for Codebook {
    fn params(&self) -> Vec<&Param> {
        vec![&self.entries, &self.ema_count, &self.ema_sum, &self.idle]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.entries, &mut self.ema_count, &mut self.ema_sum, &mut self.idle]
    }
}

/// Nearest-entry substitution of a latent field.
pub fn quantize(latent: &LatentField, codebook: &Codebook) -> Result<(TokenGrid, LatentField)> {
    if latent.channels != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "latent width {} vs codebook width {}",
            latent.channels,
            codebook.dim()
        )));
    }
    let tokens = codebook.nearest(&latent.data);
    let mut data = Vec::with_capacity(latent.data.len());
    for t in &tokens {
        data.extend_from_slice(codebook.entry(*t as usize));
    }
    Ok((
        TokenGrid {
            dims: latent.dims,
            codebook_size: codebook.size(),
            tokens,
        },
        LatentField {
            dims: latent.dims,
            channels: latent.channels,
            data,
        },
    ))
}

/// Encoder and decoder of one branch. Layer names are recorded in the
/// checkpoint manifest: `enc1 (4V→H)`, `enc2 (4H→D)`, `dec1 (D→4H)`,
/// `dec2 (H→4V)`.
#[derive(Clone, Debug)]
pub struct BranchNet {
    pub vocab: usize,
    pub enc1: Linear,
    pub enc2: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
}

/// Intermediate activations kept for the backward pass.
pub struct BranchTrace {
    pub dims: [usize; 3],
    p0: Vec<f32>,
    h1: Vec<f32>,
    p1: Vec<f32>,
    pub latent: LatentField,
    pub tokens: TokenGrid,
    pub quantized: LatentField,
    u1: Vec<f32>,
    a1: Vec<f32>,
    /// `voxels × vocab`, grid order.
    pub logits: Vec<f32>,
}

fn half(dims: [usize; 3]) -> [usize; 3] {
    [dims[0] / 2, dims[1] / 2, dims[2]]
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if !dims[0].is_multiple_of(REDUCTION) || !dims[1].is_multiple_of(REDUCTION) || dims.contains(&0) {
        return Err(Error::ShapeMismatch(format!(
            "grid dims {dims:?} must be non-zero with X and Y divisible by {REDUCTION}"
        )));
    }
    Ok(())
}

pub fn latent_dims(dims: [usize; 3]) -> [usize; 3] {
    [dims[0] / REDUCTION, dims[1] / REDUCTION, dims[2]]
}

pub fn one_hot(labels: &[u8], vocab: usize) -> Vec<f32> {
    let mut x = vec![0.0f32; labels.len() * vocab];
    for (i, l) in labels.iter().enumerate() {
        x[i * vocab + *l as usize] = 1.0;
    }
    x
}

impl BranchNet {
    pub fn new(name: &str, vocab: usize, hidden: usize, latent_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            vocab,
            enc1: Linear::new(&format!("{name}.enc1"), 4 * vocab, hidden, rng),
            enc2: Linear::new(&format!("{name}.enc2"), 4 * hidden, latent_dim, rng),
            dec1: Linear::new(&format!("{name}.dec1"), latent_dim, 4 * hidden, rng),
            dec2: Linear::new(&format!("{name}.dec2"), hidden, 4 * vocab, rng),
        }
    }

    pub fn zeroed(name: &str, vocab: usize, hidden: usize, latent_dim: usize) -> Self {
        Self {
            vocab,
            enc1: Linear::zeroed(&format!("{name}.enc1"), 4 * vocab, hidden),
            enc2: Linear::zeroed(&format!("{name}.enc2"), 4 * hidden, latent_dim),
            dec1: Linear::zeroed(&format!("{name}.dec1"), latent_dim, 4 * hidden),
            dec2: Linear::zeroed(&format!("{name}.dec2"), hidden, 4 * vocab),
        }
    }

    pub fn hidden(&self) -> usize {
        self.enc1.fan_out()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc2.fan_out()
    }

    /// Encodes a one-hot field (`voxels × vocab`).
    pub fn encode(&self, one_hot: &[f32], dims: [usize; 3]) -> Result<LatentField> {
        Ok(self.encode_traced(one_hot, dims)?.3)
    }

    fn encode_traced(
        &self,
        one_hot: &[f32],
        dims: [usize; 3],
    ) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>, LatentField)> {
        check_dims(dims)?;
        let voxels: usize = dims.iter().product();
        if one_hot.len() != voxels * self.vocab {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, expected {voxels} × {}",
                one_hot.len(),
                self.vocab
            )));
        }
        let p0 = nn::patchify(one_hot, dims, self.vocab);
        let h1 = self.enc1.forward(&p0, voxels / 4);
        let a1 = nn::silu(&h1);
        let p1 = nn::patchify(&a1, half(dims), self.hidden());
        let z = self.enc2.forward(&p1, voxels / 16);
        let latent = LatentField {
            dims: latent_dims(dims),
            channels: self.latent_dim(),
            data: z,
        };
        Ok((p0, h1, p1, latent))
    }

    /// Class logits (`voxels × vocab`, grid order) for a latent field.
    pub fn decode(&self, quantized: &LatentField) -> Result<Vec<f32>> {
        Ok(self.decode_traced(quantized)?.2)
    }

    fn decode_traced(&self, q: &LatentField) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
        if q.channels != self.latent_dim() || q.data.len() != q.sites() * q.channels {
            return Err(Error::ShapeMismatch(format!(
                "latent width {} vs decoder width {}",
                q.channels,
                self.latent_dim()
            )));
        }
        let dims = [q.dims[0] * REDUCTION, q.dims[1] * REDUCTION, q.dims[2]];
        let sites = q.sites();
        let g1 = self.dec1.forward(&q.data, sites);
        let u1 = nn::unpatchify(&g1, half(dims), self.hidden());
        let a1 = nn::silu(&u1);
        let g2 = self.dec2.forward(&a1, sites * 4);
        let logits = nn::unpatchify(&g2, dims, self.vocab);
        Ok((u1, a1, logits))
    }
}

impl Module for BranchNet {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.enc1.params();
        p.extend(self.enc2.params());
        p.extend(self.dec1.params());
        p.extend(self.dec2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.enc1.params_mut();
        p.extend(self.enc2.params_mut());
        p.extend(self.dec1.params_mut());
        p.extend(self.dec2.params_mut());
        p
    }
}

/// One encoder/codebook/decoder branch.
#[derive(Clone, Debug)]
pub struct VqBranch {
    pub net: BranchNet,
    pub codebook: Codebook,
}

impl VqBranch {
    pub fn new(name: &str, vocab: usize, config: &VaeConfig, rng: &mut impl Rng) -> Self {
        Self {
            net: BranchNet::new(name, vocab, config.hidden, config.latent_dim, rng),
            codebook: Codebook::new(&format!("{name}.codebook"), config.codebook_size, config.latent_dim, rng),
        }
    }

    pub fn forward(&self, labels: &[u8], dims: [usize; 3]) -> Result<BranchTrace> {
        let x = one_hot(labels, self.net.vocab);
        let (p0, h1, p1, latent) = self.net.encode_traced(&x, dims)?;
        let (tokens, quantized) = quantize(&latent, &self.codebook)?;
        let (u1, a1, logits) = self.net.decode_traced(&quantized)?;
        Ok(BranchTrace {
            dims,
            p0,
            h1,
            p1,
            latent,
            tokens,
            quantized,
            u1,
            a1,
            logits,
        })
    }

    /// Backpropagates `d_logits` through the decoder, straight through the
    /// quantizer, and into the encoder together with the commitment term
    /// `commit_weight · mean_sites ‖z − sg(q)‖²`.
    pub fn backward(&mut self, trace: &BranchTrace, d_logits: &[f32], commit_weight: f32) {
        let dims = trace.dims;
        let voxels: usize = dims.iter().product();
        let sites = voxels / 16;
        let hidden = self.net.hidden();
        let vocab = self.net.vocab;
        let dg2 = nn::patchify(d_logits, dims, vocab);
        let da1 = self.net.dec2.backward(&trace.a1, &dg2, voxels / 4);
        let du1 = nn::silu_backward(&trace.u1, &da1);
        let dg1 = nn::patchify(&du1, half(dims), hidden);
        let mut dz = self.net.dec1.backward(&trace.quantized.data, &dg1, sites);
        let c = 2.0 * commit_weight / sites as f32;
        for ((g, z), q) in dz.iter_mut().zip(&trace.latent.data).zip(&trace.quantized.data) {
            *g += c * (z - q);
        }
        let dp1 = self.net.enc2.backward(&trace.p1, &dz, sites);
        let da0 = nn::unpatchify(&dp1, half(dims), hidden);
        let dh1 = nn::silu_backward(&trace.h1, &da0);
        self.net.enc1.backward_params(&trace.p0, &dh1, voxels / 4);
    }

    pub fn decode_tokens(&self, tokens: &TokenGrid) -> Result<Vec<f32>> {
        if tokens.codebook_size != self.codebook.size() {
            return Err(Error::ShapeMismatch(format!(
                "tokens index a codebook of {} entries, this one has {}",
                tokens.codebook_size,
                self.codebook.size()
            )));
        }
        let mut data = Vec::with_capacity(tokens.tokens.len() * self.codebook.dim());
        for t in &tokens.tokens {
            if *t as usize >= self.codebook.size() {
                return Err(Error::ShapeMismatch(format!("token {t} out of range")));
            }
            data.extend_from_slice(self.codebook.entry(*t as usize));
        }
        self.net.decode(&LatentField {
            dims: tokens.dims,
            channels: self.codebook.dim(),
            data,
        })
    }
}

impl Module for VqBranch {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.net.params();
        p.extend(self.codebook.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.net.params_mut();
        p.extend(self.codebook.params_mut());
        p
    }
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows(logits: &[f32], width: usize) -> Vec<u8> {
    logits
        .chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean cross-entropy over the masked voxels and its gradient.
fn branch_ce(logits: &[f32], vocab: usize, labels: &[u8], mask: Option<&[bool]>) -> (f64, Vec<f32>) {
    let n = match mask {
        Some(m) => m.iter().filter(|b| **b).count(),
        None => labels.len(),
    };
    if n == 0 {
        return (0.0, vec![0.0; logits.len()]);
    }
    let targets: Vec<usize> = labels.iter().map(|l| *l as usize).collect();
    let (sum, grad) = nn::softmax_cross_entropy(logits, vocab, &targets, mask, 1.0 / n as f32);
    (sum / n as f64, grad)
}

fn commitment(trace: &BranchTrace) -> f64 {
    let sites = trace.latent.sites();
    exact_sq_dist(&trace.latent.data, &trace.quantized.data) / sites as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub recon: f64,
    pub commit: f64,
    /// Value of any extra objective passed to [`continue_training_with`].
    #[serde(default)]
    pub aux: f64,
    pub total: f64,
}

/// Reconstruction, commitment and combined loss for one grid.
///
/// Reconstruction is the mean voxel cross-entropy of the air branch plus
/// the mean cross-entropy of the non-air branch over non-air voxels.
/// Commitment sums `‖s − s'‖²` over channels, averaged over sites, for
/// both branches.
pub fn vae_loss(
    air_labels: &[u8],
    nonair_labels: &[u8],
    air_logits: &[f32],
    nonair_logits: &[f32],
    latents: [&LatentField; 2],
    quantized: [&LatentField; 2],
    beta: f32,
) -> VaeLoss {
    let nonair_vocab = nonair_logits.len() / nonair_labels.len();
    let mask: Vec<bool> = nonair_labels.iter().map(|l| *l != AIR).collect();
    let recon = branch_ce(air_logits, 2, air_labels, None).0
        + branch_ce(nonair_logits, nonair_vocab, nonair_labels, Some(&mask)).0;
    let commit = exact_sq_dist(&latents[0].data, &quantized[0].data) / latents[0].sites() as f64
        + exact_sq_dist(&latents[1].data, &quantized[1].data) / latents[1].sites() as f64;
    VaeLoss {
        recon,
        commit,
        aux: 0.0,
        total: recon + f64::from(beta) * commit,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Air branch (2 states) plus non-air branch (C classes).
    AirMask,
    /// One branch over all C classes.
    SingleBranch,
}

/// Trained or untrained occupancy codec.
#[derive(Clone, Debug)]
pub struct VqCodec {
    pub kind: CodecKind,
    pub config: VaeConfig,
    pub class_count: u16,
    pub branches: Vec<VqBranch>,
    pub trained: bool,
}

/// Per-branch supervision derived from a grid.
struct BranchTarget {
    labels: Vec<u8>,
    mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneTokens {
    pub air: TokenGrid,
    pub nonair: TokenGrid,
}

impl VqCodec {
    pub fn new(kind: CodecKind, class_count: u16, config: VaeConfig) -> Result<Self> {
        config.validate()?;
        if class_count < 2 {
            return Err(Error::config("class_count", "need air plus at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = class_count as usize;
        let branches = match kind {
            CodecKind::AirMask => vec![
                VqBranch::new("air", 2, &config, &mut rng),
                VqBranch::new("nonair", c, &config, &mut rng),
            ],
            CodecKind::SingleBranch => vec![VqBranch::new("full", c, &config, &mut rng)],
        };
        Ok(Self {
            kind,
            config,
            class_count,
            branches,
            trained: false,
        })
    }

    pub fn mask(&self) -> ClassSet {
        ClassSet::all_non_air(self.class_count)
    }

    fn targets(&self, grid: &SemanticVoxelGrid) -> Vec<BranchTarget> {
        match self.kind {
            CodecKind::AirMask => {
                let split = split_air(grid, &self.mask());
                let nonair = split.nonair_part.labels().to_vec();
                let mask = nonair.iter().map(|l| *l != AIR).collect();
                vec![
                    BranchTarget {
                        labels: split.air_part.labels().to_vec(),
                        mask: None,
                    },
                    BranchTarget {
                        labels: nonair,
                        mask: Some(mask),
                    },
                ]
            }
            CodecKind::SingleBranch => vec![BranchTarget {
                labels: grid.labels().to_vec(),
                mask: None,
            }],
        }
    }

    fn check_grid(&self, grid: &SemanticVoxelGrid) -> Result<()> {
        if grid.class_count() != self.class_count {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} classes, codec expects {}",
                grid.class_count(),
                self.class_count
            )));
        }
        check_dims(grid.dims())
    }

    /// Full forward pass; returns the per-branch traces.
    pub fn forward(&self, grid: &SemanticVoxelGrid) -> Result<Vec<BranchTrace>> {
        self.check_grid(grid)?;
        self.targets(grid)
            .iter()
            .zip(&self.branches)
            .map(|(t, b)| b.forward(&t.labels, grid.dims()))
            .collect()
    }

    /// Loss of one grid under the current parameters.
    pub fn loss(&self, grid: &SemanticVoxelGrid) -> Result<VaeLoss> {
        let traces = self.forward(grid)?;
        let targets = self.targets(grid);
        let mut out = VaeLoss::default();
        for ((trace, target), branch) in traces.iter().zip(&targets).zip(&self.branches) {
            out.recon += branch_ce(&trace.logits, branch.net.vocab, &target.labels, target.mask.as_deref()).0;
            out.commit += commitment(trace);
        }
        out.total = out.recon + f64::from(self.config.beta) * out.commit;
        Ok(out)
    }

    /// Accumulates `scale ·` gradients of the loss of `grid`, plus the
    /// optional extra objective; returns the loss and the traces (for
    /// codebook statistics).
    fn accumulate(
        &mut self,
        grid: &SemanticVoxelGrid,
        scale: f32,
        extra: Option<&LogitObjective>,
    ) -> Result<(VaeLoss, Vec<BranchTrace>)> {
        let traces = self.forward(grid)?;
        let targets = self.targets(grid);
        let beta = self.config.beta;
        let mut out = VaeLoss::default();
        let mut extra_grads = None;
        if let Some(f) = extra {
            let logits: Vec<&[f32]> = traces.iter().map(|t| t.logits.as_slice()).collect();
            let (value, grads) = f(grid, &logits);
            out.aux = value;
            extra_grads = Some(grads);
        }
        for (bi, ((trace, target), branch)) in traces.iter().zip(&targets).zip(self.branches.iter_mut()).enumerate() {
            let (ce, mut d) = branch_ce(&trace.logits, branch.net.vocab, &target.labels, target.mask.as_deref());
            if let Some(g) = &extra_grads {
                d.iter_mut().zip(&g[bi]).for_each(|(a, b)| *a += b);
            }
            d.iter_mut().for_each(|v| *v *= scale);
            branch.backward(trace, &d, beta * scale);
            out.recon += ce;
            out.commit += commitment(trace);
        }
        out.total = out.recon + f64::from(beta) * out.commit + out.aux;
        Ok((out, traces))
    }

    /// Reconstructs a grid through the quantized bottleneck.
    pub fn reconstruct(&self, grid: &SemanticVoxelGrid) -> Result<SemanticVoxelGrid> {
        let traces = self.forward(grid)?;
        self.assemble(grid, traces.iter().map(|t| t.logits.as_slice()).collect())
    }

    fn assemble(&self, template: &SemanticVoxelGrid, logits: Vec<&[f32]>) -> Result<SemanticVoxelGrid> {
        match self.kind {
            CodecKind::AirMask => {
                let air = argmax_rows(logits[0], 2);
                let nonair = argmax_rows(logits[1], self.class_count as usize);
                let air_grid = SemanticVoxelGrid::new(
                    template.dims(),
                    template.voxel_size(),
                    template.origin(),
                    2,
                    air,
                )?;
                recombine(&air_grid, &template.with_labels(nonair)?)
            }
            CodecKind::SingleBranch => {
                template.with_labels(argmax_rows(logits[0], self.class_count as usize))
            }
        }
    }

    /// Split, encode and quantize both branches.
    pub fn encode_scene(&self, grid: &SemanticVoxelGrid) -> Result<SceneTokens> {
        if self.kind != CodecKind::AirMask {
            return Err(Error::config("kind", "scene tokens need the air-mask codec"));
        }
        self.check_grid(grid)?;
        let targets = self.targets(grid);
        let mut grids = targets.iter().zip(&self.branches).map(|(t, b)| {
            let x = one_hot(&t.labels, b.net.vocab);
            let latent = b.net.encode(&x, grid.dims())?;
            Ok(quantize(&latent, &b.codebook)?.0)
        });
        let air = grids.next().unwrap()?;
        let nonair = grids.next().unwrap()?;
        Ok(SceneTokens { air, nonair })
    }

    /// Decodes both branches and recombines them on the geometry of
    /// `template`.
    pub fn decode_scene_tokens(&self, tokens: &SceneTokens, template: &SemanticVoxelGrid) -> Result<SemanticVoxelGrid> {
        if self.kind != CodecKind::AirMask {
            return Err(Error::config("kind", "scene tokens need the air-mask codec"));
        }
        if latent_dims(template.dims()) != tokens.air.dims || tokens.air.dims != tokens.nonair.dims {
            return Err(Error::DimensionMismatch(format!(
                "token dims {:?}/{:?} vs grid dims {:?}",
                tokens.air.dims,
                tokens.nonair.dims,
                template.dims()
            )));
        }
        let air = self.branches[0].decode_tokens(&tokens.air)?;
        let nonair = self.branches[1].decode_tokens(&tokens.nonair)?;
        self.assemble(template, vec![&air, &nonair])
    }

    pub fn params(&self) -> Vec<&Param> {
        self.branches.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.branches.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn manifest_config(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "class_count": self.class_count,
            "vae": self.config,
        })
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        nn::save_checkpoint(
            manifest_path,
            "vq_codec",
            &self.params(),
            self.config.seed,
            self.manifest_config(),
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (manifest, payload) = nn::read_checkpoint(manifest_path)?;
        Self::from_checkpoint(&manifest, &payload)
    }

    pub fn from_checkpoint(manifest: &nn::Manifest, payload: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            kind: CodecKind,
            class_count: u16,
            vae: VaeConfig,
        }
        let header: Header = serde_json::from_value(manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("codec header: {e}")))?;
        let mut codec = Self::new(header.kind, header.class_count, header.vae)?;
        nn::decode_checkpoint(manifest, payload, &mut codec.params_mut())?;
        for b in &mut codec.branches {
            b.codebook.initialized = true;
        }
        codec.trained = true;
        Ok(codec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: VaeLoss,
}

/// Trains a codec on `grids`. Batches are drawn with replacement from a
/// seeded generator; each step applies one Adam update and one codebook
/// moving-average update per branch.
pub fn train_codec(
    grids: &[SemanticVoxelGrid],
    kind: CodecKind,
    config: &VaeConfig,
) -> Result<(VqCodec, Vec<TrainRecord>)> {
    let first = grids.first().ok_or(Error::EmptyDataset)?;
    let mut codec = VqCodec::new(kind, first.class_count(), config.clone())?;
    for g in grids {
        codec.check_grid(g)?;
        if !g.same_geometry(first) {
            return Err(Error::DimensionMismatch("all training grids must share one geometry".into()));
        }
    }
    let curve = continue_training(&mut codec, grids, config.steps)?;
    Ok((codec, curve))
}

/// Extra training objective over decoded logits. Given a grid and the
/// per-branch logits it returns the objective value and its gradient
/// w.r.t. each branch's logits.
pub type LogitObjective<'a> = dyn Fn(&SemanticVoxelGrid, &[&[f32]]) -> (f64, Vec<Vec<f32>>) + 'a;

/// Runs `steps` further optimization steps on an existing codec.
pub fn continue_training(codec: &mut VqCodec, grids: &[SemanticVoxelGrid], steps: usize) -> Result<Vec<TrainRecord>> {
    continue_training_with(codec, grids, steps, None)
}

/// [`continue_training`] with an extra objective added to every grid's
/// loss.
pub fn continue_training_with(
    codec: &mut VqCodec,
    grids: &[SemanticVoxelGrid],
    steps: usize,
    extra: Option<&LogitObjective>,
) -> Result<Vec<TrainRecord>> {
    if grids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = codec.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let mut opts: Vec<Adam> = codec.branches.iter().map(|_| Adam::new(cfg.learning_rate)).collect();
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..grids.len())).collect();
        if codec.branches.iter().any(|b| !b.codebook.initialized) {
            for (bi, t) in codec.forward(&grids[batch[0]])?.into_iter().enumerate() {
                let b = &mut codec.branches[bi];
                if !b.codebook.initialized {
                    b.codebook.init_from(&t.latent.data, &mut rng);
                }
            }
        }
        for b in &mut codec.branches {
            b.zero_grad();
        }
        let scale = 1.0 / batch.len() as f32;
        let mut loss = VaeLoss::default();
        let mut latents: Vec<Vec<f32>> = vec![Vec::new(); codec.branches.len()];
        let mut tokens: Vec<Vec<u16>> = vec![Vec::new(); codec.branches.len()];
        for &gi in &batch {
            let (l, traces) = codec.accumulate(&grids[gi], scale, extra)?;
            loss.recon += l.recon * f64::from(scale);
            loss.commit += l.commit * f64::from(scale);
            loss.aux += l.aux * f64::from(scale);
            loss.total += l.total * f64::from(scale);
            for (bi, t) in traces.into_iter().enumerate() {
                latents[bi].extend_from_slice(&t.latent.data);
                tokens[bi].extend_from_slice(&t.tokens.tokens);
            }
        }
        for (bi, b) in codec.branches.iter_mut().enumerate() {
            let mut params = b.net.params_mut();
            nn::clip_grad_norm(&mut params, 5.0);
            opts[bi].step(&mut params);
            b.codebook
                .ema_update(&latents[bi], &tokens[bi], cfg.ema_decay, cfg.dead_after);
        }
        curve.push(TrainRecord { step, loss });
    }
    codec.trained = true;
    Ok(curve)
}

pub const TOKEN_MAGIC: &[u8; 4] = b"OCCT";
pub const TOKEN_VERSION: u8 = 1;

/// `.tok` encoding: magic, version, latent dims, codebook size, then the
/// air block and the non-air block of u16 tokens.
pub fn tokens_to_bytes(tokens: &SceneTokens) -> Result<Vec<u8>> {
    let (a, n) = (&tokens.air, &tokens.nonair);
    if a.dims != n.dims || a.codebook_size != n.codebook_size {
        return Err(Error::DimensionMismatch("air and non-air token grids differ".into()));
    }
    let mut out = Vec::with_capacity(15 + 4 * a.tokens.len());
    out.extend_from_slice(TOKEN_MAGIC);
    out.push(TOKEN_VERSION);
    for d in a.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(a.codebook_size as u16).to_le_bytes());
    for t in a.tokens.iter().chain(&n.tokens) {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub fn tokens_from_bytes(bytes: &[u8]) -> Result<SceneTokens> {
    const HEADER: usize = 4 + 1 + 12 + 2;
    if bytes.len() < HEADER {
        return Err(Error::CorruptHeader(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != TOKEN_MAGIC {
        return Err(Error::CorruptHeader("bad token magic".into()));
    }
    if bytes[4] != TOKEN_VERSION {
        return Err(Error::CorruptHeader(format!("unsupported token version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let dims = [u32_at(5), u32_at(9), u32_at(13)];
    let k = u16::from_le_bytes([bytes[17], bytes[18]]) as usize;
    let n: usize = dims.iter().product();
    let need = HEADER + 4 * n;
    if bytes.len() < need {
        return Err(Error::TruncatedPayload {
            expected: need,
            found: bytes.len(),
        });
    }
    if bytes.len() > need {
        return Err(Error::CorruptHeader("trailing bytes after token blocks".into()));
    }
    let read = |block: usize| -> Result<Vec<u16>> {
        let start = HEADER + block * 2 * n;
        bytes[start..start + 2 * n]
            .chunks_exact(2)
            .map(|c| {
                let t = u16::from_le_bytes([c[0], c[1]]);
                if t as usize >= k {
                    Err(Error::CorruptHeader(format!("token {t} exceeds codebook size {k}")))
                } else {
                    Ok(t)
                }
            })
            .collect()
    };
    Ok(SceneTokens {
        air: TokenGrid {
            dims,
            codebook_size: k,
            tokens: read(0)?,
        },
        nonair: TokenGrid {
            dims,
            codebook_size: k,
            tokens: read(1)?,
        },
    })
}

pub fn save_tokens(path: &Path, tokens: &SceneTokens) -> Result<()> {
    std::fs::write(path, tokens_to_bytes(tokens)?).map_err(|e| Error::io(path, e))
}

pub fn load_tokens(path: &Path) -> Result<SceneTokens> {
    tokens_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
