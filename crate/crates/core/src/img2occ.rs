//! Image-to-occupancy optimization: anchored Gaussians fitted to
//! per-view depth and semantic supervision, then read back as a grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Rotation, ScaleVector};
use crate::harness::project_ground_truth;
use crate::losses::{view_loss_grad, ViewTarget};
use crate::occupancy::{SemanticVoxelGrid, AIR};
use crate::splat::{anchor_init, argmax_occupancy, rasterize, rasterize_backward, Gaussian, GaussianSet, RenderGradients};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Img2OccConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub init_opacity: f64,
    /// Initial isotropic scale in voxel sizes.
    pub init_scale_fraction: f64,
    /// Rounds of 6-neighbor growth applied to the ground truth to make the
    /// candidate grid.
    pub dilation: usize,
    /// Probability that a candidate voxel's class is resampled.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for Img2OccConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 0.05,
            init_opacity: 0.6,
            init_scale_fraction: 0.3,
            dilation: 1,
            label_noise: 0.2,
            seed: 0,
        }
    }
}

impl Img2OccConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::config("init_opacity", "must lie in (0, 1)"));
        }
        if !(self.init_scale_fraction > 0.0 && self.init_scale_fraction.is_finite()) {
            return Err(Error::config("init_scale_fraction", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Img2OccRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_sem: f64,
    pub loss_dep: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss_total,loss_sem,loss_dep";

pub fn loss_csv(records: &[Img2OccRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.loss_total, r.loss_sem, r.loss_dep));
    }
    out
}

/// Ground truth grown by `dilation` rounds of 6-neighbor growth (new
/// voxels copy a neighbor's class), then relabeled at rate `label_noise`.
pub fn candidate_grid(gt: &SemanticVoxelGrid, dilation: usize, label_noise: f64, rng: &mut impl Rng) -> SemanticVoxelGrid {
    let [nx, ny, nz] = gt.dims();
    let mut labels = gt.labels().to_vec();
    for _ in 0..dilation {
        let prev = labels.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = gt.index(x, y, z);
                    if prev[i] != AIR {
                        continue;
                    }
                    let neighbors = [
                        (x > 0).then(|| gt.index(x - 1, y, z)),
                        (x + 1 < nx).then(|| gt.index(x + 1, y, z)),
                        (y > 0).then(|| gt.index(x, y - 1, z)),
                        (y + 1 < ny).then(|| gt.index(x, y + 1, z)),
                        (z > 0).then(|| gt.index(x, y, z - 1)),
                        (z + 1 < nz).then(|| gt.index(x, y, z + 1)),
                    ];
                    if let Some(j) = neighbors.into_iter().flatten().find(|j| prev[*j] != AIR) {
                        labels[i] = prev[j];
                    }
                }
            }
        }
    }
    let classes = gt.class_count() as u8;
    for l in labels.iter_mut() {
        if *l != AIR && classes > 1 && rng.gen_bool(label_noise) {
            *l = rng.gen_range(1..classes);
        }
    }
    gt.with_labels(labels).expect("labels stay in range")
}

/// Flat view of every optimizable Gaussian parameter.
fn flatten(set: &GaussianSet) -> Vec<f64> {
    let mut out = Vec::new();
    for g in set.iter() {
        out.extend(g.mean.iter());
        out.extend(g.rotation.raw());
        out.extend(g.scale.log());
        out.push(g.opacity_logit);
        out.extend(&g.class_logits);
    }
    out
}

fn unflatten(set: &mut GaussianSet, values: &[f64]) {
    let mut it = values.iter().copied();
    for g in set.as_mut_slice() {
        for k in 0..3 {
            g.mean[k] = it.next().unwrap();
        }
        for v in g.rotation.raw_mut() {
            *v = it.next().unwrap();
        }
        for v in g.scale.log_mut() {
            *v = it.next().unwrap();
        }
        g.opacity_logit = it.next().unwrap();
        for v in g.class_logits.iter_mut() {
            *v = it.next().unwrap();
        }
    }
}

fn flatten_grads(g: &RenderGradients, classes: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..g.mean.len() {
        out.extend(g.mean[i]);
        out.extend(g.rotation[i]);
        out.extend(g.log_scale[i]);
        out.push(g.opacity_logit[i]);
        out.extend(&g.class_logits[i * classes..(i + 1) * classes]);
    }
    out
}

/// Mean view loss over the rig and its gradient.
pub fn rig_loss_grad(
    set: &GaussianSet,
    rig: &[CameraModel],
    targets: &[ViewTarget],
) -> Result<(Img2OccRecord, RenderGradients)> {
    let w = 1.0 / rig.len() as f64;
    let mut total = RenderGradients::zeros(set.len(), set.class_count());
    let mut rec = Img2OccRecord {
        step: 0,
        loss_total: 0.0,
        loss_sem: 0.0,
        loss_dep: 0.0,
    };
    for (cam, target) in rig.iter().zip(targets) {
        let view = rasterize(set, cam)?;
        let (l, up) = view_loss_grad(&view, target, w)?;
        total.add_assign(&rasterize_backward(set, cam, &up)?);
        rec.loss_sem += l.sem * w;
        rec.loss_dep += l.dep * w;
    }
    rec.loss_total = rec.loss_sem + rec.loss_dep;
    Ok((rec, total))
}

pub const GAUSSIAN_FORMAT: &str = "occsplat-gaussians-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRecord {
    mean: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
    class_logits: Vec<f64>,
    anchor: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianFile {
    format: String,
    class_count: usize,
    gaussians: Vec<GaussianRecord>,
}

/// JSON checkpoint of a Gaussian set. Floats round-trip exactly.
pub fn gaussians_to_json(set: &GaussianSet) -> String {
    let file = GaussianFile {
        format: GAUSSIAN_FORMAT.into(),
        class_count: set.class_count(),
        gaussians: set
            .iter()
            .map(|g| GaussianRecord {
                mean: [g.mean.x, g.mean.y, g.mean.z],
                rotation: g.rotation.raw(),
                log_scale: g.scale.log(),
                opacity_logit: g.opacity_logit,
                class_logits: g.class_logits.clone(),
                anchor: g.anchor,
            })
            .collect(),
    };
    serde_json::to_string(&file).expect("gaussian serialization cannot fail")
}

pub fn gaussians_from_json(text: &str) -> Result<GaussianSet> {
    let file: GaussianFile =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("gaussian file: {e}")))?;
    if file.format != GAUSSIAN_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", file.format)));
    }
    let mut set = GaussianSet::new(file.class_count);
    for r in file.gaussians {
        if r.class_logits.len() != file.class_count {
            return Err(Error::Checkpoint(format!(
                "{} class logits for {} classes",
                r.class_logits.len(),
                file.class_count
            )));
        }
        set.push(Gaussian {
            mean: r.mean.into(),
            rotation: Rotation::from_raw(r.rotation),
            scale: ScaleVector::from_log(r.log_scale),
            opacity_logit: r.opacity_logit,
            class_logits: r.class_logits,
            anchor: r.anchor,
        });
    }
    Ok(set)
}

pub fn save_gaussians(path: &Path, set: &GaussianSet) -> Result<()> {
    std::fs::write(path, gaussians_to_json(set)).map_err(|e| Error::io(path, e))
}

pub fn load_gaussians(path: &Path) -> Result<GaussianSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    gaussians_from_json(&text)
}

/// Rig views whose ground-truth depth supports a correlation: at least two
/// valid pixels at more than one depth. Other views carry no depth signal.
pub fn supervised_views(gt: &SemanticVoxelGrid, rig: &[CameraModel]) -> Result<(Vec<CameraModel>, Vec<ViewTarget>)> {
    let (mut cams, mut targets) = (Vec::new(), Vec::new());
    for cam in rig {
        let t = project_ground_truth(gt, cam);
        let mut depths = t.depth.iter().zip(&t.valid).filter(|(_, v)| **v).map(|(d, _)| *d);
        let Some(first) = depths.next() else { continue };
        if depths.any(|d| d != first) {
            cams.push(cam.clone());
            targets.push(t);
        }
    }
    if cams.is_empty() {
        return Err(Error::EmptyMask(0));
    }
    Ok((cams, targets))
}

/// Result of [`train_img2occ`].
#[derive(Clone, Debug)]
pub struct Img2OccFit {
    pub gaussians: GaussianSet,
    pub candidate: SemanticVoxelGrid,
    pub occupancy: SemanticVoxelGrid,
    pub curve: Vec<Img2OccRecord>,
}

/// Fits Gaussians anchored on a noisy candidate grid to the projections of
/// `gt` through the supervised views of `rig` with Adam, then reads the
/// occupancy back.
pub fn train_img2occ(gt: &SemanticVoxelGrid, rig: &[CameraModel], config: &Img2OccConfig) -> Result<Img2OccFit> {
    config.validate()?;
    if rig.is_empty() {
        return Err(Error::config("rig", "need at least one camera"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let candidate = candidate_grid(gt, config.dilation, config.label_noise, &mut rng);
    let mut set = anchor_init(&candidate, config.init_opacity, config.init_scale_fraction);
    let (rig, targets) = supervised_views(gt, rig)?;
    let rig = rig.as_slice();
    let classes = set.class_count();
    let mut params = flatten(&set);
    let (mut m, mut v) = (vec![0.0; params.len()], vec![0.0; params.len()]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (mut rec, grads) = rig_loss_grad(&set, rig, &targets)?;
        rec.step = step;
        curve.push(rec);
        let g = flatten_grads(&grads, classes);
        let t = (step + 1) as i32;
        for i in 0..params.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            params[i] -= config.learning_rate * mh / (vh.sqrt() + eps);
        }
        unflatten(&mut set, &params);
    }
    let occupancy = argmax_occupancy(&set, gt);
    Ok(Img2OccFit {
        gaussians: set,
        candidate,
        occupancy,
        curve,
    })
}
