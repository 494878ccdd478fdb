//! Finite-difference checks of the hand-written backward passes.
//!
//! The splat check runs in f64 with central differences at `h = 1e-4`.
//! A coordinate whose difference quotient disagrees with the analytic
//! value is re-probed at `h / 100`: the rasterizer has hard thresholds
//! (alpha cutoff, frustum guard) and a probe that straddles one measures a
//! jump, not a slope. Network checks run in f32 at `h = 1e-2`.

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::am_vae::{self, LatentField, VaeConfig, VqBranch};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Rotation, ScaleVector};
use crate::losses::{view_loss_grad, ViewTarget};
use crate::nn::{self, Module, Param};
use crate::splat::{rasterize, rasterize_backward, Gaussian, GaussianSet};
use crate::world::{FrameInput, Window, WorldConfig, WorldModel};

/// Smallest denominator of the relative error; below it the error is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub module: String,
    pub cases: usize,
    pub checked: usize,
    /// Coordinates re-probed with a smaller step.
    pub refined: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Runs the named check (`splat`, `vae` or `world`).
pub fn run(module: &str, seed: u64) -> Result<GradcheckReport> {
    match module {
        "splat" => splat(20, 20, seed),
        "vae" => vae(seed),
        "world" => world(seed),
        other => Err(Error::config("module", format!("unknown gradcheck module {other:?}"))),
    }
}

fn gradcheck_camera(size: usize) -> CameraModel {
    CameraModel::simple(size as f64, size, size, Matrix4::identity(), 0.1).expect("valid camera")
}

/// Random scene of `n` Gaussians in front of the camera plus a random
/// target view.
pub fn random_scene(n: usize, classes: usize, camera: &CameraModel, rng: &mut impl Rng) -> (GaussianSet, ViewTarget) {
    let mut set = GaussianSet::new(classes);
    for _ in 0..n {
        let z: f64 = rng.gen_range(2.0..6.0);
        let half = 0.35 * z;
        set.push(Gaussian {
            mean: Vector3::new(rng.gen_range(-half..half), rng.gen_range(-half..half), z),
            rotation: Rotation::from_raw([
                rng.gen_range(0.5..1.0),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ]),
            scale: ScaleVector::from_scales([
                rng.gen_range(0.08..0.4),
                rng.gen_range(0.08..0.4),
                rng.gen_range(0.08..0.4),
            ]),
            opacity_logit: rng.gen_range(-1.5..2.0),
            class_logits: (0..classes).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            anchor: None,
        });
    }
    let pixels = camera.width() * camera.height();
    let target = ViewTarget {
        depth: (0..pixels).map(|_| rng.gen_range(2.0..6.0)).collect(),
        labels: (0..pixels).map(|_| rng.gen_range(0..classes as u8)).collect(),
        valid: (0..pixels).map(|_| rng.gen_bool(0.9)).collect(),
    };
    (set, target)
}

fn view_loss(set: &GaussianSet, camera: &CameraModel, target: &ViewTarget) -> Result<f64> {
    let view = rasterize(set, camera)?;
    let (l, _) = view_loss_grad(&view, target, 1.0)?;
    Ok(l.sem + l.dep)
}

/// Every scalar parameter of Gaussian `i`, in a fixed order.
fn coordinate(set: &mut GaussianSet, i: usize, k: usize) -> &mut f64 {
    let g = &mut set[i];
    match k {
        0..=2 => &mut g.mean[k],
        3..=6 => &mut g.rotation.raw_mut()[k - 3],
        7..=9 => &mut g.scale.log_mut()[k - 7],
        10 => &mut g.opacity_logit,
        _ => &mut g.class_logits[k - 11],
    }
}

fn analytic_coordinate(g: &crate::splat::RenderGradients, classes: usize, i: usize, k: usize) -> f64 {
    match k {
        0..=2 => g.mean[i][k],
        3..=6 => g.rotation[i][k - 3],
        7..=9 => g.log_scale[i][k - 7],
        10 => g.opacity_logit[i],
        _ => g.class_logits[i * classes + k - 11],
    }
}

/// Rendering-loss gradients of `scenes` random scenes of at most
/// `max_gaussians` Gaussians on a 32x32 view.
pub fn splat(scenes: usize, max_gaussians: usize, seed: u64) -> Result<GradcheckReport> {
    let camera = gradcheck_camera(32);
    let classes = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        module: "splat".into(),
        cases: scenes,
        checked: 0,
        refined: 0,
        max_rel_error: 0.0,
        tolerance: 1e-3,
    };
    for _ in 0..scenes {
        let n = rng.gen_range(1..=max_gaussians);
        let (mut set, target) = random_scene(n, classes, &camera, &mut rng);
        let view = rasterize(&set, &camera)?;
        let (_, up) = view_loss_grad(&view, &target, 1.0)?;
        let grads = rasterize_backward(&set, &camera, &up)?;
        for i in 0..n {
            for k in 0..11 + classes {
                let a = analytic_coordinate(&grads, classes, i, k);
                let mut at = |h: f64| -> Result<f64> {
                    let old = *coordinate(&mut set, i, k);
                    *coordinate(&mut set, i, k) = old + h;
                    let l = view_loss(&set, &camera, &target);
                    *coordinate(&mut set, i, k) = old;
                    l
                };
                let mut err = rel_error(a, (at(1e-4)? - at(-1e-4)?) / 2e-4);
                // h = 1e-4 truncation alone can reach the tolerance
                if err >= 0.1 * report.tolerance {
                    report.refined += 1;
                    let h = 1e-6;
                    let (up, mid, down) = (at(h)?, at(0.0)?, at(-h)?);
                    // an alpha cutoff can sit inside the probe; it lies on one
                    // side only, so one of the one-sided slopes avoids it
                    err = [(up - down) / (2.0 * h), (up - mid) / h, (mid - down) / h]
                        .into_iter()
                        .map(|n| rel_error(a, n))
                        .fold(err, f64::min);
                }
                report.checked += 1;
                report.max_rel_error = report.max_rel_error.max(err);
            }
        }
    }
    Ok(report)
}

fn f32_report(module: &str) -> GradcheckReport {
    GradcheckReport {
        module: module.into(),
        cases: 1,
        checked: 0,
        refined: 0,
        max_rel_error: 0.0,
        tolerance: 2e-2,
    }
}

/// Central differences on sampled entries of every parameter. `loss`
/// re-evaluates the objective with the parameters as currently set.
fn check_params<M>(
    model: &mut M,
    params: fn(&M) -> Vec<&Param>,
    params_mut: fn(&mut M) -> Vec<&mut Param>,
    analytic: &[Vec<f32>],
    per_param: usize,
    rng: &mut impl Rng,
    loss: impl Fn(&M) -> f64,
    report: &mut GradcheckReport,
) {
    let h = 1e-2f32;
    for (pi, a) in analytic.iter().enumerate() {
        for _ in 0..per_param.min(a.len()) {
            let i = rng.gen_range(0..a.len());
            let old = params(model)[pi].value[i];
            params_mut(model)[pi].value[i] = old + h;
            let up = loss(model);
            params_mut(model)[pi].value[i] = old - h;
            let down = loss(model);
            params_mut(model)[pi].value[i] = old;
            let fd = (up - down) / (2.0 * f64::from(h));
            // f32 forward passes: floor the denominator well above rounding noise
            let err = (fd - f64::from(a[i])).abs() / (fd.abs().max(f64::from(a[i]).abs())).max(1e-2);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
        }
    }
}

/// Encoder and decoder gradients of one codec branch. The quantizer is
/// piecewise constant, so the reference is the straight-through surrogate
/// `CE(dec(q + z − z₀)) + β · mean ‖z − q‖²` with `q`, `z₀` frozen at the
/// base point.
pub fn vae(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = VaeConfig {
        codebook_size: 6,
        latent_dim: 3,
        hidden: 4,
        ..VaeConfig::default()
    };
    let vocab = 3;
    let dims = [8, 8, 2];
    let labels: Vec<u8> = (0..128).map(|_| rng.gen_range(0..vocab as u8)).collect();
    let mut branch = VqBranch::new("gc", vocab, &config, &mut rng);
    let trace = branch.forward(&labels, dims)?;
    branch.codebook.init_from(&trace.latent.data, &mut rng);
    let trace = branch.forward(&labels, dims)?;
    let targets: Vec<usize> = labels.iter().map(|l| *l as usize).collect();
    let n = labels.len() as f32;
    let (_, d) = nn::softmax_cross_entropy(&trace.logits, vocab, &targets, None, 1.0 / n);
    let beta = config.beta;
    for p in branch.net.params_mut() {
        p.zero_grad();
    }
    branch.backward(&trace, &d, beta);
    let analytic: Vec<Vec<f32>> = branch.net.params().iter().map(|p| p.grad.clone()).collect();
    let x = am_vae::one_hot(&labels, vocab);
    let (z0, q) = (trace.latent.clone(), trace.quantized.clone());
    let surrogate = |net: &am_vae::BranchNet| {
        let z = net.encode(&x, dims).expect("encode");
        let input = LatentField {
            dims: z.dims,
            channels: z.channels,
            data: z.data.iter().zip(&z0.data).zip(&q.data).map(|((a, b), c)| c + a - b).collect(),
        };
        let logits = net.decode(&input).expect("decode");
        let (ce, _) = nn::softmax_cross_entropy(&logits, vocab, &targets, None, 1.0);
        let commit: f64 = z
            .data
            .iter()
            .zip(&q.data)
            .map(|(a, b)| f64::from(a - b).powi(2))
            .sum::<f64>()
            / z.sites() as f64;
        ce / f64::from(n) + f64::from(beta) * commit
    };
    let mut report = f32_report("vae");
    check_params(
        &mut branch.net,
        |m| m.params(),
        |m| m.params_mut(),
        &analytic,
        6,
        &mut rng,
        surrogate,
        &mut report,
    );
    Ok(report)
}

/// Every parameter of a small world model against the teacher-forced
/// objective.
pub fn world(seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = WorldConfig {
        embed_dim: 8,
        token_width: 3,
        heads: 2,
        layers: 1,
        context: 4,
        seed,
        ..WorldConfig::default()
    };
    let k = 5u16;
    let mut model = WorldModel::new(config, [3, 3, 2], k as usize)?;
    let inputs: Vec<FrameInput> = (0..3)
        .map(|_| FrameInput {
            air: (0..18).map(|_| rng.gen_range(0..k)).collect(),
            nonair: (0..18).map(|_| rng.gen_range(0..k)).collect(),
            prev_disp: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        })
        .collect();
    let next = vec![Some([0.3f32, -0.2]), Some([0.1, 0.4]), None];
    let window = Window {
        inputs: &inputs,
        next_disp: &next,
    };
    model.zero_grad();
    let trace = model.forward(&inputs)?;
    let (_, dl, de) = model.objective(&trace, &window, 1.0);
    model.backward(&trace, &dl, &de);
    let analytic: Vec<Vec<f32>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let loss = |m: &WorldModel| {
        let t = m.forward(window.inputs).expect("forward");
        m.objective(&t, &window, 1.0).0.total
    };
    let mut report = f32_report("world");
    check_params(
        &mut model,
        |m| m.params(),
        |m| m.params_mut(),
        &analytic,
        4,
        &mut rng,
        loss,
        &mut report,
    );
    Ok(report)
}
