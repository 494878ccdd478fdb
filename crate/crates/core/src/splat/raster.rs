//! Per-pixel front-to-back compositing of depth-sorted screen-space Gaussians
//! and its analytic reverse pass.
//!
//! For the Gaussians overlapping a pixel, in ascending camera depth:
//!
//! ```text
//! a_i = min(o_i · exp(-½ δᵀ Σ'⁻¹ δ), ALPHA_MAX)      (skipped when below ALPHA_MIN)
//! T_i = Π_{j<i} (1 - a_j)
//! D   = Σ d_i a_i T_i,  S = Σ p_i a_i T_i,  A = 1 - T_{n+1}
//! ```

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::{sigmoid, softmax, GaussianSet};
use crate::error::{Error, Result};
use crate::geometry::{
    build_covariance, projection_jacobian, quat_matrix_backward, CameraModel, COV_FLOOR_PX2,
};

/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Alpha is clamped to this value.
pub const ALPHA_MAX: f64 = 0.999;

const MIN_COV_DET: f64 = 1e-12;

/// Gaussians whose projected center lies further than this fraction of
/// the image size outside the image are culled (a 1.3× half field of view).
pub const FRUSTUM_GUARD: f64 = 0.15;

/// Visibility test applied before projection: in front of the near plane
/// and with the projected center inside the guard band.
pub fn in_frustum(camera: &CameraModel, p_cam: &Vector3<f64>) -> bool {
    if p_cam.z < camera.near() {
        return false;
    }
    let c = camera.project_camera(p_cam);
    let (w, h) = (camera.width() as f64, camera.height() as f64);
    c.x >= -FRUSTUM_GUARD * w
        && c.x <= (1.0 + FRUSTUM_GUARD) * w
        && c.y >= -FRUSTUM_GUARD * h
        && c.y <= (1.0 + FRUSTUM_GUARD) * h
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub class_count: usize,
    /// Row-major `H×W` blended camera depth (m).
    pub depth: Vec<f64>,
    /// Row-major `H×W×C` blended class mass.
    pub class_dist: Vec<f64>,
    /// Row-major `H×W` accumulated opacity.
    pub alpha_sum: Vec<f64>,
}

impl RenderedView {
    fn blank(width: usize, height: usize, class_count: usize) -> Self {
        Self {
            width,
            height,
            class_count,
            depth: vec![0.0; width * height],
            class_dist: vec![0.0; width * height * class_count],
            alpha_sum: vec![0.0; width * height],
        }
    }

    /// Most probable class per pixel; pixels with no coverage are 0.
    pub fn argmax_labels(&self) -> Vec<u8> {
        (0..self.width * self.height)
            .map(|p| {
                if self.alpha_sum[p] <= 0.0 {
                    return 0;
                }
                let row = &self.class_dist[p * self.class_count..(p + 1) * self.class_count];
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Upstream gradients `∂L/∂RenderedView`, same layout as [`RenderedView`].
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGradients {
    pub depth: Vec<f64>,
    pub class_dist: Vec<f64>,
    pub alpha_sum: Vec<f64>,
}

impl ViewGradients {
    pub fn zeros(view: &RenderedView) -> Self {
        Self {
            depth: vec![0.0; view.depth.len()],
            class_dist: vec![0.0; view.class_dist.len()],
            alpha_sum: vec![0.0; view.alpha_sum.len()],
        }
    }
}

/// Gradient of a loss with respect to every Gaussian parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub mean: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    /// Row-major `N×C`.
    pub class_logits: Vec<f64>,
}

impl RenderGradients {
    pub fn zeros(n: usize, classes: usize) -> Self {
        Self {
            mean: vec![[0.0; 3]; n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![[0.0; 3]; n],
            opacity_logit: vec![0.0; n],
            class_logits: vec![0.0; n * classes],
        }
    }

    pub fn add_assign(&mut self, other: &RenderGradients) {
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.log_scale.iter_mut().zip(&other.log_scale) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *a += b;
        }
        for (a, b) in self.class_logits.iter_mut().zip(&other.class_logits) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().flatten().all(|v| v.is_finite())
            && self.rotation.iter().flatten().all(|v| v.is_finite())
            && self.log_scale.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.class_logits.iter().all(|v| v.is_finite())
    }
}

/// Screen-space state of one visible Gaussian.
struct Splat {
    index: usize,
    depth: f64,
    center: Vector2<f64>,
    /// Inverse of the projected covariance.
    conic: Matrix2<f64>,
    opacity: f64,
    probs: Vec<f64>,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]`.
    bounds: [usize; 4],
}

impl Splat {
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.bounds[0] && x <= self.bounds[1] && y >= self.bounds[2] && y <= self.bounds[3]
    }

    /// Unclamped alpha and the pixel offset.
    fn raw_alpha(&self, x: usize, y: usize) -> (f64, Vector2<f64>) {
        let d = Vector2::new(x as f64, y as f64) - self.center;
        let q = (d.transpose() * self.conic * d)[(0, 0)];
        (self.opacity * (-0.5 * q).exp(), d)
    }
}

fn project_all(gaussians: &GaussianSet, camera: &CameraModel) -> Result<Vec<Splat>> {
    let w = camera.rotation();
    let mut splats = Vec::new();
    for (index, g) in gaussians.iter().enumerate() {
        let p_cam = camera.to_camera(&g.mean);
        if !in_frustum(camera, &p_cam) {
            continue;
        }
        let opacity = sigmoid(g.opacity_logit);
        // any pixel outside the ellipse q <= q_max has alpha below ALPHA_MIN
        let q_max = 2.0 * (opacity / ALPHA_MIN).ln();
        if !(q_max > 0.0) {
            continue;
        }
        let j = projection_jacobian(camera, &p_cam)?;
        let sigma = build_covariance(&g.rotation, &g.scale);
        let t = j * w;
        let cov = t * sigma * t.transpose();
        let cov = (cov + cov.transpose()) * 0.5 + Matrix2::identity() * COV_FLOOR_PX2;
        let det = cov.determinant();
        if !(det > MIN_COV_DET) {
            return Err(Error::NonInvertibleCovariance { det });
        }
        let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        let center = camera.project_camera(&p_cam);
        let rx = (q_max * cov[(0, 0)]).sqrt();
        let ry = (q_max * cov[(1, 1)]).sqrt();
        let x0 = (center.x - rx).ceil().max(0.0);
        let x1 = (center.x + rx).floor().min(camera.width() as f64 - 1.0);
        let y0 = (center.y - ry).ceil().max(0.0);
        let y1 = (center.y + ry).floor().min(camera.height() as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        splats.push(Splat {
            index,
            depth: p_cam.z,
            center,
            conic,
            opacity,
            probs: softmax(&g.class_logits),
            bounds: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(splats)
}

/// Splats whose vertical extent includes row `y`, in depth order.
fn row_splats(splats: &[Splat], y: usize) -> Vec<&Splat> {
    splats
        .iter()
        .filter(|s| y >= s.bounds[2] && y <= s.bounds[3])
        .collect()
}

/// Renders blended depth and class mass for one camera.
pub fn rasterize(gaussians: &GaussianSet, camera: &CameraModel) -> Result<RenderedView> {
    let (w, h, c) = (camera.width(), camera.height(), gaussians.class_count());
    let splats = project_all(gaussians, camera)?;
    let mut view = RenderedView::blank(w, h, c);

    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let active = row_splats(&splats, y);
            let mut depth = vec![0.0; w];
            let mut dist = vec![0.0; w * c];
            let mut alpha_sum = vec![0.0; w];
            for x in 0..w {
                let mut t = 1.0;
                for s in active.iter().filter(|s| s.covers(x, y)) {
                    let (raw, _) = s.raw_alpha(x, y);
                    if raw < ALPHA_MIN {
                        continue;
                    }
                    let a = raw.min(ALPHA_MAX);
                    let wgt = a * t;
                    depth[x] += s.depth * wgt;
                    for (k, p) in s.probs.iter().enumerate() {
                        dist[x * c + k] += p * wgt;
                    }
                    t *= 1.0 - a;
                }
                alpha_sum[x] = 1.0 - t;
            }
            (depth, dist, alpha_sum)
        })
        .collect();

    for (y, (depth, dist, alpha_sum)) in rows.into_iter().enumerate() {
        view.depth[y * w..(y + 1) * w].copy_from_slice(&depth);
        view.class_dist[y * w * c..(y + 1) * w * c].copy_from_slice(&dist);
        view.alpha_sum[y * w..(y + 1) * w].copy_from_slice(&alpha_sum);
    }
    Ok(view)
}

/// Screen-space gradient accumulators for one Gaussian.
#[derive(Clone)]
struct SplatGrad {
    depth: f64,
    opacity: f64,
    center: Vector2<f64>,
    /// Gradient w.r.t. the conic entries `(a, b, c)` of `[[a, b], [b, c]]`.
    conic: [f64; 3],
    probs: Vec<f64>,
}

impl SplatGrad {
    fn zeros(classes: usize) -> Self {
        Self {
            depth: 0.0,
            opacity: 0.0,
            center: Vector2::zeros(),
            conic: [0.0; 3],
            probs: vec![0.0; classes],
        }
    }

    fn add(&mut self, o: &SplatGrad) {
        self.depth += o.depth;
        self.opacity += o.opacity;
        self.center += o.center;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        for (a, b) in self.probs.iter_mut().zip(&o.probs) {
            *a += b;
        }
    }
}

/// Analytic gradients of a loss through [`rasterize`]. Culled Gaussians
/// receive exact zeros.
pub fn rasterize_backward(
    gaussians: &GaussianSet,
    camera: &CameraModel,
    upstream: &ViewGradients,
) -> Result<RenderGradients> {
    let (w, h, c) = (camera.width(), camera.height(), gaussians.class_count());
    let n = gaussians.len();
    if upstream.depth.len() != w * h
        || upstream.alpha_sum.len() != w * h
        || upstream.class_dist.len() != w * h * c
    {
        return Err(Error::ShapeMismatch("upstream gradients do not match the view".into()));
    }
    let splats = project_all(gaussians, camera)?;

    // per-row accumulators, reduced in row order for determinism
    let row_grads: Vec<Vec<SplatGrad>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let active: Vec<(usize, &Splat)> = splats
                .iter()
                .enumerate()
                .filter(|(_, s)| y >= s.bounds[2] && y <= s.bounds[3])
                .collect();
            let mut acc = vec![SplatGrad::zeros(c); splats.len()];
            // (splat, alpha, clamped, raw alpha, offset, T_i)
            let mut alphas: Vec<(usize, f64, bool, f64, Vector2<f64>, f64)> = Vec::new();
            for x in 0..w {
                let p = y * w + x;
                let g_depth = upstream.depth[p];
                let g_dist = &upstream.class_dist[p * c..(p + 1) * c];
                let g_alpha = upstream.alpha_sum[p];
                alphas.clear();
                let mut t_final = 1.0;
                for (si, s) in active.iter().filter(|(_, s)| s.covers(x, y)) {
                    let (raw, d) = s.raw_alpha(x, y);
                    if raw < ALPHA_MIN {
                        continue;
                    }
                    let a = raw.min(ALPHA_MAX);
                    alphas.push((*si, a, raw > ALPHA_MAX, raw, d, t_final));
                    t_final *= 1.0 - a;
                }
                if alphas.is_empty() {
                    continue;
                }
                // reverse scan: `after` = Σ_{k>i} w_k a_k T_k
                let mut after = 0.0;
                for &(si, a, clamped, raw, d, t) in alphas.iter().rev() {
                    let s = &splats[si];
                    let value: f64 = g_depth * s.depth
                        + g_dist.iter().zip(&s.probs).map(|(g, p)| g * p).sum::<f64>();
                    let wgt = a * t;
                    let d_alpha = t * value - after / (1.0 - a) + g_alpha * t_final / (1.0 - a);
                    after += value * wgt;

                    let gr = &mut acc[si];
                    gr.depth += g_depth * wgt;
                    for (k, g) in g_dist.iter().enumerate() {
                        gr.probs[k] += g * wgt;
                    }
                    if clamped {
                        continue;
                    }
                    let gauss = raw / s.opacity;
                    gr.opacity += d_alpha * gauss;
                    // ∂raw/∂q = -raw/2
                    let d_q = -0.5 * raw * d_alpha;
                    gr.conic[0] += d_q * d.x * d.x;
                    gr.conic[1] += d_q * 2.0 * d.x * d.y;
                    gr.conic[2] += d_q * d.y * d.y;
                    let cd = s.conic * d;
                    // δ = pixel - center
                    gr.center -= 2.0 * d_q * cd;
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![SplatGrad::zeros(c); splats.len()];
    for row in &row_grads {
        for (a, b) in screen.iter_mut().zip(row) {
            a.add(b);
        }
    }

    let mut out = RenderGradients::zeros(n, c);
    let rot_w = camera.rotation();
    let (fx, fy) = (camera.fx(), camera.fy());
    for (s, sg) in splats.iter().zip(&screen) {
        let g = &gaussians[s.index];
        let p = camera.to_camera(&g.mean);
        let (x, y, z) = (p.x, p.y, p.z);

        // conic → projected covariance: dΣ' = -A Ḡ A
        let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
        let d_cov2 = -(s.conic * g_conic * s.conic);

        let j = projection_jacobian(camera, &p)?;
        let sigma = build_covariance(&g.rotation, &g.scale);
        let t = j * rot_w;
        let d_sigma: Matrix3<f64> = t.transpose() * d_cov2 * t;
        let d_t: Matrix2x3<f64> = 2.0 * d_cov2 * t * sigma;
        let d_j: Matrix2x3<f64> = d_t * rot_w.transpose();

        let mut d_p = Vector3::zeros();
        d_p.x += d_j[(0, 2)] * (-fx / (z * z));
        d_p.y += d_j[(1, 2)] * (-fy / (z * z));
        d_p.z += d_j[(0, 0)] * (-fx / (z * z))
            + d_j[(0, 2)] * (2.0 * fx * x / (z * z * z))
            + d_j[(1, 1)] * (-fy / (z * z))
            + d_j[(1, 2)] * (2.0 * fy * y / (z * z * z));
        // center u = fx x/z + cx, v = fy y/z + cy
        d_p.x += sg.center.x * fx / z;
        d_p.y += sg.center.y * fy / z;
        d_p.z += -sg.center.x * fx * x / (z * z) - sg.center.y * fy * y / (z * z);
        d_p.z += sg.depth;
        let d_mean = rot_w.transpose() * d_p;
        out.mean[s.index] = [d_mean.x, d_mean.y, d_mean.z];

        // Σ = R S² Rᵀ
        let r = g.rotation.matrix();
        let sc = g.scale.scales();
        let s2 = Matrix3::from_diagonal(&Vector3::new(sc[0] * sc[0], sc[1] * sc[1], sc[2] * sc[2]));
        let d_r = 2.0 * d_sigma * r * s2;
        out.rotation[s.index] = quat_matrix_backward(g.rotation.raw(), &d_r);
        let rtr = r.transpose() * d_sigma * r;
        out.log_scale[s.index] = [
            2.0 * sc[0] * sc[0] * rtr[(0, 0)],
            2.0 * sc[1] * sc[1] * rtr[(1, 1)],
            2.0 * sc[2] * sc[2] * rtr[(2, 2)],
        ];

        out.opacity_logit[s.index] = sg.opacity * s.opacity * (1.0 - s.opacity);

        let dot: f64 = sg.probs.iter().zip(&s.probs).map(|(a, b)| a * b).sum();
        for k in 0..c {
            out.class_logits[s.index * c + k] = s.probs[k] * (sg.probs[k] - dot);
        }
    }
    Ok(out)
}
