//! Image-space training objective for the Gaussian scene: a Pearson
//! correlation depth term plus semantic cross-entropy.

use crate::error::{Error, Result};
use crate::splat::{RenderedView, ViewGradients};

/// Pixels with less accumulated opacity are left out of the semantic loss.
pub const MIN_ALPHA_SUM: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct DepthPair<'a> {
    pub rendered: &'a [f64],
    pub ground_truth: &'a [f64],
    pub valid_mask: &'a [bool],
}

struct PearsonStats {
    n: f64,
    mean_r: f64,
    mean_g: f64,
    var_r: f64,
    var_g: f64,
    rho: f64,
}

fn pearson_stats(pair: &DepthPair<'_>) -> Result<PearsonStats> {
    let DepthPair {
        rendered,
        ground_truth,
        valid_mask,
    } = *pair;
    if rendered.len() != ground_truth.len() || rendered.len() != valid_mask.len() {
        return Err(Error::ShapeMismatch("depth maps and mask differ in size".into()));
    }
    let count = valid_mask.iter().filter(|v| **v).count();
    if count < 2 {
        return Err(Error::EmptyMask(count));
    }
    let n = count as f64;
    let valid = || {
        rendered
            .iter()
            .zip(ground_truth)
            .zip(valid_mask)
            .filter(|(_, m)| **m)
            .map(|((r, g), _)| (*r, *g))
    };
    let (sr, sg) = valid().fold((0.0, 0.0), |(a, b), (r, g)| (a + r, b + g));
    let (mean_r, mean_g) = (sr / n, sg / n);
    let (mut cov, mut var_r, mut var_g) = (0.0, 0.0, 0.0);
    for (r, g) in valid() {
        cov += (r - mean_r) * (g - mean_g);
        var_r += (r - mean_r) * (r - mean_r);
        var_g += (g - mean_g) * (g - mean_g);
    }
    if !(var_r > 0.0) {
        return Err(Error::DegenerateVariance("rendered"));
    }
    if !(var_g > 0.0) {
        return Err(Error::DegenerateVariance("ground-truth"));
    }
    let rho = (cov / (var_r.sqrt() * var_g.sqrt())).clamp(-1.0, 1.0);
    Ok(PearsonStats {
        n,
        mean_r,
        mean_g,
        var_r: var_r / n,
        var_g: var_g / n,
        rho,
    })
}

/// `1 - ρ(rendered, ground truth)` over the valid pixels; lies in `[0, 2]`.
pub fn pearson_depth_loss(pair: &DepthPair<'_>) -> Result<f64> {
    Ok(1.0 - pearson_stats(pair)?.rho)
}

/// Loss and its gradient with respect to the rendered depth (zero off-mask).
pub fn pearson_depth_loss_grad(pair: &DepthPair<'_>) -> Result<(f64, Vec<f64>)> {
    let st = pearson_stats(pair)?;
    let (sr, sg) = (st.var_r.sqrt(), st.var_g.sqrt());
    let grad = pair
        .rendered
        .iter()
        .zip(pair.ground_truth)
        .zip(pair.valid_mask)
        .map(|((r, g), m)| {
            if !*m {
                return 0.0;
            }
            let d_rho = ((g - st.mean_g) / (sr * sg) - st.rho * (r - st.mean_r) / st.var_r) / st.n;
            -d_rho
        })
        .collect();
    Ok((1.0 - st.rho, grad))
}

/// Mean negative log of the alpha-normalized class mass at the label, over
/// valid pixels with non-negligible coverage.
pub fn semantic_ce_loss(
    class_dist: &[f64],
    alpha_sum: &[f64],
    gt_labels: &[u8],
    valid_mask: &[bool],
    class_count: usize,
) -> Result<f64> {
    Ok(semantic_ce_core(class_dist, alpha_sum, gt_labels, valid_mask, class_count, false)?.0)
}

/// Loss plus gradients w.r.t. the class mass and the accumulated opacity.
pub fn semantic_ce_loss_grad(
    class_dist: &[f64],
    alpha_sum: &[f64],
    gt_labels: &[u8],
    valid_mask: &[bool],
    class_count: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    semantic_ce_core(class_dist, alpha_sum, gt_labels, valid_mask, class_count, true)
}

fn semantic_ce_core(
    class_dist: &[f64],
    alpha_sum: &[f64],
    gt_labels: &[u8],
    valid_mask: &[bool],
    class_count: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let pixels = alpha_sum.len();
    if class_dist.len() != pixels * class_count
        || gt_labels.len() != pixels
        || valid_mask.len() != pixels
    {
        return Err(Error::ShapeMismatch("semantic maps differ in size".into()));
    }
    let used: Vec<usize> = (0..pixels)
        .filter(|p| valid_mask[*p] && alpha_sum[*p] >= MIN_ALPHA_SUM)
        .collect();
    if used.is_empty() {
        return Err(Error::EmptyMask(0));
    }
    let n = used.len() as f64;
    let mut loss = 0.0;
    let (mut d_dist, mut d_alpha) = if want_grad {
        (vec![0.0; class_dist.len()], vec![0.0; pixels])
    } else {
        (Vec::new(), Vec::new())
    };
    for &p in &used {
        let label = gt_labels[p] as usize;
        if label >= class_count {
            return Err(Error::ShapeMismatch(format!("label {label} >= {class_count}")));
        }
        let mass = class_dist[p * class_count + label];
        let a = alpha_sum[p];
        loss += -(mass / a).ln();
        if want_grad {
            d_dist[p * class_count + label] = -1.0 / (n * mass);
            d_alpha[p] = 1.0 / (n * a);
        }
    }
    Ok((loss / n, d_dist, d_alpha))
}

/// Per-view loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewLoss {
    pub sem: f64,
    pub dep: f64,
}

/// Mean over views of `L_sem + L_dep`.
pub fn img2occ_loss(views: &[ViewLoss]) -> f64 {
    assert!(!views.is_empty(), "at least one view");
    views.iter().map(|v| v.sem + v.dep).sum::<f64>() / views.len() as f64
}

/// Ground truth for one rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTarget {
    pub depth: Vec<f64>,
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
}

/// Loss terms of one view and the gradient of `(L_sem + L_dep) · weight`.
pub fn view_loss_grad(
    view: &RenderedView,
    target: &ViewTarget,
    weight: f64,
) -> Result<(ViewLoss, ViewGradients)> {
    let (sem, d_dist, d_alpha) = semantic_ce_loss_grad(
        &view.class_dist,
        &view.alpha_sum,
        &target.labels,
        &target.valid,
        view.class_count,
    )?;
    let (dep, d_depth) = pearson_depth_loss_grad(&DepthPair {
        rendered: &view.depth,
        ground_truth: &target.depth,
        valid_mask: &target.valid,
    })?;
    let scale = |v: Vec<f64>| v.into_iter().map(|g| g * weight).collect::<Vec<_>>();
    Ok((
        ViewLoss { sem, dep },
        ViewGradients {
            depth: scale(d_depth),
            class_dist: scale(d_dist),
            alpha_sum: scale(d_alpha),
        },
    ))
}
