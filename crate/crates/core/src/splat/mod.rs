//! Voxel-anchored semantic Gaussians and their differentiable rasterizer.

mod raster;

use nalgebra::Vector3;

pub use raster::{
    in_frustum, rasterize, rasterize_backward, RenderGradients, RenderedView, ViewGradients,
    ALPHA_MAX, ALPHA_MIN, FRUSTUM_GUARD,
};

use crate::geometry::{Rotation, ScaleVector};
use crate::occupancy::{SemanticVoxelGrid, AIR};

/// Logit bias given to the voxel's own class at initialization.
pub const ANCHOR_CLASS_BIAS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    /// World-space center (m).
    pub mean: Vector3<f64>,
    pub rotation: Rotation,
    pub scale: ScaleVector,
    pub opacity_logit: f64,
    pub class_logits: Vec<f64>,
    /// Linear index of the voxel this Gaussian was anchored to.
    pub anchor: Option<usize>,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn class_probs(&self) -> Vec<f64> {
        softmax(&self.class_logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    class_count: usize,
    gaussians: Vec<Gaussian>,
}

impl GaussianSet {
    pub fn new(class_count: usize) -> Self {
        assert!(class_count >= 1);
        Self {
            class_count,
            gaussians: Vec::new(),
        }
    }

    pub fn push(&mut self, g: Gaussian) {
        assert_eq!(g.class_logits.len(), self.class_count, "class logit width");
        self.gaussians.push(g);
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    pub fn as_slice(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn as_mut_slice(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }
}

impl std::ops::Index<usize> for GaussianSet {
    type Output = Gaussian;

    fn index(&self, i: usize) -> &Gaussian {
        &self.gaussians[i]
    }
}

impl std::ops::IndexMut<usize> for GaussianSet {
    fn index_mut(&mut self, i: usize) -> &mut Gaussian {
        &mut self.gaussians[i]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One Gaussian per non-air voxel, centered in the voxel with an isotropic
/// scale of `init_scale_fraction` voxel sizes.
///
/// # Panics
/// If `init_opacity` is outside `(0, 1)` or `init_scale_fraction <= 0`.
pub fn anchor_init(
    grid: &SemanticVoxelGrid,
    init_opacity: f64,
    init_scale_fraction: f64,
) -> GaussianSet {
    assert!(init_opacity > 0.0 && init_opacity < 1.0, "opacity must lie in (0, 1)");
    assert!(init_scale_fraction > 0.0, "scale fraction must be positive");
    let classes = grid.class_count() as usize;
    let scale = ScaleVector::isotropic(init_scale_fraction * f64::from(grid.voxel_size()));
    let opacity_logit = logit(init_opacity);
    let mut set = GaussianSet::new(classes);
    for (idx, &label) in grid.labels().iter().enumerate() {
        if label == AIR {
            continue;
        }
        let [x, y, z] = grid.coords(idx);
        let mut class_logits = vec![0.0; classes];
        class_logits[label as usize] = ANCHOR_CLASS_BIAS;
        set.push(Gaussian {
            mean: grid.voxel_center(x, y, z),
            rotation: Rotation::identity(),
            scale,
            opacity_logit,
            class_logits,
            anchor: Some(idx),
        });
    }
    set
}

/// Reads an occupancy grid back from anchored Gaussians: a voxel takes the
/// most probable class of its Gaussian when that Gaussian's opacity is at
/// least 0.5, otherwise air.
pub fn argmax_occupancy(gaussians: &GaussianSet, grid_spec: &SemanticVoxelGrid) -> SemanticVoxelGrid {
    let mut labels = vec![AIR; grid_spec.len()];
    for g in gaussians.iter() {
        let Some(idx) = g.anchor else { continue };
        if idx >= labels.len() || g.opacity() < 0.5 {
            continue;
        }
        let mut best = 0;
        for (c, l) in g.class_logits.iter().enumerate() {
            if *l > g.class_logits[best] {
                best = c;
            }
        }
        labels[idx] = best as u8;
    }
    grid_spec
        .with_labels(labels)
        .expect("argmax stays inside the class range")
}
