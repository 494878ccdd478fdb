//! Seeded inputs shared by the benchmarks.

use occsplat::am_vae::{train_codec, CodecKind, LatentField, VaeConfig, VqCodec};
use occsplat::harness::{generate_rig, generate_sequence, ImageSpec, SceneConfig};
use occsplat::splat::anchor_init;
use occsplat::{CameraModel, GaussianSet, SemanticVoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A default-sized synthetic frame.
pub fn scene(seed: u64) -> SemanticVoxelGrid {
    let cfg = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    generate_sequence(&cfg).expect("default scene config is valid").frames.remove(0)
}

/// Anchored Gaussians of `scene(seed)` and the first default rig camera.
pub fn splat_scene(seed: u64) -> (GaussianSet, CameraModel) {
    let grid = scene(seed);
    let set = anchor_init(&grid, 0.9, 0.5);
    let rig = generate_rig(6, 1.0, 1.5, &ImageSpec::default()).expect("default rig is valid");
    (set, rig[0].clone())
}

pub fn latents(sites: usize, dim: usize, seed: u64) -> LatentField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentField {
        dims: [sites, 1, 1],
        channels: dim,
        data: (0..sites * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

/// A codec trained for a handful of steps so its codebooks are initialized.
pub fn codec(seed: u64) -> VqCodec {
    let grids = vec![scene(seed)];
    let cfg = VaeConfig {
        steps: 2,
        seed,
        ..VaeConfig::default()
    };
    train_codec(&grids, CodecKind::AirMask, &cfg).expect("training runs").0
}
