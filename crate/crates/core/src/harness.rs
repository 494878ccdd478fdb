//! Procedural driving scenes: ego-centered semantic grids over time, a
//! surround camera rig, and voxel-center projection of ground truth.
//!
//! Grids are world-aligned and translate with the ego, snapped to whole
//! voxels, so every frame of a sequence shares one geometry with the ego
//! at the metric origin. The ground layer is `z = 0`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{load_rig, pose_from_center, save_rig, CameraModel};
use crate::losses::ViewTarget;
use crate::occupancy::{load_grid, save_grid, SemanticVoxelGrid, AIR};

pub const FRAME_PERIOD_S: f64 = 0.5;

pub const DRIVEABLE_SURFACE: u8 = 11;
pub const SIDEWALK: u8 = 13;
pub const TERRAIN: u8 = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub dims: [usize; 3],
    pub voxel_size: f32,
    pub class_count: u16,
    pub frames: usize,
    pub frame_period_s: f64,
    pub static_obstacles: usize,
    pub moving_obstacles: usize,
    /// Smallest and largest box extents in voxels (x, y, z).
    pub obstacle_min: [usize; 3],
    pub obstacle_max: [usize; 3],
    /// Voxels per frame along +x for moving boxes.
    pub obstacle_speed: i32,
    pub ego_speed_mps: f64,
    pub ego_yaw_rate: f64,
    /// Half width of the obstacle-free band around the ego path (m).
    pub lane_half_width_m: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 8],
            voxel_size: 0.4,
            class_count: 17,
            frames: 8,
            frame_period_s: FRAME_PERIOD_S,
            static_obstacles: 6,
            moving_obstacles: 0,
            obstacle_min: [2, 2, 2],
            obstacle_max: [5, 3, 4],
            obstacle_speed: 1,
            ego_speed_mps: 0.0,
            ego_yaw_rate: 0.0,
            lane_half_width_m: 2.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [x, y, z] = self.dims;
        if x == 0 || y == 0 || z < 2 {
            return Err(Error::config("dims", "need positive X, Y and at least two Z levels"));
        }
        if x % 4 != 0 || y % 4 != 0 {
            return Err(Error::config("dims", "X and Y must be divisible by 4"));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::config("voxel_size", "must be positive"));
        }
        if !(2..=256).contains(&self.class_count) {
            return Err(Error::config("class_count", "must be in [2, 256]"));
        }
        if self.frames == 0 {
            return Err(Error::config("frames", "must be positive"));
        }
        for a in 0..3 {
            if self.obstacle_min[a] == 0 || self.obstacle_min[a] > self.obstacle_max[a] {
                return Err(Error::config("obstacle_min", "extents must satisfy 0 < min <= max"));
            }
        }
        let boxes = self.static_obstacles + self.moving_obstacles;
        if boxes > 0 {
            let [mx, my, mz] = self.obstacle_max;
            if mx > x || mz > z - 1 {
                return Err(Error::config("obstacle_max", "obstacle larger than the grid"));
            }
            if my > y / 2 - self.lane_voxels().min(y / 2) {
                return Err(Error::config(
                    "obstacle_max",
                    "obstacle does not fit beside the ego lane",
                ));
            }
            if obstacle_classes(self.class_count).is_empty() {
                return Err(Error::config("class_count", "no class left for obstacles"));
            }
        }
        if !self.ego_speed_mps.is_finite() || !self.ego_yaw_rate.is_finite() {
            return Err(Error::config("ego_speed_mps", "must be finite"));
        }
        Ok(())
    }

    fn lane_voxels(&self) -> usize {
        (self.lane_half_width_m / f64::from(self.voxel_size)).ceil() as usize
    }

    /// Metric origin shared by every frame: ego at x = y = 0, ground
    /// layer just below z = 0.
    pub fn origin(&self) -> [f32; 3] {
        let vs = self.voxel_size;
        [
            -(self.dims[0] as f32) * vs / 2.0,
            -(self.dims[1] as f32) * vs / 2.0,
            -vs,
        ]
    }
}

/// Classes used for boxes: everything except air and the ground classes.
pub fn obstacle_classes(class_count: u16) -> Vec<u8> {
    let ground = ground_class(class_count);
    (1..class_count)
        .map(|c| c as u8)
        .filter(|c| *c != ground && !(DRIVEABLE_SURFACE..=TERRAIN).contains(c))
        .collect()
}

fn ground_class(class_count: u16) -> u8 {
    if class_count > u16::from(DRIVEABLE_SURFACE) {
        DRIVEABLE_SURFACE
    } else {
        (class_count - 1) as u8
    }
}

/// Ordered frames with the ego displacement from each frame to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<SemanticVoxelGrid>,
    /// Meters, world-aligned; entry `t` moves the ego from frame `t` to `t + 1`.
    pub displacements: Vec<[f64; 2]>,
    pub frame_period_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt_s: f64,
    pub displacements_m: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serialization cannot fail")
    }
}

#[derive(Clone, Copy, Debug)]
struct Obstacle {
    min: [i64; 3],
    size: [i64; 3],
    class: u8,
    speed: i64,
}

impl Obstacle {
    fn contains(&self, w: [i64; 3], frame: i64) -> bool {
        let x0 = self.min[0] + self.speed * frame;
        w[0] >= x0
            && w[0] < x0 + self.size[0]
            && w[1] >= self.min[1]
            && w[1] < self.min[1] + self.size[1]
            && w[2] >= self.min[2]
            && w[2] < self.min[2] + self.size[2]
    }
}

fn ground_label(cfg: &SceneConfig, wy: i64) -> u8 {
    let ground = ground_class(cfg.class_count);
    if cfg.class_count <= u16::from(TERRAIN) {
        return ground;
    }
    let y = (wy as f64 + 0.5) * f64::from(cfg.voxel_size);
    match y.abs() {
        a if a < 5.0 => DRIVEABLE_SURFACE,
        a if a < 6.0 => SIDEWALK,
        _ => TERRAIN,
    }
}

fn place_obstacles(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let classes = obstacle_classes(cfg.class_count);
    let [nx, ny, _] = cfg.dims.map(|d| d as i64);
    let lane = cfg.lane_voxels() as i64;
    let mut out = Vec::new();
    for i in 0..cfg.static_obstacles + cfg.moving_obstacles {
        let size = [0, 1, 2].map(|a| rng.gen_range(cfg.obstacle_min[a]..=cfg.obstacle_max[a]) as i64);
        let x0 = rng.gen_range(-nx / 2..=nx / 2 - size[0]);
        let y0 = if rng.gen_bool(0.5) {
            rng.gen_range(lane..=ny / 2 - size[1])
        } else {
            rng.gen_range(-ny / 2..=-lane - size[1])
        };
        let class = classes[rng.gen_range(0..classes.len())];
        let speed = if i >= cfg.static_obstacles {
            i64::from(cfg.obstacle_speed)
        } else {
            0
        };
        out.push(Obstacle {
            min: [x0, y0, 1],
            size,
            class,
            speed,
        });
    }
    out
}

fn ego_track(cfg: &SceneConfig) -> Vec<[f64; 2]> {
    (0..cfg.frames)
        .map(|t| {
            let heading = cfg.ego_yaw_rate * t as f64 * cfg.frame_period_s;
            let step = cfg.ego_speed_mps * cfg.frame_period_s;
            [step * heading.cos(), step * heading.sin()]
        })
        .collect()
}

/// Deterministic sequence for `cfg`.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<SceneSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let obstacles = place_obstacles(cfg, &mut rng);
    let displacements = ego_track(cfg);
    let vs = f64::from(cfg.voxel_size);
    let [nx, ny, nz] = cfg.dims;
    let mut pos = [0.0f64; 2];
    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let snap = [(pos[0] / vs).round() as i64, (pos[1] / vs).round() as i64];
        let off = [snap[0] - nx as i64 / 2, snap[1] - ny as i64 / 2];
        let mut grid = SemanticVoxelGrid::empty(cfg.dims, cfg.voxel_size, cfg.origin(), cfg.class_count);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let w = [x as i64 + off[0], y as i64 + off[1], z as i64];
                    let label = if z == 0 {
                        ground_label(cfg, w[1])
                    } else {
                        obstacles
                            .iter()
                            .rev()
                            .find(|o| o.contains(w, t as i64))
                            .map_or(AIR, |o| o.class)
                    };
                    if label != AIR {
                        grid.set(x, y, z, label);
                    }
                }
            }
        }
        frames.push(grid);
        pos[0] += displacements[t][0];
        pos[1] += displacements[t][1];
    }
    Ok(SceneSequence {
        frames,
        displacements,
        frame_period_s: cfg.frame_period_s,
    })
}

/// Image size and intrinsics used for every rig camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageSpec {
    pub width: usize,
    pub height: usize,
    pub focal_px: f64,
    pub near: f64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            focal_px: 40.0,
            near: 0.1,
        }
    }
}

/// `n` level cameras on a circle of `radius` at `height`, yaw `k·360°/n`,
/// each looking radially outward.
pub fn generate_rig(n_cameras: usize, radius: f64, height: f64, image: &ImageSpec) -> Result<Vec<CameraModel>> {
    if n_cameras == 0 {
        return Err(Error::config("cameras", "need at least one camera"));
    }
    (0..n_cameras)
        .map(|k| {
            let yaw = 2.0 * PI * k as f64 / n_cameras as f64;
            let (s, c) = yaw.sin_cos();
            let forward = Vector3::new(c, s, 0.0);
            let right = Vector3::new(s, -c, 0.0);
            let down = Vector3::new(0.0, 0.0, -1.0);
            let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
            let center = Vector3::new(radius * c, radius * s, height);
            CameraModel::simple(image.focal_px, image.width, image.height, pose_from_center(&r, &center), image.near)
        })
        .collect()
}

/// Z-buffered projection of non-air voxel centers to the nearest pixel.
///
/// Centers hidden behind nearer solid voxels are dropped: every voxel also
/// splats its depth over the disk its half-extent covers on screen, and a
/// projected center survives only within one voxel diagonal of that
/// surface.
pub fn project_ground_truth(grid: &SemanticVoxelGrid, camera: &CameraModel) -> ViewTarget {
    let (w, h) = (camera.width(), camera.height());
    let vs = f64::from(grid.voxel_size());
    let mut hits = Vec::new();
    let mut surface = vec![f64::INFINITY; w * h];
    for (idx, label) in grid.labels().iter().enumerate() {
        if *label == AIR {
            continue;
        }
        let [x, y, z] = grid.coords(idx);
        let pc = camera.to_camera(&grid.voxel_center(x, y, z));
        if pc.z < camera.near() {
            continue;
        }
        let uv = camera.project_camera(&pc);
        let r = camera.fx().max(camera.fy()) * vs / 2.0 / pc.z;
        let (u0, u1) = ((uv.x - r).ceil().max(0.0), (uv.x + r).floor().min(w as f64 - 1.0));
        let (v0, v1) = ((uv.y - r).ceil().max(0.0), (uv.y + r).floor().min(h as f64 - 1.0));
        if u0 <= u1 && v0 <= v1 {
            for v in v0 as usize..=v1 as usize {
                for u in u0 as usize..=u1 as usize {
                    let d2 = (u as f64 - uv.x).powi(2) + (v as f64 - uv.y).powi(2);
                    if d2 <= r * r {
                        let s = &mut surface[v * w + u];
                        *s = s.min(pc.z);
                    }
                }
            }
        }
        let (u, v) = (uv.x.round(), uv.y.round());
        if u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64 {
            hits.push((v as usize * w + u as usize, pc.z, *label));
        }
    }
    let tolerance = 3f64.sqrt() * vs;
    let mut depth = vec![0.0; w * h];
    let mut labels = vec![AIR; w * h];
    let mut valid = vec![false; w * h];
    for (p, z, label) in hits {
        if z > surface[p] + tolerance {
            continue;
        }
        if !valid[p] || z < depth[p] {
            depth[p] = z;
            labels[p] = label;
            valid[p] = true;
        }
    }
    ViewTarget { depth, labels, valid }
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:04}.occ"))
}

pub fn save_trajectory(path: &Path, trajectory: &Trajectory) -> Result<()> {
    std::fs::write(path, trajectory.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes frames, `trajectory.json` and `rig.json` into `dir`.
pub fn save_sequence(dir: &Path, seq: &SceneSequence, rig: &[CameraModel]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, g) in seq.frames.iter().enumerate() {
        save_grid(&frame_path(dir, t), g)?;
    }
    save_trajectory(
        &dir.join("trajectory.json"),
        &Trajectory {
            dt_s: seq.frame_period_s,
            displacements_m: seq.displacements.clone(),
        },
    )?;
    save_rig(&dir.join("rig.json"), rig)
}

/// Reads a sequence directory. Frames are read in index order until the
/// first gap.
pub fn load_sequence(dir: &Path) -> Result<SceneSequence> {
    let mut frames = Vec::new();
    while frame_path(dir, frames.len()).exists() {
        frames.push(load_grid(&frame_path(dir, frames.len()))?);
    }
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let traj = load_trajectory(&dir.join("trajectory.json"))?;
    Ok(SceneSequence {
        frames,
        displacements: traj.displacements_m,
        frame_period_s: traj.dt_s,
    })
}

pub fn load_sequence_rig(dir: &Path) -> Result<Vec<CameraModel>> {
    load_rig(&dir.join("rig.json"))
}

pub fn sequence_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("seq_{i:04}"))
}

/// Config of sequence `i` in a dataset: the base config with a derived seed.
pub fn sequence_config(base: &SceneConfig, i: usize) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    rng.set_stream(i as u64 + 1);
    SceneConfig {
        seed: rng.gen(),
        ..base.clone()
    }
}

pub fn generate_dataset(base: &SceneConfig, sequences: usize) -> Result<Vec<SceneSequence>> {
    (0..sequences)
        .map(|i| generate_sequence(&sequence_config(base, i)))
        .collect()
}

pub fn save_dataset(root: &Path, sequences: &[SceneSequence], rig: &[CameraModel]) -> Result<()> {
    for (i, s) in sequences.iter().enumerate() {
        save_sequence(&sequence_dir(root, i), s, rig)?;
    }
    Ok(())
}

/// Every `seq_*` directory under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneSequence>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("seq_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}
