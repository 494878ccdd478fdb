//! Semantic voxel grids, the air/non-air mask algebra and the `.occ` file
//! format.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Class id reserved for empty space.
pub const AIR: u8 = 0;

const OCC_MAGIC: &[u8; 4] = b"OCCG";
const OCC_VERSION: u8 = 1;
const OCC_HEADER_LEN: usize = 4 + 1 + 12 + 4 + 12 + 2;

/// Dense grid of class labels. Linear index is `x + X·(y + Y·z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticVoxelGrid {
    dims: [usize; 3],
    voxel_size: f32,
    origin: [f32; 3],
    class_count: u16,
    labels: Vec<u8>,
}

impl SemanticVoxelGrid {
    pub fn new(
        dims: [usize; 3],
        voxel_size: f32,
        origin: [f32; 3],
        class_count: u16,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::DimensionMismatch(format!("non-positive dims {dims:?}")));
        }
        if !(voxel_size > 0.0) {
            return Err(Error::DimensionMismatch("voxel size must be positive".into()));
        }
        if !(1..=256).contains(&class_count) {
            return Err(Error::DimensionMismatch(format!(
                "class count {class_count} outside 1..=256"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| u16::from(**l) >= class_count) {
            return Err(Error::DimensionMismatch(format!(
                "label {bad} outside class count {class_count}"
            )));
        }
        Ok(Self {
            dims,
            voxel_size,
            origin,
            class_count,
            labels,
        })
    }

    pub fn empty(dims: [usize; 3], voxel_size: f32, origin: [f32; 3], class_count: u16) -> Self {
        Self::new(
            dims,
            voxel_size,
            origin,
            class_count,
            vec![AIR; dims[0] * dims[1] * dims[2]],
        )
        .expect("empty grid parameters must be valid")
    }

    /// Grid of the same geometry with new labels.
    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Self> {
        Self::new(self.dims, self.voxel_size, self.origin, self.class_count, labels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f32 {
        self.voxel_size
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn class_count(&self) -> u16 {
        self.class_count
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        assert!(u16::from(label) < self.class_count);
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    /// World-space center of voxel `(x, y, z)`.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        let vs = f64::from(self.voxel_size);
        Vector3::new(
            f64::from(self.origin[0]) + (x as f64 + 0.5) * vs,
            f64::from(self.origin[1]) + (y as f64 + 0.5) * vs,
            f64::from(self.origin[2]) + (z as f64 + 0.5) * vs,
        )
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.voxel_size == other.voxel_size
            && self.origin == other.origin
            && self.class_count == other.class_count
    }

    pub fn non_air_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != AIR).count()
    }

    /// Serializes to the `.occ` byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(OCC_HEADER_LEN + self.labels.len());
        out.extend_from_slice(OCC_MAGIC);
        out.push(OCC_VERSION);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.voxel_size.to_le_bytes());
        for o in self.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.extend_from_slice(&self.class_count.to_le_bytes());
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < OCC_HEADER_LEN {
            return Err(Error::CorruptHeader(format!(
                "header needs {OCC_HEADER_LEN} bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != OCC_MAGIC {
            return Err(Error::CorruptHeader("bad magic".into()));
        }
        if bytes[4] != OCC_VERSION {
            return Err(Error::CorruptHeader(format!("unsupported version {}", bytes[4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let dims = [u32_at(5), u32_at(9), u32_at(13)];
        let voxel_size = f32_at(17);
        let origin = [f32_at(21), f32_at(25), f32_at(29)];
        let class_count = u16::from_le_bytes([bytes[33], bytes[34]]);
        if dims.contains(&0) || !(voxel_size > 0.0) || class_count == 0 {
            return Err(Error::CorruptHeader(format!(
                "invalid geometry dims={dims:?} voxel={voxel_size} classes={class_count}"
            )));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::CorruptHeader("dims overflow".into()))?;
        let payload = &bytes[OCC_HEADER_LEN..];
        if payload.len() < n {
            return Err(Error::TruncatedPayload {
                expected: n,
                found: payload.len(),
            });
        }
        if payload.len() > n {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after payload",
                payload.len() - n
            )));
        }
        Self::new(dims, voxel_size, origin, class_count, payload.to_vec())
            .map_err(|e| Error::CorruptHeader(e.to_string()))
    }
}

pub fn save_grid(path: &Path, grid: &SemanticVoxelGrid) -> Result<()> {
    std::fs::write(path, grid.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &Path) -> Result<SemanticVoxelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SemanticVoxelGrid::from_bytes(&bytes)
}

/// Set of non-air class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSet {
    member: [bool; 256],
}

impl ClassSet {
    pub fn new(ids: impl IntoIterator<Item = u8>) -> Result<Self> {
        let mut member = [false; 256];
        for id in ids {
            if id == AIR {
                return Err(Error::InvalidClassSet);
            }
            member[id as usize] = true;
        }
        Ok(Self { member })
    }

    /// Every class except air.
    pub fn all_non_air(class_count: u16) -> Self {
        Self::new((1..class_count).map(|c| c as u8)).expect("air excluded by construction")
    }

    pub fn contains(&self, id: u8) -> bool {
        self.member[id as usize]
    }

    pub fn ids(&self) -> BTreeSet<u8> {
        (0..=255u8).filter(|i| self.member[*i as usize]).collect()
    }
}

/// `I_M(v) = 1` iff the label of `v` is in `M`.
pub fn indicator(grid: &SemanticVoxelGrid, m: &ClassSet) -> Vec<u8> {
    grid.labels.iter().map(|l| u8::from(m.contains(*l))).collect()
}

/// Air/non-air decomposition of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AirSplit {
    /// 1 where the voxel is air (label outside `M`).
    pub air_part: SemanticVoxelGrid,
    /// Labels in `M` kept; 0 elsewhere.
    pub nonair_part: SemanticVoxelGrid,
}

/// Splits a grid into a binary air map and the non-air labels. Labels that
/// are neither air nor in `M` are folded into the air part.
pub fn split_air(grid: &SemanticVoxelGrid, m: &ClassSet) -> AirSplit {
    let ind = indicator(grid, m);
    let air: Vec<u8> = ind.iter().map(|i| 1 - *i).collect();
    let nonair: Vec<u8> = ind
        .iter()
        .zip(grid.labels.iter())
        .map(|(i, l)| i * l)
        .collect();
    let air_part = SemanticVoxelGrid::new(grid.dims, grid.voxel_size, grid.origin, 2, air)
        .expect("binary labels are valid");
    let nonair_part = grid.with_labels(nonair).expect("subset of valid labels");
    AirSplit {
        air_part,
        nonair_part,
    }
}

/// Inverse of [`split_air`]: air wherever the air map is non-zero, the
/// non-air label elsewhere.
pub fn recombine(
    air_recon: &SemanticVoxelGrid,
    nonair_recon: &SemanticVoxelGrid,
) -> Result<SemanticVoxelGrid> {
    if air_recon.dims != nonair_recon.dims {
        return Err(Error::DimensionMismatch(format!(
            "air {:?} vs non-air {:?}",
            air_recon.dims, nonair_recon.dims
        )));
    }
    let labels = air_recon
        .labels
        .iter()
        .zip(nonair_recon.labels.iter())
        .map(|(a, n)| if *a != 0 { AIR } else { *n })
        .collect();
    nonair_recon.with_labels(labels)
}
