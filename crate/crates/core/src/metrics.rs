//! Occupancy and planning metrics: per-class IoU, binary IoU, trajectory
//! L2, footprint collision rate, and the copy-last-frame baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::SceneSequence;
use crate::imageio::CLASS_NAMES;
use crate::occupancy::{ClassSet, SemanticVoxelGrid, AIR};

/// Evaluation marks in frames (1 s, 2 s, 3 s at 0.5 s per frame).
pub const MARK_FRAMES: [usize; 3] = [2, 4, 6];

/// Default ego footprint, length (x) × width (y) in meters.
pub const EGO_FOOTPRINT: [f64; 2] = [4.0, 2.0];

/// Ground-like classes that never count as obstacles in the default setup.
pub const DRIVABLE_CLASSES: [u8; 4] = [11, 12, 13, 14];

/// Non-air classes other than the drivable ones.
pub fn default_obstacles(class_count: u16) -> ClassSet {
    ClassSet::new((1..class_count).map(|c| c as u8).filter(|c| !DRIVABLE_CLASSES.contains(c)))
        .expect("air excluded")
}

fn check(pred: &SemanticVoxelGrid, gt: &SemanticVoxelGrid) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Intersection and union counts per class, poolable across grids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(class_count: usize) -> Self {
        Self {
            intersection: vec![0; class_count],
            union: vec![0; class_count],
        }
    }

    pub fn add(&mut self, pred: &SemanticVoxelGrid, gt: &SemanticVoxelGrid) -> Result<()> {
        check(pred, gt)?;
        let n = self.union.len();
        for (p, g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (*p as usize, *g as usize);
            if p == g {
                if p < n {
                    self.intersection[p] += 1;
                    self.union[p] += 1;
                }
            } else {
                if p < n {
                    self.union[p] += 1;
                }
                if g < n {
                    self.union[g] += 1;
                }
            }
        }
        Ok(())
    }

    /// IoU per class (`None` for air, excluded ids and empty unions) and
    /// their mean. With no scorable class the mean is 1.
    pub fn summarize(&self, class_ids: Option<&[u8]>) -> (Vec<Option<f64>>, f64) {
        let per: Vec<Option<f64>> = (0..self.union.len())
            .map(|c| {
                let selected = class_ids.is_none_or(|ids| ids.contains(&(c as u8)));
                (c != AIR as usize && selected && self.union[c] > 0)
                    .then(|| self.intersection[c] as f64 / self.union[c] as f64)
            })
            .collect();
        let scored: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = if scored.is_empty() {
            1.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        (per, mean)
    }
}

/// Per-class IoU over `class_ids` (all classes when `None`) and mIoU.
/// Air and classes absent from both grids are left out of the mean.
pub fn miou(
    pred: &SemanticVoxelGrid,
    gt: &SemanticVoxelGrid,
    class_ids: Option<&[u8]>,
) -> Result<(Vec<Option<f64>>, f64)> {
    let classes = pred.class_count().max(gt.class_count()) as usize;
    let mut counts = IouCounts::new(classes);
    counts.add(pred, gt)?;
    Ok(counts.summarize(class_ids))
}

/// Pooled mIoU over pairs of grids.
pub fn pooled_miou<'a>(
    pairs: impl IntoIterator<Item = (&'a SemanticVoxelGrid, &'a SemanticVoxelGrid)>,
) -> Result<f64> {
    let mut counts: Option<IouCounts> = None;
    for (p, g) in pairs {
        let c = counts.get_or_insert_with(|| IouCounts::new(p.class_count().max(g.class_count()) as usize));
        c.add(p, g)?;
    }
    Ok(counts.map_or(1.0, |c| c.summarize(None).1))
}

/// IoU of the non-air masks; 1 when both are empty.
pub fn binary_iou(pred: &SemanticVoxelGrid, gt: &SemanticVoxelGrid) -> Result<f64> {
    check(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (*p != AIR, *g != AIR);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Values at the 1 s / 2 s / 3 s marks and their mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkRow {
    pub marks: [f64; 3],
    pub avg: f64,
}

impl MarkRow {
    pub fn new(marks: [f64; 3]) -> Self {
        Self {
            marks,
            avg: marks.iter().sum::<f64>() / 3.0,
        }
    }
}

/// Running sums of per-frame displacements.
pub fn cumulative(disp: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut acc = [0.0, 0.0];
    disp.iter()
        .map(|d| {
            acc[0] += d[0];
            acc[1] += d[1];
            acc
        })
        .collect()
}

/// Euclidean distance between cumulative positions at frames 2, 4, 6.
pub fn l2_trajectory(pred_disp: &[[f64; 2]], gt_disp: &[[f64; 2]]) -> Result<MarkRow> {
    let need = MARK_FRAMES[2];
    if pred_disp.len() != gt_disp.len() || pred_disp.len() < need {
        return Err(Error::LengthMismatch(format!(
            "need two trajectories of at least {need} frames, got {} and {}",
            pred_disp.len(),
            gt_disp.len()
        )));
    }
    let (p, g) = (cumulative(pred_disp), cumulative(gt_disp));
    let at = |f: usize| {
        let (a, b) = (p[f - 1], g[f - 1]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    Ok(MarkRow::new(MARK_FRAMES.map(at)))
}

/// Whether an axis-aligned `footprint` centered at `position` (meters, in
/// the grid's frame) overlaps a column containing an obstacle class.
pub fn collides(position: [f64; 2], grid: &SemanticVoxelGrid, footprint: [f64; 2], obstacles: &ClassSet) -> bool {
    let vs = f64::from(grid.voxel_size());
    let origin = grid.origin();
    let [nx, ny, nz] = grid.dims();
    let lo = [position[0] - footprint[0] / 2.0, position[1] - footprint[1] / 2.0];
    let hi = [position[0] + footprint[0] / 2.0, position[1] + footprint[1] / 2.0];
    let range = |axis: usize, n: usize| {
        let o = f64::from(origin[axis]);
        // cells whose open interval intersects (lo, hi)
        let first = ((lo[axis] - o) / vs).floor().max(0.0) as usize;
        let last = ((hi[axis] - o) / vs).ceil().min(n as f64).max(0.0) as usize;
        (first..last).filter(move |i| {
            let c0 = o + *i as f64 * vs;
            c0 < hi[axis] && c0 + vs > lo[axis]
        })
    };
    for x in range(0, nx) {
        for y in range(1, ny) {
            if (0..nz).any(|z| obstacles.contains(grid.get(x, y, z))) {
                return true;
            }
        }
    }
    false
}

/// Fraction of samples whose footprint collides in their ground-truth grid.
pub fn collision_rate(
    positions: &[[f64; 2]],
    gt_grids: &[SemanticVoxelGrid],
    footprint: [f64; 2],
    obstacles: &ClassSet,
) -> Result<f64> {
    if positions.len() != gt_grids.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} positions for {} grids",
            positions.len(),
            gt_grids.len()
        )));
    }
    if positions.is_empty() {
        return Ok(0.0);
    }
    let hits = positions
        .iter()
        .zip(gt_grids)
        .filter(|(p, g)| collides(**p, g, footprint, obstacles))
        .count();
    Ok(hits as f64 / positions.len() as f64)
}

/// Repeats the last observed grid `horizon` times.
pub fn copy_paste_baseline(last_grid: &SemanticVoxelGrid, horizon: usize) -> Vec<SemanticVoxelGrid> {
    vec![last_grid.clone(); horizon]
}

/// Forecast accuracy plus planning metrics, optionally beside the
/// copy-last-frame baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Pooled over all samples and marks; `None` where unscored.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: MarkRow,
    pub iou: MarkRow,
    pub l2: Option<MarkRow>,
    pub collision: Option<MarkRow>,
    pub baseline_miou: Option<MarkRow>,
    pub baseline_iou: Option<MarkRow>,
    pub samples: usize,
}

/// Occupancy scores at the three marks for forecast/ground-truth pairs,
/// one `[grid at mark 1, mark 2, mark 3]` triple per sample.
pub fn mark_scores(
    pred: &[[&SemanticVoxelGrid; 3]],
    gt: &[[&SemanticVoxelGrid; 3]],
) -> Result<(MarkRow, MarkRow, Vec<Option<f64>>)> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::LengthMismatch(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    let classes = gt[0][0].class_count() as usize;
    let mut all = IouCounts::new(classes);
    let mut m = [0.0; 3];
    let mut b = [0.0; 3];
    for k in 0..3 {
        let mut counts = IouCounts::new(classes);
        let (mut inter, mut union) = (0u64, 0u64);
        for (p, g) in pred.iter().zip(gt) {
            counts.add(p[k], g[k])?;
            all.add(p[k], g[k])?;
            for (a, c) in p[k].labels().iter().zip(g[k].labels()) {
                inter += u64::from(*a != AIR && *c != AIR);
                union += u64::from(*a != AIR || *c != AIR);
            }
        }
        m[k] = counts.summarize(None).1;
        b[k] = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok((MarkRow::new(m), MarkRow::new(b), all.summarize(None).0))
}

/// One forecast: a grid and an ego displacement per horizon step.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub grids: Vec<SemanticVoxelGrid>,
    pub displacements: Vec<[f64; 2]>,
}

pub fn class_names(class_count: u16) -> Vec<String> {
    if class_count as usize == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..class_count).map(|c| format!("class_{c}")).collect()
    }
}

/// Scores forecasts made after the first `history` frames of each
/// ground-truth sequence, at frames 2, 4 and 6 after the last observed
/// frame. Copy-paste repeats that last observed frame.
///
/// How collisions are counted at each mark.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionCounting {
    /// A sample counts at a mark if it collides at that frame.
    #[default]
    PerMark,
    /// A sample counts at a mark if it collides at any frame up to it.
    Cumulative,
}

/// [`score_forecasts_with`] using per-mark collision counting.
pub fn score_forecasts(preds: &[Prediction], gt: &[SceneSequence], history: usize) -> Result<EvalReport> {
    score_forecasts_with(preds, gt, history, CollisionCounting::PerMark)
}

/// Collision positions are the predicted minus the true cumulative
/// displacement, since every ground-truth grid is centered on the true ego
/// position.
pub fn score_forecasts_with(
    preds: &[Prediction],
    gt: &[SceneSequence],
    history: usize,
    counting: CollisionCounting,
) -> Result<EvalReport> {
    let horizon = MARK_FRAMES[2];
    if preds.is_empty() || gt.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != gt.len() {
        return Err(Error::LengthMismatch(format!("{} forecasts for {} sequences", preds.len(), gt.len())));
    }
    if history == 0 {
        return Err(Error::config("history", "must be at least 1"));
    }
    let last = history - 1;
    let mut l2_sum = [0.0f64; 3];
    let mut positions: [Vec<[f64; 2]>; 3] = Default::default();
    let mut mark_grids: [Vec<SemanticVoxelGrid>; 3] = Default::default();
    let obstacles = default_obstacles(gt[0].frames[0].class_count());
    let mut first_hits = Vec::with_capacity(preds.len());
    for (p, s) in preds.iter().zip(gt) {
        if s.frames.len() < history + horizon || s.displacements.len() < last + horizon {
            return Err(Error::LengthMismatch(format!(
                "sequence of {} frames is too short for history {history} plus horizon {horizon}",
                s.frames.len()
            )));
        }
        if p.grids.len() < horizon || p.displacements.len() < horizon {
            return Err(Error::LengthMismatch(format!(
                "forecast has {} grids and {} displacements, need {horizon}",
                p.grids.len(),
                p.displacements.len()
            )));
        }
        let gt_disp = &s.displacements[last..last + horizon];
        let pred_disp = &p.displacements[..horizon];
        let l2 = l2_trajectory(pred_disp, gt_disp)?;
        let (pc, gc) = (cumulative(pred_disp), cumulative(gt_disp));
        let offset = |t: usize| [pc[t - 1][0] - gc[t - 1][0], pc[t - 1][1] - gc[t - 1][1]];
        for (k, m) in MARK_FRAMES.iter().enumerate() {
            l2_sum[k] += l2.marks[k];
            positions[k].push(offset(*m));
            mark_grids[k].push(s.frames[last + m].clone());
        }
        if counting == CollisionCounting::Cumulative {
            first_hits.push((1..=horizon).find(|t| collides(offset(*t), &s.frames[last + t], EGO_FOOTPRINT, &obstacles)));
        }
    }
    let pred_refs: Vec<[&SemanticVoxelGrid; 3]> = preds.iter().map(|p| MARK_FRAMES.map(|m| &p.grids[m - 1])).collect();
    let gt_refs: Vec<[&SemanticVoxelGrid; 3]> = gt.iter().map(|s| MARK_FRAMES.map(|m| &s.frames[last + m])).collect();
    let base_refs: Vec<[&SemanticVoxelGrid; 3]> = gt.iter().map(|s| [&s.frames[last]; 3]).collect();
    let (miou, iou, per_class) = mark_scores(&pred_refs, &gt_refs)?;
    let (bm, bi, _) = mark_scores(&base_refs, &gt_refs)?;
    let class_count = gt[0].frames[0].class_count();
    let mut collision = [0.0; 3];
    for (k, m) in MARK_FRAMES.iter().enumerate() {
        collision[k] = match counting {
            CollisionCounting::PerMark => collision_rate(&positions[k], &mark_grids[k], EGO_FOOTPRINT, &obstacles)?,
            CollisionCounting::Cumulative => {
                first_hits.iter().filter(|h| h.is_some_and(|t| t <= *m)).count() as f64 / first_hits.len() as f64
            }
        };
    }
    let n = gt.len() as f64;
    Ok(EvalReport {
        class_names: class_names(class_count),
        per_class_iou: per_class,
        miou,
        iou,
        l2: Some(MarkRow::new(l2_sum.map(|v| v / n))),
        collision: Some(MarkRow::new(collision)),
        baseline_miou: Some(bm),
        baseline_iou: Some(bi),
        samples: gt.len(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Aligned text table: one row per method, columns 1s/2s/3s/Avg for
    /// each metric group.
    pub fn to_table(&self) -> String {
        let fmt = |r: &Option<MarkRow>, scale: f64| match r {
            Some(r) => r
                .marks
                .iter()
                .chain(std::iter::once(&r.avg))
                .map(|v| format!("{:>7.2}", v * scale))
                .collect::<Vec<_>>()
                .join(" "),
            None => vec![format!("{:>7}", "-"); 4].join(" "),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} | {:^31} | {:^31} | {:^31} | {:^31}\n",
            "method", "mIoU (%)", "IoU (%)", "L2 (m)", "Collision (%)"
        ));
        let sub = ["1s", "2s", "3s", "Avg"].map(|s| format!("{s:>7}")).join(" ");
        out.push_str(&format!("{:<12} | {sub} | {sub} | {sub} | {sub}\n", ""));
        out.push_str(&format!(
            "{:<12} | {} | {} | {} | {}\n",
            "forecast",
            fmt(&Some(self.miou), 100.0),
            fmt(&Some(self.iou), 100.0),
            fmt(&self.l2, 1.0),
            fmt(&self.collision, 100.0)
        ));
        if self.baseline_miou.is_some() {
            out.push_str(&format!(
                "{:<12} | {} | {} | {} | {}\n",
                "copy-paste",
                fmt(&self.baseline_miou, 100.0),
                fmt(&self.baseline_iou, 100.0),
                fmt(&None, 1.0),
                fmt(&None, 1.0)
            ));
        }
        out.push('\n');
        for (i, v) in self.per_class_iou.iter().enumerate() {
            if let Some(v) = v {
                let name = self.class_names.get(i).map_or("?", String::as_str);
                out.push_str(&format!("{:<22} {:>6.2}\n", name, v * 100.0));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3], classes: u16, labels: Vec<u8>) -> SemanticVoxelGrid {
        SemanticVoxelGrid::new(dims, 0.4, [0.0; 3], classes, labels).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, dims: [usize; 3], classes: u16) -> SemanticVoxelGrid {
        let n = dims.iter().product();
        grid(dims, classes, (0..n).map(|_| rng.gen_range(0..classes) as u8).collect())
    }

    #[test]
    fn miou_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random(&mut rng, [4, 4, 2], 5);
        let (per, m) = miou(&g, &g, None).unwrap();
        assert_eq!(m, 1.0);
        assert!(per[0].is_none());
        let a = grid([2, 1, 1], 3, vec![1, 0]);
        let b = grid([2, 1, 1], 3, vec![0, 1]);
        assert_eq!(miou(&a, &b, None).unwrap().1, 0.0);
        let c = grid([3, 1, 1], 3, vec![1, 0, 0]);
        assert!(matches!(miou(&a, &c, None), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn miou_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (p, g) = (random(&mut rng, [8, 8, 4], 4), random(&mut rng, [8, 8, 4], 4));
            let (per, m) = miou(&p, &g, None).unwrap();
            let mut scored = Vec::new();
            for c in 1..4u8 {
                let ps: std::collections::HashSet<usize> =
                    (0..256).filter(|i| p.labels()[*i] == c).collect();
                let gs: std::collections::HashSet<usize> =
                    (0..256).filter(|i| g.labels()[*i] == c).collect();
                let u = ps.union(&gs).count();
                if u > 0 {
                    let v = ps.intersection(&gs).count() as f64 / u as f64;
                    assert_eq!(per[c as usize], Some(v));
                    scored.push(v);
                }
            }
            assert_eq!(m, scored.iter().sum::<f64>() / scored.len() as f64);
        }
    }

    #[test]
    fn binary_iou_examples() {
        let a = grid([2, 2, 1], 3, vec![1, 2, 0, 0]);
        let air = grid([2, 2, 1], 3, vec![0; 4]);
        assert_eq!(binary_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(binary_iou(&air, &a).unwrap(), 0.0);
        let b = grid([2, 2, 1], 3, vec![2, 0, 1, 0]);
        assert!((binary_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_are_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, g) = (random(&mut rng, [4, 4, 4], 5), random(&mut rng, [4, 4, 4], 5));
        assert_eq!(miou(&p, &g, None).unwrap().1, miou(&g, &p, None).unwrap().1);
        assert_eq!(binary_iou(&p, &g).unwrap(), binary_iou(&g, &p).unwrap());
        let mut perm: Vec<usize> = (0..64).collect();
        for i in (1..64).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pp = grid([4, 4, 4], 5, perm.iter().map(|i| p.labels()[*i]).collect());
        let gp = grid([4, 4, 4], 5, perm.iter().map(|i| g.labels()[*i]).collect());
        assert_eq!(miou(&p, &g, None).unwrap(), miou(&pp, &gp, None).unwrap());
    }

    #[test]
    fn l2_examples() {
        let gt = vec![[1.0, 0.0]; 6];
        assert_eq!(l2_trajectory(&gt, &gt).unwrap().marks, [0.0; 3]);
        let pred = vec![[1.1, 0.0]; 6];
        let r = l2_trajectory(&pred, &gt).unwrap();
        for (got, want) in r.marks.iter().zip([0.2, 0.4, 0.6]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((r.avg - 0.4).abs() < 1e-12);
        assert!(matches!(l2_trajectory(&[], &[]), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn collision_examples() {
        let obstacles = default_obstacles(17);
        let air = SemanticVoxelGrid::empty([10, 10, 2], 0.4, [-2.0, -2.0, 0.0], 17);
        assert_eq!(collision_rate(&[[0.0, 0.0]], std::slice::from_ref(&air), EGO_FOOTPRINT, &obstacles).unwrap(), 0.0);
        let mut block = air.clone();
        block.set(5, 5, 1, 4);
        assert_eq!(collision_rate(&[[0.1, 0.1]], &[block.clone()], EGO_FOOTPRINT, &obstacles).unwrap(), 1.0);
        let mut road = air;
        road.set(5, 5, 0, 11);
        assert_eq!(collision_rate(&[[0.1, 0.1]], &[road], EGO_FOOTPRINT, &obstacles).unwrap(), 0.0);
        // far away from the block
        assert!(!collides([-1.5, -1.5], &block, [0.4, 0.4], &obstacles));
    }

    #[test]
    fn collision_matches_cell_enumeration_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obstacles = ClassSet::new([1u8]).unwrap();
        for _ in 0..200 {
            let g = {
                let labels = (0..8 * 8 * 4)
                    .map(|_| if rng.gen_bool(0.03) { 1 } else if rng.gen_bool(0.1) { 2 } else { 0 })
                    .collect();
                SemanticVoxelGrid::new([8, 8, 4], 0.5, [-2.0, -2.0, 0.0], 3, labels).unwrap()
            };
            let pos = [rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)];
            let fp = [rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)];
            let mut want = false;
            for x in 0..8 {
                for y in 0..8 {
                    let (x0, y0) = (-2.0 + x as f64 * 0.5, -2.0 + y as f64 * 0.5);
                    let overlap = x0 < pos[0] + fp[0] / 2.0
                        && x0 + 0.5 > pos[0] - fp[0] / 2.0
                        && y0 < pos[1] + fp[1] / 2.0
                        && y0 + 0.5 > pos[1] - fp[1] / 2.0;
                    if overlap && (0..4).any(|z| g.get(x, y, z) == 1) {
                        want = true;
                    }
                }
            }
            assert_eq!(collides(pos, &g, fp, &obstacles), want);
            if want {
                assert!(collides(pos, &g, [fp[0] + 0.3, fp[1] + 0.2], &obstacles));
            }
        }
    }

    #[test]
    fn copy_paste_examples() {
        let g = grid([2, 2, 1], 3, vec![1, 2, 0, 0]);
        let out = copy_paste_baseline(&g, 6);
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|o| *o == g));
        let refs: Vec<[&SemanticVoxelGrid; 3]> = vec![[&g, &g, &g]];
        let (m, b, _) = mark_scores(&refs, &refs).unwrap();
        assert_eq!((m.avg, b.avg), (1.0, 1.0));
    }

    #[test]
    fn cumulative_counting_keeps_collisions_between_marks() {
        let air = SemanticVoxelGrid::new([4, 4, 1], 1.0, [-2.0, -2.0, 0.0], 3, vec![0; 16]).unwrap();
        let wall = air.with_labels(vec![1; 16]).unwrap();
        let mut frames = vec![air.clone(); 8];
        // frame 1 s before the first mark, right after the history
        frames[2] = wall;
        let seq = SceneSequence {
            frames,
            displacements: vec![[0.0, 0.0]; 7],
            frame_period_s: 0.5,
        };
        let pred = Prediction {
            grids: vec![air; 6],
            displacements: vec![[0.0, 0.0]; 6],
        };
        let per_mark = score_forecasts(std::slice::from_ref(&pred), std::slice::from_ref(&seq), 2).unwrap();
        assert_eq!(per_mark.collision.unwrap().marks, [0.0; 3]);
        let cumulative = score_forecasts_with(&[pred], &[seq], 2, CollisionCounting::Cumulative).unwrap();
        assert_eq!(cumulative.collision.unwrap().marks, [1.0; 3]);
    }

    #[test]
    fn report_renders() {
        let report = EvalReport {
            class_names: vec!["air".into(), "car".into()],
            per_class_iou: vec![None, Some(0.5)],
            miou: MarkRow::new([1.0, 0.5, 0.25]),
            iou: MarkRow::new([1.0, 1.0, 1.0]),
            l2: Some(MarkRow::new([0.1, 0.2, 0.3])),
            collision: None,
            baseline_miou: Some(MarkRow::new([0.5, 0.5, 0.5])),
            baseline_iou: Some(MarkRow::new([0.5, 0.5, 0.5])),
            samples: 1,
        };
        let table = report.to_table();
        assert!(table.contains("forecast") && table.contains("copy-paste") && table.contains("car"));
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
