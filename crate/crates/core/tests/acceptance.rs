//! Acceptance suite: one check per criterion, each printing a single
//! PASS/FAIL line. Oracles here are written independently of the library.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{Matrix2, Matrix3, Matrix4, Quaternion, SymmetricEigen, UnitQuaternion, Vector2, Vector3};
use occsplat::am_vae::{
    continue_training, load_tokens, quantize, save_tokens, train_codec, Codebook, CodecKind,
    LatentField, VaeConfig, VqCodec,
};
use occsplat::geometry::{build_covariance, load_rig, project_covariance, save_rig, COV_FLOOR_PX2};
use occsplat::gradcheck;
use occsplat::harness::{
    generate_dataset, generate_rig, generate_sequence, load_dataset, load_trajectory, save_dataset,
    save_trajectory, ImageSpec, SceneConfig, Trajectory,
};
use occsplat::imageio::{decode_pfm, decode_pgm, encode_pfm, encode_pgm};
use occsplat::img2occ::{gaussians_from_json, gaussians_to_json, train_img2occ, Img2OccConfig};
use occsplat::metrics::{binary_iou, collides, collision_rate, l2_trajectory, miou, pooled_miou};
use occsplat::occupancy::{load_grid, recombine, save_grid, split_air, ClassSet, AIR};
use occsplat::splat::{rasterize, ALPHA_MAX, ALPHA_MIN, FRUSTUM_GUARD};
use occsplat::world::{
    evaluate, lovasz_binary, lovasz_softmax, stage1_train, stage2_train, FrameInput, WorldConfig, WorldModel,
};
use occsplat::{CameraModel, Gaussian, GaussianSet, Rotation, ScaleVector, SemanticVoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let r = gradcheck::splat(20, 20, 1).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    ensure(r.cases >= 20, || format!("only {} scenes", r.cases))?;
    ensure(r.max_rel_error < 1e-3, || format!("max relative error {:.3e}", r.max_rel_error))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} scenes, {} coordinates, max rel error {:.2e}, {secs:.1} s",
        r.cases, r.checked, r.max_rel_error
    ))
}

// ---------------------------------------------------------------- 2

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Composites every Gaussian at every pixel with no tiling or bounding
/// boxes. Visibility mirrors the renderer's contract: in front of the near
/// plane and centered within the guard band.
fn brute_force(set: &GaussianSet, cam: &CameraModel) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h, c) = (cam.width(), cam.height(), set.class_count());
    let k = cam.intrinsics();
    let pose = cam.world_to_camera();
    let rot = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let trans = Vector3::new(pose[(0, 3)], pose[(1, 3)], pose[(2, 3)]);
    struct Item {
        depth: f64,
        index: usize,
        center: Vector2<f64>,
        inv: Matrix2<f64>,
        opacity: f64,
        probs: Vec<f64>,
    }
    let mut items = Vec::new();
    for (index, g) in set.iter().enumerate() {
        let p = rot * g.mean + trans;
        if p.z < cam.near() {
            continue;
        }
        let center = Vector2::new(k[(0, 0)] * p.x / p.z + k[(0, 2)], k[(1, 1)] * p.y / p.z + k[(1, 2)]);
        let (fw, fh) = (w as f64, h as f64);
        if center.x < -FRUSTUM_GUARD * fw
            || center.x > (1.0 + FRUSTUM_GUARD) * fw
            || center.y < -FRUSTUM_GUARD * fh
            || center.y > (1.0 + FRUSTUM_GUARD) * fh
        {
            continue;
        }
        let q = g.rotation.raw();
        let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix();
        let s = g.scale.scales();
        let sigma = r.matrix() * Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2])) * r.matrix().transpose();
        let j = nalgebra::Matrix2x3::new(
            k[(0, 0)] / p.z,
            0.0,
            -k[(0, 0)] * p.x / (p.z * p.z),
            0.0,
            k[(1, 1)] / p.z,
            -k[(1, 1)] * p.y / (p.z * p.z),
        );
        let cov = j * rot * sigma * rot.transpose() * j.transpose() + Matrix2::identity() * COV_FLOOR_PX2;
        items.push(Item {
            depth: p.z,
            index,
            center,
            inv: cov.try_inverse().expect("floored covariance is invertible"),
            opacity: 1.0 / (1.0 + (-g.opacity_logit).exp()),
            probs: softmax(&g.class_logits),
        });
    }
    items.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let (mut depth, mut dist, mut acc) = (vec![0.0; w * h], vec![0.0; w * h * c], vec![0.0; w * h]);
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let px = y * w + x;
            for it in &items {
                let d = Vector2::new(x as f64, y as f64) - it.center;
                let a = it.opacity * (-0.5 * (d.transpose() * it.inv * d)[(0, 0)]).exp();
                if a < ALPHA_MIN {
                    continue;
                }
                let a = a.min(ALPHA_MAX);
                depth[px] += it.depth * a * t;
                for k in 0..c {
                    dist[px * c + k] += it.probs[k] * a * t;
                }
                t *= 1.0 - a;
            }
            acc[px] = 1.0 - t;
        }
    }
    (depth, dist, acc)
}

fn random_gaussians(n: usize, classes: usize, r: &mut ChaCha8Rng) -> GaussianSet {
    let mut set = GaussianSet::new(classes);
    for _ in 0..n {
        let z: f64 = r.gen_range(-0.5..8.0);
        // some centers fall outside the view or behind the camera
        let spread = 0.8 * z.abs().max(0.5);
        set.push(Gaussian {
            mean: Vector3::new(r.gen_range(-spread..spread), r.gen_range(-spread..spread), z),
            rotation: Rotation::from_raw([
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            ]),
            scale: ScaleVector::from_log([
                r.gen_range(-3.0..-0.5),
                r.gen_range(-3.0..-0.5),
                r.gen_range(-3.0..-0.5),
            ]),
            opacity_logit: r.gen_range(-3.0..4.0),
            class_logits: (0..classes).map(|_| r.gen_range(-2.0..2.0)).collect(),
            anchor: None,
        });
    }
    set
}

fn compositing_oracle() -> Outcome {
    let cam = CameraModel::simple(28.0, 32, 32, Matrix4::identity(), 0.1).map_err(|e| e.to_string())?;
    let mut r = rng(2);
    let mut worst = 0.0f64;
    let mut covered = 0usize;
    for scene in 0..100 {
        let set = random_gaussians(r.gen_range(1..=50), 4, &mut r);
        let view = rasterize(&set, &cam).map_err(|e| format!("scene {scene}: {e}"))?;
        let (depth, dist, acc) = brute_force(&set, &cam);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst
            .max(diff(&view.depth, &depth))
            .max(diff(&view.class_dist, &dist))
            .max(diff(&view.alpha_sum, &acc));
        covered += acc.iter().filter(|a| **a > 0.0).count();
    }
    ensure(worst <= 1e-6, || format!("max per-pixel difference {worst:.3e}"))?;
    ensure(covered > 10_000, || format!("only {covered} covered pixels"))?;
    Ok(format!("100 scenes, {covered} covered pixels, max difference {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            for k in 0..m {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn random_unit_quat(r: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(
        r.gen_range(-1.0..1.0),
        r.gen_range(-1.0..1.0),
        r.gen_range(-1.0..1.0),
        r.gen_range(-1.0..1.0),
    ))
}

fn covariance_algebra() -> Outcome {
    let mut r = rng(3);
    let (mut eig_err, mut chain_err) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let raw = [
            r.gen_range(-1.0..1.0),
            r.gen_range(-1.0..1.0),
            r.gen_range(-1.0..1.0),
            r.gen_range(-1.0..1.0),
        ];
        let s = [r.gen_range(0.01..3.0), r.gen_range(0.01..3.0), r.gen_range(0.01..3.0)];
        let sigma = build_covariance(&Rotation::from_raw(raw), &ScaleVector::from_scales(s));
        ensure(sigma == sigma.transpose(), || format!("case {case}: not symmetric"))?;
        let mut eig: Vec<f64> = SymmetricEigen::new(sigma).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        ensure(eig[0] >= -1e-12, || format!("case {case}: eigenvalue {}", eig[0]))?;
        let mut sq: Vec<f64> = s.iter().map(|v| v * v).collect();
        sq.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip(&sq) {
            eig_err = eig_err.max((a - b).abs());
        }

        // random camera looking at a point in front of it
        let q = random_unit_quat(&mut r);
        let rot = q.to_rotation_matrix().into_inner();
        let center = Vector3::new(r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0));
        let t = -(rot * center);
        let mut pose = Matrix4::identity();
        pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let f = r.gen_range(50.0..600.0);
        let cam = CameraModel::simple(f, 64, 48, pose, 0.1).map_err(|e| e.to_string())?;
        let p_cam = Vector3::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(0.5..20.0));
        let mean = rot.transpose() * (p_cam - t);
        let got = project_covariance(&sigma, &cam, &mean).map_err(|e| e.to_string())?;

        let j = vec![
            vec![f / p_cam.z, 0.0, -f * p_cam.x / (p_cam.z * p_cam.z)],
            vec![0.0, f / p_cam.z, -f * p_cam.y / (p_cam.z * p_cam.z)],
        ];
        let w: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|k| pose[(i, k)]).collect()).collect();
        let sig: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|k| sigma[(i, k)]).collect()).collect();
        let jw = matmul(&j, &w);
        let want = matmul(&matmul(&jw, &sig), &transpose(&jw));
        for a in 0..2 {
            for b in 0..2 {
                let expect = want[a][b] + if a == b { COV_FLOOR_PX2 } else { 0.0 };
                let err = (got[(a, b)] - expect).abs() / expect.abs().max(1.0);
                chain_err = chain_err.max(err);
            }
        }
    }
    ensure(eig_err <= 1e-9, || format!("eigenvalue error {eig_err:.3e}"))?;
    ensure(chain_err <= 1e-9, || format!("projection error {chain_err:.3e}"))?;
    Ok(format!("1000 cases, eigen error {eig_err:.1e}, chain error {chain_err:.1e} (relative above 1 px²)"))
}

// ---------------------------------------------------------------- 4

fn mask_algebra() -> Outcome {
    let m3 = ClassSet::all_non_air(3);
    let mut count = 0;
    for code in 0..3usize.pow(8) {
        let labels: Vec<u8> = (0..8).map(|i| ((code / 3usize.pow(i)) % 3) as u8).collect();
        let g = SemanticVoxelGrid::new([2, 2, 2], 0.4, [0.0; 3], 3, labels).map_err(|e| e.to_string())?;
        let s = split_air(&g, &m3);
        let back = recombine(&s.air_part, &s.nonair_part).map_err(|e| e.to_string())?;
        ensure(back == g, || format!("grid {code} not restored"))?;
        count += 1;
    }
    let m17 = ClassSet::all_non_air(17);
    let mut r = rng(4);
    for i in 0..100 {
        let air_rate = r.gen_range(0.0..1.0);
        let labels: Vec<u8> = (0..32 * 32 * 8)
            .map(|_| if r.gen_bool(air_rate) { AIR } else { r.gen_range(1..17) })
            .collect();
        let g = SemanticVoxelGrid::new([32, 32, 8], 0.4, [0.0; 3], 17, labels).map_err(|e| e.to_string())?;
        let s = split_air(&g, &m17);
        let back = recombine(&s.air_part, &s.nonair_part).map_err(|e| e.to_string())?;
        ensure(back == g, || format!("random grid {i} not restored"))?;
    }
    Ok(format!("{count} exhaustive 2x2x2 grids and 100 random 32x32x8 grids restored"))
}

// ---------------------------------------------------------------- 5

fn quantizer_oracle() -> Outcome {
    let (k, d) = (512, 128);
    let mut r = rng(5);
    let mut entries: Vec<f32> = (0..k * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    // duplicated entries exercise the lowest-index tie rule
    let dup: Vec<f32> = entries[7 * d..8 * d].to_vec();
    entries[300 * d..301 * d].copy_from_slice(&dup);
    let book = Codebook::from_entries("q", d, entries.clone());
    let queries = 100_000;
    let mut mismatches = 0;
    let mut near = 0;
    for chunk in 0..queries / 1000 {
        let mut data = Vec::with_capacity(1000 * d);
        for i in 0..1000 {
            if (chunk * 1000 + i) % 4 == 0 {
                // a perturbed entry: nearly tied candidates
                let e = r.gen_range(0..k);
                near += 1;
                data.extend(entries[e * d..(e + 1) * d].iter().map(|v| v + r.gen_range(-1e-3..1e-3)));
            } else {
                data.extend((0..d).map(|_| r.gen_range(-1.0f32..1.0)));
            }
        }
        let field = LatentField {
            dims: [1000, 1, 1],
            channels: d,
            data,
        };
        let (tokens, _) = quantize(&field, &book).map_err(|e| e.to_string())?;
        for i in 0..1000 {
            let z = &field.data[i * d..(i + 1) * d];
            let mut best = (f64::INFINITY, 0usize);
            for e in 0..k {
                let dist: f64 = z
                    .iter()
                    .zip(&entries[e * d..(e + 1) * d])
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, e);
                }
            }
            if tokens.tokens[i] as usize != best.1 {
                mismatches += 1;
            }
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} of {queries} indices differ"))?;
    Ok(format!("{queries} queries ({near} near-entry), K={k}, D={d}, all indices equal"))
}

// ---------------------------------------------------------------- 6

fn recon_miou(codec: &VqCodec, grids: &[SemanticVoxelGrid]) -> Result<f64, String> {
    let recs = grids
        .iter()
        .map(|g| codec.reconstruct(g))
        .collect::<occsplat::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    pooled_miou(recs.iter().zip(grids)).map_err(|e| e.to_string())
}

fn vae_overfit() -> Outcome {
    let t = Instant::now();
    let grid = generate_sequence(&SceneConfig {
        seed: 6,
        ..SceneConfig::default()
    })
    .map_err(|e| e.to_string())?
    .frames
    .remove(0);
    let copies = vec![grid.clone(); 30];
    let cfg = VaeConfig {
        steps: 500,
        ..VaeConfig::default()
    };
    let (mut codec, _) = train_codec(&copies, CodecKind::AirMask, &cfg).map_err(|e| e.to_string())?;
    let mut steps = cfg.steps;
    let mut m = recon_miou(&codec, std::slice::from_ref(&grid))?;
    while m < 1.0 && steps < 2000 {
        continue_training(&mut codec, &copies, 500).map_err(|e| e.to_string())?;
        steps += 500;
        m = recon_miou(&codec, std::slice::from_ref(&grid))?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(m == 1.0, || format!("mIoU {m:.4} after {steps} steps"))?;
    ensure(secs < 600.0, || format!("took {secs:.0} s"))?;
    Ok(format!("mIoU 1.0 after {steps} steps, {secs:.0} s"))
}

// ---------------------------------------------------------------- 7

fn ablation_direction() -> Outcome {
    let seqs = generate_dataset(
        &SceneConfig {
            seed: 7,
            ..SceneConfig::default()
        },
        50,
    )
    .map_err(|e| e.to_string())?;
    let grids: Vec<SemanticVoxelGrid> = seqs.into_iter().map(|mut s| s.frames.remove(0)).collect();
    let cfg = VaeConfig {
        steps: 600,
        ..VaeConfig::default()
    };
    let (masked, _) = train_codec(&grids, CodecKind::AirMask, &cfg).map_err(|e| e.to_string())?;
    let (single, _) = train_codec(&grids, CodecKind::SingleBranch, &cfg).map_err(|e| e.to_string())?;
    let (a, b) = (recon_miou(&masked, &grids)?, recon_miou(&single, &grids)?);
    ensure(a >= b, || format!("air-mask {a:.4} < single-branch {b:.4}"))?;
    Ok(format!("50 grids, {} steps: air-mask mIoU {a:.4} >= single-branch {b:.4}", cfg.steps))
}

// ---------------------------------------------------------------- 8

fn causality() -> Outcome {
    let mut r = rng(8);
    let mut compared = 0usize;
    for trial in 0..50 {
        let cfg = WorldConfig {
            scales: r.gen_range(1..=3),
            embed_dim: 8,
            token_width: 3,
            heads: 2,
            layers: r.gen_range(1..=2),
            context: 6,
            seed: trial,
            ..WorldConfig::default()
        };
        let dims = [r.gen_range(2..=5), r.gen_range(2..=5), r.gen_range(1..=2)];
        let k = 7;
        let model = WorldModel::new(cfg.clone(), dims, k).map_err(|e| e.to_string())?;
        let sites = dims.iter().product::<usize>();
        let time = r.gen_range(2..=cfg.context);
        let frame = |r: &mut ChaCha8Rng| FrameInput {
            air: (0..sites).map(|_| r.gen_range(0..k as u16)).collect(),
            nonair: (0..sites).map(|_| r.gen_range(0..k as u16)).collect(),
            prev_disp: [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)],
        };
        let inputs: Vec<FrameInput> = (0..time).map(|_| frame(&mut r)).collect();
        let tau = r.gen_range(0..time - 1);
        let mut changed = inputs.clone();
        for f in changed.iter_mut().skip(tau + 1) {
            *f = frame(&mut r);
        }
        let a = model.forward(&inputs).map_err(|e| e.to_string())?;
        let b = model.forward(&changed).map_err(|e| e.to_string())?;
        // logits are per column, with every height's pair of distributions side by side
        let columns = dims[0] * dims[1];
        let width = 2 * dims[2] * k;
        ensure(a.logits.len() == columns * time * width, || format!("trial {trial}: logits shape"))?;
        for s in 0..columns {
            for t in 0..=tau {
                let at = (s * time + t) * width;
                ensure(a.logits[at..at + width] == b.logits[at..at + width], || {
                    format!("trial {trial}: logits at site {s}, t={t} <= tau={tau} changed")
                })?;
                compared += width;
            }
        }
        ensure(a.ego[..2 * (tau + 1)] == b.ego[..2 * (tau + 1)], || format!("trial {trial}: ego output changed"))?;
        for (scale, (ha, hb)) in a.hidden.iter().zip(&b.hidden).enumerate() {
            let e = cfg.embed_dim;
            let seqs = ha.len() / (time * e);
            for q in 0..seqs {
                let at = q * time * e;
                ensure(ha[at..at + (tau + 1) * e] == hb[at..at + (tau + 1) * e], || {
                    format!("trial {trial}: scale {scale} state changed before tau")
                })?;
                compared += (tau + 1) * e;
            }
        }
    }
    Ok(format!("50 trials, {compared} outputs at t <= tau bit-identical"))
}

// ---------------------------------------------------------------- 9

fn lovasz_correctness() -> Outcome {
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = r.gen_range(1..200);
        let fg_rate = r.gen_range(0.0..1.0);
        let flip = r.gen_range(0.0..0.6);
        let fg: Vec<bool> = (0..n).map(|_| r.gen_bool(fg_rate)).collect();
        let pred: Vec<bool> = fg.iter().map(|f| if r.gen_bool(flip) { !f } else { *f }).collect();
        let probs: Vec<f64> = pred.iter().map(|p| if *p { 1.0 } else { 0.0 }).collect();
        let inter = pred.iter().zip(&fg).filter(|(p, f)| **p && **f).count();
        let union = pred.iter().zip(&fg).filter(|(p, f)| **p || **f).count();
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let loss = lovasz_binary(&probs, &fg);
        worst = worst.max((loss - (1.0 - iou)).abs());
        let perfect: Vec<f64> = fg.iter().map(|f| if *f { 1.0 } else { 0.0 }).collect();
        ensure(lovasz_binary(&perfect, &fg) == 0.0, || format!("case {case}: perfect binary loss nonzero"))?;

        let classes = r.gen_range(2..6);
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..classes as u8)).collect();
        let mut onehot = vec![0.0; n * classes];
        for (i, l) in labels.iter().enumerate() {
            onehot[i * classes + *l as usize] = 1.0;
        }
        ensure(lovasz_softmax(&onehot, classes, &labels) == 0.0, || {
            format!("case {case}: perfect softmax loss nonzero")
        })?;
    }
    ensure(worst <= 1e-9, || format!("max |loss - (1 - IoU)| = {worst:.3e}"))?;
    Ok(format!("1000 cases, max |loss - (1 - IoU)| = {worst:.1e}, perfect predictions give 0"))
}

// ---------------------------------------------------------------- 10

/// Static set: every frame of a sequence is the same grid.
fn static_set() -> SceneConfig {
    SceneConfig {
        seed: 200,
        static_obstacles: 6,
        ..SceneConfig::default()
    }
}

fn moving_set() -> SceneConfig {
    SceneConfig {
        seed: 100,
        static_obstacles: 4,
        moving_obstacles: 3,
        obstacle_speed: 2,
        ..SceneConfig::default()
    }
}

fn forecast_run(base: &SceneConfig, vae_steps: usize, stage1: usize, world_steps: usize) -> Result<occsplat::metrics::EvalReport, String> {
    let seqs = generate_dataset(base, 10).map_err(|e| e.to_string())?;
    let grids: Vec<SemanticVoxelGrid> = seqs.iter().flat_map(|s| s.frames.iter().cloned()).collect();
    let vc = VaeConfig {
        steps: vae_steps,
        ..VaeConfig::default()
    };
    let (mut codec, _) = train_codec(&grids, CodecKind::AirMask, &vc).map_err(|e| e.to_string())?;
    let wc = WorldConfig {
        stage1_steps: stage1,
        steps: world_steps,
        ..WorldConfig::default()
    };
    stage1_train(&mut codec, &grids, wc.lambda_lovasz, wc.stage1_steps).map_err(|e| e.to_string())?;
    let (model, _) = stage2_train(&seqs, &codec, &wc).map_err(|e| e.to_string())?;
    evaluate(&model, &codec, &seqs, 2).map_err(|e| e.to_string())
}

fn world_model_overfit() -> Outcome {
    let t = Instant::now();
    let s = forecast_run(&static_set(), 1500, 100, 400)?;
    ensure(s.miou.marks == [1.0; 3], || format!("static mIoU {:?}", s.miou.marks))?;
    let m = forecast_run(&moving_set(), 1200, 200, 500)?;
    let base = m.baseline_miou.ok_or("no baseline")?.avg;
    let secs = t.elapsed().as_secs_f64();
    ensure(m.miou.avg > base, || format!("moving mIoU {:.4} <= copy-paste {base:.4}", m.miou.avg))?;
    ensure(secs < 1800.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "static mIoU 1.0 at 1s/2s/3s; moving avg mIoU {:.4} vs copy-paste {base:.4}; {secs:.0} s",
        m.miou.avg
    ))
}

// ---------------------------------------------------------------- 11

fn metrics_oracle() -> Outcome {
    let grid = |labels: Vec<u8>| SemanticVoxelGrid::new([2, 2, 1], 1.0, [0.0; 3], 3, labels).unwrap();
    let all: Vec<Vec<u8>> = (0..81usize)
        .map(|code| (0..4).map(|i| ((code / 3usize.pow(i)) % 3) as u8).collect())
        .collect();
    let mut pairs = 0;
    for p in &all {
        for g in &all {
            let (pg, gg) = (grid(p.clone()), grid(g.clone()));
            let mut ious = Vec::new();
            for c in 1..3u8 {
                let inter = p.iter().zip(g).filter(|(a, b)| **a == c && **b == c).count();
                let union = p.iter().zip(g).filter(|(a, b)| **a == c || **b == c).count();
                if union > 0 {
                    ious.push(inter as f64 / union as f64);
                }
            }
            let want = if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
            let got = miou(&pg, &gg, None).unwrap().1;
            ensure(got == want, || format!("mIoU {p:?} vs {g:?}: {got} != {want}"))?;
            let inter = p.iter().zip(g).filter(|(a, b)| **a != 0 && **b != 0).count();
            let union = p.iter().zip(g).filter(|(a, b)| **a != 0 || **b != 0).count();
            let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            let got = binary_iou(&pg, &gg).unwrap();
            ensure(got == want, || format!("IoU {p:?} vs {g:?}: {got} != {want}"))?;
            pairs += 1;
        }
    }

    // L2 over every pair of 6-step trajectories drawn from a small alphabet
    let steps = [[0.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.5, 0.5]];
    let mut r = rng(11);
    for _ in 0..2000 {
        let pd: Vec<[f64; 2]> = (0..6).map(|_| steps[r.gen_range(0..4)]).collect();
        let gd: Vec<[f64; 2]> = (0..6).map(|_| steps[r.gen_range(0..4)]).collect();
        let got = l2_trajectory(&pd, &gd).unwrap();
        for (k, mark) in [2usize, 4, 6].iter().enumerate() {
            let (mut px, mut py, mut gx, mut gy) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..*mark {
                px += pd[i][0];
                py += pd[i][1];
                gx += gd[i][0];
                gy += gd[i][1];
            }
            let want = ((px - gx) * (px - gx) + (py - gy) * (py - gy)).sqrt();
            ensure(got.marks[k] == want, || format!("L2 at mark {mark}: {} != {want}", got.marks[k]))?;
        }
    }

    // collisions: every 2x2x1 labeling, positions on a quarter-voxel lattice
    let obstacles = ClassSet::new([1]).unwrap();
    let footprint = [1.5, 1.0];
    let mut checks = 0;
    for labels in &all {
        let g = grid(labels.clone());
        let mut positions = Vec::new();
        let mut hits = 0;
        for ix in -4..=12 {
            for iy in -4..=12 {
                let pos = [ix as f64 * 0.25, iy as f64 * 0.25];
                let (lo, hi) = (
                    [pos[0] - footprint[0] / 2.0, pos[1] - footprint[1] / 2.0],
                    [pos[0] + footprint[0] / 2.0, pos[1] + footprint[1] / 2.0],
                );
                let mut want = false;
                for x in 0..2 {
                    for y in 0..2 {
                        let (cx, cy) = (x as f64, y as f64);
                        let overlaps = cx < hi[0] && cx + 1.0 > lo[0] && cy < hi[1] && cy + 1.0 > lo[1];
                        if overlaps && labels[y * 2 + x] == 1 {
                            want = true;
                        }
                    }
                }
                ensure(collides(pos, &g, footprint, &obstacles) == want, || {
                    format!("collision at {pos:?} in {labels:?}")
                })?;
                hits += usize::from(want);
                positions.push(pos);
                checks += 1;
            }
        }
        let rate = collision_rate(&positions, &vec![g.clone(); positions.len()], footprint, &obstacles).unwrap();
        let want = hits as f64 / positions.len() as f64;
        ensure(rate == want, || format!("collision rate {rate} != {want}"))?;
    }
    Ok(format!("{pairs} grid pairs, 2000 trajectory pairs, {checks} footprint placements match"))
}

// ---------------------------------------------------------------- 12

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_persistence() -> Outcome {
    let e = |e: occsplat::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n);
    let base = SceneConfig {
        dims: [16, 16, 8],
        static_obstacles: 3,
        moving_obstacles: 2,
        ego_speed_mps: 2.0,
        seed: 12,
        ..SceneConfig::default()
    };
    let spec = ImageSpec {
        width: 32,
        height: 24,
        focal_px: 20.0,
        near: 0.1,
    };

    // data generation and sequence persistence
    let seqs = generate_dataset(&base, 2).map_err(e)?;
    ensure(seqs == generate_dataset(&base, 2).map_err(e)?, || "dataset differs between runs".into())?;
    let rig = generate_rig(4, 1.0, 1.5, &spec).map_err(e)?;
    save_dataset(&p("a"), &seqs, &rig).map_err(e)?;
    save_dataset(&p("b"), &seqs, &rig).map_err(e)?;
    ensure(snapshot(&p("a")) == snapshot(&p("b")), || "dataset files differ".into())?;
    ensure(load_dataset(&p("a")).map_err(e)? == seqs, || "dataset round trip".into())?;

    // grid, rig, trajectory, image and token files
    let g = &seqs[1].frames[3];
    save_grid(&p("g.occ"), g).map_err(e)?;
    let g2 = load_grid(&p("g.occ")).map_err(e)?;
    ensure(&g2 == g && g2.to_bytes() == std::fs::read(p("g.occ")).unwrap(), || ".occ round trip".into())?;
    save_rig(&p("rig.json"), &rig).map_err(e)?;
    ensure(load_rig(&p("rig.json")).map_err(e)? == rig, || "rig round trip".into())?;
    let traj = Trajectory {
        dt_s: 0.5,
        displacements_m: vec![[0.1 + 0.2, -1.0 / 3.0], [1e-17, 12345.678901234567]],
    };
    save_trajectory(&p("t.json"), &traj).map_err(e)?;
    ensure(load_trajectory(&p("t.json")).map_err(e)? == traj, || "trajectory round trip".into())?;
    let depth: Vec<f64> = (0..12).map(|i| f64::from(i as f32 * 0.37)).collect();
    let (w, h, back) = decode_pfm(&encode_pfm(4, 3, &depth)).map_err(e)?;
    ensure(
        (w, h) == (4, 3) && back.iter().zip(&depth).all(|(a, b)| f64::from(*a).to_bits() == b.to_bits()),
        || "PFM round trip".into(),
    )?;
    let labels: Vec<u8> = (0..12).map(|i| (i % 17) as u8).collect();
    ensure(
        decode_pgm(&encode_pgm(4, 3, &labels, 17)).map_err(e)? == (4, 3, labels.clone()),
        || "PGM round trip".into(),
    )?;

    // image-to-occupancy fitting
    let fit_cfg = Img2OccConfig {
        steps: 5,
        ..Img2OccConfig::default()
    };
    let f1 = train_img2occ(&seqs[0].frames[0], &rig, &fit_cfg).map_err(e)?;
    let f2 = train_img2occ(&seqs[0].frames[0], &rig, &fit_cfg).map_err(e)?;
    let j = gaussians_to_json(&f1.gaussians);
    ensure(j == gaussians_to_json(&f2.gaussians) && f1.occupancy == f2.occupancy, || {
        "img2occ differs between runs".into()
    })?;
    ensure(gaussians_from_json(&j).map_err(e)? == f1.gaussians, || "gaussian round trip".into())?;

    // tokenizer, stage 1, stage 2, forecast, evaluation
    let grids: Vec<SemanticVoxelGrid> = seqs.iter().flat_map(|s| s.frames.iter().cloned()).collect();
    let vc = VaeConfig {
        codebook_size: 32,
        latent_dim: 16,
        hidden: 8,
        steps: 20,
        ..VaeConfig::default()
    };
    let wc = WorldConfig {
        embed_dim: 16,
        token_width: 4,
        heads: 2,
        layers: 1,
        steps: 10,
        stage1_steps: 5,
        ..WorldConfig::default()
    };
    let mut runs = Vec::new();
    for run in ["r1", "r2"] {
        std::fs::create_dir_all(p(&format!("{run}/again"))).map_err(|e| e.to_string())?;
        let (mut codec, _) = train_codec(&grids, CodecKind::AirMask, &vc).map_err(e)?;
        codec.save(&p(&format!("{run}/vae.json"))).map_err(e)?;
        stage1_train(&mut codec, &grids, wc.lambda_lovasz, wc.stage1_steps).map_err(e)?;
        codec.save(&p(&format!("{run}/s1.json"))).map_err(e)?;
        let (model, _) = stage2_train(&seqs, &codec, &wc).map_err(e)?;
        model.save(&p(&format!("{run}/world.json"))).map_err(e)?;
        let f = model.forecast(&codec, &seqs[0].frames[..2], &seqs[0].displacements[..1], 6).map_err(e)?;
        let report = evaluate(&model, &codec, &seqs, 2).map_err(e)?;
        let tokens = codec.encode_scene(g).map_err(e)?;
        save_tokens(&p(&format!("{run}/scene.tok")), &tokens).map_err(e)?;
        ensure(load_tokens(&p(&format!("{run}/scene.tok"))).map_err(e)? == tokens, || "token round trip".into())?;
        runs.push((f.displacements(), f.grids, report.to_json()));
        // reload and re-save: identical bytes
        let codec2 = VqCodec::load(&p(&format!("{run}/s1.json"))).map_err(e)?;
        codec2.save(&p(&format!("{run}/again/s1.json"))).map_err(e)?;
        let model2 = WorldModel::load(&p(&format!("{run}/world.json"))).map_err(e)?;
        model2.save(&p(&format!("{run}/again/world.json"))).map_err(e)?;
        ensure(
            model2.forecast(&codec2, &seqs[0].frames[..2], &seqs[0].displacements[..1], 6).map_err(e)?.grids
                == runs.last().unwrap().1,
            || "reloaded checkpoints forecast differently".into(),
        )?;
    }
    let same = |a: &str, b: &str| std::fs::read(p(a)).unwrap() == std::fs::read(p(b)).unwrap();
    for (a, b) in [
        ("r1/vae.json", "r2/vae.json"),
        ("r1/vae.bin", "r2/vae.bin"),
        ("r1/s1.json", "r2/s1.json"),
        ("r1/s1.bin", "r2/s1.bin"),
        ("r1/world.json", "r2/world.json"),
        ("r1/world.bin", "r2/world.bin"),
        ("r1/scene.tok", "r2/scene.tok"),
        ("r1/s1.json", "r1/again/s1.json"),
        ("r1/s1.bin", "r1/again/s1.bin"),
        ("r1/world.json", "r1/again/world.json"),
        ("r1/world.bin", "r1/again/world.bin"),
    ] {
        ensure(same(a, b), || format!("{a} and {b} differ"))?;
    }
    ensure(runs[0] == runs[1], || "forecast or report differs between runs".into())?;
    Ok("every stage repeats byte for byte; .occ, .tok, rig, trajectory, PFM, PGM, gaussian and checkpoint files round-trip".into())
}

// ----------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient fidelity", gradient_fidelity),
        ("compositing oracle", compositing_oracle),
        ("covariance algebra", covariance_algebra),
        ("mask algebra identity", mask_algebra),
        ("quantizer oracle", quantizer_oracle),
        ("AM-VAE overfit", vae_overfit),
        ("ablation direction", ablation_direction),
        ("causality", causality),
        ("Lovasz correctness", lovasz_correctness),
        ("world-model overfit", world_model_overfit),
        ("metrics oracle", metrics_oracle),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if let Some(sel) = &only {
            if !sel.split(',').any(|s| s.trim().parse() == Ok(id)) {
                continue;
            }
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = Duration::from_secs_f64(t.elapsed().as_secs_f64());
        // written straight to the stream so it shows without --nocapture
        let line = match &outcome {
            Ok(detail) => format!("acceptance {id:>2} PASS {name}: {detail} [{took:.1?}]\n"),
            Err(why) => format!("acceptance {id:>2} FAIL {name}: {why} [{took:.1?}]\n"),
        };
        let _ = err.write_all(line.as_bytes());
        if outcome.is_err() {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
