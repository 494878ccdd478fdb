use std::path::{Path, PathBuf};

use occsplat::am_vae::{train_codec, CodecKind, TrainRecord, VqCodec};
use occsplat::gradcheck;
use occsplat::harness::{
    frame_path, generate_dataset, generate_rig, load_dataset, load_sequence, load_sequence_rig, save_dataset,
    save_trajectory, sequence_dir, SceneSequence, Trajectory,
};
use occsplat::img2occ::{loss_csv, save_gaussians, train_img2occ};
use occsplat::metrics::{miou, pooled_miou, score_forecasts_with, Prediction};
use occsplat::occupancy::save_grid;
use occsplat::world::{stage1_train, stage2_train, WorldModel, WorldRecord};
use occsplat::SemanticVoxelGrid;
use serde_json::json;
use tracing::info;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::OutDir;
use crate::{Command, Common, GradModule};

pub fn dispatch(common: &Common, command: &Command) -> CliResult<()> {
    let mut cfg = ExperimentConfig::resolve(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    match command {
        Command::GenData(a) => {
            if let Some(n) = a.sequences {
                cfg.data.sequences = n;
            }
        }
        Command::TrainImg2occ(a) => {
            if let Some(n) = a.steps {
                cfg.img2occ.steps = n;
            }
        }
        Command::TrainVae(a) => {
            if let Some(n) = a.steps {
                cfg.vae.steps = n;
            }
        }
        Command::TrainWorld(a) => {
            if let Some(n) = a.steps {
                cfg.world.steps = n;
            }
            if let Some(n) = a.stage1_steps {
                cfg.world.stage1_steps = n;
            }
        }
        Command::Forecast(a) => {
            if let Some(n) = a.horizon {
                cfg.eval.horizon = n;
            }
            if let Some(n) = a.history {
                cfg.eval.history = n;
            }
        }
        Command::Eval(a) => {
            if let Some(n) = a.history {
                cfg.eval.history = n;
            }
            if let Some(c) = a.collision {
                cfg.eval.collision = c.into();
            }
        }
        Command::Gradcheck(_) => {}
    }
    cfg.validate()?;
    let ctx = Ctx { common, cfg };
    match command {
        Command::GenData(_) => ctx.gen_data(command),
        Command::TrainImg2occ(a) => ctx.train_img2occ(command, &a.dataset, a.sequence, a.frame),
        Command::TrainVae(a) => ctx.train_vae(command, &a.dataset, a.no_air_mask),
        Command::TrainWorld(a) => ctx.train_world(command, &a.dataset, &a.vae),
        Command::Forecast(a) => ctx.forecast(command, &a.vae, &a.world, a.sequence.as_deref(), a.dataset.as_deref()),
        Command::Eval(a) => ctx.eval(command, &a.pred, &a.gt),
        Command::Gradcheck(a) => ctx.gradcheck(command, a.module),
    }
}

struct Ctx<'a> {
    common: &'a Common,
    cfg: ExperimentConfig,
}

fn name_of(command: &Command) -> &'static str {
    match command {
        Command::GenData(_) => "gen-data",
        Command::TrainImg2occ(_) => "train-img2occ",
        Command::TrainVae(_) => "train-vae",
        Command::TrainWorld(_) => "train-world",
        Command::Forecast(_) => "forecast",
        Command::Eval(_) => "eval",
        Command::Gradcheck(_) => "gradcheck",
    }
}

fn all_frames(seqs: &[SceneSequence]) -> Vec<SemanticVoxelGrid> {
    seqs.iter().flat_map(|s| s.frames.iter().cloned()).collect()
}

/// Logs about ten evenly spaced points of a training curve.
fn log_curve<T>(stage: &str, records: &[T], loss: impl Fn(&T) -> f64) {
    let every = (records.len() / 10).max(1);
    for (i, r) in records.iter().enumerate() {
        if i % every == 0 || i + 1 == records.len() {
            info!(stage, step = i, loss = loss(r));
        }
    }
}

fn vae_csv(records: &[TrainRecord]) -> String {
    let mut s = String::from("step,loss_total,loss_recon,loss_commit,loss_aux\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss.total, r.loss.recon, r.loss.commit, r.loss.aux
        ));
    }
    s
}

fn world_csv(records: &[WorldRecord]) -> String {
    let mut s = String::from("step,loss_total,token_ce,ego_l2\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss.total, r.loss.token_ce, r.loss.ego_l2));
    }
    s
}

fn recon_miou(codec: &VqCodec, grids: &[SemanticVoxelGrid]) -> CliResult<f64> {
    let recs = grids.iter().map(|g| codec.reconstruct(g)).collect::<occsplat::Result<Vec<_>>>()?;
    Ok(pooled_miou(recs.iter().zip(grids))?)
}

/// A single sequence directory holds `trajectory.json`; anything else is
/// read as a dataset root.
fn load_any(path: &Path) -> CliResult<Vec<SceneSequence>> {
    if path.join("trajectory.json").exists() {
        Ok(vec![load_sequence(path)?])
    } else {
        Ok(load_dataset(path)?)
    }
}

impl Ctx<'_> {
    fn out(&self, command: &Command, inputs: &[(&str, &Path)]) -> CliResult<OutDir> {
        let root = self
            .common
            .out
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{} needs --out", name_of(command))))?;
        let mut all: Vec<(&str, &Path)> = inputs.to_vec();
        if let Some(c) = self.common.config.as_deref() {
            all.push(("config", c));
        }
        OutDir::create(
            root,
            name_of(command),
            command,
            &self.cfg,
            &all,
            self.common.workers.unwrap_or_else(rayon::current_num_threads),
        )
    }

    fn gen_data(&self, command: &Command) -> CliResult<()> {
        let d = &self.cfg.data;
        let seqs = generate_dataset(&d.scene, d.sequences)?;
        let rig = generate_rig(d.rig.cameras, d.rig.radius_m, d.rig.height_m, &d.rig.image)?;
        let out = self.out(command, &[])?;
        save_dataset(&out.root, &seqs, &rig)?;
        let frames: usize = seqs.iter().map(|s| s.frames.len()).sum();
        info!(stage = "gen-data", sequences = seqs.len(), frames);
        println!("wrote {} sequences ({frames} frames) to {}", seqs.len(), out.root.display());
        out.finish()
    }

    fn train_img2occ(&self, command: &Command, dataset: &Path, only: Option<usize>, frame: usize) -> CliResult<()> {
        let seqs = load_dataset(dataset)?;
        let indices: Vec<usize> = match only {
            Some(i) if i >= seqs.len() => {
                return Err(CliError::Usage(format!("sequence {i} not in a dataset of {}", seqs.len())))
            }
            Some(i) => vec![i],
            None => (0..seqs.len()).collect(),
        };
        let out = self.out(command, &[("dataset", dataset)])?;
        let mut rows = Vec::new();
        for i in indices {
            let gt = seqs[i]
                .frames
                .get(frame)
                .ok_or_else(|| CliError::Usage(format!("sequence {i} has no frame {frame}")))?;
            let rig = load_sequence_rig(&sequence_dir(dataset, i))?;
            let fit = train_img2occ(gt, &rig, &self.cfg.img2occ)?;
            let dir = sequence_dir(&out.root, i);
            std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            save_gaussians(&dir.join("gaussians.json"), &fit.gaussians)?;
            save_grid(&dir.join("occupancy.occ"), &fit.occupancy)?;
            let csv = dir.join("loss.csv");
            std::fs::write(&csv, loss_csv(&fit.curve)).map_err(|e| CliError::io(&csv, e))?;
            log_curve("img2occ", &fit.curve, |r| r.loss_total);
            let before = miou(&fit.candidate, gt, None)?.1;
            let after = miou(&fit.occupancy, gt, None)?.1;
            println!("seq {i:04}: candidate mIoU {:.4} -> fitted {:.4}", before, after);
            rows.push(json!({ "sequence": i, "frame": frame, "candidate_miou": before, "fitted_miou": after }));
        }
        out.write_json("summary.json", &rows)?;
        out.finish()
    }

    fn train_vae(&self, command: &Command, dataset: &Path, no_air_mask: bool) -> CliResult<()> {
        let grids = all_frames(&load_dataset(dataset)?);
        let kind = if no_air_mask {
            CodecKind::SingleBranch
        } else {
            CodecKind::AirMask
        };
        let out = self.out(command, &[("dataset", dataset)])?;
        let (codec, curve) = train_codec(&grids, kind, &self.cfg.vae)?;
        log_curve("vae", &curve, |r| r.loss.total);
        codec.save(&out.path("vae.json"))?;
        out.write("loss.csv", vae_csv(&curve))?;
        let m = recon_miou(&codec, &grids)?;
        out.write_json("summary.json", &json!({ "kind": kind, "grids": grids.len(), "recon_miou": m }))?;
        println!("{kind:?} codec on {} grids: reconstruction mIoU {m:.4}", grids.len());
        out.finish()
    }

    fn train_world(&self, command: &Command, dataset: &Path, vae: &Path) -> CliResult<()> {
        let seqs = load_dataset(dataset)?;
        let grids = all_frames(&seqs);
        let mut codec = VqCodec::load(vae)?;
        let out = self.out(command, &[("dataset", dataset), ("vae", vae)])?;
        let w = &self.cfg.world;
        let s1 = stage1_train(&mut codec, &grids, w.lambda_lovasz, w.stage1_steps)?;
        log_curve("stage1", &s1, |r| r.loss.total);
        codec.save(&out.path("vae_stage1.json"))?;
        out.write("stage1_loss.csv", vae_csv(&s1))?;
        let (model, curve) = stage2_train(&seqs, &codec, w)?;
        log_curve("stage2", &curve, |r| r.loss.total);
        model.save(&out.path("world.json"))?;
        out.write("world_loss.csv", world_csv(&curve))?;
        let m = recon_miou(&codec, &grids)?;
        let last = curve.last().map(|r| r.loss);
        out.write_json(
            "summary.json",
            &json!({ "stage1_recon_miou": m, "final_world_loss": last }),
        )?;
        println!(
            "stage 1 reconstruction mIoU {m:.4}; stage 2 final loss {:.5}",
            last.map_or(f64::NAN, |l| l.total)
        );
        out.finish()
    }

    fn forecast(
        &self,
        command: &Command,
        vae: &Path,
        world: &Path,
        sequence: Option<&Path>,
        dataset: Option<&Path>,
    ) -> CliResult<()> {
        let codec = VqCodec::load(vae)?;
        let model = WorldModel::load(world)?;
        let (history, horizon) = (self.cfg.eval.history, self.cfg.eval.horizon);
        let mut inputs = vec![("vae", vae), ("world", world)];
        let jobs: Vec<(PathBuf, Option<usize>)> = match (sequence, dataset) {
            (Some(s), _) => {
                inputs.push(("sequence", s));
                vec![(s.to_path_buf(), None)]
            }
            (None, Some(d)) => {
                inputs.push(("dataset", d));
                let n = load_dataset(d)?.len();
                (0..n).map(|i| (sequence_dir(d, i), Some(i))).collect()
            }
            (None, None) => return Err(CliError::Usage("forecast needs --sequence or --dataset".into())),
        };
        let out = self.out(command, &inputs)?;
        for (dir, index) in jobs {
            let seq = load_sequence(&dir)?;
            if seq.frames.len() < history || seq.displacements.len() + 1 < history {
                return Err(CliError::Usage(format!(
                    "{} has {} frames, fewer than the history {history}",
                    dir.display(),
                    seq.frames.len()
                )));
            }
            let f = model.forecast(&codec, &seq.frames[..history], &seq.displacements[..history - 1], horizon)?;
            let target = index.map_or_else(|| out.root.clone(), |i| sequence_dir(&out.root, i));
            std::fs::create_dir_all(&target).map_err(|e| CliError::io(&target, e))?;
            for (t, g) in f.grids.iter().enumerate() {
                save_grid(&frame_path(&target, t), g)?;
            }
            save_trajectory(
                &target.join("trajectory.json"),
                &Trajectory {
                    dt_s: seq.frame_period_s,
                    displacements_m: f.displacements(),
                },
            )?;
            info!(stage = "forecast", sequence = %dir.display(), horizon);
        }
        println!("forecast {horizon} frames after {history} observed into {}", out.root.display());
        out.finish()
    }

    fn eval(&self, command: &Command, pred: &Path, gt: &Path) -> CliResult<()> {
        let history = self.cfg.eval.history;
        let gts = load_any(gt)?;
        let preds = load_any(pred)?;
        if preds.len() != gts.len() {
            return Err(CliError::Usage(format!(
                "{} forecast sequences for {} ground-truth sequences",
                preds.len(),
                gts.len()
            )));
        }
        // A prediction covering the whole sequence is scored on the frames
        // after the history, like a forecast.
        let preds: Vec<Prediction> = preds
            .into_iter()
            .zip(&gts)
            .map(|(p, g)| {
                if p.frames.len() == g.frames.len() && p.frames.len() > history {
                    Prediction {
                        grids: p.frames[history..].to_vec(),
                        displacements: p.displacements.get(history - 1..).unwrap_or_default().to_vec(),
                    }
                } else {
                    Prediction {
                        grids: p.frames,
                        displacements: p.displacements,
                    }
                }
            })
            .collect();
        let report = score_forecasts_with(&preds, &gts, history, self.cfg.eval.collision)?;
        let out = self.out(command, &[("pred", pred), ("gt", gt)])?;
        out.write("report.json", report.to_json() + "\n")?;
        let table = report.to_table();
        out.write("report.txt", &table)?;
        print!("{table}");
        out.finish()
    }

    fn gradcheck(&self, command: &Command, module: GradModule) -> CliResult<()> {
        let names: &[&str] = match module {
            GradModule::Splat => &["splat"],
            GradModule::Vae => &["vae"],
            GradModule::World => &["world"],
            GradModule::All => &["splat", "vae", "world"],
        };
        let seed = self.common.seed.unwrap_or(0);
        let mut reports = Vec::new();
        let mut failed = Vec::new();
        for name in names {
            let r = gradcheck::run(name, seed)?;
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict} {name}: {} cases, {} coordinates, max relative error {:.3e} (tolerance {:.0e}, {} re-probed)",
                r.cases, r.checked, r.max_rel_error, r.tolerance, r.refined
            );
            info!(stage = "gradcheck", module = *name, passed = r.passed(), max_rel_error = r.max_rel_error);
            if !r.passed() {
                failed.push(name.to_string());
            }
            reports.push(r);
        }
        if self.common.out.is_some() {
            let out = self.out(command, &[])?;
            out.write_json("report.json", &reports)?;
            out.finish()?;
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::GradcheckFailed(failed.join(", ")))
        }
    }
}
