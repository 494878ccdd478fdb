//! Experiment configuration: one JSON document covering every stage.

use std::path::Path;

use occsplat::am_vae::VaeConfig;
use occsplat::harness::{ImageSpec, SceneConfig};
use occsplat::img2occ::Img2OccConfig;
use occsplat::metrics::CollisionCounting;
use occsplat::world::WorldConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub cameras: usize,
    pub radius_m: f64,
    pub height_m: f64,
    pub image: ImageSpec,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 6,
            radius_m: 1.0,
            height_m: 1.5,
            image: ImageSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sequences: usize,
    pub scene: SceneConfig,
    pub rig: RigConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sequences: 10,
            scene: SceneConfig::default(),
            rig: RigConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Observed frames before the forecast starts.
    pub history: usize,
    pub horizon: usize,
    /// `per-mark` or `cumulative`.
    pub collision: CollisionCounting,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            history: 2,
            horizon: 6,
            collision: CollisionCounting::PerMark,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub img2occ: Img2OccConfig,
    pub vae: VaeConfig,
    pub world: WorldConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults), applies `key.path=value` overrides and
    /// validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::Parse {
                    field: String::new(),
                    message: format!("{}: {e}", p.display()),
                })?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(doc).map_err(|e| CliError::Parse {
            field: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.data.scene.seed = seed;
        self.img2occ.seed = seed;
        self.vae.seed = seed;
        self.world.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        let scoped = |section: &str, r: occsplat::Result<()>| {
            r.map_err(|e| match e {
                occsplat::Error::Config { field, message } => CliError::Parse {
                    field: format!("{section}.{field}"),
                    message,
                },
                other => CliError::Core(other),
            })
        };
        scoped("data.scene", self.data.scene.validate())?;
        scoped("img2occ", self.img2occ.validate())?;
        scoped("vae", self.vae.validate())?;
        scoped("world", self.world.validate())?;
        let bad = |field: &str, message: &str| {
            Err(CliError::Parse {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.data.sequences == 0 {
            return bad("data.sequences", "must be positive");
        }
        if self.data.rig.cameras == 0 {
            return bad("data.rig.cameras", "must be positive");
        }
        if self.eval.history == 0 {
            return bad("eval.history", "must be at least 1");
        }
        if self.eval.horizon == 0 {
            return bad("eval.horizon", "must be positive");
        }
        Ok(())
    }
}

/// Sets the dotted `path` in `doc` to `value`, parsed as JSON when possible
/// and as a string otherwise.
fn apply_override(doc: &mut Value, spec: &str) -> CliResult<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| CliError::Parse {
        field: spec.into(),
        message: "override must look like key.path=value".into(),
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| CliError::Parse {
            field: keys[..i].join("."),
            message: "not an object".into(),
        })?;
        if i + 1 == keys.len() {
            obj.insert((*key).into(), value);
            return Ok(());
        }
        node = obj.entry(*key).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
