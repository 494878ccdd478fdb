//! Output directory plumbing: resolved config, input hashes, timestamps.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// SHA-256 of a file, or of every file under a directory in path order
/// (relative path and contents both hashed). `metadata.json` files are
/// skipped since they hold timestamps.
pub fn hash_input(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let files: Vec<PathBuf> = WalkDir::new(path)
            .sort_by_file_name()
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file() && e.file_name() != "metadata.json")
            .map(|e| e.into_path())
            .collect();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            hash_file(&f, &mut h)?;
        }
    } else {
        hash_file(path, &mut h)?;
    }
    Ok(hex::encode(h.finalize()))
}

fn hash_file(path: &Path, h: &mut Sha256) -> CliResult<()> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            return Ok(());
        }
        h.update(&buf[..n]);
    }
}

fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// An output directory being written by one subcommand.
pub struct OutDir {
    pub root: PathBuf,
    command: String,
    started: f64,
    workers: usize,
}

impl OutDir {
    /// Creates `root` and writes `config.json` with the resolved config, the
    /// subcommand arguments and a hash of every input.
    pub fn create(
        root: &Path,
        command: &str,
        args: &impl Serialize,
        config: &ExperimentConfig,
        inputs: &[(&str, &Path)],
        workers: usize,
    ) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let mut hashes = BTreeMap::new();
        for (name, p) in inputs {
            hashes.insert(name.to_string(), json!({ "path": p, "sha256": hash_input(p)? }));
        }
        let doc = json!({
            "command": command,
            "args": args,
            "config": config,
            "inputs": hashes,
        });
        let out = Self {
            root: root.to_path_buf(),
            command: command.into(),
            started: unix_time(),
            workers,
        };
        out.write_json("config.json", &doc)?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("json serialization cannot fail");
        text.push('\n');
        self.write(name, text)
    }

    /// Writes `metadata.json`, the only file that carries wall-clock times.
    pub fn finish(self) -> CliResult<()> {
        self.write_json(
            "metadata.json",
            &json!({
                "command": self.command,
                "version": env!("CARGO_PKG_VERSION"),
                "workers": self.workers,
                "started_unix_s": self.started,
                "finished_unix_s": unix_time(),
            }),
        )
    }
}
