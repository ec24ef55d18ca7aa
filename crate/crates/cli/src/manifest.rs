//! Run manifests: every command records what it was asked to do and what it
//! produced. Reruns with equal inputs (command, config, seed, input files)
//! must reproduce every listed output byte for byte; timestamps are
//! informational and excluded from that contract.

use icae_core::error::Result;
use icae_core::rng::{fnv1a_update, FNV_OFFSET};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved config, rendered in its canonical text form.
    pub config: String,
    pub seed: u64,
    /// Content hash over command, config, seed, and every input file.
    pub inputs_hash: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub outputs: Vec<String>,
    #[serde(skip)]
    path: PathBuf,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Hash of the reproducibility-relevant inputs.
pub fn inputs_hash(command: &str, config: &str, seed: u64, input_files: &[&Path]) -> Result<String> {
    let mut h = FNV_OFFSET;
    h = fnv1a_update(h, command.as_bytes());
    h = fnv1a_update(h, config.as_bytes());
    h = fnv1a_update(h, &seed.to_le_bytes());
    for p in input_files {
        let bytes = std::fs::read(p)?;
        h = fnv1a_update(h, p.to_string_lossy().as_bytes());
        h = fnv1a_update(h, &bytes);
    }
    Ok(format!("{h:016x}"))
}

impl RunManifest {
    /// Writes the initial manifest (status "running") to `out/manifest.json`.
    pub fn start(
        out_dir: &Path,
        command: &str,
        config: &str,
        seed: u64,
        input_files: &[&Path],
    ) -> Result<RunManifest> {
        std::fs::create_dir_all(out_dir)?;
        let m = RunManifest {
            command: command.to_string(),
            config: config.to_string(),
            seed,
            inputs_hash: inputs_hash(command, config, seed, input_files)?,
            started_unix: now_unix(),
            finished_unix: None,
            status: "running".into(),
            outputs: Vec::new(),
            path: out_dir.join("manifest.json"),
        };
        m.write()?;
        Ok(m)
    }

    /// Marks the run complete and records its output paths.
    pub fn finish(mut self, outputs: &[&str]) -> Result<()> {
        self.finished_unix = Some(now_unix());
        self.status = "ok".into();
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self.write()
    }

    fn write(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&self.path, text)?;
        Ok(())
    }
}
