//! Output directory bookkeeping: deterministic names, atomic write-once
//! files, and `.partial` renaming when a command fails halfway.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};
use soada::io::atomic_write;

use crate::config::RunConfig;

pub struct Outputs {
    dir: PathBuf,
    stem: String,
    written: Vec<PathBuf>,
}

/// First twelve hex digits of the SHA-256 of the effective configuration.
pub fn config_hash(cfg: &RunConfig) -> String {
    let text = toml::to_string(cfg).expect("config serializes");
    Sha256::digest(text.as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

impl Outputs {
    pub fn new(dir: &Path, command: &str, cfg: &RunConfig) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            stem: format!("{command}-{}-s{}", config_hash(cfg), cfg.seed),
            written: Vec::new(),
        })
    }

    /// `<dir>/<command>-<hash>-s<seed>-<suffix>`
    pub fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}-{suffix}", self.stem))
    }

    pub fn record(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    pub fn write_bytes(&mut self, suffix: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.path(suffix);
        atomic_write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(path.clone());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, suffix: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(suffix, &bytes)
    }

    pub fn write_csv<T: Serialize>(&mut self, suffix: &str, rows: &[T]) -> anyhow::Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write_bytes(suffix, &bytes)
    }

    /// Snapshot pair `<stem>-<suffix>.json` / `.f64`.
    pub fn write_snapshot(
        &mut self,
        suffix: &str,
        grid: &soada::PfGrid,
        time: f64,
        field: &[f64],
        m: Option<f64>,
    ) -> anyhow::Result<PathBuf> {
        let base = self.path(suffix);
        let header = soada::io::write_snapshot(&base, grid, time, field, m)?;
        self.record(base.with_extension("f64"));
        self.record(header.clone());
        Ok(header)
    }

    pub fn write_series(
        &mut self,
        suffix: &str,
        obs: &soada::ObservationSeries,
        grid: Option<&soada::PfGrid>,
    ) -> anyhow::Result<PathBuf> {
        let base = self.path(suffix);
        let header = soada::io::write_series(&base, obs, grid)?;
        self.record(base.with_extension("f64"));
        self.record(header.clone());
        Ok(header)
    }

    /// Marks everything written so far as incomplete.
    pub fn mark_partial(&self) {
        for path in &self.written {
            let mut name = path.as_os_str().to_owned();
            name.push(".partial");
            let _ = std::fs::rename(path, PathBuf::from(name));
        }
    }
}
