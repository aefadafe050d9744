//! Output directory bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Class, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub options: serde_json::Value,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    /// sha256 of every input file, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every primary output, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

pub struct Run {
    out: PathBuf,
    started: Instant,
    started_unix: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    pub warnings: Vec<String>,
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(Class::Data, "io/error", format!("{}: {e}", path.display()))
}

impl Run {
    pub fn new(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Records the digest of an input file.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let digest = sha256_file(path).map_err(|e| io_error(path, e))?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Records the digests of the files of a dataset directory.
    pub fn input_dataset(&mut self, dir: &Path) -> Result<(), CliError> {
        for f in [mlta::io::INCIDENCE_FILE, mlta::io::DESIGN_FILE, mlta::io::DESIGN_META_FILE] {
            let p = dir.join(f);
            if p.exists() {
                self.input(&p)?;
            }
        }
        Ok(())
    }

    /// Marks a file already written into the output directory.
    pub fn produced(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> mlta::Result<()>,
    {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| io_error(&path, e))?);
        f(&mut w)?;
        w.flush().map_err(|e| io_error(&path, e))?;
        self.produced(name);
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        mlta::io::write_json(self.path(name), value)?;
        self.produced(name);
        Ok(())
    }

    pub fn dataset(&mut self, data: &mlta::Dataset) -> Result<(), CliError> {
        mlta::io::write_dataset(data, &self.out)?;
        for f in [mlta::io::INCIDENCE_FILE, mlta::io::DESIGN_FILE, mlta::io::DESIGN_META_FILE] {
            self.produced(f);
        }
        Ok(())
    }

    pub fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }

    /// Writes `manifest.json` next to the outputs.
    pub fn finish(self, cli: &crate::args::Cli, seed: Option<u64>) -> Result<(), CliError> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            let p = self.out.join(name);
            outputs.insert(name.clone(), sha256_file(&p).map_err(|e| io_error(&p, e))?);
        }
        let options = serde_json::to_value(&cli.command)
            .map_err(|e| CliError::new(Class::Config, "io/json", e.to_string()))?;
        let manifest = RunManifest {
            tool: "mlta",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: cli.command.name().to_string(),
            options,
            seed,
            jobs: cli.jobs,
            inputs: self.inputs,
            outputs,
            warnings: self.warnings,
            started_unix: self.started_unix,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        mlta::io::write_json(self.out.join(MANIFEST_FILE), &manifest)?;
        Ok(())
    }
}
