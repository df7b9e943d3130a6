//! Run manifests and the CLI error type.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tempro_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Files and directories created by a command, removed again if it fails.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    /// Creates `dir` (and parents); only directories that did not exist are
    /// removed on failure.
    pub fn dir(&mut self, dir: &Path) -> CliResult<()> {
        let mut missing = Vec::new();
        let mut p = Some(dir);
        while let Some(d) = p {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            p = d.parent();
        }
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        // Outermost first, so a single remove_dir_all cleans everything.
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    /// Registers a file about to be written; its parent directory is created.
    pub fn file(&mut self, path: &Path) -> CliResult<PathBuf> {
        if let Some(parent) = path.parent() {
            self.dir(parent)?;
        }
        self.files.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    pub fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.file(path)?;
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn extend(&mut self, paths: impl IntoIterator<Item = PathBuf>) {
        self.files.extend(paths);
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn cleanup(&self) {
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        if let Some(top) = self.dirs.first() {
            let _ = fs::remove_dir_all(top);
        }
        for d in self.dirs.iter().skip(1) {
            let _ = fs::remove_dir_all(d);
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<Value>,
}

/// What a finished command reports back for its manifest.
pub struct Finished {
    pub manifest_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub model: Option<Value>,
    /// Printed on stdout after the manifest is written.
    pub stdout: Option<String>,
}

pub struct Run {
    pub command: &'static str,
    pub config: Value,
    pub threads: usize,
    pub started: Instant,
    pub outputs: Outputs,
}

impl Run {
    pub fn new(command: &'static str, config: Value, threads: usize) -> Self {
        Run {
            command,
            config,
            threads,
            started: Instant::now(),
            outputs: Outputs::default(),
        }
    }

    pub fn manifest(&self, f: &Finished) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            seed: f.seed,
            threads: self.threads,
            inputs: f.inputs.clone(),
            outputs: self.outputs.files().to_vec(),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            model: f.model.clone(),
        }
    }
}
