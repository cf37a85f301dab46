use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use dnas_core::Error;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 0 success, 1 runtime failure, 2 usage or configuration error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
            CliError::Engine(e) => match e {
                Error::Config(_)
                | Error::Schedule(_)
                | Error::Data { .. }
                | Error::IncompleteTable(_)
                | Error::MissingLatency(_)
                | Error::Serde(_) => 2,
                Error::Dimension { .. }
                | Error::Domain { .. }
                | Error::NonFinite { .. }
                | Error::Invariant(_)
                | Error::Diverged { .. }
                | Error::Io { .. } => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Completion marker written after every other output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: PathBuf,
    pub seed: u64,
    pub fingerprint: String,
    pub out: PathBuf,
    pub started: String,
    pub finished: String,
}

/// Claims `dir` for a run: refuses a non-empty directory unless `force`, in
/// which case the old manifest is removed first so an interrupted rerun
/// never looks complete.
pub fn claim_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| Error::Io {
                path: dir.display().to_string(),
                source: e,
            })?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        remove_if_present(&dir.join(MANIFEST))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Refuses an existing file unless `force`.
pub fn claim_file(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn remove_if_present(path: &Path) -> CliResult<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::Io {
            path: path.display().to_string(),
            source: e,
        }
        .into()),
    }
}
