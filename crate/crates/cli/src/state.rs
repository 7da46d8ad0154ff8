//! State file persistence and the single-writer lock.

use std::fs::{File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use incws_core::estimator::{EstimatorState, StateSnapshot};

use crate::error::{CliError, CliResult};

/// `None` when the file does not exist.
pub fn load(path: &Path) -> CliResult<Option<EstimatorState>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(CliError::State(format!("cannot read state {}: {e}", path.display()))),
    };
    let snap: StateSnapshot = serde_json::from_str(&text)
        .map_err(|e| CliError::State(format!("state {} is not a valid snapshot: {e}", path.display())))?;
    let state = EstimatorState::from_snapshot(&snap).map_err(|e| CliError::State(e.to_string()))?;
    Ok(Some(state))
}

pub fn require(path: &Path) -> CliResult<EstimatorState> {
    match load(path)? {
        Some(s) if s.batches_seen() > 0 => Ok(s),
        Some(_) => Err(CliError::State(format!("state {} has not seen any batch", path.display()))),
        None => Err(CliError::State(format!("state {} does not exist", path.display()))),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Writes a temporary sibling, syncs it and renames it over `path`.
pub fn save(path: &Path, state: &EstimatorState) -> CliResult<()> {
    let tmp = sibling(path, ".tmp");
    let mut text = serde_json::to_string_pretty(&state.snapshot()).expect("snapshot serializes");
    text.push('\n');
    let mut f = File::create(&tmp).map_err(CliError::io(format!("creating {}", tmp.display())))?;
    f.write_all(text.as_bytes()).map_err(CliError::io(format!("writing {}", tmp.display())))?;
    f.sync_all().map_err(CliError::io(format!("syncing {}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(CliError::io(format!("replacing {}", path.display())))
}

/// Advisory lock on `<state>.lock`, held until dropped.
pub struct StateLock {
    _file: File,
}

pub fn lock(path: &Path) -> CliResult<StateLock> {
    let lock_path = sibling(path, ".lock");
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(CliError::io(format!("opening {}", lock_path.display())))?;
    match file.try_lock() {
        Ok(()) => Ok(StateLock { _file: file }),
        Err(TryLockError::WouldBlock) => {
            Err(CliError::State(format!("state {} is locked by another writer", path.display())))
        }
        Err(TryLockError::Error(e)) => Err(CliError::io(format!("locking {}", lock_path.display()))(e)),
    }
}
