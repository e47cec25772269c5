//! Output-directory ownership and provenance records.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::RunConfig;

pub const LOCK_FILE: &str = ".gcdm.lock";
pub const PROVENANCE_FILE: &str = "provenance.txt";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "pid={}", std::process::id())?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "output directory {} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("cannot create lock file {}", path.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Writes `provenance.txt` and the resolved configuration.
pub fn write_provenance(dir: &Path, command: &str, config: &RunConfig, extra: &[(&str, String)]) -> Result<()> {
    let mut f = File::create(dir.join(PROVENANCE_FILE))?;
    writeln!(f, "command={command}")?;
    writeln!(f, "version={}", env!("CARGO_PKG_VERSION"))?;
    writeln!(f, "config_sha256={}", config.hash())?;
    writeln!(f, "seed={}", config.seed)?;
    for (k, v) in extra {
        writeln!(f, "{k}={v}")?;
    }
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), config.to_toml())?;
    Ok(())
}

/// Writes `name` in `dir` through a temporary sibling and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, dir.join(name)).with_context(|| format!("cannot write {}", dir.join(name).display()))?;
    Ok(())
}
