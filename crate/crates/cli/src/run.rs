//! Exit-code mapping, configuration layering and run snapshots.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use msync_core::config::{apply, parse_pair, parse_pairs, render};
use msync_core::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::Common;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => f.write_str(m),
            Failure::Data(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::MissingInit(_) | Error::MissingChunker => Failure::Usage(e.to_string()),
            Error::Numerical(_) => Failure::Numerical(e.to_string()),
            other => Failure::Data(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(core) => core.into(),
            Err(e) => Failure::Data(e),
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn read(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::Data(anyhow::anyhow!("cannot read {}: {e}", path.display())))
}

pub fn write(path: &Path, text: &str) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Data(e.into()))?;
    }
    fs::write(path, text).map_err(|e| Failure::Data(anyhow::anyhow!("cannot write {}: {e}", path.display())))
}

/// `defaults`, then the --config file, then each --set, then --seed.
pub fn resolve<C: Serialize + DeserializeOwned>(common: &Common, defaults: C, seed_key: Option<&str>) -> Outcome<C> {
    let mut pairs = Vec::new();
    if let Some(p) = &common.config {
        pairs.extend(parse_pairs(&read(p)?)?);
    }
    for s in &common.overrides {
        pairs.push(parse_pair(s)?);
    }
    if let Some(k) = seed_key {
        pairs.push((k.to_string(), common.seed.to_string()));
    }
    Ok(apply(&defaults, &pairs)?)
}

/// Where the snapshot of a run writing `out` goes: inside a directory
/// output, beside a file output.
pub fn snapshot_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.config")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.config");
        out.with_file_name(name)
    }
}

/// Writes the command, its inputs and the resolved configuration.
pub fn snapshot<C: Serialize>(
    out: &Path,
    is_dir: bool,
    command: &str,
    common: &Common,
    inputs: &[(&str, String)],
    config: Option<&C>,
) -> Outcome {
    let mut text = format!("# resolved configuration\ncommand={command}\nseed={}\n", common.seed);
    for (k, v) in inputs {
        text.push_str(&format!("{k}={v}\n"));
    }
    if let Some(c) = config {
        text.push_str(&render(c)?);
    }
    write(&snapshot_path(out, is_dir), &text)
}

pub fn show(p: &Path) -> String {
    p.display().to_string()
}
