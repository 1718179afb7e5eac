//! Per-run plumbing: config loading, path resolution and output files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::exit::{CliError, CliResult};

pub struct Context {
    pub command: &'static str,
    pub config_path: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub verbose: bool,
    config_dir: PathBuf,
}

#[derive(Serialize)]
struct RunRecord<'a, T> {
    command: &'a str,
    config_path: &'a Path,
    out: &'a Path,
    seed: Option<u64>,
    verbose: bool,
    config: &'a T,
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| CliError::io(p, e))
}

impl Context {
    pub fn new(command: &'static str, config_path: &Path, out: &Path, seed: Option<u64>, verbose: bool) -> CliResult<Self> {
        let config_path = absolute(config_path)?;
        let config_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Context {
            command,
            config_path,
            out: absolute(out)?,
            seed,
            verbose,
            config_dir,
        })
    }

    /// Parses the config file. Syntax and schema errors are config errors with
    /// line and column.
    pub fn load<T: DeserializeOwned>(&self) -> CliResult<T> {
        let text = fs::read_to_string(&self.config_path).map_err(|e| CliError::io(&self.config_path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::config(format!(
                "{}:{}:{}: {e}",
                self.config_path.display(),
                e.line(),
                e.column()
            ))
        })
    }

    /// Relative paths in a config are relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config_dir.join(p)
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        log::debug!("wrote {}", path.display());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::new(crate::exit::EXPERIMENT, format!("cannot serialize {rel}: {e}")))?;
        text.push('\n');
        self.write(rel, text)
    }

    /// Writes `run.json` with the resolved config.
    pub fn record<T: Serialize>(&self, resolved: &T) -> CliResult<()> {
        self.write_json(
            "run.json",
            &RunRecord {
                command: self.command,
                config_path: &self.config_path,
                out: &self.out,
                seed: self.seed,
                verbose: self.verbose,
                config: resolved,
            },
        )?;
        Ok(())
    }
}
