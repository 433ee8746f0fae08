//! Run directories and manifests.
//!
//! Every invocation gets its own flat directory holding a `manifest.json`
//! and the artifacts it produced. The manifest records the exact resolved
//! configuration and the invocation, which is enough to replay the run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use stimtrain::evaluation::BoundMode;
use stimtrain::SubnetMask;

use crate::config::Config;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "STIMTRAIN_OUT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Common,
    Stimulative,
    Individual,
    StochasticDepth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DestructKind {
    DeleteOne,
    DeleteK,
    Permute,
}

/// What was run. Paths are stored absolute so a replay works from any
/// working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Train {
        mode: TrainMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mask: Option<SubnetMask>,
    },
    EvalSubnets {
        checkpoint: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample: Option<usize>,
    },
    Destruct {
        ct: PathBuf,
        st: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kind: Option<DestructKind>,
        max_level: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        plans: Option<PathBuf>,
    },
    TrackKl {
        run_dir: PathBuf,
    },
    BoundCheck {
        run_dir: PathBuf,
        mode: BoundMode,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Train { .. } => "train",
            Invocation::EvalSubnets { .. } => "eval-subnets",
            Invocation::Destruct { .. } => "destruct",
            Invocation::TrackKl { .. } => "track-kl",
            Invocation::BoundCheck { .. } => "bound-check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub invocation: Invocation,
    pub config: Config,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let path = if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

/// An open run directory.
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
}

fn default_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

impl RunDir {
    /// Creates the directory (`out`, or a fresh one under the output root)
    /// and writes the initial manifest.
    pub fn create(out: Option<&Path>, invocation: Invocation, config: &Config) -> Result<RunDir> {
        let now = Utc::now();
        let base_id = format!(
            "{}-{}-s{}",
            invocation.name(),
            now.format("%Y%m%dT%H%M%S"),
            config.train.seed
        );
        let (path, run_id) = match out {
            Some(p) => {
                if p.join(MANIFEST).exists() {
                    bail!(crate::config::ConfigError(format!(
                        "{} already holds a run; pick another --out",
                        p.display()
                    )));
                }
                let id = p
                    .file_name()
                    .map_or_else(|| base_id.clone(), |n| n.to_string_lossy().into_owned());
                (p.to_path_buf(), id)
            }
            None => {
                let root = default_root();
                let mut id = base_id.clone();
                let mut n = 1;
                while root.join(&id).exists() {
                    n += 1;
                    id = format!("{base_id}-{n}");
                }
                (root.join(&id), id)
            }
        };
        std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let manifest = Manifest {
            run_id,
            invocation,
            config: config.clone(),
            seed: config.train.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now.to_rfc3339(),
            finished_at: None,
            status: Status::Running,
            error: None,
            artifacts: Vec::new(),
        };
        let dir = RunDir { path, manifest };
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn record(&mut self, artifact: impl Into<String>) {
        let a = artifact.into();
        if !self.manifest.artifacts.contains(&a) {
            self.manifest.artifacts.push(a);
        }
    }

    /// Writes `bytes` to `name` atomically and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.file(name), bytes)?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(&self.file(MANIFEST), text.as_bytes())
    }

    pub fn finish(&mut self, outcome: &Result<()>) -> Result<()> {
        self.manifest.finished_at = Some(Utc::now().to_rfc3339());
        match outcome {
            Ok(()) => self.manifest.status = Status::Completed,
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        self.write_manifest()
    }
}
