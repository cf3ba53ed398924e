//! Subprocess bridge to external generators and embedders.
//!
//! Batch `k` is written to `<work_dir>/batch_<k>/in.idv` and the command is run
//! as `<command> --in <file> --out <dir>`. The adapter writes `img_<j>.pgm` or
//! `img_<j>.ppm` per row (images mode) or a single `out.idv` (embeddings mode).

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::{read_pnm, Image};
use crate::error::{BridgeError, Error, Result};
use crate::format::{read_idv, write_idv};
use crate::numkit::RowMatrix;

pub const BRIDGE_TIMEOUT_ENV: &str = "IDFORGE_BRIDGE_TIMEOUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeMode {
    #[default]
    Images,
    Embeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// Program and leading arguments, shell-quoted.
    pub command: String,
    pub work_dir: PathBuf,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: u64,
    #[serde(default = "default_mode")]
    pub mode: BridgeMode,
}

fn default_batch() -> usize {
    64
}

fn default_timeout() -> u64 {
    600
}

fn default_mode() -> BridgeMode {
    BridgeMode::Images
}

impl BridgeConfig {
    pub fn new(command: impl Into<String>, work_dir: impl Into<PathBuf>, mode: BridgeMode) -> Self {
        BridgeConfig {
            command: command.into(),
            work_dir: work_dir.into(),
            batch_size: default_batch(),
            timeout_seconds: default_timeout(),
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("bridge batch size must be >= 1".into()));
        }
        if self.timeout_seconds == 0 {
            return Err(Error::Config("bridge timeout must be > 0".into()));
        }
        match shlex::split(&self.command) {
            Some(t) if !t.is_empty() => Ok(()),
            _ => Err(Error::Config(format!("unparsable bridge command `{}`", self.command))),
        }
    }

    fn effective_timeout(&self) -> u64 {
        std::env::var(BRIDGE_TIMEOUT_ENV)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .filter(|&t| t > 0)
            .unwrap_or(self.timeout_seconds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BridgeOutput {
    Images(Vec<Image>),
    Embeddings(RowMatrix),
}

fn work_dir_lock(dir: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let key = fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
    LOCKS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .entry(key)
        .or_default()
        .clone()
}

/// Runs every batch through the external command, preserving row order.
pub fn bridge_generate(cfg: &BridgeConfig, vectors: &RowMatrix) -> Result<BridgeOutput> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.work_dir).map_err(|e| Error::io(format!("creating {}", cfg.work_dir.display()), e))?;
    let lock = work_dir_lock(&cfg.work_dir);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());

    let mut images = Vec::new();
    let mut embeddings: Option<RowMatrix> = None;
    let n = vectors.nrows();
    for (k, start) in (0..n).step_by(cfg.batch_size).enumerate() {
        let end = (start + cfg.batch_size).min(n);
        let batch = vectors.select_rows(&(start..end).collect::<Vec<_>>());
        let dir = cfg.work_dir.join(format!("batch_{k}"));
        let out = dir.join("out");
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| Error::io(format!("clearing {}", out.display()), e))?;
        }
        fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
        let input = dir.join("in.idv");
        write_idv(&input, &batch, None)?;
        run_command(cfg, &input, &out)?;
        match cfg.mode {
            BridgeMode::Images => images.extend(collect_images(k, &out, end - start)?),
            BridgeMode::Embeddings => {
                let e = collect_embeddings(k, &out, end - start)?;
                match &mut embeddings {
                    None => embeddings = Some(e),
                    Some(acc) => {
                        if acc.ncols() != e.ncols() {
                            return Err(BridgeError::Malformed {
                                path: out.join("out.idv"),
                                reason: format!("dimension {} differs from earlier batches ({})", e.ncols(), acc.ncols()),
                            }
                            .into());
                        }
                        for r in e.rows() {
                            acc.push_row(r)?;
                        }
                    }
                }
            }
        }
    }
    Ok(match cfg.mode {
        BridgeMode::Images => BridgeOutput::Images(images),
        BridgeMode::Embeddings => BridgeOutput::Embeddings(embeddings.unwrap_or_else(|| RowMatrix::with_cols(0))),
    })
}

fn run_command(cfg: &BridgeConfig, input: &Path, out: &Path) -> Result<()> {
    let tokens = shlex::split(&cfg.command).unwrap_or_default();
    let spawn_err = |source| BridgeError::Spawn {
        command: cfg.command.clone(),
        source,
    };
    let mut child = Command::new(&tokens[0])
        .args(&tokens[1..])
        .arg("--in")
        .arg(input)
        .arg("--out")
        .arg(out)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(spawn_err)?;
    let mut pipe = child.stderr.take().expect("stderr is piped");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    });
    let seconds = cfg.effective_timeout();
    let status = child
        .wait_timeout(Duration::from_secs(seconds))
        .map_err(spawn_err)?;
    let Some(status) = status else {
        let _ = child.kill();
        let _ = child.wait();
        return Err(BridgeError::Timeout { seconds }.into());
    };
    let stderr = reader.join().unwrap_or_default();
    if !status.success() {
        return Err(BridgeError::NonZeroExit {
            code: status.code(),
            stderr,
        }
        .into());
    }
    Ok(())
}

fn malformed(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { path, reason } => BridgeError::Malformed { path, reason }.into(),
        other => BridgeError::Malformed {
            path: path.to_path_buf(),
            reason: other.to_string(),
        }
        .into(),
    }
}

fn collect_images(batch: usize, out: &Path, count: usize) -> Result<Vec<Image>> {
    (0..count)
        .map(|j| {
            let pgm = out.join(format!("img_{j}.pgm"));
            let ppm = out.join(format!("img_{j}.ppm"));
            let path = if pgm.exists() {
                pgm
            } else if ppm.exists() {
                ppm
            } else {
                return Err(BridgeError::IncompleteBatch { batch, index: j }.into());
            };
            read_pnm(&path).map_err(|e| malformed(e, &path))
        })
        .collect()
}

fn collect_embeddings(batch: usize, out: &Path, count: usize) -> Result<RowMatrix> {
    let path = out.join("out.idv");
    if !path.exists() {
        return Err(BridgeError::IncompleteBatch { batch, index: 0 }.into());
    }
    let file = read_idv(&path).map_err(|e| malformed(e, &path))?;
    let rows = file.vectors.nrows();
    if rows < count {
        return Err(BridgeError::IncompleteBatch { batch, index: rows }.into());
    }
    if rows > count {
        return Err(BridgeError::Malformed {
            path,
            reason: format!("{rows} rows for a batch of {count}"),
        }
        .into());
    }
    Ok(file.vectors)
}
