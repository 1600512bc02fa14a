//! On-disk state: the renewable summaries (and optional monitor) as JSON with
//! hex-float reals, a checksum over the numeric payload, atomic replacement
//! and an advisory lock for writers.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::OnlineState;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::sequential::{Decision, MonitorConfig, MonitorState, Spending};

pub const FORMAT_VERSION: u32 = 1;

/// Formats a finite float as a C99-style hex literal, exact to the bit.
pub fn to_hex_float(v: f64) -> Result<String> {
    if !v.is_finite() {
        return Err(Error::NonFinite("state value"));
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return Ok(format!("{sign}0x0p+0"));
    }
    let (lead, e) = if exp == 0 {
        (0, -1022)
    } else {
        (1, exp - 1023)
    };
    let mut frac = format!("{mant:013x}");
    while frac.ends_with('0') {
        frac.pop();
    }
    let dot = if frac.is_empty() {
        String::new()
    } else {
        format!(".{frac}")
    };
    let esign = if e >= 0 { "+" } else { "-" };
    Ok(format!("{sign}0x{lead}{dot}p{esign}{}", e.abs()))
}

/// Parses the output of [`to_hex_float`].
pub fn from_hex_float(s: &str) -> Result<f64> {
    let bad = || Error::Format(format!("invalid hex float `{s}`"));
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    let rest = rest.strip_prefix("0x").ok_or_else(bad)?;
    let (mantissa, exponent) = rest.split_once('p').ok_or_else(bad)?;
    let e: i64 = exponent.parse().map_err(|_| bad())?;
    let (lead, frac) = match mantissa.split_once('.') {
        Some((l, f)) => (l, f),
        None => (mantissa, ""),
    };
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let mant = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(&format!("{frac:0<13}"), 16).map_err(|_| bad())?
    };
    let bits = match lead {
        "1" if (-1022..=1023).contains(&e) => (((e + 1023) as u64) << 52) | mant,
        "0" if mant == 0 && e == 0 => 0,
        "0" if e == -1022 => mant,
        _ => return Err(bad()),
    };
    let sign = if neg { 1u64 << 63 } else { 0 };
    Ok(f64::from_bits(sign | bits))
}

fn hex_vec(v: impl IntoIterator<Item = f64>) -> Result<Vec<String>> {
    v.into_iter().map(to_hex_float).collect()
}

fn parse_vec(v: &[String]) -> Result<Vec<f64>> {
    v.iter().map(|s| from_hex_float(s)).collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    (0..r)
        .flat_map(|i| (0..c).map(move |j| m[(i, j)]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredMonitor {
    total_analyses: usize,
    alpha: String,
    spending: Spending,
    null_delta: String,
    info_fractions: Vec<String>,
    analyses_done: usize,
    z_history: Vec<String>,
    boundaries: Vec<String>,
    decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stored {
    format_version: u32,
    spec: ModelSpec,
    theta: Vec<String>,
    s_cum: Vec<String>,
    m_cum: Vec<String>,
    n_total: u64,
    batch_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    monitor: Option<StoredMonitor>,
    checksum: String,
}

/// Everything a later process needs to continue the analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFile {
    pub state: OnlineState,
    pub monitor: Option<MonitorState>,
}

impl StateFile {
    pub fn new(state: OnlineState, monitor: Option<MonitorState>) -> Self {
        StateFile { state, monitor }
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let spec = self.state.spec();
        h.update(FORMAT_VERSION.to_le_bytes());
        h.update(spec.family.as_str().as_bytes());
        h.update(spec.outcome.as_str().as_bytes());
        h.update((spec.p as u64).to_le_bytes());
        let mut reals = |vals: &[f64]| {
            h.update((vals.len() as u64).to_le_bytes());
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        reals(self.state.theta().as_slice());
        reals(&row_major(self.state.s_cum()));
        reals(&row_major(self.state.m_cum()));
        h.update(self.state.n_total().to_le_bytes());
        h.update(self.state.batch_count().to_le_bytes());
        if let Some(m) = &self.monitor {
            h.update([1u8]);
            h.update((m.config.total_analyses as u64).to_le_bytes());
            h.update(m.config.alpha.to_bits().to_le_bytes());
            h.update(m.config.null_delta.to_bits().to_le_bytes());
            h.update([m.config.spending as u8]);
            for v in m
                .config
                .info_fractions
                .iter()
                .chain(&m.z_history)
                .chain(&m.boundaries)
            {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update((m.analyses_done as u64).to_le_bytes());
            h.update([m.decision as u8]);
        } else {
            h.update([0u8]);
        }
        let digest = h.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("sha256:{hex}")
    }

    pub fn to_json(&self) -> Result<String> {
        let s = &self.state;
        let monitor = self
            .monitor
            .as_ref()
            .map(|m| -> Result<StoredMonitor> {
                Ok(StoredMonitor {
                    total_analyses: m.config.total_analyses,
                    alpha: to_hex_float(m.config.alpha)?,
                    spending: m.config.spending,
                    null_delta: to_hex_float(m.config.null_delta)?,
                    info_fractions: hex_vec(m.config.info_fractions.iter().copied())?,
                    analyses_done: m.analyses_done,
                    z_history: hex_vec(m.z_history.iter().copied())?,
                    boundaries: hex_vec(m.boundaries.iter().copied())?,
                    decision: m.decision,
                })
            })
            .transpose()?;
        let stored = Stored {
            format_version: FORMAT_VERSION,
            spec: *s.spec(),
            theta: hex_vec(s.theta().as_slice().iter().copied())?,
            s_cum: hex_vec(row_major(s.s_cum()))?,
            m_cum: hex_vec(row_major(s.m_cum()))?,
            n_total: s.n_total(),
            batch_count: s.batch_count(),
            monitor,
            checksum: self.checksum(),
        };
        let mut text = serde_json::to_string_pretty(&stored)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: Stored = serde_json::from_str(text)?;
        if stored.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                stored.format_version
            )));
        }
        let spec = ModelSpec::new(stored.spec.family, stored.spec.outcome, stored.spec.p)?;
        let d = spec.dim();
        let matrix = |name: &str, v: &[String]| -> Result<DMatrix<f64>> {
            if v.len() != d * d {
                return Err(Error::Format(format!(
                    "{name} has {} entries, expected {}",
                    v.len(),
                    d * d
                )));
            }
            Ok(DMatrix::from_row_slice(d, d, &parse_vec(v)?))
        };
        let state = OnlineState::from_parts(
            spec,
            parse_vec(&stored.theta)?,
            matrix("s_cum", &stored.s_cum)?,
            matrix("m_cum", &stored.m_cum)?,
            stored.n_total,
            stored.batch_count,
        )?;
        let monitor = stored
            .monitor
            .map(|m| -> Result<MonitorState> {
                let config = MonitorConfig {
                    total_analyses: m.total_analyses,
                    alpha: from_hex_float(&m.alpha)?,
                    spending: m.spending,
                    null_delta: from_hex_float(&m.null_delta)?,
                    info_fractions: parse_vec(&m.info_fractions)?,
                };
                config.validate()?;
                let boundaries = parse_vec(&m.boundaries)?;
                let z_history = parse_vec(&m.z_history)?;
                if boundaries.len() != config.total_analyses
                    || z_history.len() != m.analyses_done
                    || m.analyses_done > config.total_analyses
                {
                    return Err(Error::Format("inconsistent monitor block".into()));
                }
                Ok(MonitorState {
                    config,
                    analyses_done: m.analyses_done,
                    z_history,
                    boundaries,
                    decision: m.decision,
                })
            })
            .transpose()?;
        let file = StateFile { state, monitor };
        let computed = file.checksum();
        if computed != stored.checksum {
            return Err(Error::Checksum {
                stored: stored.checksum,
                computed,
            });
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Atomically replaces `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        stage(path, self.to_json()?.as_bytes())?.commit()
    }
}

/// A fully written and synced temporary file awaiting its rename.
#[derive(Debug)]
pub struct StagedWrite {
    temp: PathBuf,
    target: PathBuf,
    committed: bool,
}

fn temp_path(target: &Path) -> PathBuf {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "state".into());
    target.with_file_name(format!(".{name}.tmp.{}", std::process::id()))
}

/// Writes `bytes` to a temporary sibling of `target` and fsyncs it.
pub fn stage(target: &Path, bytes: &[u8]) -> Result<StagedWrite> {
    let temp = temp_path(target);
    let mut f = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(&temp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(StagedWrite {
        temp,
        target: target.to_path_buf(),
        committed: false,
    })
}

impl StagedWrite {
    pub fn temp_path(&self) -> &Path {
        &self.temp
    }

    /// Renames over the target and fsyncs the directory.
    pub fn commit(mut self) -> Result<()> {
        fs::rename(&self.temp, &self.target)?;
        self.committed = true;
        if let Some(dir) = self.target.parent() {
            let dir = if dir.as_os_str().is_empty() {
                Path::new(".")
            } else {
                dir
            };
            if let Ok(d) = File::open(dir) {
                // not every filesystem supports syncing a directory handle
                let _ = d.sync_all();
            }
        }
        Ok(())
    }
}

impl Drop for StagedWrite {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_file(&self.temp);
        }
    }
}

/// Exclusive advisory lock on `<state>.lock`, released on drop.
#[derive(Debug)]
pub struct StateLock {
    file: File,
    path: PathBuf,
}

impl StateLock {
    pub fn acquire(state_path: &Path) -> Result<Self> {
        let mut name = state_path.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        let file = OpenOptions::new()
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        // SAFETY: flock on a descriptor we own.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::WouldBlock,
                format!(
                    "state file {} is locked by another writer",
                    state_path.display()
                ),
            )));
        }
        Ok(StateLock { file, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for StateLock {
    fn drop(&mut self) {
        // SAFETY: unlocking our own descriptor.
        unsafe {
            libc::flock(self.file.as_raw_fd(), libc::LOCK_UN);
        }
    }
}
