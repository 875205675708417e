//! Cache media: bandwidth/latency cost model plus where bytes actually live.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{param_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TierKind {
    GpuSim,
    CpuMem,
    Ssd,
    Hdd,
    Custom,
}

impl TierKind {
    pub fn name(self) -> &'static str {
        match self {
            TierKind::GpuSim => "gpu-sim",
            TierKind::CpuMem => "cpu-mem",
            TierKind::Ssd => "ssd",
            TierKind::Hdd => "hdd",
            TierKind::Custom => "custom",
        }
    }
}

impl fmt::Display for TierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gpu-sim" => TierKind::GpuSim,
            "cpu-mem" => TierKind::CpuMem,
            "ssd" => TierKind::Ssd,
            "hdd" => TierKind::Hdd,
            "custom" => TierKind::Custom,
            other => return Err(Error::Format(format!("unknown tier kind `{other}`"))),
        })
    }
}

/// Where a tier keeps chunk bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Backing {
    /// Bytes stay in process memory; I/O time is modeled.
    InMemory,
    /// One CTKV file per chunk inside this directory; reads are real.
    Dir(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TierConfig {
    pub kind: TierKind,
    /// Bytes per second.
    pub read_bw: f64,
    pub write_bw: f64,
    /// Seconds charged once per access.
    pub fixed_latency: f64,
    pub backing: Backing,
}

/// Measured HDD offload path: 205 MB/s read, 201 MB/s write.
pub const HDD_READ_BW: f64 = 205e6;
pub const HDD_WRITE_BW: f64 = 201e6;
/// Measured SSD offload path: 535 MB/s read, 445 MB/s write.
pub const SSD_READ_BW: f64 = 535e6;
pub const SSD_WRITE_BW: f64 = 445e6;

impl TierConfig {
    pub fn new(kind: TierKind, read_bw: f64, write_bw: f64, fixed_latency: f64, backing: Backing) -> Result<Self> {
        let t = Self { kind, read_bw, write_bw, fixed_latency, backing };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.read_bw > 0.0 && self.read_bw.is_finite()) || !(self.write_bw > 0.0 && self.write_bw.is_finite()) {
            return Err(param_err(format!(
                "bandwidths must be positive (read {}, write {})",
                self.read_bw, self.write_bw
            )));
        }
        if !(self.fixed_latency >= 0.0 && self.fixed_latency.is_finite()) {
            return Err(param_err(format!("fixed latency {} must be >= 0", self.fixed_latency)));
        }
        Ok(())
    }

    pub fn hdd() -> Self {
        Self { kind: TierKind::Hdd, read_bw: HDD_READ_BW, write_bw: HDD_WRITE_BW, fixed_latency: 4e-3, backing: Backing::InMemory }
    }

    pub fn ssd() -> Self {
        Self { kind: TierKind::Ssd, read_bw: SSD_READ_BW, write_bw: SSD_WRITE_BW, fixed_latency: 1e-4, backing: Backing::InMemory }
    }

    /// Host memory reached over PCIe Gen3 x16.
    pub fn cpu_mem() -> Self {
        Self { kind: TierKind::CpuMem, read_bw: 12e9, write_bw: 12e9, fixed_latency: 1e-5, backing: Backing::InMemory }
    }

    pub fn gpu_sim() -> Self {
        Self { kind: TierKind::GpuSim, read_bw: 1.5e12, write_bw: 1.5e12, fixed_latency: 0.0, backing: Backing::InMemory }
    }

    /// Preset by kind name (`hdd`, `ssd`, `cpu-mem`, `gpu-sim`).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "hdd" => Some(Self::hdd()),
            "ssd" => Some(Self::ssd()),
            "cpu-mem" => Some(Self::cpu_mem()),
            "gpu-sim" => Some(Self::gpu_sim()),
            _ => None,
        }
    }

    pub fn with_backing(mut self, backing: Backing) -> Self {
        self.backing = backing;
        self
    }

    pub fn with_dir(self, dir: impl Into<PathBuf>) -> Self {
        self.with_backing(Backing::Dir(dir.into()))
    }

    pub fn is_file_backed(&self) -> bool {
        matches!(self.backing, Backing::Dir(_))
    }

    pub fn read_time(&self, bytes: usize) -> f64 {
        self.fixed_latency + bytes as f64 / self.read_bw
    }

    pub fn write_time(&self, bytes: usize) -> f64 {
        self.fixed_latency + bytes as f64 / self.write_bw
    }

    /// Parses the `key=value` tier file. Blank lines and `#` comments are
    /// ignored; `kind`, `read_bw_bytes` and `write_bw_bytes` are required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut read_bw = None;
        let mut write_bw = None;
        let mut fixed_latency = 0.0;
        let mut backing = Backing::InMemory;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: `{v}` is not a number", lineno + 1)))
            };
            match key {
                "kind" => kind = Some(value.parse::<TierKind>()?),
                "read_bw_bytes" => read_bw = Some(num(value)?),
                "write_bw_bytes" => write_bw = Some(num(value)?),
                "fixed_latency_s" => fixed_latency = num(value)?,
                "backing" => {
                    backing = match value {
                        "memory" | "in-memory" => Backing::InMemory,
                        path => Backing::Dir(PathBuf::from(path)),
                    }
                }
                other => return Err(Error::Format(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        let missing = |k: &str| Error::Format(format!("tier file is missing `{k}`"));
        let t = Self {
            kind: kind.ok_or_else(|| missing("kind"))?,
            read_bw: read_bw.ok_or_else(|| missing("read_bw_bytes"))?,
            write_bw: write_bw.ok_or_else(|| missing("write_bw_bytes"))?,
            fixed_latency,
            backing,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let backing = match &self.backing {
            Backing::InMemory => "memory".to_string(),
            Backing::Dir(p) => p.display().to_string(),
        };
        format!(
            "kind={}\nread_bw_bytes={}\nwrite_bw_bytes={}\nfixed_latency_s={}\nbacking={}\n",
            self.kind, self.read_bw, self.write_bw, self.fixed_latency, backing
        )
    }
}
