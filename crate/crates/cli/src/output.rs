use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use parkdyn::micro::{NfdPoint, ParkingEventLog, ScenarioConfig};
use serde::{Deserialize, Serialize};

use crate::Global;

pub fn scenario(g: &Global) -> Result<ScenarioConfig> {
    match &g.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading scenario {}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    let dir = out.join(format!("seed_{seed}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>();
    rows.with_context(|| format!("parsing {}", path.display()))
}

/// One row of `nfd.csv`: the Edie point plus the average accumulation.
#[derive(Debug, Serialize, Deserialize)]
pub struct NfdRow {
    pub t_s: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub n: f64,
}

impl NfdRow {
    pub fn new(p: &NfdPoint, length: f64) -> Self {
        NfdRow {
            t_s: p.t_s,
            k: p.k,
            q: p.q,
            v: p.v,
            n: p.accumulation(length),
        }
    }
}

/// `seed_<n>` directories written by `micro run`, in seed order.
pub fn run_dirs(root: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("reading {}", root.display()))? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(seed) = name
            .to_str()
            .and_then(|n| n.strip_prefix("seed_"))
            .and_then(|s| s.parse().ok())
        else {
            continue;
        };
        if entry.path().is_dir() {
            dirs.push((seed, entry.path()));
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        bail!("no seed_* run directories under {}", root.display());
    }
    Ok(dirs)
}

pub fn load_events(dir: &Path) -> Result<ParkingEventLog> {
    let p = dir.join("events.csv");
    ParkingEventLog::load_csv(&p).with_context(|| format!("loading {}", p.display()))
}
