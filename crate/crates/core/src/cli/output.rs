//! CSV and JSON artifacts.
//!
//! Every file carries the seed and the config hash: CSV files start with a
//! `# seed=<u64|none> config_hash=<hex>` line followed by a header row, JSON
//! files are objects `{config_hash, seed, <payload name>}` with keys in
//! sorted order. Numbers use the shortest representation that parses back
//! to the same f64.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::CliError;
use crate::experiment::{ChannelPair, ScanCurve, ScanKind, ScanPoint};
use crate::source_detect::{write_clicks_csv, ClickEvent};

pub fn preamble(seed: Option<u64>, hash: &str) -> String {
    match seed {
        Some(s) => format!("# seed={s} config_hash={hash}\n"),
        None => format!("# seed=none config_hash={hash}\n"),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<PathBuf, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

/// Curve CSV text: `<scan column>,pair,counts,duration_s`, one row per
/// point and channel pair. Pairs absent at a point are written as zero.
pub fn curve_csv(curve: &ScanCurve, hash: &str) -> Result<String, CliError> {
    let pairs = curve.pairs();
    if curve.points.is_empty() || pairs.is_empty() {
        return Err(CliError::EmptyOutput);
    }
    let mut s = preamble(Some(curve.seed), hash);
    let _ = writeln!(s, "{},pair,counts,duration_s", curve.kind.column());
    for p in &curve.points {
        for pair in &pairs {
            let n = p.counts.get(pair).copied().unwrap_or(0);
            let _ = writeln!(s, "{},{},{},{}", p.value, pair, n, curve.duration_per_point);
        }
    }
    Ok(s)
}

pub fn write_curve_csv(path: &Path, curve: &ScanCurve, hash: &str) -> Result<PathBuf, CliError> {
    let text = curve_csv(curve, hash)?;
    write_file(path, text.as_bytes())
}

/// Parsed curve CSV with the config hash of its preamble, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveFile {
    pub curve: ScanCurve,
    pub config_hash: Option<String>,
}

pub fn read_curve_csv(text: &str) -> Result<CurveFile, CliError> {
    let bad = |line: usize, m: &str| CliError::BadInput(format!("counts line {line}: {m}"));
    let mut seed = 0u64;
    let mut config_hash = None;
    let mut kind = None;
    let mut duration: Option<f64> = None;
    let mut points: Vec<ScanPoint> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        if let Some(c) = l.strip_prefix('#') {
            for tok in c.split_whitespace() {
                if let Some(v) = tok.strip_prefix("seed=") {
                    seed = if v == "none" { 0 } else { v.parse().map_err(|_| bad(line, "seed"))? };
                } else if let Some(v) = tok.strip_prefix("config_hash=") {
                    config_hash = Some(v.to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = l.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(bad(line, "expected 4 columns"));
        }
        if kind.is_none() {
            kind = Some(match cols[0] {
                "scan_delay_s" => ScanKind::Delay,
                "temperature_c" => ScanKind::Temperature,
                other => return Err(bad(line, &format!("unknown scan column {other:?}"))),
            });
            if cols[1..] != ["pair", "counts", "duration_s"] {
                return Err(bad(line, "header must be <scan>,pair,counts,duration_s"));
            }
            continue;
        }
        let value: f64 = cols[0].parse().map_err(|_| bad(line, "scan value"))?;
        let pair = ChannelPair::parse(cols[1]).ok_or_else(|| bad(line, "channel pair"))?;
        let n: u64 = cols[2].parse().map_err(|_| bad(line, "counts"))?;
        let d: f64 = cols[3].parse().map_err(|_| bad(line, "duration"))?;
        match duration {
            None => duration = Some(d),
            Some(d0) if d0.to_bits() != d.to_bits() => return Err(bad(line, "duration differs between rows")),
            _ => {}
        }
        match points.last_mut() {
            Some(p) if p.value.to_bits() == value.to_bits() => {
                p.counts.insert(pair, n);
            }
            _ => points.push(ScanPoint { value, counts: BTreeMap::from([(pair, n)]) }),
        }
    }
    let kind = kind.ok_or_else(|| CliError::BadInput("counts file has no header".into()))?;
    if points.is_empty() {
        return Err(CliError::BadInput("counts file has no rows".into()));
    }
    Ok(CurveFile {
        curve: ScanCurve { kind, seed, duration_per_point: duration.unwrap_or(0.0), points },
        config_hash,
    })
}

/// Stable JSON text of `{config_hash, seed, name: payload}`.
pub fn json_artifact<T: Serialize>(name: &str, payload: &T, seed: Option<u64>, hash: &str) -> Result<String, CliError> {
    let data = serde_json::to_value(payload).map_err(|e| CliError::Io(e.to_string()))?;
    let mut obj = serde_json::Map::new();
    obj.insert("config_hash".into(), hash.into());
    obj.insert("seed".into(), seed.map(Into::into).unwrap_or(serde_json::Value::Null));
    obj.insert(name.into(), data);
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(obj)).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(
    path: &Path,
    name: &str,
    payload: &T,
    seed: Option<u64>,
    hash: &str,
) -> Result<PathBuf, CliError> {
    let text = json_artifact(name, payload, seed, hash)?;
    write_file(path, text.as_bytes())
}

pub fn write_clicks(path: &Path, clicks: &[ClickEvent], seed: u64, hash: &str) -> Result<PathBuf, CliError> {
    let mut buf = preamble(Some(seed), hash).into_bytes();
    write_clicks_csv(&mut buf, clicks).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(path, &buf)
}

pub fn write_text(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    write_file(path, text.as_bytes())
}
