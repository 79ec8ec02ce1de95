//! Flat `section.key = value` configuration files.
//!
//! Keys mirror the fields of [`ExperimentSetup`]. Detector keys are per
//! party (`detectors.A.*`, `detectors.B.*`) and channel offsets are written
//! `coincidence.offset.<channel> = seconds`. Blank lines and `#` comments
//! are ignored. Unset keys keep their defaults; the default offset of B.Z1
//! follows `source.bin_separation_tau`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::experiment::{ExperimentError, ExperimentSetup};
use crate::mode_state::Channel;
use crate::optics::Basis;
use crate::source_detect::{CoincidenceConfig, DetectorConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid value for {0}")]
    InvariantViolation(String),
    #[error("{0}")]
    Io(String),
}

const DETECTOR_KEYS: [&str; 6] = ["efficiency", "dark_rate", "jitter_sigma", "dead_time", "gated", "gate_width"];

fn f(v: f64) -> String {
    format!("{v}")
}

fn detector_entries(prefix: &str, d: &DetectorConfig, out: &mut Vec<(String, String)>) {
    let vals = [f(d.efficiency), f(d.dark_rate), f(d.jitter_sigma), f(d.dead_time), d.gated.to_string(), f(d.gate_width)];
    for (k, v) in DETECTOR_KEYS.iter().zip(vals) {
        out.push((format!("{prefix}.{k}"), v));
    }
}

/// Every key of `s` with its value, in file order.
pub fn config_entries(s: &ExperimentSetup) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vec![
        ("source.pair_rate_mu".into(), f(s.source.pair_rate_mu)),
        ("source.phase_mean".into(), f(s.source.phase_mean)),
        ("source.phase_sigma".into(), f(s.source.phase_sigma)),
        ("source.bin_separation_tau".into(), f(s.source.bin_separation_tau)),
        ("source.pump_power_uw".into(), f(s.source.pump_power_uw)),
        ("transformer.polarizer_angle".into(), f(s.transformer.polarizer_angle)),
        ("transformer.excess_loss_db".into(), f(s.transformer.excess_loss_db)),
        ("transformer.pm_fiber_transmission".into(), f(s.transformer.pm_fiber_transmission)),
        ("transformer.glan_extinction_ratio".into(), f(s.transformer.glan_extinction_ratio)),
        ("transformer.delay_slots".into(), s.transformer.delay_slots.to_string()),
        ("decoder.phase_phi".into(), f(s.decoder.phase_phi)),
        ("decoder.z_branch_ratio".into(), f(s.decoder.z_branch_ratio)),
        ("decoder.delay_slots".into(), s.decoder.delay_slots.to_string()),
        ("decoder.insertion_loss_db".into(), f(s.decoder.insertion_loss_db)),
        ("experiment.alice_basis".into(), s.alice_basis.name().into()),
    ];
    detector_entries("detectors.A", &s.detectors.alice, &mut out);
    detector_entries("detectors.B", &s.detectors.bob, &mut out);
    let c = &s.coincidence;
    out.push(("coincidence.window".into(), f(c.window)));
    out.push(("coincidence.generator_delay".into(), f(c.generator_delay)));
    out.push(("coincidence.scan_delay".into(), f(c.scan_delay)));
    out.push(("coincidence.histogram_bin".into(), f(c.histogram_bin)));
    for (ch, v) in &c.channel_offsets {
        out.push((format!("coincidence.offset.{ch}"), f(*v)));
    }
    out.push(("temperature.t0".into(), f(s.temperature.t0)));
    out.push(("temperature.period_k".into(), f(s.temperature.period_k)));
    out
}

/// Config text of `s`; parsing it back gives `s`.
pub fn serialize_config(s: &ExperimentSetup) -> String {
    let mut text = String::new();
    let mut section = String::new();
    for (k, v) in config_entries(s) {
        let sec = k.split('.').next().unwrap_or("");
        if sec != section {
            if !section.is_empty() {
                text.push('\n');
            }
            section = sec.to_string();
            let _ = writeln!(text, "# {sec}");
        }
        let _ = writeln!(text, "{k} = {v}");
    }
    text
}

/// Hex SHA-256 of the serialized config.
pub fn config_hash(s: &ExperimentSetup) -> String {
    hex::encode(Sha256::digest(serialize_config(s).as_bytes()))
}

enum SetError {
    Unknown,
    Bad(String),
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, SetError> {
    v.parse().map_err(|_| SetError::Bad(format!("cannot parse {v:?}")))
}

fn set_detector(d: &mut DetectorConfig, key: &str, v: &str) -> Result<(), SetError> {
    match key {
        "efficiency" => d.efficiency = num(v)?,
        "dark_rate" => d.dark_rate = num(v)?,
        "jitter_sigma" => d.jitter_sigma = num(v)?,
        "dead_time" => d.dead_time = num(v)?,
        "gated" => d.gated = num(v)?,
        "gate_width" => d.gate_width = num(v)?,
        _ => return Err(SetError::Unknown),
    }
    Ok(())
}

fn set_key(s: &mut ExperimentSetup, key: &str, v: &str) -> Result<(), SetError> {
    match key {
        "source.pair_rate_mu" => s.source.pair_rate_mu = num(v)?,
        "source.phase_mean" => s.source.phase_mean = num(v)?,
        "source.phase_sigma" => s.source.phase_sigma = num(v)?,
        "source.bin_separation_tau" => s.source.bin_separation_tau = num(v)?,
        "source.pump_power_uw" => s.source.pump_power_uw = num(v)?,
        "transformer.polarizer_angle" => s.transformer.polarizer_angle = num(v)?,
        "transformer.excess_loss_db" => s.transformer.excess_loss_db = num(v)?,
        "transformer.pm_fiber_transmission" => s.transformer.pm_fiber_transmission = num(v)?,
        "transformer.glan_extinction_ratio" => s.transformer.glan_extinction_ratio = num(v)?,
        "transformer.delay_slots" => s.transformer.delay_slots = num(v)?,
        "decoder.phase_phi" => s.decoder.phase_phi = num(v)?,
        "decoder.z_branch_ratio" => s.decoder.z_branch_ratio = num(v)?,
        "decoder.delay_slots" => s.decoder.delay_slots = num(v)?,
        "decoder.insertion_loss_db" => s.decoder.insertion_loss_db = num(v)?,
        "experiment.alice_basis" => {
            s.alice_basis = match v {
                "Z" | "z" => Basis::Z,
                "X" | "x" => Basis::X,
                _ => return Err(SetError::Bad(format!("basis must be Z or X, got {v:?}"))),
            }
        }
        "coincidence.window" => s.coincidence.window = num(v)?,
        "coincidence.generator_delay" => s.coincidence.generator_delay = num(v)?,
        "coincidence.scan_delay" => s.coincidence.scan_delay = num(v)?,
        "coincidence.histogram_bin" => s.coincidence.histogram_bin = num(v)?,
        "temperature.t0" => s.temperature.t0 = num(v)?,
        "temperature.period_k" => s.temperature.period_k = num(v)?,
        _ => {
            if let Some(rest) = key.strip_prefix("detectors.A.") {
                return set_detector(&mut s.detectors.alice, rest, v);
            }
            if let Some(rest) = key.strip_prefix("detectors.B.") {
                return set_detector(&mut s.detectors.bob, rest, v);
            }
            if let Some(ch) = key.strip_prefix("coincidence.offset.") {
                let ch = Channel::parse(ch).filter(|c| Channel::ALICE.contains(c) || Channel::BOB_DETECTORS.contains(c));
                let ch = ch.ok_or(SetError::Unknown)?;
                s.coincidence.channel_offsets.insert(ch, num(v)?);
                return Ok(());
            }
            return Err(SetError::Unknown);
        }
    }
    Ok(())
}

/// Parses and validates config text.
pub fn parse_config_str(text: &str) -> Result<ExperimentSetup, ConfigError> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse { line, message: format!("expected key = value, got {body:?}") })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() || v.is_empty() {
            return Err(ConfigError::Parse { line, message: "empty key or value".into() });
        }
        if entries.contains_key(&k) {
            return Err(ConfigError::Parse { line, message: format!("duplicate key {k}") });
        }
        order.push(k.clone());
        entries.insert(k, (line, v));
    }

    let mut s = ExperimentSetup::default();
    let apply = |s: &mut ExperimentSetup, k: &str| -> Result<(), ConfigError> {
        let (line, v) = &entries[k];
        set_key(s, k, v).map_err(|e| match e {
            SetError::Unknown => ConfigError::UnknownKey { line: *line, key: k.to_string() },
            SetError::Bad(message) => ConfigError::Parse { line: *line, message: format!("{k}: {message}") },
        })
    };
    // Source first: the default coincidence offsets depend on τ.
    for k in order.iter().filter(|k| k.starts_with("source.")) {
        apply(&mut s, k)?;
    }
    s.coincidence = CoincidenceConfig::with_tau(s.source.bin_separation_tau);
    for k in order.iter().filter(|k| !k.starts_with("source.")) {
        apply(&mut s, k)?;
    }
    s.validate().map_err(|e| match e {
        ExperimentError::InvalidSetup(field) => ConfigError::InvariantViolation(field),
        other => ConfigError::InvariantViolation(other.to_string()),
    })?;
    Ok(s)
}

pub fn parse_config(path: &Path) -> Result<ExperimentSetup, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}
