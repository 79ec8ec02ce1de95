//! End-to-end engines: analytic outcome distributions, the Monte Carlo link
//! simulation with delay and temperature scans, and calibration of the
//! unstated noise parameters.

mod analytic;
mod calibrate;
mod montecarlo;
mod paper;

pub use analytic::{
    aligned_phase, analytic_distribution, averaged_pair_distribution, conditional_visibility,
    expected_coincidences, expected_metrics, pair_distribution, source_state, LinkMetrics,
};
pub use calibrate::{
    calibrate, evaluate, nelder_mead, CalibrationResult, FreeParam, NelderMeadResult, Objective, Residuals, Targets,
    MAX_ITERATIONS, OBJECTIVE_TOLERANCE,
};
pub use montecarlo::{
    chunks_for, point_seed, quantized_phase, run_chunk_range, run_montecarlo, run_montecarlo_with_clicks,
    scan_delay, scan_temperature, ChannelPair, ClickTally, OutcomeKey, RunRecord, ScanCurve, ScanKind,
    ScanPoint, CHUNK_DURATION, PHASE_LEVELS,
};
pub use paper::{paper_free_params, reproduce_paper, Check, CurveFit, PaperOptions, PaperReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mode_state::{Channel, StateError};
use crate::optics::{Basis, DecoderConfig, TransformerConfig};
use crate::source_detect::{CoincidenceConfig, DetectorConfig, SourceConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    State(#[from] StateError),
    #[error("invalid setup field {0}")]
    InvalidSetup(String),
    #[error("calibration did not converge: objective spread {spread:.3e} after {iterations} iterations")]
    NoConvergence { iterations: usize, spread: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Detector settings per party: Alice's two SPCMs share one config, Bob's
/// four gated APDs share another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSet {
    pub alice: DetectorConfig,
    pub bob: DetectorConfig,
}

impl Default for DetectorSet {
    fn default() -> Self {
        DetectorSet { alice: DetectorConfig::spcm(), bob: DetectorConfig::ingaas_gated() }
    }
}

impl DetectorSet {
    pub fn for_channel(&self, ch: Channel) -> &DetectorConfig {
        match ch.party() {
            Some(crate::mode_state::Party::B) => &self.bob,
            _ => &self.alice,
        }
    }
}

/// Linear PLC phase-vs-temperature law: `φ = 2π (T − T0) / period_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub t0: f64,
    pub period_k: f64,
}

impl Default for TemperatureModel {
    fn default() -> Self {
        TemperatureModel { t0: 25.0, period_k: 0.4 }
    }
}

impl TemperatureModel {
    pub fn phase(&self, t: f64) -> f64 {
        std::f64::consts::TAU * (t - self.t0) / self.period_k
    }

    /// Temperature at which the decoder phase equals `phi` (first period).
    pub fn temperature_for(&self, phi: f64) -> f64 {
        self.t0 + phi.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * self.period_k
    }
}

/// Complete parameter record of the link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub source: SourceConfig,
    pub transformer: TransformerConfig,
    pub decoder: DecoderConfig,
    pub alice_basis: Basis,
    pub detectors: DetectorSet,
    pub coincidence: CoincidenceConfig,
    pub temperature: TemperatureModel,
}

impl Default for ExperimentSetup {
    fn default() -> Self {
        let source = SourceConfig::default();
        let coincidence = CoincidenceConfig::with_tau(source.bin_separation_tau);
        ExperimentSetup {
            source,
            transformer: TransformerConfig::default(),
            decoder: DecoderConfig::default(),
            alice_basis: Basis::Z,
            detectors: DetectorSet::default(),
            coincidence,
            temperature: TemperatureModel::default(),
        }
    }
}

impl ExperimentSetup {
    /// Lossless, noiseless link with perfect detectors (Bob still gated so
    /// that time slots are resolved).
    pub fn ideal() -> Self {
        let mut s = ExperimentSetup::default();
        s.transformer = TransformerConfig::ideal();
        s.source.phase_sigma = 0.0;
        s.detectors.alice = DetectorConfig::ideal();
        s.detectors.bob = DetectorConfig { gated: true, gate_width: 1e-9, ..DetectorConfig::ideal() };
        s
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = ExperimentError::InvalidSetup;
        self.source.validate().map_err(err)?;
        self.transformer.validate().map_err(err)?;
        if self.transformer.delay_slots != 1 {
            return Err(err("transformer.delay_slots".into()));
        }
        self.decoder.validate().map_err(err)?;
        self.detectors.alice.validate("detectors.A").map_err(err)?;
        self.detectors.bob.validate("detectors.B").map_err(err)?;
        self.coincidence.validate().map_err(err)?;
        if !(self.temperature.period_k > 0.0 && self.temperature.period_k.is_finite()) {
            return Err(err("temperature.period_k".into()));
        }
        if !self.temperature.t0.is_finite() {
            return Err(err("temperature.t0".into()));
        }
        Ok(())
    }

    pub fn with_basis(&self, basis: Basis) -> Self {
        ExperimentSetup { alice_basis: basis, ..self.clone() }
    }

    pub fn with_phase(&self, phi: f64) -> Self {
        let mut s = self.clone();
        s.decoder.phase_phi = phi;
        s
    }

    pub fn with_scan_delay(&self, d: f64) -> Self {
        let mut s = self.clone();
        s.coincidence.scan_delay = d;
        s
    }
}

/// Bob's logical detectors fed by a physical decoder port, with the power
/// share each receives. The direct branch fans out 50/50 to B.Z0 and B.Z1.
pub fn fanout(port: Channel) -> &'static [(Channel, f64)] {
    match port {
        Channel::BZdir => &[(Channel::BZ0, 0.5), (Channel::BZ1, 0.5)],
        Channel::BXPlus => &[(Channel::BXPlus, 1.0)],
        Channel::BXMinus => &[(Channel::BXMinus, 1.0)],
        _ => &[],
    }
}
