//! Linear maps for the optical components of the link.
//!
//! Alice's side: 45° polarizer, Glan-prism/PM-fiber delay loop (the format
//! transformer), half-wave plate and PBS analyzer. Bob's side: the
//! polarization-insensitive PLC decoder with a direct branch and an AMZI.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::mode_state::{Channel, LinearMap, MapOutput, Party, Pol};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.998e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub fn name(self) -> &'static str {
        match self {
            Basis::Z => "Z",
            Basis::X => "X",
        }
    }

    pub fn alice_channels(self) -> [Channel; 2] {
        match self {
            Basis::Z => [Channel::AZ0, Channel::AZ1],
            Basis::X => [Channel::AXPlus, Channel::AXMinus],
        }
    }

    pub fn bob_channels(self) -> [Channel; 2] {
        match self {
            Basis::Z => [Channel::BZ0, Channel::BZ1],
            Basis::X => [Channel::BXPlus, Channel::BXMinus],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Polarizer transmission axis, degrees from H.
    pub polarizer_angle: f64,
    pub excess_loss_db: f64,
    /// Amplitude transmission of the PM-fiber delay path.
    pub pm_fiber_transmission: f64,
    /// Power extinction ratio of the Glan prism; `f64::INFINITY` is ideal.
    pub glan_extinction_ratio: f64,
    pub delay_slots: u8,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            polarizer_angle: 45.0,
            excess_loss_db: 1.5,
            pm_fiber_transmission: 1.0,
            glan_extinction_ratio: 1e6,
            delay_slots: 1,
        }
    }
}

impl TransformerConfig {
    pub fn ideal() -> Self {
        TransformerConfig {
            excess_loss_db: 0.0,
            glan_extinction_ratio: f64::INFINITY,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.excess_loss_db >= 0.0) || !self.excess_loss_db.is_finite() {
            return Err("transformer.excess_loss_db".into());
        }
        if !(self.pm_fiber_transmission > 0.0 && self.pm_fiber_transmission <= 1.0) {
            return Err("transformer.pm_fiber_transmission".into());
        }
        if !(self.glan_extinction_ratio > 1.0) {
            return Err("transformer.glan_extinction_ratio".into());
        }
        if !self.polarizer_angle.is_finite() {
            return Err("transformer.polarizer_angle".into());
        }
        if self.delay_slots == 0 {
            return Err("transformer.delay_slots".into());
        }
        Ok(())
    }

    /// Amplitude leaked between the two Glan paths.
    pub fn leakage(&self) -> f64 {
        if self.glan_extinction_ratio.is_infinite() {
            0.0
        } else {
            self.glan_extinction_ratio.powf(-0.5)
        }
    }

    /// Amplitude factor of the aggregate excess loss.
    pub fn excess_amplitude(&self) -> f64 {
        10f64.powf(-self.excess_loss_db / 20.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// AMZI relative phase, radians.
    pub phase_phi: f64,
    /// Power fraction sent to the direct (time-of-arrival) branch.
    pub z_branch_ratio: f64,
    pub delay_slots: u8,
    pub insertion_loss_db: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { phase_phi: 0.0, z_branch_ratio: 0.5, delay_slots: 1, insertion_loss_db: 0.0 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.z_branch_ratio) {
            return Err("decoder.z_branch_ratio".into());
        }
        if self.delay_slots != 1 {
            return Err("decoder.delay_slots".into());
        }
        if !(self.insertion_loss_db >= 0.0) || !self.insertion_loss_db.is_finite() {
            return Err("decoder.insertion_loss_db".into());
        }
        if !self.phase_phi.is_finite() {
            return Err("decoder.phase_phi".into());
        }
        Ok(())
    }

    /// Power fraction entering the interferometer.
    pub fn interferometer_ratio(&self) -> f64 {
        1.0 - self.z_branch_ratio
    }

    pub fn transmission(&self) -> f64 {
        10f64.powf(-self.insertion_loss_db / 10.0)
    }
}

fn out(slot_shift: u8, pol: Pol, channel: Channel) -> MapOutput {
    MapOutput { slot_shift, pol, channel }
}

fn re(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

fn alice_map(rules: Vec<((Pol, Channel), Vec<(MapOutput, Complex64)>)>) -> LinearMap {
    LinearMap::new(Party::A, rules).expect("optics constructors emit valid Alice maps")
}

/// Ideal linear polarizer with its transmission axis at `angle` degrees.
pub fn polarizer_map(angle: f64) -> LinearMap {
    let (s, c) = angle.to_radians().sin_cos();
    // |a⟩⟨a| with |a⟩ = cos|H⟩ + sin|V⟩.
    alice_map(vec![
        ((Pol::H, Channel::Free), vec![(out(0, Pol::H, Channel::Free), re(c * c)), (out(0, Pol::V, Channel::Free), re(c * s))]),
        ((Pol::V, Channel::Free), vec![(out(0, Pol::H, Channel::Free), re(s * c)), (out(0, Pol::V, Channel::Free), re(s * s))]),
    ])
}

/// Half-wave plate with its fast axis at `angle` degrees.
pub fn hwp_map(angle: f64) -> LinearMap {
    let (s2, c2) = (2.0 * angle.to_radians()).sin_cos();
    alice_map(vec![
        ((Pol::H, Channel::Free), vec![(out(0, Pol::H, Channel::Free), re(c2)), (out(0, Pol::V, Channel::Free), re(s2))]),
        ((Pol::V, Channel::Free), vec![(out(0, Pol::H, Channel::Free), re(s2)), (out(0, Pol::V, Channel::Free), re(-c2))]),
    ])
}

/// Glan prism plus PM-fiber loop: H keeps its slot, V is delayed. Finite
/// extinction cross-couples amplitude `ε` between the two paths, each photon
/// keeping its polarization.
fn glan_delay_map(cfg: &TransformerConfig) -> LinearMap {
    let eps = cfg.leakage();
    let keep = (1.0 - eps * eps).sqrt();
    let t = cfg.pm_fiber_transmission;
    let d = cfg.delay_slots;
    alice_map(vec![
        ((Pol::H, Channel::Free), vec![(out(0, Pol::H, Channel::Free), re(keep)), (out(d, Pol::H, Channel::Free), re(eps * t))]),
        ((Pol::V, Channel::Free), vec![(out(d, Pol::V, Channel::Free), re(keep * t)), (out(0, Pol::V, Channel::Free), re(eps))]),
    ])
}

fn uniform_alice_loss(amplitude: f64) -> LinearMap {
    alice_map(vec![
        ((Pol::H, Channel::Free), vec![(out(0, Pol::H, Channel::Free), re(amplitude))]),
        ((Pol::V, Channel::Free), vec![(out(0, Pol::V, Channel::Free), re(amplitude))]),
    ])
}

/// Time-bin to polarization format transformer.
pub fn format_transformer_map(cfg: &TransformerConfig) -> LinearMap {
    polarizer_map(cfg.polarizer_angle)
        .then(&glan_delay_map(cfg))
        .and_then(|m| m.then(&uniform_alice_loss(cfg.excess_amplitude())))
        .expect("same-party composition")
}

/// Bob's 1×4 decoder: a splitter feeding the direct branch and a two-output
/// AMZI whose long arm adds `delay_slots` and the phase `phase_phi`.
pub fn plc_decoder_map(cfg: &DecoderConfig) -> LinearMap {
    let r = cfg.interferometer_ratio();
    let t = cfg.transmission().sqrt();
    let direct = (1.0 - r).sqrt() * t;
    let half = 0.5 * r.sqrt() * t;
    let long = Complex64::from_polar(half, cfg.phase_phi);
    let d = cfg.delay_slots;
    LinearMap::new(
        Party::B,
        [(
            (Pol::None, Channel::Free),
            vec![
                (out(0, Pol::None, Channel::BZdir), re(direct)),
                (out(0, Pol::None, Channel::BXPlus), re(half)),
                (out(d, Pol::None, Channel::BXPlus), long),
                (out(0, Pol::None, Channel::BXMinus), re(half)),
                (out(d, Pol::None, Channel::BXMinus), -long),
            ],
        )],
    )
    .expect("decoder rows are sub-unitary")
}

/// Alice's polarization analyzer. Z: PBS with H → Z0, V → Z1. X: half-wave
/// plate at 22.5° before the same PBS, H → X+, V → X−.
pub fn pbs_analyzer_map(basis: Basis) -> LinearMap {
    let (ch, cv) = match basis {
        Basis::Z => (Channel::AZ0, Channel::AZ1),
        Basis::X => (Channel::AXPlus, Channel::AXMinus),
    };
    let pbs = alice_map(vec![
        ((Pol::H, Channel::Free), vec![(out(0, Pol::H, ch), re(1.0))]),
        ((Pol::V, Channel::Free), vec![(out(0, Pol::V, cv), re(1.0))]),
    ]);
    match basis {
        Basis::Z => pbs,
        Basis::X => hwp_map(22.5).then(&pbs).expect("same-party composition"),
    }
}

/// Delay of a waveguide of `length_m` metres with group index `group_index`.
pub fn guide_delay(length_m: f64, group_index: f64) -> f64 {
    length_m * group_index / SPEED_OF_LIGHT
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;
    use crate::mode_state::{apply_local_map, outcome_probabilities, JointState, ModeLabel};

    fn coeffs(map: &LinearMap, pol: Pol) -> Vec<(MapOutput, Complex64)> {
        map.rules().find(|(k, _)| **k == (pol, Channel::Free)).map(|(_, v)| v.clone()).unwrap_or_default()
    }

    fn coeff(map: &LinearMap, pol: Pol, o: MapOutput) -> Complex64 {
        coeffs(map, pol).into_iter().find(|(k, _)| *k == o).map(|(_, c)| c).unwrap_or_default()
    }

    #[test]
    fn polarizer_45_splits_h() {
        let m = polarizer_map(45.0);
        assert!((coeff(&m, Pol::H, out(0, Pol::H, Channel::Free)).re - 0.5).abs() < 1e-15);
        assert!((coeff(&m, Pol::H, out(0, Pol::V, Channel::Free)).re - 0.5).abs() < 1e-15);
    }

    #[test]
    fn polarizer_limits() {
        let m = polarizer_map(0.0);
        assert_eq!(coeffs(&m, Pol::H), vec![(out(0, Pol::H, Channel::Free), re(1.0))]);
        let m = polarizer_map(90.0);
        assert!(coeffs(&m, Pol::H).is_empty());
    }

    #[test]
    fn hwp_22_5_and_0() {
        let m = hwp_map(22.5);
        let s = FRAC_1_SQRT_2;
        assert!((coeff(&m, Pol::H, out(0, Pol::H, Channel::Free)).re - s).abs() < 1e-15);
        assert!((coeff(&m, Pol::H, out(0, Pol::V, Channel::Free)).re - s).abs() < 1e-15);
        assert!((coeff(&m, Pol::V, out(0, Pol::H, Channel::Free)).re - s).abs() < 1e-15);
        assert!((coeff(&m, Pol::V, out(0, Pol::V, Channel::Free)).re + s).abs() < 1e-15);
        let m = hwp_map(0.0);
        assert_eq!(coeff(&m, Pol::V, out(0, Pol::V, Channel::Free)), re(-1.0));
        assert!(m.is_lossless());
    }

    #[test]
    fn hwp_twice_is_identity() {
        for ang in [0.0, 13.0, 22.5, 61.0] {
            let m = hwp_map(ang).then(&hwp_map(ang)).unwrap();
            for p in [Pol::H, Pol::V] {
                let cs = coeffs(&m, p);
                for (o, c) in cs {
                    let expect = if o.pol == p { 1.0 } else { 0.0 };
                    assert!((c - re(expect)).norm() < 1e-12, "{ang} {p:?} {o:?} {c}");
                }
            }
        }
    }

    #[test]
    fn ideal_transformer_routes_h() {
        let m = format_transformer_map(&TransformerConfig::ideal());
        let cs = coeffs(&m, Pol::H);
        assert_eq!(cs.len(), 2);
        assert!((coeff(&m, Pol::H, out(0, Pol::H, Channel::Free)).re - 0.5).abs() < 1e-15);
        assert!((coeff(&m, Pol::H, out(1, Pol::V, Channel::Free)).re - 0.5).abs() < 1e-15);
    }

    #[test]
    fn excess_loss_scales_every_coefficient() {
        let cfg = TransformerConfig { excess_loss_db: 1.5, ..TransformerConfig::ideal() };
        let g = 10f64.powf(-0.075);
        assert!((g - 0.8414).abs() < 1e-4);
        let m = format_transformer_map(&cfg);
        for (_, c) in coeffs(&m, Pol::H) {
            assert!((c.re - 0.5 * g).abs() < 1e-15);
        }
        let power: f64 = coeffs(&m, Pol::H).iter().map(|(_, c)| c.norm_sqr()).sum();
        assert!((power / 0.5 - 0.708).abs() < 1e-3);
    }

    #[test]
    fn decoder_rows_lossless_without_insertion_loss() {
        for (phi, z) in [(0.0, 0.5), (1.0, 0.2), (3.0, 0.9), (5.5, 0.0), (0.3, 1.0)] {
            let m = plc_decoder_map(&DecoderConfig { phase_phi: phi, z_branch_ratio: z, ..Default::default() });
            assert!((m.row_norm_sqr((Pol::None, Channel::Free)) - 1.0).abs() < 1e-12);
        }
    }

    fn decoder_probs(phi: f64) -> crate::mode_state::ProbTable {
        let s = FRAC_1_SQRT_2;
        let a = ModeLabel::alice(1, Pol::H).with_channel(Channel::AZ0);
        let state = JointState::new([((a, ModeLabel::bob(0)), re(s)), ((a, ModeLabel::bob(1)), re(s))]).unwrap();
        let m = plc_decoder_map(&DecoderConfig { phase_phi: phi, z_branch_ratio: 0.5, ..Default::default() });
        outcome_probabilities(&apply_local_map(&state, &m).unwrap()).unwrap()
    }

    #[test]
    fn decoder_central_slot_fringe() {
        let t = decoder_probs(0.0);
        assert!((t.get(Channel::AZ0, 1, Channel::BXPlus, 1) - 0.25).abs() < 1e-15);
        assert!(t.get(Channel::AZ0, 1, Channel::BXMinus, 1).abs() < 1e-15);
        let t = decoder_probs(std::f64::consts::PI);
        assert!(t.get(Channel::AZ0, 1, Channel::BXPlus, 1).abs() < 1e-15);
        assert!((t.get(Channel::AZ0, 1, Channel::BXMinus, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn analyzer_z_and_x() {
        let z = pbs_analyzer_map(Basis::Z);
        assert_eq!(coeffs(&z, Pol::H), vec![(out(0, Pol::H, Channel::AZ0), re(1.0))]);

        let x = pbs_analyzer_map(Basis::X);
        let b = ModeLabel::bob(0).with_channel(Channel::BZdir);
        let s = FRAC_1_SQRT_2;
        // |+45⟩ lands entirely on X+.
        let plus = JointState::new([
            ((ModeLabel::alice(1, Pol::H), b), re(s)),
            ((ModeLabel::alice(1, Pol::V), b), re(s)),
        ])
        .unwrap();
        let t = outcome_probabilities(&apply_local_map(&plus, &x).unwrap()).unwrap();
        assert!((t.get(Channel::AXPlus, 1, Channel::BZdir, 0) - 1.0).abs() < 1e-12);
        assert_eq!(t.get(Channel::AXMinus, 1, Channel::BZdir, 0), 0.0);
        // H splits evenly.
        let h = JointState::new([((ModeLabel::alice(1, Pol::H), b), re(1.0))]).unwrap();
        let t = outcome_probabilities(&apply_local_map(&h, &x).unwrap()).unwrap();
        assert!((t.get(Channel::AXPlus, 1, Channel::BZdir, 0) - 0.5).abs() < 1e-12);
        assert!((t.get(Channel::AXMinus, 1, Channel::BZdir, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spiral_guide_gives_quoted_delay() {
        let d = guide_delay(0.50, 1.50);
        assert!((d - 2.50e-9).abs() < 0.01e-9, "{d}");
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::default().validate().is_ok());
        assert!(TransformerConfig { glan_extinction_ratio: 1.0, ..Default::default() }.validate().is_err());
        assert!(TransformerConfig { excess_loss_db: -0.1, ..Default::default() }.validate().is_err());
        assert!(DecoderConfig { z_branch_ratio: 1.2, ..Default::default() }.validate().is_err());
        assert!(DecoderConfig { delay_slots: 2, ..Default::default() }.validate().is_err());
    }
}
