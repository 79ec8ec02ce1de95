//! Exact outcome distributions and the expected-count model.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI, SQRT_2};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::{fanout, ExperimentError, ExperimentSetup};
use crate::mode_state::{
    apply_local_map, outcome_probabilities, Channel, JointState, ModeLabel, Pol, ProbTable,
};
use crate::optics::{format_transformer_map, pbs_analyzer_map, plc_decoder_map, Basis};

/// Two-bin source state `(|0,0⟩ + e^{iΔθ}|1,1⟩)/√2` over time slots, Alice's
/// photon H-polarized.
pub fn source_state(delta_theta: f64) -> JointState {
    JointState::new([
        ((ModeLabel::alice(0, Pol::H), ModeLabel::bob(0)), Complex64::new(FRAC_1_SQRT_2, 0.0)),
        ((ModeLabel::alice(1, Pol::H), ModeLabel::bob(1)), Complex64::from_polar(FRAC_1_SQRT_2, delta_theta)),
    ])
    .expect("normalized source state")
}

/// Full two-bin outcome table: source, format transformer, Alice analyzer
/// and Bob decoder, all time slots kept.
pub fn analytic_distribution(setup: &ExperimentSetup, delta_theta: f64) -> Result<ProbTable, ExperimentError> {
    setup.validate()?;
    let mut s = source_state(delta_theta);
    s = apply_local_map(&s, &format_transformer_map(&setup.transformer))?;
    s = apply_local_map(&s, &pbs_analyzer_map(setup.alice_basis))?;
    s = apply_local_map(&s, &plc_decoder_map(&setup.decoder))?;
    Ok(outcome_probabilities(&s)?)
}

/// Per-pair outcome table of the continuously pumped source.
///
/// Alice's central slot 1 is the only slot where both emission bins meet,
/// which is the situation of every CW pair; doubling its coincidence mass
/// gives the per-pair joint law. Photons whose partner is lost appear as
/// `Lost` on the other side; Alice's single photons sit in slot 1, Bob's at
/// the slots of their decoder path.
pub fn pair_distribution(setup: &ExperimentSetup, delta_theta: f64) -> Result<ProbTable, ExperimentError> {
    let full = analytic_distribution(setup, delta_theta)?;
    let tb = setup.decoder.transmission();
    let r = setup.decoder.interferometer_ratio();
    let mut entries: BTreeMap<(Channel, u8, Channel, u8), f64> = BTreeMap::new();
    let mut alice_joint: BTreeMap<Channel, f64> = BTreeMap::new();
    let mut bob_joint: BTreeMap<Channel, f64> = BTreeMap::new();
    for (&(ca, sa, cb, sb), &p) in &full.entries {
        if sa != 1 {
            continue;
        }
        let q = 2.0 * p;
        entries.insert((ca, 1, cb, sb), q);
        *alice_joint.entry(ca).or_default() += q;
        *bob_joint.entry(cb).or_default() += q;
    }
    for (&ca, &q) in &alice_joint {
        let single = q / tb - q;
        if single > 0.0 {
            entries.insert((ca, 1, Channel::Lost, 0), single);
        }
    }
    let bob_marginal = [
        (Channel::BZdir, tb * (1.0 - r)),
        (Channel::BXPlus, 0.5 * tb * r),
        (Channel::BXMinus, 0.5 * tb * r),
    ];
    for (cb, pb) in bob_marginal {
        let single = pb - bob_joint.get(&cb).copied().unwrap_or(0.0);
        if single <= 0.0 {
            continue;
        }
        if cb == Channel::BZdir {
            entries.insert((Channel::Lost, 0, cb, 1), single);
        } else {
            entries.insert((Channel::Lost, 0, cb, 1), 0.5 * single);
            entries.insert((Channel::Lost, 0, cb, 2), 0.5 * single);
        }
    }
    Ok(ProbTable::from_entries(entries))
}

/// Pair table averaged over `Δθ ~ Normal(phase_mean, phase_sigma)`.
///
/// Every entry is a first harmonic in Δθ, so two evaluations half a turn
/// apart give the average exactly.
pub fn averaged_pair_distribution(setup: &ExperimentSetup) -> Result<ProbTable, ExperimentError> {
    let mean = setup.source.phase_mean;
    let sigma = setup.source.phase_sigma;
    let p0 = pair_distribution(setup, mean)?;
    if sigma == 0.0 {
        return Ok(p0);
    }
    let pi = pair_distribution(setup, mean + PI)?;
    let damp = (-0.5 * sigma * sigma).exp();
    let mut keys: Vec<_> = p0.entries.keys().chain(pi.entries.keys()).copied().collect();
    keys.sort();
    keys.dedup();
    Ok(ProbTable::from_entries(keys.into_iter().map(|k| {
        let a = p0.entries.get(&k).copied().unwrap_or(0.0);
        let b = pi.entries.get(&k).copied().unwrap_or(0.0);
        (k, 0.5 * (a + b) + damp * 0.5 * (a - b))
    })))
}

fn correct_wrong(table: &ProbTable, basis: Basis) -> (f64, f64) {
    let p = |ca, cb, sb| table.get(ca, 1, cb, sb);
    match basis {
        Basis::Z => (
            p(Channel::AZ0, Channel::BZdir, 1) + p(Channel::AZ1, Channel::BZdir, 0),
            p(Channel::AZ0, Channel::BZdir, 0) + p(Channel::AZ1, Channel::BZdir, 1),
        ),
        Basis::X => (
            p(Channel::AXPlus, Channel::BXPlus, 1) + p(Channel::AXMinus, Channel::BXMinus, 1),
            p(Channel::AXPlus, Channel::BXMinus, 1) + p(Channel::AXMinus, Channel::BXPlus, 1),
        ),
    }
}

/// Visibility of Alice-slot-1 coincidences in `basis`. In X only Bob's
/// central slot is used, in Z the direct branch at both slots.
pub fn conditional_visibility(table: &ProbTable, basis: Basis) -> f64 {
    let (c, w) = correct_wrong(table, basis);
    if c + w > 0.0 {
        (c - w) / (c + w)
    } else {
        0.0
    }
}

/// Decoder phase maximizing the phase-averaged X correlation.
pub fn aligned_phase(setup: &ExperimentSetup) -> Result<f64, ExperimentError> {
    let x = setup.with_basis(Basis::X);
    let corr = |phi: f64| -> Result<f64, ExperimentError> {
        let t = averaged_pair_distribution(&x.with_phase(phi))?;
        let (c, w) = correct_wrong(&t, Basis::X);
        Ok(c - w)
    };
    let (e0, e1, e2) = (corr(0.0)?, corr(FRAC_PI_2)?, corr(PI)?);
    let a = 0.5 * (e0 - e2);
    let b = e1 - 0.5 * (e0 + e2);
    Ok(b.atan2(a))
}

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Probability that `m + N(0, sigma)` lies in `[-half, half]`.
fn capture(m: f64, half: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        (phi((half - m) / sigma) - phi((-half - m) / sigma)).max(0.0)
    } else if m.abs() <= half {
        1.0
    } else {
        0.0
    }
}

/// Expected coincidence rates (c/s) for each (Alice, Bob) detector pair at
/// the setup's basis, decoder phase and scan delay.
///
/// Counts true pairs captured by Bob's gate, unrelated photons and dark
/// counts inside gates opened by the same Alice channel, and Bob clicks of
/// other Alice channels' gates that fall in the coincidence window.
pub fn expected_coincidences(setup: &ExperimentSetup) -> Result<BTreeMap<(Channel, Channel), f64>, ExperimentError> {
    let table = averaged_pair_distribution(setup)?;
    let mu = setup.source.pair_rate_mu;
    let tau = setup.source.bin_separation_tau;
    let da = &setup.detectors.alice;
    let db = &setup.detectors.bob;
    let cc = &setup.coincidence;
    let scan = cc.scan_delay;
    let alice = setup.alice_basis.alice_channels();

    let mut bob_marg: BTreeMap<Channel, f64> = BTreeMap::new();
    let mut alice_rate: BTreeMap<Channel, f64> = BTreeMap::new();
    let mut alice_live: BTreeMap<Channel, f64> = BTreeMap::new();
    for (&(ca, _, cb, _), &p) in &table.entries {
        for &(b, share) in fanout(cb) {
            *bob_marg.entry(b).or_default() += p * share;
        }
        if ca != Channel::Lost {
            *alice_rate.entry(ca).or_default() += p;
        }
    }
    for &a in &alice {
        let raw = mu * alice_rate.get(&a).copied().unwrap_or(0.0) * da.efficiency + da.dark_rate;
        let live = 1.0 / (1.0 + raw * da.dead_time);
        alice_rate.insert(a, raw * live);
        alice_live.insert(a, live);
    }

    let sigma_win = da.jitter_sigma.hypot(db.jitter_sigma);
    let half_w = 0.5 * cc.window;
    let catch = |a: Channel, b: Channel, slot_b: u8| -> f64 {
        let rel = (f64::from(slot_b) - 1.0) * tau + cc.offset(b) - cc.offset(a);
        let win = capture(rel - scan, half_w, sigma_win);
        if db.gated {
            win * capture(rel - cc.generator_delay - scan, 0.5 * db.gate_width, da.jitter_sigma)
        } else {
            win
        }
    };

    let mut truth: BTreeMap<(Channel, Channel), f64> = BTreeMap::new();
    for (&(ca, sa, cb, sb), &p) in &table.entries {
        if sa != 1 || !alice.contains(&ca) {
            continue;
        }
        for &(b, share) in fanout(cb) {
            let rate = mu * p * share * da.efficiency * alice_live[&ca] * db.efficiency * catch(ca, b, sb);
            *truth.entry((ca, b)).or_default() += rate;
        }
    }

    let open = if db.gated { db.gate_width } else { cc.window };
    let mut in_gate: BTreeMap<(Channel, Channel), f64> = BTreeMap::new();
    for &a in &alice {
        for b in Channel::BOB_DETECTORS {
            let bob_rate = mu * bob_marg.get(&b).copied().unwrap_or(0.0) * db.efficiency + db.dark_rate;
            let acc = alice_rate[&a] * bob_rate * open;
            let t = truth.get(&(a, b)).copied().unwrap_or(0.0);
            in_gate.insert((a, b), t + acc);
        }
    }
    let mut out = BTreeMap::new();
    for &a in &alice {
        for b in Channel::BOB_DETECTORS {
            let mut c = in_gate[&(a, b)];
            if db.gated {
                let others: f64 = alice.iter().filter(|&&x| x != a).map(|&x| in_gate[&(x, b)]).sum();
                c += alice_rate[&a] * cc.window * others;
            }
            out.insert((a, b), c);
        }
    }
    Ok(out)
}

/// Headline link figures: Z visibility and rate at zero scan delay, X
/// visibility and rate at the aligned decoder phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub v_zz: f64,
    pub v_xx: f64,
    pub r_z: f64,
    pub r_x: f64,
}

/// Visibility and total rate from the four coincidence pairs of `basis`.
pub(crate) fn basis_figures(counts: &BTreeMap<(Channel, Channel), f64>, basis: Basis) -> (f64, f64) {
    let [a0, a1] = basis.alice_channels();
    let [b0, b1] = basis.bob_channels();
    let g = |a, b| counts.get(&(a, b)).copied().unwrap_or(0.0);
    let c = g(a0, b0) + g(a1, b1);
    let w = g(a0, b1) + g(a1, b0);
    let v = if c + w > 0.0 { (c - w) / (c + w) } else { 0.0 };
    (v, c + w)
}

pub fn expected_metrics(setup: &ExperimentSetup) -> Result<LinkMetrics, ExperimentError> {
    let z = setup.with_basis(Basis::Z).with_scan_delay(0.0);
    let (v_zz, r_z) = basis_figures(&expected_coincidences(&z)?, Basis::Z);
    let phi = aligned_phase(setup)?;
    let x = setup.with_basis(Basis::X).with_phase(phi).with_scan_delay(0.0);
    let (v_xx, r_x) = basis_figures(&expected_coincidences(&x)?, Basis::X);
    Ok(LinkMetrics { v_zz, v_xx, r_z, r_x })
}
