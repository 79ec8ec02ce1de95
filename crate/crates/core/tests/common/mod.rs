//! Property checks shared by the property tests and the acceptance run.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt::Debug;

use num_complex::Complex64;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hybrid_qkd::analysis::{key_fraction, security_metrics, visibility};
use hybrid_qkd::cli::{parse_config_str, serialize_config};
use hybrid_qkd::experiment::{analytic_distribution, pair_distribution, run_chunk_range, run_montecarlo, ExperimentSetup};
use hybrid_qkd::mode_state::{apply_local_map, outcome_probabilities, Channel, JointState, LinearMap, ModeLabel, Pol};
use hybrid_qkd::optics::{
    format_transformer_map, hwp_map, pbs_analyzer_map, plc_decoder_map, polarizer_map, Basis, DecoderConfig,
    TransformerConfig,
};
use hybrid_qkd::source_detect::{coincidences, detect, Arrival, ClickEvent, DetectorConfig, GateSet, Origin};

pub type Invariant = fn(u32) -> Result<(), String>;

/// Every invariant with its name. The argument is the number of cases.
pub const INVARIANTS: &[(&str, Invariant)] = &[
    ("sub-unitarity of every optical map", sub_unitarity),
    ("lossless maps preserve the norm", lossless_norm),
    ("probabilities plus loss sum to one", normalization),
    ("global phase leaves probabilities unchanged", global_phase),
    ("map composition equals sequential application", composition),
    ("decoder central-slot fringe law", decoder_fringe),
    ("decoder phase is 2π-periodic", phi_periodicity),
    ("detection never adds photon clicks", detect_thins),
    ("pairing symmetric under role swap", pairing_symmetry),
    ("same seed gives the same run", seed_determinism),
    ("chunk merges are associative and exact", merge_associativity),
    ("visibility antisymmetry and error scaling", visibility_properties),
    ("key fraction monotone with zero at 0.1100", key_fraction_properties),
    ("CHSH above 2 iff Bell violated", chsh_bell),
    ("config text round trip", config_round_trip),
];

fn run<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let cfg = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
    (a - b).norm() <= tol
}

// Strategies.

fn transformer() -> impl Strategy<Value = TransformerConfig> {
    (0.0..180.0f64, 0.0..6.0f64, 0.3..=1.0f64, prop_oneof![Just(f64::INFINITY), 1.5..1e8f64]).prop_map(
        |(polarizer_angle, excess_loss_db, pm_fiber_transmission, glan_extinction_ratio)| TransformerConfig {
            polarizer_angle,
            excess_loss_db,
            pm_fiber_transmission,
            glan_extinction_ratio,
            delay_slots: 1,
        },
    )
}

fn decoder() -> impl Strategy<Value = DecoderConfig> {
    (-10.0..10.0f64, 0.0..=1.0f64, 0.0..5.0f64).prop_map(|(phase_phi, z_branch_ratio, insertion_loss_db)| {
        DecoderConfig { phase_phi, z_branch_ratio, delay_slots: 1, insertion_loss_db }
    })
}

fn basis() -> impl Strategy<Value = Basis> {
    prop_oneof![Just(Basis::Z), Just(Basis::X)]
}

/// Random sub-normalized state over Alice (slot, pol) and Bob slot modes.
fn state() -> impl Strategy<Value = JointState> {
    (prop::collection::vec((0u8..3, any::<bool>(), 0u8..3, -1.0..1.0f64, -1.0..1.0f64), 1..6), 0.05..=1.0f64)
        .prop_filter_map("zero state", |(terms, norm)| {
            let mut amps: BTreeMap<(ModeLabel, ModeLabel), Complex64> = BTreeMap::new();
            for (sa, h, sb, re, im) in terms {
                let pol = if h { Pol::H } else { Pol::V };
                *amps.entry((ModeLabel::alice(sa, pol), ModeLabel::bob(sb))).or_default() += Complex64::new(re, im);
            }
            let n: f64 = amps.values().map(|a| a.norm_sqr()).sum();
            if n < 1e-6 {
                return None;
            }
            let k = (norm / n).sqrt();
            JointState::new(amps.into_iter().map(|(l, a)| (l, a * k))).ok()
        })
}

/// Random chain of Alice-side maps.
fn alice_maps() -> impl Strategy<Value = Vec<LinearMap>> {
    prop::collection::vec(
        prop_oneof![
            (0.0..180.0f64).prop_map(|a| polarizer_map(a)),
            (-90.0..90.0f64).prop_map(|a| hwp_map(a)),
            transformer().prop_map(|t| format_transformer_map(&t)),
        ],
        1..4,
    )
}

/// State through the full chain: Alice maps, analyzer, decoder.
fn through_chain(s: &JointState, maps: &[LinearMap], b: Basis, d: &DecoderConfig) -> JointState {
    let mut s = s.clone();
    for m in maps {
        s = apply_local_map(&s, m).unwrap();
    }
    s = apply_local_map(&s, &pbs_analyzer_map(b)).unwrap();
    apply_local_map(&s, &plc_decoder_map(d)).unwrap()
}

fn setup() -> impl Strategy<Value = ExperimentSetup> {
    (transformer(), decoder(), basis(), 0.0..1.5f64, -PI..PI).prop_map(|(t, d, b, sigma, mean)| {
        let mut s = ExperimentSetup::default();
        s.transformer = t;
        s.decoder = d;
        s.alice_basis = b;
        s.source.phase_sigma = sigma;
        s.source.phase_mean = mean;
        s
    })
}

// Invariants.

fn sub_unitarity(cases: u32) -> Result<(), String> {
    run(cases, (state(), alice_maps(), basis(), decoder()), |(s, maps, b, d)| {
        let mut all = maps.clone();
        all.push(pbs_analyzer_map(b));
        all.push(plc_decoder_map(&d));
        let mut cur = s;
        for m in &all {
            for (input, _) in m.rules() {
                prop_assert!(m.row_norm_sqr(*input) <= 1.0 + 1e-12);
            }
            let next = apply_local_map(&cur, m).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(next.norm_sqr() <= cur.norm_sqr() + 1e-12, "{} > {}", next.norm_sqr(), cur.norm_sqr());
            cur = next;
        }
        Ok(())
    })
}

fn lossless_norm(cases: u32) -> Result<(), String> {
    let lossless = prop::collection::vec(
        prop_oneof![
            (-90.0..90.0f64).prop_map(|a| hwp_map(a)),
            basis().prop_map(pbs_analyzer_map),
            (-10.0..10.0f64, 0.0..=1.0f64).prop_map(|(p, z)| plc_decoder_map(&DecoderConfig {
                phase_phi: p,
                z_branch_ratio: z,
                delay_slots: 1,
                insertion_loss_db: 0.0
            })),
        ],
        1..4,
    );
    run(cases, (state(), lossless), |(s, maps)| {
        let mut cur = s;
        for m in &maps {
            prop_assert!(m.is_lossless());
            let n0 = cur.norm_sqr();
            cur = apply_local_map(&cur, m).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!((cur.norm_sqr() - n0).abs() <= 1e-12, "{} vs {}", cur.norm_sqr(), n0);
        }
        Ok(())
    })
}

fn normalization(cases: u32) -> Result<(), String> {
    run(cases, (setup(), -PI..PI), |(s, dt)| {
        let full = analytic_distribution(&s, dt).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((full.total() + full.loss_prob - 1.0).abs() <= 1e-9);
        let pair = pair_distribution(&s, dt).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((pair.total() + pair.loss_prob - 1.0).abs() <= 1e-9);
        Ok(())
    })?;
    run(cases, (state(), alice_maps(), basis(), decoder()), |(s, maps, b, d)| {
        let out = through_chain(&s, &maps, b, &d);
        let t = outcome_probabilities(&out).unwrap();
        let out_norm = out.norm_sqr();
        prop_assert!((t.total() - out_norm).abs() <= 1e-9);
        prop_assert!(t.loss_prob >= 0.0);
        Ok(())
    })
}

fn global_phase(cases: u32) -> Result<(), String> {
    run(cases, (state(), alice_maps(), basis(), decoder(), -TAU..TAU), |(s, maps, b, d, alpha)| {
        let p = outcome_probabilities(&through_chain(&s, &maps, b, &d)).unwrap();
        let q = outcome_probabilities(&through_chain(&s.with_global_phase(alpha), &maps, b, &d)).unwrap();
        let keys: std::collections::BTreeSet<_> = p.entries.keys().chain(q.entries.keys()).collect();
        for k in keys {
            let (x, y) = (p.entries.get(k).copied().unwrap_or(0.0), q.entries.get(k).copied().unwrap_or(0.0));
            prop_assert!((x - y).abs() <= 1e-12, "{k:?}: {x} vs {y}");
        }
        Ok(())
    })
}

fn composition(cases: u32) -> Result<(), String> {
    run(cases, (state(), alice_maps(), alice_maps()), |(s, m1, m2)| {
        let fold = |maps: &[LinearMap]| maps.iter().skip(1).fold(maps[0].clone(), |acc, m| acc.then(m).unwrap());
        let (a, b) = (fold(&m1), fold(&m2));
        let seq = apply_local_map(&apply_local_map(&s, &a).unwrap(), &b).unwrap();
        let comp = apply_local_map(&s, &a.then(&b).unwrap()).unwrap();
        for (x, y) in seq.iter().chain(comp.iter()).map(|(k, _)| k) {
            prop_assert!(close(seq.amplitude(x, y), comp.amplitude(x, y), 1e-12));
        }
        Ok(())
    })
}

fn decoder_fringe(cases: u32) -> Result<(), String> {
    run(cases, (0.0..=1.0f64, -10.0..10.0f64, -10.0..10.0f64), |(r, phi, delta)| {
        let d = DecoderConfig { phase_phi: phi, z_branch_ratio: 1.0 - r, delay_slots: 1, insertion_loss_db: 0.0 };
        let s = JointState::new([
            ((ModeLabel::alice(0, Pol::H).with_channel(Channel::AZ0), ModeLabel::bob(0)), Complex64::new(0.5f64.sqrt(), 0.0)),
            (
                (ModeLabel::alice(0, Pol::H).with_channel(Channel::AZ0), ModeLabel::bob(1)),
                Complex64::from_polar(0.5f64.sqrt(), delta),
            ),
        ])
        .unwrap();
        let t = outcome_probabilities(&apply_local_map(&s, &plc_decoder_map(&d)).unwrap()).unwrap();
        // Path enumeration: slot 0 through the long arm, slot 1 through the short arm.
        let h = 0.5 * r.sqrt();
        let amp = |sign: f64| {
            Complex64::from_polar(h * 0.5f64.sqrt(), phi) * sign + Complex64::from_polar(h * 0.5f64.sqrt(), delta)
        };
        let plus = amp(1.0).norm_sqr();
        let minus = amp(-1.0).norm_sqr();
        let law = r / 8.0 * (Complex64::new(1.0, 0.0) + Complex64::from_polar(1.0, phi - delta)).norm_sqr();
        prop_assert!((t.get(Channel::AZ0, 0, Channel::BXPlus, 1) - plus).abs() <= 1e-12);
        prop_assert!((t.get(Channel::AZ0, 0, Channel::BXMinus, 1) - minus).abs() <= 1e-12);
        prop_assert!((plus - law).abs() <= 1e-12);
        Ok(())
    })
}

fn phi_periodicity(cases: u32) -> Result<(), String> {
    run(cases, (setup(), -PI..PI), |(s, dt)| {
        let a = analytic_distribution(&s, dt).unwrap();
        let b = analytic_distribution(&s.with_phase(s.decoder.phase_phi + TAU), dt).unwrap();
        for k in a.entries.keys().chain(b.entries.keys()) {
            let (x, y) = (a.get(k.0, k.1, k.2, k.3), b.get(k.0, k.1, k.2, k.3));
            prop_assert!((x - y).abs() <= 1e-12, "{k:?}: {x} vs {y}");
        }
        Ok(())
    })
}

fn detector() -> impl Strategy<Value = DetectorConfig> {
    (0.0..=1.0f64, 0.0..1e6f64, 0.0..1e-9f64, 0.0..1e-7f64, any::<bool>()).prop_map(|(e, d, j, dead, gated)| {
        DetectorConfig {
            efficiency: e,
            dark_rate: d,
            jitter_sigma: j,
            dead_time: dead,
            gated,
            gate_width: if gated { 2e-9 } else { 0.0 },
        }
    })
}

fn detect_thins(cases: u32) -> Result<(), String> {
    let arrivals = prop::collection::vec(0.0..1e-3f64, 0..400);
    run(cases, (arrivals, detector(), any::<u64>()), |(mut times, det, seed)| {
        times.sort_by(f64::total_cmp);
        let arr: Vec<Arrival> = times.iter().map(|&t| Arrival { channel: Channel::BZ0, time: t }).collect();
        let mut gates = BTreeMap::new();
        if det.gated {
            gates.insert(Channel::BZ0, GateSet::from_centers(times.iter().step_by(2).copied().collect(), det.gate_width));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clicks = detect(&arr, &[(Channel::BZ0, det.clone())], &gates, (0.0, 1e-3), &mut rng);
        let photons = clicks.iter().filter(|c| c.origin == Origin::Photon).count();
        prop_assert!(photons <= arr.len());
        prop_assert!(clicks.windows(2).all(|w| w[0].time <= w[1].time));
        if det.dark_rate == 0.0 {
            prop_assert!(clicks.iter().all(|c| c.origin == Origin::Photon));
        }
        Ok(())
    })
}

fn pairing_symmetry(cases: u32) -> Result<(), String> {
    let stream = || prop::collection::vec(0.0..2e-6f64, 0..60);
    run(cases, (stream(), stream(), -30e-9..30e-9f64, -5e-9..5e-9f64, -5e-9..5e-9f64), |(a, b, d, oa, ob)| {
        let mk = |mut v: Vec<f64>, ch| -> Vec<ClickEvent> {
            v.sort_by(f64::total_cmp);
            v.into_iter().map(|time| ClickEvent { channel: ch, time, origin: Origin::Photon }).collect()
        };
        let (ca, cb) = (mk(a, Channel::AZ0), mk(b, Channel::BZ0));
        let mut cfg = hybrid_qkd::source_detect::CoincidenceConfig::with_tau(2.5e-9);
        cfg.channel_offsets = [(Channel::AZ0, oa), (Channel::BZ0, ob)].into_iter().collect();
        let fwd = coincidences(&ca, &cb, &cfg, d).unwrap();
        let rev = coincidences(&cb, &ca, &cfg, -d).unwrap();
        let n1 = fwd.counts.get(&(Channel::AZ0, Channel::BZ0)).copied().unwrap_or(0);
        let n2 = rev.counts.get(&(Channel::BZ0, Channel::AZ0)).copied().unwrap_or(0);
        prop_assert_eq!(n1, n2);
        Ok(())
    })
}

fn small_setup() -> impl Strategy<Value = ExperimentSetup> {
    (setup(), 1e3..5e4f64).prop_map(|(mut s, mu)| {
        s.source.pair_rate_mu = mu;
        s
    })
}

fn seed_determinism(cases: u32) -> Result<(), String> {
    run(cases.min(8), (small_setup(), any::<u64>()), |(s, seed)| {
        let a = run_montecarlo(&s, 0.03, seed).unwrap();
        let b = run_montecarlo(&s, 0.03, seed).unwrap();
        prop_assert_eq!(a, b);
        Ok(())
    })
}

fn merge_associativity(cases: u32) -> Result<(), String> {
    run(cases.min(8), (small_setup(), any::<u64>(), 1usize..3, 1usize..3), |(s, seed, i, j)| {
        let n = i + j + 1;
        let d = n as f64 * hybrid_qkd::experiment::CHUNK_DURATION;
        let part = |r: std::ops::Range<usize>| run_chunk_range(&s, d, seed, r).unwrap();
        let whole = part(0..n);
        let (l, m, r) = (part(0..i), part(i..i + j), part(i + j..n));
        let mut left = l.clone();
        left.merge(m.clone());
        left.merge(r.clone());
        let mut right = m;
        right.merge(r);
        let mut nested = l;
        nested.merge(right);
        prop_assert_eq!(&left, &whole);
        prop_assert_eq!(&nested, &whole);
        Ok(())
    })
}

fn visibility_properties(cases: u32) -> Result<(), String> {
    run(cases, (1.0..1e5f64, 1.0..1e5f64), |(a, b)| {
        let (v1, s1) = visibility(a, b).unwrap();
        let (v2, s2) = visibility(b, a).unwrap();
        prop_assert_eq!(v1, -v2);
        prop_assert_eq!(s1, s2);
        let (_, s100) = visibility(100.0 * a, 100.0 * b).unwrap();
        prop_assert!((s100 * 10.0 / s1 - 1.0).abs() <= 1e-12, "{s1} {s100}");
        Ok(())
    })
}

/// Root of h(e) = 1/2 on (0, 1/2) by bisection, with its own entropy.
pub fn half_entropy_root() -> f64 {
    let h = |e: f64| -e * e.log2() - (1.0 - e) * (1.0 - e).log2();
    let (mut lo, mut hi) = (1e-9, 0.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn key_fraction_properties(cases: u32) -> Result<(), String> {
    run(cases, (0.0..=0.5f64, 0.0..=0.5f64, 0.0..=0.5f64), |(q1, q2, other)| {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(key_fraction(hi, other, 1.0) <= key_fraction(lo, other, 1.0));
        prop_assert!(key_fraction(other, hi, 1.0) <= key_fraction(other, lo, 1.0));
        Ok(())
    })?;
    let root = half_entropy_root();
    if (root - 0.1100).abs() > 5e-5 {
        return Err(format!("h(e) = 1/2 root {root}"));
    }
    // The zero sits on equal error rates, 1 - 2 h(e) = 0. With qber_z = 0 the
    // fraction stays positive up to qber_x = 1/2.
    run(cases, 0.0..=0.5f64, |e| {
        prop_assert!(key_fraction(0.0, e, 1.0) > 0.0 || e >= 0.5 - 1e-12);
        let k = key_fraction(e, e, 1.0);
        if e >= root + 1e-12 {
            prop_assert_eq!(k, 0.0);
        } else if e < root - 1e-9 {
            prop_assert!(k > 0.0);
        }
        Ok(())
    })
}

fn chsh_bell(cases: u32) -> Result<(), String> {
    let v = || prop_oneof![-1.0..=1.0f64, Just(std::f64::consts::FRAC_1_SQRT_2), Just(0.7071), Just(0.70711)];
    run(cases, (v(), v()), |(vz, vx)| {
        let r = security_metrics(vz, vx, 100.0, 1.0).unwrap();
        prop_assert_eq!(r.bell_violated, r.chsh_s > 2.0);
        Ok(())
    })
}

fn config_round_trip(cases: u32) -> Result<(), String> {
    run(cases, (setup(), detector(), detector(), -1e-8..1e-8f64, 0.01..2.0f64), |(mut s, da, db, off, period)| {
        s.detectors.alice = da;
        s.detectors.bob = db;
        s.coincidence.channel_offsets.insert(Channel::AXMinus, off);
        s.temperature.period_k = period;
        let text = serialize_config(&s);
        let once = parse_config_str(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&once, &s);
        let twice = parse_config_str(&serialize_config(&once)).unwrap();
        prop_assert_eq!(twice, once);
        Ok(())
    })
}
