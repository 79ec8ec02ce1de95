//! Stochastic layer: pair emission, Born-rule sampling, detector response,
//! gating and coincidence identification.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mode_state::{Channel, ProbTable};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DetectError {
    #[error("{0} click stream is not time-sorted")]
    UnsortedInput(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    /// Pairs per second delivered into the collection modes.
    pub pair_rate_mu: f64,
    /// Mean pump phase difference between the two emission bins, radians.
    pub phase_mean: f64,
    /// Standard deviation of that phase difference, radians.
    pub phase_sigma: f64,
    /// Separation of the two time bins (AMZI delay), seconds.
    pub bin_separation_tau: f64,
    /// Recorded pump power, µW. Metadata only.
    pub pump_power_uw: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            pair_rate_mu: 2.0e5,
            phase_mean: 0.0,
            phase_sigma: 0.0,
            bin_separation_tau: 2.5e-9,
            pump_power_uw: 160.0,
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.pair_rate_mu >= 0.0 && self.pair_rate_mu.is_finite()) {
            return Err("source.pair_rate_mu".into());
        }
        if !self.phase_mean.is_finite() {
            return Err("source.phase_mean".into());
        }
        if !(self.phase_sigma >= 0.0 && self.phase_sigma.is_finite()) {
            return Err("source.phase_sigma".into());
        }
        if !(self.bin_separation_tau > 0.0 && self.bin_separation_tau.is_finite()) {
            return Err("source.bin_separation_tau".into());
        }
        if !self.pump_power_uw.is_finite() {
            return Err("source.pump_power_uw".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Dark counts per second. For gated detectors the rate applies while a
    /// gate is open.
    pub dark_rate: f64,
    pub jitter_sigma: f64,
    pub dead_time: f64,
    pub gated: bool,
    pub gate_width: f64,
}

impl DetectorConfig {
    /// Free-running Si SPCM at 810 nm.
    pub fn spcm() -> Self {
        DetectorConfig {
            efficiency: 0.55,
            dark_rate: 100.0,
            jitter_sigma: 350e-12,
            dead_time: 50e-9,
            gated: false,
            gate_width: 0.0,
        }
    }

    /// Gated InGaAs APD at 1550 nm; 1e-5 dark counts per 1 ns gate.
    pub fn ingaas_gated() -> Self {
        DetectorConfig {
            efficiency: 0.10,
            dark_rate: 1e4,
            jitter_sigma: 200e-12,
            dead_time: 0.0,
            gated: true,
            gate_width: 1e-9,
        }
    }

    pub fn ideal() -> Self {
        DetectorConfig {
            efficiency: 1.0,
            dark_rate: 0.0,
            jitter_sigma: 0.0,
            dead_time: 0.0,
            gated: false,
            gate_width: 0.0,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(format!("{prefix}.efficiency"));
        }
        for (name, v) in [
            ("dark_rate", self.dark_rate),
            ("jitter_sigma", self.jitter_sigma),
            ("dead_time", self.dead_time),
            ("gate_width", self.gate_width),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{prefix}.{name}"));
            }
        }
        if self.gated && self.gate_width <= 0.0 {
            return Err(format!("{prefix}.gate_width"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceConfig {
    pub window: f64,
    /// Electronic delay added to every timestamp of a channel.
    pub channel_offsets: BTreeMap<Channel, f64>,
    /// Extra delay between an Alice trigger and the center of Bob's gates.
    pub generator_delay: f64,
    /// Scanned delay: shifts both Bob's gates and the coincidence window.
    pub scan_delay: f64,
    /// Width of the Δt histogram bins.
    pub histogram_bin: f64,
}

impl CoincidenceConfig {
    /// Paper geometry: 40 ns window, B.Z1 read τ later so that both correct
    /// Z pairings peak at the same scan delay.
    pub fn with_tau(tau: f64) -> Self {
        CoincidenceConfig {
            window: 40e-9,
            channel_offsets: [(Channel::BZ1, tau)].into_iter().collect(),
            generator_delay: 0.0,
            scan_delay: 0.0,
            histogram_bin: 0.1e-9,
        }
    }

    pub fn offset(&self, ch: Channel) -> f64 {
        self.channel_offsets.get(&ch).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.window > 0.0 && self.window.is_finite()) {
            return Err("coincidence.window".into());
        }
        if !(self.histogram_bin > 0.0 && self.histogram_bin.is_finite()) {
            return Err("coincidence.histogram_bin".into());
        }
        if !self.generator_delay.is_finite() {
            return Err("coincidence.generator_delay".into());
        }
        if !self.scan_delay.is_finite() {
            return Err("coincidence.scan_delay".into());
        }
        for (c, v) in &self.channel_offsets {
            if !v.is_finite() {
                return Err(format!("coincidence.offset.{c}"));
            }
        }
        Ok(())
    }
}

impl Default for CoincidenceConfig {
    fn default() -> Self {
        CoincidenceConfig::with_tau(2.5e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    Photon,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub channel: Channel,
    pub time: f64,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmissionEvent {
    pub time: f64,
    pub delta_theta: f64,
}

/// Homogeneous Poisson pair emission on `[start, start + duration)`.
pub fn generate_pairs_in<R: Rng + ?Sized>(
    cfg: &SourceConfig,
    start: f64,
    duration: f64,
    rng: &mut R,
) -> Vec<EmissionEvent> {
    let mut events = Vec::new();
    if cfg.pair_rate_mu <= 0.0 || duration <= 0.0 {
        return events;
    }
    let gap = Exp::new(cfg.pair_rate_mu).expect("positive rate");
    let phase = Normal::new(cfg.phase_mean, cfg.phase_sigma).expect("finite sigma");
    events.reserve((cfg.pair_rate_mu * duration * 1.01) as usize + 16);
    let end = start + duration;
    let mut t = start + gap.sample(rng);
    while t < end {
        let delta_theta = if cfg.phase_sigma == 0.0 { cfg.phase_mean } else { phase.sample(rng) };
        events.push(EmissionEvent { time: t, delta_theta });
        t += gap.sample(rng);
    }
    events
}

/// Seeded convenience wrapper over [`generate_pairs_in`] starting at t = 0.
pub fn generate_pairs(cfg: &SourceConfig, duration: f64, seed: u64) -> Vec<EmissionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_pairs_in(cfg, 0.0, duration, &mut rng)
}

/// One sampled entry of a [`ProbTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JointOutcome {
    Detected { channel_a: Channel, slot_a: u8, channel_b: Channel, slot_b: u8 },
    Lost,
}

/// Constant-time sampler over the entries of a probability table.
#[derive(Debug, Clone)]
pub struct OutcomeSampler {
    outcomes: Vec<JointOutcome>,
    alias: Option<WeightedAliasIndex<f64>>,
}

impl OutcomeSampler {
    pub fn new(table: &ProbTable) -> Self {
        let mut outcomes = Vec::with_capacity(table.entries.len() + 1);
        let mut weights = Vec::with_capacity(table.entries.len() + 1);
        for (&(ca, sa, cb, sb), &p) in &table.entries {
            if p > 0.0 {
                outcomes.push(JointOutcome::Detected { channel_a: ca, slot_a: sa, channel_b: cb, slot_b: sb });
                weights.push(p);
            }
        }
        if table.loss_prob > 0.0 {
            outcomes.push(JointOutcome::Lost);
            weights.push(table.loss_prob);
        }
        let alias = if outcomes.len() > 1 { WeightedAliasIndex::new(weights).ok() } else { None };
        if outcomes.is_empty() {
            outcomes.push(JointOutcome::Lost);
        }
        OutcomeSampler { outcomes, alias }
    }

    pub fn outcomes(&self) -> &[JointOutcome] {
        &self.outcomes
    }

    /// Index into [`Self::outcomes`].
    #[inline]
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.alias {
            Some(a) => a.sample(rng),
            None => 0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> JointOutcome {
        self.outcomes[self.sample_index(rng)]
    }
}

/// Draws one outcome of `table` (or `Lost` with the table's loss probability).
pub fn sample_joint_outcome<R: Rng + ?Sized>(table: &ProbTable, rng: &mut R) -> JointOutcome {
    OutcomeSampler::new(table).sample(rng)
}

/// Sorted, disjoint open intervals of a gated detector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateSet {
    intervals: Vec<(f64, f64)>,
}

impl GateSet {
    /// Gates of `width` centered on each of `centers`; overlaps are merged.
    pub fn from_centers(mut centers: Vec<f64>, width: f64) -> Self {
        centers.sort_by(f64::total_cmp);
        let half = 0.5 * width;
        let mut intervals: Vec<(f64, f64)> = Vec::with_capacity(centers.len());
        for c in centers {
            let (lo, hi) = (c - half, c + half);
            match intervals.last_mut() {
                Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
                _ => intervals.push((lo, hi)),
            }
        }
        GateSet { intervals }
    }

    pub fn contains(&self, t: f64) -> bool {
        let i = self.intervals.partition_point(|iv| iv.1 < t);
        self.intervals.get(i).is_some_and(|iv| iv.0 <= t)
    }

    pub fn open_time(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Maps `u ∈ [0, open_time)` onto a time inside the gates.
    fn locate(&self, mut u: f64) -> f64 {
        for &(a, b) in &self.intervals {
            let len = b - a;
            if u < len {
                return a + u;
            }
            u -= len;
        }
        self.intervals.last().map(|iv| iv.1).unwrap_or(0.0)
    }
}

/// Photon arrival at a detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub channel: Channel,
    pub time: f64,
}

/// Converts arrivals on the listed channels into clicks.
///
/// Per channel: arrivals outside open gates are discarded (gated detectors
/// only), survivors are kept with probability `efficiency` and jittered,
/// dark counts are added over `[span.0, span.1)` or over the open gates,
/// and clicks within `dead_time` of the previous accepted click are dropped.
pub fn detect<R: Rng + ?Sized>(
    arrivals: &[Arrival],
    detectors: &[(Channel, DetectorConfig)],
    gates: &BTreeMap<Channel, GateSet>,
    span: (f64, f64),
    rng: &mut R,
) -> Vec<ClickEvent> {
    let empty = GateSet::default();
    let mut out = Vec::new();
    for (ch, cfg) in detectors {
        let gate = if cfg.gated { Some(gates.get(ch).unwrap_or(&empty)) } else { None };
        let jitter = (cfg.jitter_sigma > 0.0).then(|| Normal::new(0.0, cfg.jitter_sigma).expect("finite"));
        let mut clicks: Vec<ClickEvent> = Vec::new();
        for a in arrivals.iter().filter(|a| a.channel == *ch) {
            if let Some(g) = gate {
                if !g.contains(a.time) {
                    continue;
                }
            }
            if cfg.efficiency < 1.0 && !rng.random_bool(cfg.efficiency) {
                continue;
            }
            let dt = jitter.as_ref().map_or(0.0, |j| j.sample(rng));
            clicks.push(ClickEvent { channel: *ch, time: (a.time + dt).max(0.0), origin: Origin::Photon });
        }
        let open = match gate {
            Some(g) => g.open_time(),
            None => (span.1 - span.0).max(0.0),
        };
        let mean = cfg.dark_rate * open;
        if mean > 0.0 {
            let n = Poisson::new(mean).expect("positive mean").sample(rng) as usize;
            for _ in 0..n {
                let u = rng.random::<f64>() * open;
                let time = match gate {
                    Some(g) => g.locate(u),
                    None => span.0 + u,
                };
                clicks.push(ClickEvent { channel: *ch, time, origin: Origin::Dark });
            }
        }
        clicks.sort_by(|a, b| a.time.total_cmp(&b.time));
        if cfg.dead_time > 0.0 {
            let mut last = f64::NEG_INFINITY;
            clicks.retain(|c| {
                if c.time - last < cfg.dead_time {
                    false
                } else {
                    last = c.time;
                    true
                }
            });
        }
        out.extend(clicks);
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.channel.cmp(&b.channel)));
    out
}

/// Fixed-bin histogram of `Δt − scan_delay` over `[-window/2, window/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(window: f64, bin_width: f64) -> Self {
        let n = (window / bin_width).ceil().max(1.0) as usize;
        Histogram { lo: -0.5 * window, bin_width, counts: vec![0; n] }
    }

    pub fn add(&mut self, x: f64) {
        let i = ((x - self.lo) / self.bin_width).floor();
        let i = (i.max(0.0) as usize).min(self.counts.len() - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        (((x - self.lo) / self.bin_width).floor().max(0.0) as usize).min(self.counts.len() - 1)
    }

    pub fn merge(&mut self, other: &Histogram) {
        debug_assert_eq!(self.counts.len(), other.counts.len());
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoincidencePair {
    pub alice: Channel,
    pub bob: Channel,
    pub alice_time: f64,
    /// Offset-corrected `t_b − t_a`.
    pub dt: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoincidenceResult {
    pub pairs: Vec<CoincidencePair>,
    pub counts: BTreeMap<(Channel, Channel), u64>,
    pub histograms: BTreeMap<(Channel, Channel), Histogram>,
}

fn check_sorted(clicks: &[ClickEvent], who: &'static str) -> Result<(), DetectError> {
    if clicks.windows(2).all(|w| w[0].time <= w[1].time) {
        Ok(())
    } else {
        Err(DetectError::UnsortedInput(who))
    }
}

fn by_channel(clicks: &[ClickEvent]) -> BTreeMap<Channel, Vec<f64>> {
    let mut m: BTreeMap<Channel, Vec<f64>> = BTreeMap::new();
    for c in clicks {
        m.entry(c.channel).or_default().push(c.time);
    }
    m
}

/// Greedy earliest-first pairing of two offset-corrected streams: each Alice
/// click takes the earliest unused Bob click with
/// `|t_b' − t_a' − scan_delay| ≤ window/2`.
pub fn pair_streams(alice: &[f64], bob: &[f64], half_window: f64, scan_delay: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut j = 0;
    for (i, &ta) in alice.iter().enumerate() {
        let lo = ta + scan_delay - half_window;
        let hi = ta + scan_delay + half_window;
        while j < bob.len() && bob[j] < lo {
            j += 1;
        }
        if j < bob.len() && bob[j] <= hi {
            out.push((i, j));
            j += 1;
        }
    }
    out
}

/// Coincidences for every (Alice channel, Bob channel) combination present
/// in the inputs, each combination paired independently.
pub fn coincidences(
    alice: &[ClickEvent],
    bob: &[ClickEvent],
    cfg: &CoincidenceConfig,
    scan_delay: f64,
) -> Result<CoincidenceResult, DetectError> {
    check_sorted(alice, "alice")?;
    check_sorted(bob, "bob")?;
    let half = 0.5 * cfg.window;
    let a_streams = by_channel(alice);
    let b_streams = by_channel(bob);
    let mut res = CoincidenceResult::default();
    for (ca, ta) in &a_streams {
        let oa = cfg.offset(*ca);
        let ta: Vec<f64> = ta.iter().map(|t| t + oa).collect();
        for (cb, tb) in &b_streams {
            let ob = cfg.offset(*cb);
            let tb: Vec<f64> = tb.iter().map(|t| t + ob).collect();
            let mut hist = Histogram::new(cfg.window, cfg.histogram_bin);
            let pairs = pair_streams(&ta, &tb, half, scan_delay);
            for &(i, j) in &pairs {
                let dt = tb[j] - ta[i];
                hist.add(dt - scan_delay);
                res.pairs.push(CoincidencePair { alice: *ca, bob: *cb, alice_time: ta[i] - oa, dt });
            }
            res.counts.insert((*ca, *cb), pairs.len() as u64);
            res.histograms.insert((*ca, *cb), hist);
        }
    }
    Ok(res)
}

/// Writes clicks as CSV: `channel,time_s,origin`.
pub fn write_clicks_csv<W: Write>(mut w: W, clicks: &[ClickEvent]) -> std::io::Result<()> {
    writeln!(w, "channel,time_s,origin")?;
    for c in clicks {
        let origin = match c.origin {
            Origin::Photon => "photon",
            Origin::Dark => "dark",
        };
        writeln!(w, "{},{},{}", c.channel, c.time, origin)?;
    }
    Ok(())
}
