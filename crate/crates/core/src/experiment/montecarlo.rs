//! Chunked, seeded Monte Carlo of the full link.
//!
//! Time is cut into fixed chunks. Chunk `k` draws its pairs from ChaCha
//! stream `2k` and its detector noise from stream `2k + 1` of the run seed,
//! so results do not depend on thread count and chunk records merge exactly.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::ops::Range;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::analytic::pair_distribution;
use super::{ExperimentError, ExperimentSetup};
use crate::mode_state::Channel;
use crate::optics::Basis;
use crate::source_detect::{
    coincidences, detect, generate_pairs_in, Arrival, ClickEvent, GateSet, Histogram, JointOutcome, Origin,
    OutcomeSampler,
};

/// Simulated time per work item, seconds.
pub const CHUNK_DURATION: f64 = 0.01;

/// Number of Δθ cache levels per turn.
pub const PHASE_LEVELS: usize = 4096;

/// `(Alice detector, Bob detector)`, written `A.Z0|B.Z0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelPair(pub Channel, pub Channel);

impl fmt::Display for ChannelPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.0, self.1)
    }
}

impl ChannelPair {
    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once('|')?;
        Some(ChannelPair(Channel::parse(a.trim())?, Channel::parse(b.trim())?))
    }
}

impl Serialize for ChannelPair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChannelPair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ChannelPair::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad channel pair {s}")))
    }
}

/// Sampled pair outcome, written `A.Z0@1|B.Zdir@1` or `lost`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OutcomeKey(pub JointOutcome);

impl fmt::Display for OutcomeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            JointOutcome::Detected { channel_a, slot_a, channel_b, slot_b } => {
                write!(f, "{channel_a}@{slot_a}|{channel_b}@{slot_b}")
            }
            JointOutcome::Lost => f.write_str("lost"),
        }
    }
}

impl OutcomeKey {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "lost" {
            return Some(OutcomeKey(JointOutcome::Lost));
        }
        let (a, b) = s.split_once('|')?;
        let side = |x: &str| -> Option<(Channel, u8)> {
            let (c, slot) = x.split_once('@')?;
            Some((Channel::parse(c)?, slot.parse().ok()?))
        };
        let (channel_a, slot_a) = side(a)?;
        let (channel_b, slot_b) = side(b)?;
        Some(OutcomeKey(JointOutcome::Detected { channel_a, slot_a, channel_b, slot_b }))
    }
}

impl Serialize for OutcomeKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OutcomeKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        OutcomeKey::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad outcome {s}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickTally {
    pub photon: u64,
    pub dark: u64,
}

/// Everything one simulated run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Simulated interval `[start, end)`, seconds.
    pub start: f64,
    pub end: f64,
    pub scan_delay: f64,
    pub setup: ExperimentSetup,
    pub pairs_emitted: u64,
    pub outcome_counts: BTreeMap<OutcomeKey, u64>,
    pub clicks: BTreeMap<Channel, ClickTally>,
    pub coincidences: BTreeMap<ChannelPair, u64>,
    pub histograms: BTreeMap<ChannelPair, Histogram>,
    #[serde(skip)]
    pub click_stream: Option<Vec<ClickEvent>>,
}

impl RunRecord {
    fn empty(setup: &ExperimentSetup, seed: u64, start: f64, end: f64, scan_delay: f64) -> Self {
        RunRecord {
            seed,
            start,
            end,
            scan_delay,
            setup: setup.clone(),
            pairs_emitted: 0,
            outcome_counts: BTreeMap::new(),
            clicks: BTreeMap::new(),
            coincidences: BTreeMap::new(),
            histograms: BTreeMap::new(),
            click_stream: None,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn coincidence(&self, a: Channel, b: Channel) -> u64 {
        self.coincidences.get(&ChannelPair(a, b)).copied().unwrap_or(0)
    }

    pub fn total_coincidences(&self) -> u64 {
        self.coincidences.values().sum()
    }

    /// Visibility and coincidence rate (c/s) from the four pairs of `basis`.
    pub fn basis_figures(&self, basis: Basis) -> (f64, f64) {
        let [a0, a1] = basis.alice_channels();
        let [b0, b1] = basis.bob_channels();
        let c = (self.coincidence(a0, b0) + self.coincidence(a1, b1)) as f64;
        let w = (self.coincidence(a0, b1) + self.coincidence(a1, b0)) as f64;
        let v = if c + w > 0.0 { (c - w) / (c + w) } else { 0.0 };
        (v, (c + w) / self.duration())
    }

    /// Folds a record of the adjacent later interval into this one.
    pub fn merge(&mut self, other: RunRecord) {
        self.start = self.start.min(other.start);
        self.end = self.end.max(other.end);
        self.pairs_emitted += other.pairs_emitted;
        for (k, v) in other.outcome_counts {
            *self.outcome_counts.entry(k).or_default() += v;
        }
        for (k, v) in other.clicks {
            let t = self.clicks.entry(k).or_default();
            t.photon += v.photon;
            t.dark += v.dark;
        }
        for (k, v) in other.coincidences {
            *self.coincidences.entry(k).or_default() += v;
        }
        for (k, h) in other.histograms {
            match self.histograms.get_mut(&k) {
                Some(mine) => mine.merge(&h),
                None => {
                    self.histograms.insert(k, h);
                }
            }
        }
        if let Some(mut more) = other.click_stream {
            self.click_stream.get_or_insert_with(Vec::new).append(&mut more);
        }
    }
}

struct Level {
    sampler: OutcomeSampler,
}

/// Lazily built per-Δθ outcome samplers shared by all chunks.
struct PairModel {
    setup: ExperimentSetup,
    fixed: Option<OutcomeSampler>,
    levels: Vec<OnceLock<Level>>,
}

impl PairModel {
    fn new(setup: &ExperimentSetup) -> Result<Self, ExperimentError> {
        setup.validate()?;
        let fixed = if setup.source.phase_sigma == 0.0 {
            Some(OutcomeSampler::new(&pair_distribution(setup, setup.source.phase_mean)?))
        } else {
            // Builds once so that table errors surface before sampling.
            pair_distribution(setup, 0.0)?;
            None
        };
        Ok(PairModel {
            setup: setup.clone(),
            fixed,
            levels: (0..PHASE_LEVELS).map(|_| OnceLock::new()).collect(),
        })
    }

    fn level_of(delta_theta: f64) -> usize {
        let step = TAU / PHASE_LEVELS as f64;
        ((delta_theta.rem_euclid(TAU) / step).round() as usize) % PHASE_LEVELS
    }

    /// Cache slot and sampler for `delta_theta`; slot `PHASE_LEVELS` is the
    /// exact fixed-phase sampler.
    fn sampler(&self, delta_theta: f64) -> (usize, &OutcomeSampler) {
        if let Some(s) = &self.fixed {
            return (PHASE_LEVELS, s);
        }
        let k = Self::level_of(delta_theta);
        (k, self.sampler_at(k))
    }

    fn sampler_at(&self, k: usize) -> &OutcomeSampler {
        if k == PHASE_LEVELS {
            return self.fixed.as_ref().expect("fixed sampler");
        }
        &self.levels[k]
            .get_or_init(|| {
                let phase = k as f64 * TAU / PHASE_LEVELS as f64;
                let table = pair_distribution(&self.setup, phase).expect("validated setup");
                Level { sampler: OutcomeSampler::new(&table) }
            })
            .sampler
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn chunk_count(duration: f64) -> usize {
    ((duration / CHUNK_DURATION) - 1e-9).ceil().max(1.0) as usize
}

fn chunk_span(k: usize, duration: f64) -> (f64, f64) {
    let start = k as f64 * CHUNK_DURATION;
    (start, ((k + 1) as f64 * CHUNK_DURATION).min(duration))
}

struct SourceStage {
    pairs: u64,
    outcomes: BTreeMap<OutcomeKey, u64>,
    alice: Vec<Arrival>,
    bob: Vec<Arrival>,
}

fn source_stage(model: &PairModel, seed: u64, k: usize, span: (f64, f64)) -> SourceStage {
    let setup = &model.setup;
    let tau = setup.source.bin_separation_tau;
    let mut rng = rng_for(seed, 2 * k as u64);
    let events = generate_pairs_in(&setup.source, span.0, span.1 - span.0, &mut rng);
    let mut tally: Vec<Vec<u64>> = vec![Vec::new(); PHASE_LEVELS + 1];
    let mut alice = Vec::new();
    let mut bob = Vec::new();
    for e in &events {
        let (level, sampler) = model.sampler(e.delta_theta);
        let idx = sampler.sample_index(&mut rng);
        let row = &mut tally[level];
        if row.is_empty() {
            row.resize(sampler.outcomes().len(), 0);
        }
        row[idx] += 1;
        if let JointOutcome::Detected { channel_a, slot_a, channel_b, slot_b } = sampler.outcomes()[idx] {
            if channel_a != Channel::Lost {
                alice.push(Arrival { channel: channel_a, time: e.time + f64::from(slot_a) * tau });
            }
            let b = match channel_b {
                Channel::Lost => None,
                Channel::BZdir => Some(if rng.random_bool(0.5) { Channel::BZ0 } else { Channel::BZ1 }),
                other => Some(other),
            };
            if let Some(channel) = b {
                bob.push(Arrival { channel, time: e.time + f64::from(slot_b) * tau });
            }
        }
    }
    alice.sort_by(|x, y| x.time.total_cmp(&y.time));
    bob.sort_by(|x, y| x.time.total_cmp(&y.time));
    let mut outcomes = BTreeMap::new();
    for (level, row) in tally.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
        let sampler = model.sampler_at(level);
        for (idx, &n) in row.iter().enumerate().filter(|(_, n)| **n > 0) {
            *outcomes.entry(OutcomeKey(sampler.outcomes()[idx])).or_default() += n;
        }
    }
    SourceStage { pairs: events.len() as u64, outcomes, alice, bob }
}

fn tally_clicks(rec: &mut RunRecord, clicks: &[ClickEvent]) {
    for c in clicks {
        let t = rec.clicks.entry(c.channel).or_default();
        match c.origin {
            Origin::Photon => t.photon += 1,
            Origin::Dark => t.dark += 1,
        }
    }
}

/// Simulates chunk `k` once per scan delay, sharing the emitted pairs and
/// Alice's clicks between scan points.
fn simulate_chunk(
    model: &PairModel,
    seed: u64,
    k: usize,
    duration: f64,
    scans: &[f64],
    keep_clicks: bool,
) -> Vec<RunRecord> {
    let setup = &model.setup;
    let span = chunk_span(k, duration);
    let src = source_stage(model, seed, k, span);
    let alice_dets: Vec<_> =
        setup.alice_basis.alice_channels().iter().map(|&c| (c, setup.detectors.alice.clone())).collect();
    let bob_dets: Vec<_> = Channel::BOB_DETECTORS.iter().map(|&c| (c, setup.detectors.bob.clone())).collect();
    let mut det_rng = rng_for(seed, 2 * k as u64 + 1);
    let alice_clicks = detect(&src.alice, &alice_dets, &BTreeMap::new(), span, &mut det_rng);
    let cc = &setup.coincidence;
    scans
        .iter()
        .map(|&scan| {
            let mut rng = det_rng.clone();
            let mut gates = BTreeMap::new();
            if setup.detectors.bob.gated {
                for &b in &Channel::BOB_DETECTORS {
                    let centers = alice_clicks
                        .iter()
                        .map(|c| c.time + cc.offset(c.channel) + cc.generator_delay + scan - cc.offset(b))
                        .collect();
                    gates.insert(b, GateSet::from_centers(centers, setup.detectors.bob.gate_width));
                }
            }
            let bob_clicks = detect(&src.bob, &bob_dets, &gates, span, &mut rng);
            let coin = coincidences(&alice_clicks, &bob_clicks, cc, scan).expect("detector output is sorted");
            let mut rec = RunRecord::empty(setup, seed, span.0, span.1, scan);
            rec.pairs_emitted = src.pairs;
            rec.outcome_counts = src.outcomes.clone();
            tally_clicks(&mut rec, &alice_clicks);
            tally_clicks(&mut rec, &bob_clicks);
            for ((a, b), n) in coin.counts {
                rec.coincidences.insert(ChannelPair(a, b), n);
            }
            for ((a, b), h) in coin.histograms {
                rec.histograms.insert(ChannelPair(a, b), h);
            }
            if keep_clicks {
                let mut all = alice_clicks.clone();
                all.extend(bob_clicks);
                all.sort_by(|x, y| x.time.total_cmp(&y.time).then(x.channel.cmp(&y.channel)));
                rec.click_stream = Some(all);
            }
            rec
        })
        .collect()
}

fn merge_rows(mut a: Vec<RunRecord>, b: Vec<RunRecord>) -> Vec<RunRecord> {
    for (x, y) in a.iter_mut().zip(b) {
        x.merge(y);
    }
    a
}

fn run_scans(
    setup: &ExperimentSetup,
    duration: f64,
    seed: u64,
    chunks: Range<usize>,
    scans: &[f64],
    keep_clicks: bool,
) -> Result<Vec<RunRecord>, ExperimentError> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(ExperimentError::InvalidArgument("duration must be positive".into()));
    }
    let n = chunk_count(duration);
    if chunks.start >= chunks.end || chunks.end > n {
        return Err(ExperimentError::InvalidArgument(format!("chunk range {chunks:?} outside 0..{n}")));
    }
    let model = PairModel::new(setup)?;
    let rows = chunks
        .into_par_iter()
        .map(|k| simulate_chunk(&model, seed, k, duration, scans, keep_clicks))
        .reduce_with(merge_rows)
        .expect("non-empty chunk range");
    Ok(rows)
}

/// Runs chunks `chunks` of a `duration`-second run. Records of adjacent
/// ranges merge into exactly the record of the union.
pub fn run_chunk_range(
    setup: &ExperimentSetup,
    duration: f64,
    seed: u64,
    chunks: Range<usize>,
) -> Result<RunRecord, ExperimentError> {
    let scan = setup.coincidence.scan_delay;
    Ok(run_scans(setup, duration, seed, chunks, &[scan], false)?.remove(0))
}

pub fn run_montecarlo(setup: &ExperimentSetup, duration: f64, seed: u64) -> Result<RunRecord, ExperimentError> {
    run_chunk_range(setup, duration, seed, 0..chunk_count(duration.max(0.0)))
}

/// As [`run_montecarlo`], also keeping the full click stream.
pub fn run_montecarlo_with_clicks(
    setup: &ExperimentSetup,
    duration: f64,
    seed: u64,
) -> Result<RunRecord, ExperimentError> {
    let scan = setup.coincidence.scan_delay;
    Ok(run_scans(setup, duration, seed, 0..chunk_count(duration.max(0.0)), &[scan], true)?.remove(0))
}

/// Number of chunks a run of `duration` seconds is split into.
pub fn chunks_for(duration: f64) -> usize {
    chunk_count(duration)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanKind {
    Delay,
    Temperature,
}

impl ScanKind {
    pub fn column(self) -> &'static str {
        match self {
            ScanKind::Delay => "scan_delay_s",
            ScanKind::Temperature => "temperature_c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub value: f64,
    pub counts: BTreeMap<ChannelPair, u64>,
}

/// Coincidence counts per channel pair along a delay or temperature scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanCurve {
    pub kind: ScanKind,
    pub seed: u64,
    pub duration_per_point: f64,
    pub points: Vec<ScanPoint>,
}

impl ScanCurve {
    pub fn pairs(&self) -> Vec<ChannelPair> {
        let mut v: Vec<_> = self.points.iter().flat_map(|p| p.counts.keys().copied()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// `(value, counts)` for one channel pair.
    pub fn curve(&self, pair: ChannelPair) -> Vec<(f64, u64)> {
        self.points.iter().map(|p| (p.value, p.counts.get(&pair).copied().unwrap_or(0))).collect()
    }
}

/// Delay scan from `range.0` to `range.1` inclusive. Every point equals
/// [`run_montecarlo`] at that scan delay with the same seed.
pub fn scan_delay(
    setup: &ExperimentSetup,
    range: (f64, f64),
    step: f64,
    duration: f64,
    seed: u64,
) -> Result<ScanCurve, ExperimentError> {
    if !(step > 0.0 && step.is_finite()) || !(range.1 >= range.0) {
        return Err(ExperimentError::InvalidArgument("scan step must be positive and range ordered".into()));
    }
    let n = ((range.1 - range.0) / step + 1e-9).floor() as usize + 1;
    let values: Vec<f64> = (0..n).map(|i| range.0 + i as f64 * step).collect();
    let recs = run_scans(setup, duration, seed, 0..chunk_count(duration.max(0.0)), &values, false)?;
    Ok(ScanCurve {
        kind: ScanKind::Delay,
        seed,
        duration_per_point: duration,
        points: values
            .iter()
            .zip(recs)
            .map(|(&value, r)| ScanPoint { value, counts: all_pairs(r.coincidences) })
            .collect(),
    })
}

/// Counts for every Alice/Bob detector pair, zero where nothing paired.
fn all_pairs(mut counts: BTreeMap<ChannelPair, u64>) -> BTreeMap<ChannelPair, u64> {
    for a in Channel::ALICE {
        for b in Channel::BOB_DETECTORS {
            counts.entry(ChannelPair(a, b)).or_insert(0);
        }
    }
    counts
}

/// Seed of point `i` of a scan with independent points.
pub fn point_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// X-basis temperature scan; the decoder phase follows the setup's
/// temperature model. Points use independent seeds.
pub fn scan_temperature(
    setup: &ExperimentSetup,
    temps: &[f64],
    duration: f64,
    seed: u64,
) -> Result<ScanCurve, ExperimentError> {
    if temps.is_empty() {
        return Err(ExperimentError::InvalidArgument("empty temperature list".into()));
    }
    let x = setup.with_basis(Basis::X);
    let mut points = Vec::with_capacity(temps.len());
    for (i, &t) in temps.iter().enumerate() {
        if !t.is_finite() {
            return Err(ExperimentError::InvalidArgument(format!("temperature {t}")));
        }
        let s = x.with_phase(setup.temperature.phase(t));
        let rec = run_montecarlo(&s, duration, point_seed(seed, i))?;
        points.push(ScanPoint { value: t, counts: all_pairs(rec.coincidences) });
    }
    Ok(ScanCurve { kind: ScanKind::Temperature, seed, duration_per_point: duration, points })
}

/// Mean of Δθ levels is reproduced to within half a level.
#[doc(hidden)]
pub fn quantized_phase(delta_theta: f64) -> f64 {
    let k = PairModel::level_of(delta_theta);
    let q = k as f64 * TAU / PHASE_LEVELS as f64;
    if q > PI {
        q - TAU
    } else {
        q
    }
}
