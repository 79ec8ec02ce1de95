//! Sub-normalized two-photon states over discrete optical mode labels.
//!
//! A [`JointState`] holds one complex amplitude per (Alice label, Bob label)
//! pair. Optical components are [`LinearMap`]s acting on one party's label;
//! amplitudes that land on the same label pair add coherently. The norm
//! deficit of a state is the probability that at least one photon was lost.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Amplitudes smaller than this after a map are dropped.
pub const PRUNE_EPS: f64 = 1e-15;
/// Slack allowed on `norm² ≤ 1` and on per-row map norms.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("state has no entries")]
    EmptyState,
    #[error("state norm² {0} exceeds 1")]
    NotSubnormalized(f64),
    #[error("label pair {0} given twice")]
    DuplicateLabel(String),
    #[error("label {0} does not belong to the party it is stored under")]
    WrongParty(String),
    #[error("map for party {map:?} cannot carry label {label}")]
    MapPartyMismatch { map: Party, label: String },
    #[error("map row {row} has norm² {norm} > 1")]
    MapNotSubnormalized { row: String, norm: f64 },
    #[error("label {0} has no detector channel assigned")]
    UnresolvedChannel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Party {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pol {
    H,
    V,
    /// Bob's decoder is polarization-insensitive; his photon carries no pol tag.
    None,
}

/// Detector-port identifiers, plus `Free` for photons not yet analyzed and
/// `Lost` for bookkeeping of single-sided outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    Free,
    AZ0,
    AZ1,
    AXPlus,
    AXMinus,
    /// Direct (non-interferometric) branch of the decoder.
    BZdir,
    BXPlus,
    BXMinus,
    /// The two gated detectors fed by the direct branch.
    BZ0,
    BZ1,
    Lost,
}

impl Channel {
    pub const ALICE: [Channel; 4] = [Channel::AZ0, Channel::AZ1, Channel::AXPlus, Channel::AXMinus];
    pub const BOB_DETECTORS: [Channel; 4] =
        [Channel::BZ0, Channel::BZ1, Channel::BXPlus, Channel::BXMinus];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Free => "free",
            Channel::AZ0 => "A.Z0",
            Channel::AZ1 => "A.Z1",
            Channel::AXPlus => "A.X+",
            Channel::AXMinus => "A.X-",
            Channel::BZdir => "B.Zdir",
            Channel::BXPlus => "B.X+",
            Channel::BXMinus => "B.X-",
            Channel::BZ0 => "B.Z0",
            Channel::BZ1 => "B.Z1",
            Channel::Lost => "lost",
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        let all = [
            Channel::Free,
            Channel::AZ0,
            Channel::AZ1,
            Channel::AXPlus,
            Channel::AXMinus,
            Channel::BZdir,
            Channel::BXPlus,
            Channel::BXMinus,
            Channel::BZ0,
            Channel::BZ1,
            Channel::Lost,
        ];
        // Accept the unicode minus as well.
        let s = s.replace('−', "-");
        all.into_iter().find(|c| c.name() == s)
    }

    pub fn party(self) -> Option<Party> {
        match self {
            Channel::AZ0 | Channel::AZ1 | Channel::AXPlus | Channel::AXMinus => Some(Party::A),
            Channel::BZdir | Channel::BXPlus | Channel::BXMinus | Channel::BZ0 | Channel::BZ1 => {
                Some(Party::B)
            }
            Channel::Free | Channel::Lost => None,
        }
    }
}

impl Serialize for Channel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Channel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Channel::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown channel {s}")))
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One photon mode: who holds it, when it arrives (in units of the AMZI
/// delay), its polarization and the port it exits from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModeLabel {
    pub party: Party,
    pub slot: u8,
    pub pol: Pol,
    pub channel: Channel,
}

impl ModeLabel {
    pub fn alice(slot: u8, pol: Pol) -> Self {
        ModeLabel { party: Party::A, slot, pol, channel: Channel::Free }
    }

    pub fn bob(slot: u8) -> Self {
        ModeLabel { party: Party::B, slot, pol: Pol::None, channel: Channel::Free }
    }

    pub fn with_channel(mut self, channel: Channel) -> Self {
        self.channel = channel;
        self
    }

    fn check(&self) -> Result<(), StateError> {
        let pol_ok = match self.party {
            Party::A => self.pol != Pol::None,
            Party::B => self.pol == Pol::None,
        };
        let chan_ok = match self.channel.party() {
            Some(p) => p == self.party,
            None => true,
        };
        if pol_ok && chan_ok {
            Ok(())
        } else {
            Err(StateError::WrongParty(self.to_string()))
        }
    }
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pol = match self.pol {
            Pol::H => "H",
            Pol::V => "V",
            Pol::None => "-",
        };
        write!(f, "{:?}[t{} {} {}]", self.party, self.slot, pol, self.channel)
    }
}

/// Sub-normalized amplitude table over (Alice label, Bob label).
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    amps: BTreeMap<(ModeLabel, ModeLabel), Complex64>,
}

impl JointState {
    /// Builds a state from explicit amplitudes. The first label of each pair
    /// must belong to Alice, the second to Bob.
    pub fn new(
        entries: impl IntoIterator<Item = ((ModeLabel, ModeLabel), Complex64)>,
    ) -> Result<Self, StateError> {
        let mut amps = BTreeMap::new();
        for ((a, b), amp) in entries {
            if a.party != Party::A || b.party != Party::B {
                return Err(StateError::WrongParty(format!("({a}, {b})")));
            }
            a.check()?;
            b.check()?;
            if amps.insert((a, b), amp).is_some() {
                return Err(StateError::DuplicateLabel(format!("({a}, {b})")));
            }
        }
        if amps.is_empty() {
            return Err(StateError::EmptyState);
        }
        let state = JointState { amps };
        let n = state.norm_sqr();
        if n > 1.0 + NORM_EPS {
            return Err(StateError::NotSubnormalized(n));
        }
        Ok(state)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn amplitude(&self, a: &ModeLabel, b: &ModeLabel) -> Complex64 {
        self.amps.get(&(*a, *b)).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(ModeLabel, ModeLabel), &Complex64)> {
        self.amps.iter()
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    /// Multiplies every amplitude by `e^{iα}`.
    pub fn with_global_phase(&self, alpha: f64) -> JointState {
        let ph = Complex64::from_polar(1.0, alpha);
        JointState { amps: self.amps.iter().map(|(k, v)| (*k, v * ph)).collect() }
    }

    /// Keeps only the entries accepted by `keep`. The result may be empty.
    pub fn filter(&self, mut keep: impl FnMut(&ModeLabel, &ModeLabel) -> bool) -> JointState {
        JointState {
            amps: self.amps.iter().filter(|((a, b), _)| keep(a, b)).map(|(k, v)| (*k, *v)).collect(),
        }
    }

    /// Rescales to unit norm. Returns `None` for the zero state.
    pub fn normalized(&self) -> Option<JointState> {
        let n = self.norm_sqr();
        if n <= 0.0 {
            return None;
        }
        let s = 1.0 / n.sqrt();
        Some(JointState { amps: self.amps.iter().map(|(k, v)| (*k, v * s)).collect() })
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &JointState) -> Complex64 {
        self.amps
            .iter()
            .filter_map(|(k, v)| other.amps.get(k).map(|w| v.conj() * w))
            .sum()
    }

    /// Human-readable table: label pair, Re, Im, |amp|².
    pub fn pretty(&self) -> String {
        let mut out = String::from("alice                      bob                          re          im          |amp|^2\n");
        for ((a, b), v) in &self.amps {
            out.push_str(&format!(
                "{:<26} {:<26} {:>11.6} {:>11.6} {:>11.6}\n",
                a.to_string(),
                b.to_string(),
                v.re,
                v.im,
                v.norm_sqr()
            ));
        }
        out
    }
}

impl fmt::Display for JointState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pretty())
    }
}

/// Where an input mode goes: shifted by `slot_shift`, with new pol and channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MapOutput {
    pub slot_shift: u8,
    pub pol: Pol,
    pub channel: Channel,
}

/// Linear transformation acting on one party's modes.
///
/// Rules are keyed by the (pol, channel) of the input label and are
/// time-translation invariant: outputs carry a slot shift relative to the
/// input slot. Labels without a rule pass through untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    party: Party,
    rules: BTreeMap<(Pol, Channel), Vec<(MapOutput, Complex64)>>,
}

impl LinearMap {
    pub fn new(
        party: Party,
        rules: impl IntoIterator<Item = ((Pol, Channel), Vec<(MapOutput, Complex64)>)>,
    ) -> Result<Self, StateError> {
        let mut map = BTreeMap::new();
        for (input, outs) in rules {
            let probe = ModeLabel { party, slot: 0, pol: input.0, channel: input.1 };
            probe.check().map_err(|_| StateError::MapPartyMismatch {
                map: party,
                label: probe.to_string(),
            })?;
            let mut merged: BTreeMap<MapOutput, Complex64> = BTreeMap::new();
            for (o, c) in outs {
                let probe = ModeLabel { party, slot: 0, pol: o.pol, channel: o.channel };
                probe.check().map_err(|_| StateError::MapPartyMismatch {
                    map: party,
                    label: probe.to_string(),
                })?;
                *merged.entry(o).or_default() += c;
            }
            let outs: Vec<_> =
                merged.into_iter().filter(|(_, c)| c.norm() >= PRUNE_EPS).collect();
            let norm: f64 = outs.iter().map(|(_, c)| c.norm_sqr()).sum();
            if norm > 1.0 + NORM_EPS {
                return Err(StateError::MapNotSubnormalized {
                    row: format!("{:?}/{}", input.0, input.1),
                    norm,
                });
            }
            map.insert(input, outs);
        }
        Ok(LinearMap { party, rules: map })
    }

    pub fn identity(party: Party) -> Self {
        LinearMap { party, rules: BTreeMap::new() }
    }

    pub fn party(&self) -> Party {
        self.party
    }

    pub fn rules(&self) -> impl Iterator<Item = (&(Pol, Channel), &Vec<(MapOutput, Complex64)>)> {
        self.rules.iter()
    }

    /// Output norm² of the row for `input`; 1 for pass-through inputs.
    pub fn row_norm_sqr(&self, input: (Pol, Channel)) -> f64 {
        match self.rules.get(&input) {
            Some(outs) => outs.iter().map(|(_, c)| c.norm_sqr()).sum(),
            None => 1.0,
        }
    }

    /// True when every explicit row is lossless within [`NORM_EPS`].
    pub fn is_lossless(&self) -> bool {
        self.rules.keys().all(|k| (self.row_norm_sqr(*k) - 1.0).abs() <= NORM_EPS)
    }

    /// Images of a single input label.
    pub fn image(&self, label: &ModeLabel) -> Vec<(ModeLabel, Complex64)> {
        if label.party != self.party {
            return vec![(*label, Complex64::new(1.0, 0.0))];
        }
        match self.rules.get(&(label.pol, label.channel)) {
            None => vec![(*label, Complex64::new(1.0, 0.0))],
            Some(outs) => outs
                .iter()
                .map(|(o, c)| {
                    (
                        ModeLabel {
                            party: label.party,
                            slot: label.slot + o.slot_shift,
                            pol: o.pol,
                            channel: o.channel,
                        },
                        *c,
                    )
                })
                .collect(),
        }
    }

    /// The map equivalent to applying `self` first and then `next`.
    pub fn then(&self, next: &LinearMap) -> Result<LinearMap, StateError> {
        if self.party != next.party {
            return Err(StateError::MapPartyMismatch {
                map: next.party,
                label: format!("composition with a {:?} map", self.party),
            });
        }
        let mut rules: BTreeMap<(Pol, Channel), Vec<(MapOutput, Complex64)>> = BTreeMap::new();
        for (input, outs) in &self.rules {
            let mut merged: BTreeMap<MapOutput, Complex64> = BTreeMap::new();
            for (o, c) in outs {
                match next.rules.get(&(o.pol, o.channel)) {
                    None => *merged.entry(*o).or_default() += c,
                    Some(outs2) => {
                        for (o2, c2) in outs2 {
                            let key = MapOutput {
                                slot_shift: o.slot_shift + o2.slot_shift,
                                pol: o2.pol,
                                channel: o2.channel,
                            };
                            *merged.entry(key).or_default() += c * c2;
                        }
                    }
                }
            }
            rules.insert(*input, merged.into_iter().collect());
        }
        for (input, outs) in &next.rules {
            rules.entry(*input).or_insert_with(|| outs.clone());
        }
        LinearMap::new(self.party, rules)
    }
}

/// Pushes every amplitude of `state` through `map`, summing coherently.
pub fn apply_local_map(state: &JointState, map: &LinearMap) -> Result<JointState, StateError> {
    let mut out: BTreeMap<(ModeLabel, ModeLabel), Complex64> = BTreeMap::new();
    for ((a, b), amp) in &state.amps {
        let (target, other) = match map.party {
            Party::A => (a, b),
            Party::B => (b, a),
        };
        for (img, c) in map.image(target) {
            let key = match map.party {
                Party::A => (img, *other),
                Party::B => (*other, img),
            };
            *out.entry(key).or_default() += amp * c;
        }
    }
    out.retain(|_, v| v.norm() >= PRUNE_EPS);
    let out = JointState { amps: out };
    // Bounded rows do not make a contraction when inputs share outputs.
    let (n_in, n_out) = (state.norm_sqr(), out.norm_sqr());
    if n_out > n_in + NORM_EPS {
        return Err(StateError::MapNotSubnormalized { row: "applied map".into(), norm: n_out / n_in });
    }
    Ok(out)
}

/// Detection probabilities keyed by (channel_A, slot_A, channel_B, slot_B).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbTable {
    pub entries: BTreeMap<(Channel, u8, Channel, u8), f64>,
    pub loss_prob: f64,
}

impl ProbTable {
    /// Builds a table from explicit entries; the loss probability is the
    /// remaining mass.
    pub fn from_entries(entries: impl IntoIterator<Item = ((Channel, u8, Channel, u8), f64)>) -> Self {
        let entries: BTreeMap<_, _> = entries.into_iter().collect();
        let total: f64 = entries.values().sum();
        ProbTable { entries, loss_prob: (1.0 - total).max(0.0) }
    }

    pub fn get(&self, ca: Channel, sa: u8, cb: Channel, sb: u8) -> f64 {
        self.entries.get(&(ca, sa, cb, sb)).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum::<f64>()
    }

    /// Sum over entries accepted by `pred`.
    pub fn sum_where(&self, mut pred: impl FnMut(Channel, u8, Channel, u8) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|((ca, sa, cb, sb), _)| pred(*ca, *sa, *cb, *sb))
            .map(|(_, p)| *p)
            .sum()
    }
}

/// Born-rule detection statistics of an analyzed state.
///
/// Amplitudes on identical full labels were already summed when the maps were
/// applied; here the polarization tag is traced out and probabilities on the
/// same (channel, slot) pair add.
pub fn outcome_probabilities(state: &JointState) -> Result<ProbTable, StateError> {
    let mut entries: BTreeMap<(Channel, u8, Channel, u8), f64> = BTreeMap::new();
    for ((a, b), amp) in &state.amps {
        for l in [a, b] {
            if l.channel == Channel::Free {
                return Err(StateError::UnresolvedChannel(l.to_string()));
            }
        }
        *entries.entry((a.channel, a.slot, b.channel, b.slot)).or_default() += amp.norm_sqr();
    }
    let total: f64 = entries.values().sum();
    Ok(ProbTable { entries, loss_prob: (1.0 - total).max(0.0) })
}
