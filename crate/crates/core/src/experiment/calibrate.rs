//! Fitting the unstated link parameters to measured figures.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analytic::{aligned_phase, expected_metrics, LinkMetrics};
use super::montecarlo::run_montecarlo;
use super::{ExperimentError, ExperimentSetup};
use crate::optics::Basis;

/// Target link figures; the default holds the published values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub v_zz: f64,
    pub v_xx: f64,
    pub r_z: f64,
    pub r_x: f64,
}

impl Default for Targets {
    fn default() -> Self {
        Targets { v_zz: 0.958, v_xx: 0.88, r_z: 820.0, r_x: 950.0 }
    }
}

impl From<LinkMetrics> for Targets {
    fn from(m: LinkMetrics) -> Self {
        Targets { v_zz: m.v_zz, v_xx: m.v_xx, r_z: m.r_z, r_x: m.r_x }
    }
}

/// Relative deviations `(simulated − target) / target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub v_zz: f64,
    pub v_xx: f64,
    pub r_z: f64,
    pub r_x: f64,
}

impl Residuals {
    pub fn of(m: &LinkMetrics, t: &Targets) -> Self {
        let rel = |s: f64, t: f64| (s - t) / t;
        Residuals { v_zz: rel(m.v_zz, t.v_zz), v_xx: rel(m.v_xx, t.v_xx), r_z: rel(m.r_z, t.r_z), r_x: rel(m.r_x, t.r_x) }
    }

    pub fn sum_sq(&self) -> f64 {
        self.v_zz.powi(2) + self.v_xx.powi(2) + self.r_z.powi(2) + self.r_x.powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FreeParam {
    PairRate,
    PhaseSigma,
    GlanExtinction,
    DarkRateA,
    DarkRateB,
}

impl FreeParam {
    pub const ALL: [FreeParam; 5] =
        [FreeParam::PairRate, FreeParam::PhaseSigma, FreeParam::GlanExtinction, FreeParam::DarkRateA, FreeParam::DarkRateB];

    /// Config key of the parameter.
    pub fn key(self) -> &'static str {
        match self {
            FreeParam::PairRate => "source.pair_rate_mu",
            FreeParam::PhaseSigma => "source.phase_sigma",
            FreeParam::GlanExtinction => "transformer.glan_extinction_ratio",
            FreeParam::DarkRateA => "detectors.A.dark_rate",
            FreeParam::DarkRateB => "detectors.B.dark_rate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        FreeParam::ALL.into_iter().find(|p| p.key() == s || p.short() == s)
    }

    pub fn short(self) -> &'static str {
        match self {
            FreeParam::PairRate => "pair_rate_mu",
            FreeParam::PhaseSigma => "phase_sigma",
            FreeParam::GlanExtinction => "glan_extinction_ratio",
            FreeParam::DarkRateA => "dark_rate_a",
            FreeParam::DarkRateB => "dark_rate_b",
        }
    }

    fn log_scale(self) -> bool {
        !matches!(self, FreeParam::PhaseSigma)
    }

    pub fn get(self, s: &ExperimentSetup) -> f64 {
        match self {
            FreeParam::PairRate => s.source.pair_rate_mu,
            FreeParam::PhaseSigma => s.source.phase_sigma,
            FreeParam::GlanExtinction => s.transformer.glan_extinction_ratio,
            FreeParam::DarkRateA => s.detectors.alice.dark_rate,
            FreeParam::DarkRateB => s.detectors.bob.dark_rate,
        }
    }

    pub fn set(self, s: &mut ExperimentSetup, v: f64) {
        match self {
            FreeParam::PairRate => s.source.pair_rate_mu = v,
            FreeParam::PhaseSigma => s.source.phase_sigma = v,
            FreeParam::GlanExtinction => s.transformer.glan_extinction_ratio = v,
            FreeParam::DarkRateA => s.detectors.alice.dark_rate = v,
            FreeParam::DarkRateB => s.detectors.bob.dark_rate = v,
        }
    }
}

/// How candidate setups are scored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// Expected-count model.
    Analytic,
    /// Seeded Monte Carlo runs of `duration` seconds per basis.
    MonteCarlo { duration: f64 },
}

/// Metrics of `setup` under `objective`.
pub fn evaluate(setup: &ExperimentSetup, objective: Objective, seed: u64) -> Result<LinkMetrics, ExperimentError> {
    match objective {
        Objective::Analytic => expected_metrics(setup),
        Objective::MonteCarlo { duration } => {
            let z = run_montecarlo(&setup.with_basis(Basis::Z).with_scan_delay(0.0), duration, seed)?;
            let phi = aligned_phase(setup)?;
            let x = run_montecarlo(&setup.with_basis(Basis::X).with_phase(phi).with_scan_delay(0.0), duration, seed)?;
            let (v_zz, r_z) = z.basis_figures(Basis::Z);
            let (v_xx, r_x) = x.basis_figures(Basis::X);
            Ok(LinkMetrics { v_zz, v_xx, r_z, r_x })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub setup: ExperimentSetup,
    pub metrics: LinkMetrics,
    pub residuals: Residuals,
    pub objective: f64,
    pub iterations: usize,
    pub fitted: Vec<(FreeParam, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    /// `f_max − f_min` over the final simplex.
    pub spread: f64,
}

/// Downhill simplex minimization from `x0` with initial edge `step`.
/// Vertex batches (initial simplex, shrinks) are scored in parallel.
pub fn nelder_mead<F>(f: F, x0: &[f64], step: f64, max_iter: usize) -> NelderMeadResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x0.len();
    let score = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.par_iter().map(|p| score(p)).collect();
    let mut it = 0;
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = vals[n] - vals[0];
        let diameter = pts[1..]
            .iter()
            .map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let done = n == 0 || (spread <= 1e-15 * (1.0 + vals[0].abs()) && diameter <= 1e-9);
        if done || it >= max_iter {
            return NelderMeadResult { x: pts[0].clone(), f: vals[0], iterations: it, spread };
        }
        it += 1;
        let centroid: Vec<f64> = (0..n).map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&pts[n]).map(|(c, w)| c + t * (c - w)).collect() };
        let xr = along(1.0);
        let fr = score(&xr);
        if fr < vals[0] {
            let xe = along(2.0);
            let fe = score(&xe);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[n] {
            let xc = along(0.5);
            let fc = score(&xc);
            (xc, if fc <= fr { fc } else { f64::INFINITY })
        } else {
            let xc = along(-0.5);
            let fc = score(&xc);
            (xc, if fc < vals[n] { fc } else { f64::INFINITY })
        };
        if fc.is_finite() {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        let best = pts[0].clone();
        let shrunk: Vec<Vec<f64>> =
            pts[1..].iter().map(|p| p.iter().zip(&best).map(|(x, b)| b + 0.5 * (x - b)).collect()).collect();
        let sv: Vec<f64> = shrunk.par_iter().map(|p| score(p)).collect();
        for (i, (p, v)) in shrunk.into_iter().zip(sv).enumerate() {
            pts[i + 1] = p;
            vals[i + 1] = v;
        }
    }
}

/// Iteration cap of [`calibrate`].
pub const MAX_ITERATIONS: usize = 500;
/// Largest final simplex spread accepted at the iteration cap.
pub const OBJECTIVE_TOLERANCE: f64 = 1e-3;

struct Coord {
    param: FreeParam,
    lo: f64,
    hi: f64,
}

impl Coord {
    fn new(param: FreeParam, (lo, hi): (f64, f64)) -> Result<Self, ExperimentError> {
        let bad = || ExperimentError::InvalidArgument(format!("bounds for {}", param.key()));
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(bad());
        }
        if param.log_scale() {
            if lo <= 0.0 {
                return Err(bad());
            }
            Ok(Coord { param, lo: lo.ln(), hi: hi.ln() })
        } else {
            Ok(Coord { param, lo, hi })
        }
    }

    fn value(&self, y: f64) -> f64 {
        let v = self.lo + (self.hi - self.lo) * 0.5 * (1.0 + y.tanh());
        if self.param.log_scale() {
            v.exp()
        } else {
            v
        }
    }

    fn internal(&self, x: f64) -> f64 {
        let v = if self.param.log_scale() { x.max(f64::MIN_POSITIVE).ln() } else { x };
        let frac = ((v - self.lo) / (self.hi - self.lo)).clamp(1e-6, 1.0 - 1e-6);
        (2.0 * frac - 1.0).atanh()
    }
}

/// Minimizes the squared relative residuals of `objective` against
/// `targets` over the `free` parameters within their bounds. Parameters are
/// mapped to unbounded coordinates (log scale for rates and extinction).
pub fn calibrate(
    base: &ExperimentSetup,
    targets: &Targets,
    free: &[(FreeParam, (f64, f64))],
    objective: Objective,
    seed: u64,
) -> Result<CalibrationResult, ExperimentError> {
    base.validate()?;
    if ![targets.v_zz, targets.v_xx, targets.r_z, targets.r_x].iter().all(|t| t.is_finite() && *t != 0.0) {
        return Err(ExperimentError::InvalidArgument("targets must be finite and non-zero".into()));
    }
    let coords = free.iter().map(|&(p, b)| Coord::new(p, b)).collect::<Result<Vec<_>, _>>()?;
    for (i, c) in coords.iter().enumerate() {
        if coords[..i].iter().any(|d| d.param == c.param) {
            return Err(ExperimentError::InvalidArgument(format!("{} listed twice", c.param.key())));
        }
    }
    let build = |y: &[f64]| -> ExperimentSetup {
        let mut s = base.clone();
        for (c, &v) in coords.iter().zip(y) {
            c.param.set(&mut s, c.value(v));
        }
        s
    };
    let cost = |y: &[f64]| -> f64 {
        match evaluate(&build(y), objective, seed) {
            Ok(m) => Residuals::of(&m, targets).sum_sq(),
            Err(_) => f64::INFINITY,
        }
    };
    let y0: Vec<f64> = coords.iter().map(|c| c.internal(c.param.get(base))).collect();
    let res = nelder_mead(cost, &y0, 0.5, MAX_ITERATIONS);
    if res.iterations >= MAX_ITERATIONS && !(res.spread <= OBJECTIVE_TOLERANCE) {
        return Err(ExperimentError::NoConvergence { iterations: res.iterations, spread: res.spread });
    }
    let setup = if coords.is_empty() { base.clone() } else { build(&res.x) };
    let metrics = evaluate(&setup, objective, seed)?;
    let residuals = Residuals::of(&metrics, targets);
    let fitted = coords.iter().map(|c| (c.param, c.param.get(&setup))).collect();
    Ok(CalibrationResult { objective: residuals.sum_sq(), setup, metrics, residuals, iterations: res.iterations, fitted })
}
