//! Visibilities, fringe fits and the entanglement-based key figures.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("no counts: visibility undefined")]
    ZeroCounts,
    #[error("fringe fit diverged")]
    FitDiverged,
    #[error("fringe data do not span half a period ({0})")]
    InsufficientSpan(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// A value with its one-sigma error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub sigma: f64,
}

impl From<f64> for Measured {
    fn from(value: f64) -> Self {
        Measured { value, sigma: 0.0 }
    }
}

impl From<(f64, f64)> for Measured {
    fn from((value, sigma): (f64, f64)) -> Self {
        Measured { value, sigma }
    }
}

/// `V = (c_max − c_min)/(c_max + c_min)` with its Poisson error.
pub fn visibility(c_max: f64, c_min: f64) -> Result<(f64, f64), AnalysisError> {
    let sum = c_max + c_min;
    if !(sum > 0.0) || c_max < 0.0 || c_min < 0.0 {
        return Err(AnalysisError::ZeroCounts);
    }
    let v = (c_max - c_min) / sum;
    let sigma = 2.0 * (c_max * c_min * sum).sqrt() / (sum * sum);
    Ok((v, sigma))
}

/// `counts ≈ offset + amplitude·cos(2πx/period + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FringeFit {
    pub offset: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    /// `amplitude / offset`.
    pub v_fit: f64,
    /// Standard error of `v_fit` from the fit covariance.
    pub v_sigma: f64,
    /// Root-mean-square residual.
    pub rms: f64,
}

impl FringeFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.offset + self.amplitude * (TAU * x / self.period + self.phase).cos()
    }
}

fn wrap_phase(p: f64) -> f64 {
    let w = (p + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// Linear least squares at a fixed period on centered abscissae; returns
/// `(offset, c, s, rss)` for `offset + c·cos + s·sin`.
fn linear_at(xs: &[f64], ys: &[f64], period: f64) -> Option<(f64, f64, f64, f64)> {
    let mut ata = Matrix3::zeros();
    let mut aty = Vector3::zeros();
    for (&x, &y) in xs.iter().zip(ys) {
        let (s, c) = (TAU * x / period).sin_cos();
        let row = Vector3::new(1.0, c, s);
        ata += row * row.transpose();
        aty += row * y;
    }
    let sol = ata.cholesky()?.solve(&aty);
    let rss = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let (s, c) = (TAU * x / period).sin_cos();
            (y - sol[0] - sol[1] * c - sol[2] * s).powi(2)
        })
        .sum();
    Some((sol[0], sol[1], sol[2], rss))
}

fn residuals(xs: &[f64], ys: &[f64], p: &Vector4<f64>) -> DVector<f64> {
    DVector::from_iterator(xs.len(), xs.iter().zip(ys).map(|(&x, &y)| y - (p[0] + p[1] * (TAU * x / p[2] + p[3]).cos())))
}

fn jacobian(xs: &[f64], p: &Vector4<f64>) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(xs.len(), 4);
    for (i, &x) in xs.iter().enumerate() {
        let th = TAU * x / p[2] + p[3];
        let (s, c) = th.sin_cos();
        j[(i, 0)] = 1.0;
        j[(i, 1)] = c;
        j[(i, 2)] = p[1] * s * TAU * x / (p[2] * p[2]);
        j[(i, 3)] = -p[1] * s;
    }
    j
}

/// Least-squares sinusoid. The period is initialized on a grid between the
/// Nyquist limit and four times the data span, then all four parameters are
/// refined by Levenberg–Marquardt.
pub fn fit_fringe(points: &[(f64, f64)]) -> Result<FringeFit, AnalysisError> {
    if points.len() < 5 {
        return Err(AnalysisError::InsufficientSpan(format!("{} points, need 5", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AnalysisError::InvalidInput("non-finite point".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let xmin = pts[0].0;
    let xmax = pts[pts.len() - 1].0;
    let span = xmax - xmin;
    let min_dx = pts.windows(2).map(|w| w[1].0 - w[0].0).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    if !(span > 0.0) || !min_dx.is_finite() {
        return Err(AnalysisError::InsufficientSpan("all points at one abscissa".into()));
    }
    let center = 0.5 * (xmin + xmax);
    let xs: Vec<f64> = pts.iter().map(|p| p.0 - center).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let n = xs.len() as f64;

    let mean = ys.iter().sum::<f64>() / n;
    let tss: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    if tss <= 1e-24 * (1.0 + mean * mean) * n {
        return Ok(FringeFit {
            offset: mean,
            amplitude: 0.0,
            period: 2.0 * span,
            phase: 0.0,
            v_fit: 0.0,
            v_sigma: 0.0,
            rms: (tss / n).sqrt(),
        });
    }

    let (p_lo, p_hi) = (2.0 * min_dx, 4.0 * span);
    let grid = 600;
    let mut best: Option<(f64, (f64, f64, f64, f64))> = None;
    for k in 0..=grid {
        let period = p_lo * (p_hi / p_lo).powf(k as f64 / grid as f64);
        if let Some(sol) = linear_at(&xs, &ys, period) {
            if best.is_none_or(|(_, b)| sol.3 < b.3) {
                best = Some((period, sol));
            }
        }
    }
    let (period0, (c0, cc, ss, _)) = best.ok_or(AnalysisError::FitDiverged)?;
    let mut p = Vector4::new(c0, cc.hypot(ss), period0, (-ss).atan2(cc));

    let mut r = residuals(&xs, &ys, &p);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let j = jacobian(&xs, &p);
        let jtj: Matrix4<f64> = (j.transpose() * &j).fixed_view::<4, 4>(0, 0).into();
        let jtr: Vector4<f64> = (j.transpose() * &r).fixed_view::<4, 1>(0, 0).into();
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj;
            for d in 0..4 {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            if !(trial[2] > 0.0) || trial.iter().any(|v| !v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let rt = residuals(&xs, &ys, &trial);
            let ct = rt.norm_squared();
            if ct <= cost {
                let rel = (cost - ct) / cost.max(1e-300);
                p = trial;
                r = rt;
                cost = ct;
                lambda = (lambda * 0.3).max(1e-15);
                improved = rel > 1e-15 || step.norm() > 1e-12 * p.norm();
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if p.iter().any(|v| !v.is_finite()) || !(p[2] > 0.0) {
        return Err(AnalysisError::FitDiverged);
    }
    if p[1] < 0.0 {
        p[1] = -p[1];
        p[3] += PI;
    }
    if 2.0 * span < p[2] {
        return Err(AnalysisError::InsufficientSpan(format!("span {span} < half period {}", 0.5 * p[2])));
    }
    // Covariance of (offset, amplitude) for the visibility error.
    let j = jacobian(&xs, &p);
    let dof = (n - 4.0).max(1.0);
    let s2 = cost / dof;
    let v_fit = p[1] / p[0];
    let v_sigma = (j.transpose() * &j)
        .try_inverse()
        .map(|cov| {
            let (c00, c11, c01) = (cov[(0, 0)] * s2, cov[(1, 1)] * s2, cov[(0, 1)] * s2);
            let g0 = -p[1] / (p[0] * p[0]);
            let g1 = 1.0 / p[0];
            (g0 * g0 * c00 + g1 * g1 * c11 + 2.0 * g0 * g1 * c01).max(0.0).sqrt()
        })
        .unwrap_or(f64::NAN);
    let phase = wrap_phase(p[3] - TAU * center / p[2]);
    Ok(FringeFit { offset: p[0], amplitude: p[1], period: p[2], phase, v_fit, v_sigma, rms: (cost / n).sqrt() })
}

/// Binary entropy in bits.
pub fn binary_entropy(e: f64) -> f64 {
    if e <= 0.0 || e >= 1.0 {
        0.0
    } else {
        -e * e.log2() - (1.0 - e) * (1.0 - e).log2()
    }
}

/// Asymptotic entanglement-based key fraction `1 − f_ec·h(e_z) − h(e_x)`,
/// clamped to `[0, 1]`.
pub fn key_fraction(qber_z: f64, qber_x: f64, f_ec: f64) -> f64 {
    (1.0 - f_ec * binary_entropy(qber_z) - binary_entropy(qber_x)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityReport {
    pub v_zz: Measured,
    pub v_xx: Measured,
    pub qber_z: f64,
    pub qber_x: f64,
    pub chsh_s: f64,
    pub bell_violated: bool,
    pub key_fraction: f64,
    /// Key fraction above zero: the entropy criterion, stricter than CHSH.
    pub key_distillable: bool,
    pub sifted_rate: f64,
    pub key_rate: f64,
    pub f_ec: f64,
}

pub fn security_metrics(
    v_zz: impl Into<Measured>,
    v_xx: impl Into<Measured>,
    sifted_rate: f64,
    f_ec: f64,
) -> Result<SecurityReport, AnalysisError> {
    let (v_zz, v_xx) = (v_zz.into(), v_xx.into());
    for (name, v) in [("v_zz", v_zz.value), ("v_xx", v_xx.value)] {
        if !(-1.0..=1.0).contains(&v) {
            return Err(AnalysisError::InvalidInput(format!("{name} = {v} outside [-1, 1]")));
        }
    }
    if !(sifted_rate >= 0.0 && sifted_rate.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!("sifted_rate = {sifted_rate}")));
    }
    if !(f_ec >= 1.0 && f_ec.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!("f_ec = {f_ec} below 1")));
    }
    let qber_z = (1.0 - v_zz.value) / 2.0;
    let qber_x = (1.0 - v_xx.value) / 2.0;
    // 2√2·V, written so that V = 1/√2 lands exactly on S = 2.
    let chsh_s = 2.0 * (v_zz.value.min(v_xx.value) / FRAC_1_SQRT_2);
    let kf = key_fraction(qber_z, qber_x, f_ec);
    Ok(SecurityReport {
        v_zz,
        v_xx,
        qber_z,
        qber_x,
        chsh_s,
        bell_violated: chsh_s > 2.0,
        key_fraction: kf,
        key_distillable: kf > 0.0,
        sifted_rate,
        key_rate: sifted_rate * kf,
        f_ec,
    })
}

impl fmt::Display for SecurityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: [(&str, String); 10] = [
            ("V_zz", format!("{:.4} ± {:.4}", self.v_zz.value, self.v_zz.sigma)),
            ("V_xx", format!("{:.4} ± {:.4}", self.v_xx.value, self.v_xx.sigma)),
            ("QBER_z", format!("{:.4}", self.qber_z)),
            ("QBER_x", format!("{:.4}", self.qber_x)),
            ("CHSH S", format!("{:.4}", self.chsh_s)),
            ("Bell violated (S > 2)", self.bell_violated.to_string()),
            ("key fraction", format!("{:.4}", self.key_fraction)),
            ("key distillable", self.key_distillable.to_string()),
            ("sifted rate (c/s)", format!("{:.2}", self.sifted_rate)),
            ("key rate (bit/s)", format!("{:.2}", self.key_rate)),
        ];
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(f, "{k:<w$}  {v}")?;
        }
        Ok(())
    }
}
