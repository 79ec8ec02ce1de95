//! Command-line front end.
//!
//! Failures print one line `error: code=<code> message=<text>` on stderr and
//! exit nonzero. Stochastic commands require `--seed`.

mod config;
mod output;

pub use config::{config_entries, config_hash, parse_config, parse_config_str, serialize_config, ConfigError};
pub use output::{curve_csv, json_artifact, preamble, read_curve_csv, write_curve_csv, write_json, CurveFile};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::analysis::{fit_fringe, security_metrics, visibility, AnalysisError, Measured, SecurityReport};
use crate::experiment::{
    calibrate, paper_free_params, reproduce_paper, run_montecarlo_with_clicks, scan_delay, scan_temperature,
    ChannelPair, ExperimentError, ExperimentSetup, FreeParam, Objective, PaperOptions, ScanCurve, ScanKind, Targets,
};
use crate::optics::Basis;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    BadInput(String),
    #[error("nothing to write")]
    EmptyOutput,
    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(ConfigError::Parse { .. }) => "parse_error",
            CliError::Config(ConfigError::UnknownKey { .. }) => "unknown_key",
            CliError::Config(ConfigError::InvariantViolation(_)) => "invariant_violation",
            CliError::Config(ConfigError::Io(_)) | CliError::Io(_) => "io_error",
            CliError::Experiment(ExperimentError::NoConvergence { .. }) => "no_convergence",
            CliError::Experiment(ExperimentError::InvalidSetup(_)) => "invariant_violation",
            CliError::Experiment(_) => "invalid_argument",
            CliError::Analysis(_) => "analysis_error",
            CliError::BadInput(_) => "bad_input",
            CliError::EmptyOutput => "empty_output",
            CliError::ChecksFailed(_) => "checks_failed",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hybrid-qkd", version, about = "Hybrid time-bin/polarization entanglement QKD link simulator")]
struct Cli {
    /// Print the default configuration file and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BasisArg {
    Z,
    X,
}

impl From<BasisArg> for Basis {
    fn from(b: BasisArg) -> Basis {
        match b {
            BasisArg::Z => Basis::Z,
            BasisArg::X => Basis::X,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Analytic,
    Montecarlo,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// One Monte Carlo run: run.json and clicks.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Simulated time, seconds.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        /// Overrides experiment.alice_basis.
        #[arg(long, value_enum)]
        basis: Option<BasisArg>,
        /// Overrides decoder.phase_phi, radians.
        #[arg(long, allow_hyphen_values = true)]
        phase: Option<f64>,
        /// Overrides coincidence.scan_delay, seconds.
        #[arg(long, allow_hyphen_values = true)]
        scan_delay: Option<f64>,
    },
    /// Coincidences versus scan delay: delay_curve.csv.
    ScanDelay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Seconds.
        #[arg(long, default_value_t = -5e-9, allow_hyphen_values = true)]
        min: f64,
        #[arg(long, default_value_t = 5e-9, allow_hyphen_values = true)]
        max: f64,
        #[arg(long, default_value_t = 1e-10)]
        step: f64,
        /// Seconds per point.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// X-basis coincidences versus PLC temperature: temperature_curve.csv.
    ScanTemp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Degrees C.
        #[arg(long, allow_hyphen_values = true)]
        t_min: f64,
        #[arg(long, allow_hyphen_values = true)]
        t_max: f64,
        #[arg(long)]
        step: f64,
        /// Seconds per point.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
    },
    /// Fit free parameters to target figures: fitted.cfg and residuals.json.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Required with the Monte Carlo objective.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "analytic")]
        objective: ObjectiveArg,
        /// Seconds per basis and evaluation for the Monte Carlo objective.
        #[arg(long, default_value_t = 1.0)]
        mc_duration: f64,
        /// `param=lo:hi`, repeatable. Defaults to pair rate, phase sigma and
        /// Glan extinction.
        #[arg(long = "free")]
        free: Vec<String>,
        #[arg(long, default_value_t = 0.958)]
        v_zz: f64,
        #[arg(long, default_value_t = 0.88)]
        v_xx: f64,
        #[arg(long, default_value_t = 820.0)]
        r_z: f64,
        #[arg(long, default_value_t = 950.0)]
        r_x: f64,
    },
    /// Security figures from a curve CSV: security.json.
    Analyze {
        #[arg(long)]
        counts: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        f_ec: f64,
        /// Z visibility to use when the file has no Z-basis pairs.
        #[arg(long)]
        v_zz: Option<f64>,
        /// X visibility to use when the file has no X-basis pairs.
        #[arg(long)]
        v_xx: Option<f64>,
    },
    /// Calibrate to the published figures and check them by simulation.
    DemoPaper {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Seconds of the Z-basis run.
        #[arg(long, default_value_t = 300.0)]
        z_duration: f64,
        #[arg(long, default_value_t = 32)]
        temp_points: usize,
        /// Seconds per temperature point.
        #[arg(long, default_value_t = 10.0)]
        temp_duration: f64,
    },
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let text: Vec<&str> =
                msg.lines().take_while(|l| !l.starts_with("Usage:")).map(str::trim).filter(|l| !l.is_empty()).collect();
            return report(&CliError::Usage(text.join(" ").trim_start_matches("error: ").to_string()));
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &CliError) -> i32 {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    eprintln!("error: code={} message={}", e.code(), msg);
    e.exit_code()
}

fn load(path: &Option<PathBuf>) -> Result<ExperimentSetup, CliError> {
    Ok(match path {
        Some(p) => parse_config(p)?,
        None => ExperimentSetup::default(),
    })
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} must be positive")))
    }
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        print!("{}", serialize_config(&ExperimentSetup::default()));
        return Ok(());
    }
    let Some(cmd) = cli.command else {
        return Err(CliError::Usage("missing subcommand; see --help".into()));
    };
    match cmd {
        Command::Simulate { common, seed, duration, basis, phase, scan_delay } => {
            positive("duration", duration)?;
            let mut setup = load(&common.config)?;
            if let Some(b) = basis {
                setup.alice_basis = b.into();
            }
            if let Some(p) = phase {
                setup.decoder.phase_phi = p;
            }
            if let Some(d) = scan_delay {
                setup.coincidence.scan_delay = d;
            }
            setup.validate()?;
            let hash = config_hash(&setup);
            let rec = run_montecarlo_with_clicks(&setup, duration, seed)?;
            let clicks = rec.click_stream.clone().unwrap_or_default();
            let (v, rate) = rec.basis_figures(setup.alice_basis);
            println!("pairs emitted {}  coincidences {}", rec.pairs_emitted, rec.total_coincidences());
            println!("{}-basis visibility {v:.5}  rate {rate:.2} c/s", setup.alice_basis.name());
            announce(&[
                output::write_json(&common.out.join("run.json"), "run", &rec, Some(seed), &hash)?,
                output::write_clicks(&common.out.join("clicks.csv"), &clicks, seed, &hash)?,
            ]);
        }
        Command::ScanDelay { common, seed, min, max, step, duration } => {
            positive("step", step)?;
            positive("duration", duration)?;
            let setup = load(&common.config)?;
            let curve = scan_delay(&setup, (min, max), step, duration, seed)?;
            let path = output::write_curve_csv(&common.out.join("delay_curve.csv"), &curve, &config_hash(&setup))?;
            announce(&[path]);
        }
        Command::ScanTemp { common, seed, t_min, t_max, step, duration } => {
            positive("step", step)?;
            positive("duration", duration)?;
            if !(t_max >= t_min) {
                return Err(CliError::Usage("--t-max must not be below --t-min".into()));
            }
            let setup = load(&common.config)?;
            let n = ((t_max - t_min) / step + 1e-9).floor() as usize + 1;
            let temps: Vec<f64> = (0..n).map(|i| t_min + i as f64 * step).collect();
            let curve = scan_temperature(&setup, &temps, duration, seed)?;
            let path =
                output::write_curve_csv(&common.out.join("temperature_curve.csv"), &curve, &config_hash(&setup))?;
            if curve.points.len() >= 5 {
                for a in Basis::X.alice_channels() {
                    for b in Basis::X.bob_channels() {
                        let pts: Vec<(f64, f64)> =
                            curve.curve(ChannelPair(a, b)).into_iter().map(|(x, c)| (x, c as f64)).collect();
                        match fit_fringe(&pts) {
                            Ok(f) => println!("{a}|{b}  V = {:.4} ± {:.4}", f.v_fit, f.v_sigma),
                            Err(e) => println!("{a}|{b}  no fit: {e}"),
                        }
                    }
                }
            }
            announce(&[path]);
        }
        Command::Calibrate { common, seed, objective, mc_duration, free, v_zz, v_xx, r_z, r_x } => {
            let base = load(&common.config)?;
            let objective = match objective {
                ObjectiveArg::Analytic => Objective::Analytic,
                ObjectiveArg::Montecarlo => {
                    positive("mc-duration", mc_duration)?;
                    if seed.is_none() {
                        return Err(CliError::Usage("--seed is required with --objective montecarlo".into()));
                    }
                    Objective::MonteCarlo { duration: mc_duration }
                }
            };
            let free = if free.is_empty() { paper_free_params().to_vec() } else { parse_free(&free)? };
            let targets = Targets { v_zz, v_xx, r_z, r_x };
            let res = calibrate(&base, &targets, &free, objective, seed.unwrap_or(0))?;
            let hash = config_hash(&res.setup);
            for (p, v) in &res.fitted {
                println!("{} = {v}", p.key());
            }
            println!(
                "V_zz {:.5}  V_xx {:.5}  R_z {:.2}  R_x {:.2}  ({} iterations)",
                res.metrics.v_zz, res.metrics.v_xx, res.metrics.r_z, res.metrics.r_x, res.iterations
            );
            let cfg = format!("# calibrated, config_hash={hash}\n{}", serialize_config(&res.setup));
            announce(&[
                output::write_text(&common.out.join("fitted.cfg"), &cfg)?,
                output::write_json(&common.out.join("residuals.json"), "calibration", &res, seed, &hash)?,
            ]);
        }
        Command::Analyze { counts, out, f_ec, v_zz, v_xx } => {
            let text = std::fs::read_to_string(&counts)
                .map_err(|e| CliError::Io(format!("{}: {e}", counts.display())))?;
            let file = read_curve_csv(&text)?;
            let report = analyze_curve(&file.curve, f_ec, v_zz, v_xx)?;
            print!("{report}");
            let hash = file.config_hash.unwrap_or_default();
            announce(&[output::write_json(&out.join("security.json"), "security", &report, Some(file.curve.seed), &hash)?]);
        }
        Command::DemoPaper { seed, out, z_duration, temp_points, temp_duration } => {
            let opts = PaperOptions {
                z_duration,
                temperature_points: temp_points,
                temperature_duration: temp_duration,
                ..PaperOptions::default()
            };
            let rep = reproduce_paper(seed, &opts)?;
            let hash = config_hash(&rep.calibration.setup);
            for (p, v) in &rep.calibration.fitted {
                println!("fitted {} = {v}", p.key());
            }
            print!("{}", rep.table());
            let mut paths = vec![
                output::write_json(&out.join("paper_report.json"), "report", &rep, Some(seed), &hash)?,
                output::write_text(&out.join("paper_fitted.cfg"), &serialize_config(&rep.calibration.setup))?,
            ];
            if let Some(scan) = &rep.temperature_scan {
                paths.push(output::write_curve_csv(&out.join("temperature_curve.csv"), scan, &hash)?);
            }
            announce(&paths);
            if !rep.all_pass {
                let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
                return Err(CliError::ChecksFailed(format!("outside tolerance: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn parse_free(items: &[String]) -> Result<Vec<(FreeParam, (f64, f64))>, CliError> {
    items
        .iter()
        .map(|s| {
            let bad = || CliError::Usage(format!("--free expects param=lo:hi, got {s:?}"));
            let (k, range) = s.split_once('=').ok_or_else(bad)?;
            let p = FreeParam::parse(k.trim()).ok_or_else(|| CliError::Usage(format!("unknown free parameter {k:?}")))?;
            let (lo, hi) = range.split_once(':').ok_or_else(bad)?;
            Ok((p, (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)))
        })
        .collect()
}

/// Visibility and rate of one basis from the point where the correlated
/// pairs peak.
fn peak_figures(curve: &ScanCurve, basis: Basis) -> Option<(Measured, f64)> {
    let [a0, a1] = basis.alice_channels();
    let [b0, b1] = basis.bob_channels();
    let pts = curve.points.iter().filter(|p| p.counts.keys().any(|k| k.0 == a0 || k.0 == a1));
    let get = |p: &crate::experiment::ScanPoint, a, b| p.counts.get(&ChannelPair(a, b)).copied().unwrap_or(0) as f64;
    let best = pts.max_by(|p, q| {
        let c = |p| get(p, a0, b0) + get(p, a1, b1);
        c(p).total_cmp(&c(q))
    })?;
    let good = get(best, a0, b0) + get(best, a1, b1);
    let bad = get(best, a0, b1) + get(best, a1, b0);
    let (v, s) = visibility(good, bad).ok()?;
    Some((Measured { value: v, sigma: s }, (good + bad) / curve.duration_per_point))
}

/// X visibility from fringe fits of a temperature scan, inverse-variance
/// weighted over the four pairs, with the mean X coincidence rate.
fn fringe_figures(curve: &ScanCurve) -> Result<Option<(Measured, f64)>, CliError> {
    let (mut wsum, mut wv, mut total) = (0.0, 0.0, 0.0);
    let mut any = false;
    for a in Basis::X.alice_channels() {
        for b in Basis::X.bob_channels() {
            let pair = ChannelPair(a, b);
            if !curve.points.iter().any(|p| p.counts.contains_key(&pair)) {
                continue;
            }
            any = true;
            let pts: Vec<(f64, f64)> = curve.curve(pair).into_iter().map(|(x, c)| (x, c as f64)).collect();
            total += pts.iter().map(|p| p.1).sum::<f64>();
            let fit = fit_fringe(&pts)?;
            if fit.v_sigma > 0.0 && fit.v_sigma.is_finite() {
                wsum += fit.v_sigma.powi(-2);
                wv += fit.v_sigma.powi(-2) * fit.v_fit;
            }
        }
    }
    if !any {
        return Ok(None);
    }
    if wsum == 0.0 {
        return Err(CliError::Analysis(AnalysisError::FitDiverged));
    }
    let rate = total / (curve.points.len() as f64 * curve.duration_per_point);
    Ok(Some((Measured { value: wv / wsum, sigma: wsum.powf(-0.5) }, rate)))
}

/// Security report of a curve. Z figures come from the peak point; X
/// figures from fringe fits when the curve is a temperature scan of at
/// least five points, else from the peak point. The sifted rate is the Z
/// rate, or the X rate when the file holds no Z pairs.
pub fn analyze_curve(
    curve: &ScanCurve,
    f_ec: f64,
    v_zz: Option<f64>,
    v_xx: Option<f64>,
) -> Result<SecurityReport, CliError> {
    if !(curve.duration_per_point > 0.0) {
        return Err(CliError::BadInput("duration_s must be positive".into()));
    }
    let z = peak_figures(curve, Basis::Z);
    let x = if curve.kind == ScanKind::Temperature && curve.points.len() >= 5 {
        fringe_figures(curve)?
    } else {
        peak_figures(curve, Basis::X)
    };
    let vz = match (v_zz, &z) {
        (Some(v), _) => Measured::from(v),
        (None, Some((m, _))) => *m,
        (None, None) => return Err(CliError::BadInput("no Z-basis pairs in the counts file; pass --v-zz".into())),
    };
    let vx = match (v_xx, &x) {
        (Some(v), _) => Measured::from(v),
        (None, Some((m, _))) => *m,
        (None, None) => return Err(CliError::BadInput("no X-basis pairs in the counts file; pass --v-xx".into())),
    };
    let sifted = z.map(|z| z.1).or(x.map(|x| x.1)).unwrap_or(0.0);
    Ok(security_metrics(vz, vx, sifted, f_ec)?)
}
