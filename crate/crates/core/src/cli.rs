//! Command-line front end: `simulate`, `spectral` and `example`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diagnostics::{analyze, DiagnosticsError, DiagnosticsReport, Label, Thresholds};
use crate::group::Angle;
use crate::processes::{
    golden_mean_chain, Field, FourierTerm, IidLaw, MeasureSpec, ProcessError, ProcessSpec,
};
use crate::spectral::{
    geometric_grid, predicted_variance, spectral_convolve, VarianceCurve, VarianceRow, DEFAULT_GRID,
};
use crate::stats::linear_fit;
use crate::walk::{
    blocked_identity_error, simulate_with, Beta, CheckpointEnsemble, RunOptions, WalkConfig,
    WalkError, DEFAULT_ETA_GRID,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Relative tolerance of the blocked-walk identity check.
pub const BLOCKED_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Budget(_) => 3,
            CliError::ChecksFailed(_) | CliError::Io { .. } => 1,
        }
    }
}

impl From<WalkError> for CliError {
    fn from(e: WalkError) -> Self {
        match e {
            WalkError::ResourceCap { .. } => CliError::Budget(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ProcessError> for CliError {
    fn from(e: ProcessError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "twistwalk",
    version,
    about = "Twisted random walks driven by stationary processes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a walk ensemble and write diagnostics.
    Simulate(SimulateArgs),
    /// Evaluate the variance curve v(n, β) without simulation.
    Spectral(SpectralArgs),
    /// Run one of the built-in reference settings and check its expectations.
    Example(ExampleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointMode {
    Dense,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FieldArg {
    Real,
    Complex,
}

impl From<FieldArg> for Field {
    fn from(f: FieldArg) -> Field {
        match f {
            FieldArg::Real => Field::Real,
            FieldArg::Complex => Field::Complex,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Built-in process name or path to a JSON process spec.
    #[arg(long)]
    pub process: String,
    /// Twist angle: radians, or exactly `2pi*p/q`.
    #[arg(long, default_value = "1.0")]
    pub beta: String,
    #[arg(long, default_value_t = 4096)]
    pub n_max: usize,
    #[arg(long, value_enum, default_value = "geometric")]
    pub checkpoints: CheckpointMode,
    #[arg(long, default_value_t = 10_000)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated ball radii.
    #[arg(long, value_delimiter = ',')]
    pub eta_grid: Option<Vec<f64>>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Field of built-in moving-average and Gaussian processes.
    #[arg(long, value_enum, default_value = "real")]
    pub field: FieldArg,
    /// White variance split off a Gaussian-spectral process for the
    /// conditional small-ball estimator.
    #[arg(long, default_value_t = 0.0)]
    pub nugget: f64,
    /// Wall-clock budget in seconds.
    #[arg(long, default_value_t = 600.0)]
    pub budget_secs: f64,
}

#[derive(Debug, clap::Args)]
pub struct SpectralArgs {
    #[arg(long)]
    pub process: String,
    /// Comma-separated twist angles in radians.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub beta: Vec<f64>,
    #[arg(long, default_value_t = 16_384)]
    pub n_max: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "real")]
    pub field: FieldArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExampleName {
    GaussianTransient,
    SoficRecurrent,
    RotationSingular,
    RationalBlock,
}

#[derive(Debug, clap::Args)]
pub struct ExampleArgs {
    #[arg(value_enum)]
    pub name: ExampleName,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Override the canonical replica count.
    #[arg(long)]
    pub replicas: Option<usize>,
}

/// Everything that determines a run's outputs. The output directory and
/// worker count are deliberately absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub process_ref: String,
    pub process: ProcessSpec,
    pub walk: WalkConfig,
    pub checkpoint_mode: CheckpointMode,
    pub thresholds: Thresholds,
    pub budget_secs: f64,
}

impl RunManifest {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// A pass/fail expectation evaluated after a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: String,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    manifest_sha256: &'a str,
    code_version: &'a str,
    #[serde(flatten)]
    report: &'a DiagnosticsReport,
    checks: &'a [Check],
}

/// Outputs of one simulate run.
#[derive(Debug)]
pub struct RunOutput {
    pub manifest: RunManifest,
    pub hash: String,
    pub ensemble: CheckpointEnsemble,
    pub report: DiagnosticsReport,
    pub checks: Vec<Check>,
}

/// Resolves a built-in process name or a JSON file. Gaussian built-ins use a
/// block window of `n_max`.
pub fn resolve_process(
    reference: &str,
    n_max: usize,
    field: Field,
) -> Result<ProcessSpec, CliError> {
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let spec = match reference {
        "iid-rademacher" => ProcessSpec::iid(IidLaw::Rademacher),
        "iid-gaussian" => ProcessSpec::iid(IidLaw::ComplexGaussian { variance: 1.0 }),
        "iid-circle" => ProcessSpec::iid(IidLaw::UniformCircle),
        "ma1" => ProcessSpec::moving_average(vec![1.0.into(), 1.0.into()], field),
        "golden-mean" => ProcessSpec::MarkovChain(golden_mean_chain()),
        "gaussian-flat" => {
            ProcessSpec::gaussian_spectral(MeasureSpec::flat(1.0), n_max.max(2), field)
        }
        "gaussian-singular" => ProcessSpec::gaussian_spectral(
            MeasureSpec::singular_half_power(1.0),
            n_max.max(2),
            field,
        ),
        "rotation" => ProcessSpec::Rotation {
            alpha: std::f64::consts::TAU * golden,
            fourier: vec![FourierTerm {
                index: 1,
                coeff: 1.0.into(),
            }],
        },
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!(
                    "unknown process {path:?} ({e}); built-ins are iid-rademacher, iid-gaussian, iid-circle, ma1, \
                     golden-mean, gaussian-flat, gaussian-singular, rotation"
                ))
            })?;
            ProcessSpec::from_json(&text)?
        }
    };
    spec.prepare()?;
    Ok(spec)
}

impl SimulateArgs {
    pub fn manifest(&self) -> Result<RunManifest, CliError> {
        let beta: Beta = self.beta.parse()?;
        let process = resolve_process(&self.process, self.n_max, self.field.into())?;
        if let Some(w) = process.window() {
            if w < self.n_max {
                warn!(
                    "process window {w} is shorter than n_max {}; blocks are independent",
                    self.n_max
                );
            }
        }
        let mut walk = WalkConfig::new(beta, self.n_max, self.replicas, self.seed)
            .with_eta_grid(
                self.eta_grid
                    .clone()
                    .unwrap_or_else(|| DEFAULT_ETA_GRID.to_vec()),
            )
            .with_nugget(self.nugget);
        if self.checkpoints == CheckpointMode::Dense {
            walk = walk.dense();
        }
        walk.validate()?;
        if !(self.budget_secs > 0.0) {
            return Err(CliError::Config("budget must be positive".into()));
        }
        Ok(RunManifest {
            code_version: CODE_VERSION.into(),
            process_ref: self.process.clone(),
            process,
            walk,
            checkpoint_mode: self.checkpoints,
            thresholds: Thresholds::default(),
            budget_secs: self.budget_secs,
        })
    }
}

/// Simulates, analyzes and runs the automatic checks, without writing files.
pub fn run_manifest(manifest: &RunManifest, workers: Option<usize>) -> Result<RunOutput, CliError> {
    let opts = RunOptions {
        workers,
        deadline: Some(Instant::now() + Duration::from_secs_f64(manifest.budget_secs)),
    };
    let ensemble = simulate_with(&manifest.process, &manifest.walk, opts)?;
    let report = analyze(&ensemble, &manifest.thresholds, manifest.walk.seed)?;
    let mut checks = Vec::new();
    if let Beta::Rational(r) = manifest.walk.beta {
        let q = r.denominator() as usize;
        let blocks = (manifest.walk.n_max / q).clamp(1, 4096);
        let xs: Vec<_> = manifest
            .process
            .prepare()?
            .stream(manifest.walk.seed, 0)
            .take(blocks * q)
            .collect();
        let err = blocked_identity_error(&xs, r.numerator() as i64, r.denominator())?;
        checks.push(Check {
            name: format!("blocked-walk identity over {blocks} blocks of {q}"),
            value: err,
            expected: format!("<= {BLOCKED_TOL:e}"),
            passed: err <= BLOCKED_TOL,
        });
    }
    Ok(RunOutput {
        hash: manifest.sha256(),
        manifest: manifest.clone(),
        ensemble,
        report,
        checks,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

/// Per-checkpoint summary table.
pub fn ensemble_csv(report: &DiagnosticsReport, hash: &str) -> String {
    let mut out = format!("# manifest_sha256={hash}\n");
    out.push_str("n,rotation,rotation_residue,mean_abs2_scaled,mean_abs2_scaled_se,eta,p_unscaled,p_unscaled_se,estimator,mean_returns,mean_returns_se\n");
    let ne = report.eta_grid.len();
    for (i, c) in report.checkpoints.iter().enumerate() {
        for u in &report.unscaled[i * ne..(i + 1) * ne] {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.n,
                c.rotation,
                c.rotation_residue
                    .map(|r| r.to_string())
                    .unwrap_or_default(),
                c.mean_abs2_scaled,
                c.mean_abs2_scaled_se,
                u.eta,
                u.p_hat,
                u.se,
                u.estimator,
                u.mean_returns,
                u.mean_returns_se
            );
        }
    }
    out
}

pub fn report_json(out: &RunOutput) -> String {
    serde_json::to_string_pretty(&ReportFile {
        manifest_sha256: &out.hash,
        code_version: CODE_VERSION,
        report: &out.report,
        checks: &out.checks,
    })
    .expect("report serializes")
}

pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut manifest = serde_json::to_value(&out.manifest).expect("manifest serializes");
    manifest["manifest_sha256"] = out.hash.clone().into();
    write_file(
        dir,
        "manifest.json",
        &(serde_json::to_string_pretty(&manifest).expect("json") + "\n"),
    )?;
    write_file(dir, "report.json", &(report_json(out) + "\n"))?;
    write_file(
        dir,
        "smallball.csv",
        &out.report
            .to_csv(Some(&format!("manifest_sha256={}", out.hash))),
    )?;
    write_file(dir, "ensemble.csv", &ensemble_csv(&out.report, &out.hash))?;
    Ok(())
}

fn finish(out: &RunOutput) -> Result<(), CliError> {
    println!("label: {}", out.report.label);
    for c in &out.checks {
        println!(
            "{} {}: {} (expected {})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.expected
        );
    }
    if out.report.truncated {
        return Err(CliError::Budget(format!(
            "stopped after {} of {} replicas; outputs are partial",
            out.report.replicas, out.manifest.walk.replicas
        )));
    }
    let failed = out.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<RunOutput, CliError> {
    let manifest = args.manifest()?;
    let out = run_manifest(&manifest, args.workers)?;
    write_outputs(&out, &args.out)?;
    Ok(out)
}

/// `v(n, β)` from the spectral measure over a geometric n grid, cross-checked
/// against the covariance-sum form where the covariances are available.
pub fn variance_curve(
    spec: &ProcessSpec,
    betas: &[f64],
    n_max: usize,
) -> Result<(VarianceCurve, f64), CliError> {
    let measure = spec.spectral_measure(DEFAULT_GRID)?;
    let cov = spec.covariance_sequence(n_max).ok();
    let mut curve = VarianceCurve::default();
    let mut worst: f64 = 0.0;
    for &b in betas {
        for n in geometric_grid(n_max) {
            let v = spectral_convolve(&measure, n, Angle::new(b));
            if let Some(r) = &cov {
                if let Ok(p) = predicted_variance(r, Angle::new(b), n) {
                    worst = worst.max((p - v).abs() / p.abs().max(1e-300));
                }
            }
            curve.rows.push(VarianceRow {
                n,
                beta: b,
                predicted: v,
                mc_mean: None,
                mc_se: None,
            });
        }
    }
    Ok((curve, worst))
}

/// Least-squares exponent of `v(n, β)` in `n` over the top half of the grid.
pub fn variance_exponent(curve: &VarianceCurve, beta: f64) -> Option<f64> {
    let rows: Vec<&VarianceRow> = curve
        .rows
        .iter()
        .filter(|r| r.beta == beta && r.predicted > 0.0)
        .collect();
    let top = &rows[rows.len() / 2..];
    let xs: Vec<f64> = top.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = top.iter().map(|r| r.predicted.ln()).collect();
    linear_fit(&xs, &ys, &vec![1.0; xs.len()]).map(|f| f.slope)
}

pub fn cmd_spectral(args: &SpectralArgs) -> Result<(), CliError> {
    let spec = resolve_process(&args.process, args.n_max, args.field.into())?;
    if args.n_max == 0 || args.beta.iter().any(|b| !b.is_finite()) {
        return Err(CliError::Config(
            "n_max must be positive and beta finite".into(),
        ));
    }
    let (curve, worst) = variance_curve(&spec, &args.beta, args.n_max)?;
    let manifest = serde_json::json!({
        "code_version": CODE_VERSION,
        "process_ref": args.process,
        "process": spec,
        "beta": args.beta,
        "n_max": args.n_max,
    });
    let text = serde_json::to_string(&manifest).expect("json");
    let hash: String = Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Io {
        path: args.out.clone(),
        source,
    })?;
    let mut m = manifest;
    m["manifest_sha256"] = hash.clone().into();
    write_file(
        &args.out,
        "manifest.json",
        &(serde_json::to_string_pretty(&m).expect("json") + "\n"),
    )?;
    write_file(
        &args.out,
        "variance.csv",
        &curve.to_csv(Some(&format!("manifest_sha256={hash}"))),
    )?;
    for &b in &args.beta {
        if let Some(e) = variance_exponent(&curve, b) {
            println!("beta={b}: fitted exponent of v(n, beta) = {e:.4}");
        }
    }
    println!("max relative gap between covariance-sum and spectral forms: {worst:.3e}");
    Ok(())
}

/// The canonical manifest of a built-in example.
pub fn example_manifest(
    name: ExampleName,
    replicas: Option<usize>,
) -> Result<RunManifest, CliError> {
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let (process_ref, process, beta, n_max, reps, seed, nugget) = match name {
        ExampleName::GaussianTransient => (
            "gaussian-singular",
            ProcessSpec::gaussian_spectral(
                MeasureSpec::singular_half_power(1.0),
                1 << 13,
                Field::Real,
            ),
            Beta::radians(1.0),
            1 << 13,
            100_000,
            20_240_601,
            0.5,
        ),
        ExampleName::SoficRecurrent => (
            "golden-mean",
            ProcessSpec::MarkovChain(golden_mean_chain()),
            Beta::radians(1.0),
            1 << 12,
            10_000,
            7,
            0.0,
        ),
        ExampleName::RotationSingular => (
            "rotation",
            ProcessSpec::Rotation {
                alpha: std::f64::consts::TAU * golden,
                fourier: vec![FourierTerm {
                    index: 1,
                    coeff: 1.0.into(),
                }],
            },
            Beta::radians(1.0),
            1 << 14,
            1000,
            11,
            0.0,
        ),
        ExampleName::RationalBlock => (
            "iid-rademacher",
            ProcessSpec::iid(IidLaw::Rademacher),
            Beta::rational(1, 3)?,
            1 << 12,
            10_000,
            13,
            0.0,
        ),
    };
    let walk = WalkConfig::new(beta, n_max, replicas.unwrap_or(reps), seed).with_nugget(nugget);
    walk.validate()?;
    Ok(RunManifest {
        code_version: CODE_VERSION.into(),
        process_ref: process_ref.into(),
        process,
        walk,
        checkpoint_mode: CheckpointMode::Geometric,
        thresholds: Thresholds::default(),
        budget_secs: 600.0,
    })
}

fn check(name: &str, value: f64, expected: &str, passed: bool) -> Check {
    Check {
        name: name.into(),
        value,
        expected: expected.into(),
        passed,
    }
}

/// Expectations of a built-in example, appended to `out.checks`.
pub fn example_checks(name: ExampleName, out: &mut RunOutput) {
    let r = &out.report;
    let label_is = |want: Label| {
        check(
            "label",
            if r.label == want { 1.0 } else { 0.0 },
            &want.to_string(),
            r.label == want,
        )
    };
    match name {
        ExampleName::GaussianTransient => {
            out.checks.push(label_is(Label::TransienceEvidence));
            let s = r.summability_at(0.5);
            let g = s.and_then(|s| s.gamma).unwrap_or(f64::NAN);
            out.checks.push(check(
                "small-ball decay exponent at eta=0.5",
                g,
                "in [1.35, 1.65]",
                (1.35..=1.65).contains(&g),
            ));
            let f = s.map(|s| s.last_octave_fraction).unwrap_or(f64::NAN);
            out.checks.push(check(
                "last-octave share of partial sum",
                f,
                "< 0.1",
                f < 0.1,
            ));
        }
        ExampleName::SoficRecurrent => out.checks.push(label_is(Label::RecurrenceEvidence)),
        ExampleName::RotationSingular => {
            let m = r
                .checkpoints
                .last()
                .map(|c| c.mean_abs2_scaled)
                .unwrap_or(f64::NAN);
            out.checks
                .push(check("mean |S_n|^2/n at n_max", m, "< 0.05", m < 0.05));
        }
        ExampleName::RationalBlock => {
            let exact = out
                .ensemble
                .checkpoints
                .iter()
                .all(|c| c.rotation_residue == Some(c.n as u64 % 3));
            out.checks.push(check(
                "rotation residues exact",
                if exact { 1.0 } else { 0.0 },
                "n mod 3",
                exact,
            ));
            out.checks.push(label_is(Label::RecurrenceEvidence));
        }
    }
}

pub fn cmd_example(args: &ExampleArgs) -> Result<RunOutput, CliError> {
    let manifest = example_manifest(args.name, args.replicas)?;
    info!(
        "running example {:?} with {} replicas",
        args.name, manifest.walk.replicas
    );
    let mut out = run_manifest(&manifest, args.workers)?;
    example_checks(args.name, &mut out);
    write_outputs(&out, &args.out)?;
    Ok(out)
}

/// Parses arguments, runs the command, and maps errors to exit codes
/// (2 configuration, 3 budget, 1 other failures).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a).and_then(|o| finish(&o)),
        Command::Spectral(a) => cmd_spectral(a),
        Command::Example(a) => cmd_example(a).and_then(|o| finish(&o)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("twistwalk").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn missing_process_is_a_usage_error() {
        let err = Cli::try_parse_from(["twistwalk", "simulate", "--beta", "1.0"]).unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::MissingRequiredArgument);
        assert_eq!(main_with_args(["twistwalk", "simulate"]), ExitCode::from(2));
    }

    #[test]
    fn manifest_hash_ignores_workers_and_out() {
        let a = parse(&[
            "simulate",
            "--process",
            "iid-rademacher",
            "--workers",
            "1",
            "--out",
            "/tmp/a",
        ]);
        let b = parse(&[
            "simulate",
            "--process",
            "iid-rademacher",
            "--workers",
            "8",
            "--out",
            "/tmp/b",
        ]);
        let c = parse(&["simulate", "--process", "iid-rademacher", "--seed", "1"]);
        let m = |cli: Cli| match cli.command {
            Command::Simulate(a) => a.manifest().unwrap(),
            _ => unreachable!(),
        };
        let (ha, hb, hc) = (m(a).sha256(), m(b).sha256(), m(c).sha256());
        assert_eq!(ha, hb);
        assert_ne!(ha, hc);
        assert_eq!(ha.len(), 64);
    }

    #[test]
    fn config_errors() {
        let bad_beta = parse(&[
            "simulate",
            "--process",
            "iid-rademacher",
            "--beta",
            "2pi*2/4",
        ]);
        let Command::Simulate(a) = bad_beta.command else {
            unreachable!()
        };
        assert_eq!(a.manifest().unwrap_err().exit_code(), 2);
        let bad_proc = parse(&["simulate", "--process", "no-such-thing"]);
        let Command::Simulate(a) = bad_proc.command else {
            unreachable!()
        };
        assert_eq!(a.manifest().unwrap_err().exit_code(), 2);
        let huge = parse(&[
            "simulate",
            "--process",
            "iid-rademacher",
            "--replicas",
            "1000000000",
            "--n-max",
            "1000000",
        ]);
        let Command::Simulate(a) = huge.command else {
            unreachable!()
        };
        assert_eq!(a.manifest().unwrap_err().exit_code(), 3);
    }

    #[test]
    fn rational_beta_runs_blocked_identity() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let cli = parse(&[
            "simulate",
            "--process",
            "iid-rademacher",
            "--beta",
            "2pi*1/3",
            "--n-max",
            "512",
            "--replicas",
            "500",
            "--out",
            out,
        ]);
        let Command::Simulate(a) = cli.command else {
            unreachable!()
        };
        let run = cmd_simulate(&a).unwrap();
        assert_eq!(run.checks.len(), 1);
        assert!(run.checks[0].passed, "{:?}", run.checks);
        for f in [
            "manifest.json",
            "report.json",
            "smallball.csv",
            "ensemble.csv",
        ] {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.contains(&run.hash), "{f} lacks the manifest hash");
        }
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(report["beta"], "2pi*1/3");
        assert_eq!(report["checkpoints"][2]["rotation_residue"], 0);
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let cli = parse(&[
            "simulate",
            "--process",
            "iid-rademacher",
            "--n-max",
            "4096",
            "--replicas",
            "100000",
            "--budget-secs",
            "0.05",
            "--workers",
            "1",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        let Command::Simulate(a) = cli.command else {
            unreachable!()
        };
        let run = cmd_simulate(&a).unwrap();
        assert!(run.report.truncated);
        assert_eq!(finish(&run).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn spectral_curves() {
        let flat = resolve_process("gaussian-flat", 64, Field::Real).unwrap();
        let (curve, _) = variance_curve(&flat, &[0.3, 2.0], 1024).unwrap();
        assert!(curve.rows.iter().all(|r| (r.predicted - 1.0).abs() < 1e-9));

        let singular = resolve_process("gaussian-singular", 64, Field::Real).unwrap();
        let (curve, gap) = variance_curve(&singular, &[1.0], 1 << 14).unwrap();
        let e = variance_exponent(&curve, 1.0).unwrap();
        assert!((e - 0.5).abs() < 0.05, "{e}");
        assert!(gap < 1e-6, "{gap}");

        let atom = ProcessSpec::gaussian_spectral(MeasureSpec::atom(1.0, 1.0), 8, Field::Complex);
        let (curve, _) = variance_curve(&atom, &[1.0], 256).unwrap();
        for r in &curve.rows {
            assert!((r.predicted - r.n as f64).abs() < 1e-9 * r.n as f64);
        }
    }

    #[test]
    fn example_manifests_are_valid() {
        for name in [
            ExampleName::GaussianTransient,
            ExampleName::SoficRecurrent,
            ExampleName::RotationSingular,
            ExampleName::RationalBlock,
        ] {
            let m = example_manifest(name, None).unwrap();
            assert_eq!(m, example_manifest(name, None).unwrap());
            m.process.prepare().unwrap();
        }
    }
}
