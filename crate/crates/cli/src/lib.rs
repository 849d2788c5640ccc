//! Command-line runner for the `mpflow` experiments.
//!
//! Every subcommand writes its artifacts plus `run_meta.json` into an
//! output directory and prints a JSON summary on stdout. Exit codes: 0 on
//! success, 1 on invalid input or a failed check, 2 when a numerical guard
//! aborts the run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mpflow::experiments::{
    self, ComposeConfig, DecomposeCheckConfig, DecoupleConfig, HermiteCheckConfig, MaxEntConfig,
    TrainAbelianConfig,
};
use mpflow::{acceptance, Error};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mpflow", version, about = "Monomial-potential flows and measure algebra experiments")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare the direct loss with its Fourier decomposition on random draws.
    DecomposeCheck(DecomposeArgs),
    /// Run the particle flow on the Abelian task.
    TrainAbelian(ConfigArgs),
    /// Run the particle flow on a quadratic loss over monomial potentials.
    Decouple(ConfigArgs),
    /// Reduced second-variation spectrum along a recorded trajectory.
    Spectrum(SpectrumArgs),
    /// Check how 0/1-sets of a monomial family compose under measure products.
    Compose(ComposeArgs),
    /// Solve a maximum-entropy moment-matching problem on a box.
    Maxent(MaxEntArgs),
    /// Hermite recurrence, orthogonality and parity checks.
    HermiteCheck(HermiteArgs),
    /// Run the acceptance suite and print one PASS/FAIL line per criterion.
    Accept(AcceptArgs),
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    /// Number of random draws.
    #[arg(long)]
    seeds: Option<usize>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value = "runs/decompose-check")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    /// Trajectory directory written by `decouple` with `record_kernel`.
    #[arg(long)]
    traj: PathBuf,
    /// Defaults to `<traj>/spectrum`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ComposeArgs {
    left: PathBuf,
    right: PathBuf,
    #[arg(long)]
    family: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value = "runs/compose")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MaxEntArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Family file `{"monomials": [...]}`.
    #[arg(long)]
    monomials: Option<PathBuf>,
    /// Comma-separated target moments.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    targets: Option<Vec<f64>>,
    /// Half-width of the box `[-B, B]^d`.
    #[arg(long = "box")]
    half_width: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    perturbations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/maxent")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct HermiteArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    max_degree: Option<u32>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/hermite-check")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AcceptArgs {
    /// Scratch directory for the criteria that write artifacts.
    #[arg(long, default_value = "runs/accept")]
    out: PathBuf,
}

/// A failed run: message for stderr and the process exit code.
#[derive(Debug)]
struct Failure {
    message: String,
    code: i32,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: e.exit_code(), message: e.to_string() }
    }
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { message: message.into(), code: 1 }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command) -> Result<i32, Failure> {
    match command {
        Command::DecomposeCheck(a) => {
            let mut cfg: DecomposeCheckConfig = optional_config(a.config.as_deref())?;
            override_with(&mut cfg.n, a.n);
            override_with(&mut cfg.q, a.q);
            override_with(&mut cfg.seeds, a.seeds);
            override_with(&mut cfg.seed, a.seed);
            override_with(&mut cfg.tol, a.tol);
            let summary = experiments::decompose_check(&cfg, &a.out)?;
            print_json(&summary)?;
            Ok(if summary.pass { 0 } else { 1 })
        }
        Command::TrainAbelian(a) => {
            let cfg: TrainAbelianConfig = experiments::load_config(&a.config)?;
            print_json(&experiments::train_abelian(&cfg, &a.out)?)?;
            Ok(0)
        }
        Command::Decouple(a) => {
            let cfg: DecoupleConfig = experiments::load_config(&a.config)?;
            print_json(&experiments::decouple(&cfg, &a.out)?)?;
            Ok(0)
        }
        Command::Spectrum(a) => {
            let out = a.out.unwrap_or_else(|| a.traj.join("spectrum"));
            let summary = experiments::spectrum_from_dir(&a.traj, &out)?;
            experiments::emit_plot_data(&a.traj)?;
            print_json(&summary)?;
            Ok(0)
        }
        Command::Compose(a) => {
            let cfg = ComposeConfig { left: a.left, right: a.right, family: a.family, tol: a.tol };
            let report = experiments::compose(&cfg, &a.out)?;
            print_json(&report)?;
            Ok(if report.pass { 0 } else { 1 })
        }
        Command::Maxent(a) => {
            let cfg = maxent_config(&a)?;
            print_json(&experiments::maxent_run(&cfg, &a.out)?)?;
            Ok(0)
        }
        Command::HermiteCheck(a) => {
            let mut cfg: HermiteCheckConfig = optional_config(a.config.as_deref())?;
            override_with(&mut cfg.dim, a.dim);
            override_with(&mut cfg.max_degree, a.max_degree);
            override_with(&mut cfg.samples, a.samples);
            override_with(&mut cfg.seed, a.seed);
            let summary = experiments::hermite_check(&cfg, &a.out)?;
            print_json(&summary)?;
            Ok(if summary.pass { 0 } else { 1 })
        }
        Command::Accept(a) => {
            std::fs::create_dir_all(&a.out).map_err(Error::from)?;
            let outcomes = acceptance::run_all(&a.out, |o| println!("{o}"));
            let failed = outcomes.iter().filter(|o| !o.pass).count();
            println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
            Ok(if failed == 0 { 0 } else { 1 })
        }
    }
}

fn optional_config<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        Some(p) => Ok(experiments::load_config(p)?),
        None => Ok(T::default()),
    }
}

fn override_with<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn maxent_config(a: &MaxEntArgs) -> Result<MaxEntConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => experiments::load_config::<MaxEntConfig>(p)?,
        None => {
            let missing: Vec<&str> = [
                ("--monomials", a.monomials.is_none()),
                ("--targets", a.targets.is_none()),
                ("--box", a.half_width.is_none()),
                ("--dim", a.dim.is_none()),
            ]
            .into_iter()
            .filter_map(|(flag, absent)| absent.then_some(flag))
            .collect();
            if !missing.is_empty() {
                return Err(Failure::usage(format!(
                    "maxent needs --config or all of --monomials, --targets, --box, --dim (missing {})\n\n\
                     usage: mpflow maxent --monomials <FILE> --targets <LIST> --box <B> --dim <D> [--out <DIR>]",
                    missing.join(", ")
                )));
            }
            MaxEntConfig {
                dim: 0,
                monomials: Vec::new(),
                targets: Vec::new(),
                half_width: 0.0,
                nodes: mpflow::maxent::DEFAULT_NODES,
                tol: 1e-12,
                max_iter: 100,
                perturbations: 0,
                seed: 0,
            }
        }
    };
    if let Some(p) = &a.monomials {
        cfg.monomials = experiments::read_family(p)?;
    }
    override_with(&mut cfg.targets, a.targets.clone());
    override_with(&mut cfg.half_width, a.half_width);
    override_with(&mut cfg.dim, a.dim);
    override_with(&mut cfg.nodes, a.nodes);
    override_with(&mut cfg.tol, a.tol);
    override_with(&mut cfg.max_iter, a.max_iter);
    override_with(&mut cfg.perturbations, a.perturbations);
    override_with(&mut cfg.seed, a.seed);
    Ok(cfg)
}

fn print_json(value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(e.to_string()))?;
    println!("{text}");
    Ok(())
}
