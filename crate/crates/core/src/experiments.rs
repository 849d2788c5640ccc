//! Seeded experiment runners and their artifacts.
//!
//! Every runner validates its configuration, writes its outputs into a
//! directory together with `run_meta.json`, and returns a summary. Output
//! files contain no timestamps or host data, so identical configurations
//! produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::abelian_task::ParticleSystem;
use crate::dynamics::{
    self, decoupling_report, exp_fit, integrate_from, AbelianFamily, ExpFit, FlowConfig, SeparableLoss, Trajectory,
};
use crate::error::{Error, Result};
use crate::hermite::{
    gaussian_expectation, gaussian_quadrature, he, hermite_eval, integrate, symmetrized_gaussian, HermiteIndex,
};
use crate::maxent::{self, MaxEntProblem, MaxEntSolution, PerturbationReport};
use crate::measure_algebra::{compose_check, CompositionReport, FamilyJson, MeasureJson, MonomialSpec, WeightedMeasure};
use crate::potentials::{
    calibrate, decomposition_residual, distance_to_01, Calibration, TargetAssignment,
};
use crate::spectrum::{track_crossings, CrossingReport, SpectrumFrame};

pub const FORMAT_VERSION: u32 = 1;
pub const RUN_META: &str = "run_meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub mpflow: String,
    pub format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            mpflow: env!("CARGO_PKG_VERSION").to_string(),
            format: FORMAT_VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub calibration: Option<Calibration>,
    pub versions: Versions,
}

impl RunMeta {
    pub fn new(command: &str, config: &impl Serialize, seeds: Vec<u64>, calibration: Option<Calibration>) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds,
            calibration,
            versions: Versions::default(),
        })
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn read_run_meta(dir: &Path) -> Result<RunMeta> {
    let path = dir.join(RUN_META);
    let text = fs::read_to_string(&path).map_err(|_| {
        Error::Config(format!("{} lacks {RUN_META}; refusing to use its outputs", dir.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptArtifact {
        file: path,
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Parses a JSON configuration, rejecting unknown keys.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Shortest round-trip formatting, switching to exponent form for very
/// large or small magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

// ---------------------------------------------------------------- decompose-check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeCheckConfig {
    pub n: usize,
    pub q: usize,
    pub seeds: usize,
    /// Root seed; draw `i` uses `seed + i`.
    pub seed: u64,
    pub init_std: f64,
    pub calibration_draws: usize,
    pub tol: f64,
}

impl Default for DecomposeCheckConfig {
    fn default() -> Self {
        Self {
            n: 5,
            q: 8,
            seeds: 20,
            seed: 0,
            init_std: 1.0,
            calibration_draws: 5,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeSummary {
    pub n: usize,
    pub q: usize,
    pub draws: usize,
    pub max_relative_residual: f64,
    pub tol: f64,
    pub pass: bool,
    pub calibration: Calibration,
}

pub fn decompose_check(config: &DecomposeCheckConfig, out: &Path) -> Result<DecomposeSummary> {
    if config.q == 0 || config.seeds == 0 || config.calibration_draws == 0 {
        return Err(Error::Config("q, seeds and calibration_draws must be >= 1".into()));
    }
    prepare_dir(out)?;
    let cal = calibrate(config.n, config.calibration_draws, config.seed)?;
    let task = cal.task()?;
    let mut w = csv_writer(&out.join("residuals.csv"))?;
    w.write_record(["seed", "n", "q", "direct", "decomposed", "delta", "relative", "pass"])?;
    let mut worst: f64 = 0.0;
    let seeds: Vec<u64> = (0..config.seeds as u64).map(|i| config.seed + i).collect();
    for &s in &seeds {
        let ps = ParticleSystem::random(config.n, config.q, config.init_std, s)?;
        let r = decomposition_residual(&task, &ps)?;
        worst = worst.max(r.relative());
        w.write_record([
            s.to_string(),
            config.n.to_string(),
            config.q.to_string(),
            fmt_f64(r.direct),
            fmt_f64(r.decomposed),
            fmt_f64(r.delta),
            fmt_f64(r.relative()),
            (r.relative() <= config.tol).to_string(),
        ])?;
    }
    w.flush()?;
    let summary = DecomposeSummary {
        n: config.n,
        q: config.q,
        draws: config.seeds,
        max_relative_residual: worst,
        tol: config.tol,
        pass: worst <= config.tol,
        calibration: cal,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join(RUN_META), &RunMeta::new("decompose-check", config, seeds, Some(cal))?)?;
    Ok(summary)
}

// ---------------------------------------------------------------- trajectories

/// Monic monomials with squared-error targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticLossConfig {
    /// 0-based variable index sets, one per potential.
    pub monomials: Vec<MonomialSpec>,
    pub targets: Vec<f64>,
}

impl QuadraticLossConfig {
    pub fn build(&self, dim: usize) -> Result<SeparableLoss> {
        if self.monomials.len() != self.targets.len() {
            return Err(Error::Config(format!(
                "{} monomials but {} targets",
                self.monomials.len(),
                self.targets.len()
            )));
        }
        let members = self
            .monomials
            .iter()
            .map(|r| HermiteIndex::monomial(dim, r.indices()))
            .collect::<Result<Vec<_>>>()?;
        SeparableLoss::quadratic(members, self.targets.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoupleConfig {
    pub loss: QuadraticLossConfig,
    pub flow: FlowConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeCheck {
    pub measured: f64,
    pub predicted: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupleSummary {
    pub m: usize,
    pub q: usize,
    pub seed: u64,
    pub frames: usize,
    pub final_h: f64,
    pub max_step_increase: f64,
    /// Per potential: forward-difference rate at t = 0 against
    /// `-G_ii(0) dL_i(rho(0))`.
    pub initial_slopes: Vec<SlopeCheck>,
    pub max_decoupling_residual: f64,
    pub max_cross_term: f64,
    /// Largest `cross_term / std_error` (0 when the cross term is 0).
    pub max_cross_term_ratio: f64,
    pub exp_fits: Vec<Option<ExpFit>>,
}

/// Extra per-frame columns for a trajectory table.
type ExtraColumns<'a> = (Vec<String>, Box<dyn Fn(usize) -> Vec<f64> + 'a>);

fn write_trajectory_csv(path: &Path, traj: &Trajectory, extra: Option<ExtraColumns<'_>>) -> Result<()> {
    let m = traj.frames.first().map_or(0, |f| f.rho.len());
    let mut header = vec!["t".to_string(), "H".to_string()];
    header.extend((0..m).map(|i| format!("rho_{i}")));
    header.extend((0..m).map(|i| format!("G_{i}_{i}")));
    header.extend(["G_offdiag_max", "G_offdiag_se", "symmetry_z"].map(String::from));
    if let Some((names, _)) = &extra {
        header.extend(names.iter().cloned());
    }
    let mut w = csv_writer(path)?;
    w.write_record(&header)?;
    for (fi, f) in traj.frames.iter().enumerate() {
        let mut row = vec![fmt_f64(f.t), fmt_f64(f.h)];
        row.extend(f.rho.iter().map(|v| fmt_f64(*v)));
        match &f.gram {
            Some(g) => {
                row.extend((0..m).map(|i| fmt_f64(g.value[(i, i)])));
                let (worst, se) = g.max_off_diagonal();
                row.push(fmt_f64(worst));
                row.push(fmt_f64(se));
            }
            None => row.extend(std::iter::repeat_n(String::new(), m + 2)),
        }
        row.push(f.symmetry.as_ref().map_or(String::new(), |s| fmt_f64(s.worst_z)));
        if let Some((_, values)) = &extra {
            row.extend(values(fi).iter().map(|v| fmt_f64(*v)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumInputFrame {
    pub t: f64,
    pub a: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumInput {
    pub frames: Vec<SpectrumInputFrame>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(what: &str, r: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = r.len();
    if r.iter().any(|row| row.len() != n) {
        return Err(Error::Config(format!("{what} is not square")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| r[i][j]))
}

fn write_spectrum_input(path: &Path, traj: &Trajectory, loss: &SeparableLoss) -> Result<()> {
    let frames = traj
        .frames
        .iter()
        .filter_map(|f| {
            f.kernel.as_ref().map(|k| SpectrumInputFrame {
                t: f.t,
                a: rows(&loss.loss().hessian(&f.rho)),
                k: rows(&k.value),
            })
        })
        .collect();
    write_json(path, &SpectrumInput { frames })
}

fn check_spectrum_size(flow: &FlowConfig, m: usize) -> Result<()> {
    if flow.record_kernel && m > crate::spectrum::MAX_DIM {
        return Err(Error::Config(format!(
            "record_kernel needs m <= {}, the family has m = {m}",
            crate::spectrum::MAX_DIM
        )));
    }
    Ok(())
}

fn exp_fits(traj: &Trajectory, series: impl Iterator<Item = Vec<f64>>) -> Vec<Option<ExpFit>> {
    let times = traj.times();
    series
        .map(|s| if s.len() >= 10 { exp_fit(&s, &times).ok() } else { None })
        .collect()
}

pub fn decouple(config: &DecoupleConfig, out: &Path) -> Result<DecoupleSummary> {
    config.flow.validate()?;
    let loss = config.loss.build(config.flow.d)?;
    check_spectrum_size(&config.flow, loss.len())?;
    prepare_dir(out)?;
    write_json(&out.join(RUN_META), &RunMeta::new("decouple", config, vec![config.flow.seed], None)?)?;
    let traj = dynamics::integrate(&loss, &config.flow)?;
    let summary = summarize_flow(&traj, &loss, config.flow.q, config.flow.seed)?;
    write_trajectory_csv(&out.join("trajectory.csv"), &traj, None)?;
    if config.flow.record_gram {
        write_decoupling_csv(&out.join("decoupling.csv"), &traj, &loss)?;
    }
    if config.flow.record_kernel {
        write_spectrum_input(&out.join("spectrum_input.json"), &traj, &loss)?;
    }
    write_json(&out.join("summary.json"), &summary)?;
    emit_plot_data(out)?;
    Ok(summary)
}

fn write_decoupling_csv(path: &Path, traj: &Trajectory, loss: &SeparableLoss) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "max_residual", "cross_term", "cross_term_se"])?;
    for r in decoupling_report(traj, loss)? {
        w.write_record([
            fmt_f64(r.t),
            fmt_f64(r.max_residual),
            fmt_f64(r.cross_term),
            fmt_f64(r.cross_term_std_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn summarize_flow(traj: &Trajectory, loss: &SeparableLoss, q: usize, seed: u64) -> Result<DecoupleSummary> {
    let m = loss.len();
    let last = traj.frames.last().expect("trajectory has its initial frame");
    let mut initial_slopes = Vec::new();
    let (mut max_res, mut max_cross, mut max_ratio) = (0.0_f64, 0.0_f64, 0.0_f64);
    if traj.frames[0].gram.is_some() {
        if let [a, b, ..] = traj.frames.as_slice() {
            let g = loss.gradient(&a.rho);
            let gram = a.gram.as_ref().expect("checked");
            for (i, gi) in g.iter().enumerate() {
                let measured = (b.rho[i] - a.rho[i]) / (b.t - a.t);
                let predicted = -gram.value[(i, i)] * gi;
                initial_slopes.push(SlopeCheck {
                    measured,
                    predicted,
                    relative_error: (measured - predicted).abs() / predicted.abs().max(f64::MIN_POSITIVE),
                });
            }
        }
        for r in decoupling_report(traj, loss)? {
            max_res = max_res.max(r.max_residual);
            max_cross = max_cross.max(r.cross_term);
            if r.cross_term > 0.0 {
                max_ratio = max_ratio.max(r.cross_term / r.cross_term_std_error);
            }
        }
    }
    Ok(DecoupleSummary {
        m,
        q,
        seed,
        frames: traj.frames.len(),
        final_h: last.h,
        max_step_increase: traj.max_step_increase,
        initial_slopes,
        max_decoupling_residual: max_res,
        max_cross_term: max_cross,
        max_cross_term_ratio: max_ratio,
        exp_fits: exp_fits(traj, (0..m).map(|i| traj.series(i))),
    })
}

// ---------------------------------------------------------------- train-abelian

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainAbelianConfig {
    pub n: usize,
    /// Standard deviation of the real and imaginary parts at init.
    pub init_std: f64,
    pub calibration_draws: usize,
    /// `flow.d` is ignored and derived from `n`.
    pub flow: FlowConfig,
}

impl Default for TrainAbelianConfig {
    fn default() -> Self {
        Self {
            n: 3,
            init_std: 0.5,
            calibration_draws: 5,
            flow: FlowConfig {
                q: 64,
                dt: 1e-3,
                steps: 200,
                record_every: 10,
                ..FlowConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainAbelianSummary {
    pub n: usize,
    pub q: usize,
    pub seed: u64,
    pub calibration: Calibration,
    pub initial_h: f64,
    pub final_h: f64,
    pub max_step_increase: f64,
    pub initial_distance_to_01: f64,
    pub final_distance_to_01: f64,
    /// Exponential fits of `Re rho_kkk`, k = 1..n-1 (exploratory).
    pub rho_kkk_fits: Vec<Option<ExpFit>>,
}

pub fn train_abelian(config: &TrainAbelianConfig, out: &Path) -> Result<TrainAbelianSummary> {
    let n = config.n;
    let mut flow = config.flow.clone();
    flow.d = 6 * (n.max(2) - 1);
    flow.validate()?;
    let cal = calibrate(n, config.calibration_draws.max(1), flow.seed)?;
    let loss = SeparableLoss::abelian(n);
    check_spectrum_size(&flow, loss.len())?;
    prepare_dir(out)?;
    write_json(&out.join(RUN_META), &RunMeta::new("train-abelian", config, vec![flow.seed], Some(cal))?)?;
    let ps = ParticleSystem::random(n, flow.q, config.init_std, flow.seed)?;
    let family = AbelianFamily::new(n);
    let traj = integrate_from(&loss, &flow, AbelianFamily::particles_from(&ps))?;

    let target = TargetAssignment::global_optimum(n);
    let distances: Vec<f64> = traj
        .frames
        .iter()
        .map(|f| distance_to_01(&family.mps(&f.rho), &target))
        .collect::<Result<_>>()?;
    let kkk: Vec<Vec<f64>> = (1..n)
        .map(|k| traj.frames.iter().map(|f| family.mps(&f.rho).rho3(k, k, k).re).collect())
        .collect();
    let mut names = vec!["distance_to_01".to_string()];
    names.extend((1..n).map(|k| format!("rho_kkk_{k}")));
    let values = |fi: usize| {
        let mut v = vec![distances[fi]];
        v.extend(kkk.iter().map(|s| s[fi]));
        v
    };
    write_trajectory_csv(&out.join("trajectory.csv"), &traj, Some((names, Box::new(values))))?;
    if flow.record_kernel {
        write_spectrum_input(&out.join("spectrum_input.json"), &traj, &loss)?;
    }
    let summary = TrainAbelianSummary {
        n,
        q: flow.q,
        seed: flow.seed,
        calibration: cal,
        initial_h: traj.frames[0].h,
        final_h: traj.frames.last().expect("non-empty").h,
        max_step_increase: traj.max_step_increase,
        initial_distance_to_01: distances[0],
        final_distance_to_01: *distances.last().expect("non-empty"),
        rho_kkk_fits: exp_fits(&traj, kkk.into_iter()),
    };
    write_json(&out.join("summary.json"), &summary)?;
    emit_plot_data(out)?;
    Ok(summary)
}

// ---------------------------------------------------------------- spectrum

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub frames: usize,
    pub m: usize,
    pub max_residual: f64,
    pub max_nonzero: usize,
    /// `max_t ||A(t) - A(0)||_max`.
    pub hessian_drift: f64,
    pub crossings: usize,
}

/// Reads `spectrum_input.json` from a trajectory directory and writes
/// `spectrum.csv` and `crossings.json` into `out`.
pub fn spectrum_from_dir(traj_dir: &Path, out: &Path) -> Result<SpectrumSummary> {
    let meta = read_run_meta(traj_dir)?;
    let path = traj_dir.join("spectrum_input.json");
    let text = fs::read_to_string(&path).map_err(|_| {
        Error::Config(format!("{} is missing; run the flow with record_kernel = true", path.display()))
    })?;
    let input: SpectrumInput = serde_json::from_str(&text).map_err(|e| Error::CorruptArtifact {
        file: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let frames = input
        .frames
        .iter()
        .map(|f| SpectrumFrame::new(f.t, from_rows("A", &f.a)?, from_rows("K", &f.k)?))
        .collect::<Result<Vec<_>>>()?;
    prepare_dir(out)?;
    write_json(
        &out.join(RUN_META),
        &RunMeta::new("spectrum", &serde_json::json!({ "trajectory": meta }), meta.seeds.clone(), meta.calibration)?,
    )?;
    let m = frames.first().map_or(0, |f| f.a.nrows());
    let mut w = csv_writer(&out.join("spectrum.csv"))?;
    let mut header = vec!["t".to_string()];
    for i in 1..=m {
        header.push(format!("lambda_{i}_re"));
        header.push(format!("lambda_{i}_im"));
    }
    header.extend(["rank", "nonzero", "max_residual"].map(String::from));
    w.write_record(&header)?;
    for f in &frames {
        let mut row = vec![fmt_f64(f.t)];
        for v in &f.spectrum.values {
            row.push(fmt_f64(v.re));
            row.push(fmt_f64(v.im));
        }
        row.push(f.spectrum.rank.to_string());
        row.push(f.spectrum.nonzero.to_string());
        row.push(fmt_f64(f.spectrum.max_residual()));
        w.write_record(&row)?;
    }
    w.flush()?;
    let times: Vec<f64> = frames.iter().map(|f| f.t).collect();
    let eigs: Vec<_> = frames.iter().map(|f| f.spectrum.values.clone()).collect();
    let crossings: CrossingReport = track_crossings(&times, &eigs)?;
    write_json(&out.join("crossings.json"), &crossings)?;
    let summary = SpectrumSummary {
        frames: frames.len(),
        m,
        max_residual: frames.iter().map(|f| f.spectrum.max_residual()).fold(0.0, f64::max),
        max_nonzero: frames.iter().map(|f| f.spectrum.nonzero).max().unwrap_or(0),
        hessian_drift: frames
            .iter()
            .map(|f| (&f.a - &frames[0].a).abs().max())
            .fold(0.0, f64::max),
        crossings: crossings.crossings.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- plot data

fn corrupt(file: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::CorruptArtifact {
        file: file.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

/// Reads a numeric CSV table: header plus rows of floats (empty cells are
/// skipped as missing).
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(u64, Vec<Option<f64>>)>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| corrupt(path, 1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            corrupt(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| corrupt(path, line, format!("column {}: {s:?} is not a number", header[c])))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((line, vals));
    }
    Ok((header, out))
}

/// Writes `plot_data.csv` with columns `t,series,value`: `H`, the
/// potentials (`rho` when there is only one, `rho_i` otherwise),
/// `distance_to_01` and `rho_kkk_k` when present, and the real parts of
/// the eigenvalues as `lambda_i` (plus `lambda_i_im` when any imaginary
/// part is nonzero) from `spectrum.csv` in the directory or its
/// `spectrum/` subdirectory.
pub fn emit_plot_data(traj_dir: &Path) -> Result<PathBuf> {
    let traj_path = traj_dir.join("trajectory.csv");
    if !traj_path.is_file() {
        return Err(Error::Config(format!("{} has no trajectory.csv", traj_dir.display())));
    }
    let out_path = traj_dir.join("plot_data.csv");
    let mut w = csv_writer(&out_path)?;
    w.write_record(["t", "series", "value"])?;

    let (header, table) = read_table(&traj_path)?;
    let t_col = header
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| corrupt(&traj_path, 1, "missing column t"))?;
    let rho_cols: Vec<usize> = (0..header.len())
        .filter(|&c| header[c].strip_prefix("rho_").is_some_and(|s| s.parse::<usize>().is_ok()))
        .collect();
    let mut series: Vec<(usize, String)> = Vec::new();
    for (c, h) in header.iter().enumerate() {
        if h == "H" || h == "distance_to_01" || h.starts_with("rho_kkk_") {
            series.push((c, h.clone()));
        } else if rho_cols.contains(&c) {
            let name = if rho_cols.len() == 1 { "rho".to_string() } else { h.clone() };
            series.push((c, name));
        }
    }
    for (line, row) in &table {
        if row.len() != header.len() {
            return Err(corrupt(&traj_path, *line, "wrong number of fields"));
        }
        let t = row[t_col].ok_or_else(|| corrupt(&traj_path, *line, "missing t"))?;
        for (c, name) in &series {
            if let Some(v) = row[*c] {
                w.write_record([fmt_f64(t), name.clone(), fmt_f64(v)])?;
            }
        }
    }

    let spec_path = [traj_dir.join("spectrum.csv"), traj_dir.join("spectrum").join("spectrum.csv")]
        .into_iter()
        .find(|p| p.is_file());
    if let Some(spec_path) = spec_path {
        let (header, table) = read_table(&spec_path)?;
        let any_imag = table.iter().any(|(_, row)| {
            header
                .iter()
                .zip(row)
                .any(|(h, v)| h.ends_with("_im") && v.is_some_and(|v| v != 0.0))
        });
        for (line, row) in &table {
            if row.len() != header.len() {
                return Err(corrupt(&spec_path, *line, "wrong number of fields"));
            }
            let t = row[0].ok_or_else(|| corrupt(&spec_path, *line, "missing t"))?;
            for (c, h) in header.iter().enumerate() {
                let Some(v) = row[c] else { continue };
                if let Some(base) = h.strip_suffix("_re") {
                    w.write_record([fmt_f64(t), base.to_string(), fmt_f64(v)])?;
                } else if h.ends_with("_im") && any_imag {
                    w.write_record([fmt_f64(t), h.clone(), fmt_f64(v)])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(out_path)
}

// ---------------------------------------------------------------- compose

pub fn read_measure(path: &Path) -> Result<WeightedMeasure> {
    let doc: MeasureJson = load_config(path)?;
    WeightedMeasure::from_json(doc)
}

pub fn read_family(path: &Path) -> Result<Vec<MonomialSpec>> {
    let doc: FamilyJson = load_config(path)?;
    Ok(doc.monomials)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeConfig {
    pub left: PathBuf,
    pub right: PathBuf,
    pub family: PathBuf,
    pub tol: f64,
}

pub fn compose(config: &ComposeConfig, out: &Path) -> Result<CompositionReport> {
    let mu1 = read_measure(&config.left)?;
    let mu2 = read_measure(&config.right)?;
    let family = read_family(&config.family)?;
    let report = compose_check(&mu1, &mu2, &family, config.tol)?;
    prepare_dir(out)?;
    write_json(&out.join("composition.json"), &report)?;
    write_json(&out.join(RUN_META), &RunMeta::new("compose", config, vec![], None)?)?;
    Ok(report)
}

// ---------------------------------------------------------------- maxent

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaxEntConfig {
    pub dim: usize,
    pub monomials: Vec<MonomialSpec>,
    pub targets: Vec<f64>,
    #[serde(rename = "box")]
    pub half_width: f64,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_maxent_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Number of entropy perturbation checks; 0 skips them.
    #[serde(default)]
    pub perturbations: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_nodes() -> usize {
    maxent::DEFAULT_NODES
}

fn default_maxent_tol() -> f64 {
    1e-12
}

fn default_max_iter() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxEntOutcome {
    pub solution: MaxEntSolution,
    pub perturbation: Option<PerturbationReport>,
}

/// Solves and writes `solution.json`. A non-converged solve is written
/// and then reported as [`Error::NotConverged`].
pub fn maxent_run(config: &MaxEntConfig, out: &Path) -> Result<MaxEntOutcome> {
    let problem = MaxEntProblem::with_nodes(
        config.dim,
        config.monomials.clone(),
        config.targets.clone(),
        config.half_width,
        config.nodes,
    )?;
    prepare_dir(out)?;
    write_json(&out.join(RUN_META), &RunMeta::new("maxent", config, vec![config.seed], None)?)?;
    let solution = maxent::solve(&problem, config.tol, config.max_iter)?;
    write_json(&out.join("solution.json"), &solution)?;
    if !solution.converged {
        return Err(Error::NotConverged {
            iterations: solution.iterations,
            residual: solution.residual(),
        });
    }
    let perturbation = if config.perturbations > 0 {
        let rep = maxent::perturbation_check(&problem, &solution, config.perturbations, config.seed)?;
        write_json(&out.join("perturbation.json"), &rep)?;
        Some(rep)
    } else {
        None
    };
    Ok(MaxEntOutcome { solution, perturbation })
}

// ---------------------------------------------------------------- hermite-check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HermiteCheckConfig {
    pub dim: usize,
    pub max_degree: u32,
    pub samples: usize,
    pub seed: u64,
    pub nodes: usize,
    /// Largest polynomial order in the recurrence check.
    pub max_order: u32,
}

impl Default for HermiteCheckConfig {
    fn default() -> Self {
        Self {
            dim: 3,
            max_degree: 3,
            samples: 100_000,
            seed: 0,
            nodes: 20,
            max_order: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HermiteCheckRow {
    pub kind: String,
    pub item: String,
    pub value: f64,
    pub expected: f64,
    /// Standard error for Monte Carlo rows, absolute tolerance otherwise.
    pub scale: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HermiteCheckSummary {
    pub rows: usize,
    pub failures: usize,
    pub max_recurrence_residual: f64,
    pub max_quadrature_error: f64,
    pub max_mc_z: f64,
    pub max_parity_abs: f64,
    pub pass: bool,
}

/// Multi-indices of total degree `1..=max_degree` in `dim` variables.
pub fn multi_indices(dim: usize, max_degree: u32) -> Vec<HermiteIndex> {
    fn rec(dim: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<HermiteIndex>) {
        if cur.len() == dim {
            if cur.iter().any(|&e| e > 0) {
                out.push(HermiteIndex::new(cur.clone()));
            }
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(dim, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, max_degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|a| (a.degree(), std::cmp::Reverse(a.entries().to_vec())));
    out
}

/// Explicit sum `He_k(x) = k! sum_m (-1)^m x^(k-2m) / (m! (k-2m)! 2^m)`,
/// with the sum of absolute terms as an error scale.
fn he_explicit(k: u32, x: f64) -> (f64, f64) {
    let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
    let (mut sum, mut abs) = (0.0, 0.0);
    for m in 0..=k / 2 {
        let term = fact(k) / (fact(m) * fact(k - 2 * m) * 2f64.powi(m as i32)) * x.powi((k - 2 * m) as i32);
        let signed = if m % 2 == 0 { term } else { -term };
        sum += signed;
        abs += signed.abs();
    }
    (sum, abs)
}

fn idx_label(a: &HermiteIndex) -> String {
    let parts: Vec<String> = a.entries().iter().map(u32::to_string).collect();
    format!("({})", parts.join(" "))
}

/// Recurrence, Gaussian orthogonality (Monte Carlo and quadrature) and
/// odd-parity triple products.
pub fn hermite_rows(config: &HermiteCheckConfig) -> Result<Vec<HermiteCheckRow>> {
    if config.dim == 0 || config.dim > 3 {
        return Err(Error::Config(format!("hermite-check supports dim 1..=3, got {}", config.dim)));
    }
    let mut rows = Vec::new();
    for k in 1..config.max_order {
        let mut worst: f64 = 0.0;
        for i in 0..=16 {
            let x = -4.0 + 0.5 * i as f64;
            let (_, scale) = he_explicit(k + 1, x);
            let r = he(k + 1, x) - x * he(k, x) + f64::from(k) * he(k - 1, x);
            let (explicit, _) = he_explicit(k + 1, x);
            let rel = r.abs().max((he(k + 1, x) - explicit).abs()) / scale.max(1.0);
            worst = worst.max(rel);
        }
        rows.push(HermiteCheckRow {
            kind: "recurrence".into(),
            item: format!("k={k}"),
            value: worst,
            expected: 0.0,
            scale: 1e-10,
            pass: worst <= 1e-10,
        });
    }
    let idx = multi_indices(config.dim, config.max_degree);
    for (i, a) in idx.iter().enumerate() {
        for b in &idx[i..] {
            let expected = if a == b { a.norm_sq() } else { 0.0 };
            let f = |z: &[f64]| hermite_eval(a, z) * hermite_eval(b, z);
            let mc = gaussian_expectation(f, config.dim, config.samples, config.seed)?;
            rows.push(HermiteCheckRow {
                kind: "mc_orthogonality".into(),
                item: format!("{} {}", idx_label(a), idx_label(b)),
                value: mc.mean,
                expected,
                scale: mc.std_error,
                pass: mc.within(expected, 5.0),
            });
            let quad = gaussian_quadrature(f, config.dim, config.nodes)?;
            let tol = 1e-8 * expected.max(1.0);
            rows.push(HermiteCheckRow {
                kind: "quadrature_orthogonality".into(),
                item: format!("{} {}", idx_label(a), idx_label(b)),
                value: quad,
                expected,
                scale: tol,
                pass: (quad - expected).abs() <= tol,
            });
        }
    }
    let mu = symmetrized_gaussian(config.dim, config.samples / 2, config.seed);
    for (i, a) in idx.iter().enumerate() {
        for (j, b) in idx.iter().enumerate().skip(i) {
            for c in idx.iter().skip(j) {
                if (a.degree() + b.degree() + c.degree()) % 2 == 0 {
                    continue;
                }
                let est = integrate(&mu, |z| hermite_eval(a, z) * hermite_eval(b, z) * hermite_eval(c, z));
                rows.push(HermiteCheckRow {
                    kind: "parity".into(),
                    item: format!("{} {} {}", idx_label(a), idx_label(b), idx_label(c)),
                    value: est.mean,
                    expected: 0.0,
                    scale: 0.0,
                    pass: est.mean == 0.0,
                });
            }
        }
    }
    Ok(rows)
}

pub fn summarize_hermite(rows: &[HermiteCheckRow]) -> HermiteCheckSummary {
    let max_of = |kind: &str, f: &dyn Fn(&HermiteCheckRow) -> f64| {
        rows.iter().filter(|r| r.kind == kind).map(f).fold(0.0, f64::max)
    };
    let failures = rows.iter().filter(|r| !r.pass).count();
    HermiteCheckSummary {
        rows: rows.len(),
        failures,
        max_recurrence_residual: max_of("recurrence", &|r| r.value),
        max_quadrature_error: max_of("quadrature_orthogonality", &|r| (r.value - r.expected).abs()),
        max_mc_z: max_of("mc_orthogonality", &|r| (r.value - r.expected).abs() / r.scale.max(f64::MIN_POSITIVE)),
        max_parity_abs: max_of("parity", &|r| r.value.abs()),
        pass: failures == 0,
    }
}

pub fn hermite_check(config: &HermiteCheckConfig, out: &Path) -> Result<HermiteCheckSummary> {
    let rows = hermite_rows(config)?;
    prepare_dir(out)?;
    let mut w = csv_writer(&out.join("hermite_check.csv"))?;
    w.write_record(["kind", "item", "value", "expected", "scale", "pass"])?;
    for r in &rows {
        w.write_record([
            r.kind.clone(),
            r.item.clone(),
            fmt_f64(r.value),
            fmt_f64(r.expected),
            fmt_f64(r.scale),
            r.pass.to_string(),
        ])?;
    }
    w.flush()?;
    let summary = summarize_hermite(&rows);
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join(RUN_META), &RunMeta::new("hermite-check", config, vec![config.seed], None)?)?;
    Ok(summary)
}

/// Lists files under `dir` (recursively) in sorted order, relative to it.
pub fn artifact_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
