//! Experiment harness: dataset generation for the Cucker-Smale model,
//! per-run CSV logging, the benchmark sweep over particle counts and
//! algorithms, and test-set evaluation over random initial conditions.
//!
//! Everything numeric is determined by (config, seed); wall-clock columns
//! are the only exception.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{train, AlgorithmKind, EpochRow, RecordSink, RunStatus, TrainConfig};
use crate::cucker_smale::{CsParams, CuckerSmale, SwarmState};
use crate::error::{OdefitError, Result};
use crate::metrics;
use crate::ode_solver::{solve, SolverConfig, TimeGrid};
use crate::vector_field::{IdentityObs, Observation, VectorField};

pub const CSV_HEADER: &str =
    "epoch,sse,rsse_ode,grad_theta_norm,grad_x_norm,residual_norm,epoch_seconds";

/// Ground-truth sampling ranges; strengths and lengths are drawn log-uniform
/// so both ends of each range are equally represented.
const GAMMA_RANGE: (f64, f64) = (0.1, 1.5);
const STRENGTH_RANGE: (f64, f64) = (0.5, 2.0);
const L_A_RANGE: (f64, f64) = (1.0, 3.0);
const L_R_RANGE: (f64, f64) = (0.3, 1.0);

const MAX_SAMPLE_RETRIES: usize = 100;

fn default_particle_counts() -> Vec<usize> {
    vec![5, 10, 20, 50]
}

fn default_grid() -> TimeGrid {
    TimeGrid {
        t0: 0.0,
        h: 0.05,
        num_intervals: 100,
    }
}

fn default_epochs() -> usize {
    5000
}

fn default_test_trajectories() -> usize {
    100
}

fn default_init_perturbation() -> f64 {
    0.2
}

fn default_algorithms() -> Vec<AlgorithmKind> {
    vec![
        AlgorithmKind::Alg0Direct,
        AlgorithmKind::Alg1,
        AlgorithmKind::Alg2,
        AlgorithmKind::Alg3,
    ]
}

fn default_rsse_every() -> usize {
    100
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("bench_out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_particle_counts")]
    pub particle_counts: Vec<usize>,
    #[serde(default = "default_grid")]
    pub grid: TimeGrid,
    /// Ground truth; sampled from the documented ranges when absent.
    #[serde(default)]
    pub truth_params: Option<CsParams>,
    /// Initial parameter guess: truth scaled componentwise by
    /// `1 + U(-p, p)`.
    #[serde(default = "default_init_perturbation")]
    pub init_perturbation: f64,
    /// Standard deviation of i.i.d. Gaussian observation noise on the
    /// training targets.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_test_trajectories")]
    pub test_trajectories: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<AlgorithmKind>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_rsse_every")]
    pub rsse_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            particle_counts: default_particle_counts(),
            grid: default_grid(),
            truth_params: None,
            init_perturbation: default_init_perturbation(),
            noise_std: 0.0,
            epochs: default_epochs(),
            test_trajectories: default_test_trajectories(),
            seed: 0,
            algorithms: default_algorithms(),
            out_dir: default_out_dir(),
            solver: SolverConfig::default(),
            rsse_every: default_rsse_every(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.particle_counts.is_empty() || self.particle_counts.iter().any(|n| *n == 0) {
            return Err(OdefitError::InvalidConfig(
                "particle_counts must be non-empty and positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(OdefitError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.grid.h > 0.0) || self.grid.num_intervals == 0 {
            return Err(OdefitError::InvalidConfig(
                "grid needs h > 0 and at least one interval".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.init_perturbation) {
            return Err(OdefitError::InvalidConfig(
                "init_perturbation must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One generated problem instance: training trajectory at the ground truth,
/// an initial parameter guess, and test initial conditions (test targets are
/// solved on demand at evaluation time).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_particles: usize,
    pub grid: TimeGrid,
    pub truth: CsParams,
    pub init_params: CsParams,
    pub noise_std: f64,
    pub seed: u64,
    pub train_x0: DVector<f64>,
    pub train_targets: Vec<DVector<f64>>,
    pub test_x0s: Vec<DVector<f64>>,
}

/// JSON side of the on-disk layout; the state matrices live in CSV files
/// next to it.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    num_particles: usize,
    state_dim: usize,
    grid: TimeGrid,
    truth: CsParams,
    init_params: CsParams,
    noise_std: f64,
    seed: u64,
    num_train_rows: usize,
    num_test_trajectories: usize,
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn sample_truth(rng: &mut impl Rng) -> CsParams {
    CsParams {
        gamma: rng.gen_range(GAMMA_RANGE.0..GAMMA_RANGE.1),
        c_a: log_uniform(rng, STRENGTH_RANGE.0, STRENGTH_RANGE.1),
        c_r: log_uniform(rng, STRENGTH_RANGE.0, STRENGTH_RANGE.1),
        l_a: log_uniform(rng, L_A_RANGE.0, L_A_RANGE.1),
        l_r: log_uniform(rng, L_R_RANGE.0, L_R_RANGE.1),
    }
}

/// Random swarm with positions in a box whose side grows with sqrt(N) (keeps
/// particle density roughly constant) and moderate velocities. Resamples
/// until all pairwise distances clear a safety margin.
pub fn sample_swarm(rng: &mut impl Rng, num_particles: usize) -> Result<DVector<f64>> {
    let half = (num_particles as f64).sqrt().max(1.0);
    'attempt: for _ in 0..MAX_SAMPLE_RETRIES {
        let positions: Vec<[f64; 2]> = (0..num_particles)
            .map(|_| [rng.gen_range(-half..half), rng.gen_range(-half..half)])
            .collect();
        for i in 0..num_particles {
            for j in (i + 1)..num_particles {
                let dx = positions[i][0] - positions[j][0];
                let dy = positions[i][1] - positions[j][1];
                if (dx * dx + dy * dy).sqrt() <= 1e-3 {
                    continue 'attempt;
                }
            }
        }
        let velocities: Vec<[f64; 2]> = (0..num_particles)
            .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
            .collect();
        return Ok(SwarmState {
            positions,
            velocities,
        }
        .flatten());
    }
    Err(OdefitError::DatasetGeneration(format!(
        "could not sample {num_particles} distinct particle positions in {MAX_SAMPLE_RETRIES} attempts"
    )))
}

fn perturb_params(rng: &mut impl Rng, truth: &CsParams, fraction: f64) -> CsParams {
    let mut theta = truth.to_vector();
    for v in theta.iter_mut() {
        *v *= 1.0 + rng.gen_range(-fraction..fraction);
    }
    CsParams::from_vector(&theta).expect("five components")
}

/// Seed for the per-particle-count RNG stream, decorrelated from the master
/// seed by a fixed odd multiplier.
fn dataset_seed(master: u64, num_particles: usize) -> u64 {
    master ^ (num_particles as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Generates one training instance plus test initial conditions. Instances
/// whose training solve fails are resampled (bounded retries).
pub fn generate_dataset(cfg: &ExperimentConfig, num_particles: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed(cfg.seed, num_particles));
    let field = CuckerSmale::new(num_particles);

    for _ in 0..MAX_SAMPLE_RETRIES {
        let truth = match &cfg.truth_params {
            Some(p) => *p,
            None => sample_truth(&mut rng),
        };
        let train_x0 = sample_swarm(&mut rng, num_particles)?;
        let traj = match solve(&field, &truth.to_vector(), &train_x0, &cfg.grid, &cfg.solver) {
            Ok(t) => t,
            // degenerate instance (e.g. particle collision): resample
            Err(OdefitError::SingularPair { .. })
            | Err(OdefitError::Divergence { .. })
            | Err(OdefitError::Instability { .. })
            | Err(OdefitError::StepUnderflow { .. }) => continue,
            Err(e) => return Err(e),
        };
        let mut train_targets = traj.states;
        if cfg.noise_std > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_std)
                .map_err(|e| OdefitError::DatasetGeneration(e.to_string()))?;
            for row in train_targets.iter_mut() {
                for v in row.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        let init_params = perturb_params(&mut rng, &truth, cfg.init_perturbation);
        let test_x0s = (0..cfg.test_trajectories)
            .map(|_| sample_swarm(&mut rng, num_particles))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Dataset {
            num_particles,
            grid: cfg.grid,
            truth,
            init_params,
            noise_std: cfg.noise_std,
            seed: cfg.seed,
            train_x0,
            train_targets,
            test_x0s,
        });
    }
    Err(OdefitError::DatasetGeneration(format!(
        "no solvable instance with N = {num_particles} in {MAX_SAMPLE_RETRIES} attempts"
    )))
}

fn write_matrix_csv(path: &Path, rows: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in rows {
        // csv serializes f64 via the shortest round-trippable representation
        w.serialize(row.iter().copied().collect::<Vec<f64>>())?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path, width: usize) -> Result<Vec<DVector<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize::<Vec<f64>>() {
        let values = rec?;
        if values.len() != width {
            return Err(OdefitError::DimensionMismatch {
                context: "dataset csv row width",
                expected: width,
                got: values.len(),
            });
        }
        rows.push(DVector::from_vec(values));
    }
    Ok(rows)
}

impl Dataset {
    pub fn state_dim(&self) -> usize {
        4 * self.num_particles
    }

    /// Layout: `dataset.json` header, `train_targets.csv` with one node per
    /// row (first row is the training initial condition before noise was
    /// applied to targets — stored separately in `train_x0.csv`), and
    /// `test_x0.csv` with one initial condition per row.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = DatasetHeader {
            num_particles: self.num_particles,
            state_dim: self.state_dim(),
            grid: self.grid,
            truth: self.truth,
            init_params: self.init_params,
            noise_std: self.noise_std,
            seed: self.seed,
            num_train_rows: self.train_targets.len(),
            num_test_trajectories: self.test_x0s.len(),
        };
        let mut f = File::create(dir.join("dataset.json"))?;
        serde_json::to_writer_pretty(&mut f, &header)?;
        f.write_all(b"\n")?;
        write_matrix_csv(&dir.join("train_x0.csv"), std::slice::from_ref(&self.train_x0))?;
        write_matrix_csv(&dir.join("train_targets.csv"), &self.train_targets)?;
        write_matrix_csv(&dir.join("test_x0.csv"), &self.test_x0s)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: DatasetHeader =
            serde_json::from_reader(File::open(dir.join("dataset.json"))?)?;
        let width = header.state_dim;
        let train_x0_rows = read_matrix_csv(&dir.join("train_x0.csv"), width)?;
        let train_x0 = train_x0_rows.into_iter().next().ok_or_else(|| {
            OdefitError::DatasetGeneration("train_x0.csv is empty".into())
        })?;
        let train_targets = read_matrix_csv(&dir.join("train_targets.csv"), width)?;
        if train_targets.len() != header.num_train_rows {
            return Err(OdefitError::DimensionMismatch {
                context: "train target rows",
                expected: header.num_train_rows,
                got: train_targets.len(),
            });
        }
        let test_x0s = read_matrix_csv(&dir.join("test_x0.csv"), width)?;
        if test_x0s.len() != header.num_test_trajectories {
            return Err(OdefitError::DimensionMismatch {
                context: "test trajectory rows",
                expected: header.num_test_trajectories,
                got: test_x0s.len(),
            });
        }
        Ok(Self {
            num_particles: header.num_particles,
            grid: header.grid,
            truth: header.truth,
            init_params: header.init_params,
            noise_std: header.noise_std,
            seed: header.seed,
            train_x0,
            train_targets,
            test_x0s,
        })
    }
}

/// Streaming per-epoch CSV writer with the fixed column layout.
pub struct CsvSink {
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        writer.write_record(CSV_HEADER.split(','))?;
        Ok(Self { writer })
    }

    fn fmt_opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x}")).unwrap_or_default()
    }
}

impl RecordSink for CsvSink {
    fn on_epoch(&mut self, row: &EpochRow) -> Result<()> {
        self.writer.write_record([
            row.epoch.to_string(),
            format!("{}", row.sse),
            Self::fmt_opt(row.rsse_ode),
            format!("{}", row.grad_theta_norm),
            Self::fmt_opt(row.grad_x_norm),
            Self::fmt_opt(row.residual_norm),
            format!("{}", row.epoch_seconds),
        ])?;
        self.writer.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestEval {
    pub mean_rsse: f64,
    pub evaluated: usize,
    pub failed: usize,
}

/// Per-trajectory RSSE of solve(theta) against solve(truth) from each test
/// initial condition; failed solves are excluded and counted.
pub fn evaluate_test(
    field: &dyn VectorField,
    theta: &DVector<f64>,
    test_x0s: &[DVector<f64>],
    truth: &DVector<f64>,
    grid: &TimeGrid,
    solver_cfg: &SolverConfig,
    obs: &dyn Observation,
) -> Result<TestEval> {
    if test_x0s.is_empty() {
        return Err(OdefitError::EmptyTestSet);
    }
    let per_traj: Vec<Option<f64>> = test_x0s
        .par_iter()
        .map(|x0| {
            let target = solve(field, truth, x0, grid, solver_cfg).ok()?;
            let pred = solve(field, theta, x0, grid, solver_cfg).ok()?;
            let observed: Vec<DVector<f64>> = pred.states.iter().map(|x| obs.eval(x)).collect();
            let reference: Vec<DVector<f64>> =
                target.states.iter().map(|x| obs.eval(x)).collect();
            metrics::rsse(&observed, &reference).ok()
        })
        .collect();
    let values: Vec<f64> = per_traj.iter().filter_map(|v| *v).collect();
    let failed = per_traj.len() - values.len();
    if values.is_empty() {
        return Err(OdefitError::EmptyTestSet);
    }
    Ok(TestEval {
        mean_rsse: values.iter().sum::<f64>() / values.len() as f64,
        evaluated: values.len(),
        failed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub status: RunStatus,
    pub epochs_run: usize,
    pub mean_epoch_seconds: f64,
    pub total_seconds: f64,
    pub final_sse: f64,
    pub final_rsse_ode: Option<f64>,
    pub test_mean_rsse: Option<f64>,
    pub test_failed_trajectories: usize,
    pub training_solves: usize,
    pub final_params: Vec<f64>,
}

/// Keyed by algorithm name, then by particle count.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: BTreeMap<String, BTreeMap<String, SummaryEntry>>,
}

impl RunSummary {
    pub fn any_failures(&self) -> bool {
        self.runs
            .values()
            .flat_map(|by_n| by_n.values())
            .any(|e| e.status.is_failure())
    }
}

pub fn run_csv_path(out_dir: &Path, algorithm: AlgorithmKind, num_particles: usize) -> PathBuf {
    out_dir.join(format!("run_{algorithm}_n{num_particles}.csv"))
}

/// One (algorithm, N) training run with CSV logging and test evaluation.
fn run_one(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    algorithm: AlgorithmKind,
) -> Result<SummaryEntry> {
    let field = CuckerSmale::new(dataset.num_particles);
    let obs = IdentityObs;
    let mut train_cfg = TrainConfig::for_algorithm(algorithm);
    train_cfg.epochs = cfg.epochs;
    train_cfg.rsse_every = cfg.rsse_every;
    train_cfg.seed = cfg.seed;

    let mut sink = CsvSink::create(&run_csv_path(&cfg.out_dir, algorithm, dataset.num_particles))?;
    let outcome = train(
        &field,
        &obs,
        &dataset.train_targets,
        &dataset.train_x0,
        &dataset.init_params.to_vector(),
        &dataset.grid,
        &cfg.solver,
        &train_cfg,
        &mut sink,
    )?;

    let total_seconds: f64 = outcome.record.rows.iter().map(|r| r.epoch_seconds).sum();
    let epochs_run = outcome.record.rows.len();
    let (final_sse, final_rsse_ode) = outcome
        .record
        .rows
        .last()
        .map(|r| (r.sse, r.rsse_ode))
        .unwrap_or((f64::NAN, None));

    let test = if outcome.status.is_failure() {
        None
    } else {
        match evaluate_test(
            &field,
            &outcome.theta,
            &dataset.test_x0s,
            &dataset.truth.to_vector(),
            &dataset.grid,
            &cfg.solver,
            &obs,
        ) {
            Ok(t) => Some(t),
            Err(OdefitError::EmptyTestSet) if dataset.test_x0s.is_empty() => None,
            Err(e) => return Err(e),
        }
    };

    Ok(SummaryEntry {
        status: outcome.status,
        epochs_run,
        mean_epoch_seconds: if epochs_run > 0 {
            total_seconds / epochs_run as f64
        } else {
            0.0
        },
        total_seconds,
        final_sse,
        final_rsse_ode,
        test_mean_rsse: test.map(|t| t.mean_rsse),
        test_failed_trajectories: test.map(|t| t.failed).unwrap_or(0),
        training_solves: outcome.training_solves,
        final_params: outcome.theta.iter().copied().collect(),
    })
}

/// Minimal hand-rolled SVG line chart with a log10 y axis; one polyline per
/// labeled series. Non-positive values are dropped (log scale).
fn write_loss_svg(path: &Path, title: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    const W: f64 = 720.0;
    const H: f64 = 480.0;
    const MARGIN: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().copied())
        .filter(|(_, y)| *y > 0.0)
        .collect();
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    ));
    if !points.is_empty() {
        let x_max = points.iter().map(|p| p.0).fold(1.0, f64::max);
        let y_min = points.iter().map(|p| p.1.log10()).fold(f64::INFINITY, f64::min);
        let y_max = points.iter().map(|p| p.1.log10()).fold(f64::NEG_INFINITY, f64::max);
        let y_span = (y_max - y_min).max(1e-9);
        let map = |x: f64, y: f64| {
            let px = MARGIN + (x / x_max) * (W - 2.0 * MARGIN);
            let py = H - MARGIN - ((y.log10() - y_min) / y_span) * (H - 2.0 * MARGIN);
            (px, py)
        };
        // axes
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            b = H - MARGIN,
            r = W - MARGIN,
            t = MARGIN
        ));
        for (idx, (label, pts)) in series.iter().enumerate() {
            let color = COLORS[idx % COLORS.len()];
            let path_pts: Vec<String> = pts
                .iter()
                .filter(|(_, y)| *y > 0.0)
                .map(|&(x, y)| {
                    let (px, py) = map(x, y);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            if !path_pts.is_empty() {
                svg.push_str(&format!(
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
                     points=\"{}\"/>\n",
                    path_pts.join(" ")
                ));
            }
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
                 fill=\"{color}\">{label}</text>\n",
                W - MARGIN + 6.0,
                MARGIN + 16.0 * idx as f64
            ));
        }
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

fn plot_runs(cfg: &ExperimentConfig, summary: &RunSummary) -> Result<()> {
    for &n in &cfg.particle_counts {
        let mut sse_series = Vec::new();
        let mut rsse_series = Vec::new();
        for &alg in &cfg.algorithms {
            let name = alg.to_string();
            if !summary.runs.contains_key(&name) {
                continue;
            }
            let path = run_csv_path(&cfg.out_dir, alg, n);
            let Ok(rows) = read_epoch_csv(&path) else {
                continue;
            };
            sse_series.push((
                name.clone(),
                rows.iter().map(|r| (r.epoch as f64, r.sse)).collect(),
            ));
            rsse_series.push((
                name,
                rows.iter()
                    .filter_map(|r| r.rsse_ode.map(|v| (r.epoch as f64, v)))
                    .collect(),
            ));
        }
        write_loss_svg(
            &cfg.out_dir.join(format!("sse_n{n}.svg")),
            &format!("training SSE vs epoch (N = {n}, log scale)"),
            &sse_series,
        )?;
        write_loss_svg(
            &cfg.out_dir.join(format!("rsse_n{n}.svg")),
            &format!("RSSE on ODE solution vs epoch (N = {n}, log scale)"),
            &rsse_series,
        )?;
    }
    Ok(())
}

/// Reads a per-epoch CSV back into rows (used for plotting and tests).
pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_opt = |s: &str| -> Option<f64> {
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        rows.push(EpochRow {
            epoch: rec[0].parse().map_err(|_| {
                OdefitError::DatasetGeneration(format!("bad epoch field '{}'", &rec[0]))
            })?,
            sse: rec[1].parse().unwrap_or(f64::NAN),
            rsse_ode: parse_opt(&rec[2]),
            grad_theta_norm: rec[3].parse().unwrap_or(f64::NAN),
            grad_x_norm: parse_opt(&rec[4]),
            residual_norm: parse_opt(&rec[5]),
            epoch_seconds: rec[6].parse().unwrap_or(f64::NAN),
        });
    }
    Ok(rows)
}

/// Full sweep: per particle count, generate a dataset and run every
/// configured algorithm; emit per-run CSVs, `summary.json`, and SVG curves.
/// Individual run failures are recorded, not fatal.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;

    let datasets = cfg
        .particle_counts
        .iter()
        .map(|&n| generate_dataset(cfg, n))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, AlgorithmKind)> = datasets
        .iter()
        .enumerate()
        .flat_map(|(di, _)| cfg.algorithms.iter().map(move |&a| (di, a)))
        .collect();

    let results: Vec<(AlgorithmKind, usize, Result<SummaryEntry>)> = jobs
        .par_iter()
        .map(|&(di, alg)| {
            let ds = &datasets[di];
            (alg, ds.num_particles, run_one(cfg, ds, alg))
        })
        .collect();

    let mut summary = RunSummary::default();
    for (alg, n, res) in results {
        let entry = res?;
        summary
            .runs
            .entry(alg.to_string())
            .or_default()
            .insert(n.to_string(), entry);
    }

    let mut f = File::create(cfg.out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    plot_runs(cfg, &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            particle_counts: vec![3],
            grid: TimeGrid {
                t0: 0.0,
                h: 0.05,
                num_intervals: 20,
            },
            epochs: 3,
            test_trajectories: 4,
            seed: 7,
            algorithms: vec![AlgorithmKind::Alg1],
            out_dir: dir.to_path_buf(),
            rsse_every: 1,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_noiseless_targets_match_solve() {
        let dir = tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let a = generate_dataset(&cfg, 3).unwrap();
        let b = generate_dataset(&cfg, 3).unwrap();
        assert_eq!(a, b);

        let field = CuckerSmale::new(3);
        let traj = solve(
            &field,
            &a.truth.to_vector(),
            &a.train_x0,
            &a.grid,
            &cfg.solver,
        )
        .unwrap();
        assert_eq!(a.train_targets, traj.states);
        assert_eq!(a.test_x0s.len(), 4);
    }

    #[test]
    fn noise_perturbs_targets_at_requested_scale() {
        let dir = tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.noise_std = 1e-3;
        let noisy = generate_dataset(&cfg, 3).unwrap();
        cfg.noise_std = 0.0;
        let clean = generate_dataset(&cfg, 3).unwrap();
        // same RNG stream up to the noise draw: initial data is identical
        assert_eq!(noisy.train_x0, clean.train_x0);
        let max_dev = noisy
            .train_targets
            .iter()
            .zip(&clean.train_targets)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        assert!(max_dev > 1e-5 && max_dev < 1e-2, "max noise dev {max_dev}");
    }

    #[test]
    fn swarm_sampler_keeps_particles_distinct() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let flat = sample_swarm(&mut rng, 5).unwrap();
            let swarm = SwarmState::unflatten(&flat).unwrap();
            for i in 0..5 {
                for j in (i + 1)..5 {
                    let dx = swarm.positions[i][0] - swarm.positions[j][0];
                    let dy = swarm.positions[i][1] - swarm.positions[j][1];
                    assert!((dx * dx + dy * dy).sqrt() > 1e-3);
                }
            }
        }
    }

    #[test]
    fn dataset_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.noise_std = 1e-3;
        let ds = generate_dataset(&cfg, 3).unwrap();
        let sub = dir.path().join("ds");
        ds.save(&sub).unwrap();
        let back = Dataset::load(&sub).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn experiment_config_round_trips_through_json() {
        let cfg = ExperimentConfig {
            noise_std: 1e-3,
            seed: 99,
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        // defaults fill in for an empty document
        let sparse: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(sparse, ExperimentConfig::default());
    }

    #[test]
    fn csv_sink_layout_and_numeric_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![
            EpochRow {
                epoch: 1,
                sse: 0.12345678901234567,
                rsse_ode: Some(1.5e-7),
                grad_theta_norm: 3.0,
                grad_x_norm: None,
                residual_norm: Some(0.25),
                epoch_seconds: 0.001,
            },
            EpochRow {
                epoch: 2,
                sse: 9.9e-12,
                rsse_ode: None,
                grad_theta_norm: 1.0 / 3.0,
                grad_x_norm: Some(7.0),
                residual_norm: None,
                epoch_seconds: 0.002,
            },
        ];
        {
            let mut sink = CsvSink::create(&path).unwrap();
            for r in &rows {
                sink.on_epoch(r).unwrap();
            }
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(CSV_HEADER));
        let back = read_epoch_csv(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn evaluate_test_truth_and_perturbation() {
        let dir = tempdir().unwrap();
        let mut cfg = small_cfg(dir.path());
        cfg.solver.rtol = 1e-8;
        cfg.solver.atol = 1e-10;
        let ds = generate_dataset(&cfg, 3).unwrap();
        let field = CuckerSmale::new(3);
        let obs = IdentityObs;
        let truth = ds.truth.to_vector();

        let at_truth = evaluate_test(
            &field, &truth, &ds.test_x0s, &truth, &ds.grid, &cfg.solver, &obs,
        )
        .unwrap();
        assert!(at_truth.mean_rsse <= 1e-10, "{}", at_truth.mean_rsse);
        assert_eq!(at_truth.failed, 0);

        let mut off = ds.truth;
        off.gamma *= 1.5;
        let perturbed = evaluate_test(
            &field,
            &off.to_vector(),
            &ds.test_x0s,
            &truth,
            &ds.grid,
            &cfg.solver,
            &obs,
        )
        .unwrap();
        assert!(perturbed.mean_rsse > at_truth.mean_rsse);

        assert!(matches!(
            evaluate_test(&field, &truth, &[], &truth, &ds.grid, &cfg.solver, &obs),
            Err(OdefitError::EmptyTestSet)
        ));
    }

    #[test]
    fn benchmark_emits_consistent_artifacts() {
        let dir = tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let summary = run_benchmark(&cfg).unwrap();

        let entry = &summary.runs["alg1"]["3"];
        assert_eq!(entry.epochs_run, 3);
        assert!(!entry.status.is_failure());
        assert!(
            (entry.mean_epoch_seconds * entry.epochs_run as f64 - entry.total_seconds).abs()
                <= 1e-12
        );

        let rows = read_epoch_csv(&run_csv_path(dir.path(), AlgorithmKind::Alg1, 3)).unwrap();
        assert_eq!(rows.len(), 3);
        // summary final SSE equals the last CSV row exactly
        assert_eq!(rows.last().unwrap().sse, entry.final_sse);

        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("sse_n3.svg").exists());
        assert!(dir.path().join("rsse_n3.svg").exists());
    }
}
