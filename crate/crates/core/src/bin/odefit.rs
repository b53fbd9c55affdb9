//! Command-line harness: dataset generation, single training runs, test-set
//! evaluation, the full benchmark sweep, and a quick oracle check suite.
//!
//! Exit codes: 0 success, 1 configuration error, 2 run failure(s).

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odefit::algorithms::{train, AlgorithmKind, TrainConfig};
use odefit::collocation::{residual, ResidualConfig, MIDPOINT_COEFF_CLASSIC};
use odefit::cucker_smale::{CsParams, CuckerSmale};
use odefit::harness::{
    evaluate_test, generate_dataset, run_benchmark, run_csv_path, CsvSink, Dataset,
    ExperimentConfig,
};
use odefit::metrics;
use odefit::ode_solver::{solve, SolverConfig, TimeGrid};
use odefit::sensitivity::solve_with_sensitivity;
use odefit::vector_field::{fd_check_jacobians, IdentityObs, VectorField};
use odefit::OdefitError;

#[derive(Parser)]
#[command(name = "odefit", version, about = "ODE parameter estimation benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config as JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated subset of alg0_direct,alg1,alg2,alg3.
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
    /// Comma-separated particle counts.
    #[arg(long, value_delimiter = ',')]
    particles: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker pool width for the sweep and test evaluation.
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = match &self.config {
            Some(path) => serde_json::from_reader(
                File::open(path).with_context(|| format!("opening {}", path.display()))?,
            )
            .with_context(|| format!("parsing {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(algs) = &self.algorithms {
            cfg.algorithms = algs
                .iter()
                .map(|s| s.parse::<AlgorithmKind>().map_err(anyhow::Error::from))
                .collect::<Result<Vec<_>>>()?;
        }
        if let Some(ns) = &self.particles {
            cfg.particle_counts = ns.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        if let Some(t) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .context("configuring thread pool")?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets (one directory per particle count) to disk.
    Generate {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Run one training configuration against a saved or fresh dataset.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, default_value = "alg1")]
        algorithm: String,
        /// Dataset directory from `generate`; generated in-memory when
        /// omitted (first configured particle count).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate mean test RSSE for a saved parameter vector.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset directory from `generate`.
        #[arg(long)]
        dataset: PathBuf,
        /// JSON file holding the five parameters (object or 5-array).
        #[arg(long)]
        params: PathBuf,
    },
    /// Full sweep over particle counts and algorithms.
    Bench {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Fast oracle/invariant suite (Jacobians, solver, sensitivity,
    /// residual order, gradient-descent recovery).
    Check {
        #[command(flatten)]
        common: ConfigArgs,
    },
}

fn dataset_dir(out_dir: &Path, n: usize) -> PathBuf {
    out_dir.join(format!("dataset_n{n}"))
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    for &n in &cfg.particle_counts {
        let ds = generate_dataset(cfg, n)?;
        let dir = dataset_dir(&cfg.out_dir, n);
        ds.save(&dir)?;
        println!(
            "wrote N={n} dataset ({} train rows, {} test x0s) to {}",
            ds.train_targets.len(),
            ds.test_x0s.len(),
            dir.display()
        );
    }
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, algorithm: &str, dataset: Option<&Path>) -> Result<ExitCode> {
    let algorithm: AlgorithmKind = algorithm.parse()?;
    let ds = match dataset {
        Some(dir) => Dataset::load(dir)?,
        None => {
            let n = *cfg
                .particle_counts
                .first()
                .ok_or(OdefitError::InvalidConfig("no particle counts".into()))?;
            generate_dataset(cfg, n)?
        }
    };
    let field = CuckerSmale::new(ds.num_particles);
    let obs = IdentityObs;
    let mut train_cfg = TrainConfig::for_algorithm(algorithm);
    train_cfg.epochs = cfg.epochs;
    train_cfg.rsse_every = cfg.rsse_every;
    train_cfg.seed = cfg.seed;

    fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = run_csv_path(&cfg.out_dir, algorithm, ds.num_particles);
    let mut sink = CsvSink::create(&csv_path)?;
    let outcome = train(
        &field,
        &obs,
        &ds.train_targets,
        &ds.train_x0,
        &ds.init_params.to_vector(),
        &ds.grid,
        &cfg.solver,
        &train_cfg,
        &mut sink,
    )?;

    let params = CsParams::from_vector(&outcome.theta)?;
    let result = serde_json::json!({
        "algorithm": algorithm.to_string(),
        "num_particles": ds.num_particles,
        "status": outcome.status,
        "epochs_run": outcome.record.rows.len(),
        "training_solves": outcome.training_solves,
        "final_params": params,
        "truth_params": ds.truth,
    });
    let result_path = cfg
        .out_dir
        .join(format!("train_{algorithm}_n{}.json", ds.num_particles));
    let mut f = File::create(&result_path)?;
    serde_json::to_writer_pretty(&mut f, &result)?;
    f.write_all(b"\n")?;
    println!(
        "{algorithm} finished with status {:?}; log: {}, result: {}",
        outcome.status,
        csv_path.display(),
        result_path.display()
    );
    Ok(if outcome.status.is_failure() {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_evaluate(cfg: &ExperimentConfig, dataset: &Path, params: &Path) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let text = fs::read_to_string(params)
        .with_context(|| format!("reading {}", params.display()))?;
    // accept either the CsParams object shape or a bare 5-element array
    let theta: DVector<f64> = match serde_json::from_str::<CsParams>(&text) {
        Ok(p) => p.to_vector(),
        Err(_) => {
            let raw: Vec<f64> = serde_json::from_str(&text)
                .context("params file is neither a parameter object nor a 5-array")?;
            CsParams::from_vector(&DVector::from_vec(raw))?.to_vector()
        }
    };
    let field = CuckerSmale::new(ds.num_particles);
    let eval = evaluate_test(
        &field,
        &theta,
        &ds.test_x0s,
        &ds.truth.to_vector(),
        &ds.grid,
        &cfg.solver,
        &IdentityObs,
    )?;
    println!(
        "mean test RSSE = {:.6e} over {} trajectories ({} failed)",
        eval.mean_rsse, eval.evaluated, eval.failed
    );
    Ok(())
}

fn cmd_bench(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let summary = run_benchmark(cfg)?;
    for (alg, by_n) in &summary.runs {
        for (n, entry) in by_n {
            println!(
                "{alg} N={n}: status {:?}, {} epochs, {:.3e} s/epoch, final SSE {:.6e}, test RSSE {}",
                entry.status,
                entry.epochs_run,
                entry.mean_epoch_seconds,
                entry.final_sse,
                entry
                    .test_mean_rsse
                    .map(|v| format!("{v:.6e}"))
                    .unwrap_or_else(|| "-".into()),
            );
        }
    }
    println!("summary: {}", cfg.out_dir.join("summary.json").display());
    Ok(if summary.any_failures() {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

struct ScalarLinear;
impl VectorField for ScalarLinear {
    fn state_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &DVector<f64>, th: &DVector<f64>) -> odefit::Result<DVector<f64>> {
        Ok(DVector::from_element(1, th[0] * x[0]))
    }
    fn jac_state(
        &self,
        _x: &DVector<f64>,
        th: &DVector<f64>,
    ) -> odefit::Result<nalgebra::DMatrix<f64>> {
        Ok(nalgebra::DMatrix::from_element(1, 1, th[0]))
    }
    fn jac_params(
        &self,
        x: &DVector<f64>,
        _th: &DVector<f64>,
    ) -> odefit::Result<nalgebra::DMatrix<f64>> {
        Ok(nalgebra::DMatrix::from_element(1, 1, x[0]))
    }
}

/// Decay field for the residual-order check.
struct Decay;
impl VectorField for Decay {
    fn state_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &DVector<f64>, _t: &DVector<f64>) -> odefit::Result<DVector<f64>> {
        Ok(-x)
    }
    fn jac_state(
        &self,
        _x: &DVector<f64>,
        _t: &DVector<f64>,
    ) -> odefit::Result<nalgebra::DMatrix<f64>> {
        Ok(nalgebra::DMatrix::from_element(1, 1, -1.0))
    }
    fn jac_params(
        &self,
        _x: &DVector<f64>,
        _t: &DVector<f64>,
    ) -> odefit::Result<nalgebra::DMatrix<f64>> {
        Ok(nalgebra::DMatrix::zeros(1, 1))
    }
}

fn check_line(name: &str, pass: bool, detail: String) -> bool {
    println!("[{}] {name}: {detail}", if pass { "pass" } else { "FAIL" });
    pass
}

fn cmd_check(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let mut all = true;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // analytic Jacobians vs central differences on random swarms
    let mut worst = 0.0f64;
    for n in [1usize, 3, 5] {
        let field = CuckerSmale::new(n);
        let theta = DVector::from_vec(vec![0.7, 1.2, 0.8, 1.5, 0.5]);
        for _ in 0..20 {
            let mut rng2 = ChaCha8Rng::seed_from_u64(rng.gen());
            let x = odefit::harness::sample_swarm(&mut rng2, n)?;
            worst = worst.max(fd_check_jacobians(&field, &x, &theta, 1e-6)?);
        }
    }
    all &= check_line(
        "jacobian-fd",
        worst <= 1e-5,
        format!("max relative error {worst:.3e} (limit 1e-5)"),
    );

    // decay solve against the closed form e^{-1}
    let grid = TimeGrid::new(0.0, 0.1, 10)?;
    let solver = SolverConfig {
        rtol: 1e-8,
        atol: 1e-10,
        ..Default::default()
    };
    let traj = solve(
        &Decay,
        &DVector::zeros(1),
        &DVector::from_element(1, 1.0),
        &grid,
        &solver,
    )?;
    let err = (traj.states.last().unwrap()[0] - (-1.0f64).exp()).abs();
    all &= check_line(
        "solver-exp",
        err <= 1e-7,
        format!("|x(1) - 1/e| = {err:.3e} (limit 1e-7)"),
    );

    // sensitivity of xdot = theta x at theta = 1: s(1) = e
    let (_, sens) = solve_with_sensitivity(
        &ScalarLinear,
        &DVector::from_element(1, 1.0),
        &DVector::from_element(1, 1.0),
        &grid,
        &solver,
    )?;
    let s_err = (sens.values.last().unwrap()[(0, 0)] - 1.0f64.exp()).abs();
    all &= check_line(
        "sensitivity-closed-form",
        s_err <= 1e-6,
        format!("|s(1) - e| = {s_err:.3e} (limit 1e-6)"),
    );

    // residual order on exact e^{-t} samples with the classic 1/8 midpoint
    let max_resid = |h: f64| -> Result<f64> {
        let g = TimeGrid::new(0.0, h, (1.0 / h).round() as usize)?;
        let x: Vec<DVector<f64>> = g.times().map(|t| DVector::from_element(1, (-t).exp())).collect();
        let cfg = ResidualConfig {
            midpoint_coeff: MIDPOINT_COEFF_CLASSIC,
            residual_weight: 1.0,
        };
        let r = residual(&x, &DVector::zeros(1), &Decay, &g, &cfg)?;
        Ok(r.iter().map(|b| b.amax()).fold(0.0, f64::max))
    };
    let ratio = max_resid(0.1)? / max_resid(0.05)?;
    all &= check_line(
        "residual-order",
        (20.0..=45.0).contains(&ratio),
        format!("h-halving ratio {ratio:.1} (expect about 32)"),
    );

    // composed alternating step vs direct gradient step
    let targets = solve(
        &ScalarLinear,
        &DVector::from_element(1, 0.5),
        &DVector::from_element(1, 1.0),
        &grid,
        &solver,
    )?
    .states;
    let mut worst_dev = 0.0f64;
    for theta in [0.2, 0.4, 0.9] {
        worst_dev = worst_dev.max(odefit::algorithms::check_alg0_recovery(
            &ScalarLinear,
            &IdentityObs,
            &targets,
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, theta),
            0.01,
            0.01,
            &grid,
            &solver,
        )?);
    }
    all &= check_line(
        "gradient-descent-recovery",
        worst_dev <= 1e-6,
        format!("max relative deviation {worst_dev:.3e} (limit 1e-6)"),
    );

    // sanity: the metric at the truth is solver-tolerance small
    let truth = DVector::from_element(1, 0.5);
    let v = metrics::rsse_on_ode(
        &ScalarLinear,
        &truth,
        &DVector::from_element(1, 1.0),
        &grid,
        &solver,
        &IdentityObs,
        &targets,
    )?;
    all &= check_line(
        "rsse-at-truth",
        v <= 1e-10,
        format!("RSSE {v:.3e} (limit 1e-10)"),
    );

    if !all {
        eprintln!("one or more checks failed");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { common } => {
            let cfg = common.resolve()?;
            cmd_generate(&cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            common,
            algorithm,
            dataset,
        } => {
            let cfg = common.resolve()?;
            cmd_train(&cfg, &algorithm, dataset.as_deref())
        }
        Command::Evaluate {
            common,
            dataset,
            params,
        } => {
            let cfg = common.resolve()?;
            cmd_evaluate(&cfg, &dataset, &params)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { common } => {
            let cfg = common.resolve()?;
            cmd_bench(&cfg)
        }
        Command::Check { common } => {
            let cfg = common.resolve()?;
            cmd_check(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            // configuration and I/O problems exit 1; run failures already
            // returned exit code 2 through the Ok path
            ExitCode::from(1)
        }
    }
}
