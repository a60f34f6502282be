use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dlmp_core::bench::{
    load_instance, max_price_gap, opf_stepsize_options, reference_solve, run_benchmark, OracleSettings,
    Scenario,
};
use dlmp_core::diagnostics::{dlmp_rows, read_dlmp_csv, write_dlmp_csv};
use dlmp_core::pd::{problem_stepsizes, SamplingScheme};
use dlmp_core::{BlockProblem, Execution, OpfProblem, SamplingKind};

/// Distribution price negotiation: randomized runs, reference solves and
/// result checks. Log verbosity follows RUST_LOG.
#[derive(Parser)]
#[command(name = "dlmp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and compare the prices against its targets.
    Run(RunArgs),
    /// Run one scenario per seed, concurrently, sharing one reference solve.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Deterministic reference solve.
    Oracle {
        #[arg(long)]
        instance: Option<PathBuf>,
        /// KKT residual to reach.
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        #[arg(long, default_value_t = 50_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare two price CSV files.
    Check {
        actual: PathBuf,
        expected: PathBuf,
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
    },
    /// Load an instance and report its structure and step sizes.
    Validate {
        #[arg(long)]
        instance: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Scenario file (JSON). Flags override its values.
    scenario: Option<PathBuf>,
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// ppdlmp, full or singleton.
    #[arg(long)]
    sampling: Option<SamplingKind>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stored reference solution (oracle.json) to compare against.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Single-threaded block updates.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn scenario(&self) -> Result<Scenario> {
        let mut s = match &self.scenario {
            Some(path) => Scenario::read(path)?,
            None => Scenario::default(),
        };
        if let Some(v) = &self.instance {
            s.instance = Some(v.clone());
        }
        if let Some(v) = self.iters {
            s.iterations = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.sigma {
            s.sigma = v;
        }
        if self.tau.is_some() {
            s.tau = self.tau;
        }
        if let Some(v) = self.sampling {
            s.sampling = v;
        }
        if let Some(v) = &self.out {
            s.out = v.clone();
        }
        if let Some(v) = &self.oracle {
            s.oracle = Some(v.clone());
        }
        s.validate()?;
        Ok(s)
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

fn run(args: &RunArgs) -> Result<bool> {
    let scenario = args.scenario()?;
    let report = run_benchmark(&scenario, args.execution())
        .with_context(|| format!("scenario run into {}", scenario.out.display()))?;
    report.write_text(io::stdout().lock())?;
    Ok(report.passed())
}

fn sweep(args: &RunArgs, seeds: &[u64]) -> Result<bool> {
    let base = args.scenario()?;
    fs::create_dir_all(&base.out).with_context(|| format!("creating {}", base.out.display()))?;
    let oracle_path = match &base.oracle {
        Some(p) => p.clone(),
        None => {
            let problem = OpfProblem::new(load_instance(base.instance.as_deref())?);
            let settings = OracleSettings {
                tolerance: base.oracle_kkt,
                max_iterations: base.oracle_max_iterations,
                ..Default::default()
            };
            let sol = reference_solve(&problem, &opf_stepsize_options(&problem, base.sigma, base.tau), &settings)?;
            let path = base.out.join("oracle.json");
            sol.write_json(&path)?;
            path
        }
    };
    let results: Vec<Result<(u64, bool)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let mut s = base.clone();
                s.seed = seed;
                s.out = base.out.join(format!("seed-{seed}"));
                s.oracle = Some(oracle_path.clone());
                scope.spawn(move || -> Result<(u64, bool)> {
                    let report = run_benchmark(&s, Execution::Sequential)
                        .with_context(|| format!("seed {seed}"))?;
                    Ok((seed, report.passed()))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut all = true;
    for r in results {
        let (seed, passed) = r?;
        println!("seed {seed}: {}", if passed { "PASS" } else { "FAIL" });
        all &= passed;
    }
    Ok(all)
}

fn oracle(instance: Option<&Path>, tol: f64, max_iters: usize, sigma: f64, out: &Path) -> Result<bool> {
    if !(tol > 0.0) {
        bail!("tolerance must be positive");
    }
    let problem = OpfProblem::new(load_instance(instance)?);
    let settings = OracleSettings { tolerance: tol, max_iterations: max_iters, ..Default::default() };
    let sol = reference_solve(&problem, &opf_stepsize_options(&problem, sigma, None), &settings)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    sol.write_json(&out.join("oracle.json"))?;
    let path = out.join("oracle_dlmp.csv");
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_dlmp_csv(&dlmp_rows(&problem.coupling_system().duals, &sol.y), BufWriter::new(file))?;
    println!(
        "KKT residual {:.3e} after {} iterations ({})",
        sol.kkt,
        sol.iterations,
        if sol.converged { "converged" } else { "iteration cap reached" }
    );
    println!("cost {:.6}", problem.total_cost(&sol.x));
    Ok(sol.converged)
}

fn check(actual: &Path, expected: &Path, tol: f64) -> Result<bool> {
    let read = |p: &Path| -> Result<Vec<f64>> {
        let rows = read_dlmp_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)
            .with_context(|| format!("reading {}", p.display()))?;
        let mut sorted = rows;
        sorted.sort_by_key(|r| (r.bus, r.t));
        Ok(sorted.iter().flat_map(|r| [r.bus as f64, r.t as f64, r.y_p, r.y_q]).collect())
    };
    let (a, b) = (read(actual)?, read(expected)?);
    if a.len() != b.len() || a.chunks(4).zip(b.chunks(4)).any(|(u, v)| u[..2] != v[..2]) {
        bail!("{} and {} list different bus/period rows", actual.display(), expected.display());
    }
    let gap = max_price_gap(&a, &b);
    let pass = gap <= tol;
    println!("largest price gap {gap:.3e} (tolerance {tol}): {}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn validate(instance: Option<&Path>) -> Result<bool> {
    let inst = load_instance(instance)?;
    println!("{inst}");
    let mut out = io::stdout().lock();
    for (a, buses) in inst.aggregators().iter().enumerate() {
        writeln!(out, "aggregator {a}: buses {buses:?}")?;
    }
    let problem = OpfProblem::new(inst);
    writeln!(out, "price dimension {}, operator block dimension {}", problem.dual_dim(), problem.block_dim(0))?;
    let mut ok = true;
    for kind in [SamplingKind::Ppdlmp, SamplingKind::Full] {
        let sampling = SamplingScheme::make(kind, problem.num_blocks())?;
        let steps = problem_stepsizes(&problem, &sampling, &opf_stepsize_options(&problem, 1.0, None))?;
        writeln!(
            out,
            "{kind}: tau = {:.4e}, condition margin {:.3e} ({})",
            steps.taus[0],
            steps.margin,
            if steps.valid { "valid" } else { "invalid" }
        )?;
        ok &= steps.valid;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep { run, seeds } => sweep(run, seeds),
        Command::Oracle { instance, tol, max_iters, sigma, out } => {
            oracle(instance.as_deref(), *tol, *max_iters, *sigma, out)
        }
        Command::Check { actual, expected, tol } => check(actual, expected, *tol),
        Command::Validate { instance } => validate(instance.as_deref()),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
