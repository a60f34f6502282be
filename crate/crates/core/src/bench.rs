//! Benchmark scenarios: the deterministic reference solve, the randomized
//! run, and the comparison of their prices against stored targets.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    dlmp_rows, kkt_residual, line_loading, max_cone_gap, write_dlmp_csv, ConvergenceTrace, DiagnosticsError,
};
use crate::exec::Execution;
use crate::grid::{parse_table_csv, InstanceError, NetworkInstance};
use crate::pd::{
    problem_stepsizes, BlockProblem, PdError, RunOptions, SamplingKind, SamplingScheme, Solver, StepsizeOptions,
    TauPolicy,
};
use crate::problem::OpfProblem;
use crate::sim::{privacy_audit, MessageLog, SimError, SimOptions, Simulation};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Solver(#[from] PdError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io { path: path.to_path_buf(), source }
}

/// Loads an instance from JSON, or from a line-parameter CSV table applied
/// to the built-in 15-bus network.
pub fn load_instance(path: Option<&Path>) -> Result<NetworkInstance, BenchError> {
    let Some(path) = path else {
        return Ok(NetworkInstance::ieee15());
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        Ok(NetworkInstance::ieee15().with_table(&parse_table_csv(&text)?)?)
    } else {
        Ok(NetworkInstance::from_json(&text)?)
    }
}

/// Step sizes for a pricing problem: the smoothness term is shared among
/// the aggregators.
pub fn opf_stepsize_options(problem: &OpfProblem, sigma: f64, tau: Option<f64>) -> StepsizeOptions {
    StepsizeOptions {
        sigma,
        tau: tau.map_or_else(TauPolicy::default, TauPolicy::Uniform),
        smoothness_divisor: problem.num_aggregators().max(1) as f64,
        exact_metric: false,
    }
}

// ---------------------------------------------------------------------------
// reference solve

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    /// Target KKT residual.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// KKT evaluation interval.
    pub check_every: usize,
    pub execution: Execution,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { tolerance: 1e-7, max_iterations: 50_000, check_every: 100, execution: Execution::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// KKT residual of `(x, y)`.
    pub kkt: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl OracleSolution {
    pub fn write_json(&self, path: &Path) -> Result<(), BenchError> {
        let file = File::create(path).map_err(io_err(path))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|source| BenchError::Json { path: path.to_path_buf(), source })
    }

    pub fn read_json(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| BenchError::Json { path: path.to_path_buf(), source })
    }
}

/// Deterministic primal-dual iterations (every block at every step) until the
/// KKT residual reaches `settings.tolerance`. At the iteration cap the best
/// pair seen is returned with `converged = false`.
pub fn reference_solve<P: BlockProblem>(
    problem: &P,
    steps: &StepsizeOptions,
    settings: &OracleSettings,
) -> Result<OracleSolution, BenchError> {
    let sampling = SamplingScheme::full(problem.num_blocks())?;
    let stepsizes = problem_stepsizes(problem, &sampling, steps)?;
    let options = RunOptions {
        iterations: settings.max_iterations,
        execution: settings.execution,
        drift_window: 0,
        ..Default::default()
    };
    let mut solver = Solver::new(problem, sampling, &stepsizes, options)?;
    let mut workspaces: Vec<P::Workspace> = (0..problem.num_blocks()).map(|i| problem.workspace(i)).collect();
    let every = settings.check_every.max(1);
    let mut best: Option<OracleSolution> = None;
    loop {
        let st = solver.state();
        if st.k % every == 0 || st.k == settings.max_iterations {
            let kkt = kkt_residual(problem, &st.x, &st.y, &mut workspaces).unwrap_or(f64::INFINITY);
            log::debug!("reference solve: k = {}, kkt = {kkt:.3e}", st.k);
            if best.as_ref().is_none_or(|b| kkt < b.kkt) {
                best = Some(OracleSolution {
                    x: st.x.clone(),
                    y: st.y.clone(),
                    kkt,
                    iterations: st.k,
                    converged: kkt <= settings.tolerance,
                });
            }
            if kkt <= settings.tolerance || st.k >= settings.max_iterations {
                break;
            }
        }
        solver.step()?;
    }
    let best = best.expect("at least one check");
    if !best.converged {
        log::warn!(
            "reference solve stopped at the cap of {} iterations; best KKT residual {:.3e} at k = {}",
            settings.max_iterations,
            best.kkt,
            best.iterations
        );
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// scenarios and targets

/// A check on the prices or the physical state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Target {
    /// Active and/or reactive price of a bus. Without a tolerance the
    /// scenario's `target_tolerance` applies.
    Dlmp {
        bus: usize,
        t: usize,
        #[serde(default)]
        y_p: Option<f64>,
        #[serde(default)]
        y_q: Option<f64>,
        #[serde(default)]
        tolerance: Option<f64>,
    },
    /// Active price strictly below zero.
    NegativePrice { bus: usize, t: usize },
    /// Every active price in `buses` exceeds every active price in `over`.
    PriceAbove { buses: Vec<usize>, over: Vec<usize>, t: usize },
    /// Line apparent-power loading at its bound (checked at the reference solution).
    Saturated { line: usize, t: usize, tolerance: f64 },
    /// Flexible consumption value (checked at the reference solution).
    Consumption { bus: usize, t: usize, value: f64, tolerance: f64 },
}

const FIXTURE_PRICES: [(usize, usize, f64, f64); 28] = [
    (1, 0, 3.721, 0.012),
    (2, 0, 3.603, 0.048),
    (3, 0, 3.421, 0.092),
    (4, 0, 3.429, 0.093),
    (5, 0, 3.433, 0.094),
    (6, 0, 3.439, 0.096),
    (7, 0, -0.003, 0.279),
    (8, 0, 0.004, 0.279),
    (9, 0, 0.003, 0.279),
    (10, 0, 0.001, 0.279),
    (11, 0, 0.0, 0.279),
    (12, 0, 3.719, 0.001),
    (13, 0, 3.758, 0.016),
    (14, 0, 3.781, 0.024),
    (1, 1, 1.004, 0.005),
    (2, 1, 0.98, 0.02),
    (3, 1, 0.942, 0.041),
    (4, 1, 0.946, 0.042),
    (5, 1, 0.949, 0.043),
    (6, 1, 0.951, 0.044),
    (7, 1, 0.0, 0.115),
    (8, 1, 0.003, 0.115),
    (9, 1, 0.002, 0.115),
    (10, 1, 0.001, 0.115),
    (11, 1, 0.0, 0.115),
    (12, 1, 3.567, 0.732),
    (13, 1, 3.583, 0.737),
    (14, 1, 3.593, 0.741),
];

/// Published price labels and structural facts of the built-in 15-bus case.
pub fn fixture_targets() -> Vec<Target> {
    let mut targets: Vec<Target> = FIXTURE_PRICES
        .iter()
        .map(|&(bus, t, p, q)| Target::Dlmp { bus, t, y_p: Some(p), y_q: Some(q), tolerance: None })
        .collect();
    for bus in [7, 8, 9, 10, 11] {
        targets.push(Target::Dlmp { bus, t: 0, y_p: Some(0.0), y_q: None, tolerance: Some(0.01) });
    }
    targets.push(Target::NegativePrice { bus: 7, t: 0 });
    targets.push(Target::PriceAbove { buses: vec![12, 13, 14], over: vec![1, 2, 3, 4, 5, 6], t: 1 });
    targets.push(Target::Saturated { line: 8, t: 0, tolerance: 1e-3 });
    targets.push(Target::Saturated { line: 8, t: 1, tolerance: 1e-3 });
    targets.push(Target::Saturated { line: 12, t: 1, tolerance: 1e-3 });
    targets.push(Target::Consumption { bus: 7, t: 0, value: -0.173, tolerance: 1e-3 });
    targets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Instance file (JSON, or a CSV line table); the built-in 15-bus case when absent.
    pub instance: Option<PathBuf>,
    pub sigma: f64,
    /// Uniform primal step; auto-tuned when absent.
    pub tau: Option<f64>,
    pub iterations: usize,
    pub seed: u64,
    pub sampling: SamplingKind,
    pub out: PathBuf,
    pub targets: Vec<Target>,
    /// Default tolerance of price targets.
    pub target_tolerance: f64,
    /// Gate on the largest price gap between the run and the reference solution.
    pub oracle_tolerance: f64,
    /// KKT tolerance of the reference solve.
    pub oracle_kkt: f64,
    pub oracle_max_iterations: usize,
    /// Reuse a stored reference solution instead of solving.
    pub oracle: Option<PathBuf>,
    /// Largest admissible cone gap at the reference solution.
    pub cone_gap: f64,
    pub kkt_every: usize,
    pub snapshot_every: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            instance: None,
            sigma: 1.0,
            tau: None,
            iterations: 2000,
            seed: 0,
            sampling: SamplingKind::Ppdlmp,
            out: PathBuf::from("out"),
            targets: fixture_targets(),
            target_tolerance: 0.05,
            oracle_tolerance: 1e-2,
            oracle_kkt: 1e-7,
            oracle_max_iterations: 50_000,
            oracle: None,
            cone_gap: 1e-4,
            kkt_every: 100,
            snapshot_every: 0,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let s: Self = serde_json::from_str(text).map_err(|e| BenchError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self, BenchError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Scenario(m));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("tau must be positive, got {t}"));
            }
        }
        for (name, v) in [
            ("target_tolerance", self.target_tolerance),
            ("oracle_tolerance", self.oracle_tolerance),
            ("oracle_kkt", self.oracle_kkt),
            ("cone_gap", self.cone_gap),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for target in &self.targets {
            let tol = match target {
                Target::Dlmp { tolerance, .. } => tolerance.unwrap_or(self.target_tolerance),
                Target::Saturated { tolerance, .. } | Target::Consumption { tolerance, .. } => *tolerance,
                _ => 1.0,
            };
            if !(tol > 0.0) {
                return bad(format!("target {target:?} needs a positive tolerance"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// comparison

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Run,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub subject: Subject,
    pub observed: f64,
    pub expected: String,
    pub pass: bool,
}

struct View<'a> {
    problem: &'a OpfProblem,
    x: &'a [Vec<f64>],
    y: &'a [f64],
}

impl View<'_> {
    fn price(&self, bus: usize, t: usize, reactive: bool) -> Option<f64> {
        let d = &self.problem.coupling_system().duals;
        if bus == 0 || bus > d.lines() || t >= d.horizon() {
            return None;
        }
        Some(self.y[if reactive { d.reactive(bus, t) } else { d.active(bus, t) }])
    }
}

fn missing(name: String, subject: Subject, expected: String) -> CheckResult {
    CheckResult { name, subject, observed: f64::NAN, expected: format!("{expected} (not in instance)"), pass: false }
}

fn check_target(target: &Target, view: &View, subject: Subject, default_tol: f64, out: &mut Vec<CheckResult>) {
    match target {
        Target::Dlmp { bus, t, y_p, y_q, tolerance } => {
            let tol = tolerance.unwrap_or(default_tol);
            for (reactive, value) in [(false, y_p), (true, y_q)] {
                let Some(value) = value else { continue };
                let name = format!("{} price bus {bus} t={t}", if reactive { "reactive" } else { "active" });
                let expected = format!("{value} ± {tol}");
                out.push(match view.price(*bus, *t, reactive) {
                    Some(obs) => {
                        CheckResult { name, subject, observed: obs, expected, pass: (obs - value).abs() <= tol }
                    }
                    None => missing(name, subject, expected),
                });
            }
        }
        Target::NegativePrice { bus, t } => {
            let name = format!("active price bus {bus} t={t} negative");
            out.push(match view.price(*bus, *t, false) {
                Some(obs) => CheckResult { name, subject, observed: obs, expected: "< 0".into(), pass: obs < 0.0 },
                None => missing(name, subject, "< 0".into()),
            });
        }
        Target::PriceAbove { buses, over, t } => {
            let name = format!("active prices {buses:?} above {over:?} at t={t}");
            let hi: Option<Vec<f64>> = buses.iter().map(|&b| view.price(b, *t, false)).collect();
            let lo: Option<Vec<f64>> = over.iter().map(|&b| view.price(b, *t, false)).collect();
            out.push(match (hi, lo) {
                (Some(hi), Some(lo)) if !hi.is_empty() && !lo.is_empty() => {
                    let margin = hi.iter().copied().fold(f64::INFINITY, f64::min)
                        - lo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    CheckResult { name, subject, observed: margin, expected: "margin > 0".into(), pass: margin > 0.0 }
                }
                _ => missing(name, subject, "margin > 0".into()),
            });
        }
        Target::Saturated { line, t, tolerance } => {
            let name = format!("line {line} t={t} saturated");
            let inst = view.problem.instance();
            let lay = view.problem.dso_layout();
            if *line == 0 || *line > lay.lines() || *t >= lay.horizon() {
                out.push(missing(name, subject, format!("|S| = S_max ± {tolerance}")));
                return;
            }
            let load = line_loading(inst, lay, &view.x[0])[line - 1][*t];
            let cap = inst.bus(*line).s_max;
            out.push(CheckResult {
                name,
                subject,
                observed: load,
                expected: format!("{cap} ± {tolerance}"),
                pass: (load - cap).abs() <= *tolerance,
            });
        }
        Target::Consumption { bus, t, value, tolerance } => {
            let name = format!("consumption bus {bus} t={t}");
            let expected = format!("{value} ± {tolerance}");
            out.push(match view.problem.consumption(view.x, *bus, *t) {
                Some(obs) => {
                    CheckResult { name, subject, observed: obs, expected, pass: (obs - value).abs() <= *tolerance }
                }
                None => missing(name, subject, expected),
            });
        }
    }
}

/// Evaluates `targets` against a primal-dual pair. Price targets apply to
/// both subjects; saturation and consumption only to the reference solution.
pub fn evaluate_targets(
    problem: &OpfProblem,
    targets: &[Target],
    x: &[Vec<f64>],
    y: &[f64],
    subject: Subject,
    default_tol: f64,
) -> Vec<CheckResult> {
    let view = View { problem, x, y };
    let mut out = Vec::new();
    for target in targets {
        let physical = matches!(target, Target::Saturated { .. } | Target::Consumption { .. });
        if physical && subject == Subject::Run {
            continue;
        }
        check_target(target, &view, subject, default_tol, &mut out);
    }
    out
}

/// Largest absolute difference between two price vectors.
pub fn max_price_gap(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub instance: String,
    pub sampling: SamplingKind,
    pub iterations: usize,
    pub seed: u64,
    pub sigma: f64,
    pub taus: Vec<f64>,
    pub final_kkt: Option<f64>,
    pub oracle_kkt: f64,
    pub oracle_iterations: usize,
    pub oracle_gap: f64,
    pub message_digest: Option<String>,
    pub checks: Vec<CheckResult>,
}

impl BenchmarkReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "instance: {}", self.instance)?;
        writeln!(
            out,
            "run: {} sampling, K = {}, seed = {}, sigma = {}, tau = {:.4e}",
            self.sampling,
            self.iterations,
            self.seed,
            self.sigma,
            self.taus.first().copied().unwrap_or(f64::NAN)
        )?;
        match self.final_kkt {
            Some(k) => writeln!(out, "final KKT residual: {k:.3e}")?,
            None => writeln!(out, "final KKT residual: n/a")?,
        }
        writeln!(out, "reference: KKT {:.3e} after {} iterations", self.oracle_kkt, self.oracle_iterations)?;
        writeln!(out, "largest price gap to reference: {:.3e}", self.oracle_gap)?;
        if let Some(d) = &self.message_digest {
            writeln!(out, "message log digest: {d}")?;
        }
        for c in &self.checks {
            let subject = match c.subject {
                Subject::Run => "run",
                Subject::Oracle => "reference",
            };
            writeln!(
                out,
                "{} [{subject}] {}: {:.6} (expected {})",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.observed,
                c.expected
            )?;
        }
        let failed = self.failures().count();
        writeln!(out, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// Output of a randomized run: final pair, trace and (for the agent
/// simulation) the message log.
pub struct RunOutput {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub trace: ConvergenceTrace,
    pub log: Option<MessageLog>,
    pub taus: Vec<f64>,
}

/// Runs the scenario's method on `problem`. The agent simulation is used for
/// the two-party sampling; other schemes run the generic block solver.
pub fn run_method(
    problem: &OpfProblem,
    scenario: &Scenario,
    execution: Execution,
) -> Result<RunOutput, BenchError> {
    let sampling = SamplingScheme::make(scenario.sampling, problem.num_blocks())?;
    let options = opf_stepsize_options(problem, scenario.sigma, scenario.tau);
    let steps = problem_stepsizes(problem, &sampling, &options)?;
    log::info!("step sizes: sigma = {}, tau = {:?}, margin = {:.3e}", steps.sigma, steps.taus[0], steps.margin);
    if scenario.sampling == SamplingKind::Ppdlmp {
        let opts = SimOptions {
            iterations: scenario.iterations,
            seed: scenario.seed,
            execution,
            kkt_every: scenario.kkt_every,
            snapshot_every: scenario.snapshot_every,
            ..Default::default()
        };
        let mut sim = Simulation::new(problem, &steps, opts)?;
        for _ in 0..scenario.iterations {
            sim.step()?;
        }
        let res = sim.finish();
        Ok(RunOutput { x: res.x, y: res.y, trace: res.trace, log: Some(res.log), taus: steps.taus })
    } else {
        let opts = RunOptions {
            iterations: scenario.iterations,
            seed: scenario.seed,
            execution,
            kkt_every: scenario.kkt_every,
            snapshot_every: scenario.snapshot_every,
            ..Default::default()
        };
        let res = Solver::new(problem, sampling, &steps, opts)?.run()?;
        Ok(RunOutput { x: res.state.x, y: res.state.y, trace: res.trace, log: None, taus: steps.taus })
    }
}

/// Solves the reference problem of a scenario, or loads the stored solution.
pub fn scenario_oracle(problem: &OpfProblem, scenario: &Scenario) -> Result<OracleSolution, BenchError> {
    if let Some(path) = &scenario.oracle {
        let sol = OracleSolution::read_json(path)?;
        if sol.y.len() != problem.dual_dim() || sol.x.len() != problem.num_blocks() {
            return Err(BenchError::Scenario(format!("{} does not match the instance", path.display())));
        }
        return Ok(sol);
    }
    let settings = OracleSettings {
        tolerance: scenario.oracle_kkt,
        max_iterations: scenario.oracle_max_iterations,
        ..Default::default()
    };
    reference_solve(problem, &opf_stepsize_options(problem, scenario.sigma, scenario.tau), &settings)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), BenchError>) -> Result<(), BenchError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(io_err(path))
}

/// Runs a scenario and writes its artifacts into `scenario.out`:
/// `trace.csv`, `dlmp.csv`, `oracle_dlmp.csv`, `messages.jsonl` (agent
/// simulation only), `report.json` and `report.txt`.
pub fn run_benchmark(scenario: &Scenario, execution: Execution) -> Result<BenchmarkReport, BenchError> {
    scenario.validate()?;
    let instance = load_instance(scenario.instance.as_deref())?;
    let label = instance.to_string();
    let problem = OpfProblem::new(instance);
    let out = &scenario.out;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let run = run_method(&problem, scenario, execution)?;
    let oracle = scenario_oracle(&problem, scenario)?;
    let duals = &problem.coupling_system().duals;

    write_file(&out.join("trace.csv"), |w| Ok(run.trace.write_csv(w)?))?;
    write_file(&out.join("dlmp.csv"), |w| Ok(write_dlmp_csv(&dlmp_rows(duals, &run.y), w)?))?;
    write_file(&out.join("oracle_dlmp.csv"), |w| Ok(write_dlmp_csv(&dlmp_rows(duals, &oracle.y), w)?))?;

    let mut checks = Vec::new();
    let oracle_gap = max_price_gap(&run.y, &oracle.y);
    checks.push(CheckResult {
        name: "largest price gap to reference".into(),
        subject: Subject::Run,
        observed: oracle_gap,
        expected: format!("<= {}", scenario.oracle_tolerance),
        pass: oracle_gap <= scenario.oracle_tolerance,
    });
    checks.push(CheckResult {
        name: "reference KKT residual".into(),
        subject: Subject::Oracle,
        observed: oracle.kkt,
        expected: format!("<= {}", scenario.oracle_kkt),
        pass: oracle.converged,
    });
    let gap = max_cone_gap(problem.dso_layout(), &oracle.x[0]);
    checks.push(CheckResult {
        name: "largest cone gap".into(),
        subject: Subject::Oracle,
        observed: gap,
        expected: format!("<= {}", scenario.cone_gap),
        pass: gap <= scenario.cone_gap,
    });

    let mut digest = None;
    if let Some(log) = &run.log {
        let path = out.join("messages.jsonl");
        write_file(&path, |w| log.write_jsonl(w, false).map_err(io_err(&path)))?;
        digest = Some(log.digest());
        let audit = privacy_audit(log, problem.dual_dim(), problem.num_aggregators());
        checks.push(CheckResult {
            name: match &audit {
                Ok(r) => format!(
                    "message audit ({} initial bids, {} broadcasts, {} increments)",
                    r.init_bids, r.broadcasts, r.bid_deltas
                ),
                Err(e) => format!("message audit: {e}"),
            },
            subject: Subject::Run,
            observed: log.len() as f64,
            expected: "all messages in the price space".into(),
            pass: audit.is_ok(),
        });
    }
    checks.extend(evaluate_targets(&problem, &scenario.targets, &run.x, &run.y, Subject::Run, scenario.target_tolerance));
    checks.extend(evaluate_targets(
        &problem,
        &scenario.targets,
        &oracle.x,
        &oracle.y,
        Subject::Oracle,
        scenario.target_tolerance,
    ));

    let report = BenchmarkReport {
        instance: label,
        sampling: scenario.sampling,
        iterations: scenario.iterations,
        seed: scenario.seed,
        sigma: scenario.sigma,
        taus: run.taus,
        final_kkt: run.trace.last().and_then(|r| r.kkt),
        oracle_kkt: oracle.kkt,
        oracle_iterations: oracle.iterations,
        oracle_gap,
        message_digest: digest,
        checks,
    };
    let json_path = out.join("report.json");
    write_file(&json_path, |w| {
        serde_json::to_writer_pretty(&mut *w, &report).map_err(|source| BenchError::Json { path: json_path.clone(), source })
    })?;
    let text_path = out.join("report.txt");
    write_file(&text_path, |w| report.write_text(w).map_err(io_err(&text_path)))?;
    Ok(report)
}
