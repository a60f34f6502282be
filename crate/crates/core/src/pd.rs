//! Randomized block-coordinate primal-dual method for
//! `min sum_i phi_i(x_i)  s.t.  sum_i A_i x_i = b, x_i in X_i`.
//!
//! Each iteration draws a subset of blocks, takes a linearized prox step on
//! every drawn block against the current dual, and then updates two dual
//! sequences. The running mean of the primal iterates is maintained along
//! the way.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::{kkt_residual, ConvergenceTrace, TraceRecord};
use crate::exec::{map_selected, Execution};
use crate::projections::{BlockMetric, InnerTolerance, ProjectionError, ProxOutcome};
use crate::sparse::SparseMatrix;

#[derive(Debug, thiserror::Error)]
pub enum PdError {
    #[error("prox of block {block} failed at iteration {iteration}: {source}")]
    Prox {
        iteration: usize,
        block: usize,
        #[source]
        source: ProjectionError,
    },
    #[error("invalid sampling: {0}")]
    Sampling(String),
    #[error("invalid step sizes: {0}")]
    Stepsize(String),
    #[error("step-size condition fails (smallest eigenvalue {margin:.3e})")]
    Condition { margin: f64 },
    #[error("expected dimension {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
}

/// A block-separable problem with linear coupling.
pub trait BlockProblem: Sync {
    /// Per-block cached state for the prox (factorizations, warm starts).
    type Workspace: Send + Clone;

    fn num_blocks(&self) -> usize;
    fn block_dim(&self, i: usize) -> usize;
    fn coupling(&self, i: usize) -> &SparseMatrix;
    /// Right-hand side `b` of the coupling.
    fn rhs(&self) -> &[f64];
    fn cost(&self, i: usize, x: &[f64]) -> f64;
    fn gradient(&self, i: usize, x: &[f64], out: &mut [f64]);
    /// Diagonal of the smoothness matrix of block `i`.
    fn smoothness(&self, i: usize) -> Vec<f64>;
    fn initial_point(&self, i: usize) -> Vec<f64>;
    fn workspace(&self, i: usize) -> Self::Workspace;
    /// `argmin <lin, u> + 1/2 |u - anchor|_M^2` over block `i`'s set.
    fn prox(
        &self,
        i: usize,
        ws: &mut Self::Workspace,
        anchor: &[f64],
        lin: &[f64],
        metric: &BlockMetric,
        tol: f64,
    ) -> Result<ProxOutcome, ProjectionError>;

    fn dual_dim(&self) -> usize {
        self.rhs().len()
    }

    fn total_dim(&self) -> usize {
        (0..self.num_blocks()).map(|i| self.block_dim(i)).sum()
    }

    /// `sum_i A_i x_i - b`.
    fn residual(&self, x: &[Vec<f64>]) -> Vec<f64> {
        let mut r: Vec<f64> = self.rhs().iter().map(|v| -v).collect();
        for (i, xi) in x.iter().enumerate() {
            self.coupling(i).mul_add(1.0, xi, &mut r);
        }
        r
    }

    fn total_cost(&self, x: &[Vec<f64>]) -> f64 {
        x.iter().enumerate().map(|(i, xi)| self.cost(i, xi)).sum()
    }
}

// ---------------------------------------------------------------------------
// sampling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingKind {
    /// Operator block always, plus one aggregator drawn uniformly.
    Ppdlmp,
    /// Every block at every iteration.
    Full,
    /// One block drawn uniformly.
    Singleton,
}

impl FromStr for SamplingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ppdlmp" => Ok(Self::Ppdlmp),
            "full" => Ok(Self::Full),
            "singleton" | "uniform" => Ok(Self::Singleton),
            other => Err(format!("unknown sampling scheme {other:?} (ppdlmp, full, singleton)")),
        }
    }
}

impl fmt::Display for SamplingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ppdlmp => "ppdlmp",
            Self::Full => "full",
            Self::Singleton => "singleton",
        })
    }
}

/// A probability law over subsets of blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingScheme {
    num_blocks: usize,
    subsets: Vec<Vec<usize>>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    marginals: Vec<f64>,
    pairs: DMatrix<f64>,
}

impl SamplingScheme {
    pub fn new(num_blocks: usize, subsets: Vec<Vec<usize>>, probs: Vec<f64>) -> Result<Self, PdError> {
        if subsets.len() != probs.len() || subsets.is_empty() {
            return Err(PdError::Sampling("one probability per subset is required".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(PdError::Sampling("probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(PdError::Sampling(format!("probabilities sum to {total}")));
        }
        let mut pairs = DMatrix::zeros(num_blocks, num_blocks);
        for (set, &p) in subsets.iter().zip(&probs) {
            for &i in set {
                if i >= num_blocks {
                    return Err(PdError::Sampling(format!("block {i} out of range")));
                }
                for &j in set {
                    pairs[(i, j)] += p;
                }
            }
        }
        let marginals: Vec<f64> = (0..num_blocks).map(|i| pairs[(i, i)]).collect();
        if let Some(i) = marginals.iter().position(|&p| !(p > 0.0)) {
            return Err(PdError::Sampling(format!("block {i} is never sampled")));
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { num_blocks, subsets, probs, cumulative, marginals, pairs })
    }

    pub fn make(kind: SamplingKind, num_blocks: usize) -> Result<Self, PdError> {
        match kind {
            SamplingKind::Ppdlmp => {
                if num_blocks < 2 {
                    return Err(PdError::Sampling("needs the operator and at least one aggregator".into()));
                }
                Self::ppdlmp(num_blocks - 1)
            }
            SamplingKind::Full => Self::full(num_blocks),
            SamplingKind::Singleton => Self::singleton(num_blocks),
        }
    }

    /// Subsets `{0, a}` for `a = 1..=p`, each with probability `1/p`.
    pub fn ppdlmp(p: usize) -> Result<Self, PdError> {
        let subsets = (1..=p).map(|a| vec![0, a]).collect();
        Self::new(p + 1, subsets, vec![1.0 / p as f64; p])
    }

    pub fn full(d: usize) -> Result<Self, PdError> {
        Self::new(d, vec![(0..d).collect()], vec![1.0])
    }

    pub fn singleton(d: usize) -> Result<Self, PdError> {
        Self::new(d, (0..d).map(|i| vec![i]).collect(), vec![1.0 / d as f64; d])
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// `P(i in I)`.
    pub fn marginal(&self, i: usize) -> f64 {
        self.marginals[i]
    }

    /// `P(i, j in I)`.
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.pairs[(i, j)]
    }

    /// Diagonal of `P`: `1 / p_i` per block.
    pub fn weights(&self) -> Vec<f64> {
        self.marginals.iter().map(|p| 1.0 / p).collect()
    }

    /// `E[U_I P]` per block; equals one for a valid scheme.
    pub fn expected_selection(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.num_blocks];
        for (set, &p) in self.subsets.iter().zip(&self.probs) {
            for &i in set {
                e[i] += p / self.marginals[i];
            }
        }
        e
    }

    /// Draws a subset index with a single uniform draw.
    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.subsets.len() - 1)
    }

    pub fn subset(&self, index: usize) -> &[usize] {
        &self.subsets[index]
    }
}

// ---------------------------------------------------------------------------
// step sizes

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut off = vec![0];
    for d in dims {
        off.push(off.last().unwrap() + d);
    }
    off
}

/// Dense `Sigma` with blocks `p_ij / (p_i p_j) A_i^T A_j`.
pub fn sigma_matrix(a: &[&SparseMatrix], sampling: &SamplingScheme) -> DMatrix<f64> {
    let dims: Vec<usize> = a.iter().map(|m| m.cols()).collect();
    let off = offsets(&dims);
    let dense: Vec<DMatrix<f64>> = a.iter().map(|m| m.to_dense()).collect();
    let n = *off.last().unwrap();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..a.len() {
        for j in 0..a.len() {
            let pij = sampling.pair(i, j);
            if pij == 0.0 {
                continue;
            }
            let w = pij / (sampling.marginal(i) * sampling.marginal(j));
            let block = dense[i].transpose() * &dense[j] * w;
            out.view_mut((off[i], off[j]), (dims[i], dims[j])).copy_from(&block);
        }
    }
    out
}

fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m).eigenvalues.min()
}

/// Smallest eigenvalue of `diag[(I/tau_i + sigma A_i^T A_i) / p_i] - sigma Sigma`.
pub fn condition_margin(a: &[&SparseMatrix], sigma: f64, tau: &[f64], sampling: &SamplingScheme) -> f64 {
    let dims: Vec<usize> = a.iter().map(|m| m.cols()).collect();
    let off = offsets(&dims);
    let mut c = sigma_matrix(a, sampling) * (-sigma);
    for (i, m) in a.iter().enumerate() {
        let d = m.to_dense();
        let block = (d.transpose() * &d * sigma) / sampling.marginal(i);
        let mut view = c.view_mut((off[i], off[i]), (dims[i], dims[i]));
        view += block;
        for k in 0..dims[i] {
            view[(k, k)] += 1.0 / (tau[i] * sampling.marginal(i));
        }
    }
    min_eigenvalue(c)
}

/// Largest uniform `tau` for which the step-size condition holds.
///
/// The diagonal blocks of the condition matrix reduce to `I / (tau p_i)`, so
/// the critical value is `1 / (sigma * lambda_max(D^{1/2} Off D^{1/2}))`
/// with `D = diag(p_i)` and `Off` the off-diagonal part of `Sigma`.
pub fn critical_tau(a: &[&SparseMatrix], sigma: f64, sampling: &SamplingScheme) -> f64 {
    let dims: Vec<usize> = a.iter().map(|m| m.cols()).collect();
    let off = offsets(&dims);
    let mut m = sigma_matrix(a, sampling);
    for i in 0..a.len() {
        m.view_mut((off[i], off[i]), (dims[i], dims[i])).fill(0.0);
    }
    let n = m.nrows();
    let scale: Vec<f64> = (0..a.len())
        .flat_map(|i| std::iter::repeat(sampling.marginal(i).sqrt()).take(dims[i]))
        .collect();
    for r in 0..n {
        for c in 0..n {
            m[(r, c)] *= scale[r] * scale[c];
        }
    }
    let top = if n == 0 { 0.0 } else { SymmetricEigen::new(m).eigenvalues.max() };
    if top <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / (sigma * top)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TauPolicy {
    /// `(1 - margin)` times the critical value, capped at `cap`.
    Auto { margin: f64, cap: f64 },
    Uniform(f64),
    PerBlock(Vec<f64>),
}

impl Default for TauPolicy {
    fn default() -> Self {
        TauPolicy::Auto { margin: 0.05, cap: 1e8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepsizeOptions {
    pub sigma: f64,
    pub tau: TauPolicy,
    /// Divisor applied to the smoothness term of every metric.
    pub smoothness_divisor: f64,
    /// Use `diag + sigma A_i^T A_i` instead of its scalar upper bound.
    pub exact_metric: bool,
}

impl Default for StepsizeOptions {
    fn default() -> Self {
        Self { sigma: 1.0, tau: TauPolicy::default(), smoothness_divisor: 1.0, exact_metric: false }
    }
}

/// Block metrics `T_i` with the validity report of the step-size condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Stepsizes {
    pub sigma: f64,
    pub taus: Vec<f64>,
    /// `T_i`, before the `1/p_i` scaling applied in the prox.
    pub metrics: Vec<BlockMetric>,
    pub valid: bool,
    /// Smallest eigenvalue of the step-size condition matrix.
    pub margin: f64,
}

pub fn stepsize_matrices(
    smoothness: &[Vec<f64>],
    a: &[&SparseMatrix],
    sampling: &SamplingScheme,
    options: &StepsizeOptions,
) -> Result<Stepsizes, PdError> {
    let sigma = options.sigma;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PdError::Stepsize(format!("sigma must be positive, got {sigma}")));
    }
    if a.len() != sampling.num_blocks() || smoothness.len() != a.len() {
        return Err(PdError::Dimension { expected: sampling.num_blocks(), found: a.len() });
    }
    let taus = match &options.tau {
        TauPolicy::Auto { margin, cap } => {
            let t = (critical_tau(a, sigma, sampling) * (1.0 - margin)).min(*cap);
            vec![t; a.len()]
        }
        TauPolicy::Uniform(t) => vec![*t; a.len()],
        TauPolicy::PerBlock(t) => t.clone(),
    };
    if taus.len() != a.len() || taus.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(PdError::Stepsize(format!("tau must be positive and finite, got {taus:?}")));
    }
    let mut metrics = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let lam = &smoothness[i];
        if lam.len() != a[i].cols() {
            return Err(PdError::Dimension { expected: a[i].cols(), found: lam.len() });
        }
        let diag: Vec<f64> = lam.iter().map(|l| 1.0 / taus[i] + l / options.smoothness_divisor).collect();
        let metric = if options.exact_metric {
            BlockMetric::exact(diag, sigma, a[i].clone())
        } else {
            let lmax = lam.iter().copied().fold(0.0, f64::max) / options.smoothness_divisor;
            let norm = a[i].spectral_norm();
            BlockMetric::scalar(1.0 / taus[i] + lmax + sigma * norm * norm, a[i].cols())
        };
        metrics.push(metric.map_err(|e| PdError::Stepsize(e.to_string()))?);
    }
    let margin = condition_margin(a, sigma, &taus, sampling);
    Ok(Stepsizes { sigma, taus, metrics, valid: margin > 0.0, margin })
}

/// [`stepsize_matrices`] with the smoothness and coupling taken from `problem`.
pub fn problem_stepsizes<P: BlockProblem>(
    problem: &P,
    sampling: &SamplingScheme,
    options: &StepsizeOptions,
) -> Result<Stepsizes, PdError> {
    let d = problem.num_blocks();
    let lam: Vec<Vec<f64>> = (0..d).map(|i| problem.smoothness(i)).collect();
    let a: Vec<&SparseMatrix> = (0..d).map(|i| problem.coupling(i)).collect();
    stepsize_matrices(&lam, &a, sampling, options)
}

// ---------------------------------------------------------------------------
// the solver

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub iterations: usize,
    pub seed: u64,
    pub execution: Execution,
    /// Compute the KKT residual every this many iterations (0: only at the end).
    pub kkt_every: usize,
    /// Store a dual snapshot every this many iterations (0: never).
    pub snapshot_every: usize,
    /// Window of the dual drift measure.
    pub drift_window: usize,
    /// Accept a prox that stopped at its iteration cap instead of failing.
    pub accept_inexact: bool,
    /// Run even if the step-size condition fails.
    pub allow_invalid: bool,
    pub inner: InnerTolerance,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            iterations: 2000,
            seed: 0,
            execution: Execution::default(),
            kkt_every: 0,
            snapshot_every: 0,
            drift_window: 50,
            accept_inexact: true,
            allow_invalid: false,
            inner: InnerTolerance::Schedule,
        }
    }
}

/// Primal and dual iterates after `k` iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub k: usize,
    pub x: Vec<Vec<f64>>,
    /// Running mean of `x^1..x^k` (`x^0` before the first iteration).
    pub s: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    /// `A x^k - b`.
    pub residual: Vec<f64>,
    /// `A s^k - b`.
    pub mean_residual: Vec<f64>,
}

impl SolverState {
    pub fn theta(&self) -> f64 {
        1.0 / (self.k as f64 + 1.0)
    }
}

fn half_sq(v: &[f64]) -> f64 {
    0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub struct Solver<'p, P: BlockProblem> {
    problem: &'p P,
    sampling: SamplingScheme,
    /// `T_i / p_i`.
    metrics: Vec<BlockMetric>,
    sigma: f64,
    weights: Vec<f64>,
    rng: ChaCha8Rng,
    workspaces: Vec<P::Workspace>,
    kkt_workspaces: Vec<P::Workspace>,
    state: SolverState,
    options: RunOptions,
    trace: ConvergenceTrace,
    block_costs: Vec<f64>,
    history: VecDeque<Vec<f64>>,
    last_subset: Vec<usize>,
}

impl<'p, P: BlockProblem> Solver<'p, P> {
    pub fn new(
        problem: &'p P,
        sampling: SamplingScheme,
        steps: &Stepsizes,
        options: RunOptions,
    ) -> Result<Self, PdError> {
        let d = problem.num_blocks();
        if sampling.num_blocks() != d || steps.metrics.len() != d {
            return Err(PdError::Dimension { expected: d, found: sampling.num_blocks() });
        }
        if !steps.valid && !options.allow_invalid {
            return Err(PdError::Condition { margin: steps.margin });
        }
        let weights = sampling.weights();
        let metrics = steps.metrics.iter().zip(&weights).map(|(m, w)| m.scaled(*w)).collect();
        let x: Vec<Vec<f64>> = (0..d).map(|i| problem.initial_point(i)).collect();
        for (i, xi) in x.iter().enumerate() {
            if xi.len() != problem.block_dim(i) {
                return Err(PdError::Dimension { expected: problem.block_dim(i), found: xi.len() });
            }
        }
        let sigma = steps.sigma;
        let residual = problem.residual(&x);
        let z: Vec<f64> = residual.iter().map(|r| sigma * r).collect();
        let state = SolverState {
            k: 0,
            s: x.clone(),
            y: z.clone(),
            z,
            mean_residual: residual.clone(),
            residual,
            x,
        };
        let workspaces: Vec<P::Workspace> = (0..d).map(|i| problem.workspace(i)).collect();
        let block_costs: Vec<f64> = state.x.iter().enumerate().map(|(i, xi)| problem.cost(i, xi)).collect();
        let mut solver = Self {
            problem,
            sampling,
            metrics,
            sigma,
            weights,
            rng: ChaCha8Rng::seed_from_u64(options.seed),
            kkt_workspaces: workspaces.clone(),
            workspaces,
            state,
            options,
            trace: ConvergenceTrace::default(),
            block_costs,
            history: VecDeque::new(),
            last_subset: Vec::new(),
        };
        solver.trace.initial_dual = solver.state.y.clone();
        solver.record();
        Ok(solver)
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn trace(&self) -> &ConvergenceTrace {
        &self.trace
    }

    pub fn metrics(&self) -> &[BlockMetric] {
        &self.metrics
    }

    /// Blocks updated by the latest step.
    pub fn last_subset(&self) -> &[usize] {
        &self.last_subset
    }

    fn record(&mut self) {
        let st = &self.state;
        let k = st.k;
        let w = self.options.drift_window;
        self.history.push_back(st.y.clone());
        if self.history.len() > w + 1 {
            self.history.pop_front();
        }
        let drift = (w > 0 && self.history.len() == w + 1).then(|| {
            let old = &self.history[0];
            st.y.iter().zip(old).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        });
        let kkt = (self.options.kkt_every > 0 && k % self.options.kkt_every == 0)
            .then(|| kkt_residual(self.problem, &st.x, &st.y, &mut self.kkt_workspaces))
            .flatten();
        self.trace.records.push(TraceRecord {
            k,
            cost: self.block_costs.iter().sum(),
            h_last: half_sq(&st.residual),
            h_erg: half_sq(&st.mean_residual),
            resid_inf: inf_norm(&st.residual),
            kkt,
            dlmp_drift: drift,
        });
        if self.options.snapshot_every > 0 && k % self.options.snapshot_every == 0 {
            self.trace.snapshots.push((k, st.y.clone()));
        }
    }

    /// One iteration.
    pub fn step(&mut self) -> Result<(), PdError> {
        let d = self.problem.num_blocks();
        let idx = self.sampling.sample_index(&mut self.rng);
        let subset = self.sampling.subset(idx).to_vec();
        let mut select = vec![false; d];
        for &i in &subset {
            select[i] = true;
        }
        let k = self.state.k;
        let tol = self.options.inner.at(k);
        let problem = self.problem;
        let state = &self.state;
        let metrics = &self.metrics;
        let results = map_selected(self.options.execution, &mut self.workspaces, &select, |i, ws| {
            let xi = &state.x[i];
            let mut lin = vec![0.0; xi.len()];
            problem.gradient(i, xi, &mut lin);
            problem.coupling(i).mul_transpose_add(1.0, &state.y, &mut lin);
            problem.prox(i, ws, xi, &lin, &metrics[i], tol)
        });

        let m = problem.dual_dim();
        let mut a_delta = vec![0.0; m];
        let mut ap_delta = vec![0.0; m];
        for (i, res) in results {
            let point = match res {
                Ok(out) => out.point,
                Err(ProjectionError::NotConverged { iterations, residual, point })
                    if self.options.accept_inexact =>
                {
                    log::warn!(
                        "iteration {k}: block {i} prox stopped after {iterations} inner steps (residual {residual:.2e})"
                    );
                    point
                }
                Err(source) => return Err(PdError::Prox { iteration: k, block: i, source }),
            };
            let delta: Vec<f64> = point.iter().zip(&self.state.x[i]).map(|(a, b)| a - b).collect();
            let a = problem.coupling(i);
            a.mul_add(1.0, &delta, &mut a_delta);
            a.mul_add(self.weights[i], &delta, &mut ap_delta);
            self.block_costs[i] = problem.cost(i, &point);
            self.state.x[i] = point;
        }

        let sigma = self.sigma;
        let st = &mut self.state;
        for j in 0..m {
            st.z[j] += sigma * a_delta[j];
            st.y[j] += sigma * ap_delta[j] + st.z[j];
            st.residual[j] += a_delta[j];
        }
        st.k += 1;
        let inv = 1.0 / st.k as f64;
        if st.k == 1 {
            st.s = st.x.clone();
            st.mean_residual = st.residual.clone();
        } else {
            for (si, xi) in st.s.iter_mut().zip(&st.x) {
                for (a, b) in si.iter_mut().zip(xi) {
                    *a += (b - *a) * inv;
                }
            }
            for (a, b) in st.mean_residual.iter_mut().zip(&st.residual) {
                *a += (b - *a) * inv;
            }
        }
        self.last_subset = subset;
        self.record();
        Ok(())
    }

    pub fn run(mut self) -> Result<RunResult, PdError> {
        for _ in 0..self.options.iterations {
            self.step()?;
        }
        Ok(self.finish())
    }

    /// Ends the run, computing a final KKT residual when none was recorded.
    pub fn finish(mut self) -> RunResult {
        if let Some(last) = self.trace.records.last_mut() {
            if last.kkt.is_none() {
                last.kkt = kkt_residual(self.problem, &self.state.x, &self.state.y, &mut self.kkt_workspaces);
            }
        }
        RunResult { state: self.state, trace: self.trace }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub state: SolverState,
    pub trace: ConvergenceTrace,
}

/// Runs the method for `options.iterations` steps.
pub fn run<P: BlockProblem>(
    problem: &P,
    sampling: SamplingScheme,
    steps: &Stepsizes,
    options: RunOptions,
) -> Result<RunResult, PdError> {
    Solver::new(problem, sampling, steps, options)?.run()
}

/// The same method written with the auxiliary sequences `Z^k` and `S^k`:
/// `Z^k = (1 - θ_k) S^k + θ_k x^k`, `y^k = (σ/θ_k)(A Z^k - b)`,
/// `S^{k+1} = Z^k + θ_k P (x^{k+1} - x^k)`. Returns `(x^k, y^k)` for
/// `k = 0..=iterations`.
pub fn run_averaged_form<P: BlockProblem>(
    problem: &P,
    sampling: &SamplingScheme,
    steps: &Stepsizes,
    iterations: usize,
    seed: u64,
    inner: InnerTolerance,
) -> Result<Vec<(Vec<Vec<f64>>, Vec<f64>)>, PdError> {
    let d = problem.num_blocks();
    let weights = sampling.weights();
    let metrics: Vec<BlockMetric> = steps.metrics.iter().zip(&weights).map(|(m, w)| m.scaled(*w)).collect();
    let sigma = steps.sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws: Vec<P::Workspace> = (0..d).map(|i| problem.workspace(i)).collect();
    let mut x: Vec<Vec<f64>> = (0..d).map(|i| problem.initial_point(i)).collect();
    let mut s = x.clone();
    let mut out = Vec::with_capacity(iterations + 1);
    for k in 0..=iterations {
        let theta = 1.0 / (k as f64 + 1.0);
        let zk: Vec<Vec<f64>> = s
            .iter()
            .zip(&x)
            .map(|(si, xi)| si.iter().zip(xi).map(|(a, b)| (1.0 - theta) * a + theta * b).collect())
            .collect();
        let y: Vec<f64> = problem.residual(&zk).iter().map(|r| sigma / theta * r).collect();
        out.push((x.clone(), y.clone()));
        if k == iterations {
            break;
        }
        let idx = sampling.sample_index(&mut rng);
        let mut next = x.clone();
        for &i in sampling.subset(idx) {
            let mut lin = vec![0.0; x[i].len()];
            problem.gradient(i, &x[i], &mut lin);
            problem.coupling(i).mul_transpose_add(1.0, &y, &mut lin);
            next[i] = match problem.prox(i, &mut ws[i], &x[i], &lin, &metrics[i], inner.at(k)) {
                Ok(o) => o.point,
                Err(ProjectionError::NotConverged { point, .. }) => point,
                Err(source) => return Err(PdError::Prox { iteration: k, block: i, source }),
            };
        }
        s = (0..d)
            .map(|i| {
                zk[i]
                    .iter()
                    .zip(next[i].iter().zip(&x[i]))
                    .map(|(z, (a, b))| z + theta * weights[i] * (a - b))
                    .collect()
            })
            .collect();
        x = next;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// identities

/// `|E_I[h(x + U_I P t)] - h(x) - <grad h(x), t> - 1/2 |t|_Sigma^2|` for
/// `h(x) = 1/2 |A x - b|^2`, with the expectation taken by enumeration.
pub fn eso_check(
    x: &[Vec<f64>],
    t: &[Vec<f64>],
    sampling: &SamplingScheme,
    a: &[&SparseMatrix],
    b: &[f64],
) -> f64 {
    let h = |v: &[Vec<f64>]| {
        let mut r: Vec<f64> = b.iter().map(|x| -x).collect();
        for (ai, vi) in a.iter().zip(v) {
            ai.mul_add(1.0, vi, &mut r);
        }
        half_sq(&r)
    };
    let weights = sampling.weights();
    let mut expected = 0.0;
    for (set, &p) in sampling.subsets().iter().zip(sampling.probabilities()) {
        let mut moved = x.to_vec();
        for &i in set {
            for (m, ti) in moved[i].iter_mut().zip(&t[i]) {
                *m += weights[i] * ti;
            }
        }
        expected += p * h(&moved);
    }
    let mut r: Vec<f64> = b.iter().map(|x| -x).collect();
    for (ai, xi) in a.iter().zip(x) {
        ai.mul_add(1.0, xi, &mut r);
    }
    let mut lin = 0.0;
    for (ai, ti) in a.iter().zip(t) {
        lin += ai.mul(ti).iter().zip(&r).map(|(u, v)| u * v).sum::<f64>();
    }
    let at: Vec<Vec<f64>> = a.iter().zip(t).map(|(ai, ti)| ai.mul(ti)).collect();
    let mut quad = 0.0;
    for i in 0..a.len() {
        for j in 0..a.len() {
            let pij = sampling.pair(i, j);
            if pij == 0.0 {
                continue;
            }
            let w = pij / (sampling.marginal(i) * sampling.marginal(j));
            quad += w * at[i].iter().zip(&at[j]).map(|(u, v)| u * v).sum::<f64>();
        }
    }
    (expected - (half_sq(&r) + lin + 0.5 * quad)).abs()
}

/// Per-block scalar coefficients `gamma[k][l][i]` expressing the averaged
/// sequence `S^k = sum_l gamma_{k,l} x^l`, for `k = 0..=iterations`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaTable {
    pub rows: Vec<Vec<Vec<f64>>>,
}

pub fn gamma_coefficients(iterations: usize, weights: &[f64]) -> GammaTable {
    let d = weights.len();
    let mut rows: Vec<Vec<Vec<f64>>> = vec![vec![vec![1.0; d]]];
    for k in 0..iterations {
        let theta = 1.0 / (k as f64 + 1.0);
        let prev = &rows[k];
        let mut next: Vec<Vec<f64>> = prev[..k].iter().map(|g| g.iter().map(|v| (1.0 - theta) * v).collect()).collect();
        next.push((0..d).map(|i| (1.0 - theta) * prev[k][i] - theta * (weights[i] - 1.0)).collect());
        next.push(weights.iter().map(|w| theta * w).collect());
        rows.push(next);
    }
    GammaTable { rows }
}

impl GammaTable {
    /// Largest deviation of a row sum from one (compensated summation).
    pub fn row_sum_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for row in &self.rows {
            let d = row[0].len();
            for i in 0..d {
                let (mut sum, mut comp) = (0.0f64, 0.0f64);
                for g in row {
                    let v = g[i];
                    let t = sum + v;
                    comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
                    sum = t;
                }
                worst = worst.max((sum + comp - 1.0).abs());
            }
        }
        worst
    }
}
