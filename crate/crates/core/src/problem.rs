//! Concrete block problems: the pricing problem of a network instance and a
//! small box-constrained quadratic family used for checks.

use crate::grid::NetworkInstance;
use crate::opf::{
    build_coupling, dso_cost, dso_cost_gradient, smoothness_matrix, CouplingSystem, DsoLayout, LaCost,
};
use crate::pd::BlockProblem;
use crate::projections::{
    prox_la, BlockMetric, DsoFeasibleSet, DsoProxWorkspace, LaFeasibleSet, ProjectionError, ProxOutcome,
};
use crate::sparse::SparseMatrix;

/// Block 0 is the operator, block `a` (1-based) the `a`-th aggregator.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    instance: NetworkInstance,
    coupling: CouplingSystem,
    rhs: Vec<f64>,
    dso_set: DsoFeasibleSet,
    la_sets: Vec<LaFeasibleSet>,
    la_costs: Vec<LaCost>,
    smoothness: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum BlockWorkspace {
    Dso(Box<DsoProxWorkspace>),
    La,
}

impl OpfProblem {
    pub fn new(instance: NetworkInstance) -> Self {
        let p = instance.num_aggregators();
        Self::with_la_costs(instance, vec![LaCost::Zero; p])
    }

    pub fn with_la_costs(instance: NetworkInstance, la_costs: Vec<LaCost>) -> Self {
        assert_eq!(la_costs.len(), instance.num_aggregators(), "one cost per aggregator");
        let coupling = build_coupling(&instance);
        let rhs = coupling.rhs();
        let smoothness = smoothness_matrix(&instance, &la_costs).blocks;
        Self {
            dso_set: DsoFeasibleSet::new(&instance),
            la_sets: LaFeasibleSet::for_instance(&instance),
            instance,
            coupling,
            rhs,
            la_costs,
            smoothness,
        }
    }

    pub fn instance(&self) -> &NetworkInstance {
        &self.instance
    }

    pub fn coupling_system(&self) -> &CouplingSystem {
        &self.coupling
    }

    pub fn dso_layout(&self) -> &DsoLayout {
        &self.dso_set.layout
    }

    pub fn dso_set(&self) -> &DsoFeasibleSet {
        &self.dso_set
    }

    pub fn la_set(&self, a: usize) -> &LaFeasibleSet {
        &self.la_sets[a]
    }

    pub fn num_aggregators(&self) -> usize {
        self.la_sets.len()
    }

    /// Flexible consumption `p^c` of `bus` at period `t` in a full primal state.
    pub fn consumption(&self, x: &[Vec<f64>], bus: usize, t: usize) -> Option<f64> {
        let a = self.la_sets.iter().position(|s| s.layout.buses().contains(&bus))?;
        let lay = &self.la_sets[a].layout;
        let local = lay.buses().iter().position(|&b| b == bus)?;
        x.get(a + 1).map(|xa| xa[lay.pc(local, t)])
    }

    /// Largest constraint violation of a full primal state.
    pub fn block_violation(&self, x: &[Vec<f64>]) -> f64 {
        let mut worst = self.dso_set.violation(&x[0]);
        for (set, xa) in self.la_sets.iter().zip(&x[1..]) {
            worst = worst.max(set.violation(xa));
        }
        worst
    }
}

impl BlockProblem for OpfProblem {
    type Workspace = BlockWorkspace;

    fn num_blocks(&self) -> usize {
        1 + self.la_sets.len()
    }

    fn block_dim(&self, i: usize) -> usize {
        if i == 0 {
            self.dso_set.dim()
        } else {
            self.la_sets[i - 1].dim()
        }
    }

    fn coupling(&self, i: usize) -> &SparseMatrix {
        if i == 0 {
            &self.coupling.a0
        } else {
            &self.coupling.a_la[i - 1]
        }
    }

    fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    fn cost(&self, i: usize, x: &[f64]) -> f64 {
        if i == 0 {
            dso_cost(&self.instance, x).expect("operator block dimension")
        } else {
            self.la_costs[i - 1].value(x)
        }
    }

    fn gradient(&self, i: usize, x: &[f64], out: &mut [f64]) {
        if i == 0 {
            dso_cost_gradient(&self.instance, x, out)
        } else {
            self.la_costs[i - 1].gradient(x, out)
        }
    }

    fn smoothness(&self, i: usize) -> Vec<f64> {
        self.smoothness[i].clone()
    }

    /// Flat voltage profile with zero flows for the operator; the projection
    /// of the origin for each aggregator.
    fn initial_point(&self, i: usize) -> Vec<f64> {
        if i == 0 {
            let lay = &self.dso_set.layout;
            let mut x = vec![0.0; lay.dim()];
            for n in 1..=lay.lines() {
                for t in 0..lay.horizon() {
                    x[lay.v(n, t)] = self.instance.v0();
                }
            }
            x
        } else {
            let set = &self.la_sets[i - 1];
            let mut x = vec![0.0; set.dim()];
            set.project(&mut x).expect("profiles are validated at load");
            x
        }
    }

    fn workspace(&self, i: usize) -> BlockWorkspace {
        if i == 0 {
            BlockWorkspace::Dso(Box::new(DsoProxWorkspace::new(self.dso_set.clone())))
        } else {
            BlockWorkspace::La
        }
    }

    fn prox(
        &self,
        i: usize,
        ws: &mut BlockWorkspace,
        anchor: &[f64],
        lin: &[f64],
        metric: &BlockMetric,
        tol: f64,
    ) -> Result<ProxOutcome, ProjectionError> {
        match ws {
            BlockWorkspace::Dso(w) => w.prox(anchor, lin, metric, tol),
            BlockWorkspace::La => {
                let point = prox_la(&self.la_sets[i - 1], anchor, lin, metric, tol)?;
                Ok(ProxOutcome { point, residual: 0.0, iterations: 1 })
            }
        }
    }
}

/// `min sum_i (w_i/2 |x_i|^2 + <c_i, x_i>)` s.t. `sum_i A_i x_i = b`,
/// `lo_i <= x_i <= hi_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxQp {
    pub blocks: Vec<BoxQpBlock>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpBlock {
    pub a: SparseMatrix,
    pub weight: f64,
    pub linear: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub start: Vec<f64>,
}

impl BoxQpBlock {
    pub fn unconstrained(a: SparseMatrix, weight: f64) -> Self {
        let n = a.cols();
        Self {
            a,
            weight,
            linear: vec![0.0; n],
            lo: vec![f64::NEG_INFINITY; n],
            hi: vec![f64::INFINITY; n],
            start: vec![0.0; n],
        }
    }
}

impl BlockProblem for BoxQp {
    type Workspace = ();

    fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn block_dim(&self, i: usize) -> usize {
        self.blocks[i].a.cols()
    }

    fn coupling(&self, i: usize) -> &SparseMatrix {
        &self.blocks[i].a
    }

    fn rhs(&self) -> &[f64] {
        &self.b
    }

    fn cost(&self, i: usize, x: &[f64]) -> f64 {
        let b = &self.blocks[i];
        x.iter().zip(&b.linear).map(|(v, c)| 0.5 * b.weight * v * v + c * v).sum()
    }

    fn gradient(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let b = &self.blocks[i];
        for ((o, v), c) in out.iter_mut().zip(x).zip(&b.linear) {
            *o = b.weight * v + c;
        }
    }

    fn smoothness(&self, i: usize) -> Vec<f64> {
        vec![self.blocks[i].weight; self.block_dim(i)]
    }

    fn initial_point(&self, i: usize) -> Vec<f64> {
        self.blocks[i].start.clone()
    }

    fn workspace(&self, _i: usize) {}

    fn prox(
        &self,
        i: usize,
        _ws: &mut (),
        anchor: &[f64],
        lin: &[f64],
        metric: &BlockMetric,
        tol: f64,
    ) -> Result<ProxOutcome, ProjectionError> {
        let b = &self.blocks[i];
        let clamp = |z: &mut [f64]| {
            for ((v, l), h) in z.iter_mut().zip(&b.lo).zip(&b.hi) {
                *v = v.clamp(*l, *h);
            }
            Ok(())
        };
        match metric.diagonal_weights() {
            Some(w) => {
                let mut x: Vec<f64> = anchor.iter().zip(lin).zip(w).map(|((a, g), w)| a - g / w).collect();
                clamp(&mut x)?;
                Ok(ProxOutcome { point: x, residual: 0.0, iterations: 1 })
            }
            None => crate::projections::metric_prox_admm(&metric.dense(), anchor, lin, clamp, tol, 100_000),
        }
    }
}
