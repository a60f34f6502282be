//! Assembly of the relaxed branch-flow problem: variable layouts, the
//! bus-balance coupling `A0 x0 + sum_a A_a x_a = b`, the operator's internal
//! affine constraints, costs and the smoothness matrix.
//!
//! Coupling rows are ordered as all active-power balances (bus-major, then
//! period) followed by all reactive-power balances. Their duals are the
//! active and reactive DLMPs.

use std::ops::Range;

use crate::grid::NetworkInstance;
use crate::sparse::SparseMatrix;

/// Positions of the operator's variables inside its block `x0`.
///
/// Lines are indexed by their child bus `n = 1..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsoLayout {
    lines: usize,
    horizon: usize,
}

impl DsoLayout {
    pub fn new(lines: usize, horizon: usize) -> Self {
        Self { lines, horizon }
    }

    pub fn for_instance(inst: &NetworkInstance) -> Self {
        Self::new(inst.num_lines(), inst.horizon())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        2 * self.horizon + 4 * self.lines * self.horizon
    }

    fn nt(&self) -> usize {
        self.lines * self.horizon
    }

    fn line_offset(&self, n: usize, t: usize) -> usize {
        debug_assert!(n >= 1 && n <= self.lines && t < self.horizon);
        (n - 1) * self.horizon + t
    }

    /// Net consumption at the root (nonpositive: the feeder only injects).
    pub fn p0(&self, t: usize) -> usize {
        t
    }

    pub fn q0(&self, t: usize) -> usize {
        self.horizon + t
    }

    /// Active flow on line `n`, measured at bus `n` towards its parent.
    pub fn f(&self, n: usize, t: usize) -> usize {
        2 * self.horizon + self.line_offset(n, t)
    }

    pub fn g(&self, n: usize, t: usize) -> usize {
        2 * self.horizon + self.nt() + self.line_offset(n, t)
    }

    /// Squared voltage magnitude at bus `n`.
    pub fn v(&self, n: usize, t: usize) -> usize {
        2 * self.horizon + 2 * self.nt() + self.line_offset(n, t)
    }

    /// Squared current magnitude on line `n`.
    pub fn l(&self, n: usize, t: usize) -> usize {
        2 * self.horizon + 3 * self.nt() + self.line_offset(n, t)
    }

    pub fn ranges(&self) -> [(&'static str, Range<usize>); 6] {
        let t = self.horizon;
        let nt = self.nt();
        let base = 2 * t;
        [
            ("p0", 0..t),
            ("q0", t..2 * t),
            ("f", base..base + nt),
            ("g", base + nt..base + 2 * nt),
            ("v", base + 2 * nt..base + 3 * nt),
            ("l", base + 3 * nt..base + 4 * nt),
        ]
    }
}

/// Positions of one aggregator's variables: per managed bus and period,
/// consumption, production and reactive production.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaLayout {
    buses: Vec<usize>,
    horizon: usize,
}

impl LaLayout {
    pub fn new(buses: Vec<usize>, horizon: usize) -> Self {
        Self { buses, horizon }
    }

    pub fn buses(&self) -> &[usize] {
        &self.buses
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        3 * self.buses.len() * self.horizon
    }

    fn base(&self, local: usize, t: usize) -> usize {
        3 * (local * self.horizon + t)
    }

    pub fn pc(&self, local: usize, t: usize) -> usize {
        self.base(local, t)
    }

    pub fn pp(&self, local: usize, t: usize) -> usize {
        self.base(local, t) + 1
    }

    pub fn qp(&self, local: usize, t: usize) -> usize {
        self.base(local, t) + 2
    }

    /// Net active consumption `pc - pp` at a managed bus.
    pub fn net_active(&self, x: &[f64], local: usize, t: usize) -> f64 {
        x[self.pc(local, t)] - x[self.pp(local, t)]
    }

    /// Net reactive consumption `tau_c * pc - qp` at a managed bus.
    pub fn net_reactive(&self, x: &[f64], tau_c: f64, local: usize, t: usize) -> f64 {
        tau_c * x[self.pc(local, t)] - x[self.qp(local, t)]
    }
}

/// Row index helpers for the coupling system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualLayout {
    lines: usize,
    horizon: usize,
}

impl DualLayout {
    pub fn new(lines: usize, horizon: usize) -> Self {
        Self { lines, horizon }
    }

    pub fn dim(&self) -> usize {
        2 * self.lines * self.horizon
    }

    pub fn active(&self, n: usize, t: usize) -> usize {
        (n - 1) * self.horizon + t
    }

    pub fn reactive(&self, n: usize, t: usize) -> usize {
        self.lines * self.horizon + (n - 1) * self.horizon + t
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// `A0 x0 + sum_a A_a x_a = b0 + sum_a b_a`.
#[derive(Debug, Clone)]
pub struct CouplingSystem {
    pub dso_layout: DsoLayout,
    pub la_layouts: Vec<LaLayout>,
    pub duals: DualLayout,
    pub a0: SparseMatrix,
    pub a_la: Vec<SparseMatrix>,
    pub b0: Vec<f64>,
    pub b_la: Vec<Vec<f64>>,
}

impl CouplingSystem {
    pub fn dual_dim(&self) -> usize {
        self.duals.dim()
    }

    pub fn rhs(&self) -> Vec<f64> {
        let mut b = self.b0.clone();
        for ba in &self.b_la {
            for (bi, v) in b.iter_mut().zip(ba) {
                *bi += v;
            }
        }
        b
    }

    /// `A x - b` for a full primal state.
    pub fn residual(&self, x0: &[f64], xa: &[Vec<f64>]) -> Vec<f64> {
        let mut r: Vec<f64> = self.rhs().into_iter().map(|v| -v).collect();
        self.a0.mul_add(1.0, x0, &mut r);
        for (a, x) in self.a_la.iter().zip(xa) {
            a.mul_add(1.0, x, &mut r);
        }
        r
    }

    /// The whole matrix with blocks side by side (operator first).
    pub fn full_matrix(&self) -> SparseMatrix {
        let mut trip: Vec<(usize, usize, f64)> = self.a0.triplets().collect();
        let mut offset = self.a0.cols();
        for a in &self.a_la {
            trip.extend(a.triplets().map(|(r, c, v)| (r, c + offset, v)));
            offset += a.cols();
        }
        SparseMatrix::from_triplets(self.dual_dim(), offset, &trip)
    }
}

/// Builds the bus-balance coupling of an instance.
pub fn build_coupling(inst: &NetworkInstance) -> CouplingSystem {
    let lines = inst.num_lines();
    let horizon = inst.horizon();
    let layout = DsoLayout::for_instance(inst);
    let duals = DualLayout::new(lines, horizon);
    let topo = inst.topology();

    let mut trip = Vec::new();
    for n in 1..=lines {
        let bus = inst.bus(n);
        for t in 0..horizon {
            let (ra, rr) = (duals.active(n, t), duals.reactive(n, t));
            trip.push((ra, layout.f(n, t), 1.0));
            trip.push((rr, layout.g(n, t), 1.0));
            for &m in topo.children(n) {
                let child = inst.bus(m);
                trip.push((ra, layout.f(m, t), -1.0));
                trip.push((ra, layout.l(m, t), child.r));
                trip.push((rr, layout.g(m, t), -1.0));
                trip.push((rr, layout.l(m, t), child.x));
            }
            trip.push((ra, layout.v(n, t), bus.g));
            trip.push((rr, layout.v(n, t), -bus.b));
        }
    }
    let a0 = SparseMatrix::from_triplets(duals.dim(), layout.dim(), &trip);

    let mut la_layouts = Vec::new();
    let mut a_la = Vec::new();
    for buses in inst.aggregators() {
        let lay = LaLayout::new(buses.clone(), horizon);
        let mut trip = Vec::new();
        for (j, &n) in buses.iter().enumerate() {
            let tau = inst.profile(n).tau_c;
            for t in 0..horizon {
                let (ra, rr) = (duals.active(n, t), duals.reactive(n, t));
                trip.push((ra, lay.pc(j, t), 1.0));
                trip.push((ra, lay.pp(j, t), -1.0));
                trip.push((rr, lay.pc(j, t), tau));
                trip.push((rr, lay.qp(j, t), -1.0));
            }
        }
        a_la.push(SparseMatrix::from_triplets(duals.dim(), lay.dim(), &trip));
        la_layouts.push(lay);
    }

    CouplingSystem {
        dso_layout: layout,
        b_la: vec![vec![0.0; duals.dim()]; a_la.len()],
        la_layouts,
        duals,
        a0,
        a_la,
        b0: vec![0.0; duals.dim()],
    }
}

/// The operator's private affine constraints `E x0 = e`: the voltage drop
/// along every line and the active/reactive balance at the root.
#[derive(Debug, Clone)]
pub struct DsoAffine {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
}

pub fn build_dso_affine(inst: &NetworkInstance) -> DsoAffine {
    let layout = DsoLayout::for_instance(inst);
    let (lines, horizon) = (inst.num_lines(), inst.horizon());
    let topo = inst.topology();
    let v0 = inst.v0();
    let mut trip = Vec::new();
    let mut rhs = Vec::new();
    let mut row = 0;
    for n in 1..=lines {
        let bus = inst.bus(n);
        let z2 = bus.r * bus.r + bus.x * bus.x;
        let parent = topo.parent(n).expect("non-root bus has a parent");
        for t in 0..horizon {
            trip.push((row, layout.v(n, t), 1.0));
            trip.push((row, layout.f(n, t), -2.0 * bus.r));
            trip.push((row, layout.g(n, t), -2.0 * bus.x));
            trip.push((row, layout.l(n, t), z2));
            if parent == 0 {
                rhs.push(v0);
            } else {
                trip.push((row, layout.v(parent, t), -1.0));
                rhs.push(0.0);
            }
            row += 1;
        }
    }
    let root = inst.bus(0);
    for t in 0..horizon {
        trip.push((row, layout.p0(t), 1.0));
        trip.push((row + 1, layout.q0(t), 1.0));
        for &m in topo.children(0) {
            let child = inst.bus(m);
            trip.push((row, layout.f(m, t), -1.0));
            trip.push((row, layout.l(m, t), child.r));
            trip.push((row + 1, layout.g(m, t), -1.0));
            trip.push((row + 1, layout.l(m, t), child.x));
        }
        rhs.push(-root.g * v0);
        rhs.push(root.b * v0);
        row += 2;
    }
    DsoAffine { matrix: SparseMatrix::from_triplets(row, layout.dim(), &trip), rhs }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("expected a vector of length {expected}, got {found}")]
pub struct DimensionMismatch {
    pub expected: usize,
    pub found: usize,
}

/// Root generation cost plus the penalty on line losses.
pub fn dso_cost(inst: &NetworkInstance, x0: &[f64]) -> Result<f64, DimensionMismatch> {
    let layout = DsoLayout::for_instance(inst);
    if x0.len() != layout.dim() {
        return Err(DimensionMismatch { expected: layout.dim(), found: x0.len() });
    }
    let mut cost = 0.0;
    for t in 0..inst.horizon() {
        cost += inst.cost(t).value(-x0[layout.p0(t)]);
    }
    let mut losses = 0.0;
    for n in 1..=inst.num_lines() {
        let r = inst.bus(n).r;
        for t in 0..inst.horizon() {
            losses += r * x0[layout.l(n, t)];
        }
    }
    Ok(cost + inst.k_loss() * losses)
}

pub fn dso_cost_gradient(inst: &NetworkInstance, x0: &[f64], out: &mut [f64]) {
    let layout = DsoLayout::for_instance(inst);
    out.iter_mut().for_each(|o| *o = 0.0);
    for t in 0..inst.horizon() {
        out[layout.p0(t)] = -inst.cost(t).derivative(-x0[layout.p0(t)]);
    }
    for n in 1..=inst.num_lines() {
        let r = inst.bus(n).r;
        for t in 0..inst.horizon() {
            out[layout.l(n, t)] = inst.k_loss() * r;
        }
    }
}

/// Private aggregator cost. The benchmark uses the zero cost; the quadratic
/// variant `weight/2 * |x_a|^2` exercises the smooth-cost code paths.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LaCost {
    #[default]
    Zero,
    Quadratic { weight: f64 },
}

impl LaCost {
    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            LaCost::Zero => 0.0,
            LaCost::Quadratic { weight } => 0.5 * weight * x.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            LaCost::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            LaCost::Quadratic { weight } => {
                out.iter_mut().zip(x).for_each(|(o, v)| *o = weight * v)
            }
        }
    }

    pub fn curvature(&self) -> f64 {
        match *self {
            LaCost::Zero => 0.0,
            LaCost::Quadratic { weight } => weight,
        }
    }
}

pub fn la_cost(cost: &LaCost, x_a: &[f64]) -> f64 {
    cost.value(x_a)
}

/// Block-diagonal smoothness matrix with diagonal blocks (operator first).
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessMatrix {
    pub blocks: Vec<Vec<f64>>,
}

impl SmoothnessMatrix {
    /// Largest eigenvalue of block `i`.
    pub fn block_max(&self, i: usize) -> f64 {
        self.blocks[i].iter().copied().fold(0.0, f64::max)
    }
}

pub fn smoothness_matrix(inst: &NetworkInstance, la_costs: &[LaCost]) -> SmoothnessMatrix {
    let layout = DsoLayout::for_instance(inst);
    let mut dso = vec![0.0; layout.dim()];
    for t in 0..inst.horizon() {
        dso[layout.p0(t)] = 2.0 * inst.cost(t).quadratic;
    }
    let mut blocks = vec![dso];
    for (buses, cost) in inst.aggregators().iter().zip(la_costs) {
        let dim = 3 * buses.len() * inst.horizon();
        blocks.push(vec![cost.curvature(); dim]);
    }
    SmoothnessMatrix { blocks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, FlexibilityProfile, PeriodCost};
    use rand::{Rng, SeedableRng};

    pub(crate) fn two_bus(t: usize) -> NetworkInstance {
        let buses = vec![
            Bus { id: 0, parent: None, r: 0.0, x: 0.0, s_max: 0.0, b: 0.0, g: 0.0, v_min: 0.81, v_max: 1.21 },
            Bus { id: 1, parent: Some(0), r: 0.001, x: 0.12, s_max: 2.0, b: 0.0, g: 0.0, v_min: 0.81, v_max: 1.21 },
        ];
        let profiles = vec![FlexibilityProfile {
            bus: 1,
            p_min: vec![0.0; t],
            p_max: vec![1.0; t],
            energy: 0.5,
            tau_c: 0.2,
            prod_max: None,
            rho_min: None,
            rho_max: None,
        }];
        NetworkInstance::new(
            buses,
            profiles,
            t,
            1.0,
            0.001,
            vec![PeriodCost { linear: 2.0, quadratic: 1.0 }; t],
            None,
        )
        .unwrap()
    }

    #[test]
    fn layout_ranges_partition_the_block() {
        let layout = DsoLayout::new(14, 2);
        assert_eq!(layout.dim(), 2 * 2 + 4 * 14 * 2);
        let mut covered = vec![0; layout.dim()];
        for (_, r) in layout.ranges() {
            for i in r {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert_eq!(layout.l(14, 1), layout.dim() - 1);
    }

    #[test]
    fn benchmark_dimensions() {
        let inst = NetworkInstance::ieee15();
        let cs = build_coupling(&inst);
        assert_eq!(cs.dual_dim(), 56);
        assert_eq!(cs.a0.rows(), 56);
        assert_eq!(cs.a0.cols(), 116);
        assert_eq!(cs.a_la.len(), 14);
        assert!(cs.a_la.iter().all(|a| a.cols() == 6 && a.rows() == 56));
        assert!(cs.rhs().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn two_bus_active_row_hand_expansion() {
        let inst = two_bus(1);
        let cs = build_coupling(&inst);
        let lay = cs.dso_layout;
        let mut x0 = vec![0.0; lay.dim()];
        x0[lay.f(1, 0)] = 1.0;
        let mut xa = vec![0.0; 3];
        xa[cs.la_layouts[0].pc(0, 0)] = 1.0;
        let r = cs.residual(&x0, &[xa]);
        // f1 + p1 + g1 v1 with g1 = 0
        assert_eq!(r[cs.duals.active(1, 0)], 2.0);
        // reactive row: g1 + tau_c pc
        assert!((r[cs.duals.reactive(1, 0)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_state_has_zero_residual() {
        let inst = NetworkInstance::ieee15();
        let cs = build_coupling(&inst);
        let xa: Vec<Vec<f64>> = cs.la_layouts.iter().map(|l| vec![0.0; l.dim()]).collect();
        let r = cs.residual(&vec![0.0; cs.dso_layout.dim()], &xa);
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn leaf_rows_touch_only_own_flow_and_voltage() {
        let inst = NetworkInstance::ieee15();
        let cs = build_coupling(&inst);
        let lay = cs.dso_layout;
        for leaf in [6, 7, 11, 14] {
            for t in 0..2 {
                let cols: Vec<usize> = cs.a0.row(cs.duals.active(leaf, t)).map(|(c, _)| c).collect();
                let mut expected = vec![lay.f(leaf, t), lay.v(leaf, t)];
                expected.sort();
                // conductance is zero in the benchmark so the voltage entry is not stored
                assert!(cols == vec![lay.f(leaf, t)] || cols == expected, "{cols:?}");
                let a = cs.la_layouts.iter().position(|l| l.buses().contains(&leaf)).unwrap();
                let la_cols: Vec<usize> = cs.a_la[a].row(cs.duals.active(leaf, t)).map(|(c, _)| c).collect();
                assert_eq!(la_cols.len(), 2);
            }
        }
    }

    #[test]
    fn chain_feasible_point_has_zero_residual() {
        // 0 - 1 - 2 chain with a consistent hand-built flow pattern.
        let mut inst = two_bus(1);
        let mut buses = inst.buses().to_vec();
        buses.push(Bus { id: 2, parent: Some(1), r: 0.01, x: 0.02, s_max: 1.0, b: 0.0, g: 0.0, v_min: 0.81, v_max: 1.21 });
        let mut profiles = inst.profiles().to_vec();
        profiles.push(FlexibilityProfile { bus: 2, ..profiles[0].clone() });
        inst = NetworkInstance::new(buses, profiles, 1, 1.0, 0.0, inst.costs().to_vec(), None).unwrap();
        let cs = build_coupling(&inst);
        let lay = cs.dso_layout;
        let (p1, q1, p2, q2) = (0.3, 0.06, 0.2, 0.04);
        let l2 = 0.05;
        let l1 = 0.07;
        let mut x0 = vec![0.0; lay.dim()];
        // flows point up the tree; consumption makes them negative
        x0[lay.f(2, 0)] = -p2;
        x0[lay.g(2, 0)] = -q2;
        x0[lay.l(2, 0)] = l2;
        x0[lay.f(1, 0)] = (x0[lay.f(2, 0)] - 0.01 * l2) - p1;
        x0[lay.g(1, 0)] = (x0[lay.g(2, 0)] - 0.02 * l2) - q1;
        x0[lay.l(1, 0)] = l1;
        let mut xa = vec![vec![0.0; 3], vec![0.0; 3]];
        xa[0][0] = p1;
        xa[0][2] = -(q1 - 0.2 * p1);
        xa[1][0] = p2;
        xa[1][2] = -(q2 - 0.2 * p2);
        let r = cs.residual(&x0, &xa);
        assert!(r.iter().all(|v| v.abs() < 1e-15), "{r:?}");
    }

    #[test]
    fn dso_cost_examples() {
        let inst = NetworkInstance::ieee15();
        let lay = DsoLayout::for_instance(&inst);
        let mut x0 = vec![0.0; lay.dim()];
        assert_eq!(dso_cost(&inst, &x0).unwrap(), 0.0);
        x0[lay.p0(0)] = -1.0;
        x0[lay.p0(1)] = -1.0;
        assert_eq!(dso_cost(&inst, &x0).unwrap(), 4.0);
        assert!(dso_cost(&inst, &[0.0; 3]).is_err());

        let single = two_bus(1);
        let lay = DsoLayout::for_instance(&single);
        let mut x0 = vec![0.0; lay.dim()];
        x0[lay.l(1, 0)] = 1.0;
        assert!((dso_cost(&single, &x0).unwrap() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn la_cost_examples() {
        assert_eq!(la_cost(&LaCost::Zero, &[1.0, 2.0]), 0.0);
        let q = LaCost::Quadratic { weight: 1.0 };
        assert_eq!(la_cost(&q, &[1.0, 0.0, 0.0]), 0.5);
        let mut g = vec![9.0; 3];
        LaCost::Zero.gradient(&[1.0, 2.0, 3.0], &mut g);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn benchmark_smoothness() {
        let inst = NetworkInstance::ieee15();
        let lam = smoothness_matrix(&inst, &vec![LaCost::Zero; 14]);
        let lay = DsoLayout::for_instance(&inst);
        for (i, &v) in lam.blocks[0].iter().enumerate() {
            assert_eq!(v, if i == lay.p0(0) { 2.0 } else { 0.0 });
        }
        assert!(lam.blocks[1..].iter().all(|b| b.iter().all(|&v| v == 0.0)));

        let linear = inst.clone();
        let doc = linear.to_json().replace("\"quadratic\": 1.0", "\"quadratic\": 0.0");
        let linear = NetworkInstance::from_json(&doc).unwrap();
        let lam = smoothness_matrix(&linear, &vec![LaCost::Zero; 14]);
        assert!(lam.blocks.iter().all(|b| b.iter().all(|&v| v == 0.0)));

        let lam = smoothness_matrix(&inst, &vec![LaCost::Quadratic { weight: 1.0 }; 14]);
        assert!(lam.blocks[3].iter().all(|&v| v == 1.0));
    }

    fn random_dso_point(rng: &mut impl Rng, lay: &DsoLayout) -> Vec<f64> {
        (0..lay.dim()).map(|_| rng.random_range(-2.0..0.5)).collect()
    }

    #[test]
    fn descent_inequality_holds() {
        let inst = NetworkInstance::ieee15();
        let lay = DsoLayout::for_instance(&inst);
        let lam = smoothness_matrix(&inst, &vec![LaCost::Zero; 14]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut grad = vec![0.0; lay.dim()];
        for _ in 0..1000 {
            let x = random_dso_point(&mut rng, &lay);
            let y = random_dso_point(&mut rng, &lay);
            dso_cost_gradient(&inst, &x, &mut grad);
            let fx = dso_cost(&inst, &x).unwrap();
            let fy = dso_cost(&inst, &y).unwrap();
            let lin: f64 = grad.iter().zip(x.iter().zip(&y)).map(|(g, (a, b))| g * (b - a)).sum();
            let quad: f64 = lam.blocks[0]
                .iter()
                .zip(x.iter().zip(&y))
                .map(|(l, (a, b))| l * (b - a) * (b - a))
                .sum();
            let upper = fx + lin + 0.5 * quad;
            assert!(fy <= upper + 1e-12 * upper.abs().max(1.0), "{fy} > {upper}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let inst = NetworkInstance::ieee15();
        let lay = DsoLayout::for_instance(&inst);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut grad = vec![0.0; lay.dim()];
        for _ in 0..10 {
            let x = random_dso_point(&mut rng, &lay);
            dso_cost_gradient(&inst, &x, &mut grad);
            for i in 0..lay.dim() {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (dso_cost(&inst, &xp).unwrap() - dso_cost(&inst, &xm).unwrap()) / (2.0 * h);
                let scale = grad[i].abs().max(1e-3);
                assert!((fd - grad[i]).abs() <= 1e-6 * scale, "coord {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn dso_affine_rows() {
        let inst = NetworkInstance::ieee15();
        let aff = build_dso_affine(&inst);
        assert_eq!(aff.matrix.rows(), 14 * 2 + 2 * 2);
        // zero flows at nominal voltage satisfy the voltage-drop equations
        let lay = DsoLayout::for_instance(&inst);
        let mut x0 = vec![0.0; lay.dim()];
        for n in 1..=14 {
            for t in 0..2 {
                x0[lay.v(n, t)] = 1.0;
            }
        }
        let ex = aff.matrix.mul(&x0);
        for (a, b) in ex.iter().zip(&aff.rhs) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
