//! Test-only oracles and generators shared by the integration tests and the
//! acceptance report.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlmp_core::grid::random_radial_instance;
use dlmp_core::pd::SamplingScheme;
use dlmp_core::projections::{
    project_shifted_disk, prox_la, BlockMetric, DsoFeasibleSet, DsoProxWorkspace, LaFeasibleSet, SocCone,
};
use dlmp_core::sparse::SparseMatrix;

/// A constraint `s(u) >= 0` with a concave (or log-concave on its domain) slack.
#[derive(Debug, Clone)]
pub enum Slack {
    /// `rhs - <coef, u>`
    Linear { coef: Vec<(usize, f64)>, rhs: f64 },
    /// `radius^2 - (f - r l)^2 - (g - x l)^2`, `l` optional.
    Disk { f: usize, g: usize, l: Option<usize>, r: f64, x: f64, radius: f64 },
    /// `v l - f^2 - g^2` on `v, l > 0`.
    Cone { f: usize, g: usize, v: usize, l: usize },
}

impl Slack {
    fn eval(&self, u: &[f64], n: usize) -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        let s = match self {
            Slack::Linear { coef, rhs } => {
                let mut s = *rhs;
                for &(i, c) in coef {
                    s -= c * u[i];
                    grad[i] -= c;
                }
                s
            }
            Slack::Disk { f, g, l, r, x, radius } => {
                let lv = l.map_or(0.0, |i| u[i]);
                let (a, b) = (u[*f] - r * lv, u[*g] - x * lv);
                // s = radius^2 - a^2 - b^2 with a = f - r l, b = g - x l
                let mut da = DVector::zeros(n);
                let mut db = DVector::zeros(n);
                da[*f] = 1.0;
                db[*g] = 1.0;
                if let Some(i) = l {
                    da[*i] = -r;
                    db[*i] = -x;
                }
                grad = -2.0 * (a * &da + b * &db);
                hess = -2.0 * (&da * da.transpose() + &db * db.transpose());
                radius * radius - a * a - b * b
            }
            Slack::Cone { f, g, v, l } => {
                grad[*f] = -2.0 * u[*f];
                grad[*g] = -2.0 * u[*g];
                grad[*v] = u[*l];
                grad[*l] = u[*v];
                hess[(*f, *f)] = -2.0;
                hess[(*g, *g)] = -2.0;
                hess[(*v, *l)] = 1.0;
                hess[(*l, *v)] = 1.0;
                u[*v] * u[*l] - u[*f] * u[*f] - u[*g] * u[*g]
            }
        };
        (s, grad, hess)
    }

    fn domain_ok(&self, u: &[f64]) -> bool {
        match self {
            Slack::Cone { v, l, .. } => u[*v] > 0.0 && u[*l] > 0.0,
            _ => true,
        }
    }
}

/// `min 1/2 sum_i w_i (u_i - c_i)^2  s.t.  E u = e,  s_j(u) >= 0`.
#[derive(Debug, Clone)]
pub struct DenseOracle {
    pub weights: Vec<f64>,
    pub target: Vec<f64>,
    pub eq: Vec<(Vec<(usize, f64)>, f64)>,
    pub slacks: Vec<Slack>,
}

impl DenseOracle {
    fn n(&self) -> usize {
        self.weights.len()
    }

    fn eq_matrix(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n();
        let mut e = DMatrix::zeros(self.eq.len(), n);
        let mut rhs = DVector::zeros(self.eq.len());
        for (r, (coef, b)) in self.eq.iter().enumerate() {
            for &(i, c) in coef {
                e[(r, i)] += c;
            }
            rhs[r] = *b;
        }
        (e, rhs)
    }

    fn barrier_value(&self, u: &[f64], t: f64) -> Option<f64> {
        let n = self.n();
        let mut val = 0.0;
        for i in 0..n {
            val += 0.5 * t * self.weights[i] * (u[i] - self.target[i]).powi(2);
        }
        for s in &self.slacks {
            if !s.domain_ok(u) {
                return None;
            }
            let (sv, _, _) = s.eval(u, n);
            if !(sv > 0.0) {
                return None;
            }
            val -= sv.ln();
        }
        Some(val)
    }

    /// Barrier path from a strictly feasible `start`, then an active-set
    /// Newton polish of the KKT system.
    pub fn solve(&self, start: &[f64]) -> Vec<f64> {
        let n = self.n();
        let (e, erhs) = self.eq_matrix();
        let m = e.nrows();
        let mut u = start.to_vec();
        assert!(self.barrier_value(&u, 1.0).is_some(), "start must be strictly feasible");
        let mut t = 1.0;
        while t < 1e13 {
            for _ in 0..200 {
                let mut grad = DVector::zeros(n);
                let mut hess = DMatrix::zeros(n, n);
                for i in 0..n {
                    grad[i] = t * self.weights[i] * (u[i] - self.target[i]);
                    hess[(i, i)] = t * self.weights[i];
                }
                for s in &self.slacks {
                    let (sv, sg, sh) = s.eval(&u, n);
                    grad -= &sg / sv;
                    hess += &sg * sg.transpose() / (sv * sv) - sh / sv;
                }
                let mut kkt = DMatrix::zeros(n + m, n + m);
                kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
                kkt.view_mut((n, 0), (m, n)).copy_from(&e);
                kkt.view_mut((0, n), (n, m)).copy_from(&e.transpose());
                let mut rhs = DVector::zeros(n + m);
                rhs.rows_mut(0, n).copy_from(&(-&grad));
                let ures = DVector::from_column_slice(&u);
                rhs.rows_mut(n, m).copy_from(&(&erhs - &e * &ures));
                let Some(sol) = kkt.lu().solve(&rhs) else { break };
                let d = sol.rows(0, n).into_owned();
                let dec = -grad.dot(&d);
                if dec.abs() < 1e-14 {
                    break;
                }
                let f0 = self.barrier_value(&u, t).unwrap();
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..80 {
                    let cand: Vec<f64> = (0..n).map(|i| u[i] + alpha * d[i]).collect();
                    if let Some(f1) = self.barrier_value(&cand, t) {
                        if f1 <= f0 - 0.25 * alpha * dec.max(0.0) {
                            u = cand;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    break;
                }
            }
            t *= 8.0;
        }
        self.polish(&u, t).unwrap_or(u)
    }

    fn polish(&self, u0: &[f64], t: f64) -> Option<Vec<f64>> {
        let n = self.n();
        let (e, erhs) = self.eq_matrix();
        let mut active: Vec<usize> = (0..self.slacks.len())
            .filter(|&j| {
                let (sv, _, _) = self.slacks[j].eval(u0, n);
                1.0 / (t * sv) > 1e-9 || sv < 1e-8
            })
            .collect();
        for _round in 0..6 {
            let (u, lam) = self.newton_active(u0, &active, t, &e, &erhs)?;
            let neg: Vec<usize> =
                active.iter().zip(&lam).filter(|(_, &l)| l < -1e-10).map(|(&j, _)| j).collect();
            let violated: Vec<usize> = (0..self.slacks.len())
                .filter(|j| !active.contains(j))
                .filter(|&j| self.slacks[j].eval(&u, n).0 < -1e-12)
                .collect();
            if neg.is_empty() && violated.is_empty() {
                let dist = u.iter().zip(u0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                return (dist < 1e-3).then_some(u);
            }
            active.retain(|j| !neg.contains(j));
            active.extend(violated);
        }
        None
    }

    fn newton_active(
        &self,
        u0: &[f64],
        active: &[usize],
        t: f64,
        e: &DMatrix<f64>,
        erhs: &DVector<f64>,
    ) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.n();
        let m = e.nrows();
        let k = active.len();
        let mut u = DVector::from_column_slice(u0);
        let mut nu = DVector::<f64>::zeros(m);
        let mut lam: DVector<f64> = DVector::from_iterator(
            k,
            active.iter().map(|&j| 1.0 / (t * self.slacks[j].eval(u0, n).0.max(1e-300))),
        );
        for _ in 0..50 {
            let us = u.as_slice().to_vec();
            let mut res = DVector::zeros(n + m + k);
            let mut jac = DMatrix::zeros(n + m + k, n + m + k);
            for i in 0..n {
                res[i] = self.weights[i] * (u[i] - self.target[i]);
                jac[(i, i)] = self.weights[i];
            }
            let ety = e.transpose() * &nu;
            for i in 0..n {
                res[i] += ety[i];
            }
            jac.view_mut((0, n), (n, m)).copy_from(&e.transpose());
            jac.view_mut((n, 0), (m, n)).copy_from(e);
            let ec = e * &u - erhs;
            res.rows_mut(n, m).copy_from(&ec);
            for (a, &j) in active.iter().enumerate() {
                let (sv, sg, sh) = self.slacks[j].eval(&us, n);
                for i in 0..n {
                    res[i] -= lam[a] * sg[i];
                    jac[(i, n + m + a)] = -sg[i];
                    jac[(n + m + a, i)] = sg[i];
                }
                let mut block = jac.view_mut((0, 0), (n, n));
                block -= lam[a] * sh;
                res[n + m + a] = sv;
            }
            if res.amax() < 1e-15 {
                break;
            }
            let step = jac.lu().solve(&(-&res))?;
            u += step.rows(0, n);
            nu += step.rows(n, m);
            lam += step.rows(n + m, k);
        }
        let us = u.as_slice().to_vec();
        let ok = active.iter().all(|&j| self.slacks[j].eval(&us, n).0.abs() < 1e-11);
        ok.then(|| (us, lam.as_slice().to_vec()))
    }
}

fn inf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Slacks of one line's conic set at positions `[f, g, v, l]`.
fn cone_slacks(c: &SocCone) -> Vec<Slack> {
    let [f, g, v, l] = c.index;
    vec![
        Slack::Cone { f, g, v, l },
        Slack::Disk { f, g, l: None, r: 0.0, x: 0.0, radius: c.s_max },
        Slack::Disk { f, g, l: Some(l), r: c.r, x: c.x, radius: c.s_max },
        Slack::Linear { coef: vec![(v, -1.0)], rhs: -c.v_min },
        Slack::Linear { coef: vec![(v, 1.0)], rhs: c.v_max },
    ]
}

pub fn soc_case(rng: &mut ChaCha8Rng) -> f64 {
    let cone = SocCone {
        index: [0, 1, 2, 3],
        r: rng.random_range(0.001..0.2),
        x: rng.random_range(0.001..0.2),
        s_max: rng.random_range(0.2..2.0),
        v_min: 0.81,
        v_max: 1.21,
    };
    let s = cone.s_max;
    let p = [
        rng.random_range(-3.0..3.0) * s,
        rng.random_range(-3.0..3.0) * s,
        rng.random_range(0.3..1.8),
        rng.random_range(-1.0..3.0),
    ];
    let got = cone.project(p);
    let l0 = 0.5 * (s / cone.r.hypot(cone.x)).min(1.0);
    let oracle = DenseOracle { weights: vec![1.0; 4], target: p.to_vec(), eq: vec![], slacks: cone_slacks(&cone) };
    inf_dist(&got, &oracle.solve(&[0.0, 0.0, 1.0, l0]))
}

pub fn shifted_disk_case(rng: &mut ChaCha8Rng) -> f64 {
    let (r, x) = (rng.random_range(0.0..0.5), rng.random_range(0.0..0.5));
    let radius = rng.random_range(0.1..2.0);
    let p = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
    let (f, g, l) = project_shifted_disk(p[0], p[1], p[2], r, x, radius);
    let oracle = DenseOracle {
        weights: vec![1.0; 3],
        target: p.to_vec(),
        eq: vec![],
        slacks: vec![Slack::Disk { f: 0, g: 1, l: Some(2), r, x, radius }],
    };
    inf_dist(&[f, g, l], &oracle.solve(&[0.0, 0.0, 0.0]))
}

/// Aggregator set with two buses over two periods (12 variables).
fn la_oracle(set: &LaFeasibleSet, inst: &dlmp_core::NetworkInstance) -> (DenseOracle, Vec<f64>) {
    let lay = &set.layout;
    let n = set.dim();
    let mut eq = Vec::new();
    let mut slacks = Vec::new();
    let mut start = vec![0.0; n];
    for (j, &bus) in lay.buses().iter().enumerate() {
        let p = inst.profile(bus);
        let horizon = lay.horizon();
        let lo: f64 = p.p_min.iter().sum();
        let hi: f64 = p.p_max.iter().sum();
        let theta = 0.5 * ((p.energy - lo) / (hi - lo) + 1.0);
        let mut energy: Vec<(usize, f64)> = Vec::new();
        for k in 0..horizon {
            let ic = lay.pc(j, k);
            slacks.push(Slack::Linear { coef: vec![(ic, -1.0)], rhs: -p.p_min[k] });
            slacks.push(Slack::Linear { coef: vec![(ic, 1.0)], rhs: p.p_max[k] });
            start[ic] = p.p_min[k] + theta * (p.p_max[k] - p.p_min[k]);
            energy.push((ic, 1.0));
            let (ip, iq) = (lay.pp(j, k), lay.qp(j, k));
            let cap = p.prod_max(k);
            if cap > 1e-9 {
                let (rl, rh) = (p.rho_min(k), p.rho_max(k));
                slacks.push(Slack::Linear { coef: vec![(ip, -1.0)], rhs: 0.0 });
                slacks.push(Slack::Linear { coef: vec![(ip, 1.0)], rhs: cap });
                slacks.push(Slack::Linear { coef: vec![(ip, rl), (iq, -1.0)], rhs: 0.0 });
                slacks.push(Slack::Linear { coef: vec![(ip, -rh), (iq, 1.0)], rhs: 0.0 });
                start[ip] = 0.5 * cap;
                start[iq] = 0.5 * (rl + rh) * start[ip];
            } else {
                eq.push((vec![(ip, 1.0)], 0.0));
                eq.push((vec![(iq, 1.0)], 0.0));
            }
        }
        let coef: Vec<(usize, f64)> = energy.iter().map(|&(i, _)| (i, -1.0)).collect();
        slacks.push(Slack::Linear { coef, rhs: -p.energy });
    }
    (DenseOracle { weights: vec![1.0; n], target: vec![0.0; n], eq, slacks }, start)
}

fn la_setup(rng: &mut ChaCha8Rng) -> (LaFeasibleSet, DenseOracle, Vec<f64>) {
    let inst = random_radial_instance(rng, 3, 2);
    let set = LaFeasibleSet::new(&inst, &[1, 2]);
    let (oracle, start) = la_oracle(&set, &inst);
    (set, oracle, start)
}

fn random_la_point(rng: &mut ChaCha8Rng, set: &LaFeasibleSet) -> Vec<f64> {
    let lay = &set.layout;
    let mut p = vec![0.0; set.dim()];
    for j in 0..lay.buses().len() {
        for k in 0..lay.horizon() {
            p[lay.pc(j, k)] = rng.random_range(-0.2..0.4);
            p[lay.pp(j, k)] = rng.random_range(-0.1..0.2);
            p[lay.qp(j, k)] = rng.random_range(-0.1..0.1);
        }
    }
    p
}

pub fn la_projection_case(rng: &mut ChaCha8Rng) -> f64 {
    let (set, mut oracle, start) = la_setup(rng);
    let w: Vec<f64> = (0..set.dim()).map(|_| rng.random_range(0.5..3.0)).collect();
    let p = random_la_point(rng, &set);
    let mut got = p.clone();
    set.project_weighted(&mut got, &w).expect("feasible profile");
    oracle.weights = w;
    oracle.target = p;
    inf_dist(&got, &oracle.solve(&start))
}

pub fn la_prox_case(rng: &mut ChaCha8Rng) -> f64 {
    let (set, mut oracle, start) = la_setup(rng);
    let w: Vec<f64> = (0..set.dim()).map(|_| rng.random_range(0.5..5.0)).collect();
    let anchor = random_la_point(rng, &set);
    let grad: Vec<f64> = (0..set.dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let metric = BlockMetric::diagonal(w.clone()).unwrap();
    let got = prox_la(&set, &anchor, &grad, &metric, 1e-12).expect("feasible profile");
    oracle.target = anchor.iter().zip(&grad).zip(&w).map(|((a, g), w)| a - g / w).collect();
    oracle.weights = w;
    inf_dist(&got, &oracle.solve(&start))
}

/// Operator set of a single line over two periods (12 variables).
fn dso_oracle(set: &DsoFeasibleSet, rng: &mut ChaCha8Rng) -> (DenseOracle, Vec<f64>) {
    let lay = &set.layout;
    let n = set.dim();
    let e = set.affine.matrix.to_dense();
    let eq: Vec<(Vec<(usize, f64)>, f64)> = (0..e.nrows())
        .map(|r| ((0..n).filter(|&c| e[(r, c)] != 0.0).map(|c| (c, e[(r, c)])).collect(), set.affine.rhs[r]))
        .collect();
    let mut slacks: Vec<Slack> = set.cones.iter().flat_map(cone_slacks).collect();
    for t in 0..lay.horizon() {
        slacks.push(Slack::Linear { coef: vec![(lay.p0(t), 1.0)], rhs: 0.0 });
    }
    let oracle = DenseOracle { weights: vec![1.0; n], target: vec![0.0; n], eq, slacks };
    // free coordinates (f, g, l) drawn, the rest solved from the equations
    let free: Vec<usize> = (1..=lay.lines())
        .flat_map(|k| (0..lay.horizon()).flat_map(move |t| [lay.f(k, t), lay.g(k, t), lay.l(k, t)]))
        .collect();
    let bound: Vec<usize> = (0..n).filter(|c| !free.contains(c)).collect();
    let eb = DMatrix::from_fn(e.nrows(), bound.len(), |r, c| e[(r, bound[c])]);
    for _ in 0..1000 {
        let mut u = vec![0.0; n];
        for c in &set.cones {
            let [f, g, _, l] = c.index;
            u[f] = rng.random_range(-0.5..0.5) * c.s_max;
            u[g] = rng.random_range(-0.5..0.5) * c.s_max;
            u[l] = 2.0 * (u[f] * u[f] + u[g] * u[g]) + rng.random_range(0.001..0.05);
        }
        let mut rhs = DVector::from_column_slice(&set.affine.rhs);
        for r in 0..e.nrows() {
            for &c in &free {
                rhs[r] -= e[(r, c)] * u[c];
            }
        }
        let sol = eb.clone().svd(true, true).solve(&rhs, 1e-14).expect("least squares");
        for (k, &c) in bound.iter().enumerate() {
            u[c] = sol[k];
        }
        if oracle.barrier_value(&u, 1.0).is_some() && set.affine_violation(&u) < 1e-12 {
            return (oracle, u);
        }
    }
    panic!("no strictly feasible operator point found");
}

pub fn dso_prox_case(rng: &mut ChaCha8Rng) -> f64 {
    let inst = random_radial_instance(rng, 2, 2);
    let set = DsoFeasibleSet::new(&inst);
    let (mut oracle, start) = dso_oracle(&set, rng);
    let n = set.dim();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
    let anchor: Vec<f64> = start.iter().map(|s| s + rng.random_range(-0.5..0.5)).collect();
    let grad: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let metric = BlockMetric::diagonal(w.clone()).unwrap();
    let mut ws = DsoProxWorkspace::new(set);
    let got = match ws.prox(&anchor, &grad, &metric, 1e-12) {
        Ok(o) => o.point,
        Err(dlmp_core::projections::ProjectionError::NotConverged { point, .. }) => point,
        Err(e) => panic!("operator prox failed: {e}"),
    };
    oracle.target = anchor.iter().zip(&grad).zip(&w).map(|((a, g), w)| a - g / w).collect();
    oracle.weights = w;
    inf_dist(&got, &oracle.solve(&start))
}

/// Largest deviation per operation over `per_kind` random cases each.
pub fn projection_sweep(per_kind: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds: [(&'static str, fn(&mut ChaCha8Rng) -> f64); 5] = [
        ("line conic set projection", soc_case),
        ("shifted disk projection", shifted_disk_case),
        ("aggregator weighted projection", la_projection_case),
        ("aggregator prox", la_prox_case),
        ("operator prox", dso_prox_case),
    ];
    kinds
        .iter()
        .map(|(name, case)| {
            let worst = (0..per_kind).map(|_| case(&mut rng)).fold(0.0f64, f64::max);
            (*name, worst)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// small coupled problems

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> SparseMatrix {
    let m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    SparseMatrix::from_dense(&m)
}

/// A random sampling over `d` blocks: a few random subsets, every block covered.
pub fn random_sampling(rng: &mut impl Rng, d: usize) -> SamplingScheme {
    let mut subsets: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
    for _ in 0..rng.random_range(1..4) {
        let s: Vec<usize> = (0..d).filter(|_| rng.random_bool(0.6)).collect();
        if !s.is_empty() {
            subsets.push(s);
        }
    }
    let raw: Vec<f64> = subsets.iter().map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let rest: f64 = probs[1..].iter().sum();
    probs[0] = 1.0 - rest;
    SamplingScheme::new(d, subsets, probs).expect("valid sampling")
}

pub fn random_vectors(rng: &mut impl Rng, dims: &[usize]) -> Vec<Vec<f64>> {
    dims.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}
