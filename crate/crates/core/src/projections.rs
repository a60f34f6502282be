//! Proximal steps over the block feasible sets.
//!
//! Aggregator sets are polyhedral and separable per bus, so their prox under
//! a diagonal metric is computed exactly. The operator set combines affine
//! voltage-drop and root-balance equations with per-line conic sets; its prox
//! is computed by a warm-started ADMM splitting between the affine part and
//! the separable conic part.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::grid::NetworkInstance;
use crate::opf::{build_dso_affine, DsoAffine, DsoLayout, LaLayout};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProjectionError {
    #[error("inner solver stopped after {iterations} iterations with residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64, point: Vec<f64> },
    #[error("profile of bus {bus} cannot meet its energy demand")]
    InfeasibleProfile { bus: usize },
    #[error("expected dimension {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("metric is not positive definite")]
    Metric,
}

// ---------------------------------------------------------------------------
// scalar root finding

/// Safeguarded Newton on a bracket `[lo, hi]` with `f(lo) <= 0 <= f(hi)`.
/// `f` returns the value and the derivative.
fn bracketed_newton(f: impl Fn(f64) -> (f64, f64), mut lo: f64, mut hi: f64) -> f64 {
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        let newton = x - fx / dfx;
        x = if dfx.is_finite() && dfx != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    x
}

// ---------------------------------------------------------------------------
// elementary sets

/// Euclidean projection onto `{f^2 + g^2 <= v * l, v >= 0, l >= 0}`.
///
/// With `r = |(f, g)|`, `s = (v + l)/√2`, `d = (v - l)/√2` the set reads
/// `2 r^2 + d^2 <= s^2, s >= 0`. Stationarity gives `r = r_a/(1+2μ)`,
/// `d = d_a/(1+μ)`, `s = s_a/(1-μ)` for a single multiplier μ, found by a
/// monotone scalar root search.
pub fn project_rotated_soc(point: [f64; 4]) -> [f64; 4] {
    let [f, g, v, l] = point;
    let r2 = f * f + g * g;
    if v >= 0.0 && l >= 0.0 && r2 <= v * l {
        return point;
    }
    if v <= 0.0 && l <= 0.0 && r2 <= 4.0 * v * l {
        return [0.0; 4];
    }
    let ra = r2.sqrt();
    if ra == 0.0 {
        return [0.0, 0.0, v.max(0.0), l.max(0.0)];
    }
    let sqrt2 = std::f64::consts::SQRT_2;
    let sa = (v + l) / sqrt2;
    let da = (v - l) / sqrt2;

    let g_fn = |mu: f64| {
        let a = 1.0 + 2.0 * mu;
        let b = 1.0 + mu;
        let g = 2.0 * ra * ra / (a * a) + da * da / (b * b);
        let dg = -8.0 * ra * ra / (a * a * a) - 2.0 * da * da / (b * b * b);
        (g, dg)
    };
    // H(μ) = s_a^2 - (1-μ)^2 G(μ)
    let h = |mu: f64| {
        let (g, dg) = g_fn(mu);
        let c = 1.0 - mu;
        (sa * sa - c * c * g, 2.0 * c * g - c * c * dg)
    };
    let mu = if sa > 0.0 {
        // H increases from H(0) < 0 to H(1) = s_a^2
        bracketed_newton(h, 0.0, 1.0)
    } else if sa < 0.0 {
        // H decreases from H(1) = s_a^2 towards s_a^2 - r_a^2/2 - d_a^2 < 0
        let mut hi = 2.0;
        while h(hi).0 > 0.0 && hi < 1e300 {
            hi *= 2.0;
        }
        let neg = |m: f64| {
            let (v, d) = h(m);
            (-v, -d)
        };
        bracketed_newton(neg, 1.0, hi)
    } else {
        1.0
    };
    let scale = 1.0 / (1.0 + 2.0 * mu);
    let r = ra * scale;
    let d = da / (1.0 + mu);
    let s = (2.0 * r * r + d * d).sqrt();
    let mut vo = ((s + d) / sqrt2).max(0.0);
    let mut lo = ((s - d) / sqrt2).max(0.0);
    // rounding in s +- d can leave the point a hair outside
    let (fo, go) = (f * scale, g * scale);
    let need = fo * fo + go * go;
    if vo * lo < need {
        let fix = (need / (vo * lo).max(f64::MIN_POSITIVE)).sqrt();
        if vo >= lo {
            vo *= fix;
        } else {
            lo *= fix;
        }
    }
    [fo, go, vo, lo]
}

/// Projection of `(f, g)` onto the disk of radius `radius`.
pub fn project_disk(f: f64, g: f64, radius: f64) -> (f64, f64) {
    let n = f.hypot(g);
    if n <= radius {
        (f, g)
    } else {
        let s = radius / n;
        (f * s, g * s)
    }
}

/// Projection of `(f, g, l)` onto `{|(f - r l, g - x l)| <= radius}`.
pub fn project_shifted_disk(f: f64, g: f64, l: f64, r: f64, x: f64, radius: f64) -> (f64, f64, f64) {
    let (bf, bg) = (f - r * l, g - x * l);
    let norm = bf.hypot(bg);
    if norm <= radius {
        return (f, g, l);
    }
    // B B^T = I + c c^T with c = (r, x): eigenvalues 1 + |c|^2 along c, 1 across.
    let cn = r.hypot(x);
    let (b1, b2, s1) = if cn > 0.0 {
        let (ux, uy) = (r / cn, x / cn);
        (ux * bf + uy * bg, -uy * bf + ux * bg, 1.0 + cn * cn)
    } else {
        (bf, bg, 1.0)
    };
    let phi = |mu: f64| {
        let a = 1.0 + mu * s1;
        let b = 1.0 + mu;
        let val = b1 * b1 / (a * a) + b2 * b2 / (b * b) - radius * radius;
        let der = -2.0 * b1 * b1 * s1 / (a * a * a) - 2.0 * b2 * b2 / (b * b * b);
        (val, der)
    };
    // phi is convex and decreasing: Newton from the left never overshoots.
    let mut mu = 0.0;
    for _ in 0..100 {
        let (val, der) = phi(mu);
        if val <= 0.0 {
            break;
        }
        let next = mu - val / der;
        if !(next > mu) || (next - mu) <= 1e-16 * next {
            mu = next.max(mu);
            break;
        }
        mu = next;
    }
    // B u = (I + μ B B^T)^{-1} B w, then u = w - μ B^T (B u)
    let (c1, c2) = (b1 / (1.0 + mu * s1), b2 / (1.0 + mu));
    let (buf, bug) = if cn > 0.0 {
        let (ux, uy) = (r / cn, x / cn);
        (ux * c1 - uy * c2, uy * c1 + ux * c2)
    } else {
        (c1, c2)
    };
    let mut fo = f - mu * buf;
    let mut go = g - mu * bug;
    let lo = l + mu * (r * buf + x * bug);
    // pull the residual exactly onto the boundary
    let (ef, eg) = (fo - r * lo, go - x * lo);
    let en = ef.hypot(eg);
    if en > radius {
        let s = radius / en;
        fo = r * lo + ef * s;
        go = x * lo + eg * s;
    }
    (fo, go, lo)
}

/// The conic set of one line in one period: rotated cone, the two
/// apparent-power disks at both ends and the voltage box.
#[derive(Debug, Clone, PartialEq)]
pub struct SocCone {
    /// Positions of `(f, g, v, l)` in the operator block.
    pub index: [usize; 4],
    pub r: f64,
    pub x: f64,
    pub s_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

const MEMBER_TOL: f64 = 1e-12;

impl SocCone {
    fn project_one(&self, set: usize, p: [f64; 4]) -> [f64; 4] {
        let [f, g, v, l] = p;
        match set {
            0 => project_rotated_soc(p),
            1 => {
                let (f, g) = project_disk(f, g, self.s_max);
                [f, g, v, l]
            }
            2 => {
                let (f, g, l) = project_shifted_disk(f, g, l, self.r, self.x, self.s_max);
                [f, g, v, l]
            }
            _ => [f, g, v.clamp(self.v_min, self.v_max), l],
        }
    }

    /// Largest constraint violation of a point (0 inside).
    pub fn violation(&self, p: [f64; 4]) -> f64 {
        let [f, g, v, l] = p;
        let cone = (f * f + g * g - v * l).max(0.0).max(-v).max(-l);
        let d1 = f.hypot(g) - self.s_max;
        let d2 = (f - self.r * l).hypot(g - self.x * l) - self.s_max;
        let vb = (self.v_min - v).max(v - self.v_max);
        cone.max(d1).max(d2).max(vb).max(0.0)
    }

    fn member(&self, p: [f64; 4]) -> bool {
        let scale = 1.0 + p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.violation(p) <= MEMBER_TOL * scale * scale
    }

    /// Euclidean projection onto the intersection.
    pub fn project(&self, p: [f64; 4]) -> [f64; 4] {
        if self.member(p) {
            return p;
        }
        // A single active set: its projection is the answer when it lies in
        // all the others.
        for set in 0..4 {
            let q = self.project_one(set, p);
            if self.member(q) {
                return q;
            }
        }
        self.dykstra(p)
    }

    fn dykstra(&self, p: [f64; 4]) -> [f64; 4] {
        let mut x = p;
        let mut incr = [[0.0; 4]; 4];
        for _ in 0..20_000 {
            let start = x;
            for (set, inc) in incr.iter_mut().enumerate() {
                let y = std::array::from_fn(|i| x[i] + inc[i]);
                let q = self.project_one(set, y);
                *inc = std::array::from_fn(|i| y[i] - q[i]);
                x = q;
            }
            let change = (0..4).fold(0.0f64, |m, i| m.max((x[i] - start[i]).abs()));
            if change <= 1e-15 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
                break;
            }
        }
        x
    }
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, PartialEq)]
pub enum MetricKind {
    Diagonal(Vec<f64>),
    /// `diag(diagonal) + sigma * A^T A`.
    Exact { diagonal: Vec<f64>, sigma: f64, coupling: SparseMatrix },
}

/// A positive-definite block metric with a lower bound on its spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMetric {
    pub kind: MetricKind,
    pub min_eigenvalue: f64,
}

impl BlockMetric {
    pub fn diagonal(weights: Vec<f64>) -> Result<Self, ProjectionError> {
        let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(ProjectionError::Metric);
        }
        Ok(Self { kind: MetricKind::Diagonal(weights), min_eigenvalue: min })
    }

    pub fn scalar(weight: f64, dim: usize) -> Result<Self, ProjectionError> {
        Self::diagonal(vec![weight; dim])
    }

    pub fn exact(diagonal: Vec<f64>, sigma: f64, coupling: SparseMatrix) -> Result<Self, ProjectionError> {
        if coupling.cols() != diagonal.len() || !(sigma >= 0.0) {
            return Err(ProjectionError::Metric);
        }
        let min = diagonal.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(ProjectionError::Metric);
        }
        Ok(Self { kind: MetricKind::Exact { diagonal, sigma, coupling }, min_eigenvalue: min })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            MetricKind::Diagonal(w) => w.len(),
            MetricKind::Exact { diagonal, .. } => diagonal.len(),
        }
    }

    /// The metric multiplied by a positive factor.
    pub fn scaled(&self, factor: f64) -> Self {
        let kind = match &self.kind {
            MetricKind::Diagonal(w) => MetricKind::Diagonal(w.iter().map(|v| v * factor).collect()),
            MetricKind::Exact { diagonal, sigma, coupling } => MetricKind::Exact {
                diagonal: diagonal.iter().map(|v| v * factor).collect(),
                sigma: sigma * factor,
                coupling: coupling.clone(),
            },
        };
        Self { kind, min_eigenvalue: self.min_eigenvalue * factor }
    }

    pub fn diagonal_weights(&self) -> Option<&[f64]> {
        match &self.kind {
            MetricKind::Diagonal(w) => Some(w),
            MetricKind::Exact { .. } => None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            MetricKind::Diagonal(w) => w.iter().zip(x).map(|(a, b)| a * b).collect(),
            MetricKind::Exact { diagonal, sigma, coupling } => {
                let ax = coupling.mul(x);
                let mut out = coupling.mul_transpose(&ax);
                for ((o, d), xi) in out.iter_mut().zip(diagonal).zip(x) {
                    *o = *o * sigma + d * xi;
                }
                out
            }
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match &self.kind {
            MetricKind::Diagonal(w) => DMatrix::from_diagonal(&DVector::from_column_slice(w)),
            MetricKind::Exact { diagonal, sigma, coupling } => {
                let a = coupling.to_dense();
                let mut m = a.transpose() * a * *sigma;
                for (i, d) in diagonal.iter().enumerate() {
                    m[(i, i)] += d;
                }
                m
            }
        }
    }

    pub fn norm_sq(&self, x: &[f64]) -> f64 {
        self.apply(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    fn mean_diagonal(&self) -> f64 {
        let d = match &self.kind {
            MetricKind::Diagonal(w) => w,
            MetricKind::Exact { diagonal, .. } => diagonal,
        };
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }
}

fn check_dims(expected: usize, found: usize) -> Result<(), ProjectionError> {
    if expected != found {
        return Err(ProjectionError::Dimension { expected, found });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// aggregator sets

/// Projection of `c` onto `{lo <= x <= hi, sum x >= energy}` in the norm
/// weighted by `w`. Returns the point and the multiplier of the energy
/// constraint.
pub fn project_energy_box(
    c: &[f64],
    w: &[f64],
    lo: &[f64],
    hi: &[f64],
    energy: f64,
) -> Option<(Vec<f64>, f64)> {
    let at = |mu: f64| -> Vec<f64> {
        c.iter()
            .zip(w)
            .zip(lo.iter().zip(hi))
            .map(|((&ci, &wi), (&l, &h))| (ci + mu / wi).clamp(l, h))
            .collect()
    };
    let total = |x: &[f64]| x.iter().sum::<f64>();
    let x0 = at(0.0);
    if total(&x0) >= energy {
        return Some((x0, 0.0));
    }
    if hi.iter().sum::<f64>() < energy - 1e-12 {
        return None;
    }
    // S(μ) is piecewise linear and nondecreasing; walk its breakpoints.
    let mut bps: Vec<f64> = c
        .iter()
        .zip(w)
        .zip(lo.iter().zip(hi))
        .flat_map(|((&ci, &wi), (&l, &h))| [wi * (l - ci), wi * (h - ci)])
        .filter(|&b| b > 0.0)
        .collect();
    bps.sort_by(|a, b| a.total_cmp(b));
    let (mut mu_a, mut s_a) = (0.0, total(&x0));
    for &mu_b in &bps {
        let s_b = total(&at(mu_b));
        if s_b >= energy {
            let mu = if s_b > s_a { mu_a + (energy - s_a) * (mu_b - mu_a) / (s_b - s_a) } else { mu_b };
            return Some((at(mu), mu));
        }
        (mu_a, s_a) = (mu_b, s_b);
    }
    let last = bps.last().copied().unwrap_or(0.0);
    Some((at(last), last))
}

fn project_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return a;
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    (a.0 + t * dx, a.1 + t * dy)
}

/// Projection of `(pp, qp)` onto `{0 <= pp <= cap, rho_lo pp <= qp <= rho_hi pp}`
/// in the norm with weights `(wp, wq)`.
pub fn project_production(pp: f64, qp: f64, cap: f64, rho_lo: f64, rho_hi: f64, wp: f64, wq: f64) -> (f64, f64) {
    if pp >= 0.0 && pp <= cap && qp >= rho_lo * pp && qp <= rho_hi * pp {
        return (pp, qp);
    }
    let (sp, sq) = (wp.sqrt(), wq.sqrt());
    let p = (pp * sp, qp * sq);
    let v0 = (0.0, 0.0);
    let v1 = (cap * sp, rho_lo * cap * sq);
    let v2 = (cap * sp, rho_hi * cap * sq);
    let mut best = v0;
    let mut best_d = f64::INFINITY;
    for (a, b) in [(v0, v1), (v1, v2), (v0, v2)] {
        let q = project_segment(p, a, b);
        let d = (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2);
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    (best.0 / sp, best.1 / sq)
}

#[derive(Debug, Clone, PartialEq)]
struct LaBus {
    bus: usize,
    p_min: Vec<f64>,
    p_max: Vec<f64>,
    energy: f64,
    prod_max: Vec<f64>,
    rho_min: Vec<f64>,
    rho_max: Vec<f64>,
}

/// Feasible set of one aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct LaFeasibleSet {
    pub layout: LaLayout,
    buses: Vec<LaBus>,
}

impl LaFeasibleSet {
    pub fn new(inst: &NetworkInstance, buses: &[usize]) -> Self {
        let t = inst.horizon();
        let data = buses
            .iter()
            .map(|&n| {
                let p = inst.profile(n);
                LaBus {
                    bus: n,
                    p_min: p.p_min.clone(),
                    p_max: p.p_max.clone(),
                    energy: p.energy,
                    prod_max: (0..t).map(|k| p.prod_max(k)).collect(),
                    rho_min: (0..t).map(|k| p.rho_min(k)).collect(),
                    rho_max: (0..t).map(|k| p.rho_max(k)).collect(),
                }
            })
            .collect();
        Self { layout: LaLayout::new(buses.to_vec(), t), buses: data }
    }

    pub fn for_instance(inst: &NetworkInstance) -> Vec<Self> {
        inst.aggregators().iter().map(|b| Self::new(inst, b)).collect()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Projection in the norm with diagonal weights `w`, in place.
    pub fn project_weighted(&self, x: &mut [f64], w: &[f64]) -> Result<(), ProjectionError> {
        check_dims(self.dim(), x.len())?;
        check_dims(self.dim(), w.len())?;
        let lay = &self.layout;
        let t = lay.horizon();
        for (j, b) in self.buses.iter().enumerate() {
            let idx: Vec<usize> = (0..t).map(|k| lay.pc(j, k)).collect();
            let c: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let wc: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            let (pc, _) = project_energy_box(&c, &wc, &b.p_min, &b.p_max, b.energy)
                .ok_or(ProjectionError::InfeasibleProfile { bus: b.bus })?;
            for (&i, v) in idx.iter().zip(pc) {
                x[i] = v;
            }
            for k in 0..t {
                let (ip, iq) = (lay.pp(j, k), lay.qp(j, k));
                let (pp, qp) = project_production(
                    x[ip],
                    x[iq],
                    b.prod_max[k],
                    b.rho_min[k],
                    b.rho_max[k],
                    w[ip],
                    w[iq],
                );
                x[ip] = pp;
                x[iq] = qp;
            }
        }
        Ok(())
    }

    pub fn project(&self, x: &mut [f64]) -> Result<(), ProjectionError> {
        self.project_weighted(x, &vec![1.0; x.len()])
    }

    /// Largest constraint violation.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lay = &self.layout;
        let mut worst = 0.0f64;
        for (j, b) in self.buses.iter().enumerate() {
            let mut sum = 0.0;
            for k in 0..lay.horizon() {
                let pc = x[lay.pc(j, k)];
                let (pp, qp) = (x[lay.pp(j, k)], x[lay.qp(j, k)]);
                sum += pc;
                worst = worst
                    .max(b.p_min[k] - pc)
                    .max(pc - b.p_max[k])
                    .max(-pp)
                    .max(pp - b.prod_max[k])
                    .max(b.rho_min[k] * pp - qp)
                    .max(qp - b.rho_max[k] * pp);
            }
            worst = worst.max(b.energy - sum);
        }
        worst
    }
}

/// `argmin <grad, u> + 1/2 |u - anchor|_M^2` over an aggregator's set.
///
/// Diagonal metrics are solved exactly; the exact metric goes through
/// [`metric_prox_admm`].
pub fn prox_la(
    set: &LaFeasibleSet,
    anchor: &[f64],
    grad: &[f64],
    metric: &BlockMetric,
    tol: f64,
) -> Result<Vec<f64>, ProjectionError> {
    check_dims(set.dim(), anchor.len())?;
    check_dims(set.dim(), grad.len())?;
    check_dims(set.dim(), metric.dim())?;
    match metric.diagonal_weights() {
        Some(w) => {
            let mut x: Vec<f64> = anchor.iter().zip(grad).zip(w).map(|((a, g), w)| a - g / w).collect();
            set.project_weighted(&mut x, w)?;
            Ok(x)
        }
        None => {
            let out = metric_prox_admm(&metric.dense(), anchor, grad, |z| set.project(z), tol, 50_000)?;
            Ok(out.point)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxOutcome {
    pub point: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// ADMM for `min <q, u> + 1/2 (u - x)^T M (u - x)` over a set with a cheap
/// Euclidean projection, used for non-diagonal metrics.
pub fn metric_prox_admm(
    m: &DMatrix<f64>,
    anchor: &[f64],
    grad: &[f64],
    mut project: impl FnMut(&mut [f64]) -> Result<(), ProjectionError>,
    tol: f64,
    max_iterations: usize,
) -> Result<ProxOutcome, ProjectionError> {
    let n = anchor.len();
    let rho = (0..n).map(|i| m[(i, i)]).sum::<f64>() / n.max(1) as f64;
    let mut shifted = m.clone();
    for i in 0..n {
        shifted[(i, i)] += rho;
    }
    let chol = Cholesky::new(shifted).ok_or(ProjectionError::Metric)?;
    let base = m * DVector::from_column_slice(anchor) - DVector::from_column_slice(grad);
    let mut z = anchor.to_vec();
    project(&mut z)?;
    let mut lam = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iterations {
        let rhs = DVector::from_fn(n, |i, _| base[i] + rho * (z[i] - lam[i]));
        let u = chol.solve(&rhs);
        let mut znew: Vec<f64> = (0..n).map(|i| u[i] + lam[i]).collect();
        project(&mut znew)?;
        let mut primal = 0.0f64;
        let mut dual = 0.0f64;
        for i in 0..n {
            let r = u[i] - znew[i];
            lam[i] += r;
            primal = primal.max(r.abs());
            dual = dual.max((znew[i] - z[i]).abs());
        }
        z = znew;
        residual = primal.max(dual);
        if residual <= tol {
            return Ok(ProxOutcome { point: z, residual, iterations: it });
        }
    }
    Err(ProjectionError::NotConverged { iterations: max_iterations, residual, point: z })
}

// ---------------------------------------------------------------------------
// operator set

/// The operator's feasible set: affine equations, conic line sets, and
/// `p0 <= 0`.
#[derive(Debug, Clone)]
pub struct DsoFeasibleSet {
    pub layout: DsoLayout,
    pub affine: DsoAffine,
    pub cones: Vec<SocCone>,
}

impl DsoFeasibleSet {
    pub fn new(inst: &NetworkInstance) -> Self {
        let layout = DsoLayout::for_instance(inst);
        let mut cones = Vec::new();
        for n in 1..=inst.num_lines() {
            let b = inst.bus(n);
            for t in 0..inst.horizon() {
                cones.push(SocCone {
                    index: [layout.f(n, t), layout.g(n, t), layout.v(n, t), layout.l(n, t)],
                    r: b.r,
                    x: b.x,
                    s_max: b.s_max,
                    v_min: b.v_min,
                    v_max: b.v_max,
                });
            }
        }
        Self { layout, affine: build_dso_affine(inst), cones }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Euclidean projection onto the separable (non-affine) part.
    pub fn project_separable(&self, x: &mut [f64]) {
        for t in 0..self.layout.horizon() {
            let i = self.layout.p0(t);
            x[i] = x[i].min(0.0);
        }
        for cone in &self.cones {
            let p = cone.index.map(|i| x[i]);
            let q = cone.project(p);
            for (k, &i) in cone.index.iter().enumerate() {
                x[i] = q[k];
            }
        }
    }

    pub fn affine_violation(&self, x: &[f64]) -> f64 {
        let ex = self.affine.matrix.mul(x);
        ex.iter().zip(&self.affine.rhs).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn separable_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for t in 0..self.layout.horizon() {
            worst = worst.max(x[self.layout.p0(t)]);
        }
        for cone in &self.cones {
            worst = worst.max(cone.violation(cone.index.map(|i| x[i])));
        }
        worst
    }

    pub fn violation(&self, x: &[f64]) -> f64 {
        self.affine_violation(x).max(self.separable_violation(x))
    }
}

enum AffineSolver {
    /// Schur complement `E D^{-1} E^T` for a diagonal `D = M + rho I`.
    Diagonal { inv_d: Vec<f64>, schur: Cholesky<f64, Dyn> },
    Dense { lu: LU<f64, Dyn, Dyn> },
}

/// Cached factorizations and warm-start state for repeated operator prox
/// evaluations with a fixed metric.
pub struct DsoProxWorkspace {
    set: DsoFeasibleSet,
    e_dense: DMatrix<f64>,
    cached: Option<(BlockMetric, f64, AffineSolver)>,
    z: Option<Vec<f64>>,
    lam: Vec<f64>,
    rho: Option<f64>,
    pub max_iterations: usize,
    last_iterations: usize,
}

impl Clone for DsoProxWorkspace {
    fn clone(&self) -> Self {
        Self {
            set: self.set.clone(),
            e_dense: self.e_dense.clone(),
            cached: None,
            z: self.z.clone(),
            lam: self.lam.clone(),
            rho: self.rho,
            max_iterations: self.max_iterations,
            last_iterations: self.last_iterations,
        }
    }
}

impl std::fmt::Debug for DsoProxWorkspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DsoProxWorkspace")
            .field("dim", &self.set.dim())
            .field("rho", &self.rho)
            .field("last_iterations", &self.last_iterations)
            .finish()
    }
}

impl DsoProxWorkspace {
    pub fn new(set: DsoFeasibleSet) -> Self {
        let e_dense = set.affine.matrix.to_dense();
        let n = set.dim();
        Self {
            set,
            e_dense,
            cached: None,
            z: None,
            lam: vec![0.0; n],
            rho: None,
            max_iterations: 100_000,
            last_iterations: 0,
        }
    }

    pub fn for_instance(inst: &NetworkInstance) -> Self {
        Self::new(DsoFeasibleSet::new(inst))
    }

    pub fn set(&self) -> &DsoFeasibleSet {
        &self.set
    }

    /// Inner iterations used by the latest call.
    pub fn last_iterations(&self) -> usize {
        self.last_iterations
    }

    /// Forget the warm start.
    pub fn reset(&mut self) {
        self.z = None;
        self.lam.iter_mut().for_each(|v| *v = 0.0);
        self.rho = None;
    }

    fn factor(&mut self, metric: &BlockMetric, rho: f64) -> Result<(), ProjectionError> {
        if let Some((m, r, _)) = &self.cached {
            if *r == rho && m == metric {
                return Ok(());
            }
        }
        let e = &self.e_dense;
        let solver = match metric.diagonal_weights() {
            Some(w) => {
                let inv_d: Vec<f64> = w.iter().map(|v| 1.0 / (v + rho)).collect();
                let scaled = DMatrix::from_fn(e.nrows(), e.ncols(), |i, j| e[(i, j)] * inv_d[j]);
                let schur = Cholesky::new(&scaled * e.transpose()).ok_or(ProjectionError::Metric)?;
                AffineSolver::Diagonal { inv_d, schur }
            }
            None => {
                let n = e.ncols();
                let m = e.nrows();
                let mut kkt = DMatrix::zeros(n + m, n + m);
                let dense = metric.dense();
                kkt.view_mut((0, 0), (n, n)).copy_from(&dense);
                for i in 0..n {
                    kkt[(i, i)] += rho;
                }
                kkt.view_mut((n, 0), (m, n)).copy_from(e);
                kkt.view_mut((0, n), (n, m)).copy_from(&e.transpose());
                AffineSolver::Dense { lu: kkt.lu() }
            }
        };
        self.cached = Some((metric.clone(), rho, solver));
        Ok(())
    }

    /// Solves `(M + rho I) u + E^T nu = rhs, E u = e`.
    fn solve_affine(&self, rhs: &[f64]) -> Vec<f64> {
        let (_, _, solver) = self.cached.as_ref().expect("factorized");
        let e = &self.e_dense;
        let erhs = &self.set.affine.rhs;
        match solver {
            AffineSolver::Diagonal { inv_d, schur } => {
                let y: Vec<f64> = rhs.iter().zip(inv_d).map(|(r, d)| r * d).collect();
                let ey = e * DVector::from_column_slice(&y);
                let nu = schur.solve(&DVector::from_fn(e.nrows(), |i, _| ey[i] - erhs[i]));
                let etnu = e.transpose() * nu;
                y.iter().zip(inv_d).enumerate().map(|(i, (yi, d))| yi - d * etnu[i]).collect()
            }
            AffineSolver::Dense { lu } => {
                let n = e.ncols();
                let full = DVector::from_fn(n + e.nrows(), |i, _| if i < n { rhs[i] } else { erhs[i - n] });
                let sol = lu.solve(&full).expect("KKT system is nonsingular");
                sol.rows(0, n).iter().copied().collect()
            }
        }
    }

    /// `argmin <grad, u> + 1/2 |u - anchor|_M^2` over the operator set, to
    /// inner fixed-point residual `tol`. The returned point satisfies the
    /// conic constraints exactly and the affine ones to within `tol`.
    pub fn prox(
        &mut self,
        anchor: &[f64],
        grad: &[f64],
        metric: &BlockMetric,
        tol: f64,
    ) -> Result<ProxOutcome, ProjectionError> {
        let n = self.set.dim();
        check_dims(n, anchor.len())?;
        check_dims(n, grad.len())?;
        check_dims(n, metric.dim())?;
        let mut rho = self.rho.unwrap_or_else(|| metric.mean_diagonal());
        self.factor(metric, rho)?;

        let manchor = metric.apply(anchor);
        let base: Vec<f64> = manchor.iter().zip(grad).map(|(a, g)| a - g).collect();
        let mut z = match self.z.take() {
            Some(z) => z,
            None => {
                let mut z = anchor.to_vec();
                self.set.project_separable(&mut z);
                z
            }
        };
        let mut lam = std::mem::take(&mut self.lam);
        let mut residual = f64::INFINITY;
        let mut rhs = vec![0.0; n];
        for it in 1..=self.max_iterations {
            for i in 0..n {
                rhs[i] = base[i] + rho * (z[i] - lam[i]);
            }
            let u = self.solve_affine(&rhs);
            let mut znew: Vec<f64> = u.iter().zip(&lam).map(|(a, b)| a + b).collect();
            self.set.project_separable(&mut znew);
            let mut primal = 0.0f64;
            let mut dual = 0.0f64;
            for i in 0..n {
                let r = u[i] - znew[i];
                lam[i] += r;
                primal = primal.max(r.abs());
                dual = dual.max((znew[i] - z[i]).abs());
            }
            z = znew;
            residual = primal.max(dual);
            if residual <= tol {
                self.last_iterations = it;
                self.z = Some(z.clone());
                self.lam = lam;
                self.rho = Some(rho);
                return Ok(ProxOutcome { point: z, residual, iterations: it });
            }
            // residual balancing; lam is scaled by 1/rho so it is rescaled too
            if it % 25 == 0 {
                let factor = if primal > 10.0 * dual {
                    2.0
                } else if dual > 10.0 * primal {
                    0.5
                } else {
                    1.0
                };
                if factor != 1.0 {
                    rho *= factor;
                    lam.iter_mut().for_each(|v| *v /= factor);
                    self.factor(metric, rho)?;
                }
            }
        }
        self.last_iterations = self.max_iterations;
        self.z = Some(z.clone());
        self.lam = lam;
        self.rho = Some(rho);
        Err(ProjectionError::NotConverged { iterations: self.max_iterations, residual, point: z })
    }
}

/// Convenience wrapper around a fresh workspace.
pub fn prox_dso(
    inst: &NetworkInstance,
    anchor: &[f64],
    grad: &[f64],
    metric: &BlockMetric,
    tol: f64,
) -> Result<ProxOutcome, ProjectionError> {
    DsoProxWorkspace::for_instance(inst).prox(anchor, grad, metric, tol)
}

/// Inner tolerance at outer iteration `k`.
pub fn inner_tolerance(k: usize) -> f64 {
    let kk = (k + 1) as f64;
    (1e-4 / (kk * kk)).max(1e-10)
}

/// How tightly inner prox solves are carried out.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InnerTolerance {
    /// `max(1e-10, 1e-4 / (k+1)^2)`.
    #[default]
    Schedule,
    Fixed(f64),
}

impl InnerTolerance {
    pub fn at(self, k: usize) -> f64 {
        match self {
            InnerTolerance::Schedule => inner_tolerance(k),
            InnerTolerance::Fixed(t) => t,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soc_examples() {
        assert_eq!(project_rotated_soc([0.0, 0.0, 1.0, 1.0]), [0.0, 0.0, 1.0, 1.0]);
        let p = project_rotated_soc([1.0, 0.0, 0.0, 0.0]);
        for (a, b) in p.iter().zip([1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
        assert!((p[0] * p[0] - p[2] * p[3]).abs() < 1e-14);
        let q = project_rotated_soc([-1.0, 0.0, 0.0, 0.0]);
        assert_eq!(q[0], -p[0]);
        assert_eq!(&q[1..], &p[1..]);
        assert_eq!(project_rotated_soc([0.1, 0.1, -1.0, -1.0]), [0.0; 4]);
    }

    #[test]
    fn soc_projection_is_tight_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let q = project_rotated_soc(p);
            assert!(q[2] >= 0.0 && q[3] >= 0.0);
            assert!(q[0] * q[0] + q[1] * q[1] <= q[2] * q[3] + 1e-12, "{p:?} -> {q:?}");
            let again = project_rotated_soc(q);
            for (a, b) in again.iter().zip(q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifted_disk_lands_on_boundary() {
        let (f, g, l) = project_shifted_disk(1.0, 1.0, 0.5, 0.1, 0.2, 0.3);
        let n = (f - 0.1 * l).hypot(g - 0.2 * l);
        assert!((n - 0.3).abs() < 1e-12);
        assert_eq!(project_shifted_disk(0.1, 0.0, 0.0, 0.1, 0.2, 0.3), (0.1, 0.0, 0.0));
    }

    #[test]
    fn energy_box_meets_demand() {
        // bus 3 of the benchmark
        let (x, mu) = project_energy_box(&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], &[0.020, 0.035], 0.047).unwrap();
        assert!((x.iter().sum::<f64>() - 0.047).abs() < 1e-15);
        assert!(mu > 0.0);
        assert!(project_energy_box(&[0.0], &[1.0], &[0.0], &[0.1], 0.2).is_none());
    }

    #[test]
    fn production_degenerate_cases() {
        let (pp, qp) = project_production(0.3, 0.7, 0.438, 0.0, 0.0, 1.0, 1.0);
        assert_eq!(qp, 0.0);
        assert!((pp - 0.3).abs() < 1e-15);
        assert_eq!(project_production(1.0, 1.0, 0.0, -1.0, 1.0, 1.0, 1.0), (0.0, 0.0));
        assert_eq!(project_production(0.1, 0.0, 0.2, -1.0, 1.0, 1.0, 1.0), (0.1, 0.0));
    }

    #[test]
    fn voltage_face_clamps() {
        let cone = SocCone { index: [0, 1, 2, 3], r: 0.01, x: 0.02, s_max: 1.0, v_min: 0.81, v_max: 1.21 };
        let q = cone.project([0.0, 0.0, 1.5, 1.0]);
        assert_eq!(q, [0.0, 0.0, 1.21, 1.0]);
    }

    #[test]
    fn inner_schedule() {
        assert_eq!(inner_tolerance(0), 1e-4);
        assert_eq!(inner_tolerance(1_000_000), 1e-10);
    }
}
