//! Convergence measurements: traces, KKT residual, cone tightness and rate
//! fits, plus CSV exports of traces and prices.

use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::grid::NetworkInstance;
use crate::opf::{DsoLayout, DualLayout};
use crate::pd::BlockProblem;
use crate::projections::{BlockMetric, ProjectionError};

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("rate fit needs at least two positive samples in {0:?}")]
    DegenerateWindow(RangeInclusive<usize>),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    /// Objective at the last iterate.
    pub cost: f64,
    /// `1/2 |A x^k - b|^2`.
    pub h_last: f64,
    /// `1/2 |A s^k - b|^2` for the running mean `s^k`.
    pub h_erg: f64,
    pub resid_inf: f64,
    pub kkt: Option<f64>,
    pub dlmp_drift: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
    /// `(k, y^k)` at the configured interval.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub initial_dual: Vec<f64>,
}

impl ConvergenceTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Largest violation of `h(s^k) <= (1/k) sum_{j=1..k} h(x^j)`, which
    /// holds by convexity of `h`.
    pub fn ergodic_convexity_violation(&self) -> f64 {
        let mut sum = 0.0;
        let mut worst = 0.0f64;
        for r in self.records.iter().filter(|r| r.k >= 1) {
            sum += r.h_last;
            let bound = sum / r.k as f64;
            worst = worst.max(r.h_erg - bound - 1e-12 * bound.max(1e-300));
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DiagnosticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "cost", "h_last", "h_erg", "resid_inf", "kkt", "dlmp_drift"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.k.to_string(),
                format!("{:e}", r.cost),
                format!("{:e}", r.h_last),
                format!("{:e}", r.h_erg),
                format!("{:e}", r.resid_inf),
                opt(r.kkt),
                opt(r.dlmp_drift),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, DiagnosticsError> {
        let mut rd = csv::Reader::from_reader(input);
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let num = |i: usize| row[i].parse::<f64>().unwrap_or(f64::NAN);
            let opt = |i: usize| (!row[i].is_empty()).then(|| num(i));
            records.push(TraceRecord {
                k: row[0].parse().unwrap_or(0),
                cost: num(1),
                h_last: num(2),
                h_erg: num(3),
                resid_inf: num(4),
                kkt: opt(5),
                dlmp_drift: opt(6),
            });
        }
        Ok(Self { records, ..Default::default() })
    }
}

/// KKT residual with the identity metric:
/// `max(|x - Π_X(x - (∇φ(x) + A^T y))|_∞, |A x - b|_∞)`.
///
/// Returns `None` when a block projection fails outright.
pub fn kkt_residual<P: BlockProblem>(
    problem: &P,
    x: &[Vec<f64>],
    y: &[f64],
    workspaces: &mut [P::Workspace],
) -> Option<f64> {
    let metrics: Vec<BlockMetric> = (0..problem.num_blocks())
        .map(|i| BlockMetric::scalar(1.0, problem.block_dim(i)).expect("unit metric"))
        .collect();
    kkt_residual_with_metric(problem, x, y, workspaces, &metrics)
}

pub fn kkt_residual_with_metric<P: BlockProblem>(
    problem: &P,
    x: &[Vec<f64>],
    y: &[f64],
    workspaces: &mut [P::Workspace],
    metrics: &[BlockMetric],
) -> Option<f64> {
    let mut worst = problem.residual(x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, xi) in x.iter().enumerate() {
        let mut lin = vec![0.0; xi.len()];
        problem.gradient(i, xi, &mut lin);
        problem.coupling(i).mul_transpose_add(1.0, y, &mut lin);
        let point = match problem.prox(i, &mut workspaces[i], xi, &lin, &metrics[i], 1e-11) {
            Ok(o) => o.point,
            Err(ProjectionError::NotConverged { point, .. }) => point,
            Err(e) => {
                log::error!("KKT projection of block {i} failed: {e}");
                return None;
            }
        };
        for (a, b) in xi.iter().zip(&point) {
            worst = worst.max((a - b).abs());
        }
    }
    Some(worst)
}

/// `v l - (f^2 + g^2)` per line (row) and period (column).
pub fn cone_tightness(layout: &DsoLayout, x0: &[f64]) -> Vec<Vec<f64>> {
    (1..=layout.lines())
        .map(|n| {
            (0..layout.horizon())
                .map(|t| {
                    let (f, g) = (x0[layout.f(n, t)], x0[layout.g(n, t)]);
                    x0[layout.v(n, t)] * x0[layout.l(n, t)] - (f * f + g * g)
                })
                .collect()
        })
        .collect()
}

pub fn max_cone_gap(layout: &DsoLayout, x0: &[f64]) -> f64 {
    cone_tightness(layout, x0).iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Apparent-power loading per line and period: the larger of the sending-end
/// magnitude `|(f, g)|` and the receiving-end magnitude `|(f - R l, g - X l)|`.
pub fn line_loading(instance: &NetworkInstance, layout: &DsoLayout, x0: &[f64]) -> Vec<Vec<f64>> {
    (1..=layout.lines())
        .map(|n| {
            let bus = instance.bus(n);
            (0..layout.horizon())
                .map(|t| {
                    let (f, g, l) = (x0[layout.f(n, t)], x0[layout.g(n, t)], x0[layout.l(n, t)]);
                    f.hypot(g).max((f - bus.r * l).hypot(g - bus.x * l))
                })
                .collect()
        })
        .collect()
}

/// Least-squares slope of `log value` against `log k`.
pub fn power_law_slope(samples: impl IntoIterator<Item = (usize, f64)>) -> Option<f64> {
    let pts: Vec<(f64, f64)> = samples
        .into_iter()
        .filter(|&(k, v)| k > 0 && v > 0.0 && v.is_finite())
        .map(|(k, v)| ((k as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// Slope for the last iterate.
    pub last: f64,
    /// Slope for the running mean.
    pub ergodic: f64,
}

pub fn rate_fit(trace: &ConvergenceTrace, window: RangeInclusive<usize>) -> Result<RateFit, DiagnosticsError> {
    let inside = || trace.records.iter().filter(|r| window.contains(&r.k));
    let last = power_law_slope(inside().map(|r| (r.k, r.h_last)));
    let ergodic = power_law_slope(inside().map(|r| (r.k, r.h_erg)));
    match (last, ergodic) {
        (Some(last), Some(ergodic)) => Ok(RateFit { last, ergodic }),
        _ => Err(DiagnosticsError::DegenerateWindow(window)),
    }
}

/// One price row: bus, period, active and reactive DLMP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DlmpRow {
    pub bus: usize,
    pub t: usize,
    pub y_p: f64,
    pub y_q: f64,
}

pub fn dlmp_rows(duals: &DualLayout, y: &[f64]) -> Vec<DlmpRow> {
    let mut rows = Vec::with_capacity(duals.lines() * duals.horizon());
    for bus in 1..=duals.lines() {
        for t in 0..duals.horizon() {
            rows.push(DlmpRow { bus, t, y_p: y[duals.active(bus, t)], y_q: y[duals.reactive(bus, t)] });
        }
    }
    rows
}

pub fn write_dlmp_csv<W: Write>(rows: &[DlmpRow], out: W) -> Result<(), DiagnosticsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dlmp_csv<R: std::io::Read>(input: R) -> Result<Vec<DlmpRow>, DiagnosticsError> {
    let mut rd = csv::Reader::from_reader(input);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(f: impl Fn(f64) -> f64, g: impl Fn(f64) -> f64) -> ConvergenceTrace {
        ConvergenceTrace {
            records: (1..=2000)
                .map(|k| TraceRecord {
                    k,
                    cost: 0.0,
                    h_last: f(k as f64),
                    h_erg: g(k as f64),
                    resid_inf: 0.0,
                    kkt: None,
                    dlmp_drift: None,
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn exact_power_laws() {
        let fit = rate_fit(&synthetic(|k| 1.0 / k, |k| 1.0 / (k * k)), 100..=2000).unwrap();
        assert!((fit.last + 1.0).abs() < 1e-6);
        assert!((fit.ergodic + 2.0).abs() < 1e-6);
        let flat = rate_fit(&synthetic(|_| 0.3, |_| 0.3), 100..=2000).unwrap();
        assert!(flat.last.abs() < 1e-12);
        assert!(rate_fit(&synthetic(|_| 1.0, |_| 1.0), 5000..=6000).is_err());
    }

    #[test]
    fn cone_gap_examples() {
        let lay = DsoLayout::new(1, 1);
        let mut x = vec![0.0; lay.dim()];
        x[lay.v(1, 0)] = 1.0;
        x[lay.l(1, 0)] = 1.0;
        assert_eq!(cone_tightness(&lay, &x), vec![vec![1.0]]);
        x[lay.f(1, 0)] = 0.6;
        x[lay.g(1, 0)] = 0.8;
        assert!(max_cone_gap(&lay, &x).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips() {
        let tr = synthetic(|k| 1.0 / k, |k| 1.0 / (k * k));
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,cost,h_last,h_erg,resid_inf,kkt,dlmp_drift\n"));
        let back = ConvergenceTrace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.records, tr.records);

        let rows = vec![DlmpRow { bus: 1, t: 0, y_p: 3.721, y_q: 0.012 }];
        let mut buf = Vec::new();
        write_dlmp_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("bus,t,y_p,y_q\n"));
        assert_eq!(read_dlmp_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn convexity_bound_on_synthetic_trace() {
        let tr = synthetic(|k| 1.0 / k, |k| 1.0 / (k * k));
        assert_eq!(tr.ergodic_convexity_violation(), 0.0);
        let bad = synthetic(|k| 1.0 / (k * k), |_| 1.0);
        assert!(bad.ergodic_convexity_violation() > 0.0);
    }
}
