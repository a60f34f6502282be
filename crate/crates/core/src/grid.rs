//! Radial distribution networks over a discrete time horizon.
//!
//! All electrical quantities are per-unit. Bus `0` is the feeder (root) and
//! every other bus carries the parameters of the line connecting it to its
//! parent, so a network with `N + 1` buses has exactly `N` lines.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The 15-bus benchmark network shipped with the crate.
pub const IEEE15_JSON: &str = include_str!("../data/ieee15.json");
/// The same network as a per-bus parameter table (one row per bus).
pub const IEEE15_TABLE_CSV: &str = include_str!("../data/ieee15_table.csv");

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("malformed instance document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed table: {0}")]
    Csv(String),
    #[error("bus {bus}: {reason}")]
    Bus { bus: usize, reason: String },
    #[error("profile of bus {bus}: {reason}")]
    Profile { bus: usize, reason: String },
    #[error("topology: {0}")]
    Topology(String),
    #[error("aggregator partition: {0}")]
    Partition(String),
    #[error("horizon must contain at least one period")]
    EmptyHorizon,
}

/// A bus together with the line to its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    /// Line resistance `R_n`.
    #[serde(default)]
    pub r: f64,
    /// Line reactance `X_n`.
    #[serde(default)]
    pub x: f64,
    /// Apparent power limit of the line.
    #[serde(default)]
    pub s_max: f64,
    /// Shunt susceptance.
    #[serde(default)]
    pub b: f64,
    /// Shunt conductance.
    #[serde(default)]
    pub g: f64,
    /// Lower bound on the squared voltage magnitude.
    #[serde(default = "default_v_min")]
    pub v_min: f64,
    /// Upper bound on the squared voltage magnitude.
    #[serde(default = "default_v_max")]
    pub v_max: f64,
}

fn default_v_min() -> f64 {
    0.81
}

fn default_v_max() -> f64 {
    1.21
}

/// Flexible consumption and production available at one bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlexibilityProfile {
    pub bus: usize,
    /// Lower bound on consumption, per period.
    pub p_min: Vec<f64>,
    /// Upper bound on consumption, per period.
    pub p_max: Vec<f64>,
    /// Energy that consumption must cover over the horizon.
    pub energy: f64,
    /// Reactive-to-active ratio of consumption.
    pub tau_c: f64,
    /// Production cap per period. Absent means no production.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prod_max: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_min: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_max: Option<Vec<f64>>,
}

impl FlexibilityProfile {
    pub fn prod_max(&self, t: usize) -> f64 {
        self.prod_max.as_ref().map_or(0.0, |v| v[t])
    }

    pub fn rho_min(&self, t: usize) -> f64 {
        self.rho_min.as_ref().map_or(0.0, |v| v[t])
    }

    pub fn rho_max(&self, t: usize) -> f64 {
        self.rho_max.as_ref().map_or(0.0, |v| v[t])
    }
}

/// Root generation cost for one period: `linear * p + quadratic * p^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodCost {
    pub linear: f64,
    #[serde(default)]
    pub quadratic: f64,
}

impl PeriodCost {
    pub fn value(&self, p: f64) -> f64 {
        self.linear * p + self.quadratic * p * p
    }

    pub fn derivative(&self, p: f64) -> f64 {
        self.linear + 2.0 * self.quadratic * p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InstanceDocument {
    #[serde(rename = "T")]
    horizon: usize,
    v0: f64,
    k_loss: f64,
    cost: Vec<PeriodCost>,
    buses: Vec<Bus>,
    profiles: Vec<FlexibilityProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aggregators: Option<BTreeMap<usize, usize>>,
}

/// A validated radial network. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInstance {
    buses: Vec<Bus>,
    profiles: Vec<FlexibilityProfile>,
    horizon: usize,
    v0: f64,
    k_loss: f64,
    cost: Vec<PeriodCost>,
    partition: BTreeMap<usize, usize>,
    explicit_partition: bool,
    aggregators: Vec<Vec<usize>>,
    topology: Topology,
}

/// Parent and children relations of the tree rooted at bus 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

impl Topology {
    pub fn parent(&self, bus: usize) -> Option<usize> {
        self.parent[bus]
    }

    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Lines as `(parent, child)` pairs, ordered by child id.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(n, p)| p.map(|p| (p, n)))
            .collect()
    }

    pub fn num_buses(&self) -> usize {
        self.parent.len()
    }
}

impl NetworkInstance {
    pub fn from_json(text: &str) -> Result<Self, InstanceError> {
        let doc: InstanceDocument = serde_json::from_str(text)?;
        Self::from_document(doc)
    }

    /// The 15-bus benchmark network.
    pub fn ieee15() -> Self {
        Self::from_json(IEEE15_JSON).expect("bundled fixture is valid")
    }

    pub fn to_json(&self) -> String {
        let doc = InstanceDocument {
            horizon: self.horizon,
            v0: self.v0,
            k_loss: self.k_loss,
            cost: self.cost.clone(),
            buses: self.buses.clone(),
            profiles: self.profiles.clone(),
            aggregators: self.explicit_partition.then(|| self.partition.clone()),
        };
        serde_json::to_string_pretty(&doc).expect("instance serializes")
    }

    /// Builds an instance from parts, applying every validity check.
    pub fn new(
        buses: Vec<Bus>,
        profiles: Vec<FlexibilityProfile>,
        horizon: usize,
        v0: f64,
        k_loss: f64,
        cost: Vec<PeriodCost>,
        aggregators: Option<BTreeMap<usize, usize>>,
    ) -> Result<Self, InstanceError> {
        Self::from_document(InstanceDocument {
            horizon,
            v0,
            k_loss,
            cost,
            buses,
            profiles,
            aggregators,
        })
    }

    fn from_document(doc: InstanceDocument) -> Result<Self, InstanceError> {
        if doc.horizon == 0 {
            return Err(InstanceError::EmptyHorizon);
        }
        let t = doc.horizon;
        let n_total = doc.buses.len();
        if n_total == 0 {
            return Err(InstanceError::Topology("no buses".into()));
        }

        let mut buses: Vec<Option<Bus>> = vec![None; n_total];
        for bus in doc.buses {
            if bus.id >= n_total {
                return Err(InstanceError::Bus {
                    bus: bus.id,
                    reason: format!("ids must be 0..{}", n_total - 1),
                });
            }
            let id = bus.id;
            if buses[id].replace(bus).is_some() {
                return Err(InstanceError::Bus { bus: id, reason: "duplicate id".into() });
            }
        }
        let buses: Vec<Bus> = buses.into_iter().map(|b| b.expect("ids are a permutation")).collect();

        let roots: Vec<usize> = buses.iter().filter(|b| b.parent.is_none()).map(|b| b.id).collect();
        match roots.as_slice() {
            [0] => {}
            [r] => {
                return Err(InstanceError::Topology(format!("root must be bus 0, found bus {r}")))
            }
            [] => return Err(InstanceError::Topology("no root bus".into())),
            many => {
                return Err(InstanceError::Topology(format!(
                    "exactly one bus may lack a parent, found {many:?}"
                )))
            }
        }

        let mut children = vec![Vec::new(); n_total];
        for bus in &buses {
            if let Some(p) = bus.parent {
                if p >= n_total || p == bus.id {
                    return Err(InstanceError::Bus {
                        bus: bus.id,
                        reason: format!("invalid parent {p}"),
                    });
                }
                children[p].push(bus.id);
            }
        }
        // Every bus must be reachable from the root, which rules out cycles.
        let mut seen = vec![false; n_total];
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            seen[n] = true;
            stack.extend(children[n].iter().copied());
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(InstanceError::Topology(format!(
                "bus {orphan} is not connected to the root (cycle or detached subtree)"
            )));
        }

        for bus in buses.iter().skip(1) {
            let bad = |reason: &str| InstanceError::Bus { bus: bus.id, reason: reason.into() };
            if !(bus.r >= 0.0 && bus.x >= 0.0) {
                return Err(bad("line resistance and reactance must be nonnegative"));
            }
            if !(bus.s_max > 0.0) {
                return Err(bad("line flow limit must be positive"));
            }
            if !(bus.v_min > 0.0 && bus.v_min <= bus.v_max) {
                return Err(bad("voltage bounds must satisfy 0 < v_min <= v_max"));
            }
        }
        if !(doc.v0 > 0.0) {
            return Err(InstanceError::Bus { bus: 0, reason: "root voltage must be positive".into() });
        }
        if doc.cost.len() != t {
            return Err(InstanceError::Bus {
                bus: 0,
                reason: format!("expected {t} period costs, found {}", doc.cost.len()),
            });
        }
        if doc.cost.iter().any(|c| !(c.quadratic >= 0.0)) {
            return Err(InstanceError::Bus { bus: 0, reason: "root cost must be convex".into() });
        }
        if !(doc.k_loss >= 0.0) {
            return Err(InstanceError::Bus { bus: 0, reason: "loss penalty must be nonnegative".into() });
        }

        let mut profiles: Vec<Option<FlexibilityProfile>> = vec![None; n_total];
        for prof in doc.profiles {
            let bus = prof.bus;
            if bus == 0 || bus >= n_total {
                return Err(InstanceError::Profile { bus, reason: "not a non-root bus".into() });
            }
            validate_profile(&prof, t)?;
            if profiles[bus].replace(prof).is_some() {
                return Err(InstanceError::Profile { bus, reason: "duplicate profile".into() });
            }
        }
        let profiles: Vec<FlexibilityProfile> = profiles
            .into_iter()
            .enumerate()
            .skip(1)
            .map(|(bus, p)| {
                p.ok_or(InstanceError::Profile { bus, reason: "missing profile".into() })
            })
            .collect::<Result<_, _>>()?;

        let explicit_partition = doc.aggregators.is_some();
        let partition = match doc.aggregators {
            Some(map) => {
                for (&bus, _) in &map {
                    if bus == 0 || bus >= n_total {
                        return Err(InstanceError::Partition(format!(
                            "bus {bus} is not a non-root bus"
                        )));
                    }
                }
                if let Some(missing) = (1..n_total).find(|b| !map.contains_key(b)) {
                    return Err(InstanceError::Partition(format!(
                        "bus {missing} is not assigned to an aggregator"
                    )));
                }
                map
            }
            None => (1..n_total).map(|b| (b, b)).collect(),
        };
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&bus, &agg) in &partition {
            groups.entry(agg).or_default().push(bus);
        }
        let aggregators: Vec<Vec<usize>> = groups.into_values().collect();

        Ok(Self {
            buses,
            profiles,
            horizon: t,
            v0: doc.v0,
            k_loss: doc.k_loss,
            cost: doc.cost,
            partition,
            explicit_partition,
            aggregators,
            topology: Topology { parent: Vec::new(), children: Vec::new() },
        }
        .with_topology(children))
    }

    fn with_topology(mut self, children: Vec<Vec<usize>>) -> Self {
        let parent = self.buses.iter().map(|b| b.parent).collect();
        let children = children
            .into_iter()
            .map(|mut c| {
                c.sort_unstable();
                c
            })
            .collect();
        self.topology = Topology { parent, children };
        self
    }

    /// Number of non-root buses.
    pub fn num_lines(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn k_loss(&self) -> f64 {
        self.k_loss
    }

    pub fn cost(&self, t: usize) -> &PeriodCost {
        &self.cost[t]
    }

    pub fn costs(&self) -> &[PeriodCost] {
        &self.cost
    }

    pub fn bus(&self, id: usize) -> &Bus {
        &self.buses[id]
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    /// Profile of a non-root bus.
    pub fn profile(&self, bus: usize) -> &FlexibilityProfile {
        &self.profiles[bus - 1]
    }

    pub fn profiles(&self) -> &[FlexibilityProfile] {
        &self.profiles
    }

    /// Buses managed by each aggregator, aggregators ordered by their id.
    pub fn aggregators(&self) -> &[Vec<usize>] {
        &self.aggregators
    }

    pub fn num_aggregators(&self) -> usize {
        self.aggregators.len()
    }

    pub fn partition(&self) -> &BTreeMap<usize, usize> {
        &self.partition
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Replaces the aggregator partition, re-validating it.
    pub fn with_partition(&self, partition: BTreeMap<usize, usize>) -> Result<Self, InstanceError> {
        Self::new(
            self.buses.clone(),
            self.profiles.clone(),
            self.horizon,
            self.v0,
            self.k_loss,
            self.cost.clone(),
            Some(partition),
        )
    }

    /// Overwrites line and flexibility parameters with rows of a table in
    /// the benchmark layout. Topology, production data and scalars are kept.
    pub fn with_table(&self, rows: &[TableRow]) -> Result<Self, InstanceError> {
        let mut buses = self.buses.clone();
        let mut profiles = self.profiles.clone();
        for row in rows {
            if row.bus == 0 || row.bus >= buses.len() {
                return Err(InstanceError::Csv(format!("row for unknown bus {}", row.bus)));
            }
            if row.p_min.len() != self.horizon || row.p_max.len() != self.horizon {
                return Err(InstanceError::Profile {
                    bus: row.bus,
                    reason: format!("expected {} periods", self.horizon),
                });
            }
            let bus = &mut buses[row.bus];
            bus.s_max = row.s_max;
            bus.r = row.r_milli / 1e3;
            bus.x = row.x_milli / 1e3;
            bus.b = row.b_milli / 1e3;
            let prof = &mut profiles[row.bus - 1];
            prof.p_min = row.p_min.clone();
            prof.p_max = row.p_max.clone();
            prof.energy = row.energy;
            prof.tau_c = row.tau_c;
        }
        Self::new(
            buses,
            profiles,
            self.horizon,
            self.v0,
            self.k_loss,
            self.cost.clone(),
            self.explicit_partition.then(|| self.partition.clone()),
        )
    }
}

fn validate_profile(prof: &FlexibilityProfile, t: usize) -> Result<(), InstanceError> {
    let bad = |reason: String| InstanceError::Profile { bus: prof.bus, reason };
    if prof.p_min.len() != t || prof.p_max.len() != t {
        return Err(bad(format!("consumption bounds must have {t} periods")));
    }
    for (k, (lo, hi)) in prof.p_min.iter().zip(&prof.p_max).enumerate() {
        if !(lo <= hi) {
            return Err(bad(format!("p_min > p_max at period {k}")));
        }
    }
    let cap: f64 = prof.p_max.iter().sum();
    if !(prof.energy <= cap + 1e-12) {
        return Err(bad(format!(
            "energy demand {} exceeds total consumption capacity {cap}",
            prof.energy
        )));
    }
    if !prof.tau_c.is_finite() {
        return Err(bad("reactive ratio must be finite".into()));
    }
    for (name, v) in [("prod_max", &prof.prod_max), ("rho_min", &prof.rho_min), ("rho_max", &prof.rho_max)] {
        if let Some(v) = v {
            if v.len() != t {
                return Err(bad(format!("{name} must have {t} periods")));
            }
        }
    }
    for k in 0..t {
        if !(prof.prod_max(k) >= 0.0) {
            return Err(bad(format!("negative production cap at period {k}")));
        }
        if !(prof.rho_min(k) <= prof.rho_max(k)) {
            return Err(bad(format!("rho_min > rho_max at period {k}")));
        }
    }
    Ok(())
}

/// Parent map plus children lists of a validated instance.
pub fn ancestor_map(instance: &NetworkInstance) -> &Topology {
    instance.topology()
}

/// One row of the benchmark parameter table, in its printed units
/// (resistance, reactance and susceptance scaled by 1e3).
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub bus: usize,
    pub s_max: f64,
    pub r_milli: f64,
    pub x_milli: f64,
    pub b_milli: f64,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    pub energy: f64,
    pub tau_c: f64,
}

/// Parses a table with columns `n, S, R*1e3, X*1e3, B*1e3, P_min, P_max, E, tau_c`.
/// Per-period bounds are bracketed lists such as `"[0.593, 0.256]"`.
pub fn parse_table_csv(text: &str) -> Result<Vec<TableRow>, InstanceError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| InstanceError::Csv(e.to_string()))?;
        if record.len() != 9 {
            return Err(InstanceError::Csv(format!(
                "row {}: expected 9 columns, found {}",
                line + 1,
                record.len()
            )));
        }
        let num = |i: usize| -> Result<f64, InstanceError> {
            record[i].parse::<f64>().map_err(|e| {
                InstanceError::Csv(format!("row {}, column {}: {e}", line + 1, i + 1))
            })
        };
        let list = |i: usize| -> Result<Vec<f64>, InstanceError> {
            let s = record[i].trim();
            let inner = s
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| InstanceError::Csv(format!("row {}: expected [..] list", line + 1)))?;
            inner
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| {
                        InstanceError::Csv(format!("row {}, column {}: {e}", line + 1, i + 1))
                    })
                })
                .collect()
        };
        let bus = record[0]
            .parse::<usize>()
            .map_err(|e| InstanceError::Csv(format!("row {}: bus id: {e}", line + 1)))?;
        rows.push(TableRow {
            bus,
            s_max: num(1)?,
            r_milli: num(2)?,
            x_milli: num(3)?,
            b_milli: num(4)?,
            p_min: list(5)?,
            p_max: list(6)?,
            energy: num(7)?,
            tau_c: num(8)?,
        });
    }
    Ok(rows)
}

/// A random feasible radial instance with `buses` buses (root included),
/// one aggregator per bus and linear root costs.
pub fn random_radial_instance(rng: &mut impl rand::Rng, buses: usize, horizon: usize) -> NetworkInstance {
    assert!(buses >= 2 && horizon >= 1, "need a line and a period");
    let mut list = vec![Bus {
        id: 0,
        parent: None,
        r: 0.0,
        x: 0.0,
        s_max: 0.0,
        b: 0.0,
        g: 0.0,
        v_min: default_v_min(),
        v_max: default_v_max(),
    }];
    let mut profiles = Vec::new();
    for id in 1..buses {
        list.push(Bus {
            id,
            parent: Some(rng.random_range(0..id)),
            r: rng.random_range(0.001..0.05),
            x: rng.random_range(0.001..0.1),
            s_max: rng.random_range(0.5..1.5),
            b: rng.random_range(0.0..0.003),
            g: 0.0,
            v_min: default_v_min(),
            v_max: default_v_max(),
        });
        let p_min: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.0..0.05)).collect();
        let p_max: Vec<f64> = p_min.iter().map(|lo| lo + rng.random_range(0.05..0.2)).collect();
        let lo_sum: f64 = p_min.iter().sum();
        let hi_sum: f64 = p_max.iter().sum();
        let produces = rng.random_bool(0.5);
        profiles.push(FlexibilityProfile {
            bus: id,
            energy: lo_sum + rng.random_range(0.0..1.0) * (hi_sum - lo_sum),
            p_min,
            p_max,
            tau_c: rng.random_range(0.0..0.5),
            prod_max: produces.then(|| (0..horizon).map(|_| rng.random_range(0.0..0.1)).collect()),
            rho_min: produces.then(|| vec![-0.2; horizon]),
            rho_max: produces.then(|| vec![0.3; horizon]),
        });
    }
    let cost = (0..horizon)
        .map(|_| PeriodCost { linear: rng.random_range(0.5..2.0), quadratic: rng.random_range(0.0..1.0) })
        .collect();
    NetworkInstance::new(list, profiles, horizon, 1.0, 0.001, cost, None).expect("generated instance is valid")
}

impl fmt::Display for NetworkInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} buses, {} lines, T = {}, {} aggregators",
            self.num_buses(),
            self.num_lines(),
            self.horizon,
            self.num_aggregators()
        )
    }
}
