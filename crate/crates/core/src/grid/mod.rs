//! Coupled transmission/distribution network model.
//!
//! Systems are indexed uniformly: system 0 is the transmission system and
//! system `k + 1` is the `k`-th distribution system in ascending id order.

mod flow;
mod nlp;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::SystemParams;

pub use flow::branch_flow;
pub use nlp::{build_nlp, DsRoot, GridNlp, GridNlpBuilder, Slot, TieMode, VarLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BusKind {
    #[default]
    Transmission,
    DistributionRoot,
    DistributionInternal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub vmin: f64,
    pub vmax: f64,
    /// Nominal active load, scaled by the scenario profile.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub pd: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub qd: f64,
    #[serde(skip)]
    pub kind: BusKind,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl Bus {
    pub fn has_load(&self) -> bool {
        self.pd != 0.0 || self.qd != 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub g: f64,
    pub b: f64,
    pub smax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub pmin: f64,
    pub pmax: f64,
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl Generator {
    pub fn cost(&self, p: f64) -> f64 {
        (self.c2 * p + self.c1) * p + self.c0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResKind {
    Pv,
    Wt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResUnit {
    pub bus: u32,
    pub s_rated: f64,
    pub tan_theta: f64,
    pub cp: f64,
    pub cq: f64,
    pub kind: ResKind,
}

/// Buses, branches and units of one operator's system.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Subsystem {
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub res: Vec<ResUnit>,
    #[serde(skip)]
    index: HashMap<u32, usize>,
}

impl Subsystem {
    /// Position of bus `id` in `buses`.
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .buses
            .iter()
            .enumerate()
            .map(|(k, b)| (b.id, k))
            .collect();
    }

    pub fn total_load(&self) -> (f64, f64) {
        self.buses
            .iter()
            .fold((0.0, 0.0), |(p, q), b| (p + b.pd, q + b.qd))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSystem {
    pub id: u32,
    pub root_bus: u32,
    #[serde(flatten)]
    pub system: Subsystem,
}

impl DistSystem {
    pub fn root_index(&self) -> usize {
        self.system
            .bus_index(self.root_bus)
            .expect("validated root bus")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieLine {
    pub ts_bus: u32,
    pub ds_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub base_mva: f64,
    pub ts: Subsystem,
    #[serde(default)]
    pub ds: Vec<DistSystem>,
    #[serde(default)]
    pub ties: Vec<TieLine>,
}

/// Reads and validates a case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let net: Network = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    net.validated()
}

impl Network {
    /// Parses and validates a case document.
    pub fn from_json(text: &str) -> Result<Network> {
        let net: Network = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        net.validated()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    /// Checks every invariant, sorts distribution systems by id and assigns
    /// bus kinds.
    pub fn validated(mut self) -> Result<Network> {
        if !(self.base_mva > 0.0 && self.base_mva.is_finite()) {
            return Err(Error::validation("base_mva", "must be positive"));
        }
        self.ds.sort_by_key(|d| d.id);
        validate_subsystem("ts", &mut self.ts)?;
        if self.ts.generators.is_empty() {
            return Err(Error::validation(
                "ts",
                "needs at least one generator for the reference bus",
            ));
        }

        let mut ds_ids = BTreeSet::new();
        for ds in &mut self.ds {
            let name = format!("ds {}", ds.id);
            if !ds_ids.insert(ds.id) {
                return Err(Error::validation(name, "duplicate distribution system id"));
            }
            validate_subsystem(&name, &mut ds.system)?;
            let root = ds.system.bus_index(ds.root_bus).ok_or_else(|| {
                Error::validation(&name, format!("root bus {} does not exist", ds.root_bus))
            })?;
            for (k, bus) in ds.system.buses.iter_mut().enumerate() {
                bus.kind = if k == root {
                    BusKind::DistributionRoot
                } else {
                    BusKind::DistributionInternal
                };
            }
        }

        let mut ties_per_ds: BTreeMap<u32, usize> = BTreeMap::new();
        let mut used_ts_buses = BTreeSet::new();
        for tie in &self.ties {
            let name = format!("tie {}-ds{}", tie.ts_bus, tie.ds_id);
            if self.ts.bus_index(tie.ts_bus).is_none() {
                return Err(Error::validation(
                    name,
                    format!("ts bus {} does not exist", tie.ts_bus),
                ));
            }
            if !ds_ids.contains(&tie.ds_id) {
                return Err(Error::validation(
                    name,
                    format!("ds {} does not exist", tie.ds_id),
                ));
            }
            if !used_ts_buses.insert(tie.ts_bus) {
                return Err(Error::validation(name, "ts bus already hosts a tie"));
            }
            *ties_per_ds.entry(tie.ds_id).or_default() += 1;
        }
        for id in &ds_ids {
            match ties_per_ds.get(id).copied().unwrap_or(0) {
                1 => {}
                0 => return Err(Error::validation(format!("ds {id}"), "has no tie line")),
                n => {
                    return Err(Error::validation(
                        format!("ds {id}"),
                        format!("has {n} tie lines"),
                    ))
                }
            }
        }
        self.ties.sort_by_key(|t| t.ds_id);
        Ok(self)
    }

    pub fn n_systems(&self) -> usize {
        1 + self.ds.len()
    }

    /// System by uniform index (0 is the transmission system).
    pub fn system(&self, sys: usize) -> &Subsystem {
        if sys == 0 {
            &self.ts
        } else {
            &self.ds[sys - 1].system
        }
    }

    /// Scenario key prefix of a system: `ts` or `ds<id>`.
    pub fn system_key(&self, sys: usize) -> String {
        if sys == 0 {
            "ts".to_string()
        } else {
            format!("ds{}", self.ds[sys - 1].id)
        }
    }

    /// Position of the distribution system with this id.
    pub fn ds_position(&self, id: u32) -> Option<usize> {
        self.ds.iter().position(|d| d.id == id)
    }

    /// Tie serving the `k`-th distribution system.
    pub fn tie_of(&self, k: usize) -> &TieLine {
        let id = self.ds[k].id;
        self.ties
            .iter()
            .find(|t| t.ds_id == id)
            .expect("validated: one tie per ds")
    }

    /// The same network with every distribution system removed.
    pub fn transmission_only(&self) -> Network {
        Network {
            description: self.description.clone(),
            base_mva: self.base_mva,
            ts: self.ts.clone(),
            ds: Vec::new(),
            ties: Vec::new(),
        }
    }
}

fn validate_subsystem(name: &str, sys: &mut Subsystem) -> Result<()> {
    if sys.buses.is_empty() {
        return Err(Error::validation(name, "has no buses"));
    }
    let mut seen = BTreeSet::new();
    for bus in &sys.buses {
        let rec = format!("{name} bus {}", bus.id);
        if !seen.insert(bus.id) {
            return Err(Error::validation(rec, "duplicate bus id"));
        }
        if !(bus.vmin > 0.0 && bus.vmin < bus.vmax && bus.vmax.is_finite()) {
            return Err(Error::validation(rec, "requires 0 < vmin < vmax"));
        }
        if !(bus.pd.is_finite() && bus.qd.is_finite()) {
            return Err(Error::validation(rec, "non-finite load"));
        }
    }
    sys.rebuild_index();

    for (k, br) in sys.branches.iter().enumerate() {
        let rec = format!("{name} branch {k} ({}-{})", br.from, br.to);
        for end in [br.from, br.to] {
            if sys.bus_index(end).is_none() {
                return Err(Error::validation(
                    rec,
                    format!("endpoint bus {end} does not exist"),
                ));
            }
        }
        if br.from == br.to {
            return Err(Error::validation(rec, "from and to buses coincide"));
        }
        if !(br.smax > 0.0) || !br.smax.is_finite() {
            return Err(Error::validation(rec, "smax must be positive"));
        }
        if !(br.g >= 0.0) || !br.b.is_finite() || !br.g.is_finite() {
            return Err(Error::validation(rec, "requires finite b and g >= 0"));
        }
    }
    for (k, gen) in sys.generators.iter().enumerate() {
        let rec = format!("{name} generator {k} (bus {})", gen.bus);
        if sys.bus_index(gen.bus).is_none() {
            return Err(Error::validation(rec, "bus does not exist"));
        }
        let finite = [gen.pmin, gen.pmax, gen.c2, gen.c1, gen.c0]
            .iter()
            .all(|v| v.is_finite());
        if !finite || gen.pmin > gen.pmax {
            return Err(Error::validation(rec, "requires finite pmin <= pmax"));
        }
        if gen.c2 < 0.0 {
            return Err(Error::validation(rec, "c2 must be nonnegative"));
        }
    }
    for (k, res) in sys.res.iter().enumerate() {
        let rec = format!("{name} res {k} (bus {})", res.bus);
        if sys.bus_index(res.bus).is_none() {
            return Err(Error::validation(rec, "bus does not exist"));
        }
        if !(res.s_rated > 0.0 && res.s_rated.is_finite()) {
            return Err(Error::validation(rec, "s_rated must be positive"));
        }
        if !(res.tan_theta >= 0.0 && res.tan_theta.is_finite()) {
            return Err(Error::validation(rec, "tan_theta must be nonnegative"));
        }
        if !(res.cp >= 0.0 && res.cq >= 0.0) {
            return Err(Error::validation(rec, "penalties must be nonnegative"));
        }
    }

    // connectivity by union-find over branches
    let n = sys.buses.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for br in &sys.branches {
        let a = find(&mut parent, sys.bus_index(br.from).unwrap_or(0));
        let b = find(&mut parent, sys.bus_index(br.to).unwrap_or(0));
        parent[a] = b;
    }
    let root = find(&mut parent, 0);
    if let Some(k) = (0..n).find(|&k| find(&mut parent, k) != root) {
        return Err(Error::validation(
            format!("{name} bus {}", sys.buses[k].id),
            "not connected to the rest of the system",
        ));
    }
    Ok(())
}

/// Decision variables of one system in physical terms.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemVariables {
    pub e: Vec<f64>,
    pub f: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub pres: Vec<f64>,
    pub qres: Vec<f64>,
}

impl SystemVariables {
    /// Flat voltages, generators at mid-range, RES idle.
    pub fn flat(sys: &Subsystem) -> Self {
        let nb = sys.buses.len();
        Self {
            e: vec![1.0; nb],
            f: vec![0.0; nb],
            pg: sys
                .generators
                .iter()
                .map(|g| 0.5 * (g.pmin + g.pmax))
                .collect(),
            qg: vec![0.0; sys.generators.len()],
            pres: vec![0.0; sys.res.len()],
            qres: vec![0.0; sys.res.len()],
        }
    }
}

/// Variables of a whole network: per-system values and per-tie transfers
/// (positive from the transmission bus into the distribution root).
#[derive(Debug, Clone, PartialEq)]
pub struct GridVariables {
    pub systems: Vec<SystemVariables>,
    pub ties: Vec<(f64, f64)>,
}

impl GridVariables {
    pub fn flat(net: &Network) -> Self {
        Self {
            systems: (0..net.n_systems())
                .map(|s| SystemVariables::flat(net.system(s)))
                .collect(),
            ties: vec![(0.0, 0.0); net.ds.len()],
        }
    }
}

/// Per-bus active and reactive balance residuals `[P_0, Q_0, P_1, ...]`,
/// transmission buses first and then each distribution system in order.
///
/// Each distribution root uses its own voltage variables.
pub fn power_mismatch(
    net: &Network,
    vars: &GridVariables,
    params: &[SystemParams],
) -> Result<Vec<f64>> {
    let ns = net.n_systems();
    for (what, found) in [
        ("system variables", vars.systems.len()),
        ("system params", params.len()),
    ] {
        if found != ns {
            return Err(Error::DimensionMismatch {
                what,
                expected: ns,
                found,
            });
        }
    }
    if vars.ties.len() != net.ds.len() {
        return Err(Error::DimensionMismatch {
            what: "tie transfers",
            expected: net.ds.len(),
            found: vars.ties.len(),
        });
    }
    let mut out = Vec::new();
    for s in 0..ns {
        let sys = net.system(s);
        let v = &vars.systems[s];
        let prm = &params[s];
        let nb = sys.buses.len();
        let checks = [
            ("bus e", nb, v.e.len()),
            ("bus f", nb, v.f.len()),
            ("generator p", sys.generators.len(), v.pg.len()),
            ("generator q", sys.generators.len(), v.qg.len()),
            ("res p", sys.res.len(), v.pres.len()),
            ("res q", sys.res.len(), v.qres.len()),
            ("bus loads", nb, prm.pd.len()),
        ];
        for (what, expected, found) in checks {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    found,
                });
            }
        }
        let mut bal = vec![0.0; 2 * nb];
        for i in 0..nb {
            bal[2 * i] -= prm.pd[i];
            bal[2 * i + 1] -= prm.qd[i];
        }
        for (k, g) in sys.generators.iter().enumerate() {
            let i = sys.bus_index(g.bus).expect("validated");
            bal[2 * i] += v.pg[k];
            bal[2 * i + 1] += v.qg[k];
        }
        for (k, r) in sys.res.iter().enumerate() {
            let i = sys.bus_index(r.bus).expect("validated");
            bal[2 * i] += v.pres[k];
            bal[2 * i + 1] += v.qres[k];
        }
        for br in &sys.branches {
            let i = sys.bus_index(br.from).expect("validated");
            let j = sys.bus_index(br.to).expect("validated");
            let (pij, qij) = branch_flow(v.e[i], v.f[i], v.e[j], v.f[j], br.g, br.b);
            let (pji, qji) = branch_flow(v.e[j], v.f[j], v.e[i], v.f[i], br.g, br.b);
            bal[2 * i] -= pij;
            bal[2 * i + 1] -= qij;
            bal[2 * j] -= pji;
            bal[2 * j + 1] -= qji;
        }
        for (k, tie) in net.ties.iter().enumerate() {
            let (p, q) = vars.ties[k];
            if s == 0 {
                let i = sys.bus_index(tie.ts_bus).expect("validated");
                bal[2 * i] -= p;
                bal[2 * i + 1] -= q;
            } else if net.ds[s - 1].id == tie.ds_id {
                let i = net.ds[s - 1].root_index();
                bal[2 * i] += p;
                bal[2 * i + 1] += q;
            }
        }
        out.extend(bal);
    }
    Ok(out)
}
