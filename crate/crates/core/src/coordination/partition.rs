//! Variable and row ownership between the transmission agent and the
//! distribution agents.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::{build_nlp, DsRoot, GridNlp, Network, TieMode, VarLabel};
use crate::nlp::{Dims, NlpProblem, PrimalDualState};
use crate::scenario::Scenario;

/// Number of boundary variables per distribution system:
/// interface voltage `(e, f)` and tie transfer `(P, Q)`.
pub const BOUNDARY_DIM: usize = 4;

/// Placement of one agent's local problem inside the centralized one.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMap {
    /// Global index of every local variable.
    pub vars: Vec<usize>,
    /// First global equality row.
    pub eq_offset: usize,
    /// First global inequality row.
    pub ineq_offset: usize,
    pub dims: Dims,
}

impl AgentMap {
    /// Restricts a centralized state to this agent.
    pub fn restrict(&self, s: &PrimalDualState) -> PrimalDualState {
        let eq = self.eq_offset..self.eq_offset + self.dims.m_eq;
        let ineq = self.ineq_offset..self.ineq_offset + self.dims.m_ineq;
        PrimalDualState {
            x: self.vars.iter().map(|&g| s.x[g]).collect(),
            y: s.y[eq].to_vec(),
            w: s.w[ineq.clone()].to_vec(),
            z: s.z[ineq.clone()].to_vec(),
            u: s.u[ineq.clone()].to_vec(),
            l: s.l[ineq].to_vec(),
            mu: s.mu,
        }
    }
}

/// Ownership of every centralized variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub global: Dims,
    pub ts: AgentMap,
    pub ds: Vec<AgentMap>,
    pub ds_ids: Vec<u32>,
    /// Global indices of the transmission-only variables.
    pub ts_independent: Vec<usize>,
    /// Global indices of each distribution system's internal variables.
    pub ds_independent: Vec<Vec<usize>>,
    /// Global indices of each distribution system's boundary variables.
    pub boundary: Vec<[usize; BOUNDARY_DIM]>,
    /// Positions of each boundary set inside the transmission vector.
    pub ts_boundary: Vec<[usize; BOUNDARY_DIM]>,
}

impl Partition {
    pub fn n_ds(&self) -> usize {
        self.ds.len()
    }

    /// Position of the distribution system with identifier `id`.
    pub fn ds_position(&self, id: u32) -> Option<usize> {
        self.ds_ids.iter().position(|&d| d == id)
    }
}

/// Local problems of all agents.
#[derive(Debug, Clone)]
pub struct AgentProblems {
    pub ts: GridNlp,
    pub ds: Vec<GridNlp>,
}

/// Splits the coupled problem into one transmission and one problem per
/// distribution system, and returns the centralized problem alongside.
pub fn partition_network(
    net: &Network,
    scenario: &Scenario,
) -> Result<(Partition, AgentProblems, GridNlp)> {
    let central = build_nlp(net, scenario)?;
    let ts = GridNlp::transmission(net, scenario, TieMode::Variables)?;
    let ds: Vec<GridNlp> = (0..net.ds.len())
        .map(|k| GridNlp::distribution(net, k, scenario, DsRoot::Boundary))
        .collect::<Result<_>>()?;

    let index: HashMap<VarLabel, usize> = central
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (*l, i))
        .collect();
    let lookup = |l: VarLabel| {
        index.get(&l).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("variable {l:?} missing from the coupled problem"))
        })
    };

    let ts_vars: Vec<usize> = ts
        .labels()
        .iter()
        .map(|&l| lookup(l))
        .collect::<Result<_>>()?;
    let mut ts_map = AgentMap {
        vars: ts_vars,
        eq_offset: 0,
        ineq_offset: 0,
        dims: ts.dims(),
    };
    let mut eq_offset = ts_map.dims.m_eq;
    let mut ineq_offset = ts_map.dims.m_ineq;

    let mut seen_ts_bus = HashMap::new();
    let mut ds_maps = Vec::with_capacity(ds.len());
    let mut boundary = Vec::with_capacity(ds.len());
    let mut ds_independent = Vec::with_capacity(ds.len());
    for (k, p) in ds.iter().enumerate() {
        let sys = k + 1;
        let root = net.ds[k].root_index();
        let tie = net.tie_of(k);
        let ts_bus = net.ts.bus_index(tie.ts_bus).ok_or_else(|| {
            Error::validation(
                format!("tie to ds {}", net.ds[k].id),
                "unknown transmission bus",
            )
        })?;
        if let Some(other) = seen_ts_bus.insert(ts_bus, net.ds[k].id) {
            return Err(Error::validation(
                format!("tie to ds {}", net.ds[k].id),
                format!("transmission bus {} already serves ds {other}", tie.ts_bus),
            ));
        }
        let vars: Vec<usize> = p
            .labels()
            .iter()
            .map(|&l| match l {
                VarLabel::E { sys: s, bus } if s == sys && bus == root => lookup(VarLabel::E {
                    sys: 0,
                    bus: ts_bus,
                }),
                VarLabel::F { sys: s, bus } if s == sys && bus == root => lookup(VarLabel::F {
                    sys: 0,
                    bus: ts_bus,
                }),
                other => lookup(other),
            })
            .collect::<Result<_>>()?;
        let n = vars.len();
        let b: [usize; BOUNDARY_DIM] = vars[n - BOUNDARY_DIM..]
            .try_into()
            .expect("four trailing variables");
        let expected = [
            lookup(VarLabel::E {
                sys: 0,
                bus: ts_bus,
            })?,
            lookup(VarLabel::F {
                sys: 0,
                bus: ts_bus,
            })?,
            lookup(VarLabel::TieP { ds: k })?,
            lookup(VarLabel::TieQ { ds: k })?,
        ];
        debug_assert_eq!(
            b, expected,
            "distribution layout ends with the boundary block"
        );
        boundary.push(b);
        ds_independent.push(vars[..n - BOUNDARY_DIM].to_vec());
        let dims = p.dims();
        ds_maps.push(AgentMap {
            vars,
            eq_offset,
            ineq_offset,
            dims,
        });
        eq_offset += dims.m_eq;
        ineq_offset += dims.m_ineq;
    }

    let global = central.dims();
    if eq_offset != global.m_eq || ineq_offset != global.m_ineq {
        return Err(Error::DimensionMismatch {
            what: "partitioned rows",
            expected: global.m_eq + global.m_ineq,
            found: eq_offset + ineq_offset,
        });
    }

    let ts_pos: HashMap<usize, usize> = ts_map
        .vars
        .iter()
        .enumerate()
        .map(|(i, &g)| (g, i))
        .collect();
    let ts_boundary = boundary.iter().map(|b| b.map(|g| ts_pos[&g])).collect();
    let shared: std::collections::HashSet<usize> = boundary.iter().flatten().copied().collect();
    let ts_independent = ts_map
        .vars
        .iter()
        .copied()
        .filter(|g| !shared.contains(g))
        .collect();
    ts_map.dims = ts.dims();

    let partition = Partition {
        global,
        ts: ts_map,
        ds: ds_maps,
        ds_ids: net.ds.iter().map(|d| d.id).collect(),
        ts_independent,
        ds_independent,
        boundary,
        ts_boundary,
    };
    Ok((partition, AgentProblems { ts, ds }, central))
}

/// Reassembles a centralized state from agent states. Boundary values are
/// taken from the transmission agent; `mu` from the transmission agent too.
pub fn gather(part: &Partition, ts: &PrimalDualState, ds: &[PrimalDualState]) -> PrimalDualState {
    let g = part.global;
    let mut out = PrimalDualState {
        x: vec![0.0; g.n],
        y: vec![0.0; g.m_eq],
        w: vec![0.0; g.m_ineq],
        z: vec![0.0; g.m_ineq],
        u: vec![0.0; g.m_ineq],
        l: vec![0.0; g.m_ineq],
        mu: ts.mu,
    };
    let mut place = |map: &AgentMap, s: &PrimalDualState, with_x: bool| {
        if with_x {
            for (i, &gi) in map.vars.iter().enumerate() {
                out.x[gi] = s.x[i];
            }
        }
        out.y[map.eq_offset..map.eq_offset + s.y.len()].copy_from_slice(&s.y);
        let r = map.ineq_offset..map.ineq_offset + s.w.len();
        out.w[r.clone()].copy_from_slice(&s.w);
        out.z[r.clone()].copy_from_slice(&s.z);
        out.u[r.clone()].copy_from_slice(&s.u);
        out.l[r].copy_from_slice(&s.l);
    };
    for (map, s) in part.ds.iter().zip(ds) {
        place(map, s, true);
    }
    // transmission last so boundary values come from it
    place(&part.ts, ts, true);
    out
}
