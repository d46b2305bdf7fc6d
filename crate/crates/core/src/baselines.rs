//! Uncoordinated comparison: every operator optimizes its own grid against a
//! predefined boundary condition instead of negotiating it.
//!
//! The transmission operator withdraws a fixed power at each tie; each
//! distribution operator holds its root voltage fixed and imports whatever
//! it needs through the tie.

use log::debug;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{DsRoot, GridNlp, Network, TieMode, VarLabel};
use crate::linalg::SparseLu;
use crate::nlp::{NlpProblem, PrimalDualState};
use crate::pdipm::{initial_state, solve_converged_with, PdipmConfig};
use crate::scenario::Scenario;

/// Barrier parameter of a cold start.
const COLD_MU: f64 = 0.1;

/// Fixed boundary values, one entry per distribution system in network order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryAssumption {
    /// Root voltage as `(magnitude, angle in radians)`.
    pub root_voltage: Vec<(f64, f64)>,
    /// Tie withdrawal `(P, Q)` seen by the transmission grid.
    pub tie_withdrawal: Vec<(f64, f64)>,
}

impl BoundaryAssumption {
    /// Root at `1.0` p.u. and angle zero; tie withdrawal equal to the served
    /// system's total load at `t`.
    pub fn nominal(net: &Network, scenario: &Scenario, t: f64) -> Result<Self> {
        let mut tie_withdrawal = Vec::with_capacity(net.ds.len());
        for k in 0..net.ds.len() {
            let prm = scenario.bind(net, k + 1)?.eval(t)?;
            tie_withdrawal.push((prm.pd.iter().sum(), prm.qd.iter().sum()));
        }
        Ok(Self {
            root_voltage: vec![(1.0, 0.0); net.ds.len()],
            tie_withdrawal,
        })
    }

    /// Boundary values of a state of the coupled problem built by
    /// [`crate::grid::build_nlp`].
    pub fn from_coupled(net: &Network, central: &GridNlp, x: &[f64]) -> Result<Self> {
        let value = |label: VarLabel| {
            central.var_of(label).map(|i| x[i]).ok_or_else(|| {
                Error::InvalidArgument(format!("coupled problem has no variable {label:?}"))
            })
        };
        let mut out = Self {
            root_voltage: Vec::new(),
            tie_withdrawal: Vec::new(),
        };
        for k in 0..net.ds.len() {
            let bus = ts_bus_of(net, k)?;
            let e = value(VarLabel::E { sys: 0, bus })?;
            // the reference bus angle is not a variable
            let f = central
                .var_of(VarLabel::F { sys: 0, bus })
                .map_or(0.0, |i| x[i]);
            out.root_voltage.push((e.hypot(f), f.atan2(e)));
            out.tie_withdrawal.push((
                value(VarLabel::TieP { ds: k })?,
                value(VarLabel::TieQ { ds: k })?,
            ));
        }
        Ok(out)
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let n = net.ds.len();
        if self.root_voltage.len() != n || self.tie_withdrawal.len() != n {
            return Err(Error::InvalidArgument(format!(
                "assumption covers {} roots and {} ties, network has {n} distribution systems",
                self.root_voltage.len(),
                self.tie_withdrawal.len()
            )));
        }
        for (k, ds) in net.ds.iter().enumerate() {
            let (v, a) = self.root_voltage[k];
            let root = &ds.system.buses[ds.root_index()];
            let (p, q) = self.tie_withdrawal[k];
            if !(v >= root.vmin && v <= root.vmax) || !a.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "root voltage {v}∠{a} of distribution system {} outside [{}, {}]",
                    ds.id, root.vmin, root.vmax
                )));
            }
            if !(p.is_finite() && q.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite tie withdrawal for system {}",
                    ds.id
                )));
            }
        }
        Ok(())
    }
}

fn ts_bus_of(net: &Network, k: usize) -> Result<usize> {
    let id = net.ds[k].id;
    let tie = net
        .ties
        .iter()
        .find(|t| t.ds_id == id)
        .ok_or_else(|| Error::validation(format!("distribution system {id}"), "no tie line"))?;
    net.ts
        .bus_index(tie.ts_bus)
        .ok_or_else(|| Error::validation(format!("tie of system {id}"), "unknown transmission bus"))
}

/// Converged agent problems under one assumption.
#[derive(Debug, Clone)]
pub struct IndependentSolution {
    pub ts: PrimalDualState,
    pub ds: Vec<PrimalDualState>,
    pub ts_objective: f64,
    pub ds_objectives: Vec<f64>,
    /// Sum of all agent objectives.
    pub objective: f64,
    /// Realized distribution import minus the assumed withdrawal, `(P, Q)`.
    pub mismatch: Vec<(f64, f64)>,
    pub iterations: usize,
}

impl IndependentSolution {
    /// Largest absolute tie power mismatch.
    pub fn max_mismatch(&self) -> f64 {
        self.mismatch
            .iter()
            .map(|m| m.0.abs().max(m.1.abs()))
            .fold(0.0, f64::max)
    }
}

/// Agent problems of the uncoordinated baseline.
#[derive(Debug, Clone)]
pub struct IndependentProblems {
    pub ts: GridNlp,
    pub ds: Vec<GridNlp>,
    assumption: BoundaryAssumption,
}

impl IndependentProblems {
    pub fn new(net: &Network, scenario: &Scenario, assumption: BoundaryAssumption) -> Result<Self> {
        assumption.validate(net)?;
        let ts = GridNlp::transmission(
            net,
            scenario,
            TieMode::Fixed(assumption.tie_withdrawal.clone()),
        )?;
        let ds = assumption
            .root_voltage
            .iter()
            .enumerate()
            .map(|(k, &(v, a))| {
                GridNlp::distribution(net, k, scenario, DsRoot::Fixed(v * a.cos(), v * a.sin()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { ts, ds, assumption })
    }

    pub fn assumption(&self) -> &BoundaryAssumption {
        &self.assumption
    }

    /// Cold starts for every agent at `t`.
    pub fn cold_start(&self, t: f64) -> Result<(PrimalDualState, Vec<PrimalDualState>)> {
        let start = |p: &GridNlp| initial_state(p, p.initial_point(t)?, t, COLD_MU);
        Ok((
            start(&self.ts)?,
            self.ds.iter().map(start).collect::<Result<_>>()?,
        ))
    }

    /// Solves every agent at `t` from the given starts.
    pub fn solve(
        &self,
        t: f64,
        ts_start: PrimalDualState,
        ds_start: Vec<PrimalDualState>,
        cfg: &PdipmConfig,
    ) -> Result<IndependentSolution> {
        let mut lu = SparseLu::new();
        let ts = solve_converged_with(&self.ts, t, ts_start, cfg, &mut lu)?;
        let ts_objective = self.ts.objective(&ts.state.x, t)?;
        let mut iterations = ts.iterations;
        let mut ds = Vec::with_capacity(self.ds.len());
        let mut ds_objectives = Vec::with_capacity(self.ds.len());
        let mut mismatch = Vec::with_capacity(self.ds.len());
        for (k, (p, s0)) in self.ds.iter().zip(ds_start).enumerate() {
            let c = solve_converged_with(p, t, s0, cfg, &mut SparseLu::new())?;
            iterations = iterations.max(c.iterations);
            ds_objectives.push(p.objective(&c.state.x, t)?);
            let tie = |label| p.var_of(label).map(|i| c.state.x[i]).unwrap_or(0.0);
            let (ap, aq) = self.assumption.tie_withdrawal[k];
            mismatch.push((
                tie(VarLabel::TieP { ds: k }) - ap,
                tie(VarLabel::TieQ { ds: k }) - aq,
            ));
            ds.push(c.state);
        }
        let objective = ts_objective + ds_objectives.iter().sum::<f64>();
        debug!("independent objective {objective:.6} at t = {t}");
        Ok(IndependentSolution {
            ts: ts.state,
            ds,
            ts_objective,
            ds_objectives,
            objective,
            mismatch,
            iterations,
        })
    }
}

/// Every agent solved from a cold start at `t` under `assumption`.
pub fn independent_solve(
    net: &Network,
    scenario: &Scenario,
    t: f64,
    assumption: &BoundaryAssumption,
    cfg: &PdipmConfig,
) -> Result<IndependentSolution> {
    let probs = IndependentProblems::new(net, scenario, assumption.clone())?;
    let (ts, ds) = probs.cold_start(t)?;
    probs.solve(t, ts, ds, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_nlp, load_case};
    use crate::pdipm::solve_converged;
    use crate::scenario::make_synthetic;
    use std::path::Path;

    fn case(name: &str) -> Network {
        load_case(
            Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("cases")
                .join(name),
        )
        .unwrap()
    }

    fn coordinated(net: &Network, sc: &Scenario, t: f64) -> (GridNlp, PrimalDualState, f64) {
        let p = build_nlp(net, sc).unwrap();
        let s0 = initial_state(&p, p.initial_point(t).unwrap(), t, COLD_MU).unwrap();
        let c = solve_converged(&p, t, s0, &PdipmConfig::default()).unwrap();
        let obj = p.objective(&c.state.x, t).unwrap();
        (p, c.state, obj)
    }

    #[test]
    fn nominal_assumption_values() {
        let net = case("t3d3x3.json");
        let sc = Scenario::constant(&net, (0.0, 10.0)).unwrap();
        let a = BoundaryAssumption::nominal(&net, &sc, 1.0).unwrap();
        assert_eq!(a.root_voltage, vec![(1.0, 0.0); 3]);
        for (k, ds) in net.ds.iter().enumerate() {
            let (p, q) = ds.system.total_load();
            assert!((a.tie_withdrawal[k].0 - p).abs() < 1e-12);
            assert!((a.tie_withdrawal[k].1 - q).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_root_rejected() {
        let net = case("small.json");
        let sc = Scenario::constant(&net, (0.0, 10.0)).unwrap();
        let mut a = BoundaryAssumption::nominal(&net, &sc, 0.0).unwrap();
        a.root_voltage[0].0 = 1.5;
        let err = independent_solve(&net, &sc, 0.0, &a, &PdipmConfig::default()).unwrap_err();
        assert!(err.is_input_error());
        a.root_voltage.clear();
        assert!(a.validate(&net).is_err());
    }

    #[test]
    fn coordinated_boundary_reproduces_coordinated_objective() {
        // no distribution generators, so a free import is priced the same
        // way in both settings
        let net = case("t9d33x3.json");
        let sc = make_synthetic(&net, "noon-peak", 0.0, 3).unwrap();
        let t = 300.0;
        let (p, s, obj) = coordinated(&net, &sc, t);
        let a = BoundaryAssumption::from_coupled(&net, &p, &s.x).unwrap();
        let ind = independent_solve(&net, &sc, t, &a, &PdipmConfig::default()).unwrap();
        assert!(
            (ind.objective - obj).abs() <= 1e-6 * obj.abs().max(1.0),
            "{} vs {obj}",
            ind.objective
        );
    }

    #[test]
    fn nominal_assumption_is_dominated() {
        for (name, shape) in [
            ("small.json", "noon-peak"),
            ("t3d3x3.json", "cloud-transient"),
        ] {
            let net = case(name);
            let sc = make_synthetic(&net, shape, 0.01, 5).unwrap();
            for t in [60.0, 300.0, 540.0] {
                let (_, _, obj) = coordinated(&net, &sc, t);
                let a = BoundaryAssumption::nominal(&net, &sc, t).unwrap();
                let ind = independent_solve(&net, &sc, t, &a, &PdipmConfig::default()).unwrap();
                assert!(
                    obj <= ind.objective + 1e-8,
                    "{name} t={t}: {obj} > {}",
                    ind.objective
                );
            }
        }
    }

    #[test]
    fn unloaded_network_gives_identical_dispatch() {
        let mut net = case("small.json");
        for b in net
            .ts
            .buses
            .iter_mut()
            .chain(net.ds.iter_mut().flat_map(|d| d.system.buses.iter_mut()))
        {
            b.pd = 0.0;
            b.qd = 0.0;
        }
        net.ds[0].system.res.clear();
        let net = net.validated().unwrap();
        let sc = Scenario::constant(&net, (0.0, 10.0)).unwrap();
        let (_, _, obj) = coordinated(&net, &sc, 1.0);
        let a = BoundaryAssumption::nominal(&net, &sc, 1.0).unwrap();
        let ind = independent_solve(&net, &sc, 1.0, &a, &PdipmConfig::default()).unwrap();
        assert!(
            (ind.objective - obj).abs() < 1e-5,
            "{} vs {obj}",
            ind.objective
        );
    }
}
