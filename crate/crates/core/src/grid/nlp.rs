//! Grid optimal power flow as an [`NlpProblem`].
//!
//! A `GridNlp` stacks one section per system. Each section contributes, in
//! order:
//!
//! * equality rows: active and reactive balance per bus, then (transmission
//!   sections only) a reference row fixing `f = 0` at the first generator bus;
//! * inequality rows: generator active limits; per RES unit the availability
//!   cap, the two power-factor rows and the capability circle, all divided by
//!   the unit rating; squared voltage magnitude for every bus with free
//!   voltage other than a distribution root; squared apparent flow at the
//!   sending end of every branch relative to its limit.
//!
//! One-sided rows get a loose opposite bound of `LOOSE`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::grid::flow::{flow_derivs, flow_hessians};
use crate::grid::Network;
use crate::linalg::Triplets;
use crate::nlp::{Dims, NlpProblem, PrimalDualState};
use crate::scenario::{Scenario, SystemBinding, SystemParams};

const LOOSE: f64 = 1e6;

/// A voltage component or tie transfer is either a decision variable or a
/// fixed number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Slot {
    Var(usize),
    Fixed(f64),
}

impl Slot {
    fn value(self, x: &[f64]) -> f64 {
        match self {
            Slot::Var(i) => x[i],
            Slot::Fixed(v) => v,
        }
    }

    fn var(self) -> Option<usize> {
        match self {
            Slot::Var(i) => Some(i),
            Slot::Fixed(_) => None,
        }
    }
}

/// Physical meaning of a decision variable. `sys` is the uniform system
/// index, `ds` the distribution system position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarLabel {
    E { sys: usize, bus: usize },
    F { sys: usize, bus: usize },
    Pg { sys: usize, unit: usize },
    Qg { sys: usize, unit: usize },
    Pres { sys: usize, unit: usize },
    Qres { sys: usize, unit: usize },
    TieP { ds: usize },
    TieQ { ds: usize },
}

/// How the transmission side sees its ties.
#[derive(Debug, Clone, PartialEq)]
pub enum TieMode {
    /// Tie transfers are decision variables.
    Variables,
    /// Fixed withdrawals `(P, Q)` per distribution system.
    Fixed(Vec<(f64, f64)>),
}

/// How a stand-alone distribution problem sees its root bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DsRoot {
    /// Root voltage and tie transfer are trailing decision variables
    /// `[e_b, f_b, P_tie, Q_tie]`.
    Boundary,
    /// Root voltage fixed to `(e, f)`; the tie import stays free.
    Fixed(f64, f64),
}

#[derive(Debug, Clone)]
struct BusRow {
    e: Slot,
    f: Slot,
    withdrawal: (f64, f64),
}

#[derive(Debug, Clone)]
struct BranchRow {
    from: usize,
    to: usize,
    g: f64,
    b: f64,
    smax: f64,
}

#[derive(Debug, Clone)]
struct GenRow {
    bus: usize,
    p: usize,
    q: usize,
    c2: f64,
    c1: f64,
    c0: f64,
}

#[derive(Debug, Clone)]
struct ResRow {
    bus: usize,
    p: usize,
    q: usize,
    s: f64,
    tan: f64,
    cp: f64,
    cq: f64,
    section: usize,
    local: usize,
}

#[derive(Debug, Clone)]
struct TieRow {
    bus: usize,
    p: usize,
    q: usize,
    sign: f64,
}

#[derive(Debug, Clone, Copy)]
enum IneqKind {
    GenP(usize),
    ResAvail(usize),
    ResPfLow(usize),
    ResPfHigh(usize),
    ResCap(usize),
    Volt(usize),
    Flow(usize),
}

#[derive(Debug, Clone)]
struct Section {
    binding: SystemBinding,
    buses: Range<usize>,
    reference: Option<(usize, usize)>,
}

/// Starting value of a tie variable: the served system's load at `t`.
#[derive(Debug, Clone)]
struct TieStart {
    p: usize,
    q: usize,
    binding: SystemBinding,
}

#[derive(Debug, Clone)]
pub struct GridNlp {
    labels: Vec<VarLabel>,
    sections: Vec<Section>,
    buses: Vec<BusRow>,
    branches: Vec<BranchRow>,
    gens: Vec<GenRow>,
    res: Vec<ResRow>,
    ties: Vec<TieRow>,
    ineq: Vec<IneqKind>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    gen_mid: Vec<f64>,
    tie_starts: Vec<TieStart>,
    m_eq: usize,
}

/// Incremental construction of a [`GridNlp`].
pub struct GridNlpBuilder<'a> {
    net: &'a Network,
    scenario: &'a Scenario,
    nlp: GridNlp,
}

/// Units of one system with their allocated variables.
struct UnitVars {
    gens: Vec<(usize, usize)>,
    res: Vec<(usize, usize)>,
}

impl<'a> GridNlpBuilder<'a> {
    pub fn new(net: &'a Network, scenario: &'a Scenario) -> Self {
        Self {
            net,
            scenario,
            nlp: GridNlp {
                labels: Vec::new(),
                sections: Vec::new(),
                buses: Vec::new(),
                branches: Vec::new(),
                gens: Vec::new(),
                res: Vec::new(),
                ties: Vec::new(),
                ineq: Vec::new(),
                lo: Vec::new(),
                hi: Vec::new(),
                gen_mid: Vec::new(),
                tie_starts: Vec::new(),
                m_eq: 0,
            },
        }
    }

    fn alloc(&mut self, label: VarLabel) -> usize {
        self.nlp.labels.push(label);
        self.nlp.labels.len() - 1
    }

    fn alloc_voltage(&mut self, sys: usize, bus: usize) -> (Slot, Slot) {
        let e = self.alloc(VarLabel::E { sys, bus });
        let f = self.alloc(VarLabel::F { sys, bus });
        (Slot::Var(e), Slot::Var(f))
    }

    fn alloc_units(&mut self, sys: usize) -> UnitVars {
        let s = self.net.system(sys);
        let gens = (0..s.generators.len())
            .map(|unit| {
                (
                    self.alloc(VarLabel::Pg { sys, unit }),
                    self.alloc(VarLabel::Qg { sys, unit }),
                )
            })
            .collect();
        let res = (0..s.res.len())
            .map(|unit| {
                (
                    self.alloc(VarLabel::Pres { sys, unit }),
                    self.alloc(VarLabel::Qres { sys, unit }),
                )
            })
            .collect();
        UnitVars { gens, res }
    }

    fn alloc_tie(&mut self, ds: usize) -> (usize, usize) {
        let p = self.alloc(VarLabel::TieP { ds });
        let q = self.alloc(VarLabel::TieQ { ds });
        let binding = self
            .scenario
            .bind(self.net, ds + 1)
            .expect("bound before allocating ties");
        self.nlp.tie_starts.push(TieStart { p, q, binding });
        (p, q)
    }

    /// Adds the rows of system `sys`.
    ///
    /// `ties` lists `(local bus, P var, Q var, sign)` with sign `+1` for an
    /// injection; `withdrawals` lists fixed `(local bus, (P, Q))` loads.
    #[allow(clippy::too_many_arguments)]
    fn add_system(
        &mut self,
        sys: usize,
        voltages: Vec<(Slot, Slot)>,
        units: UnitVars,
        ties: Vec<(usize, usize, usize, f64)>,
        withdrawals: Vec<(usize, (f64, f64))>,
        reference: bool,
        no_vlim: Option<usize>,
    ) -> Result<()> {
        let system = self.net.system(sys);
        let binding = self.scenario.bind(self.net, sys)?;
        let section = self.nlp.sections.len();
        let bus0 = self.nlp.buses.len();
        for (k, (e, f)) in voltages.iter().enumerate() {
            let withdrawal = withdrawals
                .iter()
                .filter(|(b, _)| *b == k)
                .fold((0.0, 0.0), |acc, (_, (p, q))| (acc.0 + p, acc.1 + q));
            self.nlp.buses.push(BusRow {
                e: *e,
                f: *f,
                withdrawal,
            });
        }
        let eq0 = self.nlp.m_eq;
        self.nlp.m_eq += 2 * system.buses.len();
        let reference = if reference {
            let bus = system
                .bus_index(system.generators[0].bus)
                .expect("validated generator bus");
            let row = self.nlp.m_eq;
            self.nlp.m_eq += 1;
            if self.nlp.buses[bus0 + bus].f.var().is_none() {
                return Err(Error::InvalidArgument(
                    "reference bus angle is fixed".into(),
                ));
            }
            Some((bus0 + bus, row))
        } else {
            None
        };
        debug_assert_eq!(
            eq0,
            2 * bus0
                + self
                    .nlp
                    .sections
                    .iter()
                    .filter(|s| s.reference.is_some())
                    .count()
        );

        let push_row = |nlp: &mut GridNlp, kind, lo, hi| {
            nlp.ineq.push(kind);
            nlp.lo.push(lo);
            nlp.hi.push(hi);
        };

        for (k, gen) in system.generators.iter().enumerate() {
            let id = self.nlp.gens.len();
            let (p, q) = units.gens[k];
            self.nlp.gens.push(GenRow {
                bus: bus0 + system.bus_index(gen.bus).expect("validated"),
                p,
                q,
                c2: gen.c2,
                c1: gen.c1,
                c0: gen.c0,
            });
            self.nlp.gen_mid.push(0.5 * (gen.pmin + gen.pmax));
            push_row(&mut self.nlp, IneqKind::GenP(id), gen.pmin, gen.pmax);
        }
        for (k, unit) in system.res.iter().enumerate() {
            let id = self.nlp.res.len();
            let (p, q) = units.res[k];
            self.nlp.res.push(ResRow {
                bus: bus0 + system.bus_index(unit.bus).expect("validated"),
                p,
                q,
                s: unit.s_rated,
                tan: unit.tan_theta,
                cp: unit.cp,
                cq: unit.cq,
                section,
                local: k,
            });
            push_row(&mut self.nlp, IneqKind::ResAvail(id), -LOOSE, 0.0);
            push_row(&mut self.nlp, IneqKind::ResPfLow(id), 0.0, LOOSE);
            push_row(&mut self.nlp, IneqKind::ResPfHigh(id), 0.0, LOOSE);
            push_row(&mut self.nlp, IneqKind::ResCap(id), -LOOSE, 1.0);
        }
        for (k, bus) in system.buses.iter().enumerate() {
            let row = &self.nlp.buses[bus0 + k];
            if no_vlim == Some(k) || row.e.var().is_none() {
                continue;
            }
            push_row(
                &mut self.nlp,
                IneqKind::Volt(bus0 + k),
                bus.vmin * bus.vmin,
                bus.vmax * bus.vmax,
            );
        }
        for br in &system.branches {
            let id = self.nlp.branches.len();
            self.nlp.branches.push(BranchRow {
                from: bus0 + system.bus_index(br.from).expect("validated"),
                to: bus0 + system.bus_index(br.to).expect("validated"),
                g: br.g,
                b: br.b,
                smax: br.smax,
            });
            push_row(&mut self.nlp, IneqKind::Flow(id), -LOOSE, 1.0);
        }
        for (bus, p, q, sign) in ties {
            self.nlp.ties.push(TieRow {
                bus: bus0 + bus,
                p,
                q,
                sign,
            });
        }
        self.nlp.sections.push(Section {
            binding,
            buses: bus0..bus0 + system.buses.len(),
            reference,
        });
        Ok(())
    }

    /// Transmission section. Returns the tie variables per distribution
    /// system when ties are variables.
    fn add_transmission(&mut self, ties: &TieMode) -> Result<Vec<(usize, usize)>> {
        let net = self.net;
        for k in 0..net.ds.len() {
            self.scenario.bind(net, k + 1)?;
        }
        let voltages: Vec<_> = (0..net.ts.buses.len())
            .map(|b| self.alloc_voltage(0, b))
            .collect();
        let units = self.alloc_units(0);
        let mut tie_rows = Vec::new();
        let mut withdrawals = Vec::new();
        let mut tie_vars = Vec::new();
        match ties {
            TieMode::Variables => {
                for k in 0..net.ds.len() {
                    let (p, q) = self.alloc_tie(k);
                    let bus = net.ts.bus_index(net.tie_of(k).ts_bus).expect("validated");
                    tie_rows.push((bus, p, q, -1.0));
                    tie_vars.push((p, q));
                }
            }
            TieMode::Fixed(values) => {
                if values.len() != net.ds.len() {
                    return Err(Error::DimensionMismatch {
                        what: "fixed tie withdrawals",
                        expected: net.ds.len(),
                        found: values.len(),
                    });
                }
                for (k, v) in values.iter().enumerate() {
                    let bus = net.ts.bus_index(net.tie_of(k).ts_bus).expect("validated");
                    withdrawals.push((bus, *v));
                }
            }
        }
        self.add_system(0, voltages, units, tie_rows, withdrawals, true, None)?;
        Ok(tie_vars)
    }

    pub fn finish(self) -> GridNlp {
        self.nlp
    }
}

/// Centralized coupled problem: transmission variables first, then each
/// distribution system's internal variables. Distribution roots share the
/// voltage variables of their transmission bus.
pub fn build_nlp(net: &Network, scenario: &Scenario) -> Result<GridNlp> {
    let mut b = GridNlpBuilder::new(net, scenario);
    let ts_bus0 = 0;
    let tie_vars = b.add_transmission(&TieMode::Variables)?;
    for (k, ds) in net.ds.iter().enumerate() {
        let sys = k + 1;
        let root = ds.root_index();
        let ts_bus = net.ts.bus_index(net.tie_of(k).ts_bus).expect("validated");
        let shared = {
            let row = &b.nlp.buses[ts_bus0 + ts_bus];
            (row.e, row.f)
        };
        let voltages: Vec<_> = (0..ds.system.buses.len())
            .map(|i| {
                if i == root {
                    shared
                } else {
                    b.alloc_voltage(sys, i)
                }
            })
            .collect();
        let units = b.alloc_units(sys);
        let (p, q) = tie_vars[k];
        b.add_system(
            sys,
            voltages,
            units,
            vec![(root, p, q, 1.0)],
            vec![],
            false,
            Some(root),
        )?;
    }
    Ok(b.finish())
}

impl GridNlp {
    /// Transmission-only problem. With [`TieMode::Variables`] the layout is
    /// identical to the transmission prefix of [`build_nlp`].
    pub fn transmission(net: &Network, scenario: &Scenario, ties: TieMode) -> Result<GridNlp> {
        let mut b = GridNlpBuilder::new(net, scenario);
        b.add_transmission(&ties)?;
        Ok(b.finish())
    }

    /// Stand-alone problem of the `k`-th distribution system. Internal
    /// variables follow the order used in [`build_nlp`].
    pub fn distribution(
        net: &Network,
        k: usize,
        scenario: &Scenario,
        root: DsRoot,
    ) -> Result<GridNlp> {
        let ds = net.ds.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!("no distribution system at position {k}"))
        })?;
        let sys = k + 1;
        let r = ds.root_index();
        let mut b = GridNlpBuilder::new(net, scenario);
        scenario.bind(net, sys)?;
        let mut voltages: Vec<_> = (0..ds.system.buses.len())
            .map(|i| {
                if i == r {
                    (Slot::Fixed(1.0), Slot::Fixed(0.0))
                } else {
                    b.alloc_voltage(sys, i)
                }
            })
            .collect();
        let units = b.alloc_units(sys);
        match root {
            DsRoot::Boundary => {
                voltages[r] = b.alloc_voltage(sys, r);
            }
            DsRoot::Fixed(e, f) => voltages[r] = (Slot::Fixed(e), Slot::Fixed(f)),
        }
        let (p, q) = b.alloc_tie(k);
        b.add_system(
            sys,
            voltages,
            units,
            vec![(r, p, q, 1.0)],
            vec![],
            false,
            Some(r),
        )?;
        Ok(b.finish())
    }

    pub fn labels(&self) -> &[VarLabel] {
        &self.labels
    }

    pub fn var_of(&self, label: VarLabel) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }

    fn params(&self, t: f64) -> Result<Vec<SystemParams>> {
        self.sections.iter().map(|s| s.binding.eval(t)).collect()
    }

    /// Load at bus row `i` from the per-section parameters.
    fn bus_load(&self, params: &[SystemParams], i: usize) -> (f64, f64, f64, f64) {
        for (s, sec) in self.sections.iter().enumerate() {
            if sec.buses.contains(&i) {
                let k = i - sec.buses.start;
                let p = &params[s];
                return (p.pd[k], p.qd[k], p.dpd[k], p.dqd[k]);
            }
        }
        unreachable!("bus row belongs to a section")
    }

    fn pav(&self, params: &[SystemParams], r: &ResRow) -> (f64, f64) {
        let p = &params[r.section];
        (p.pav[r.local], p.dpav[r.local])
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                what: "primal vector",
                expected: self.labels.len(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn branch_slots(&self, br: &BranchRow, reverse: bool) -> [Slot; 4] {
        let (i, j) = if reverse {
            (br.to, br.from)
        } else {
            (br.from, br.to)
        };
        let (a, b) = (&self.buses[i], &self.buses[j]);
        [a.e, a.f, b.e, b.f]
    }

    /// Interior-friendly start: flat voltages, generators mid-range, RES at
    /// availability, ties at the served load.
    pub fn initial_point(&self, t: f64) -> Result<Vec<f64>> {
        let params = self.params(t)?;
        let mut x = vec![0.0; self.labels.len()];
        for bus in &self.buses {
            if let Slot::Var(i) = bus.e {
                x[i] = 1.0;
            }
        }
        for (g, mid) in self.gens.iter().zip(&self.gen_mid) {
            x[g.p] = *mid;
        }
        for r in &self.res {
            x[r.p] = self.pav(&params, r).0;
        }
        for tie in &self.tie_starts {
            let prm = tie.binding.eval(t)?;
            x[tie.p] = prm.pd.iter().sum();
            x[tie.q] = prm.qd.iter().sum();
        }
        Ok(x)
    }

    /// Row-wise generator and RES objective contributions are summed here;
    /// exposed separately for reporting.
    /// Random strictly interior primal-dual point near the initial point,
    /// for exercising the linear algebra away from optimality.
    pub fn random_interior_state(
        &self,
        rng: &mut impl rand::Rng,
        t: f64,
    ) -> Result<PrimalDualState> {
        let d = self.dims();
        let mut x = self.initial_point(t)?;
        for v in &mut x {
            *v += 0.03 * rng.random_range(-1.0..1.0);
        }
        // slacks near the bound gaps and multipliers near complementarity,
        // so residuals stay moderate even on the loose rows
        let h = self.ineq_values(&x, t)?;
        let mut gap = |b: f64| b.max(0.0) + rng.random_range(0.05..3.0);
        let u: Vec<f64> = (0..d.m_ineq).map(|i| gap(self.hi[i] - h[i])).collect();
        let l: Vec<f64> = (0..d.m_ineq).map(|i| gap(h[i] - self.lo[i])).collect();
        let w = u.iter().map(|u| -rng.random_range(0.05..3.0) / u).collect();
        let z = l.iter().map(|l| rng.random_range(0.05..3.0) / l).collect();
        Ok(PrimalDualState {
            x,
            y: (0..d.m_eq).map(|_| rng.random_range(-10.0..10.0)).collect(),
            w,
            z,
            u,
            l,
            mu: rng.random_range(0.0..0.5),
        })
    }

    pub fn generation_cost(&self, x: &[f64]) -> f64 {
        self.gens
            .iter()
            .map(|g| (g.c2 * x[g.p] + g.c1) * x[g.p] + g.c0)
            .sum()
    }
}

/// Adds `scale * m` over the variable slots of a 4-vector.
fn add_quad(out: &mut Triplets, slots: &[Slot; 4], m: &[[f64; 4]; 4], scale: f64) {
    for r in 0..4 {
        let Some(i) = slots[r].var() else { continue };
        for c in 0..4 {
            let Some(j) = slots[c].var() else { continue };
            if m[r][c] != 0.0 {
                out.push(i, j, scale * m[r][c]);
            }
        }
    }
}

fn outer(a: &[f64; 4], b: &[f64; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            m[r][c] = a[r] * b[c];
        }
    }
    m
}

impl NlpProblem for GridNlp {
    fn dims(&self) -> Dims {
        Dims {
            n: self.labels.len(),
            m_eq: self.m_eq,
            m_ineq: self.ineq.len(),
        }
    }

    fn objective(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_x(x)?;
        let params = self.params(t)?;
        let mut f = self.generation_cost(x);
        for r in &self.res {
            let (pav, _) = self.pav(&params, r);
            f += r.cp * (pav - x[r.p]).powi(2) + r.cq * x[r.q].powi(2);
        }
        Ok(f)
    }

    fn gradient(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let params = self.params(t)?;
        let mut g = vec![0.0; x.len()];
        for gen in &self.gens {
            g[gen.p] += 2.0 * gen.c2 * x[gen.p] + gen.c1;
        }
        for r in &self.res {
            let (pav, _) = self.pav(&params, r);
            g[r.p] += -2.0 * r.cp * (pav - x[r.p]);
            g[r.q] += 2.0 * r.cq * x[r.q];
        }
        Ok(g)
    }

    fn objective_hessian(&self, x: &[f64], _t: f64) -> Result<Triplets> {
        self.check_x(x)?;
        let n = x.len();
        let mut h = Triplets::new(n, n);
        for gen in &self.gens {
            h.push(gen.p, gen.p, 2.0 * gen.c2);
        }
        for r in &self.res {
            h.push(r.p, r.p, 2.0 * r.cp);
            h.push(r.q, r.q, 2.0 * r.cq);
        }
        Ok(h)
    }

    fn eq_values(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let params = self.params(t)?;
        let mut g = vec![0.0; self.m_eq];
        let row = |bus: usize| self.eq_row(bus);
        for (i, bus) in self.buses.iter().enumerate() {
            let (pd, qd, _, _) = self.bus_load(&params, i);
            g[row(i)] -= pd + bus.withdrawal.0;
            g[row(i) + 1] -= qd + bus.withdrawal.1;
        }
        for gen in &self.gens {
            g[row(gen.bus)] += x[gen.p];
            g[row(gen.bus) + 1] += x[gen.q];
        }
        for r in &self.res {
            g[row(r.bus)] += x[r.p];
            g[row(r.bus) + 1] += x[r.q];
        }
        for tie in &self.ties {
            g[row(tie.bus)] += tie.sign * x[tie.p];
            g[row(tie.bus) + 1] += tie.sign * x[tie.q];
        }
        for br in &self.branches {
            for (reverse, bus) in [(false, br.from), (true, br.to)] {
                let v = self.branch_slots(br, reverse).map(|s| s.value(x));
                let (p, q) = crate::grid::branch_flow(v[0], v[1], v[2], v[3], br.g, br.b);
                g[row(bus)] -= p;
                g[row(bus) + 1] -= q;
            }
        }
        for sec in &self.sections {
            if let Some((bus, r)) = sec.reference {
                g[r] = self.buses[bus].f.value(x);
            }
        }
        Ok(g)
    }

    fn eq_jacobian(&self, x: &[f64], _t: f64) -> Result<Triplets> {
        self.check_x(x)?;
        let mut j = Triplets::with_capacity(
            self.m_eq,
            x.len(),
            16 * self.branches.len() + 4 * self.gens.len(),
        );
        for gen in &self.gens {
            j.push(self.eq_row(gen.bus), gen.p, 1.0);
            j.push(self.eq_row(gen.bus) + 1, gen.q, 1.0);
        }
        for r in &self.res {
            j.push(self.eq_row(r.bus), r.p, 1.0);
            j.push(self.eq_row(r.bus) + 1, r.q, 1.0);
        }
        for tie in &self.ties {
            j.push(self.eq_row(tie.bus), tie.p, tie.sign);
            j.push(self.eq_row(tie.bus) + 1, tie.q, tie.sign);
        }
        for br in &self.branches {
            for (reverse, bus) in [(false, br.from), (true, br.to)] {
                let slots = self.branch_slots(br, reverse);
                let d = flow_derivs(slots.map(|s| s.value(x)), br.g, br.b);
                let row = self.eq_row(bus);
                for k in 0..4 {
                    if let Some(c) = slots[k].var() {
                        j.push(row, c, -d.dp[k]);
                        j.push(row + 1, c, -d.dq[k]);
                    }
                }
            }
        }
        for sec in &self.sections {
            if let Some((bus, r)) = sec.reference {
                j.push(r, self.buses[bus].f.var().expect("checked at build"), 1.0);
            }
        }
        Ok(j)
    }

    fn eq_hessian(&self, x: &[f64], _t: f64, y: &[f64]) -> Result<Triplets> {
        self.check_x(x)?;
        let n = x.len();
        let mut h = Triplets::with_capacity(n, n, 24 * self.branches.len());
        for br in &self.branches {
            let (hp, hq) = flow_hessians(br.g, br.b);
            for (reverse, bus) in [(false, br.from), (true, br.to)] {
                let slots = self.branch_slots(br, reverse);
                let row = self.eq_row(bus);
                add_quad(&mut h, &slots, &hp, -y[row]);
                add_quad(&mut h, &slots, &hq, -y[row + 1]);
            }
        }
        Ok(h)
    }

    fn ineq_values(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let params = self.params(t)?;
        let out = self
            .ineq
            .iter()
            .map(|kind| match *kind {
                IneqKind::GenP(k) => x[self.gens[k].p],
                IneqKind::ResAvail(k) => {
                    let r = &self.res[k];
                    (x[r.p] - self.pav(&params, r).0) / r.s
                }
                IneqKind::ResPfLow(k) => {
                    let r = &self.res[k];
                    (x[r.p] * r.tan - x[r.q]) / r.s
                }
                IneqKind::ResPfHigh(k) => {
                    let r = &self.res[k];
                    (x[r.p] * r.tan + x[r.q]) / r.s
                }
                IneqKind::ResCap(k) => {
                    let r = &self.res[k];
                    (x[r.p].powi(2) + x[r.q].powi(2)) / (r.s * r.s)
                }
                IneqKind::Volt(i) => {
                    let b = &self.buses[i];
                    b.e.value(x).powi(2) + b.f.value(x).powi(2)
                }
                IneqKind::Flow(k) => {
                    let br = &self.branches[k];
                    let v = self.branch_slots(br, false).map(|s| s.value(x));
                    let (p, q) = crate::grid::branch_flow(v[0], v[1], v[2], v[3], br.g, br.b);
                    (p * p + q * q) / (br.smax * br.smax)
                }
            })
            .collect();
        Ok(out)
    }

    fn ineq_jacobian(&self, x: &[f64], _t: f64) -> Result<Triplets> {
        self.check_x(x)?;
        let mut j = Triplets::with_capacity(self.ineq.len(), x.len(), 4 * self.ineq.len());
        for (row, kind) in self.ineq.iter().enumerate() {
            match *kind {
                IneqKind::GenP(k) => j.push(row, self.gens[k].p, 1.0),
                IneqKind::ResAvail(k) => {
                    let r = &self.res[k];
                    j.push(row, r.p, 1.0 / r.s);
                }
                IneqKind::ResPfLow(k) => {
                    let r = &self.res[k];
                    j.push(row, r.p, r.tan / r.s);
                    j.push(row, r.q, -1.0 / r.s);
                }
                IneqKind::ResPfHigh(k) => {
                    let r = &self.res[k];
                    j.push(row, r.p, r.tan / r.s);
                    j.push(row, r.q, 1.0 / r.s);
                }
                IneqKind::ResCap(k) => {
                    let r = &self.res[k];
                    let s2 = r.s * r.s;
                    j.push(row, r.p, 2.0 * x[r.p] / s2);
                    j.push(row, r.q, 2.0 * x[r.q] / s2);
                }
                IneqKind::Volt(i) => {
                    let b = &self.buses[i];
                    for s in [b.e, b.f] {
                        if let Some(c) = s.var() {
                            j.push(row, c, 2.0 * x[c]);
                        }
                    }
                }
                IneqKind::Flow(k) => {
                    let br = &self.branches[k];
                    let slots = self.branch_slots(br, false);
                    let d = flow_derivs(slots.map(|s| s.value(x)), br.g, br.b);
                    let s2 = br.smax * br.smax;
                    for m in 0..4 {
                        if let Some(c) = slots[m].var() {
                            j.push(row, c, 2.0 * (d.p * d.dp[m] + d.q * d.dq[m]) / s2);
                        }
                    }
                }
            }
        }
        Ok(j)
    }

    fn ineq_hessian(&self, x: &[f64], _t: f64, v: &[f64]) -> Result<Triplets> {
        self.check_x(x)?;
        let n = x.len();
        let mut h = Triplets::with_capacity(n, n, 16 * self.branches.len());
        for (row, kind) in self.ineq.iter().enumerate() {
            let w = v[row];
            if w == 0.0 {
                continue;
            }
            match *kind {
                IneqKind::ResCap(k) => {
                    let r = &self.res[k];
                    let c = 2.0 * w / (r.s * r.s);
                    h.push(r.p, r.p, c);
                    h.push(r.q, r.q, c);
                }
                IneqKind::Volt(i) => {
                    let b = &self.buses[i];
                    for s in [b.e, b.f] {
                        if let Some(c) = s.var() {
                            h.push(c, c, 2.0 * w);
                        }
                    }
                }
                IneqKind::Flow(k) => {
                    let br = &self.branches[k];
                    let slots = self.branch_slots(br, false);
                    let d = flow_derivs(slots.map(|s| s.value(x)), br.g, br.b);
                    let (hp, hq) = flow_hessians(br.g, br.b);
                    let c = 2.0 * w / (br.smax * br.smax);
                    add_quad(&mut h, &slots, &outer(&d.dp, &d.dp), c);
                    add_quad(&mut h, &slots, &outer(&d.dq, &d.dq), c);
                    add_quad(&mut h, &slots, &hp, c * d.p);
                    add_quad(&mut h, &slots, &hq, c * d.q);
                }
                _ => {}
            }
        }
        Ok(h)
    }

    fn ineq_bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    fn gradient_dt(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let params = self.params(t)?;
        let mut g = vec![0.0; x.len()];
        for r in &self.res {
            g[r.p] += -2.0 * r.cp * self.pav(&params, r).1;
        }
        Ok(g)
    }

    fn eq_dt(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let params = self.params(t)?;
        let mut g = vec![0.0; self.m_eq];
        for i in 0..self.buses.len() {
            let (_, _, dpd, dqd) = self.bus_load(&params, i);
            g[self.eq_row(i)] = -dpd;
            g[self.eq_row(i) + 1] = -dqd;
        }
        Ok(g)
    }

    fn ineq_dt(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let params = self.params(t)?;
        Ok(self
            .ineq
            .iter()
            .map(|kind| match *kind {
                IneqKind::ResAvail(k) => {
                    let r = &self.res[k];
                    -self.pav(&params, r).1 / r.s
                }
                _ => 0.0,
            })
            .collect())
    }
}

impl GridNlp {
    /// Active-balance row of bus row `i`; the reactive row follows it.
    fn eq_row(&self, i: usize) -> usize {
        // sections before this bus each add one reference row
        let refs = self
            .sections
            .iter()
            .take_while(|s| s.buses.end <= i)
            .filter(|s| s.reference.is_some())
            .count();
        2 * i + refs
    }
}
