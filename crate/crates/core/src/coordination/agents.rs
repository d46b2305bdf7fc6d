//! Agents and the one-round decentralized tracking step.
//!
//! Per sample: every distribution agent condenses and sends its surrogate up;
//! the transmission agent folds the surrogates in ascending `ds_id` order,
//! solves, and sends each boundary increment down; every distribution agent
//! back-substitutes. Each agent then picks its own step lengths and updates;
//! distribution copies of boundary voltages and tie transfers are finally
//! overwritten with the transmission values.

use std::str::FromStr;
use std::time::Instant;

use log::debug;

use crate::coordination::codec::{CoordMessage, Direction, Transport};
use crate::coordination::condense::{
    accumulate_solve, condense, recover, CondenseCache, QuadraticSurrogate,
};
use crate::coordination::partition::{
    gather, partition_network, AgentProblems, Partition, BOUNDARY_DIM,
};
use crate::error::{Error, Result};
use crate::grid::{GridNlp, Network};
use crate::linalg::SparseLu;
use crate::nlp::{kkt_residual, residual_bundle, Increment, NlpProblem, PrimalDualState};
use crate::pdipm::{assemble_reduced, barrier_update, step_lengths};
use crate::scenario::Scenario;
use crate::tracker::{
    burn_in, check_span, displacement, sample_times, Counters, Sample, TrackerConfig, Trajectory,
};

/// How agents choose step lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Every agent uses its own fraction-to-boundary lengths.
    PerAgent,
    /// All agents use the smallest lengths over agents, which reproduces a
    /// centralized update.
    GlobalMin,
}

impl FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-agent" => Ok(StepMode::PerAgent),
            "global-min" => Ok(StepMode::GlobalMin),
            other => Err(Error::InvalidArgument(format!(
                "unknown step mode {other:?}"
            ))),
        }
    }
}

impl StepMode {
    pub fn name(self) -> &'static str {
        match self {
            StepMode::PerAgent => "per-agent",
            StepMode::GlobalMin => "global-min",
        }
    }
}

#[derive(Debug)]
pub struct DsAgent {
    pub id: u32,
    pub nlp: GridNlp,
    pub state: PrimalDualState,
    lu: SparseLu,
    cache: Option<(u64, CondenseCache)>,
    last_condensed: Option<u64>,
    last_recovered: Option<u64>,
}

impl DsAgent {
    pub fn new(id: u32, nlp: GridNlp, state: PrimalDualState) -> Self {
        Self {
            id,
            nlp,
            state,
            lu: SparseLu::new(),
            cache: None,
            last_condensed: None,
            last_recovered: None,
        }
    }

    /// Condenses the current reduced system into an upward message.
    pub fn condense(
        &mut self,
        t: f64,
        sample: u64,
        alpha: f64,
        prediction: bool,
    ) -> Result<CoordMessage> {
        if self.last_condensed.is_some_and(|last| sample <= last) {
            return Err(Error::Protocol(format!(
                "ds {}: sample index {sample} does not advance past {}",
                self.id,
                self.last_condensed.unwrap_or_default()
            )));
        }
        let res = residual_bundle(&self.nlp, &self.state, t)?;
        let rs = assemble_reduced(&self.nlp, &self.state, t, &res, alpha, prediction)?;
        let (surrogate, cache) = condense(rs, BOUNDARY_DIM, self.id, &mut self.lu)?;
        self.cache = Some((sample, cache));
        self.last_condensed = Some(sample);
        Ok(CoordMessage::SurrogateUp {
            sample_index: sample,
            surrogate,
        })
    }

    /// Recovers the full increment from a downward message. Consumes the
    /// cached factorization.
    pub fn recover(&mut self, msg: &CoordMessage) -> Result<Increment> {
        let CoordMessage::IncrementDown {
            ds_id,
            sample_index,
            boundary_increment,
        } = msg
        else {
            return Err(Error::Protocol(format!(
                "ds {}: expected an increment message",
                self.id
            )));
        };
        if *ds_id != self.id {
            return Err(Error::Protocol(format!(
                "ds {} received increment for ds {ds_id}",
                self.id
            )));
        }
        if self.last_recovered == Some(*sample_index) {
            return Err(Error::Protocol(format!(
                "ds {}: sample {sample_index} already recovered",
                self.id
            )));
        }
        match self.cache.take() {
            Some((s, cache)) if s == *sample_index => {
                let inc = recover(&cache, boundary_increment)?;
                self.last_recovered = Some(s);
                Ok(inc)
            }
            Some(other) => {
                let s = other.0;
                self.cache = Some(other);
                Err(Error::Protocol(format!(
                    "ds {}: increment for sample {sample_index} but condensed sample {s}",
                    self.id
                )))
            }
            None => Err(Error::Protocol(format!(
                "ds {}: recover before condense for sample {sample_index}",
                self.id
            ))),
        }
    }
}

#[derive(Debug)]
pub struct TsAgent {
    pub nlp: GridNlp,
    pub state: PrimalDualState,
    lu: SparseLu,
    ds_ids: Vec<u32>,
    boundary: Vec<Vec<usize>>,
}

impl TsAgent {
    pub fn new(nlp: GridNlp, state: PrimalDualState, part: &Partition) -> Self {
        Self {
            nlp,
            state,
            lu: SparseLu::new(),
            ds_ids: part.ds_ids.clone(),
            boundary: part.ts_boundary.iter().map(|b| b.to_vec()).collect(),
        }
    }

    /// Folds one surrogate per distribution system into the transmission
    /// system, solves it, and returns the increment with the downward
    /// messages.
    pub fn accumulate(
        &mut self,
        t: f64,
        sample: u64,
        up: &[CoordMessage],
        alpha: f64,
        prediction: bool,
    ) -> Result<(Increment, Vec<CoordMessage>)> {
        let mut slots: Vec<Option<&QuadraticSurrogate>> = vec![None; self.ds_ids.len()];
        for msg in up {
            let CoordMessage::SurrogateUp {
                sample_index,
                surrogate,
            } = msg
            else {
                return Err(Error::Protocol(
                    "transmission agent received an increment message".into(),
                ));
            };
            if *sample_index != sample {
                return Err(Error::Protocol(format!(
                    "surrogate from ds {} for sample {sample_index}, expected {sample}",
                    surrogate.ds_id
                )));
            }
            let k = self
                .ds_ids
                .iter()
                .position(|&d| d == surrogate.ds_id)
                .ok_or_else(|| {
                    Error::Protocol(format!("surrogate from unknown ds {}", surrogate.ds_id))
                })?;
            if slots[k].replace(surrogate).is_some() {
                return Err(Error::Protocol(format!(
                    "duplicate surrogate from ds {}",
                    surrogate.ds_id
                )));
            }
        }
        let surrogates: Vec<&QuadraticSurrogate> = slots
            .iter()
            .zip(&self.ds_ids)
            .map(|(s, id)| {
                s.ok_or_else(|| Error::Protocol(format!("missing surrogate from ds {id}")))
            })
            .collect::<Result<_>>()?;
        let res = residual_bundle(&self.nlp, &self.state, t)?;
        let rs = assemble_reduced(&self.nlp, &self.state, t, &res, alpha, prediction)?;
        let (inc, parts) = accumulate_solve(&rs, &self.boundary, &surrogates, &mut self.lu)?;
        let down = parts
            .into_iter()
            .zip(&self.ds_ids)
            .map(|(v, &ds_id)| CoordMessage::IncrementDown {
                ds_id,
                sample_index: sample,
                boundary_increment: v,
            })
            .collect();
        Ok((inc, down))
    }
}

/// Increments of one round, before any step is taken.
#[derive(Debug, Clone)]
pub struct RoundIncrements {
    pub ts: Increment,
    pub ds: Vec<Increment>,
}

/// Step lengths chosen by each agent in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSteps {
    pub ts: (f64, f64),
    pub ds: Vec<(f64, f64)>,
}

impl AgentSteps {
    /// Smallest primal and dual lengths over all agents.
    pub fn min(&self) -> (f64, f64) {
        self.ds
            .iter()
            .fold(self.ts, |(p, d), &(a, b)| (p.min(a), d.min(b)))
    }
}

/// All agents of one coupled network plus their transport.
#[derive(Debug)]
pub struct Decentralized {
    pub part: Partition,
    pub central: GridNlp,
    pub ts: TsAgent,
    pub ds: Vec<DsAgent>,
    pub transport: Transport,
    pub counters: Counters,
    next_sample: u64,
}

impl Decentralized {
    /// Builds the agents and scatters the centralized state `s` to them.
    pub fn new(net: &Network, scenario: &Scenario, s: &PrimalDualState) -> Result<Self> {
        let (part, agents, central) = partition_network(net, scenario)?;
        Self::from_parts(part, agents, central, s)
    }

    pub fn from_parts(
        part: Partition,
        agents: AgentProblems,
        central: GridNlp,
        s: &PrimalDualState,
    ) -> Result<Self> {
        s.check_dims(part.global)?;
        let ts = TsAgent::new(agents.ts, part.ts.restrict(s), &part);
        let ds = agents
            .ds
            .into_iter()
            .enumerate()
            .map(|(k, nlp)| DsAgent::new(part.ds_ids[k], nlp, part.ds[k].restrict(s)))
            .collect();
        Ok(Self {
            part,
            central,
            ts,
            ds,
            transport: Transport::new(),
            counters: Counters::default(),
            next_sample: 0,
        })
    }

    /// Overwrites every agent state from a centralized state.
    pub fn scatter(&mut self, s: &PrimalDualState) -> Result<()> {
        s.check_dims(self.part.global)?;
        self.ts.state = self.part.ts.restrict(s);
        for (a, map) in self.ds.iter_mut().zip(&self.part.ds) {
            a.state = map.restrict(s);
        }
        Ok(())
    }

    /// Centralized view of the agent states; boundary values and `mu` come
    /// from the transmission agent.
    pub fn gather(&self) -> PrimalDualState {
        let ds: Vec<PrimalDualState> = self.ds.iter().map(|a| a.state.clone()).collect();
        gather(&self.part, &self.ts.state, &ds)
    }

    /// Places agent increments into the centralized layout.
    pub fn gather_increment(&self, r: &RoundIncrements) -> Increment {
        let ds: Vec<PrimalDualState> =
            r.ds.iter()
                .map(|i| PrimalDualState::from_blocks(i.clone(), 0.0))
                .collect();
        let g = gather(
            &self.part,
            &PrimalDualState::from_blocks(r.ts.clone(), 0.0),
            &ds,
        );
        g.as_blocks()
    }

    pub fn sample_index(&self) -> u64 {
        self.next_sample
    }

    /// One message round at the current states without stepping.
    pub fn round_increments(
        &mut self,
        t: f64,
        alpha: f64,
        prediction: bool,
    ) -> Result<RoundIncrements> {
        self.round_increments_with(t, alpha, prediction, |_| {})
    }

    /// [`Self::round_increments`] with a hook that may alter decoded upward
    /// messages before the transmission agent sees them.
    pub fn round_increments_with(
        &mut self,
        t: f64,
        alpha: f64,
        prediction: bool,
        mut tamper: impl FnMut(&mut CoordMessage),
    ) -> Result<RoundIncrements> {
        let sample = self.next_sample;
        self.next_sample += 1;
        for a in &mut self.ds {
            let msg = a.condense(t, sample, alpha, prediction)?;
            self.counters.condenses += 1;
            self.counters.assemblies += 1;
            self.counters.solves += 1;
            self.transport.send(Direction::Up, &msg);
        }
        let mut up = self.transport.drain(Direction::Up)?;
        up.iter_mut().for_each(&mut tamper);
        let (ts_inc, down) = self.ts.accumulate(t, sample, &up, alpha, prediction)?;
        self.counters.accumulations += 1;
        self.counters.assemblies += 1;
        self.counters.solves += 1;
        for msg in &down {
            self.transport.send(Direction::Down, msg);
        }
        let mut ds_inc = Vec::with_capacity(self.ds.len());
        for msg in self.transport.drain(Direction::Down)? {
            let k = self.part.ds_position(msg.ds_id()).ok_or_else(|| {
                Error::Protocol(format!("increment for unknown ds {}", msg.ds_id()))
            })?;
            ds_inc.push((k, self.ds[k].recover(&msg)?));
            self.counters.recoveries += 1;
        }
        ds_inc.sort_by_key(|(k, _)| *k);
        self.counters.rounds += 1;
        self.counters.messages = self.transport.messages();
        Ok(RoundIncrements {
            ts: ts_inc,
            ds: ds_inc.into_iter().map(|(_, i)| i).collect(),
        })
    }

    /// Moves every agent from `t` to `t + tau`.
    pub fn track_step(
        &mut self,
        t: f64,
        cfg: &TrackerConfig,
        mode: StepMode,
    ) -> Result<AgentSteps> {
        let floor = cfg.mu_floor;
        self.ts.state.check_interior()?;
        self.ts.state.mu = barrier_update(&self.ts.state, cfg.sigma).max(floor);
        for a in &mut self.ds {
            a.state.check_interior()?;
            a.state.mu = barrier_update(&a.state, cfg.sigma).max(floor);
        }
        let r = self.round_increments(t, cfg.alpha, cfg.prediction_enabled)?;
        let d_ts = displacement(&r.ts, cfg.tau);
        let d_ds: Vec<Increment> = r.ds.iter().map(|i| displacement(i, cfg.tau)).collect();
        let mut steps = AgentSteps {
            ts: step_lengths(&self.ts.state, &d_ts, cfg.gamma),
            ds: self
                .ds
                .iter()
                .zip(&d_ds)
                .map(|(a, d)| step_lengths(&a.state, d, cfg.gamma))
                .collect(),
        };
        if mode == StepMode::GlobalMin {
            let m = steps.min();
            steps.ts = m;
            steps.ds.iter_mut().for_each(|s| *s = m);
        }
        self.ts.state.apply(&d_ts, steps.ts.0, steps.ts.1);
        for ((a, d), &(ap, ad)) in self.ds.iter_mut().zip(&d_ds).zip(&steps.ds) {
            a.state.apply(d, ap, ad);
        }
        self.sync_boundary();
        Ok(steps)
    }

    /// Copies the transmission boundary values into each distribution state.
    fn sync_boundary(&mut self) {
        for (a, pos) in self.ds.iter_mut().zip(&self.part.ts_boundary) {
            let n = a.state.x.len();
            for (i, &p) in pos.iter().enumerate() {
                a.state.x[n - BOUNDARY_DIM + i] = self.ts.state.x[p];
            }
        }
    }

    /// Total objective over agents.
    pub fn objective(&self, t: f64) -> Result<f64> {
        let mut f = self.ts.nlp.objective(&self.ts.state.x, t)?;
        for a in &self.ds {
            f += a.nlp.objective(&a.state.x, t)?;
        }
        Ok(f)
    }

    /// KKT error of the gathered state, with each agent's complementarity
    /// rows measured against that agent's barrier value.
    pub fn kkt_error(&self, t: f64) -> Result<f64> {
        let g = self.gather();
        let mut r = kkt_residual(&self.central, &g, t)?;
        for (a, map) in self.ds.iter().zip(&self.part.ds) {
            let shift = a.state.mu - g.mu;
            for i in map.ineq_offset..map.ineq_offset + map.dims.m_ineq {
                r.u[i] += shift;
                r.l[i] -= shift;
            }
        }
        Ok(r.norm_inf())
    }

    pub fn all_interior(&self) -> bool {
        self.ts.state.is_interior() && self.ds.iter().all(|a| a.state.is_interior())
    }
}

/// One decentralized tracking step; see [`Decentralized::track_step`].
pub fn decentralized_track_step(
    agents: &mut Decentralized,
    t: f64,
    cfg: &TrackerConfig,
    mode: StepMode,
) -> Result<AgentSteps> {
    agents.track_step(t, cfg, mode)
}

/// Burns in centrally at `t0`, scatters to the agents, and tracks one round
/// per sample up to `t_end`.
pub fn run_decentralized(
    net: &Network,
    scenario: &Scenario,
    start: PrimalDualState,
    t0: f64,
    t_end: f64,
    cfg: &TrackerConfig,
    mode: StepMode,
) -> Result<(Trajectory, Decentralized)> {
    cfg.validate()?;
    let (part, agents, central) = partition_network(net, scenario)?;
    check_span(&central, &start.x, t0, t_end)?;
    let clock = Instant::now();
    let warm = burn_in(&central, start, t0, cfg)?;
    let mut d = Decentralized::from_parts(part, agents, central, &warm.state)?;
    let mut traj = Trajectory::new(cfg.tau);
    traj.burn_in_iterations = warm.iterations;
    traj.record(
        Sample {
            t: t0,
            objective: d.objective(t0)?,
            kkt_error: d.kkt_error(t0)?,
            alpha_p: 1.0,
            alpha_d: 1.0,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            msgs: 0,
        },
        &d.gather(),
        cfg.snapshot_every,
    );
    for pair in sample_times(t0, t_end, cfg.tau).windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let clock = Instant::now();
        let before = d.transport.messages();
        let steps = d.track_step(t, cfg, mode)?;
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        let (ap, ad) = steps.min();
        let sample = Sample {
            t: t_next,
            objective: d.objective(t_next)?,
            kkt_error: d.kkt_error(t_next)?,
            alpha_p: ap,
            alpha_d: ad,
            wall_ms,
            msgs: d.transport.messages() - before,
        };
        debug!(
            "t = {t_next:.4}: objective {:.6}, kkt {:.2e}",
            sample.objective, sample.kkt_error
        );
        if cfg.snapshot_every > 0 && traj.len().is_multiple_of(cfg.snapshot_every) {
            traj.record(sample, &d.gather(), cfg.snapshot_every);
        } else {
            traj.samples.push(sample);
        }
    }
    traj.counters = d.counters;
    Ok((traj, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_case;
    use crate::pdipm::initial_state;
    use crate::scenario::make_synthetic;
    use crate::tracker::track_step;
    use std::path::Path;

    fn case(name: &str) -> Network {
        load_case(
            Path::new(env!("CARGO_MANIFEST_DIR"))
                .join("cases")
                .join(name),
        )
        .unwrap()
    }

    fn converged(net: &Network, sc: &Scenario, t: f64, cfg: &TrackerConfig) -> PrimalDualState {
        let p = crate::grid::build_nlp(net, sc).unwrap();
        let s0 = initial_state(&p, p.initial_point(t).unwrap(), t, 1.0).unwrap();
        burn_in(&p, s0, t, cfg).unwrap().state
    }

    #[test]
    fn step_mode_parses() {
        assert_eq!("per-agent".parse::<StepMode>().unwrap(), StepMode::PerAgent);
        assert_eq!(
            "global-min".parse::<StepMode>().unwrap(),
            StepMode::GlobalMin
        );
        assert!("both".parse::<StepMode>().unwrap_err().is_input_error());
    }

    #[test]
    fn global_min_step_equals_centralized_step() {
        let net = case("t3d3x3.json");
        let sc = make_synthetic(&net, "noon-peak", 0.0, 2).unwrap();
        let cfg = TrackerConfig::new(0.1);
        let s = converged(&net, &sc, 50.0, &cfg);
        let mut d = Decentralized::new(&net, &sc, &s).unwrap();
        let mut cs = s.clone();
        let mut t = 50.0;
        for _ in 0..5 {
            let mu = barrier_update(&cs, cfg.sigma).max(cfg.mu_floor);
            let out = track_step(&d.central, &cs, t, &cfg).unwrap();
            // pin every agent's barrier value to the centralized one
            let pinned = TrackerConfig {
                sigma: 0.0,
                mu_floor: mu,
                ..cfg.clone()
            };
            d.track_step(t, &pinned, StepMode::GlobalMin).unwrap();
            let diff = d.gather().max_abs_diff(&out.state);
            assert!(diff <= 1e-8, "diff {diff:e}");
            cs = out.state;
            t += cfg.tau;
        }
    }

    #[test]
    fn fixed_point_on_constant_scenario() {
        let net = case("small.json");
        let sc = Scenario::constant(&net, (0.0, 100.0)).unwrap();
        let cfg = TrackerConfig {
            burn_in_eps: 1e-11,
            burn_in_max: 200,
            ..TrackerConfig::new(0.1)
        };
        let s = converged(&net, &sc, 0.0, &cfg);
        let mut d = Decentralized::new(&net, &sc, &s).unwrap();
        let mut prev = d.gather();
        for k in 0..10 {
            d.track_step(k as f64 * cfg.tau, &cfg, StepMode::PerAgent)
                .unwrap();
            let now = d.gather();
            assert!(
                now.max_abs_diff(&prev) <= 1e-9,
                "moved {:e}",
                now.max_abs_diff(&prev)
            );
            prev = now;
        }
    }

    #[test]
    fn two_messages_per_ds_per_sample() {
        let net = case("t3d3x3.json");
        let sc = make_synthetic(&net, "ramp", 0.0, 1).unwrap();
        let cfg = TrackerConfig::new(0.1);
        let p = crate::grid::build_nlp(&net, &sc).unwrap();
        let s0 = initial_state(&p, p.initial_point(0.0).unwrap(), 0.0, 1.0).unwrap();
        let (traj, d) =
            run_decentralized(&net, &sc, s0, 0.0, 2.0, &cfg, StepMode::PerAgent).unwrap();
        assert_eq!(traj.len(), 21);
        assert!(traj.samples[1..].iter().all(|s| s.msgs == 6));
        assert_eq!(d.counters.rounds, 20);
        assert_eq!(d.counters.condenses, 60);
        assert_eq!(d.counters.accumulations, 20);
        assert_eq!(d.counters.recoveries, 60);
        assert_eq!(d.counters.messages, 120);
        assert!(d.all_interior());
    }

    #[test]
    fn protocol_violations_detected() {
        let net = case("small.json");
        let sc = make_synthetic(&net, "flat", 0.0, 0).unwrap();
        let p = crate::grid::build_nlp(&net, &sc).unwrap();
        let s = initial_state(&p, p.initial_point(0.0).unwrap(), 0.0, 1.0).unwrap();
        let mut d = Decentralized::new(&net, &sc, &s).unwrap();
        let down = CoordMessage::IncrementDown {
            ds_id: d.ds[0].id,
            sample_index: 0,
            boundary_increment: vec![0.0; 4],
        };
        // recover before condense
        assert!(matches!(d.ds[0].recover(&down), Err(Error::Protocol(_))));
        let up = d.ds[0].condense(0.0, 0, 1.0, true).unwrap();
        // duplicate and missing surrogates
        let err =
            d.ts.accumulate(0.0, 0, &[up.clone(), up.clone()], 1.0, true)
                .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        assert!(matches!(
            d.ts.accumulate(0.0, 0, &[], 1.0, true),
            Err(Error::Protocol(_))
        ));
        // stale sample index on the surrogate
        assert!(matches!(
            d.ts.accumulate(0.0, 1, std::slice::from_ref(&up), 1.0, true),
            Err(Error::Protocol(_))
        ));
        let (_, msgs) = d.ts.accumulate(0.0, 0, &[up], 1.0, true).unwrap();
        d.ds[0].recover(&msgs[0]).unwrap();
        // second recover of the same sample
        assert!(matches!(d.ds[0].recover(&msgs[0]), Err(Error::Protocol(_))));
        // sample index must advance
        assert!(matches!(
            d.ds[0].condense(0.0, 0, 1.0, true),
            Err(Error::Protocol(_))
        ));
        d.ds[0].condense(0.0, 1, 1.0, true).unwrap();
    }
}
