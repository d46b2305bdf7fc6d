//! Online tracking: burn-in at frozen parameters, then one forward-Euler
//! prediction-correction step per sampling period.
//!
//! Each step solves the reduced Newton system for the source
//! `alpha * L + L_t` (just `alpha * L` without prediction) and moves along the
//! displacement `tau * dlambda`, scaled by fraction-to-boundary step lengths
//! computed on the displacement itself. With the default `alpha = 1 / tau`
//! this is an `alpha_p`-damped Newton step plus `tau` times the prediction.

use std::time::Instant;

use log::{debug, info};

use crate::error::{Error, Result};
use crate::linalg::SparseLu;
use crate::nlp::{kkt_error, residual_bundle, Increment, NlpProblem, PrimalDualState};
use crate::pdipm::{
    assemble_reduced, barrier_update, solve_converged_with, solve_correction, step_lengths,
    Converged, PdipmConfig,
};

/// Default barrier floor while tracking. Lower floors push barrier terms of
/// active bounds past what the condensed distribution systems resolve in
/// double precision.
pub const TRACKING_MU_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Sampling period in seconds.
    pub tau: f64,
    /// Weight of the residual in the correction source.
    pub alpha: f64,
    pub gamma: f64,
    pub sigma: f64,
    /// Burn-in stopping tolerance on the KKT error.
    pub burn_in_eps: f64,
    /// Burn-in stopping tolerance on the complementarity gap.
    pub burn_in_gap: f64,
    pub burn_in_max: usize,
    pub prediction_enabled: bool,
    pub mu_floor: f64,
    /// Keep every n-th state in the trajectory; `0` keeps none.
    pub snapshot_every: usize,
    /// Stopping rule of the per-sample reference solves.
    pub oracle: PdipmConfig,
}

impl TrackerConfig {
    /// Defaults for sampling period `tau`, with `alpha = 1 / tau`.
    pub fn new(tau: f64) -> Self {
        let base = PdipmConfig::default();
        Self {
            tau,
            alpha: 1.0 / tau,
            gamma: base.gamma,
            sigma: base.sigma,
            burn_in_eps: base.eps_kkt,
            burn_in_gap: base.eps_gap,
            burn_in_max: base.max_iter,
            prediction_enabled: true,
            mu_floor: TRACKING_MU_FLOOR,
            snapshot_every: 0,
            oracle: base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("tau", self.tau)?;
        positive("alpha", self.alpha)?;
        positive("sigma", self.sigma)?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// Solver settings used by burn-in.
    pub fn burn_in_config(&self) -> PdipmConfig {
        PdipmConfig {
            gamma: self.gamma,
            sigma: self.sigma,
            eps_kkt: self.burn_in_eps,
            eps_gap: self.burn_in_gap,
            max_iter: self.burn_in_max,
            mu_floor: self.mu_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackMode {
    /// One correction step per sample.
    CentralizedTrack,
    /// Full re-solve per sample, warm-started from the previous sample.
    OracleResolve,
}

/// Work counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub assemblies: u64,
    pub solves: u64,
    pub messages: u64,
    /// Coordination rounds; zero for centralized runs.
    pub rounds: u64,
    pub condenses: u64,
    pub accumulations: u64,
    pub recoveries: u64,
}

/// One recorded sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub objective: f64,
    pub kkt_error: f64,
    /// Step lengths that produced this sample (`1` for the burn-in sample).
    pub alpha_p: f64,
    pub alpha_d: f64,
    pub wall_ms: f64,
    /// Messages exchanged to produce this sample.
    pub msgs: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub tau: f64,
    pub samples: Vec<Sample>,
    /// `(sample index, state)` pairs, thinned by `snapshot_every`.
    pub snapshots: Vec<(usize, PrimalDualState)>,
    pub counters: Counters,
    /// Iterations spent in burn-in.
    pub burn_in_iterations: usize,
}

impl Trajectory {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.objective).collect()
    }

    pub(crate) fn record(&mut self, sample: Sample, state: &PrimalDualState, every: usize) {
        let k = self.samples.len();
        self.samples.push(sample);
        if every > 0 && k.is_multiple_of(every) {
            self.snapshots.push((k, state.clone()));
        }
    }
}

/// Result of one tracking step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub state: PrimalDualState,
    pub alpha_p: f64,
    pub alpha_d: f64,
}

/// Scales a Newton increment by `tau` into the displacement actually applied.
pub fn displacement(inc: &Increment, tau: f64) -> Increment {
    inc.scaled(tau)
}

/// Applies `d` with fraction-to-boundary step lengths computed on `d`.
pub fn advance(s: &mut PrimalDualState, d: &Increment, gamma: f64) -> (f64, f64) {
    let (ap, ad) = step_lengths(s, d, gamma);
    s.apply(d, ap, ad);
    (ap, ad)
}

/// Moves `s` from time `t` to `t + tau`.
pub fn track_step(
    p: &dyn NlpProblem,
    s: &PrimalDualState,
    t: f64,
    cfg: &TrackerConfig,
) -> Result<StepReport> {
    let mut counters = Counters::default();
    track_step_with(p, s, t, cfg, &mut SparseLu::new(), &mut counters)
}

/// [`track_step`] reusing a factorization engine and counting work.
pub fn track_step_with(
    p: &dyn NlpProblem,
    s: &PrimalDualState,
    t: f64,
    cfg: &TrackerConfig,
    lu: &mut SparseLu,
    counters: &mut Counters,
) -> Result<StepReport> {
    s.check_dims(p.dims())?;
    s.check_interior()?;
    let mut next = s.clone();
    next.mu = barrier_update(&next, cfg.sigma).max(cfg.mu_floor);
    let res = residual_bundle(p, &next, t)?;
    let rs = assemble_reduced(p, &next, t, &res, cfg.alpha, cfg.prediction_enabled)?;
    counters.assemblies += 1;
    let inc = solve_correction(&rs, lu)?;
    counters.solves += 1;
    let (alpha_p, alpha_d) = advance(&mut next, &displacement(&inc, cfg.tau), cfg.gamma);
    Ok(StepReport {
        state: next,
        alpha_p,
        alpha_d,
    })
}

/// Converges at frozen parameters `t0`.
///
/// The gap tolerance is raised to just above `2 r mu_floor` for `r`
/// inequality rows, the smallest gap a floored barrier can reach; the first
/// tracking step then starts at the floor.
pub fn burn_in(
    p: &dyn NlpProblem,
    s0: PrimalDualState,
    t0: f64,
    cfg: &TrackerConfig,
) -> Result<Converged> {
    let mut solver = cfg.burn_in_config();
    solver.eps_gap = solver
        .eps_gap
        .max(2.1 * p.dims().m_ineq as f64 * cfg.mu_floor);
    let c = solve_converged_with(p, t0, s0, &solver, &mut SparseLu::new())?;
    info!("burn-in converged in {} iterations", c.iterations);
    Ok(c)
}

/// Sample times `t0 + k tau` for `k = 0..=K` with `t0 + K tau <= t_end`.
pub fn sample_times(t0: f64, t_end: f64, tau: f64) -> Vec<f64> {
    let steps = ((t_end - t0) / tau + 1e-9).floor().max(0.0) as usize;
    (0..=steps).map(|k| t0 + k as f64 * tau).collect()
}

pub(crate) fn check_span(p: &dyn NlpProblem, x: &[f64], t0: f64, t_end: f64) -> Result<()> {
    if !(t_end >= t0) {
        return Err(Error::InvalidArgument(format!(
            "end time {t_end} precedes start {t0}"
        )));
    }
    p.objective(x, t0)?;
    p.objective(x, t_end)?;
    Ok(())
}

/// Burns in at `t0` from `start`, then records one sample per period up to
/// `t_end`.
pub fn run_tracker(
    p: &dyn NlpProblem,
    start: PrimalDualState,
    t0: f64,
    t_end: f64,
    cfg: &TrackerConfig,
    mode: TrackMode,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_span(p, &start.x, t0, t_end)?;
    let times = sample_times(t0, t_end, cfg.tau);
    let mut traj = Trajectory::new(cfg.tau);
    let clock = Instant::now();
    let warm = burn_in(p, start, t0, cfg)?;
    traj.burn_in_iterations = warm.iterations;
    let mut s = warm.state;
    traj.record(
        Sample {
            t: t0,
            objective: p.objective(&s.x, t0)?,
            kkt_error: kkt_error(p, &s, t0)?,
            alpha_p: 1.0,
            alpha_d: 1.0,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            msgs: 0,
        },
        &s,
        cfg.snapshot_every,
    );
    let mut lu = SparseLu::new();
    for pair in times.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let clock = Instant::now();
        let (ap, ad) = match mode {
            TrackMode::CentralizedTrack => {
                let step = track_step_with(p, &s, t, cfg, &mut lu, &mut traj.counters)?;
                s = step.state;
                (step.alpha_p, step.alpha_d)
            }
            TrackMode::OracleResolve => {
                let c = solve_converged_with(p, t_next, s, &cfg.oracle, &mut lu)?;
                traj.counters.assemblies += c.iterations as u64;
                traj.counters.solves += c.iterations as u64;
                s = c.state;
                c.history
                    .last()
                    .map_or((1.0, 1.0), |h| (h.alpha_p, h.alpha_d))
            }
        };
        let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        let sample = Sample {
            t: t_next,
            objective: p.objective(&s.x, t_next)?,
            kkt_error: kkt_error(p, &s, t_next)?,
            alpha_p: ap,
            alpha_d: ad,
            wall_ms,
            msgs: 0,
        };
        debug!(
            "t = {t_next:.4}: objective {:.6}, kkt {:.2e}",
            sample.objective, sample.kkt_error
        );
        traj.record(sample, &s, cfg.snapshot_every);
    }
    Ok(traj)
}
