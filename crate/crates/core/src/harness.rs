//! Run modes, tracking metrics and result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use crate::baselines::{BoundaryAssumption, IndependentProblems};
use crate::coordination::{run_decentralized, StepMode};
use crate::error::{Error, Result};
use crate::grid::{build_nlp, Network};
use crate::nlp::kkt_error;
use crate::pdipm::{initial_state, PdipmConfig};
use crate::scenario::Scenario;
use crate::tracker::{run_tracker, sample_times, Sample, TrackMode, TrackerConfig, Trajectory};

pub const CSV_HEADER: &str = "t,objective,kkt_error,rel_err_vs_oracle,alpha_p,alpha_d,wall_ms,msgs";

/// Error level below which a sample counts as tracked.
pub const TRACKED_ERROR: f64 = 0.01;
/// Consecutive tracked samples required for time-to-track.
pub const TRACKED_RUN: usize = 50;

/// Barrier floor of the reference solves, low enough for tight gaps.
const ORACLE_MU_FLOOR: f64 = 1e-14;

/// Barrier parameter of a cold start.
const COLD_MU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Oracle,
    Centralized,
    Decentralized,
    Independent,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::Oracle,
        RunMode::Centralized,
        RunMode::Decentralized,
        RunMode::Independent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Oracle => "oracle",
            RunMode::Centralized => "centralized",
            RunMode::Decentralized => "decentralized",
            RunMode::Independent => "independent",
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

/// Everything a run depends on besides the network and scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub tau: f64,
    /// Residual weight; `None` means `1 / tau`.
    pub alpha: Option<f64>,
    pub t0: f64,
    pub t_end: f64,
    pub seed: u64,
    pub prediction: bool,
    #[serde(serialize_with = "ser_step_mode")]
    pub step_mode: StepMode,
    /// Stopping tolerance of the per-sample reference solves.
    pub oracle_eps: f64,
}

fn ser_step_mode<S: serde::Serializer>(m: &StepMode, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(m.name())
}

impl RunConfig {
    pub fn new(mode: RunMode, tau: f64, t0: f64, t_end: f64) -> Self {
        Self {
            mode,
            tau,
            alpha: None,
            t0,
            t_end,
            seed: 0,
            prediction: true,
            step_mode: StepMode::PerAgent,
            oracle_eps: 1e-9,
        }
    }

    pub fn tracker(&self) -> TrackerConfig {
        let mut c = TrackerConfig::new(self.tau);
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        c.prediction_enabled = self.prediction;
        c.oracle = PdipmConfig {
            eps_kkt: self.oracle_eps,
            eps_gap: self.oracle_eps,
            // the gap settles near twice the barrier floor per row pair
            mu_floor: ORACLE_MU_FLOOR,
            ..c.oracle
        };
        c
    }
}

/// One CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Row {
    pub t: f64,
    pub objective: f64,
    pub kkt_error: f64,
    pub rel_err_vs_oracle: f64,
    pub alpha_p: f64,
    pub alpha_d: f64,
    pub wall_ms: f64,
    pub msgs: u64,
}

/// Aggregates over the rows of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub samples: usize,
    pub mean_rel_err: f64,
    pub max_rel_err: f64,
    pub mean_kkt_error: f64,
    pub max_kkt_error: f64,
    pub mean_objective: f64,
    /// First time from which the error stays below one percent for
    /// [`TRACKED_RUN`] samples.
    pub time_to_track: Option<f64>,
    pub total_msgs: u64,
    pub mean_wall_ms: f64,
    pub max_wall_ms: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn max(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(0.0, f64::max)
}

/// First `t` starting a run of [`TRACKED_RUN`] samples with error below
/// [`TRACKED_ERROR`].
pub fn time_to_track(times: &[f64], errors: &[f64]) -> Option<f64> {
    let mut run = 0;
    for (k, e) in errors.iter().enumerate() {
        if *e < TRACKED_ERROR {
            run += 1;
            if run == TRACKED_RUN {
                return Some(times[k + 1 - TRACKED_RUN]);
            }
        } else {
            run = 0;
        }
    }
    None
}

impl Summary {
    pub fn from_rows(rows: &[Row]) -> Self {
        let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
        let errors: Vec<f64> = rows.iter().map(|r| r.rel_err_vs_oracle).collect();
        Self {
            samples: rows.len(),
            mean_rel_err: mean(errors.iter().copied()),
            max_rel_err: max(errors.iter().copied()),
            mean_kkt_error: mean(rows.iter().map(|r| r.kkt_error)),
            max_kkt_error: max(rows.iter().map(|r| r.kkt_error)),
            mean_objective: mean(rows.iter().map(|r| r.objective)),
            time_to_track: time_to_track(&times, &errors),
            total_msgs: rows.iter().map(|r| r.msgs).sum(),
            mean_wall_ms: mean(rows.iter().map(|r| r.wall_ms)),
            max_wall_ms: max(rows.iter().map(|r| r.wall_ms)),
        }
    }
}

/// Per-sample relative objective errors of `track` against `oracle`.
pub fn relative_errors(track: &Trajectory, oracle: &Trajectory) -> Result<Vec<f64>> {
    if track.len() != oracle.len() {
        return Err(Error::InvalidArgument(format!(
            "sample grids differ: {} against {} samples",
            track.len(),
            oracle.len()
        )));
    }
    track
        .samples
        .iter()
        .zip(&oracle.samples)
        .map(|(a, b)| {
            if (a.t - b.t).abs() > 1e-9 * b.t.abs().max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "sample times differ: {} against {}",
                    a.t, b.t
                )));
            }
            Ok((a.objective - b.objective).abs() / b.objective.abs().max(f64::MIN_POSITIVE))
        })
        .collect()
}

pub fn compute_metrics(track: &Trajectory, oracle: &Trajectory) -> Result<Summary> {
    Ok(Summary::from_rows(&rows_of(
        track,
        &relative_errors(track, oracle)?,
    )))
}

fn rows_of(traj: &Trajectory, errors: &[f64]) -> Vec<Row> {
    traj.samples
        .iter()
        .zip(errors)
        .map(|(s, &e)| Row {
            t: s.t,
            objective: s.objective,
            kkt_error: s.kkt_error,
            rel_err_vs_oracle: e,
            alpha_p: s.alpha_p,
            alpha_d: s.alpha_d,
            wall_ms: s.wall_ms,
            msgs: s.msgs,
        })
        .collect()
}

/// Rows, summary and the configuration that produced them.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub mode: RunMode,
    pub config: RunConfig,
    #[serde(skip)]
    pub rows: Vec<Row>,
    pub summary: Summary,
    pub burn_in_iterations: usize,
    /// Coordination rounds, zero outside decentralized runs.
    pub rounds: u64,
    /// Largest tie power mismatch of the independent baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_boundary_mismatch: Option<f64>,
}

impl RunRecord {
    pub fn objectives(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.objective).collect()
    }

    /// CSV text; `with_wall` false blanks the timing column so that bodies
    /// of identical runs compare byte for byte.
    pub fn csv(&self, with_wall: bool) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let wall = if with_wall {
                format!("{:.3}", r.wall_ms)
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{},{},{},{}",
                r.t,
                r.objective,
                r.kkt_error,
                r.rel_err_vs_oracle,
                r.alpha_p,
                r.alpha_d,
                wall,
                r.msgs
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    /// Writes `<mode>.csv` and `<mode>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = dir.join(format!("{}.csv", self.mode.name()));
        let json = dir.join(format!("{}.json", self.mode.name()));
        write_atomic(&csv, &self.csv(true))?;
        write_atomic(&json, &self.summary_json())?;
        Ok((csv, json))
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Trajectory of one mode on the `[t0, t_end]` grid.
pub fn trajectory(
    net: &Network,
    scenario: &Scenario,
    cfg: &RunConfig,
) -> Result<(Trajectory, Option<f64>)> {
    let tc = cfg.tracker();
    let p = build_nlp(net, scenario)?;
    let cold = || initial_state(&p, p.initial_point(cfg.t0)?, cfg.t0, COLD_MU);
    Ok(match cfg.mode {
        RunMode::Oracle => (
            run_tracker(
                &p,
                cold()?,
                cfg.t0,
                cfg.t_end,
                &tc,
                TrackMode::OracleResolve,
            )?,
            None,
        ),
        RunMode::Centralized => (
            run_tracker(
                &p,
                cold()?,
                cfg.t0,
                cfg.t_end,
                &tc,
                TrackMode::CentralizedTrack,
            )?,
            None,
        ),
        RunMode::Decentralized => (
            run_decentralized(
                net,
                scenario,
                cold()?,
                cfg.t0,
                cfg.t_end,
                &tc,
                cfg.step_mode,
            )?
            .0,
            None,
        ),
        RunMode::Independent => {
            let (traj, mismatch) = run_independent(net, scenario, cfg.t0, cfg.t_end, &tc)?;
            (traj, Some(mismatch))
        }
    })
}

/// Independent baseline re-solved at every sample under the nominal
/// assumption at that sample, warm-started from the previous one. Returns
/// the trajectory and the largest boundary mismatch.
pub fn run_independent(
    net: &Network,
    scenario: &Scenario,
    t0: f64,
    t_end: f64,
    cfg: &TrackerConfig,
) -> Result<(Trajectory, f64)> {
    cfg.validate()?;
    let times = sample_times(t0, t_end, cfg.tau);
    let mut traj = Trajectory::new(cfg.tau);
    let mut warm = None;
    let mut worst = 0.0f64;
    for (k, &t) in times.iter().enumerate() {
        let clock = Instant::now();
        let probs = IndependentProblems::new(
            net,
            scenario,
            BoundaryAssumption::nominal(net, scenario, t)?,
        )?;
        let (ts0, ds0) = match warm.take() {
            Some(w) => w,
            None => probs.cold_start(t)?,
        };
        let sol = probs.solve(t, ts0, ds0, &cfg.oracle)?;
        if k == 0 {
            traj.burn_in_iterations = sol.iterations;
        }
        let mut err = kkt_error(&probs.ts, &sol.ts, t)?;
        for (p, s) in probs.ds.iter().zip(&sol.ds) {
            err = err.max(kkt_error(p, s, t)?);
        }
        worst = worst.max(sol.max_mismatch());
        traj.samples.push(Sample {
            t,
            objective: sol.objective,
            kkt_error: err,
            alpha_p: 1.0,
            alpha_d: 1.0,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            msgs: 0,
        });
        warm = Some((sol.ts, sol.ds));
    }
    Ok((traj, worst))
}

/// Runs `cfg.mode` and the per-sample oracle on the same grid.
pub fn run(net: &Network, scenario: &Scenario, cfg: &RunConfig) -> Result<RunRecord> {
    let (traj, mismatch) = trajectory(net, scenario, cfg)?;
    let errors = if cfg.mode == RunMode::Oracle {
        vec![0.0; traj.len()]
    } else {
        let oracle = trajectory(
            net,
            scenario,
            &RunConfig {
                mode: RunMode::Oracle,
                ..cfg.clone()
            },
        )?
        .0;
        relative_errors(&traj, &oracle)?
    };
    Ok(record(cfg, &traj, &errors, mismatch))
}

fn record(cfg: &RunConfig, traj: &Trajectory, errors: &[f64], mismatch: Option<f64>) -> RunRecord {
    let rows = rows_of(traj, errors);
    let summary = Summary::from_rows(&rows);
    info!(
        "{}: {} samples, mean relative error {:.3e}",
        cfg.mode.name(),
        summary.samples,
        summary.mean_rel_err
    );
    RunRecord {
        mode: cfg.mode,
        config: cfg.clone(),
        rows,
        summary,
        burn_in_iterations: traj.burn_in_iterations,
        rounds: traj.counters.rounds,
        max_boundary_mismatch: mismatch,
    }
}

/// Records of every mode sharing one oracle trajectory; modes run
/// concurrently.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub records: Vec<RunRecord>,
    /// Samples where the decentralized objective exceeds the independent one
    /// by more than `1e-8`.
    pub dominance_violations: usize,
    /// Mean relative objective reduction of coordination over the
    /// independent baseline.
    pub mean_reduction: f64,
}

pub fn compare(net: &Network, scenario: &Scenario, cfg: &RunConfig) -> Result<Comparison> {
    let modes = RunMode::ALL;
    let results: Vec<Result<(Trajectory, Option<f64>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = modes
            .iter()
            .map(|&mode| {
                let c = RunConfig {
                    mode,
                    ..cfg.clone()
                };
                s.spawn(move || trajectory(net, scenario, &c))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::InvalidArgument("run thread panicked".into())))
            })
            .collect()
    });
    let mut trajs = Vec::with_capacity(modes.len());
    for r in results {
        trajs.push(r?);
    }
    let oracle = trajs[0].0.clone();
    let mut records = Vec::with_capacity(modes.len());
    for (&mode, (traj, mismatch)) in modes.iter().zip(&trajs) {
        let errors = relative_errors(traj, &oracle)?;
        records.push(record(
            &RunConfig {
                mode,
                ..cfg.clone()
            },
            traj,
            &errors,
            *mismatch,
        ));
    }
    let coordinated = records[2].objectives();
    let independent = records[3].objectives();
    let dominance_violations = coordinated
        .iter()
        .zip(&independent)
        .filter(|(c, i)| **c > **i + 1e-8)
        .count();
    if dominance_violations > 0 {
        warn!("coordinated objective above independent at {dominance_violations} samples");
    }
    let mean_reduction = mean(
        coordinated
            .iter()
            .zip(&independent)
            .map(|(c, i)| (i - c) / i.abs().max(f64::MIN_POSITIVE)),
    );
    Ok(Comparison {
        records,
        dominance_violations,
        mean_reduction,
    })
}

/// Tracking quality at one sampling period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub tau: f64,
    /// `None` when tracking failed at this period.
    pub mean_rel_err: Option<f64>,
    pub max_rel_err: Option<f64>,
    pub failure: Option<String>,
}

/// Runs `cfg.mode` once per sampling period; failures at one period are
/// reported, not propagated.
pub fn sweep_tau(
    net: &Network,
    scenario: &Scenario,
    taus: &[f64],
    cfg: &RunConfig,
) -> Result<Vec<SweepPoint>> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("no sampling periods given".into()));
    }
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let c = RunConfig { tau, ..cfg.clone() };
        c.tracker().validate()?;
        match run(net, scenario, &c) {
            Ok(r) => out.push(SweepPoint {
                tau,
                mean_rel_err: Some(r.summary.mean_rel_err),
                max_rel_err: Some(r.summary.max_rel_err),
                failure: None,
            }),
            Err(e) if !e.is_input_error() => {
                warn!("tau = {tau}: {e}");
                out.push(SweepPoint {
                    tau,
                    mean_rel_err: None,
                    max_rel_err: None,
                    failure: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
