//! Check that one decentralized round reproduces the centralized Newton
//! increment.
//!
//! The reference is a dense solve of the full six-block Newton system of the
//! coupled problem. Separately, the reduced Hessian scattered from the agent
//! systems is compared against the one assembled centrally.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coordination::agents::Decentralized;
use crate::coordination::codec::CoordMessage;
use crate::coordination::partition::{partition_network, AgentMap};
use crate::error::{Error, Result};
use crate::grid::Network;
use crate::linalg::Triplets;
use crate::nlp::{residual_bundle, Increment};
use crate::pdipm::{assemble_reduced, dense_full_newton};
use crate::scenario::Scenario;

/// Largest dense problem the oracle accepts.
pub const MAX_ORACLE_VARS: usize = 200;

/// Tolerance for a passing comparison.
pub const EQUIVALENCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// Relative deviation per increment block, `x y w z u l`.
    pub blocks: Vec<(&'static str, f64)>,
    /// Relative deviation of the scattered reduced Hessian.
    pub superposition: f64,
    pub max_deviation: f64,
    pub pass: bool,
}

/// Blockwise `|a - b|_inf / max(1, |b|_inf)`.
fn block_deviations(a: &Increment, b: &Increment) -> Vec<(&'static str, f64)> {
    a.blocks()
        .iter()
        .zip(b.blocks().iter())
        .map(|((name, x), (_, y))| {
            let scale = crate::linalg::norm_inf(y).max(1.0);
            let d = x
                .iter()
                .zip(y.iter())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            (*name, d / scale)
        })
        .collect()
}

fn scatter(dst: &mut Triplets, src: &Triplets, map: &AgentMap) {
    for (i, j, v) in src.iter() {
        dst.push(map.vars[i], map.vars[j], v);
    }
}

/// Random interior state at `t`, one round with random residual weight, and
/// the comparison against the dense reference. `perturb` scales the largest
/// linear surrogate coefficient of the first distribution system by
/// `1 + perturb` before the transmission agent uses it.
pub fn verify_equivalence_with(
    net: &Network,
    scenario: &Scenario,
    t: f64,
    seed: u64,
    perturb: Option<f64>,
) -> Result<EquivalenceReport> {
    let (part, agents, central) = partition_network(net, scenario)?;
    if part.global.n > MAX_ORACLE_VARS {
        return Err(Error::InvalidArgument(format!(
            "{} variables exceed the dense reference limit of {MAX_ORACLE_VARS}",
            part.global.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = central.random_interior_state(&mut rng, t)?;
    let alpha = rng.random_range(1.0..60.0);

    let res = residual_bundle(&central, &s, t)?;
    let oracle = dense_full_newton(&central, &s, t, &res.combined(alpha, true))?;
    let central_rs = assemble_reduced(&central, &s, t, &res, alpha, true)?;

    let mut d = Decentralized::from_parts(part, agents, central, &s)?;

    // superposition of agent Hessians
    let n = d.part.global.n;
    let mut h = Triplets::new(n, n);
    let local = d.part.ts.restrict(&s);
    let r = residual_bundle(&d.ts.nlp, &local, t)?;
    scatter(
        &mut h,
        &assemble_reduced(&d.ts.nlp, &local, t, &r, alpha, true)?.h,
        &d.part.ts,
    );
    for (a, map) in d.ds.iter().zip(&d.part.ds) {
        let local = map.restrict(&s);
        let r = residual_bundle(&a.nlp, &local, t)?;
        scatter(
            &mut h,
            &assemble_reduced(&a.nlp, &local, t, &r, alpha, true)?.h,
            map,
        );
    }
    let hd = h.to_dense();
    let cd = central_rs.h.to_dense();
    let superposition = (&hd - &cd).amax() / cd.amax().max(1.0);

    let first = d.part.ds_ids.first().copied();
    let round = d.round_increments_with(t, alpha, true, |msg| {
        if let (Some(delta), CoordMessage::SurrogateUp { surrogate, .. }) = (perturb, msg) {
            if Some(surrogate.ds_id) == first {
                let big = (0..surrogate.j1.len())
                    .max_by(|&a, &b| surrogate.j1[a].abs().total_cmp(&surrogate.j1[b].abs()));
                if let Some(k) = big {
                    surrogate.j1[k] *= 1.0 + delta;
                }
            }
        }
    })?;
    let got = d.gather_increment(&round);
    let blocks = block_deviations(&got, &oracle);
    let max_deviation = blocks.iter().map(|b| b.1).fold(superposition, f64::max);
    Ok(EquivalenceReport {
        blocks,
        superposition,
        max_deviation,
        pass: max_deviation <= EQUIVALENCE_TOL,
    })
}

pub fn verify_equivalence(
    net: &Network,
    scenario: &Scenario,
    t: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    verify_equivalence_with(net, scenario, t, seed, None)
}

/// Worst report over `trials` consecutive seeds.
pub fn equivalence_trials(
    net: &Network,
    scenario: &Scenario,
    t: f64,
    seed: u64,
    trials: usize,
) -> Result<EquivalenceReport> {
    let mut worst: Option<EquivalenceReport> = None;
    for k in 0..trials as u64 {
        let rep = verify_equivalence(net, scenario, t, seed.wrapping_add(k))?;
        if worst
            .as_ref()
            .is_none_or(|w| rep.max_deviation > w.max_deviation)
        {
            worst = Some(rep);
        }
    }
    worst.ok_or_else(|| Error::InvalidArgument("at least one trial is required".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::load_case;
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

    #[test]
    fn single_ds_passes() {
        let net = case("small.json");
        let sc = make_synthetic(&net, "noon-peak", 0.02, 7).unwrap();
        let rep = verify_equivalence(&net, &sc, 123.0, 7).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.blocks.len(), 6);
    }

    #[test]
    fn three_ds_pass() {
        let net = case("t3d3x3.json");
        let sc = make_synthetic(&net, "cloud-transient", 0.02, 1).unwrap();
        let rep = equivalence_trials(&net, &sc, 300.0, 11, 10).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn perturbed_surrogate_fails() {
        let net = case("small.json");
        let sc = make_synthetic(&net, "noon-peak", 0.02, 7).unwrap();
        let rep = verify_equivalence_with(&net, &sc, 123.0, 7, Some(1e-3)).unwrap();
        assert!(!rep.pass);
        assert!(rep.max_deviation >= 1e-4, "{rep:?}");
    }

    #[test]
    fn oversized_case_rejected() {
        let net = case("t9d33x3.json");
        let sc = make_synthetic(&net, "flat", 0.0, 0).unwrap();
        assert!(verify_equivalence(&net, &sc, 1.0, 0)
            .unwrap_err()
            .is_input_error());
    }
}
