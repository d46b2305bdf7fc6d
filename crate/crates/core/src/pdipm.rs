//! Primal-dual interior-point correction: reduced Newton system, step
//! lengths, barrier update and a converged solver used as reference.
//!
//! For a right-hand-side source `r` (the weighted residual `alpha * L + L_t`)
//! the full Newton system is
//!
//! ```text
//! hess L dx - Jg' dy - Jh' (dw + dz) = -r_x
//! Jg dx                              = -r_y
//! Jh dx + du                         = -r_w
//! Jh dx - dl                         = -r_z
//! W du + U dw                        = -r_u
//! Z dl + L dz                        = -r_l
//! ```
//!
//! Eliminating the slack and multiplier increments leaves the bordered
//! system `[[H, Jg'], [Jg, 0]] [dx; dy] = [R_x; R_y]` with
//!
//! ```text
//! H   = -hess L - Jh' (Z/L - W/U) Jh
//! R_x = r_x + Jh' [(r_l + Z r_z) / L + (r_u - W r_w) / U]
//! R_y = -r_y
//! ```

use log::debug;

use crate::error::{Error, Result};
use crate::linalg::{dot, LuFactors, SparseLu, Triplets};
use crate::nlp::{
    kkt_error, residual_bundle, Increment, NlpProblem, PrimalDualState, Residual, ResidualBundle,
};

/// Diagonal shift used to retry a singular factorization.
const REGULARIZATION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PdipmConfig {
    /// Fraction-to-boundary factor.
    pub gamma: f64,
    /// Centering factor of the barrier update.
    pub sigma: f64,
    pub eps_kkt: f64,
    pub eps_gap: f64,
    pub max_iter: usize,
    /// Lower bound on the barrier parameter.
    pub mu_floor: f64,
}

impl Default for PdipmConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9995,
            sigma: 0.1,
            eps_kkt: 1e-6,
            eps_gap: 1e-6,
            max_iter: 100,
            mu_floor: 1e-10,
        }
    }
}

/// Reduced correction system of one agent at one state.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    /// Condensed Hessian, exactly symmetric.
    pub h: Triplets,
    /// Equality Jacobian.
    pub g: Triplets,
    pub rx: Vec<f64>,
    pub ry: Vec<f64>,
    /// Inequality Jacobian, kept for recovery.
    pub jh: Triplets,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub l: Vec<f64>,
    pub z: Vec<f64>,
    /// Weighted residual the system was built from.
    pub source: Residual,
}

impl ReducedSystem {
    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn m_eq(&self) -> usize {
        self.g.nrows()
    }

    /// `[[H, G'], [G, 0]]`
    pub fn bordered(&self) -> Triplets {
        let n = self.n();
        let m = self.m_eq();
        let mut k = Triplets::with_capacity(n + m, n + m, self.h.nnz() + 2 * self.g.nnz());
        k.add_block(&self.h, 0, 0, 1.0);
        k.add_block(&self.g, n, 0, 1.0);
        k.add_block_transposed(&self.g, 0, n, 1.0);
        k
    }

    /// `[R_x; R_y]`
    pub fn rhs(&self) -> Vec<f64> {
        let mut b = self.rx.clone();
        b.extend_from_slice(&self.ry);
        b
    }

    /// Recovers the slack and multiplier increments from `(dx, dy)`.
    pub fn recover(&self, dx: Vec<f64>, dy: Vec<f64>) -> Increment {
        let r = &self.source;
        let jdx = self.jh.mul_vec(&dx);
        let m = jdx.len();
        let du: Vec<f64> = (0..m).map(|i| -r.w[i] - jdx[i]).collect();
        let dl: Vec<f64> = (0..m).map(|i| r.z[i] + jdx[i]).collect();
        let dw = (0..m)
            .map(|i| (-r.u[i] - self.w[i] * du[i]) / self.u[i])
            .collect();
        let dz = (0..m)
            .map(|i| (-r.l[i] - self.z[i] * dl[i]) / self.l[i])
            .collect();
        Increment {
            x: dx,
            y: dy,
            w: dw,
            z: dz,
            u: du,
            l: dl,
        }
    }
}

/// Builds the reduced system for the source `alpha * L + L_t` (the time
/// derivative is left out when `prediction` is false).
pub fn assemble_reduced(
    p: &dyn NlpProblem,
    s: &PrimalDualState,
    t: f64,
    res: &ResidualBundle,
    alpha: f64,
    prediction: bool,
) -> Result<ReducedSystem> {
    s.check_dims(p.dims())?;
    s.check_interior()?;
    let source = res.combined(alpha, prediction);
    let v: Vec<f64> = s.w.iter().zip(&s.z).map(|(w, z)| w + z).collect();
    let hess = p.lagrangian_hessian(&s.x, t, &s.y, &v)?;
    let jh = p.ineq_jacobian(&s.x, t)?;
    let g = p.eq_jacobian(&s.x, t)?;

    let m = s.w.len();
    let d: Vec<f64> = (0..m).map(|i| s.z[i] / s.l[i] - s.w[i] / s.u[i]).collect();
    let mut h = Triplets::with_capacity(hess.nrows(), hess.ncols(), hess.nnz() + 4 * jh.nnz());
    h.add_block(&hess, 0, 0, -1.0);
    h.add_block(&jh.gram_weighted(&d), 0, 0, -1.0);
    let h = h.symmetrized();

    let r = &source;
    let c: Vec<f64> = (0..m)
        .map(|i| (r.l[i] + s.z[i] * r.z[i]) / s.l[i] + (r.u[i] - s.w[i] * r.w[i]) / s.u[i])
        .collect();
    let jc = jh.tr_mul_vec(&c);
    let rx = r.x.iter().zip(&jc).map(|(a, b)| a + b).collect();
    let ry = r.y.iter().map(|v| -v).collect();

    Ok(ReducedSystem {
        h,
        g,
        rx,
        ry,
        jh,
        u: s.u.clone(),
        w: s.w.clone(),
        l: s.l.clone(),
        z: s.z.clone(),
        source,
    })
}

/// Factors a bordered matrix with `n` primal rows, retrying once with a small
/// diagonal shift (positive on the primal block, negative on the dual block).
pub fn factor_bordered(
    lu: &mut SparseLu,
    k: &Triplets,
    n: usize,
    context: &str,
) -> Result<LuFactors> {
    match lu.factor(k, context) {
        Ok(f) => Ok(f),
        Err(Error::Singular { .. }) => {
            debug!("{context}: singular factorization, retrying regularized");
            let mut reg = k.clone();
            for i in 0..k.nrows() {
                reg.push(
                    i,
                    i,
                    if i < n {
                        REGULARIZATION
                    } else {
                        -REGULARIZATION
                    },
                );
            }
            lu.factor(&reg, context)
        }
        Err(e) => Err(e),
    }
}

/// Solves the bordered system and recovers every increment block.
pub fn solve_correction(rs: &ReducedSystem, lu: &mut SparseLu) -> Result<Increment> {
    let n = rs.n();
    let factors = factor_bordered(lu, &rs.bordered(), n, "correction system")?;
    let sol = factors.solve(&rs.rhs());
    let dy = sol[n..].to_vec();
    let mut dx = sol;
    dx.truncate(n);
    Ok(rs.recover(dx, dy))
}

/// Fraction-to-boundary step lengths `(alpha_p, alpha_d)`, both in (0, 1].
pub fn step_lengths(s: &PrimalDualState, inc: &Increment, gamma: f64) -> (f64, f64) {
    fn ratio(v: &[f64], dv: &[f64], gamma: f64, cap: f64) -> f64 {
        v.iter()
            .zip(dv)
            .filter(|(_, d)| **d < 0.0)
            .fold(cap, |acc, (x, d)| acc.min(gamma * (-x / d)))
    }
    let ap = ratio(&s.u, &inc.u, gamma, 1.0);
    let ap = ratio(&s.l, &inc.l, gamma, ap);
    let ad = ratio(&s.z, &inc.z, gamma, 1.0);
    let neg_w: Vec<f64> = s.w.iter().map(|w| -w).collect();
    let neg_dw: Vec<f64> = inc.w.iter().map(|d| -d).collect();
    let ad = ratio(&neg_w, &neg_dw, gamma, ad);
    (ap, ad)
}

/// `sigma * (l'z - u'w) / (2 r)` with `r` the inequality count.
pub fn barrier_update(s: &PrimalDualState, sigma: f64) -> f64 {
    let r = s.w.len();
    if r == 0 {
        return 0.0;
    }
    sigma * s.gap() / (2.0 * r as f64)
}

/// Interior start at `x0`: slacks from bound gaps floored at 0.1,
/// `z = mu0 / l`, `w = -mu0 / u`, `y = 0`.
pub fn initial_state(
    p: &dyn NlpProblem,
    x0: Vec<f64>,
    t: f64,
    mu0: f64,
) -> Result<PrimalDualState> {
    let d = p.dims();
    if x0.len() != d.n {
        return Err(Error::DimensionMismatch {
            what: "initial point",
            expected: d.n,
            found: x0.len(),
        });
    }
    let h = p.ineq_values(&x0, t)?;
    let (lo, hi) = p.ineq_bounds();
    let u: Vec<f64> = (0..h.len()).map(|i| (hi[i] - h[i]).max(0.1)).collect();
    let l: Vec<f64> = (0..h.len()).map(|i| (h[i] - lo[i]).max(0.1)).collect();
    Ok(PrimalDualState {
        x: x0,
        y: vec![0.0; d.m_eq],
        w: u.iter().map(|u| -mu0 / u).collect(),
        z: l.iter().map(|l| mu0 / l).collect(),
        u,
        l,
        mu: mu0,
    })
}

/// One logged iteration of [`solve_converged`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub kkt_error: f64,
    pub gap: f64,
    pub mu: f64,
    pub alpha_p: f64,
    pub alpha_d: f64,
}

#[derive(Debug, Clone)]
pub struct Converged {
    pub state: PrimalDualState,
    pub iterations: usize,
    pub history: Vec<IterationLog>,
}

/// Iterates full Newton corrections at frozen `t` until the KKT error and
/// the complementarity gap are both within tolerance.
pub fn solve_converged(
    p: &dyn NlpProblem,
    t: f64,
    init: PrimalDualState,
    cfg: &PdipmConfig,
) -> Result<Converged> {
    solve_converged_with(p, t, init, cfg, &mut SparseLu::new())
}

/// [`solve_converged`] reusing a factorization engine.
pub fn solve_converged_with(
    p: &dyn NlpProblem,
    t: f64,
    init: PrimalDualState,
    cfg: &PdipmConfig,
    lu: &mut SparseLu,
) -> Result<Converged> {
    let mut s = init;
    s.check_dims(p.dims())?;
    s.check_interior()?;
    let mut history = Vec::new();
    for it in 0..=cfg.max_iter {
        let err = kkt_error(p, &s, t)?;
        let gap = s.gap();
        if err <= cfg.eps_kkt && gap <= cfg.eps_gap {
            debug!("converged after {it} iterations (kkt {err:.2e}, gap {gap:.2e})");
            return Ok(Converged {
                state: s,
                iterations: it,
                history,
            });
        }
        if it == cfg.max_iter {
            return Err(Error::MaxIterations {
                iterations: it,
                kkt_error: err,
                gap,
            });
        }
        s.mu = barrier_update(&s, cfg.sigma).max(cfg.mu_floor);
        let res = residual_bundle(p, &s, t)?;
        let rs = assemble_reduced(p, &s, t, &res, 1.0, false)?;
        let inc = solve_correction(&rs, lu)?;
        let (ap, ad) = step_lengths(&s, &inc, cfg.gamma);
        s.apply(&inc, ap, ad);
        history.push(IterationLog {
            kkt_error: err,
            gap,
            mu: s.mu,
            alpha_p: ap,
            alpha_d: ad,
        });
    }
    unreachable!("loop returns on its last iteration")
}

/// Dense solve of the full six-block Newton system for source `r`; used as
/// an independent oracle in tests.
pub fn dense_full_newton(
    p: &dyn NlpProblem,
    s: &PrimalDualState,
    t: f64,
    r: &Residual,
) -> Result<Increment> {
    use nalgebra::DMatrix;
    let d = p.dims();
    let (n, me, mi) = (d.n, d.m_eq, d.m_ineq);
    let v: Vec<f64> = s.w.iter().zip(&s.z).map(|(w, z)| w + z).collect();
    let hess = p.lagrangian_hessian(&s.x, t, &s.y, &v)?.to_dense();
    let jg = p.eq_jacobian(&s.x, t)?.to_dense();
    let jh = p.ineq_jacobian(&s.x, t)?.to_dense();
    // unknown order [dx, dy, dw, dz, du, dl]
    let (ox, oy, ow, oz, ou, ol) = (0, n, n + me, n + me + mi, n + me + 2 * mi, n + me + 3 * mi);
    let dim = n + me + 4 * mi;
    let mut a = DMatrix::zeros(dim, dim);
    a.view_mut((ox, ox), (n, n)).copy_from(&hess);
    a.view_mut((ox, oy), (n, me)).copy_from(&(-jg.transpose()));
    a.view_mut((ox, ow), (n, mi)).copy_from(&(-jh.transpose()));
    a.view_mut((ox, oz), (n, mi)).copy_from(&(-jh.transpose()));
    a.view_mut((oy, ox), (me, n)).copy_from(&jg);
    a.view_mut((ow, ox), (mi, n)).copy_from(&jh);
    a.view_mut((oz, ox), (mi, n)).copy_from(&jh);
    for i in 0..mi {
        a[(ow + i, ou + i)] = 1.0;
        a[(oz + i, ol + i)] = -1.0;
        a[(ou + i, ou + i)] = s.w[i];
        a[(ou + i, ow + i)] = s.u[i];
        a[(ol + i, ol + i)] = s.z[i];
        a[(ol + i, oz + i)] = s.l[i];
    }
    let rhs: Vec<f64> =
        r.x.iter()
            .chain(&r.y)
            .chain(&r.w)
            .chain(&r.z)
            .chain(&r.u)
            .chain(&r.l)
            .map(|v| -v)
            .collect();
    let sol = crate::linalg::dense_solve(&a, &rhs).ok_or_else(|| Error::Singular {
        context: "dense full Newton system".into(),
        condition: f64::INFINITY,
    })?;
    let take = |o: usize, k: usize| sol[o..o + k].to_vec();
    Ok(Increment {
        x: take(ox, n),
        y: take(oy, me),
        w: take(ow, mi),
        z: take(oz, mi),
        u: take(ou, mi),
        l: take(ol, mi),
    })
}

/// Largest blockwise relative deviation `|a - b|_inf / max(1, |b|_inf)`.
pub fn relative_deviation(a: &Increment, b: &Increment) -> f64 {
    a.blocks()
        .iter()
        .zip(b.blocks().iter())
        .map(|((_, x), (_, y))| {
            let scale = crate::linalg::norm_inf(y).max(1.0);
            x.iter()
                .zip(y.iter())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max)
                / scale
        })
        .fold(0.0, f64::max)
}

/// Objective of the reduced quadratic model, handy for debugging.
pub fn quadratic_value(rs: &ReducedSystem, dx: &[f64]) -> f64 {
    0.5 * dot(dx, &rs.h.mul_vec(dx)) - dot(&rs.rx, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_nlp, load_case, Network};
    use crate::nlp::test_problems::{scalar_state, ScalarQuadratic};
    use crate::nlp::{kkt_residual, Blocks};
    use crate::scenario::make_synthetic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
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
    fn unconstrained_reduces_to_lagrangian_hessian() {
        let p = ScalarQuadratic::new(3.0, 1.0, None);
        let s = scalar_state(0.5, 0);
        let res = residual_bundle(&p, &s, 0.0).unwrap();
        let rs = assemble_reduced(&p, &s, 0.0, &res, 2.0, true).unwrap();
        assert_eq!(rs.h.to_dense()[(0, 0)], -2.0);
        // 2 * (0.5 - 3) * 2 + (-2)
        assert_eq!(rs.rx, vec![2.0 * 2.0 * (0.5 - 3.0) - 2.0]);
    }

    #[test]
    fn scalar_full_newton_step() {
        let p = ScalarQuadratic::new(3.0, 0.0, None);
        let s = scalar_state(0.0, 0);
        let res = residual_bundle(&p, &s, 0.0).unwrap();
        let rs = assemble_reduced(&p, &s, 0.0, &res, 1.0, false).unwrap();
        let inc = solve_correction(&rs, &mut SparseLu::new()).unwrap();
        assert!((inc.x[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_source_gives_zero_increment() {
        let net = case("small.json");
        let sc = make_synthetic(&net, "flat", 0.0, 0).unwrap();
        let p = build_nlp(&net, &sc).unwrap();
        let s = initial_state(&p, p.initial_point(0.0).unwrap(), 0.0, 1.0).unwrap();
        let zero = ResidualBundle {
            residual: Blocks::zeros(p.dims()),
            time_derivative: Blocks::zeros(p.dims()),
        };
        let rs = assemble_reduced(&p, &s, 0.0, &zero, 1.0, true).unwrap();
        let inc = solve_correction(&rs, &mut SparseLu::new()).unwrap();
        assert_eq!(inc.norm_inf(), 0.0);
    }

    #[test]
    fn condensed_hessian_exactly_symmetric() {
        let net = case("t3d3x3.json");
        let sc = make_synthetic(&net, "noon-peak", 0.02, 1).unwrap();
        let p = build_nlp(&net, &sc).unwrap();
        let s = random_state(&p, &mut ChaCha8Rng::seed_from_u64(3), 10.0);
        let res = residual_bundle(&p, &s, 10.0).unwrap();
        let h = assemble_reduced(&p, &s, 10.0, &res, 1.0, true)
            .unwrap()
            .h
            .to_dense();
        assert_eq!((&h - h.transpose()).amax(), 0.0);
    }

    #[test]
    fn non_interior_state_rejected() {
        let p = ScalarQuadratic::new(3.0, 0.0, Some((0.0, 5.0)));
        let mut s = scalar_state(1.0, 1);
        s.u[0] = 0.0;
        let res = ResidualBundle {
            residual: Blocks::zeros(p.dims()),
            time_derivative: Blocks::zeros(p.dims()),
        };
        assert!(matches!(
            assemble_reduced(&p, &s, 0.0, &res, 1.0, false),
            Err(Error::NonInterior { block: "u", .. })
        ));
    }

    fn random_state(p: &crate::grid::GridNlp, rng: &mut ChaCha8Rng, t: f64) -> PrimalDualState {
        p.random_interior_state(rng, t).unwrap()
    }

    #[test]
    fn elimination_matches_dense_full_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let cases = [case("toy2.json"), case("small.json")];
        for trial in 0..50 {
            let net = &cases[trial % 2];
            let sc = make_synthetic(net, "noon-peak", 0.02, trial as u64).unwrap();
            let p = build_nlp(net, &sc).unwrap();
            let t = rng.random_range(1.0..599.0);
            let s = random_state(&p, &mut rng, t);
            let alpha = rng.random_range(0.5..60.0);
            let res = residual_bundle(&p, &s, t).unwrap();
            let rs = assemble_reduced(&p, &s, t, &res, alpha, true).unwrap();
            let inc = solve_correction(&rs, &mut SparseLu::new()).unwrap();
            let oracle = dense_full_newton(&p, &s, t, &res.combined(alpha, true)).unwrap();
            let dev = relative_deviation(&inc, &oracle);
            assert!(dev <= 1e-9, "trial {trial}: deviation {dev:e}");
        }
    }

    #[test]
    fn recovered_increment_satisfies_full_system() {
        let net = case("small.json");
        let sc = make_synthetic(&net, "ramp", 0.0, 0).unwrap();
        let p = build_nlp(&net, &sc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let t = 100.0;
        let s = random_state(&p, &mut rng, t);
        let res = residual_bundle(&p, &s, t).unwrap();
        let r = res.combined(1.0, true);
        let inc = solve_correction(
            &assemble_reduced(&p, &s, t, &res, 1.0, true).unwrap(),
            &mut SparseLu::new(),
        )
        .unwrap();
        // plug back into the six block rows
        let v: Vec<f64> = s.w.iter().zip(&s.z).map(|(a, b)| a + b).collect();
        let hess = p.lagrangian_hessian(&s.x, t, &s.y, &v).unwrap();
        let jg = p.eq_jacobian(&s.x, t).unwrap();
        let jh = p.ineq_jacobian(&s.x, t).unwrap();
        let dwz: Vec<f64> = inc.w.iter().zip(&inc.z).map(|(a, b)| a + b).collect();
        let (a, b, c) = (
            hess.mul_vec(&inc.x),
            jg.tr_mul_vec(&inc.y),
            jh.tr_mul_vec(&dwz),
        );
        let jgdx = jg.mul_vec(&inc.x);
        let jhdx = jh.mul_vec(&inc.x);
        let mut worst: f64 = 0.0;
        for i in 0..a.len() {
            worst = worst.max((a[i] - b[i] - c[i] + r.x[i]).abs());
        }
        for i in 0..jgdx.len() {
            worst = worst.max((jgdx[i] + r.y[i]).abs());
        }
        for i in 0..jhdx.len() {
            worst = worst.max((jhdx[i] + inc.u[i] + r.w[i]).abs());
            worst = worst.max((jhdx[i] - inc.l[i] + r.z[i]).abs());
            worst = worst.max((s.w[i] * inc.u[i] + s.u[i] * inc.w[i] + r.u[i]).abs());
            worst = worst.max((s.z[i] * inc.l[i] + s.l[i] * inc.z[i] + r.l[i]).abs());
        }
        let scale = 1.0 + r.norm_inf();
        assert!(
            worst <= 1e-9 * scale,
            "plug-back residual {worst:e} at scale {scale:e}"
        );
    }

    #[test]
    fn step_length_examples() {
        let mut s = scalar_state(0.0, 1);
        let mut inc = Blocks::zeros(s.dims());
        assert_eq!(step_lengths(&s, &inc, 0.9995), (1.0, 1.0));
        inc.u[0] = 0.5;
        inc.l[0] = 2.0;
        inc.w[0] = -1.0;
        inc.z[0] = 3.0;
        assert_eq!(step_lengths(&s, &inc, 0.9995), (1.0, 1.0));
        s.u[0] = 1.0;
        inc.u[0] = -2.0;
        let (ap, ad) = step_lengths(&s, &inc, 0.9995);
        assert!((ap - 0.49975).abs() < 1e-15);
        assert_eq!(ad, 1.0);
        inc.w[0] = 4.0;
        assert!((step_lengths(&s, &inc, 0.9995).1 - 0.9995 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn barrier_examples() {
        let mut s = scalar_state(0.0, 1);
        assert!((barrier_update(&s, 0.1) - 0.1).abs() < 1e-15);
        s.l[0] = 3.0;
        s.z[0] = 2.0;
        s.u[0] = 0.5;
        s.w[0] = -4.0;
        let base = barrier_update(&s, 0.1);
        let c: f64 = 3.0;
        for v in [&mut s.l, &mut s.z, &mut s.u, &mut s.w] {
            v[0] *= c.sqrt();
        }
        assert!((barrier_update(&s, 0.1) - c * base).abs() < 1e-12);
        s.z[0] = 0.0;
        s.w[0] = 0.0;
        assert_eq!(barrier_update(&s, 0.1), 0.0);
    }

    #[test]
    fn bounded_scalar_converges_to_analytic_minimizer() {
        let p = ScalarQuadratic::new(3.0, 0.0, Some((-10.0, 10.0)));
        let init = initial_state(&p, vec![0.0], 0.0, 1.0).unwrap();
        let out = solve_converged(&p, 0.0, init, &PdipmConfig::default()).unwrap();
        assert!((out.state.x[0] - 3.0).abs() < 1e-6);
        assert!(kkt_error(&p, &out.state, 0.0).unwrap() <= 1e-6);
    }

    #[test]
    fn active_bound_converges() {
        let p = ScalarQuadratic::new(3.0, 0.0, Some((-1.0, 2.0)));
        let init = initial_state(&p, vec![0.0], 0.0, 1.0).unwrap();
        let out = solve_converged(&p, 0.0, init, &PdipmConfig::default()).unwrap();
        assert!((out.state.x[0] - 2.0).abs() < 1e-6);
        assert!((out.state.w[0] + 2.0).abs() < 1e-5);
    }

    #[test]
    fn small_coupled_case_converges() {
        let net = case("small.json");
        let sc = make_synthetic(&net, "flat", 0.0, 0).unwrap();
        let p = build_nlp(&net, &sc).unwrap();
        let init = initial_state(&p, p.initial_point(0.0).unwrap(), 0.0, 1.0).unwrap();
        let out = solve_converged(&p, 0.0, init, &PdipmConfig::default()).unwrap();
        assert!(out.state.is_interior());
        assert!(kkt_residual(&p, &out.state, 0.0).unwrap().norm_inf() <= 1e-6);
        assert!(out.state.gap() <= 1e-6);
    }

    #[test]
    fn zero_iterations_on_unconverged_start_fails() {
        let p = ScalarQuadratic::new(3.0, 0.0, Some((-10.0, 10.0)));
        let init = initial_state(&p, vec![0.0], 0.0, 1.0).unwrap();
        let cfg = PdipmConfig {
            max_iter: 0,
            ..Default::default()
        };
        assert!(matches!(
            solve_converged(&p, 0.0, init, &cfg),
            Err(Error::MaxIterations { .. })
        ));
    }
}
