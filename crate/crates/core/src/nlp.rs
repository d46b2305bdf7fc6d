//! Generic time-varying NLP, its barrier Lagrangian and KKT residuals.
//!
//! Problems have the form
//!
//! ```text
//! min f(x, t)   s.t.   g(x, t) = 0,   h_lo <= h(x, t) <= h_hi
//! ```
//!
//! with the barrier Lagrangian
//!
//! ```text
//! L = f - y'g - w'(h + u - h_hi) - z'(h - l - h_lo) - mu (sum ln u + sum ln l)
//! ```
//!
//! Residual convention (fixed throughout the crate):
//!
//! | block | residual                          |
//! |-------|-----------------------------------|
//! | x     | grad f - Jg' y - Jh' (w + z)      |
//! | y     | g                                 |
//! | w     | h + u - h_hi                      |
//! | z     | h - l - h_lo                      |
//! | u     | u .* w + mu                       |
//! | l     | l .* z - mu                       |
//!
//! The x block is the gradient of `L` in x; the u and l rows are the
//! gradients in u and l scaled by `-U` and `L`. Strict interiority means
//! `u, l, z > 0` and `w < 0`.
//!
//! Time derivatives are taken at fixed primal-dual values with `mu` frozen.
//! Constraint Jacobians are assumed independent of `t` (parameters enter the
//! constraints additively), so the x-block derivative is `d(grad f)/dt`.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm_inf, Triplets};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m_eq: usize,
    pub m_ineq: usize,
}

/// Callback contract of a time-varying NLP.
///
/// All callbacks are pure. Hessian callbacks return the full symmetric
/// matrix (both triangles).
pub trait NlpProblem: Send + Sync {
    fn dims(&self) -> Dims;

    fn objective(&self, x: &[f64], t: f64) -> Result<f64>;
    fn gradient(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    fn objective_hessian(&self, x: &[f64], t: f64) -> Result<Triplets>;

    fn eq_values(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    fn eq_jacobian(&self, x: &[f64], t: f64) -> Result<Triplets>;
    /// `sum_m y_m * hess g_m`
    fn eq_hessian(&self, x: &[f64], t: f64, y: &[f64]) -> Result<Triplets>;

    fn ineq_values(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    fn ineq_jacobian(&self, x: &[f64], t: f64) -> Result<Triplets>;
    /// `sum_m v_m * hess h_m`, called with `v = w + z`.
    fn ineq_hessian(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Triplets>;
    /// `(h_lo, h_hi)`; constant in time.
    fn ineq_bounds(&self) -> (&[f64], &[f64]);

    /// Partial time derivative of `grad f` at fixed x.
    fn gradient_dt(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    fn eq_dt(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    fn ineq_dt(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// `hess f - sum y_m hess g_m - sum v_m hess h_m`
    fn lagrangian_hessian(&self, x: &[f64], t: f64, y: &[f64], v: &[f64]) -> Result<Triplets> {
        let n = self.dims().n;
        let mut out = Triplets::new(n, n);
        out.add_block(&self.objective_hessian(x, t)?, 0, 0, 1.0);
        out.add_block(&self.eq_hessian(x, t, y)?, 0, 0, -1.0);
        out.add_block(&self.ineq_hessian(x, t, v)?, 0, 0, -1.0);
        Ok(out)
    }
}

/// Six same-shaped blocks `[x; y; w; z; u; l]`: used for states' residuals,
/// their time derivatives, and Newton increments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Blocks {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub l: Vec<f64>,
}

/// KKT residual blocks.
pub type Residual = Blocks;
/// Newton increment blocks `(dx, dy, dw, dz, du, dl)`.
pub type Increment = Blocks;

impl Blocks {
    pub fn zeros(d: Dims) -> Self {
        Self {
            x: vec![0.0; d.n],
            y: vec![0.0; d.m_eq],
            w: vec![0.0; d.m_ineq],
            z: vec![0.0; d.m_ineq],
            u: vec![0.0; d.m_ineq],
            l: vec![0.0; d.m_ineq],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.x.len(),
            m_eq: self.y.len(),
            m_ineq: self.w.len(),
        }
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("x", &self.x),
            ("y", &self.y),
            ("w", &self.w),
            ("z", &self.z),
            ("u", &self.u),
            ("l", &self.l),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.x,
            &mut self.y,
            &mut self.w,
            &mut self.z,
            &mut self.u,
            &mut self.l,
        ]
    }

    pub fn norm_inf(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|(_, b)| norm_inf(b))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for b in out.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    /// `alpha * self + other`, block by block.
    pub fn weighted_sum(&self, alpha: f64, other: &Blocks) -> Self {
        let mut out = self.clone();
        let rhs = other.blocks();
        for (dst, (_, src)) in out.blocks_mut().into_iter().zip(rhs) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = alpha * *d + s;
            }
        }
        out
    }

    /// Concatenation `[x; y; w; z; u; l]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for (_, b) in self.blocks() {
            v.extend_from_slice(b);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_flat(d: Dims, v: &[f64]) -> Self {
        let mut out = Blocks::zeros(d);
        let mut at = 0;
        for b in out.blocks_mut() {
            let k = b.len();
            b.copy_from_slice(&v[at..at + k]);
            at += k;
        }
        out
    }
}

/// Residual and its partial time derivative at the same state.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBundle {
    pub residual: Residual,
    pub time_derivative: Residual,
}

impl ResidualBundle {
    /// Right-hand side source `alpha * residual + time_derivative`; the time
    /// derivative is dropped when `prediction` is false.
    pub fn combined(&self, alpha: f64, prediction: bool) -> Residual {
        if prediction {
            self.residual.weighted_sum(alpha, &self.time_derivative)
        } else {
            self.residual.scaled(alpha)
        }
    }
}

/// Primal-dual iterate `[x; y; w; z; u; l]` with barrier parameter `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub l: Vec<f64>,
    pub mu: f64,
}

impl PrimalDualState {
    pub fn dims(&self) -> Dims {
        Dims {
            n: self.x.len(),
            m_eq: self.y.len(),
            m_ineq: self.w.len(),
        }
    }

    pub fn check_dims(&self, d: Dims) -> Result<()> {
        let found = self.dims();
        let checks = [
            ("state x", d.n, found.n),
            ("state y", d.m_eq, found.m_eq),
            ("state w", d.m_ineq, found.m_ineq),
            ("state z", d.m_ineq, self.z.len()),
            ("state u", d.m_ineq, self.u.len()),
            ("state l", d.m_ineq, self.l.len()),
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
        Ok(())
    }

    /// Fails on the first component with `u, l, z <= 0` or `w >= 0`.
    pub fn check_interior(&self) -> Result<()> {
        let positive = [("u", &self.u), ("l", &self.l), ("z", &self.z)];
        for (block, v) in positive {
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
                return Err(Error::NonInterior {
                    block,
                    index,
                    value,
                });
            }
        }
        if let Some((index, &value)) = self.w.iter().enumerate().find(|(_, &x)| !(x < 0.0)) {
            return Err(Error::NonInterior {
                block: "w",
                index,
                value,
            });
        }
        Ok(())
    }

    pub fn is_interior(&self) -> bool {
        self.check_interior().is_ok()
    }

    /// Complementarity gap `l'z - u'w`.
    pub fn gap(&self) -> f64 {
        dot(&self.l, &self.z) - dot(&self.u, &self.w)
    }

    pub fn as_blocks(&self) -> Blocks {
        Blocks {
            x: self.x.clone(),
            y: self.y.clone(),
            w: self.w.clone(),
            z: self.z.clone(),
            u: self.u.clone(),
            l: self.l.clone(),
        }
    }

    pub fn from_blocks(b: Blocks, mu: f64) -> Self {
        Self {
            x: b.x,
            y: b.y,
            w: b.w,
            z: b.z,
            u: b.u,
            l: b.l,
            mu,
        }
    }

    /// Applies `primal_step` to (x, u, l) and `dual_step` to (y, w, z).
    pub fn apply(&mut self, inc: &Increment, primal_step: f64, dual_step: f64) {
        let axpy = |dst: &mut [f64], src: &[f64], a: f64| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += a * s;
            }
        };
        axpy(&mut self.x, &inc.x, primal_step);
        axpy(&mut self.u, &inc.u, primal_step);
        axpy(&mut self.l, &inc.l, primal_step);
        axpy(&mut self.y, &inc.y, dual_step);
        axpy(&mut self.w, &inc.w, dual_step);
        axpy(&mut self.z, &inc.z, dual_step);
    }

    /// Largest absolute componentwise difference over all blocks and `mu`.
    pub fn max_abs_diff(&self, other: &PrimalDualState) -> f64 {
        let a = self.as_blocks().flatten();
        let b = other.as_blocks().flatten();
        a.iter()
            .zip(&b)
            .map(|(p, q)| (p - q).abs())
            .fold((self.mu - other.mu).abs(), f64::max)
    }
}

/// Value of the barrier Lagrangian at `s`. Requires `u, l > 0`.
pub fn lagrangian(p: &dyn NlpProblem, s: &PrimalDualState, t: f64) -> Result<f64> {
    s.check_dims(p.dims())?;
    let (lo, hi) = p.ineq_bounds();
    let f = p.objective(&s.x, t)?;
    let g = p.eq_values(&s.x, t)?;
    let h = p.ineq_values(&s.x, t)?;
    let mut val = f - dot(&s.y, &g);
    for i in 0..h.len() {
        val -= s.w[i] * (h[i] + s.u[i] - hi[i]);
        val -= s.z[i] * (h[i] - s.l[i] - lo[i]);
        val -= s.mu * (s.u[i].ln() + s.l[i].ln());
    }
    Ok(val)
}

/// KKT residual blocks at `s` (see the module table for the convention).
pub fn kkt_residual(p: &dyn NlpProblem, s: &PrimalDualState, t: f64) -> Result<Residual> {
    s.check_dims(p.dims())?;
    let (lo, hi) = p.ineq_bounds();
    let grad = p.gradient(&s.x, t)?;
    let g = p.eq_values(&s.x, t)?;
    let h = p.ineq_values(&s.x, t)?;
    let jg = p.eq_jacobian(&s.x, t)?;
    let jh = p.ineq_jacobian(&s.x, t)?;

    let wz: Vec<f64> = s.w.iter().zip(&s.z).map(|(w, z)| w + z).collect();
    let jg_y = jg.tr_mul_vec(&s.y);
    let jh_wz = jh.tr_mul_vec(&wz);
    let x = (0..grad.len())
        .map(|i| grad[i] - jg_y[i] - jh_wz[i])
        .collect();

    let m = h.len();
    Ok(Residual {
        x,
        y: g,
        w: (0..m).map(|i| h[i] + s.u[i] - hi[i]).collect(),
        z: (0..m).map(|i| h[i] - s.l[i] - lo[i]).collect(),
        u: (0..m).map(|i| s.u[i] * s.w[i] + s.mu).collect(),
        l: (0..m).map(|i| s.l[i] * s.z[i] - s.mu).collect(),
    })
}

/// Partial time derivative of every residual block at fixed `s`.
pub fn kkt_time_derivative(p: &dyn NlpProblem, s: &PrimalDualState, t: f64) -> Result<Residual> {
    s.check_dims(p.dims())?;
    let dh = p.ineq_dt(&s.x, t)?;
    let m = dh.len();
    Ok(Residual {
        x: p.gradient_dt(&s.x, t)?,
        y: p.eq_dt(&s.x, t)?,
        w: dh.clone(),
        z: dh,
        u: vec![0.0; m],
        l: vec![0.0; m],
    })
}

pub fn residual_bundle(p: &dyn NlpProblem, s: &PrimalDualState, t: f64) -> Result<ResidualBundle> {
    Ok(ResidualBundle {
        residual: kkt_residual(p, s, t)?,
        time_derivative: kkt_time_derivative(p, s, t)?,
    })
}

/// Infinity norm over all residual blocks.
pub fn kkt_error(p: &dyn NlpProblem, s: &PrimalDualState, t: f64) -> Result<f64> {
    Ok(kkt_residual(p, s, t)?.norm_inf())
}

#[cfg(test)]
pub(crate) mod test_problems {
    //! Small analytic problems shared by unit tests.
    use super::*;

    /// `min (x - c(t))^2` with `c(t) = c0 + c1 t`, optionally with bounds
    /// `lo <= x <= hi` as a single inequality row.
    pub struct ScalarQuadratic {
        pub c0: f64,
        pub c1: f64,
        pub bounds: Option<(f64, f64)>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    }

    impl ScalarQuadratic {
        pub fn new(c0: f64, c1: f64, bounds: Option<(f64, f64)>) -> Self {
            let (lo, hi) = match bounds {
                Some((a, b)) => (vec![a], vec![b]),
                None => (vec![], vec![]),
            };
            Self {
                c0,
                c1,
                bounds,
                lo,
                hi,
            }
        }

        fn target(&self, t: f64) -> f64 {
            self.c0 + self.c1 * t
        }

        fn m(&self) -> usize {
            usize::from(self.bounds.is_some())
        }
    }

    impl NlpProblem for ScalarQuadratic {
        fn dims(&self) -> Dims {
            Dims {
                n: 1,
                m_eq: 0,
                m_ineq: self.m(),
            }
        }
        fn objective(&self, x: &[f64], t: f64) -> Result<f64> {
            Ok((x[0] - self.target(t)).powi(2))
        }
        fn gradient(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
            Ok(vec![2.0 * (x[0] - self.target(t))])
        }
        fn objective_hessian(&self, _x: &[f64], _t: f64) -> Result<Triplets> {
            let mut h = Triplets::new(1, 1);
            h.push(0, 0, 2.0);
            Ok(h)
        }
        fn eq_values(&self, _x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(vec![])
        }
        fn eq_jacobian(&self, _x: &[f64], _t: f64) -> Result<Triplets> {
            Ok(Triplets::new(0, 1))
        }
        fn eq_hessian(&self, _x: &[f64], _t: f64, _y: &[f64]) -> Result<Triplets> {
            Ok(Triplets::new(1, 1))
        }
        fn ineq_values(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(vec![x[0]; self.m()])
        }
        fn ineq_jacobian(&self, _x: &[f64], _t: f64) -> Result<Triplets> {
            let mut j = Triplets::new(self.m(), 1);
            if self.m() == 1 {
                j.push(0, 0, 1.0);
            }
            Ok(j)
        }
        fn ineq_hessian(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Result<Triplets> {
            Ok(Triplets::new(1, 1))
        }
        fn ineq_bounds(&self) -> (&[f64], &[f64]) {
            (&self.lo, &self.hi)
        }
        fn gradient_dt(&self, _x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(vec![-2.0 * self.c1])
        }
        fn eq_dt(&self, _x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(vec![])
        }
        fn ineq_dt(&self, _x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.m()])
        }
    }

    pub fn scalar_state(x: f64, m: usize) -> PrimalDualState {
        PrimalDualState {
            x: vec![x],
            y: vec![],
            w: vec![-1.0; m],
            z: vec![1.0; m],
            u: vec![1.0; m],
            l: vec![1.0; m],
            mu: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_problems::*;
    use super::*;

    #[test]
    fn unconstrained_quadratic_stationary_at_minimizer() {
        let p = ScalarQuadratic::new(3.0, 0.0, None);
        let r = kkt_residual(&p, &scalar_state(3.0, 0), 0.0).unwrap();
        assert_eq!(r.x, vec![0.0]);
        assert_eq!(kkt_error(&p, &scalar_state(3.0, 0), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn gradient_sign_convention() {
        let p = ScalarQuadratic::new(3.0, 0.0, None);
        let r = kkt_residual(&p, &scalar_state(0.0, 0), 0.0).unwrap();
        assert_eq!(r.x, vec![-6.0]);
    }

    #[test]
    fn moving_target_time_derivative() {
        // (x - t)^2: d/dt of 2(x - t) is -2
        let p = ScalarQuadratic::new(0.0, 1.0, None);
        let d = kkt_time_derivative(&p, &scalar_state(0.4, 0), 0.7).unwrap();
        assert_eq!(d.x, vec![-2.0]);
    }

    #[test]
    fn exact_kkt_point_with_bound() {
        // min (x-3)^2, x <= 2: x* = 2, multiplier on the upper row
        // stationarity 2(x-3) - (w+z) = 0 => w + z = -2
        let p = ScalarQuadratic::new(3.0, 0.0, Some((-10.0, 2.0)));
        let s = PrimalDualState {
            x: vec![2.0],
            y: vec![],
            w: vec![-2.0],
            z: vec![0.0],
            u: vec![0.0],
            l: vec![12.0],
            mu: 0.0,
        };
        let r = kkt_residual(&p, &s, 0.0).unwrap();
        assert!(r.norm_inf() < 1e-10, "{r:?}");
    }

    #[test]
    fn kkt_error_is_homogeneous_in_residual_scale() {
        let p = ScalarQuadratic::new(3.0, 0.0, None);
        let e1 = kkt_error(&p, &scalar_state(1.0, 0), 0.0).unwrap();
        // moving twice as far from the minimizer doubles the residual
        let e2 = kkt_error(&p, &scalar_state(-1.0, 0), 0.0).unwrap();
        assert!(e1 >= 0.0);
        assert_eq!(e2, 2.0 * e1);
        let r = kkt_residual(&p, &scalar_state(1.0, 0), 0.0).unwrap();
        assert_eq!(r.scaled(2.0).norm_inf(), 2.0 * r.norm_inf());
    }

    #[test]
    fn interior_check_names_block() {
        let mut s = scalar_state(0.0, 1);
        assert!(s.is_interior());
        s.w[0] = 0.0;
        match s.check_interior() {
            Err(Error::NonInterior { block, .. }) => assert_eq!(block, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = ScalarQuadratic::new(3.0, 0.0, Some((0.0, 1.0)));
        let s = scalar_state(0.5, 0);
        assert!(matches!(
            kkt_residual(&p, &s, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn flatten_roundtrip() {
        let b = Blocks {
            x: vec![1.0, 2.0],
            y: vec![3.0],
            w: vec![4.0],
            z: vec![5.0],
            u: vec![6.0],
            l: vec![7.0],
        };
        assert_eq!(Blocks::from_flat(b.dims(), &b.flatten()), b);
    }
}
