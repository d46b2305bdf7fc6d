//! Condensing a distribution agent's reduced system onto its boundary
//! increments, and the transmission-side accumulated solve.
//!
//! With the distribution variables ordered as `(I, B)` and `v = dx_B`, the
//! rows of the bordered system that belong to `(dx_I, dy)` read
//! `K a + C v = r0` with
//!
//! ```text
//! K = [[H_II, G_I'], [G_I, 0]],  C = [H_IB; G_B],  r0 = [R_x,I; R_y]
//! ```
//!
//! Eliminating `a` leaves the boundary contribution `J2 v + J1` with
//! `J2 = H_BB - C' K^-1 C` and `J1 = C' K^-1 r0 - R_x,B`. The constant
//! `J0 = -r0' K^-1 r0 / 2` completes the optimal value of the inner model
//! `q(a, v) = ξ' M ξ / 2 - ρ' ξ` over `a`, where `M` is the bordered matrix and
//! `ρ` its right-hand side.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{LuFactors, SparseLu, Triplets};
use crate::nlp::Increment;
use crate::pdipm::{factor_bordered, solve_correction, ReducedSystem};

/// Quadratic `v' J2 v / 2 + J1' v + J0` over one distribution system's
/// boundary increments.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurrogate {
    pub ds_id: u32,
    /// Symmetric, row-major, `dim * dim`.
    pub j2: Vec<f64>,
    pub j1: Vec<f64>,
    pub j0: f64,
}

impl QuadraticSurrogate {
    pub fn dim(&self) -> usize {
        self.j1.len()
    }

    pub fn j2_at(&self, i: usize, j: usize) -> f64 {
        self.j2[i * self.dim() + j]
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        let n = self.dim();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += v[i] * self.j2_at(i, j) * v[j];
            }
        }
        0.5 * q + self.j1.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + self.j0
    }

    /// Stationary point `J2 v = -J1`, when `J2` is invertible.
    pub fn stationary_point(&self) -> Option<Vec<f64>> {
        let n = self.dim();
        let m = DMatrix::from_row_slice(n, n, &self.j2);
        let rhs = DVector::from_iterator(n, self.j1.iter().map(|v| -v));
        m.lu().solve(&rhs).map(|s| s.iter().copied().collect())
    }
}

/// Everything a distribution agent keeps between condensing and recovering.
pub struct CondenseCache {
    rs: ReducedSystem,
    factors: LuFactors,
    c: DMatrix<f64>,
    r0: Vec<f64>,
    n_i: usize,
}

impl std::fmt::Debug for CondenseCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CondenseCache")
            .field("n_internal", &self.n_i)
            .field("n_boundary", &self.c.ncols())
            .finish()
    }
}

impl CondenseCache {
    pub fn n_boundary(&self) -> usize {
        self.c.ncols()
    }

    pub fn reduced_system(&self) -> &ReducedSystem {
        &self.rs
    }
}

/// Condenses a distribution agent's reduced system whose last `n_b`
/// variables are the boundary block.
pub fn condense(
    rs: ReducedSystem,
    n_b: usize,
    ds_id: u32,
    lu: &mut SparseLu,
) -> Result<(QuadraticSurrogate, CondenseCache)> {
    let n = rs.n();
    if n_b > n {
        return Err(Error::DimensionMismatch {
            what: "boundary block",
            expected: n,
            found: n_b,
        });
    }
    let n_i = n - n_b;
    let m = rs.m_eq();
    let mut k = Triplets::with_capacity(n_i + m, n_i + m, rs.h.nnz() + 2 * rs.g.nnz());
    let mut c = DMatrix::zeros(n_i + m, n_b);
    let mut hbb = DMatrix::zeros(n_b, n_b);
    for (i, j, v) in rs.h.iter() {
        match (i < n_i, j < n_i) {
            (true, true) => k.push(i, j, v),
            (true, false) => c[(i, j - n_i)] += v,
            (false, false) => hbb[(i - n_i, j - n_i)] += v,
            (false, true) => {}
        }
    }
    for (r, j, v) in rs.g.iter() {
        if j < n_i {
            k.push(n_i + r, j, v);
            k.push(j, n_i + r, v);
        } else {
            c[(n_i + r, j - n_i)] += v;
        }
    }
    let factors = factor_bordered(lu, &k, n_i, "distribution interior system")?;

    let mut r0 = rs.rx[..n_i].to_vec();
    r0.extend_from_slice(&rs.ry);
    let kr0 = DVector::from_vec(factors.solve(&r0));
    let mut kc = DMatrix::zeros(n_i + m, n_b);
    for col in 0..n_b {
        let sol = factors.solve(c.column(col).as_slice());
        kc.set_column(col, &DVector::from_vec(sol));
    }
    let ct = c.transpose();
    let j2m = &hbb - &ct * &kc;
    let j2m = (&j2m + j2m.transpose()) * 0.5;
    let j1 = &ct * &kr0 - DVector::from_column_slice(&rs.rx[n_i..]);
    let j0 = -0.5 * DVector::from_column_slice(&r0).dot(&kr0);

    let surrogate = QuadraticSurrogate {
        ds_id,
        j2: j2m.transpose().iter().copied().collect(),
        j1: j1.iter().copied().collect(),
        j0,
    };
    Ok((
        surrogate,
        CondenseCache {
            rs,
            factors,
            c,
            r0,
            n_i,
        },
    ))
}

/// Back-substitutes a boundary increment and recovers every block of the
/// distribution increment.
pub fn recover(cache: &CondenseCache, v: &[f64]) -> Result<Increment> {
    if v.len() != cache.n_boundary() {
        return Err(Error::DimensionMismatch {
            what: "boundary increment",
            expected: cache.n_boundary(),
            found: v.len(),
        });
    }
    let cv = &cache.c * DVector::from_column_slice(v);
    let rhs: Vec<f64> = cache.r0.iter().zip(cv.iter()).map(|(a, b)| a - b).collect();
    let a = cache.factors.solve(&rhs);
    let mut dx = a[..cache.n_i].to_vec();
    dx.extend_from_slice(v);
    let dy = a[cache.n_i..].to_vec();
    Ok(cache.rs.recover(dx, dy))
}

/// Solves the transmission system with every surrogate folded into its
/// boundary block. `boundary[k]` lists the transmission positions of
/// `surrogates[k]`'s variables. Returns the transmission increment and the
/// boundary increments in the same order as `surrogates`.
pub fn accumulate_solve(
    ts: &ReducedSystem,
    boundary: &[Vec<usize>],
    surrogates: &[&QuadraticSurrogate],
    lu: &mut SparseLu,
) -> Result<(Increment, Vec<Vec<f64>>)> {
    if boundary.len() != surrogates.len() {
        return Err(Error::DimensionMismatch {
            what: "surrogate list",
            expected: boundary.len(),
            found: surrogates.len(),
        });
    }
    let mut rs = ts.clone();
    for (pos, s) in boundary.iter().zip(surrogates) {
        if s.dim() != pos.len() {
            return Err(Error::DimensionMismatch {
                what: "surrogate dimension",
                expected: pos.len(),
                found: s.dim(),
            });
        }
        for (a, &pa) in pos.iter().enumerate() {
            for (b, &pb) in pos.iter().enumerate() {
                rs.h.push(pa, pb, s.j2_at(a, b));
            }
            rs.rx[pa] -= s.j1[a];
        }
    }
    let inc = solve_correction(&rs, lu)?;
    let parts = boundary
        .iter()
        .map(|pos| pos.iter().map(|&p| inc.x[p]).collect())
        .collect();
    Ok((inc, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordination::partition::{partition_network, BOUNDARY_DIM};
    use crate::grid::{load_case, Network};
    use crate::linalg::dense_solve;
    use crate::nlp::residual_bundle;
    use crate::pdipm::{assemble_reduced, dense_full_newton, relative_deviation};
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

    fn ds_system(seed: u64) -> ReducedSystem {
        let net = case("small.json");
        let sc = make_synthetic(&net, "noon-peak", 0.02, seed).unwrap();
        let (_, agents, _) = partition_network(&net, &sc).unwrap();
        let p = &agents.ds[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(1.0..500.0);
        let s = p.random_interior_state(&mut rng, t).unwrap();
        let res = residual_bundle(p, &s, t).unwrap();
        assemble_reduced(p, &s, t, &res, rng.random_range(1.0..50.0), true).unwrap()
    }

    /// Optimal value of the inner model at boundary value `v`, by a dense
    /// solve over the interior unknowns.
    fn inner_optimum(rs: &ReducedSystem, n_b: usize, v: &[f64]) -> f64 {
        let n = rs.n();
        let n_i = n - n_b;
        let m = rs.m_eq();
        let full = rs.bordered().to_dense();
        let rho = rs.rhs();
        // interior unknowns: rows/cols 0..n_i and n..n+m
        let idx: Vec<usize> = (0..n_i).chain(n..n + m).collect();
        let bidx: Vec<usize> = (n_i..n).collect();
        let k = DMatrix::from_fn(idx.len(), idx.len(), |i, j| full[(idx[i], idx[j])]);
        let rhs: Vec<f64> = idx
            .iter()
            .map(|&i| {
                rho[i]
                    - bidx
                        .iter()
                        .zip(v)
                        .map(|(&j, vj)| full[(i, j)] * vj)
                        .sum::<f64>()
            })
            .collect();
        let a = dense_solve(&k, &rhs).unwrap();
        let mut xi = vec![0.0; n + m];
        for (p, &i) in idx.iter().enumerate() {
            xi[i] = a[p];
        }
        for (p, &i) in bidx.iter().enumerate() {
            xi[i] = v[p];
        }
        let mx = full * DVector::from_column_slice(&xi);
        0.5 * DVector::from_column_slice(&xi).dot(&mx)
            - rho.iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn surrogate_matches_inner_optimum() {
        for seed in 0..5 {
            let rs = ds_system(seed);
            let (sur, _) = condense(rs.clone(), BOUNDARY_DIM, 1, &mut SparseLu::new()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for _ in 0..10 {
                let v: Vec<f64> = (0..BOUNDARY_DIM)
                    .map(|_| rng.random_range(-0.5..0.5))
                    .collect();
                let want = inner_optimum(&rs, BOUNDARY_DIM, &v);
                let got = sur.value(&v);
                assert!(
                    (got - want).abs() <= 1e-9 * (1.0 + want.abs()),
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn j2_symmetric() {
        let (sur, _) = condense(ds_system(3), BOUNDARY_DIM, 1, &mut SparseLu::new()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(sur.j2_at(i, j), sur.j2_at(j, i));
            }
        }
    }

    #[test]
    fn uncoupled_boundary_degenerates() {
        // boundary variables with no Hessian or equality coupling to the interior
        let mut rs = ds_system(1);
        let n = rs.n();
        let n_i = n - BOUNDARY_DIM;
        let keep = |i: usize, j: usize| (i < n_i) == (j < n_i);
        let mut h = Triplets::new(n, n);
        for (i, j, v) in rs.h.iter().filter(|&(i, j, _)| keep(i, j)) {
            h.push(i, j, v);
        }
        let mut g = Triplets::new(rs.m_eq(), n);
        for (r, j, v) in rs.g.iter().filter(|&(_, j, _)| j < n_i) {
            g.push(r, j, v);
        }
        rs.h = h;
        rs.g = g;
        let hbb = rs.h.to_dense().view((n_i, n_i), (4, 4)).into_owned();
        let (sur, cache) = condense(rs.clone(), BOUNDARY_DIM, 1, &mut SparseLu::new()).unwrap();
        for i in 0..4 {
            assert!((sur.j1[i] + rs.rx[n_i + i]).abs() <= 1e-12 * (1.0 + rs.rx[n_i + i].abs()));
            for j in 0..4 {
                assert!((sur.j2_at(i, j) - hbb[(i, j)]).abs() <= 1e-12 * (1.0 + hbb[(i, j)].abs()));
            }
        }
        // zero boundary increment reproduces the isolated interior solve
        let inc = recover(&cache, &[0.0; 4]).unwrap();
        let k = rs.bordered().to_dense();
        let idx: Vec<usize> = (0..n_i).chain(n..n + rs.m_eq()).collect();
        let kk = DMatrix::from_fn(idx.len(), idx.len(), |i, j| k[(idx[i], idx[j])]);
        let rhs: Vec<f64> = idx.iter().map(|&i| rs.rhs()[i]).collect();
        let a = dense_solve(&kk, &rhs).unwrap();
        for p in 0..n_i {
            assert!((inc.x[p] - a[p]).abs() <= 1e-9 * (1.0 + a[p].abs()));
        }
    }

    #[test]
    fn isolated_surrogate_minimizer_matches_full_solve() {
        for seed in 0..5 {
            let rs = ds_system(seed);
            let (sur, cache) = condense(rs.clone(), BOUNDARY_DIM, 1, &mut SparseLu::new()).unwrap();
            let v = sur.stationary_point().unwrap();
            let full = solve_correction(&rs, &mut SparseLu::new()).unwrap();
            let n_i = rs.n() - BOUNDARY_DIM;
            for i in 0..4 {
                assert!((v[i] - full.x[n_i + i]).abs() <= 1e-8 * (1.0 + full.x[n_i + i].abs()));
            }
            let rec = recover(&cache, &v).unwrap();
            assert!(relative_deviation(&rec, &full) <= 1e-8);
        }
    }

    #[test]
    fn zero_surrogate_leaves_transmission_solve_unchanged() {
        let net = case("small.json");
        let sc = make_synthetic(&net, "ramp", 0.0, 0).unwrap();
        let (part, agents, _) = partition_network(&net, &sc).unwrap();
        let p = &agents.ts;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = p.random_interior_state(&mut rng, 10.0).unwrap();
        let res = residual_bundle(p, &s, 10.0).unwrap();
        let rs = assemble_reduced(p, &s, 10.0, &res, 3.0, true).unwrap();
        let zero = QuadraticSurrogate {
            ds_id: 1,
            j2: vec![0.0; 16],
            j1: vec![0.0; 4],
            j0: 0.0,
        };
        let pos = vec![part.ts_boundary[0].to_vec()];
        let (inc, _) = accumulate_solve(&rs, &pos, &[&zero], &mut SparseLu::new()).unwrap();
        let plain = solve_correction(&rs, &mut SparseLu::new()).unwrap();
        assert!(relative_deviation(&inc, &plain) <= 1e-12);
        let (none, _) = accumulate_solve(&rs, &[], &[], &mut SparseLu::new()).unwrap();
        assert!(relative_deviation(&none, &plain) <= 1e-12);
    }

    #[test]
    fn accumulated_boundary_matches_centralized_oracle() {
        let net = case("t3d3x3.json");
        for seed in 0..5u64 {
            let sc = make_synthetic(&net, "cloud-transient", 0.02, seed).unwrap();
            let (part, agents, central) = partition_network(&net, &sc).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.random_range(1.0..590.0);
            let alpha = rng.random_range(1.0..60.0);
            let s = central.random_interior_state(&mut rng, t).unwrap();
            let res = residual_bundle(&central, &s, t).unwrap();
            let oracle = dense_full_newton(&central, &s, t, &res.combined(alpha, true)).unwrap();
            let mut surs = Vec::new();
            for (k, p) in agents.ds.iter().enumerate() {
                let ls = part.ds[k].restrict(&s);
                let r = residual_bundle(p, &ls, t).unwrap();
                let rs = assemble_reduced(p, &ls, t, &r, alpha, true).unwrap();
                surs.push(
                    condense(rs, BOUNDARY_DIM, part.ds_ids[k], &mut SparseLu::new())
                        .unwrap()
                        .0,
                );
            }
            let ls = part.ts.restrict(&s);
            let r = residual_bundle(&agents.ts, &ls, t).unwrap();
            let rs = assemble_reduced(&agents.ts, &ls, t, &r, alpha, true).unwrap();
            let pos: Vec<Vec<usize>> = part.ts_boundary.iter().map(|b| b.to_vec()).collect();
            let refs: Vec<&QuadraticSurrogate> = surs.iter().collect();
            let (_, vs) = accumulate_solve(&rs, &pos, &refs, &mut SparseLu::new()).unwrap();
            for (k, v) in vs.iter().enumerate() {
                for (i, &g) in part.boundary[k].iter().enumerate() {
                    let want = oracle.x[g];
                    assert!(
                        (v[i] - want).abs() <= 1e-8 * want.abs().max(1.0),
                        "seed {seed} ds {k}"
                    );
                }
            }
        }
    }

    #[test]
    fn recover_rejects_wrong_dimension() {
        let (_, cache) = condense(ds_system(2), BOUNDARY_DIM, 1, &mut SparseLu::new()).unwrap();
        assert!(matches!(
            recover(&cache, &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
