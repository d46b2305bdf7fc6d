//! Monotone piecewise-cubic Hermite interpolation.

use crate::error::{Error, Result};

/// Relative slack allowed when a query lands just outside the knot range
/// through floating-point accumulation of sample times.
const EDGE_SLACK: f64 = 1e-9;

/// Knot sequence with monotone (Fritsch-Carlson limited) slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    times: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl Profile {
    /// Builds a profile; times must be finite and strictly increasing, with
    /// at least two knots.
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::DimensionMismatch {
                what: "profile values",
                expected: times.len(),
                found: values.len(),
            });
        }
        if times.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "profile needs at least two knots, got {}",
                times.len()
            )));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "profile contains non-finite knot".into(),
            ));
        }
        if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "profile times not strictly increasing at knot {}",
                k + 1
            )));
        }
        let slopes = monotone_slopes(&times, &values);
        Ok(Self {
            times,
            values,
            slopes,
        })
    }

    /// Knots `t0 + k * dt` for each value.
    pub fn uniform(t0: f64, dt: f64, values: Vec<f64>) -> Result<Self> {
        let times = (0..values.len()).map(|k| t0 + k as f64 * dt).collect();
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Value and analytic time derivative at `t`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        let (start, end) = (self.start(), self.end());
        let slack = EDGE_SLACK * (end - start).abs().max(1.0);
        if !(t >= start - slack && t <= end + slack) {
            return Err(Error::OutsideHorizon { t, start, end });
        }
        let t = t.clamp(start, end);
        // segment k with times[k] <= t, the last knot using the final segment
        let k = self
            .times
            .partition_point(|&x| x <= t)
            .saturating_sub(1)
            .min(self.times.len() - 2);
        let h = self.times[k + 1] - self.times[k];
        let s = (t - self.times[k]) / h;
        let (y0, y1) = (self.values[k], self.values[k + 1]);
        let (m0, m1) = (self.slopes[k] * h, self.slopes[k + 1] * h);

        let s2 = s * s;
        let s3 = s2 * s;
        let value = (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * m1;
        let deriv = ((6.0 * s2 - 6.0 * s) * y0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * y1
            + (3.0 * s2 - 2.0 * s) * m1)
            / h;
        Ok((value, deriv))
    }
}

/// Value and derivative of `profile` at `t`.
pub fn hermite_eval(profile: &Profile, t: f64) -> Result<(f64, f64)> {
    profile.eval(t)
}

/// Weighted harmonic-mean interior slopes with shape-preserving three-point
/// end slopes.
fn monotone_slopes(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }

    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        let (d0, d1) = (delta[k - 1], delta[k]);
        if d0 * d1 > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            m[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
        }
    }
    m[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    m[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    m
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_profile() {
        let p = Profile::new(vec![0.0, 10.0], vec![5.0, 5.0]).unwrap();
        assert_eq!(p.eval(3.0).unwrap(), (5.0, 0.0));
    }

    #[test]
    fn last_knot_exact() {
        let p = Profile::new(vec![0.0, 4.0, 10.0], vec![1.0, 3.5, 2.25]).unwrap();
        assert_eq!(p.eval(10.0).unwrap().0, 2.25);
        assert_eq!(p.eval(4.0).unwrap().0, 3.5);
    }

    #[test]
    fn reproduces_linear_data() {
        let p = Profile::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]).unwrap();
        let (v, d) = p.eval(0.5).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn outside_range_rejected() {
        let p = Profile::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert!(matches!(p.eval(1.5), Err(Error::OutsideHorizon { .. })));
        assert!(matches!(p.eval(-0.1), Err(Error::OutsideHorizon { .. })));
        assert!(p.eval(1.0 + 1e-12).is_ok());
    }

    #[test]
    fn rejects_unsorted_times() {
        assert!(Profile::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(Profile::new(vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn flat_extremum_has_zero_slope() {
        let p = Profile::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.slopes()[1], 0.0);
    }

    fn knots() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        prop::collection::vec((0.5f64..2.0, -2.0f64..2.0), 3..12).prop_map(|v| {
            let mut t = 0.0;
            let mut times = Vec::new();
            let mut values = Vec::new();
            for (dt, y) in v {
                times.push(t);
                values.push(y);
                t += dt;
            }
            (times, values)
        })
    }

    proptest! {
        #[test]
        fn continuous_at_knots((times, values) in knots()) {
            let p = Profile::new(times.clone(), values.clone()).unwrap();
            for k in 1..times.len() - 1 {
                let eps = 1e-9;
                let (a, da) = p.eval(times[k] - eps).unwrap();
                let (b, db) = p.eval(times[k] + eps).unwrap();
                let (c, _) = p.eval(times[k]).unwrap();
                prop_assert_eq!(c, values[k]);
                prop_assert!((a - b).abs() < 1e-6);
                prop_assert!((da - db).abs() < 1e-5 * (1.0 + da.abs()));
            }
        }

        #[test]
        fn derivative_matches_finite_difference((times, values) in knots(), frac in 0.0f64..1.0) {
            let p = Profile::new(times.clone(), values).unwrap();
            let d = 1e-5;
            let t = p.start() + d + frac * (p.end() - p.start() - 2.0 * d);
            // the second derivative jumps at knots
            prop_assume!(times.iter().all(|k| (k - t).abs() > 2.0 * d));
            let (v, dv) = p.eval(t).unwrap();
            let fd = (p.eval(t + d).unwrap().0 - p.eval(t - d).unwrap().0) / (2.0 * d);
            prop_assert!((fd - dv).abs() <= 1e-6 * v.abs().max(1.0), "fd {} vs {}", fd, dv);
        }

        #[test]
        fn monotone_segments_do_not_overshoot((times, values) in knots(), frac in 0.0f64..1.0) {
            let p = Profile::new(times.clone(), values.clone()).unwrap();
            for k in 0..times.len() - 1 {
                let t = times[k] + frac * (times[k + 1] - times[k]);
                let v = p.eval(t).unwrap().0;
                let lo = values[k].min(values[k + 1]);
                let hi = values[k].max(values[k + 1]);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
