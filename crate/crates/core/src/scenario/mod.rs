//! Time-varying loads and renewable availability.
//!
//! Profiles are keyed by system and element: `ts/<bus id>` or
//! `ds<id>/<bus id>` for bus loads, `ts/res/<k>` or `ds<id>/res/<k>` for the
//! `k`-th renewable unit of a system. Stored knot values are noise-free; the
//! seeded noise is applied once when the scenario is built.

mod hermite;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Network, ResKind, Subsystem};

pub use hermite::{hermite_eval, Profile};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Relative amplitude: each knot becomes `v * (1 + amplitude * r)` with
    /// `r` uniform in `[-1, 1]`.
    pub amplitude: f64,
    pub seed: u64,
}

/// Knot values of one profile key.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SeriesSet {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pd: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qd: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pav: Option<Vec<f64>>,
}

/// On-disk scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub horizon: [f64; 2],
    pub knot_dt: f64,
    pub profiles: BTreeMap<String, SeriesSet>,
    #[serde(default)]
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileSet {
    pub pd: Option<Profile>,
    pub qd: Option<Profile>,
    pub pav: Option<Profile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    spec: ScenarioFile,
    profiles: BTreeMap<String, ProfileSet>,
}

/// Parameters of one system at one time, with time derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    pub pd: Vec<f64>,
    pub qd: Vec<f64>,
    pub dpd: Vec<f64>,
    pub dqd: Vec<f64>,
    pub pav: Vec<f64>,
    pub dpav: Vec<f64>,
}

impl SystemParams {
    pub fn zeros(sys: &Subsystem) -> Self {
        let (nb, nr) = (sys.buses.len(), sys.res.len());
        Self {
            pd: vec![0.0; nb],
            qd: vec![0.0; nb],
            dpd: vec![0.0; nb],
            dqd: vec![0.0; nb],
            pav: vec![0.0; nr],
            dpav: vec![0.0; nr],
        }
    }
}

/// Parameters of every system (uniform system order) at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub t: f64,
    pub systems: Vec<SystemParams>,
}

/// Profiles of one system resolved against its buses and RES units.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemBinding {
    loads: Vec<Option<(Profile, Profile)>>,
    res: Vec<Profile>,
}

impl SystemBinding {
    pub fn eval(&self, t: f64) -> Result<SystemParams> {
        let nb = self.loads.len();
        let mut out = SystemParams {
            pd: vec![0.0; nb],
            qd: vec![0.0; nb],
            dpd: vec![0.0; nb],
            dqd: vec![0.0; nb],
            pav: Vec::with_capacity(self.res.len()),
            dpav: Vec::with_capacity(self.res.len()),
        };
        for (i, load) in self.loads.iter().enumerate() {
            if let Some((p, q)) = load {
                (out.pd[i], out.dpd[i]) = p.eval(t)?;
                (out.qd[i], out.dqd[i]) = q.eval(t)?;
            }
        }
        for r in &self.res {
            let (v, d) = r.eval(t)?;
            out.pav.push(v);
            out.dpav.push(d);
        }
        Ok(out)
    }
}

impl Scenario {
    /// Builds profiles from a document, applying its noise.
    pub fn from_spec(spec: ScenarioFile) -> Result<Self> {
        let [t0, t1] = spec.horizon;
        let dt = spec.knot_dt;
        if !(t0.is_finite() && t1 > t0 && dt > 0.0 && dt.is_finite()) {
            return Err(Error::validation(
                "scenario horizon",
                "requires t0 < t1 and knot_dt > 0",
            ));
        }
        let steps = ((t1 - t0) / dt).round();
        if (steps * dt - (t1 - t0)).abs() > 1e-9 * (t1 - t0) {
            return Err(Error::validation(
                "scenario horizon",
                "length is not a multiple of knot_dt",
            ));
        }
        let knots = steps as usize + 1;
        let amp = spec.noise.amplitude;
        if !(0.0..1.0).contains(&amp) {
            return Err(Error::validation(
                "scenario noise",
                "amplitude must lie in [0, 1)",
            ));
        }

        let mut profiles = BTreeMap::new();
        for (key, series) in &spec.profiles {
            let build =
                |name: &str, values: &Option<Vec<f64>>, floor: bool| -> Result<Option<Profile>> {
                    let Some(values) = values else {
                        return Ok(None);
                    };
                    if values.len() != knots {
                        return Err(Error::validation(
                            format!("profile {key}.{name}"),
                            format!("expected {knots} knots, found {}", values.len()),
                        ));
                    }
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(spec.noise.seed ^ stable_hash(key, name));
                    let noisy = values
                        .iter()
                        .map(|&v| {
                            let r: f64 = rng.random_range(-1.0..=1.0);
                            let v = v * (1.0 + amp * r);
                            if floor {
                                v.max(0.0)
                            } else {
                                v
                            }
                        })
                        .collect();
                    Profile::uniform(t0, dt, noisy).map(Some).map_err(|e| {
                        Error::validation(format!("profile {key}.{name}"), e.to_string())
                    })
                };
            if let Some(pav) = &series.pav {
                if pav.iter().any(|v| *v < 0.0) {
                    return Err(Error::validation(
                        format!("profile {key}.pav"),
                        "negative availability",
                    ));
                }
            }
            let set = ProfileSet {
                pd: build("pd", &series.pd, false)?,
                qd: build("qd", &series.qd, false)?,
                pav: build("pav", &series.pav, true)?,
            };
            profiles.insert(key.clone(), set);
        }
        Ok(Self { spec, profiles })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let spec: ScenarioFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_spec(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("scenario serializes")
    }

    pub fn spec(&self) -> &ScenarioFile {
        &self.spec
    }

    pub fn horizon(&self) -> (f64, f64) {
        (self.spec.horizon[0], self.spec.horizon[1])
    }

    pub fn profile(&self, key: &str) -> Option<&ProfileSet> {
        self.profiles.get(key)
    }

    /// Resolves the profiles of system `sys` of `net`.
    pub fn bind(&self, net: &Network, sys: usize) -> Result<SystemBinding> {
        let prefix = net.system_key(sys);
        let system = net.system(sys);
        let missing = |key: String| Error::MissingProfile { key };
        let mut loads = Vec::with_capacity(system.buses.len());
        for bus in &system.buses {
            if !bus.has_load() {
                loads.push(None);
                continue;
            }
            let key = format!("{prefix}/{}", bus.id);
            let set = self
                .profiles
                .get(&key)
                .ok_or_else(|| missing(key.clone()))?;
            match (&set.pd, &set.qd) {
                (Some(p), Some(q)) => loads.push(Some((p.clone(), q.clone()))),
                _ => return Err(missing(format!("{key} (pd and qd)"))),
            }
        }
        let mut res = Vec::with_capacity(system.res.len());
        for k in 0..system.res.len() {
            let key = format!("{prefix}/res/{k}");
            let p = self
                .profiles
                .get(&key)
                .and_then(|s| s.pav.clone())
                .ok_or_else(|| missing(key))?;
            res.push(p);
        }
        Ok(SystemBinding { loads, res })
    }

    /// Checks that every load bus and RES unit of `net` has a profile.
    pub fn check_covers(&self, net: &Network) -> Result<()> {
        for s in 0..net.n_systems() {
            self.bind(net, s)?;
        }
        Ok(())
    }

    /// Nominal loads and fixed availability over `horizon`.
    pub fn constant(net: &Network, horizon: (f64, f64)) -> Result<Self> {
        let spec = SyntheticSpec {
            shape: Shape::Flat,
            noise: 0.0,
            seed: 0,
            horizon,
            knot_dt: horizon.1 - horizon.0,
        };
        make_synthetic_with(net, &spec)
    }
}

/// Parameters of all systems at `t`.
pub fn sample_params(scenario: &Scenario, net: &Network, t: f64) -> Result<ParamSnapshot> {
    let systems = (0..net.n_systems())
        .map(|s| scenario.bind(net, s)?.eval(t))
        .collect::<Result<_>>()?;
    Ok(ParamSnapshot { t, systems })
}

/// FNV-1a over `key` and `series`, so every profile draws its own stream.
fn stable_hash(key: &str, series: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes().chain(*b".").chain(series.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat,
    Ramp,
    NoonPeak,
    CloudTransient,
}

impl Shape {
    pub const ALL: [Shape; 4] = [
        Shape::Flat,
        Shape::Ramp,
        Shape::NoonPeak,
        Shape::CloudTransient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Flat => "flat",
            Shape::Ramp => "ramp",
            Shape::NoonPeak => "noon-peak",
            Shape::CloudTransient => "cloud-transient",
        }
    }

    /// Multipliers `(load, pv, wt)` at horizon fraction `u` in `[0, 1]`.
    /// Loads scale nominal bus demand; renewable factors scale the rating.
    pub fn multipliers(self, u: f64) -> (f64, f64, f64) {
        match self {
            Shape::Flat => (1.0, 0.6, 0.5),
            Shape::Ramp => (0.9 + 0.2 * u, 0.4 + 0.4 * u, 0.4 + 0.3 * u),
            Shape::NoonPeak => (
                1.0 + 0.03 * (2.0 * PI * u).sin() + 0.01 * (20.0 * PI * u).sin(),
                0.7 + 0.1 * (2.0 * PI * u + 0.5).sin() + 0.05 * (14.0 * PI * u).sin(),
                0.5 + 0.1 * (10.0 * PI * u + 1.0).sin(),
            ),
            Shape::CloudTransient => {
                let x = (u - 0.5) / 0.1;
                let dip = if x.abs() < 1.0 {
                    (0.5 * PI * x).cos().powi(2)
                } else {
                    0.0
                };
                (1.0, 0.8 - 0.5 * dip, 0.5)
            }
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s)
            .ok_or_else(|| Error::UnknownShape(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub shape: Shape,
    pub noise: f64,
    pub seed: u64,
    pub horizon: (f64, f64),
    pub knot_dt: f64,
}

impl SyntheticSpec {
    /// Ten-minute window with one-second knots.
    pub fn new(shape: Shape, noise: f64, seed: u64) -> Self {
        Self {
            shape,
            noise,
            seed,
            horizon: (0.0, 600.0),
            knot_dt: 1.0,
        }
    }
}

/// Synthetic scenario over the default ten-minute window.
pub fn make_synthetic(net: &Network, shape: &str, noise: f64, seed: u64) -> Result<Scenario> {
    make_synthetic_with(net, &SyntheticSpec::new(shape.parse()?, noise, seed))
}

pub fn make_synthetic_with(net: &Network, spec: &SyntheticSpec) -> Result<Scenario> {
    let (t0, t1) = spec.horizon;
    if !(t1 > t0 && spec.knot_dt > 0.0) {
        return Err(Error::InvalidArgument(
            "synthetic horizon must be nonempty".into(),
        ));
    }
    let steps = ((t1 - t0) / spec.knot_dt).round().max(1.0) as usize;
    let knot_dt = (t1 - t0) / steps as f64;
    let mult: Vec<(f64, f64, f64)> = (0..=steps)
        .map(|k| spec.shape.multipliers(k as f64 / steps as f64))
        .collect();

    let mut profiles = BTreeMap::new();
    for s in 0..net.n_systems() {
        let prefix = net.system_key(s);
        let sys = net.system(s);
        for bus in sys.buses.iter().filter(|b| b.has_load()) {
            profiles.insert(
                format!("{prefix}/{}", bus.id),
                SeriesSet {
                    pd: Some(mult.iter().map(|m| bus.pd * m.0).collect()),
                    qd: Some(mult.iter().map(|m| bus.qd * m.0).collect()),
                    pav: None,
                },
            );
        }
        for (k, res) in sys.res.iter().enumerate() {
            let pav = mult
                .iter()
                .map(|m| match res.kind {
                    ResKind::Pv => res.s_rated * m.1,
                    ResKind::Wt => res.s_rated * m.2,
                })
                .collect();
            profiles.insert(
                format!("{prefix}/res/{k}"),
                SeriesSet {
                    pav: Some(pav),
                    ..Default::default()
                },
            );
        }
    }
    Scenario::from_spec(ScenarioFile {
        horizon: [t0, t0 + steps as f64 * knot_dt],
        knot_dt,
        profiles,
        noise: NoiseSpec {
            amplitude: spec.noise,
            seed: spec.seed,
        },
    })
}
