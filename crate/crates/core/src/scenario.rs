//! Scenario configuration, candidate-pool construction and the builtin
//! example scenarios.
//!
//! A scenario is read from TOML. Unknown keys are rejected. The field
//! reference lives in `docs/scenario.md`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::{AtomId, InfoAtom};
use crate::params::{prior_information, AgentPath, GaussianPrior, ParamLayout, ParamVector};
use crate::select::CandidatePool;
use crate::sensors::{
    CameraSensor, DopplerSensor, MeasurementSpec, Orientation, Sensor, SensorModel, ToaSensor,
};

/// Speed of light (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const DEFAULT_CARRIER_HZ: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub count: usize,
    #[serde(default)]
    pub spacing: Spacing,
}

impl Schedule {
    /// Measurement times over the window, endpoints included.
    pub fn times(&self, window: &Window) -> Vec<f64> {
        let span = window.t_end - window.t_start;
        match self.count {
            0 => Vec::new(),
            1 => vec![window.t_start + 0.5 * span],
            n => (0..n).map(|i| window.t_start + span * i as f64 / (n - 1) as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Mean in layout order: position, velocity, acceleration, then each
    /// nuisance block in sensor declaration order.
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum OrientationConfig {
    LookAt {
        target: [f64; 3],
        #[serde(default = "default_up")]
        up: [f64; 3],
    },
    Fixed {
        /// World-to-camera rotation, row major.
        rotation: [[f64; 3]; 3],
    },
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SensorConfig {
    Toa {
        id: String,
        /// Std. dev. of the scaled time of arrival (m).
        sigma: f64,
        #[serde(default)]
        symbol_index_base: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schedule: Option<Schedule>,
    },
    Doppler {
        id: String,
        /// Std. dev. of the scaled frequency shift (m/s). Mutually exclusive
        /// with `frequency_std_ppb`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
        /// Fractional frequency noise in parts per billion.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frequency_std_ppb: Option<f64>,
        /// Absolute frequency noise (Hz), scaled by the carrier wavelength.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frequency_std_hz: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        carrier_hz: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schedule: Option<Schedule>,
    },
    Camera {
        id: String,
        /// `[f_x, f_y]` in pixels.
        focal: [f64; 2],
        #[serde(default)]
        skew: f64,
        /// Principal point `[o_x, o_y]` in pixels.
        #[serde(default)]
        center: [f64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pixel_sigma: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pixel_covariance: Option<[[f64; 2]; 2]>,
        orientation: OrientationConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schedule: Option<Schedule>,
    },
}

impl SensorConfig {
    pub fn id(&self) -> &str {
        match self {
            SensorConfig::Toa { id, .. } | SensorConfig::Doppler { id, .. } | SensorConfig::Camera { id, .. } => id,
        }
    }

    fn schedule(&self) -> Option<Schedule> {
        match self {
            SensorConfig::Toa { schedule, .. }
            | SensorConfig::Doppler { schedule, .. }
            | SensorConfig::Camera { schedule, .. } => *schedule,
        }
    }

    fn build(&self, agent_id: &str, path: Arc<AgentPath>) -> Result<Sensor> {
        let model = match self {
            SensorConfig::Toa { sigma, symbol_index_base, .. } => {
                SensorModel::Toa(ToaSensor { sigma: *sigma, symbol_index_base: *symbol_index_base })
            }
            SensorConfig::Doppler { id, sigma, frequency_std_ppb, frequency_std_hz, carrier_hz, .. } => {
                let carrier = carrier_hz.unwrap_or(DEFAULT_CARRIER_HZ);
                if !(carrier > 0.0) {
                    return Err(Error::Config(format!("doppler sensor `{id}`: carrier_hz must be positive")));
                }
                let sigma = match (sigma, frequency_std_ppb, frequency_std_hz) {
                    (Some(s), None, None) => *s,
                    (None, Some(ppb), None) => doppler_sigma_from_ppb(*ppb),
                    (None, None, Some(hz)) => doppler_sigma_from_hz(*hz, carrier),
                    _ => {
                        return Err(Error::Config(format!(
                            "doppler sensor `{id}` needs exactly one of `sigma`, `frequency_std_ppb` or `frequency_std_hz`"
                        )))
                    }
                };
                SensorModel::Doppler(DopplerSensor { sigma })
            }
            SensorConfig::Camera { id, focal, skew, center, pixel_sigma, pixel_covariance, orientation, .. } => {
                let a = Matrix3::new(focal[0], *skew, center[0], 0.0, focal[1], center[1], 0.0, 0.0, 1.0);
                let cov = match (pixel_sigma, pixel_covariance) {
                    (Some(s), None) => Matrix2::identity() * (s * s),
                    (None, Some(c)) => Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1]),
                    _ => {
                        return Err(Error::Config(format!(
                            "camera `{id}` needs exactly one of `pixel_sigma` or `pixel_covariance`"
                        )))
                    }
                };
                let orientation = match orientation {
                    OrientationConfig::LookAt { target, up } => Orientation::LookAt {
                        target: Vector3::from(*target),
                        up: Vector3::from(*up),
                    },
                    OrientationConfig::Fixed { rotation: r } => Orientation::Fixed(Matrix3::from_fn(|i, j| r[i][j])),
                };
                SensorModel::Camera(CameraSensor::new(a, orientation, cov)?)
            }
        };
        Sensor::new(self.id(), agent_id, path, model)
    }
}

/// Scaled-frequency noise (m/s) for a frequency noise in Hz: `σ_f · c / f_c`.
pub fn doppler_sigma_from_hz(sigma_hz: f64, carrier_hz: f64) -> f64 {
    sigma_hz * SPEED_OF_LIGHT / carrier_hz
}

/// Scaled-frequency noise (m/s) for a fractional frequency noise in ppb.
/// The carrier cancels: `(ppb·1e-9·f_c) · c / f_c`.
pub fn doppler_sigma_from_ppb(ppb: f64) -> f64 {
    ppb * 1e-9 * SPEED_OF_LIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: String,
    pub budget: usize,
    /// `[t, x, y, z]` rows with strictly increasing `t`.
    pub waypoints: AgentPath,
    #[serde(default)]
    pub sensors: Vec<SensorConfig>,
}

/// A complete synthetic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    pub window: Window,
    pub schedule: Schedule,
    pub prior: PriorConfig,
    #[serde(default)]
    pub agents: Vec<AgentConfig>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window.t_end > self.window.t_start) {
            return Err(Error::Config("window.t_end must exceed window.t_start".into()));
        }
        let mut agent_ids: Vec<&str> = self.agents.iter().map(|a| a.id.as_str()).collect();
        agent_ids.sort_unstable();
        if agent_ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("agent ids must be unique".into()));
        }
        let mut sensor_ids: Vec<&str> = self.agents.iter().flat_map(|a| a.sensors.iter().map(SensorConfig::id)).collect();
        sensor_ids.sort_unstable();
        if let Some(w) = sensor_ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("sensor id `{}` is declared twice", w[0])));
        }
        self.prior()?;
        Ok(())
    }

    /// Parameter layout implied by the declared sensors.
    pub fn layout(&self) -> Result<ParamLayout> {
        let blocks = self.agents.iter().flat_map(|a| a.sensors.iter()).filter_map(|s| match s {
            SensorConfig::Toa { id, .. } => Some((id.clone(), crate::params::BlockKind::Toa)),
            SensorConfig::Doppler { id, .. } => Some((id.clone(), crate::params::BlockKind::Doppler)),
            SensorConfig::Camera { .. } => None,
        });
        ParamLayout::new(blocks)
    }

    pub fn prior(&self) -> Result<GaussianPrior> {
        let layout = Arc::new(self.layout()?);
        let p = layout.dim();
        let mean = ParamVector::new(layout, DVector::from_column_slice(&self.prior.mean))
            .map_err(|_| Error::Config(format!("prior.mean has {} entries, layout needs {p}", self.prior.mean.len())))?;
        let cov = match (&self.prior.covariance, &self.prior.diag) {
            (Some(rows), None) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::Config(format!("prior.covariance must be {p}×{p}")));
                }
                DMatrix::from_fn(p, p, |i, j| rows[i][j])
            }
            (None, Some(diag)) => {
                if diag.len() != p {
                    return Err(Error::Config(format!("prior.diag has {} entries, layout needs {p}", diag.len())));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(diag))
            }
            _ => return Err(Error::Config("prior needs exactly one of `covariance` or `diag`".into())),
        };
        GaussianPrior::new(mean, cov)
    }
}

/// Candidate pools and everything needed to map atoms back to measurements.
#[derive(Debug, Clone)]
pub struct ScenarioPools {
    pub layout: Arc<ParamLayout>,
    pub prior: GaussianPrior,
    /// Prior information, the base of every selection.
    pub q0: DMatrix<f64>,
    pub pools: Vec<CandidatePool>,
    /// Every scheduled measurement, indexed by atom id (dropped ones included).
    pub specs: Vec<MeasurementSpec>,
    /// Scheduled measurements dropped for invalid geometry, per agent.
    pub dropped: Vec<usize>,
}

impl ScenarioPools {
    pub fn spec(&self, id: AtomId) -> &MeasurementSpec {
        &self.specs[id.0]
    }

    /// Specs of every atom that made it into a pool.
    pub fn candidate_specs(&self) -> Vec<MeasurementSpec> {
        self.pools
            .iter()
            .flat_map(|p| p.atoms().iter().map(|a| self.spec(a.id()).clone()))
            .collect()
    }

    pub fn with_budget(&self, budget: usize) -> Vec<CandidatePool> {
        self.pools.iter().map(|p| p.with_budget(budget)).collect()
    }
}

/// Expand a scenario into per-agent candidate pools linearized at the prior mean.
pub fn build_pools(scenario: &Scenario) -> Result<ScenarioPools> {
    scenario.validate()?;
    let prior = scenario.prior()?;
    let layout = prior.layout().clone();
    let q0 = prior_information(&prior)?;
    let theta_ref = prior.mean();
    let window = scenario.window;

    let mut pools = Vec::with_capacity(scenario.agents.len());
    let mut specs = Vec::new();
    let mut dropped = Vec::with_capacity(scenario.agents.len());
    for agent in &scenario.agents {
        let path = Arc::new(agent.waypoints.clone());
        let mut atoms = Vec::new();
        let mut scheduled = 0;
        let mut agent_dropped = 0;
        for cfg in &agent.sensors {
            let sensor = Arc::new(cfg.build(&agent.id, path.clone())?);
            let base_k = match &sensor.model {
                SensorModel::Toa(t) => t.symbol_index_base,
                _ => 0,
            };
            let times = cfg.schedule().unwrap_or(scenario.schedule).times(&window);
            for (j, t) in times.into_iter().enumerate() {
                let spec = MeasurementSpec::new(sensor.clone(), t, window.t_start).with_symbol_index(base_k + j as u64);
                let id = AtomId(specs.len());
                scheduled += 1;
                match InfoAtom::from_model(id, &spec, theta_ref) {
                    Ok(atom) => atoms.push(atom.with_source(sensor.sensor_type())),
                    Err(e) if e.is_geometry() => agent_dropped += 1,
                    Err(e) => return Err(e),
                }
                specs.push(spec);
            }
        }
        if scheduled > 0 && atoms.is_empty() {
            return Err(Error::Config(format!("every scheduled measurement of agent `{}` has invalid geometry", agent.id)));
        }
        if agent_dropped > 0 {
            warn!("agent `{}`: dropped {agent_dropped} of {scheduled} measurements with invalid geometry", agent.id);
        }
        pools.push(CandidatePool::new(agent.id.clone(), atoms, agent.budget)?);
        dropped.push(agent_dropped);
    }
    Ok(ScenarioPools { layout, prior, q0, pools, specs, dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuiltinExample {
    /// One agent with a camera.
    Example1,
    /// One agent with a camera and a Doppler receiver.
    Example2,
    /// Two agents on mirrored paths, each with a camera and a Doppler receiver.
    Example3,
    /// Same as `Example3`, intended for cooperative selection.
    Cooperative,
}

impl BuiltinExample {
    pub const ALL: [BuiltinExample; 4] =
        [BuiltinExample::Example1, BuiltinExample::Example2, BuiltinExample::Example3, BuiltinExample::Cooperative];

    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinExample::Example1 => "example1",
            BuiltinExample::Example2 => "example2",
            BuiltinExample::Example3 => "example3",
            BuiltinExample::Cooperative => "cooperative",
        }
    }
}

impl fmt::Display for BuiltinExample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuiltinExample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown builtin example `{s}`")))
    }
}

pub mod builtin {
    //! Frozen fixture geometry for the builtin examples.

    /// Camera focal length (pixels).
    pub const FOCAL_PX: f64 = 50.0;
    /// Image-plane noise (pixels).
    pub const PIXEL_SIGMA: f64 = 0.8;
    /// Doppler receiver frequency noise (Hz), about 0.0099 m/s at 1 GHz.
    pub const DOPPLER_SIGMA_HZ: f64 = 0.033;
    pub const CARRIER_HZ: f64 = super::DEFAULT_CARRIER_HZ;
    pub const MEASUREMENTS_PER_SENSOR: usize = 1000;
    pub const WINDOW: (f64, f64) = (0.0, 1000.0);
    /// Nominal target position.
    pub const TARGET: [f64; 3] = [0.0, 0.0, 0.0];
    /// Prior std. dev. of each target position coordinate (m).
    pub const POSITION_SIGMA: f64 = 4.5;
    /// Prior std. dev. of the velocity and acceleration terms. Each moves the
    /// target by at most 1e-3 of the position scale over the window.
    pub const VELOCITY_SIGMA: f64 = 1e-3 * POSITION_SIGMA / (WINDOW.1 - WINDOW.0);
    pub const ACCELERATION_SIGMA: f64 = 2e-3 * POSITION_SIGMA / ((WINDOW.1 - WINDOW.0) * (WINDOW.1 - WINDOW.0));
    /// Prior std. dev. of the Doppler carrier offset (m/s).
    pub const CARRIER_OFFSET_SIGMA: f64 = 1.0;
    pub const AGENT_ALTITUDE: f64 = 6.0;
    /// x coordinate where the approach starts (m).
    pub const APPROACH_START_X: f64 = -300.0;
    /// Radius of the half-turn around the target (m).
    pub const TURN_RADIUS: f64 = 24.0;
    /// Share of the window spent on the straight approach.
    pub const APPROACH_SHARE: f64 = 0.8;

    /// Waypoints of the first agent: a straight approach at walking pace that
    /// passes beside the target, then a half-turn around it. `mirror` flips
    /// the y axis.
    pub fn agent_path(mirror: bool) -> Vec<[f64; 4]> {
        let sy = if mirror { -1.0 } else { 1.0 };
        let (z, r) = (AGENT_ALTITUDE, TURN_RADIUS);
        let (t0, t1) = WINDOW;
        let t_turn = t0 + APPROACH_SHARE * (t1 - t0);
        let mut rows = vec![[t0, TARGET[0] + APPROACH_START_X, TARGET[1] - r * sy, z]];
        let arc_steps = 36;
        for i in 0..=arc_steps {
            let frac = i as f64 / arc_steps as f64;
            let phi = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * frac;
            let t = t_turn + (t1 - t_turn) * frac;
            rows.push([t, TARGET[0] + r * phi.cos(), TARGET[1] + r * phi.sin() * sy, z]);
        }
        rows
    }
}

/// Expand a builtin example into a full scenario.
pub fn builtin_scenario(tag: BuiltinExample) -> Scenario {
    use builtin::*;

    let agents_spec: &[(&str, bool)] = match tag {
        BuiltinExample::Example1 | BuiltinExample::Example2 => &[("agent1", false)],
        BuiltinExample::Example3 | BuiltinExample::Cooperative => &[("agent1", false), ("agent2", true)],
    };
    let with_doppler = tag != BuiltinExample::Example1;

    let mut agents = Vec::new();
    let mut nuisance_sigmas = Vec::new();
    for (n, &(id, mirror)) in agents_spec.iter().enumerate() {
        let mut sensors = vec![SensorConfig::Camera {
            id: format!("cam{}", n + 1),
            focal: [FOCAL_PX, FOCAL_PX],
            skew: 0.0,
            center: [0.0, 0.0],
            pixel_sigma: Some(PIXEL_SIGMA),
            pixel_covariance: None,
            orientation: OrientationConfig::LookAt { target: TARGET, up: [0.0, 0.0, 1.0] },
            schedule: None,
        }];
        if with_doppler {
            sensors.push(SensorConfig::Doppler {
                id: format!("rf{}", n + 1),
                sigma: None,
                frequency_std_ppb: None,
                frequency_std_hz: Some(DOPPLER_SIGMA_HZ),
                carrier_hz: Some(CARRIER_HZ),
                schedule: None,
            });
            nuisance_sigmas.push(CARRIER_OFFSET_SIGMA);
        }
        let waypoints = AgentPath::try_from(agent_path(mirror)).expect("builtin path is valid");
        agents.push(AgentConfig { id: id.to_owned(), budget: 10, waypoints, sensors });
    }

    let mut mean = TARGET.to_vec();
    mean.extend([0.0; 6]);
    mean.extend(nuisance_sigmas.iter().map(|_| 0.0));
    let mut diag = vec![POSITION_SIGMA.powi(2); 3];
    diag.extend([VELOCITY_SIGMA.powi(2); 3]);
    diag.extend([ACCELERATION_SIGMA.powi(2); 3]);
    diag.extend(nuisance_sigmas.iter().map(|s| s * s));

    Scenario {
        seed: 0,
        window: Window { t_start: WINDOW.0, t_end: WINDOW.1 },
        schedule: Schedule { count: MEASUREMENTS_PER_SENSOR, spacing: Spacing::Uniform },
        prior: PriorConfig { mean, covariance: None, diag: Some(diag) },
        agents,
    }
}
