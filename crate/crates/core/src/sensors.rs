//! Measurement mean functions and their Jacobians for time-of-arrival,
//! Doppler and camera sensors.
//!
//! All Jacobians are returned as dense `r × p` row blocks over the full
//! parameter vector; entries outside the motion blocks and the sensor's own
//! nuisance block are zero.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, RowVector3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{motion_position, motion_velocity, AgentPath, BlockKind, MotionBlock, ParamVector};

/// Minimum target-agent range before range-based models are singular (m).
pub const RANGE_MIN: f64 = 1e-6;
/// Minimum camera depth (m).
pub const DEPTH_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorType {
    Toa,
    Doppler,
    Camera,
}

impl SensorType {
    pub const ALL: [SensorType; 3] = [SensorType::Toa, SensorType::Doppler, SensorType::Camera];

    pub fn as_str(self) -> &'static str {
        match self {
            SensorType::Toa => "toa",
            SensorType::Doppler => "doppler",
            SensorType::Camera => "camera",
        }
    }
}

impl fmt::Display for SensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Range measurement `ρ + θ_T·k + θ_T0` (time of arrival times c).
#[derive(Debug, Clone, PartialEq)]
pub struct ToaSensor {
    /// Standard deviation of the scaled time of arrival (m).
    pub sigma: f64,
    /// Symbol index of the first scheduled measurement.
    pub symbol_index_base: u64,
}

/// Range-rate measurement `θ_λ − ρ̇` (frequency shift times wavelength).
#[derive(Debug, Clone, PartialEq)]
pub struct DopplerSensor {
    /// Standard deviation of the scaled frequency shift (m/s).
    pub sigma: f64,
}

/// World-to-camera rotation as a function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum Orientation {
    Fixed(Matrix3<f64>),
    /// Optical axis pointed at a fixed world point; image y axis points away from `up`.
    LookAt { target: Vector3<f64>, up: Vector3<f64> },
}

impl Orientation {
    pub fn rotation(&self, camera_position: &Vector3<f64>) -> Matrix3<f64> {
        match self {
            Orientation::Fixed(r) => *r,
            Orientation::LookAt { target, up } => look_at(camera_position, target, up),
        }
    }
}

fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Matrix3<f64> {
    let z = (target - eye).try_normalize(0.0).unwrap_or_else(Vector3::z);
    let mut x = z.cross(up);
    if x.norm() < 1e-9 * up.norm().max(1.0) {
        // optical axis parallel to `up`
        let alt = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        x = z.cross(&alt);
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Pinhole camera with known intrinsics and orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSensor {
    intrinsics: Matrix3<f64>,
    orientation: Orientation,
    pixel_covariance: Matrix2<f64>,
}

impl CameraSensor {
    pub fn new(intrinsics: Matrix3<f64>, orientation: Orientation, pixel_covariance: Matrix2<f64>) -> Result<Self> {
        let a = &intrinsics;
        if a[(2, 2)] != 1.0 || a[(1, 0)] != 0.0 || a[(2, 0)] != 0.0 || a[(2, 1)] != 0.0 {
            return Err(Error::Config("camera intrinsics must be upper triangular with A[2][2] = 1".into()));
        }
        if let Orientation::Fixed(r) = &orientation {
            let ortho = (r * r.transpose() - Matrix3::identity()).amax();
            if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("camera rotation must be orthonormal with determinant +1".into()));
            }
        }
        let c = &pixel_covariance;
        if (c[(0, 1)] - c[(1, 0)]).abs() > 1e-12 * c.amax() || c.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("camera pixel covariance"));
        }
        Ok(CameraSensor { intrinsics, orientation, pixel_covariance })
    }

    /// Camera with `f_x = f_y = focal`, no skew, principal point at the origin
    /// and isotropic pixel noise.
    pub fn simple(focal: f64, pixel_sigma: f64, orientation: Orientation) -> Result<Self> {
        let a = Matrix3::new(focal, 0.0, 0.0, 0.0, focal, 0.0, 0.0, 0.0, 1.0);
        Self::new(a, orientation, Matrix2::identity() * (pixel_sigma * pixel_sigma))
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orientation
    }

    pub fn pixel_covariance(&self) -> &Matrix2<f64> {
        &self.pixel_covariance
    }

    /// Projection rows `(M, m)` at a camera position.
    pub fn projection(&self, camera_position: &Vector3<f64>) -> (Matrix2x3<f64>, RowVector3<f64>) {
        let ar = self.intrinsics * self.orientation.rotation(camera_position);
        let big_m = ar.fixed_rows::<2>(0).into_owned();
        let small_m = ar.row(2).into_owned();
        (big_m, small_m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SensorModel {
    Toa(ToaSensor),
    Doppler(DopplerSensor),
    Camera(CameraSensor),
}

/// A sensor mounted on an agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensor {
    pub id: String,
    pub agent_id: String,
    pub path: Arc<AgentPath>,
    pub model: SensorModel,
}

impl Sensor {
    pub fn new(id: impl Into<String>, agent_id: impl Into<String>, path: Arc<AgentPath>, model: SensorModel) -> Result<Self> {
        let sigma = match &model {
            SensorModel::Toa(s) => Some(s.sigma),
            SensorModel::Doppler(s) => Some(s.sigma),
            SensorModel::Camera(_) => None,
        };
        if let Some(s) = sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sensor noise sigma must be positive, got {s}")));
            }
        }
        Ok(Sensor { id: id.into(), agent_id: agent_id.into(), path, model })
    }

    pub fn sensor_type(&self) -> SensorType {
        match self.model {
            SensorModel::Toa(_) => SensorType::Toa,
            SensorModel::Doppler(_) => SensorType::Doppler,
            SensorModel::Camera(_) => SensorType::Camera,
        }
    }

    /// Nuisance block this sensor contributes to the parameter layout.
    pub fn block_kind(&self) -> Option<BlockKind> {
        match self.model {
            SensorModel::Toa(_) => Some(BlockKind::Toa),
            SensorModel::Doppler(_) => Some(BlockKind::Doppler),
            SensorModel::Camera(_) => None,
        }
    }

    pub fn measurement_dim(&self) -> usize {
        match self.model {
            SensorModel::Camera(_) => 2,
            _ => 1,
        }
    }

    pub fn noise_covariance(&self) -> DMatrix<f64> {
        match &self.model {
            SensorModel::Toa(s) => DMatrix::from_element(1, 1, s.sigma * s.sigma),
            SensorModel::Doppler(s) => DMatrix::from_element(1, 1, s.sigma * s.sigma),
            SensorModel::Camera(c) => {
                let m = c.pixel_covariance;
                DMatrix::from_fn(2, 2, |i, j| m[(i, j)])
            }
        }
    }
}

/// One scheduled (not yet observed) measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSpec {
    pub sensor: Arc<Sensor>,
    /// Measurement time τ (s).
    pub time: f64,
    /// Start of the estimation window (s).
    pub t_start: f64,
    /// Transmitted symbol index (time-of-arrival sensors only).
    pub symbol_index: u64,
}

impl MeasurementSpec {
    pub fn new(sensor: Arc<Sensor>, time: f64, t_start: f64) -> Self {
        MeasurementSpec { sensor, time, t_start, symbol_index: 0 }
    }

    pub fn with_symbol_index(mut self, k: u64) -> Self {
        self.symbol_index = k;
        self
    }

    pub fn sensor_type(&self) -> SensorType {
        self.sensor.sensor_type()
    }

    pub fn dim(&self) -> usize {
        self.sensor.measurement_dim()
    }

    fn dt(&self) -> f64 {
        self.time - self.t_start
    }
}

/// Anything with a Gaussian likelihood `y ~ N(μ(θ), Σ)`.
pub trait MeasurementModel {
    fn dim(&self) -> usize;
    fn mean(&self, theta: &ParamVector) -> Result<DVector<f64>>;
    fn jacobian(&self, theta: &ParamVector) -> Result<DMatrix<f64>>;
    fn noise_covariance(&self) -> DMatrix<f64>;
}

impl MeasurementModel for MeasurementSpec {
    fn dim(&self) -> usize {
        MeasurementSpec::dim(self)
    }

    fn mean(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        match self.sensor.model {
            SensorModel::Toa(_) => toa_mean(theta, self).map(|v| DVector::from_element(1, v)),
            SensorModel::Doppler(_) => doppler_mean(theta, self).map(|v| DVector::from_element(1, v)),
            SensorModel::Camera(_) => camera_mean(theta, self).map(|v| DVector::from_column_slice(v.as_slice())),
        }
    }

    fn jacobian(&self, theta: &ParamVector) -> Result<DMatrix<f64>> {
        match self.sensor.model {
            SensorModel::Toa(_) => toa_jacobian(theta, self),
            SensorModel::Doppler(_) => doppler_jacobian(theta, self),
            SensorModel::Camera(_) => camera_jacobian(theta, self),
        }
    }

    fn noise_covariance(&self) -> DMatrix<f64> {
        self.sensor.noise_covariance()
    }
}

/// An observed value paired with the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement<M = MeasurementSpec> {
    pub spec: M,
    pub value: DVector<f64>,
}

struct Relative {
    delta: Vector3<f64>,
    delta_dot: Vector3<f64>,
    range: f64,
}

fn relative(theta: &ParamVector, spec: &MeasurementSpec) -> Result<Relative> {
    let (p, p_dot) = spec.sensor.path.sample(spec.time);
    let delta = motion_position(theta, spec.time, spec.t_start) - p;
    let delta_dot = motion_velocity(theta, spec.time, spec.t_start) - p_dot;
    let range = delta.norm();
    if !(range >= RANGE_MIN) {
        return Err(Error::SingularGeometry { range, min: RANGE_MIN });
    }
    Ok(Relative { delta, delta_dot, range })
}

// Writes d(mean)/dq into the three motion blocks of `row`, given a separate
// d(mean)/dq̇ (both 1×3).
fn scatter_motion(row: &mut DMatrix<f64>, r: usize, d_pos: &RowVector3<f64>, d_vel: &RowVector3<f64>, dt: f64) {
    for b in MotionBlock::ALL {
        let g = d_pos * b.position_coefficient(dt) + d_vel * b.velocity_coefficient(dt);
        let start = b.range().start;
        for i in 0..3 {
            row[(r, start + i)] = g[i];
        }
    }
}

fn expect_toa(spec: &MeasurementSpec) -> &ToaSensor {
    match &spec.sensor.model {
        SensorModel::Toa(s) => s,
        _ => panic!("sensor `{}` is not a time-of-arrival sensor", spec.sensor.id),
    }
}

fn expect_camera(spec: &MeasurementSpec) -> &CameraSensor {
    match &spec.sensor.model {
        SensorModel::Camera(c) => c,
        _ => panic!("sensor `{}` is not a camera", spec.sensor.id),
    }
}

/// Scaled time of arrival `ρ(τ) + θ_T·k + θ_T0` (m).
pub fn toa_mean(theta: &ParamVector, spec: &MeasurementSpec) -> Result<f64> {
    expect_toa(spec);
    let rel = relative(theta, spec)?;
    let slot = theta.layout().nuisance_range(&spec.sensor.id, BlockKind::Toa)?;
    let v = theta.values();
    Ok(rel.range + v[slot.start] * spec.symbol_index as f64 + v[slot.start + 1])
}

pub fn toa_jacobian(theta: &ParamVector, spec: &MeasurementSpec) -> Result<DMatrix<f64>> {
    expect_toa(spec);
    let rel = relative(theta, spec)?;
    let slot = theta.layout().nuisance_range(&spec.sensor.id, BlockKind::Toa)?;
    let mut row = DMatrix::zeros(1, theta.layout().dim());
    let los = (rel.delta / rel.range).transpose();
    scatter_motion(&mut row, 0, &los, &RowVector3::zeros(), spec.dt());
    row[(0, slot.start)] = spec.symbol_index as f64;
    row[(0, slot.start + 1)] = 1.0;
    Ok(row)
}

/// Range rate `ρ̇ = (q−p)ᵀ(q̇−ṗ)/‖q−p‖` at the measurement time.
pub fn range_rate(theta: &ParamVector, spec: &MeasurementSpec) -> Result<f64> {
    let rel = relative(theta, spec)?;
    Ok(rel.delta.dot(&rel.delta_dot) / rel.range)
}

/// Scaled frequency shift `θ_λ − ρ̇(τ)` (m/s).
pub fn doppler_mean(theta: &ParamVector, spec: &MeasurementSpec) -> Result<f64> {
    let slot = theta.layout().nuisance_range(&spec.sensor.id, BlockKind::Doppler)?;
    Ok(theta.values()[slot.start] - range_rate(theta, spec)?)
}

pub fn doppler_jacobian(theta: &ParamVector, spec: &MeasurementSpec) -> Result<DMatrix<f64>> {
    let rel = relative(theta, spec)?;
    let slot = theta.layout().nuisance_range(&spec.sensor.id, BlockKind::Doppler)?;
    let u = rel.delta / rel.range;
    let projector = Matrix3::identity() - u * u.transpose();
    // d ρ̇ / d(q − p) and d ρ̇ / d(q̇ − ṗ)
    let d_pos = rel.delta_dot.transpose() * projector / rel.range;
    let d_vel = u.transpose();
    let mut row = DMatrix::zeros(1, theta.layout().dim());
    scatter_motion(&mut row, 0, &-d_pos, &-d_vel, spec.dt());
    row[(0, slot.start)] = 1.0;
    Ok(row)
}

struct Projection {
    big_m: Matrix2x3<f64>,
    small_m: RowVector3<f64>,
    u: Vector2<f64>,
    depth: f64,
}

fn project(theta: &ParamVector, spec: &MeasurementSpec) -> Result<Projection> {
    let cam = expect_camera(spec);
    let p = spec.sensor.path.position(spec.time);
    let delta = motion_position(theta, spec.time, spec.t_start) - p;
    let (big_m, small_m) = cam.projection(&p);
    let depth = (small_m * delta)[0];
    if !(depth >= DEPTH_MIN) {
        return Err(Error::BehindCamera { depth, min: DEPTH_MIN });
    }
    Ok(Projection { big_m, small_m, u: big_m * delta, depth })
}

/// Image coordinates `M(q−p) / m(q−p)` (pixels).
pub fn camera_mean(theta: &ParamVector, spec: &MeasurementSpec) -> Result<Vector2<f64>> {
    let pr = project(theta, spec)?;
    Ok(pr.u / pr.depth)
}

pub fn camera_jacobian(theta: &ParamVector, spec: &MeasurementSpec) -> Result<DMatrix<f64>> {
    let pr = project(theta, spec)?;
    let d = pr.depth;
    let g: Matrix2x3<f64> = pr.big_m / d - pr.u * pr.small_m / (d * d);
    let mut jac = DMatrix::zeros(2, theta.layout().dim());
    for r in 0..2 {
        scatter_motion(&mut jac, r, &g.row(r).into_owned(), &RowVector3::zeros(), spec.dt());
    }
    Ok(jac)
}

/// Stable 64-bit FNV-1a hash used to name per-sensor noise streams.
pub fn stream_id(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Draw noisy measurements at `theta_true`. Each sensor uses its own
/// generator stream derived from `seed`, consumed in `specs` order.
pub fn synthesize(theta_true: &ParamVector, specs: &[MeasurementSpec], seed: u64) -> Result<Vec<Measurement>> {
    synthesize_scaled(theta_true, specs, seed, 1.0)
}

/// As [`synthesize`] with the noise standard deviation multiplied by `noise_scale`.
pub fn synthesize_scaled(
    theta_true: &ParamVector,
    specs: &[MeasurementSpec],
    seed: u64,
    noise_scale: f64,
) -> Result<Vec<Measurement>> {
    let mut streams: HashMap<&str, ChaCha8Rng> = HashMap::new();
    let mut factors: HashMap<&str, DMatrix<f64>> = HashMap::new();
    specs
        .iter()
        .map(|spec| {
            let id = spec.sensor.id.as_str();
            let rng = streams.entry(id).or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream_id(id));
                rng
            });
            let factor = match factors.get(id) {
                Some(l) => l,
                None => {
                    let l = spec
                        .noise_covariance()
                        .cholesky()
                        .ok_or(Error::NotPositiveDefinite("measurement noise covariance"))?
                        .unpack();
                    factors.entry(id).or_insert(l)
                }
            };
            let z = DVector::from_fn(spec.dim(), |_, _| StandardNormal.sample(rng));
            let mean = spec.mean(theta_true)?;
            let value = mean + factor * z * noise_scale;
            Ok(Measurement { spec: spec.clone(), value })
        })
        .collect()
}
