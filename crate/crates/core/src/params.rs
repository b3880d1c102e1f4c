//! Unknown-parameter layout, the quadratic motion model, the Gaussian prior
//! and the known agent trajectories.
//!
//! The parameter vector stacks the target's position, velocity and
//! curvature terms (three spatial entries each) followed by one nuisance
//! block per sensor that needs one:
//!
//! ```text
//! [ pos (3) | vel (3) | acc (3) | toa_a: period, offset | doppler_b: carrier | ... ]
//! ```
//!
//! Nuisance entries are carried in distance/velocity units (time offsets
//! multiplied by the speed of light, frequency offsets multiplied by the
//! wavelength).

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPATIAL_DIM: usize = 3;
pub const MOTION_DIM: usize = 3 * SPATIAL_DIM;

/// Kind of sensor-specific nuisance block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Symbol period and transmit offset, both scaled by c (2 entries).
    Toa,
    /// Carrier mismatch scaled by the wavelength (1 entry).
    Doppler,
}

impl BlockKind {
    pub fn size(self) -> usize {
        match self {
            BlockKind::Toa => 2,
            BlockKind::Doppler => 1,
        }
    }
}

/// One of the three motion blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionBlock {
    Position,
    Velocity,
    Acceleration,
}

impl MotionBlock {
    pub const ALL: [MotionBlock; 3] = [MotionBlock::Position, MotionBlock::Velocity, MotionBlock::Acceleration];

    pub fn range(self) -> Range<usize> {
        let start = match self {
            MotionBlock::Position => 0,
            MotionBlock::Velocity => SPATIAL_DIM,
            MotionBlock::Acceleration => 2 * SPATIAL_DIM,
        };
        start..start + SPATIAL_DIM
    }

    /// Coefficient of this block in the position polynomial at elapsed time `dt`.
    pub fn position_coefficient(self, dt: f64) -> f64 {
        match self {
            MotionBlock::Position => 1.0,
            MotionBlock::Velocity => dt,
            MotionBlock::Acceleration => 0.5 * dt * dt,
        }
    }

    /// Coefficient of this block in the velocity polynomial at elapsed time `dt`.
    pub fn velocity_coefficient(self, dt: f64) -> f64 {
        match self {
            MotionBlock::Position => 0.0,
            MotionBlock::Velocity => 1.0,
            MotionBlock::Acceleration => dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceBlock {
    pub sensor_id: String,
    pub kind: BlockKind,
    offset: usize,
}

impl NuisanceBlock {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.kind.size()
    }
}

/// Addressable block of the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRef<'a> {
    Motion(MotionBlock),
    Nuisance(&'a str),
}

/// Layout of the stacked unknown vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<NuisanceBlock>,
    total_dim: usize,
}

impl ParamLayout {
    /// Layout with only the nine motion entries.
    pub fn motion_only() -> Self {
        ParamLayout { blocks: Vec::new(), total_dim: MOTION_DIM }
    }

    pub fn new<I, S>(blocks: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, BlockKind)>,
        S: Into<String>,
    {
        let mut layout = Self::motion_only();
        for (id, kind) in blocks {
            let sensor_id = id.into();
            if layout.block(&sensor_id).is_some() {
                return Err(Error::Config(format!("sensor `{sensor_id}` declares nuisance parameters twice")));
            }
            layout.blocks.push(NuisanceBlock { sensor_id, kind, offset: layout.total_dim });
            layout.total_dim += kind.size();
        }
        Ok(layout)
    }

    pub fn dim(&self) -> usize {
        self.total_dim
    }

    pub fn nuisance_blocks(&self) -> &[NuisanceBlock] {
        &self.blocks
    }

    pub fn block(&self, sensor_id: &str) -> Option<&NuisanceBlock> {
        self.blocks.iter().find(|b| b.sensor_id == sensor_id)
    }

    /// Contiguous index range of a block.
    pub fn range(&self, block: BlockRef<'_>) -> Option<Range<usize>> {
        match block {
            BlockRef::Motion(m) => Some(m.range()),
            BlockRef::Nuisance(id) => self.block(id).map(NuisanceBlock::range),
        }
    }

    /// Index range of a sensor's nuisance block, checked against its expected kind.
    pub fn nuisance_range(&self, sensor_id: &str, kind: BlockKind) -> Result<Range<usize>> {
        match self.block(sensor_id) {
            Some(b) if b.kind == kind => Ok(b.range()),
            Some(b) => Err(Error::Config(format!(
                "sensor `{sensor_id}` has a {:?} block, expected {kind:?}",
                b.kind
            ))),
            None => Err(Error::Config(format!("sensor `{sensor_id}` has no nuisance block in the layout"))),
        }
    }
}

/// A point in parameter space tied to its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: DVector<f64>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: DVector<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::Dimension { expected: layout.dim(), got: values.len() });
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = DVector::zeros(layout.dim());
        ParamVector { layout, values }
    }

    pub fn from_motion(layout: Arc<ParamLayout>, pos: Vector3<f64>, vel: Vector3<f64>, acc: Vector3<f64>) -> Self {
        let mut v = Self::zeros(layout);
        v.set_motion(MotionBlock::Position, pos);
        v.set_motion(MotionBlock::Velocity, vel);
        v.set_motion(MotionBlock::Acceleration, acc);
        v
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DVector<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: DVector<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn motion(&self, block: MotionBlock) -> Vector3<f64> {
        let r = block.range();
        Vector3::new(self.values[r.start], self.values[r.start + 1], self.values[r.start + 2])
    }

    pub fn set_motion(&mut self, block: MotionBlock, v: Vector3<f64>) {
        let r = block.range();
        self.values.rows_mut(r.start, SPATIAL_DIM).copy_from(&v);
    }

    /// Values of one block (unpack).
    pub fn block(&self, block: BlockRef<'_>) -> Option<&[f64]> {
        let r = self.layout.range(block)?;
        Some(&self.values.as_slice()[r])
    }

    /// Overwrite one block (pack).
    pub fn set_block(&mut self, block: BlockRef<'_>, data: &[f64]) -> Result<()> {
        let r = self
            .layout
            .range(block)
            .ok_or_else(|| Error::Config(format!("unknown block {block:?}")))?;
        if r.len() != data.len() {
            return Err(Error::Dimension { expected: r.len(), got: data.len() });
        }
        self.values.as_mut_slice()[r].copy_from_slice(data);
        Ok(())
    }
}

/// Target position `θ1 + dt·θ2 + dt²/2·θ3` with `dt = t - t_start`.
pub fn motion_position(theta: &ParamVector, t: f64, t_start: f64) -> Vector3<f64> {
    let dt = t - t_start;
    MotionBlock::ALL
        .iter()
        .map(|&b| theta.motion(b) * b.position_coefficient(dt))
        .sum()
}

/// Time derivative of [`motion_position`]: `θ2 + dt·θ3`.
pub fn motion_velocity(theta: &ParamVector, t: f64, t_start: f64) -> Vector3<f64> {
    let dt = t - t_start;
    MotionBlock::ALL
        .iter()
        .map(|&b| theta.motion(b) * b.velocity_coefficient(dt))
        .sum()
}

/// Jacobians of target position and velocity with respect to the full
/// parameter vector. Both are constant in θ.
pub fn motion_jacobians(t: f64, t_start: f64, layout: &ParamLayout) -> (Matrix3xX<f64>, Matrix3xX<f64>) {
    let dt = t - t_start;
    let p = layout.dim();
    let mut dq = Matrix3xX::zeros(p);
    let mut dv = Matrix3xX::zeros(p);
    for b in MotionBlock::ALL {
        let start = b.range().start;
        for i in 0..SPATIAL_DIM {
            dq[(i, start + i)] = b.position_coefficient(dt);
            dv[(i, start + i)] = b.velocity_coefficient(dt);
        }
    }
    (dq, dv)
}

/// Gaussian prior over the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: ParamVector,
    covariance: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: ParamVector, covariance: DMatrix<f64>) -> Result<Self> {
        let p = mean.layout().dim();
        if covariance.nrows() != p || covariance.ncols() != p {
            return Err(Error::Dimension { expected: p, got: covariance.nrows() });
        }
        check_symmetric(&covariance, "prior covariance")?;
        if covariance.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("prior covariance"));
        }
        Ok(GaussianPrior { mean, covariance })
    }

    pub fn diagonal(mean: ParamVector, variances: &[f64]) -> Result<Self> {
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
        Self::new(mean, cov)
    }

    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        self.mean.layout()
    }
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotPositiveDefinite(what));
            }
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotPositiveDefinite(what));
    }
    Ok(())
}

/// Information contributed by the prior: the inverse prior covariance.
pub fn prior_information(prior: &GaussianPrior) -> Result<DMatrix<f64>> {
    let chol = prior
        .covariance()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("prior covariance"))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Known agent trajectory as a piecewise-linear waypoint list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 4]>", into = "Vec<[f64; 4]>")]
pub struct AgentPath {
    times: Vec<f64>,
    positions: Vec<Vector3<f64>>,
}

impl AgentPath {
    pub fn new(waypoints: Vec<(f64, Vector3<f64>)>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::Config("an agent path needs at least two waypoints".into()));
        }
        if waypoints.iter().any(|(t, p)| !t.is_finite() || p.iter().any(|x| !x.is_finite())) {
            return Err(Error::Config("waypoints must be finite".into()));
        }
        if waypoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("waypoint times must be strictly increasing".into()));
        }
        let (times, positions) = waypoints.into_iter().unzip();
        Ok(AgentPath { times, positions })
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn waypoints(&self) -> impl Iterator<Item = (f64, Vector3<f64>)> + '_ {
        self.times.iter().copied().zip(self.positions.iter().copied())
    }

    // Segment whose interval contains t; times past either end extrapolate the
    // end segments. At a waypoint the right-hand segment is used.
    fn segment(&self, t: f64) -> usize {
        let n = self.times.len();
        match self.times.partition_point(|&x| x <= t) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        }
    }

    pub fn sample(&self, t: f64) -> (Vector3<f64>, Vector3<f64>) {
        let i = self.segment(t);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let (p0, p1) = (self.positions[i], self.positions[i + 1]);
        let vel = (p1 - p0) / (t1 - t0);
        (p0 + vel * (t - t0), vel)
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        self.sample(t).0
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        self.sample(t).1
    }
}

impl TryFrom<Vec<[f64; 4]>> for AgentPath {
    type Error = Error;

    fn try_from(rows: Vec<[f64; 4]>) -> Result<Self> {
        AgentPath::new(rows.into_iter().map(|[t, x, y, z]| (t, Vector3::new(x, y, z))).collect())
    }
}

impl From<AgentPath> for Vec<[f64; 4]> {
    fn from(path: AgentPath) -> Self {
        path.waypoints().map(|(t, p)| [t, p.x, p.y, p.z]).collect()
    }
}
