//! Budgeted selection of heterogeneous sensor measurements for vehicle
//! tracking.
//!
//! Candidate measurements (time of arrival, Doppler, camera) are turned into
//! Fisher information atoms, and each agent greedily picks the subset that
//! maximizes the log-determinant of the total information under a per-agent
//! budget. The MAP estimator and Monte-Carlo sweep in [`estimate`] measure how
//! much the selection actually helps.

pub mod error;
pub mod estimate;
pub mod fim;
pub mod params;
pub mod scenario;
pub mod select;
pub mod sensors;

pub use error::{Error, Result};
pub use fim::{AtomId, CriterionReport, FimState, InfoAtom};
pub use params::{AgentPath, BlockKind, GaussianPrior, MotionBlock, ParamLayout, ParamVector};
pub use scenario::{builtin_scenario, build_pools, BuiltinExample, Scenario, ScenarioPools};
pub use select::{Algorithm, CandidatePool, JointSelection, SelectionResult};
pub use sensors::{Measurement, MeasurementModel, MeasurementSpec, Sensor, SensorType};
