//! State estimation with preintegration and parameter-estimation-based
//! observers (PEBO).
//!
//! The crate covers two settings:
//!
//! * linear time-varying systems in `R^n`: preintegrated transitions
//!   ([`preint`]), the PEBO dynamic extension and regression ([`pebo`]) and
//!   a hybrid sampled-data Kalman observer ([`observer`]);
//! * rigid-body kinematics on `SO(3) x R^n` ([`manifold`]): IMU
//!   preintegration, the body-frame PEBO extension and both batch solvers.
//!
//! [`verify`] holds the registry of cross-method identities that the CLI
//! `verify` command and the acceptance tests evaluate.

pub mod error;
pub mod grid;
pub mod integrate;
pub mod io;
pub mod linalg;
pub mod ltv;
pub mod manifold;
pub mod observer;
pub mod oracle;
pub mod pebo;
pub mod preint;
pub mod so3;
pub mod verify;

pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use so3::Rotation;
