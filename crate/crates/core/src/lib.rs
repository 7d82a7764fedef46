//! Algorithms for iterative Gaussian-process regression with active
//! exploration in model-predictive autonomous racing.
//!
//! The crate is organized around the two racing stacks:
//! time-trial (GP dynamics compensation, [`timetrial`]) and head-to-head
//! (opponent-policy GP, [`headtohead`]), with the shared machinery
//! underneath: circuit geometry ([`track`]), bicycle dynamics and the
//! mismatch plant ([`vehicle`]), exact GP regression ([`gp`]), diverse data
//! selection ([`dataselect`]), the exploration target selector ([`explore`])
//! and the QP/SQP solvers ([`solver`]).

pub mod dataselect;
pub mod explore;
pub mod gp;
pub mod headtohead;
pub mod solver;
pub mod timetrial;
pub mod track;
pub mod vehicle;

pub use gp::{GpDataset, GpModel, KernelSpec, Observation};
pub use solver::{QpProblem, QpSolution, SolveStatus};
pub use track::{CartesianPose, Track, TrackSegment};
pub use vehicle::{ControlInput, VehicleParams, VehicleState};
