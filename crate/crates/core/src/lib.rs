//! Safe model-based reinforcement learning for box-constrained control-affine
//! systems: a barrier transformation removes the state constraints, a
//! filtered concurrent-learning estimator identifies the unknown drift
//! parameters, and an actor-critic learner with Bellman-error extrapolation
//! approximates the optimal feedback in the transformed coordinates.

pub mod actor_critic;
pub mod barrier;
pub mod estimator;
pub mod experiments;
pub mod integrator;
pub mod io;
pub mod linalg;
pub mod plant;
pub mod simulator;

pub use barrier::{bt_derivative_factor, bt_forward, bt_inverse, BarrierError, SafeBox};
pub use plant::{ControlAffinePlant, PlantError, RobotPlant, TransformedModel, TwoStatePlant};
pub use simulator::{Frame, RunOutput, Scenario, SimError, Simulator, Trajectory};
