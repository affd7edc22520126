//! Geometry, scenario model and model-driven planning components for
//! reinforced imitative trajectory planning.

pub mod dynamics;
pub mod frenet;
pub mod geometry;
pub mod idm;
pub mod metrics;
pub mod noise;
pub mod par;
pub mod post_opt;
pub mod qp;
pub mod sampler;
pub mod scenario_gen;
pub mod scene;
pub mod sim;
pub mod spline;
pub mod trajectory;

pub use geometry::Point;
pub use scene::{Scenario, DT};
pub use trajectory::TrajectoryAction;
