//! Direct depth and ego-motion estimation from monocular image triplets.

pub mod attention;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod losses;
pub mod motion;
pub mod occlusion;
pub mod optimizer;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use motion::MotionField;
pub use types::{ImageGrid, Intrinsics, PoseSE3, Trajectory, Twist};
