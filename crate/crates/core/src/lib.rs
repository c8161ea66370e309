pub mod clustering;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geometry;
pub mod ground;
pub mod losses;
pub mod model;
pub mod par;
pub mod presets;
pub mod pseudo;
pub mod synth;
pub mod train;
pub mod transport;

pub use error::{Error, Result};
pub use field::{CellState, MotionField, StateMap};
