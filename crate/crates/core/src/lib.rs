pub mod attention;
pub mod error;
pub mod eval;
pub mod gp;
pub mod infer;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pksim;
pub mod rng;
pub mod study;
pub mod train;

pub use error::{Error, Result};
