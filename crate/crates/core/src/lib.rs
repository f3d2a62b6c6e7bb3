//! STM calibration and dynamic MRI reconstruction toolkit.

pub mod error;
pub mod grid;
pub mod fft;
pub mod linalg;
pub mod data;
pub mod io;
pub mod phantom;
pub mod calib;
pub mod nullspace;
pub mod maps;
pub mod recon;
pub mod metrics;

pub use error::{Result, StmError};
