pub mod adapters;
pub mod bench;
pub mod error;
pub mod fusion;
pub mod io;
pub mod linalg;
pub mod rank;
pub mod train;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::{ColumnSelect, Matrix, SpectralDecomposition};
