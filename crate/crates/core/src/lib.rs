//! Fisher-guided low-rank adapter initialization.
//!
//! The pipeline estimates Kronecker-factored Fisher statistics `S_X`, `S_Y`
//! for each linear layer from minibatch taps, scores candidate rank-1 weight
//! directions by their Fisher Energy, keeps the lowest-energy directions and
//! turns them into LoRA factors plus a frozen residual so that the adapted
//! layer matches the original weight at initialization.
//!
//! Every stage ships with a brute-force counterpart (finite differences, the
//! dense Fisher, naive products) used by the test suites.

pub mod autodiff;
pub mod csvio;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod linalg;
pub mod lora;
pub mod stats;
pub mod subspace;

pub use error::{Error, Result};
pub use linalg::Matrix;
