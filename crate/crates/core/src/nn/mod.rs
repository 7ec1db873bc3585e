//! Small dense/conv network toolkit in f64.
//!
//! Everything is deterministic given a seeded rng: no threads touch the
//! math, parameter traversal order is fixed by construction, and all
//! reductions run in index order.

pub mod conv;
pub mod init;
pub mod layer;
pub mod optim;
pub mod params;

pub use conv::Conv2d;
pub use layer::{Block, Cache, Layer, LayerNorm, LayerNorm2d, LayerScale, Linear, RunMode};
pub use optim::{Adam, ScheduleFreeAdamW};
pub use params::{checksum_params, param_count, GradStore, Model};
