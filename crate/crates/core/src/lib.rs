//! Open-vocabulary multi-label classification at desk scale.
//!
//! A small vision transformer is trained against label embeddings produced
//! by a frozen text encoder. Each label is scored by combining a global
//! (class-token) inner product with a top-k mean over patch similarities.
//! Training uses a pairwise ranking loss plus L1 distillation toward a
//! frozen teacher, followed by prompt tuning of the shared context vectors.
//! A seeded synthetic world supplies images, teacher embeddings and
//! seen/unseen label splits so every stage can be checked end to end.

pub mod config;
pub mod encoders;
pub mod error;
pub mod head;
pub mod labelspace;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod selfcheck;
pub mod synthworld;
pub mod train;

pub use error::{MktError, Result};
pub use numerics::{Graph, Parameters, Tensor, Var};
