//! Few-shot image classification by ridge-regression reconstruction of spatial feature maps,
//! trained episodically with a rotation-consistency pretext objective.
//!
//! The crate is layered bottom-up: [`tensor`], [`graph`] and [`linalg`] provide arrays and
//! reverse-mode differentiation; [`backbone`] and [`transforms`] produce and rotate feature
//! maps; [`loss`] holds the reconstruction classifier and the consistency loss;
//! [`episodes`], [`training`], [`evaluation`] and [`ablation`] run experiments; [`cli`] is
//! the operator surface behind the `espt` binary.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod loss;
pub mod optim;
pub mod seeding;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
