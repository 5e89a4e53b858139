//! Differentiable numerical core: dense matrices, a reverse-mode tape,
//! parameter storage, deterministic initialization and gradient checking.

mod gradcheck;
mod graph;
mod init;
mod matrix;
mod param;
mod real;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{AttentionSegment, Graph, Var};
pub use init::{Initializer, RngSeed};
pub use matrix::Matrix;
pub use param::{Param, ParamGrads, ParamId, ParamStore};
pub use real::Real;
