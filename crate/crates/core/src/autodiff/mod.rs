//! Dense tensors, a recording tape with reverse-mode gradients, named
//! parameters, seeded random streams and a finite-difference checker.

mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use graph::{Gradients, Graph, Primitive, Var};
pub use params::{Linear, ParamId, ParamStore, Parameter};
pub use rng::{derive_index, derive_seed, RngStream};
pub use tensor::{Precision, Scalar, Tensor};
