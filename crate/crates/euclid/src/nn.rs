//! Dense-network substrate: tensors, reverse-mode gradients, Adam, target
//! networks and checkpoint serialization.
//!
//! The gradient engine is deliberately not a general autodiff system. Every
//! loss in this project is a feed-forward composition of a closed primitive
//! set (affine, ELU, tanh, clip, concat, squared row norms, log-softmax,
//! gather, scalar arithmetic, mean), so the [`tape::Op`] enum enumerates
//! exactly those. An unsupported primitive is unrepresentable rather than a
//! runtime error, which keeps the backward rules auditable one by one.
//!
//! All arithmetic is in `f64`. The nets are small enough that the cost is
//! irrelevant, and it buys much tighter finite-difference checks.

pub mod checkpoint;
pub mod dense;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_tensors, write_tensors, MAGIC};
pub use dense::{Activation, DenseNet};
pub use error::{NnError, NnResult};
pub use gradcheck::{gradcheck, GradCheckReport, DEFAULT_FD_STEP, FD_REL_TOL};
pub use optim::{ParamStore, TargetTracker};
pub use tape::{GradMap, NodeId, Tape};
pub use tensor::Tensor;
