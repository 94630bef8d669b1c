//! Dense `f64` arrays, differentiable layers, parameter storage and SGD.
//!
//! Training math runs in 64-bit; values are rounded through 32-bit only when
//! they are persisted.

mod array;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;

pub use array::DenseArray;
pub(crate) use array::{gemm, gemm_strided, MatRef};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{layer_norm, linear, softmax_rows};
pub use optim::{sgd_step, LrSchedule, ScheduleKind};
pub use params::{Grads, Init, ParamEntry, ParamId, ParamSpec, ParamStore};
