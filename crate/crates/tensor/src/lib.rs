//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Covers the layer set a small density-regression CNN needs: same-padded
//! convolution, batch normalization, ReLU, max and region pooling, linear,
//! softmax, channel concatenation, and MSE / cross-entropy losses, plus Adam
//! and a finite-difference gradient checker.
//!
//! ```
//! use pandense_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let p = tape.leaf(Tensor::full(&[3], 2.0).with_requires_grad(true));
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(p).unwrap(), &[4.0, 4.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod ops;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use ops::{BatchNormStats, NormMode, PoolKind};
pub use optim::{AdamConfig, AdamState};
pub use params::{Param, ParamSet};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Caps the global rayon pool at `threads` workers. Returns `false` if the pool
/// was already initialised.
pub fn init_thread_pool(threads: usize) -> bool {
    rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global().is_ok()
}
