pub(crate) mod conv;
pub(crate) mod dense;
pub(crate) mod elementwise;
pub(crate) mod norm;
pub(crate) mod pool;

pub use dense::PROB_FLOOR;
pub use norm::{BatchNormStats, NormMode, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use pool::{band_start, PoolKind};
