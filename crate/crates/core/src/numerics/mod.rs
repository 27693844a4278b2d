//! Random sources and numerically hardened special functions.

mod rng;
mod sampling;
mod special;

pub use rng::RandomSource;
pub use sampling::{
    sample_beta, sample_beta_truncated, sample_gamma, sample_inv_gamma, sample_std_normal,
};
pub use special::{
    log1m_exp, log_add_exp, log_beta, log_gamma, log_reg_inc_beta, log_sum_exp,
};

pub(crate) use special::{ln_beta, ln_gamma, ln_inc_beta};
