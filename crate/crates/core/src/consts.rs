//! Numerical tolerances shared by the library and its test suites.

/// Eigenvalues below `-PSD_TOL` reject a covariance; those in `[-PSD_TOL, 0)` are clipped.
pub const PSD_TOL: f64 = 1e-10;

/// Clip level for the square root of the lifted noise covariance.
pub const SQRT_CLIP_TOL: f64 = 1e-12;

/// Agreement of the complex four-term sums with the real cosine forms.
pub const REAL_FORM_TOL: f64 = 1e-12;

/// Relative agreement of analytic and finite-difference design gradients.
pub const DESIGN_GRADIENT_TOL: f64 = 1e-7;

/// Relative agreement of analytic and finite-difference error gradients.
pub const ERROR_GRADIENT_TOL: f64 = 1e-6;

/// Relative agreement of the direct and information-form estimation error.
pub const INVERSION_LEMMA_TOL: f64 = 1e-8;

/// Slack allowed when checking that the estimation error never increases with more data.
pub const MONOTONE_TOL: f64 = 1e-12;

/// Default cap on `n_x (T + 1)` for explicit lifted matrices.
pub const LIFTED_CAP: usize = 4096;
