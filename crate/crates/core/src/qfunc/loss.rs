//! General robust loss family with shape `alpha` and scale `c`.
//!
//! `rho(x) = |alpha - 2| / alpha * (((x / c)^2 / |alpha - 2| + 1)^(alpha / 2) - 1)`
//!
//! `alpha = 2` is the scaled L2 loss, `alpha = 1` a smoothed L1, `alpha = 0`
//! the Cauchy loss. Both singular points are evaluated through their limits.

/// Shape values this close to 0 or 2 use the closed-form limit.
pub const LIMIT_TOLERANCE: f64 = 1e-5;

/// Returns `(loss, d loss / d residual)`.
pub fn robust_loss(residual: f64, alpha: f64, c: f64) -> (f64, f64) {
    debug_assert!(c > 0.0, "robust loss scale must be positive");
    let z = residual / c;
    let z2 = z * z;
    if (alpha - 2.0).abs() < LIMIT_TOLERANCE {
        return (0.5 * z2, residual / (c * c));
    }
    if alpha.abs() < LIMIT_TOLERANCE {
        let base = 0.5 * z2 + 1.0;
        return (base.ln(), residual / (c * c) / base);
    }
    let b = (alpha - 2.0).abs();
    let base = z2 / b + 1.0;
    let loss = b / alpha * (base.powf(alpha / 2.0) - 1.0);
    let grad = residual / (c * c) * base.powf(alpha / 2.0 - 1.0);
    (loss, grad)
}
