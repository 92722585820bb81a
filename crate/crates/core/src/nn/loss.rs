use crate::scalar::Scalar;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-12;

fn clamp_bounds<S: Scalar>() -> (S, S) {
    let eps = S::of(BCE_CLAMP);
    (eps, S::one() - eps)
}

/// Binary cross-entropy `-[y ln p + (1 - y) ln(1 - p)]`.
pub fn bce<S: Scalar>(pred: S, target: S) -> S {
    let (lo, hi) = clamp_bounds::<S>();
    let p = pred.max(lo).min(hi);
    -(target * p.ln() + (S::one() - target) * (S::one() - p).ln())
}

/// Derivative of [`bce`] with respect to the prediction (zero where the clamp is active).
pub fn bce_grad<S: Scalar>(pred: S, target: S) -> S {
    let (lo, hi) = clamp_bounds::<S>();
    if pred < lo || pred > hi {
        return S::zero();
    }
    -target / pred + (S::one() - target) / (S::one() - pred)
}
