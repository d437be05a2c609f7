use statrs::distribution::{ContinuousCDF, Normal};

/// Neumaier-compensated sum.
pub(crate) fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut total = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = total + v;
        if total.abs() >= v.abs() {
            comp += (total - t) + v;
        } else {
            comp += (v - t) + total;
        }
        total = t;
    }
    total + comp
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    sum(values.iter().copied()) / values.len() as f64
}

/// Sample variance with divisor `len - 1`.
pub(crate) fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() - 1) as f64
}

/// Linear-interpolation quantile of already sorted data (type 7).
pub(crate) fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Standard normal quantile.
pub(crate) fn normal_quantile(prob: f64) -> f64 {
    Normal::standard().inverse_cdf(prob)
}

/// Numerically stable `log(1 + exp(x))`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
