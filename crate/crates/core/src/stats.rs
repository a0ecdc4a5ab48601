//! Small numerical helpers shared across modules: log densities, moments,
//! quantiles and log-weight normalization.

/// Natural log of the gamma function.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Log density of `Gamma(shape, rate)` at `x` (density ∝ x^(shape-1) e^(-rate x)).
///
/// Returns `-inf` outside the support. A zero rate is not a proper density and
/// also yields `-inf`.
#[inline]
pub fn ln_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) || !(shape > 0.0) || !(rate > 0.0) {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log density of `Beta(a, b)` at `u`; `-inf` outside `(0, 1)`.
#[inline]
pub fn ln_beta_density(u: f64, a: f64, b: f64) -> f64 {
    if !(u > 0.0 && u < 1.0) || !(a > 0.0) || !(b > 0.0) {
        return f64::NEG_INFINITY;
    }
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * u.ln() + (b - 1.0) * (-u).ln_1p()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; `NaN` for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Linear-interpolation quantile (Hyndman-Fan type 7) of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "correlation of unequal-length samples");
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Converts log weights into normalized weights. Returns `None` when every
/// weight is zero (all `-inf`) or any is `NaN`.
pub fn normalize_log_weights(log_w: &[f64]) -> Option<Vec<f64>> {
    if log_w.iter().any(|w| w.is_nan()) {
        return None;
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Some(w.into_iter().map(|v| v / total).collect())
}

/// Total-variation distance between two discrete distributions given as
/// (not necessarily normalized) masses over the same bins.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a / sp - b / sq).abs())
        .sum::<f64>()
}

/// Posterior summary of one scalar parameter: mean and the 2.5% / 97.5%
/// interquantile interval.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary {
            mean: mean(xs),
            q025: quantile_sorted(&sorted, 0.025),
            q975: quantile_sorted(&sorted, 0.975),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_density_matches_exponential() {
        // Gamma(1, 1) is Exp(1).
        assert!((ln_gamma_density(1.0, 1.0, 1.0) + 1.0).abs() < 1e-15);
        assert_eq!(ln_gamma_density(0.0, 1.0, 1.0), f64::NEG_INFINITY);
        assert_eq!(ln_gamma_density(1.0, 1.0, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn beta_density_uniform_and_support() {
        assert!(ln_beta_density(0.3, 1.0, 1.0).abs() < 1e-14);
        assert_eq!(ln_beta_density(1.2, 2.0, 2.0), f64::NEG_INFINITY);
        assert_eq!(ln_beta_density(1.0, 2.0, 2.0), f64::NEG_INFINITY);
        // Beta(2, 2) at 0.5 is 1.5.
        assert!((ln_beta_density(0.5, 2.0, 2.0) - 1.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn quantile_type7() {
        let xs = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert!((quantile(&xs, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn correlation_degenerate_is_none() {
        assert_eq!(correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        let r = correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_handles_neg_inf_and_large_values() {
        let w = normalize_log_weights(&[1000.0, f64::NEG_INFINITY, 1000.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
        assert!(normalize_log_weights(&[f64::NEG_INFINITY; 3]).is_none());
    }
}
