//! Shared oracles for integration tests.
#![allow(dead_code)]

/// Grid posterior of `lambda` for a panel with a diffuse start, from the
/// exact marginal likelihood of each series given its first observation.
/// `kappa = u^2` and `nu = v^2`, so the prior kernel on `(u, v)` is
/// `exp(-(u^2 + v^2)/2)`.
///
/// Each step integrates `x ~ Ga(a, b)` against `y | x ~ Ga(k/2, k x/2)`,
/// which gives a compound gamma density; the posterior of `x` is again gamma
/// and thinning by `Be(nu/2, kappa/2)` then scaling by `1/lambda` maps
/// `Ga((nu+kappa)/2, b)` to `Ga(nu/2, lambda b)`.
pub fn lambda_grid_posterior(y: &[Vec<f64>], bins: usize, sub: usize) -> Vec<f64> {
    use statrs::function::gamma::ln_gamma;
    let du = 0.04;
    let n_u = 200;
    let lambdas: Vec<f64> = (0..bins * sub)
        .map(|i| (i as f64 + 0.5) / (bins * sub) as f64)
        .collect();
    let ln_lam: Vec<f64> = lambdas.iter().map(|l| l.ln()).collect();
    let ln_y: f64 = y.iter().flat_map(|s| s[1..].iter()).map(|v| v.ln()).sum();
    let steps = y.iter().map(|s| s.len() - 1).sum::<usize>() as f64;
    let mut logs: Vec<f64> = Vec::new();
    for iu in 0..n_u {
        let u = (iu as f64 + 0.5) * du;
        for iv in 0..n_u {
            let v = (iv as f64 + 0.5) * du;
            let (kappa, nu) = (u * u, v * v);
            if nu <= kappa - 1.0 {
                logs.extend(lambdas.iter().map(|_| f64::NEG_INFINITY));
                continue;
            }
            let hk = 0.5 * kappa;
            let a = 0.5 * nu;
            let base = -0.5 * (u * u + v * v)
                + steps * (ln_gamma(a + hk) - ln_gamma(a) - ln_gamma(hk) + hk * hk.ln())
                + (hk - 1.0) * ln_y;
            for &ll_lam in &ln_lam {
                let lam = ll_lam.exp();
                let mut ll = base;
                for series in y {
                    // Posterior of x_1 given y_1 has rate hk * y_1.
                    let mut rate = hk * series[0];
                    for &obs in &series[1..] {
                        let next = lam * rate + hk * obs;
                        ll += a * (ll_lam + rate.ln()) - (a + hk) * next.ln();
                        rate = next;
                    }
                }
                logs.push(ll);
            }
        }
    }
    let global = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; bins];
    for (i, l) in logs.iter().enumerate() {
        out[(i % lambdas.len()) / sub] += (l - global).exp();
    }
    let s: f64 = out.iter().sum();
    out.iter().map(|m| m / s).collect()
}

/// Relative frequencies of `lambdas` in `bins` equal cells of `(0, 1)`.
pub fn lambda_histogram(lambdas: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &l in lambdas {
        h[((l * bins as f64) as usize).min(bins - 1)] += 1.0 / lambdas.len() as f64;
    }
    h
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
