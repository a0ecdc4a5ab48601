//! Closed-form filtering and smoothing for a single gamma-beta series.
//!
//! Conventions (shape/rate gamma laws throughout):
//!
//! ```text
//! sigma2_t        = y_t + lambda * sigma2_{t-1}
//! x_t     | Y_t   ~ Ga((nu + kappa) / 2, kappa * sigma2_t / 2)            filtered
//! x_{t+1} | Y_t   ~ Ga(nu / 2,           lambda * kappa * sigma2_t / 2)   predictive
//! x_t | x_{t+1}, Y_t = lambda * x_{t+1} + z,  z ~ Ga(kappa / 2, kappa * sigma2_t / 2)
//! ```
//!
//! The predictive law follows from the beta-gamma identity: if
//! `G ~ Ga(a + b, r)` and `B ~ Be(a, b)` then `G B ~ Ga(a, r)`, and dividing by
//! `lambda` multiplies the rate by `lambda`.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::model::Theta;
use crate::stats::ln_gamma;

/// Output of the forward filter for one series.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// `sigma2[0]` is the initial value; `sigma2[t]` follows time `t`.
    pub sigma2: Vec<f64>,
    pub theta: Theta,
}

impl FilterState {
    /// Number of filtered times.
    pub fn horizon(&self) -> usize {
        self.sigma2.len() - 1
    }

    pub fn filtered_shape(&self) -> f64 {
        0.5 * (self.theta.nu + self.theta.kappa)
    }

    pub fn predictive_shape(&self) -> f64 {
        0.5 * self.theta.nu
    }

    /// `(shape, rate)` of `x_t | Y_t` for `1 <= t <= horizon`.
    pub fn filtered(&self, t: usize) -> (f64, f64) {
        assert!(t >= 1 && t <= self.horizon(), "filtered law at t={t}");
        (
            self.filtered_shape(),
            0.5 * self.theta.kappa * self.sigma2[t],
        )
    }

    /// `(shape, rate)` of `x_{t+1} | Y_t` for `0 <= t <= horizon`.
    pub fn predictive(&self, t: usize) -> (f64, f64) {
        (
            self.predictive_shape(),
            0.5 * self.theta.lambda * self.theta.kappa * self.sigma2[t],
        )
    }

    fn push(&mut self, y: f64) -> Result<()> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::input(format!(
                "observation {y} is not strictly positive"
            )));
        }
        let prev = *self.sigma2.last().expect("sigma2 holds the initial value");
        self.sigma2.push(y + self.theta.lambda * prev);
        Ok(())
    }
}

/// Runs the `sigma2` recursion over `y`.
pub fn forward_filter(y: &[f64], theta: &Theta, sigma2_0: f64) -> Result<FilterState> {
    if !(sigma2_0 >= 0.0 && sigma2_0.is_finite()) {
        return Err(Error::param("sigma2_0 must be finite and nonnegative"));
    }
    let mut fs = FilterState {
        sigma2: Vec::with_capacity(y.len() + 1),
        theta: *theta,
    };
    fs.sigma2.push(sigma2_0);
    for &v in y {
        fs.push(v)?;
    }
    Ok(fs)
}

/// Draws a full latent path `x_1..x_t` from its joint smoothing law.
pub fn ffbs_sample<R: Rng + ?Sized>(fs: &FilterState, rng: &mut R) -> Result<Vec<f64>> {
    let filtered = standard_gamma(fs.filtered_shape())?;
    let backward = standard_gamma(0.5 * fs.theta.kappa)?;
    let mut path = Vec::new();
    let mut first = true;
    ffbs_into(fs, &mut path, |_, rate| {
        // The first draw is the terminal filtered state; the rest are
        // backward increments.
        let g = if first {
            first = false;
            filtered.sample(rng)
        } else {
            backward.sample(rng)
        };
        g / rate
    })?;
    Ok(path)
}

/// Backward sampler with an injectable gamma source: `draw(shape, rate)` must
/// return a `Ga(shape, rate)` variate. The last state uses the filtered shape,
/// every backward increment uses shape `kappa / 2`.
pub fn ffbs_sample_with<F>(fs: &FilterState, draw: F) -> Result<Vec<f64>>
where
    F: FnMut(f64, f64) -> f64,
{
    let mut path = Vec::new();
    ffbs_into(fs, &mut path, draw)?;
    Ok(path)
}

pub(crate) fn ffbs_into<F>(fs: &FilterState, path: &mut Vec<f64>, mut draw: F) -> Result<()>
where
    F: FnMut(f64, f64) -> f64,
{
    let t = fs.horizon();
    if t == 0 {
        return Err(Error::input(
            "backward sampling needs at least one observation",
        ));
    }
    let kappa = fs.theta.kappa;
    let lambda = fs.theta.lambda;
    path.clear();
    path.resize(t, 0.0);
    let (shape, rate) = fs.filtered(t);
    path[t - 1] = draw(shape, rate);
    for s in (1..t).rev() {
        let z = draw(0.5 * kappa, 0.5 * kappa * fs.sigma2[s]);
        path[s - 1] = lambda * path[s] + z;
    }
    Ok(())
}

/// Extends the filter by `y_next` and draws `x_{t+1}` from the jumping full
/// conditional `Ga((nu + kappa) / 2, kappa * sigma2_{t+1} / 2)`.
pub fn jump_full_conditional_sample<R: Rng + ?Sized>(
    fs: &mut FilterState,
    y_next: f64,
    rng: &mut R,
) -> Result<f64> {
    fs.push(y_next)?;
    let (shape, rate) = fs.filtered(fs.horizon());
    Ok(standard_gamma(shape)?.sample(rng) / rate)
}

/// Log one-step-ahead predictive density of `y` given a `Ga(shape, rate)`
/// predictive law on the latent precision:
/// `integral Ga(y; k/2, k x/2) Ga(x; a, b) dx`.
pub fn ln_predictive_density(y: f64, kappa: f64, shape: f64, rate: f64) -> f64 {
    let c = 0.5 * kappa;
    c * c.ln() + (c - 1.0) * y.ln() + shape * rate.ln() + ln_gamma(shape + c)
        - ln_gamma(c)
        - ln_gamma(shape)
        - (shape + c) * (rate + c * y).ln()
}

/// Sum of log one-step-ahead predictive densities implied by the filter.
///
/// With `sigma2_0 = 0` the predictive law of `x_1` is improper, so the first
/// observation is conditioned on and the sum starts at `t = 2`.
pub fn filter_predictive_loglik(y: &[f64], theta: &Theta, sigma2_0: f64) -> Result<f64> {
    let fs = forward_filter(y, theta, sigma2_0)?;
    let mut total = 0.0;
    for (t, &obs) in y.iter().enumerate() {
        let (shape, rate) = fs.predictive(t);
        if rate > 0.0 {
            total += ln_predictive_density(obs, theta.kappa, shape, rate);
        }
    }
    Ok(total)
}

pub(crate) fn standard_gamma(shape: f64) -> Result<Gamma<f64>> {
    Gamma::new(shape, 1.0).map_err(|e| Error::param(format!("gamma shape {shape}: {e}")))
}
