//! Regularized auxiliary particle filter with parameter learning, run
//! independently on every block and merged like the MCMC sub-posteriors.
//!
//! Parameters are moved in the unconstrained coordinates
//! `(kappa, ln(nu - kappa + 1), ln((1 + lambda)/(1 - lambda)))` by Liu-West
//! shrinkage plus Gaussian noise. A proposal outside the parameter space gets
//! zero weight and keeps its ancestor's values.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{merge_blocks, MergeConfig, MergedPosterior};
use crate::model::{BlockPartition, InitialState, Panel, PriorSpec, Theta, NUM_PARAMS};
use crate::rng::{stream, Purpose};
use crate::stats::{ln_gamma_density, normalize_log_weights};

/// Weighted particles of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    /// `states[j][k]`: latent state of series `k` in particle `j`.
    pub states: Vec<Vec<f64>>,
    pub params: Vec<Theta>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    pub t: usize,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Weighted mean of the parameters.
    pub fn mean_theta(&self) -> Theta {
        let mut acc = [0.0; NUM_PARAMS];
        for (th, w) in self.params.iter().zip(&self.weights) {
            for (a, v) in acc.iter_mut().zip(th.to_array()) {
                *a += w * v;
            }
        }
        Theta::from_array(acc)
    }

    /// Unweighted draws: `n` multinomial resamples of the parameters.
    pub fn resample_params<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Theta> {
        multinomial_indices(&self.weights, n, rng)
            .into_iter()
            .map(|i| self.params[i])
            .collect()
    }
}

/// Settings of the particle filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RapfConfig {
    /// Number of particles `N`.
    pub particles: usize,
    /// Liu-West shrinkage `a`; the noise variance factor is `1 - a^2`.
    pub shrinkage: f64,
    /// Resample when the effective sample size falls below this;
    /// `None` means `N / 2`.
    pub ess_threshold: Option<f64>,
    pub seed: u64,
    pub block_size: usize,
    pub prior: PriorSpec,
    pub initial_state: InitialState,
    pub merge: MergeConfig,
    pub workers: usize,
}

impl Default for RapfConfig {
    fn default() -> Self {
        RapfConfig {
            particles: 1000,
            shrinkage: 0.98,
            ess_threshold: None,
            seed: 0,
            block_size: 10,
            prior: PriorSpec::default(),
            initial_state: InitialState::Diffuse,
            merge: MergeConfig::default(),
            workers: 1,
        }
    }
}

impl RapfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::param("need at least two particles"));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::param("shrinkage must be in [0, 1]"));
        }
        if let Some(e) = self.ess_threshold {
            if !(e >= 0.0 && e <= self.particles as f64) {
                return Err(Error::param("ESS threshold must be in [0, N]"));
            }
        }
        if self.block_size < 1 || self.workers < 1 {
            return Err(Error::param("block size and workers must be at least 1"));
        }
        self.prior.validate()?;
        self.merge.validate()
    }

    pub fn threshold(&self) -> f64 {
        self.ess_threshold.unwrap_or(self.particles as f64 / 2.0)
    }

    pub fn noise_variance(&self) -> f64 {
        1.0 - self.shrinkage * self.shrinkage
    }
}

pub fn rapf_reparam(theta: &Theta) -> [f64; NUM_PARAMS] {
    [
        theta.kappa,
        (theta.nu - theta.kappa + 1.0).ln(),
        ((1.0 + theta.lambda) / (1.0 - theta.lambda)).ln(),
    ]
}

/// Inverse of [`rapf_reparam`]. The result may still fail validation (for
/// example `lambda <= 0`).
pub fn rapf_inverse(u: &[f64; NUM_PARAMS]) -> Result<Theta> {
    if !(u[0] > 0.0) {
        return Err(Error::param(format!(
            "first coordinate must be positive, got {}",
            u[0]
        )));
    }
    let kappa = u[0];
    Ok(Theta {
        kappa,
        nu: u[1].exp() + kappa - 1.0,
        lambda: (0.5 * u[2]).tanh(),
    })
}

/// One-step predictive mean of `x` given the current state.
pub fn predictive_mean(x: f64, theta: &Theta) -> f64 {
    x / theta.lambda * theta.nu / (theta.nu + theta.kappa)
}

fn ln_obs(y: f64, x: f64, kappa: f64) -> f64 {
    ln_gamma_density(y, 0.5 * kappa, 0.5 * kappa * x)
}

fn multinomial_indices<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cdf.partition_point(|c| *c <= u).min(weights.len() - 1)
        })
        .collect()
}

/// Log first-stage weights: previous log weight plus the observation density
/// at the predictive mean.
pub fn first_stage_log_weights(ps: &ParticleSet, y_next: &[f64]) -> Vec<f64> {
    (0..ps.len())
        .map(|j| {
            let th = &ps.params[j];
            let lw = ps.weights[j].ln();
            ps.states[j]
                .iter()
                .zip(y_next)
                .map(|(&x, &y)| ln_obs(y, predictive_mean(x, th), th.kappa))
                .sum::<f64>()
                + lw
        })
        .collect()
}

/// Selects `N` ancestors with probabilities proportional to the first-stage
/// weights.
pub fn apf_first_stage<R: Rng + ?Sized>(
    ps: &ParticleSet,
    y_next: &[f64],
    rng: &mut R,
) -> Result<Vec<usize>> {
    if y_next.iter().any(|y| !(*y > 0.0)) {
        return Err(Error::input("observations must be positive"));
    }
    let lw = first_stage_log_weights(ps, y_next);
    let w = normalize_log_weights(&lw).ok_or_else(|| {
        Error::DegenerateWeights(format!(
            "all first-stage weights vanished at t = {}",
            ps.t + 1
        ))
    })?;
    Ok(multinomial_indices(&w, ps.len(), rng))
}

/// Weighted mean and covariance of points.
pub fn weighted_moments(
    points: &[[f64; NUM_PARAMS]],
    weights: &[f64],
) -> ([f64; NUM_PARAMS], [[f64; NUM_PARAMS]; NUM_PARAMS]) {
    let mut mean = [0.0; NUM_PARAMS];
    let total: f64 = weights.iter().sum();
    for (p, w) in points.iter().zip(weights) {
        for k in 0..NUM_PARAMS {
            mean[k] += w * p[k] / total;
        }
    }
    let mut cov = [[0.0; NUM_PARAMS]; NUM_PARAMS];
    for (p, w) in points.iter().zip(weights) {
        for a in 0..NUM_PARAMS {
            for b in 0..NUM_PARAMS {
                cov[a][b] += w * (p[a] - mean[a]) * (p[b] - mean[b]) / total;
            }
        }
    }
    (mean, cov)
}

/// Lower Cholesky factor, adding diagonal jitter (from `1e-10`, growing) when
/// the matrix is not numerically positive definite.
pub fn cholesky_jittered(m: &[[f64; NUM_PARAMS]; NUM_PARAMS]) -> [[f64; NUM_PARAMS]; NUM_PARAMS] {
    let mut jitter = 0.0;
    loop {
        let mut l = [[0.0; NUM_PARAMS]; NUM_PARAMS];
        let mut ok = true;
        'outer: for i in 0..NUM_PARAMS {
            for j in 0..=i {
                let mut s = m[i][j] + if i == j { jitter } else { 0.0 };
                for k in 0..j {
                    s -= l[i][k] * l[j][k];
                }
                if i == j {
                    if !(s > 0.0) {
                        ok = false;
                        break 'outer;
                    }
                    l[i][i] = s.sqrt();
                } else {
                    l[i][j] = s / l[j][j];
                }
            }
        }
        if ok {
            return l;
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
    }
}

/// Liu-West proposals: `a u_r + (1 - a) mean + N(0, (1 - a^2) V)` for every
/// selected ancestor `r`, where `mean` and `V` are the weighted moments of
/// the cloud.
pub fn liu_west_propose<R: Rng + ?Sized>(
    params: &[[f64; NUM_PARAMS]],
    weights: &[f64],
    selected: &[usize],
    a: f64,
    rng: &mut R,
) -> Result<Vec<[f64; NUM_PARAMS]>> {
    if params.len() < 2 || weights.len() != params.len() {
        return Err(Error::input(
            "Liu-West step needs at least two weighted particles",
        ));
    }
    let (mean, cov) = weighted_moments(params, weights);
    let h2 = 1.0 - a * a;
    let chol = cholesky_jittered(&cov);
    selected
        .iter()
        .map(|&r| {
            let src = params
                .get(r)
                .ok_or_else(|| Error::input(format!("ancestor {r} out of range")))?;
            let mut out = [0.0; NUM_PARAMS];
            for k in 0..NUM_PARAMS {
                out[k] = a * src[k] + (1.0 - a) * mean[k];
            }
            if h2 > 0.0 {
                let z: [f64; NUM_PARAMS] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let s = h2.sqrt();
                for i in 0..NUM_PARAMS {
                    out[i] += s * (0..=i).map(|k| chol[i][k] * z[k]).sum::<f64>();
                }
            }
            Ok(out)
        })
        .collect()
}

/// Propagates the selected ancestors at the proposed parameters and applies
/// the second-stage weights `prod_k p(y_k | x_k) / p(y_k | mu_k)`.
pub fn propagate_and_reweight<R: Rng + ?Sized>(
    ps: &ParticleSet,
    ancestors: &[usize],
    new_params: &[[f64; NUM_PARAMS]],
    y_next: &[f64],
    rng: &mut R,
) -> Result<ParticleSet> {
    let n = ancestors.len();
    if new_params.len() != n {
        return Err(Error::input("one proposal per ancestor is required"));
    }
    let k = y_next.len();
    let mut states = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    let mut log_w = Vec::with_capacity(n);
    for (&r, u) in ancestors.iter().zip(new_params) {
        let prev = &ps.states[r];
        if prev.len() != k {
            return Err(Error::input("state and observation widths differ"));
        }
        let anc = ps.params[r];
        let theta = match rapf_inverse(u) {
            Ok(th) if th.is_valid() => th,
            _ => {
                states.push(prev.clone());
                params.push(anc);
                log_w.push(f64::NEG_INFINITY);
                continue;
            }
        };
        let beta = Beta::new(0.5 * theta.nu, 0.5 * theta.kappa)
            .map_err(|e| Error::param(format!("beta transition: {e}")))?;
        let mut xs = Vec::with_capacity(k);
        let mut lw = 0.0;
        for (&x_prev, &y) in prev.iter().zip(y_next) {
            let x = x_prev * beta.sample(rng) / theta.lambda;
            lw += ln_obs(y, x, theta.kappa) - ln_obs(y, predictive_mean(x_prev, &anc), anc.kappa);
            xs.push(x);
        }
        states.push(xs);
        params.push(theta);
        log_w.push(if lw.is_nan() { f64::NEG_INFINITY } else { lw });
    }
    let weights = normalize_log_weights(&log_w).ok_or_else(|| {
        Error::DegenerateWeights(format!(
            "all second-stage weights vanished at t = {}",
            ps.t + 1
        ))
    })?;
    Ok(ParticleSet {
        states,
        params,
        weights,
        t: ps.t + 1,
    })
}

/// Effective sample size `N / (1 + N sum (w - mean w)^2 / (sum w)^2)`.
pub fn ess(weights: &[f64]) -> Result<f64> {
    let n = weights.len() as f64;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::input(
            "ESS needs nonnegative weights with a positive sum",
        ));
    }
    let m = total / n;
    let ss: f64 = weights.iter().map(|w| (w - m) * (w - m)).sum();
    Ok(n / (1.0 + n * ss / (total * total)))
}

/// Multinomial resampling when the ESS is below `threshold`; a threshold of
/// `N` or more always resamples.
pub fn resample_if_needed<R: Rng + ?Sized>(
    ps: ParticleSet,
    threshold: f64,
    rng: &mut R,
) -> Result<(ParticleSet, bool)> {
    let n = ps.len();
    let e = ess(&ps.weights)?;
    if !(threshold >= n as f64 || e < threshold) {
        return Ok((ps, false));
    }
    let idx = multinomial_indices(&ps.weights, n, rng);
    let states = idx.iter().map(|&i| ps.states[i].clone()).collect();
    let params = idx.iter().map(|&i| ps.params[i]).collect();
    Ok((
        ParticleSet {
            states,
            params,
            weights: vec![1.0 / n as f64; n],
            t: ps.t,
        },
        true,
    ))
}

/// Initial particles: parameters from the prior and states from the known
/// start, or, for a diffuse start, from the filtered law of `x_1` given
/// `y_1` (then `t = 1`).
pub fn initial_particles<R: Rng + ?Sized>(
    y: &[Vec<f64>],
    init: &InitialState,
    prior: &PriorSpec,
    n: usize,
    rng: &mut R,
) -> Result<ParticleSet> {
    let k = y.len();
    let params: Vec<Theta> = (0..n).map(|_| prior.sample(rng)).collect();
    let (states, t) = match init {
        InitialState::Known(x0) => ((0..n).map(|_| x0.clone()).collect(), 0),
        InitialState::Diffuse => {
            let mut states = Vec::with_capacity(n);
            for th in &params {
                let shape = 0.5 * (th.nu + th.kappa);
                let g = crate::filtering::standard_gamma(shape)?;
                states.push(
                    (0..k)
                        .map(|j| g.sample(rng) / (0.5 * th.kappa * y[j][0]))
                        .collect(),
                );
            }
            (states, 1)
        }
    };
    Ok(ParticleSet {
        states,
        params,
        weights: vec![1.0 / n as f64; n],
        t,
    })
}

/// Runs the filter on one block over all its observations.
pub fn run_block_filter<R: Rng + ?Sized>(
    y: &[Vec<f64>],
    init: &InitialState,
    prior: &PriorSpec,
    config: &RapfConfig,
    rng: &mut R,
) -> Result<ParticleSet> {
    let t_len = y.first().map_or(0, |s| s.len());
    let mut ps = initial_particles(y, init, prior, config.particles, rng)?;
    let threshold = config.threshold();
    let mut y_next = vec![0.0; y.len()];
    while ps.t < t_len {
        for (dst, s) in y_next.iter_mut().zip(y) {
            *dst = s[ps.t];
        }
        let ancestors = apf_first_stage(&ps, &y_next, rng)?;
        let reparam: Vec<[f64; NUM_PARAMS]> = ps.params.iter().map(rapf_reparam).collect();
        let proposals = liu_west_propose(&reparam, &ps.weights, &ancestors, config.shrinkage, rng)?;
        let next = propagate_and_reweight(&ps, &ancestors, &proposals, &y_next, rng)?;
        ps = resample_if_needed(next, threshold, rng)?.0;
    }
    Ok(ps)
}

/// Output of [`run_ep_rapf`].
#[derive(Debug, Clone)]
pub struct RapfResult {
    pub blocks: Vec<ParticleSet>,
    /// Unweighted resampled draws per block, `[lambda, kappa, nu]` rows.
    pub block_draws: Vec<Vec<Vec<f64>>>,
    pub merged: MergedPosterior,
}

impl RapfResult {
    pub fn merged_thetas(&self) -> Vec<Theta> {
        self.merged
            .draws
            .iter()
            .map(|d| Theta::from_array([d[0], d[1], d[2]]))
            .collect()
    }
}

/// Filters every block independently and merges the resampled parameter
/// particles.
pub fn run_ep_rapf(
    panel: &Panel,
    partition: &BlockPartition,
    config: &RapfConfig,
) -> Result<RapfResult> {
    config.validate()?;
    config.initial_state.validate(panel.num_series())?;
    if partition.num_series() != panel.num_series() {
        return Err(Error::input("partition does not match the panel"));
    }
    let prior = config.prior.for_blocks(partition.num_blocks());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    let per_block: Vec<(ParticleSet, Vec<Vec<f64>>)> = pool.install(|| {
        partition
            .ranges()
            .par_iter()
            .enumerate()
            .map(|(b, r)| {
                let mut rng = stream(config.seed, Purpose::Particles, &[b as u64]);
                let y = panel.block(r.clone());
                let init = config.initial_state.for_block(r.clone());
                let ps = run_block_filter(y, &init, &prior, config, &mut rng)?;
                let draws = ps
                    .resample_params(ps.len(), &mut rng)
                    .iter()
                    .map(|th| th.to_array().to_vec())
                    .collect();
                Ok((ps, draws))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (blocks, block_draws): (Vec<_>, Vec<_>) = per_block.into_iter().unzip();
    let mut rng = stream(config.seed, Purpose::Merge, &[u64::MAX, config.merge.seed]);
    let merged = merge_blocks(&block_draws, &config.merge, &mut rng)?;
    Ok(RapfResult {
        blocks,
        block_draws,
        merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reparam_cases() {
        let th = Theta::new(0.5, 2.0, 2.0).unwrap();
        let u = rapf_reparam(&th);
        assert_eq!(u[1], 0.0);
        assert!((u[2] - 3.0f64.ln()).abs() < 1e-15);
        let back = rapf_inverse(&rapf_reparam(&Theta::new(0.7, 3.8, 10.0).unwrap())).unwrap();
        assert!((back.lambda - 0.7).abs() < 1e-12);
        assert!((back.kappa - 3.8).abs() < 1e-12);
        assert!((back.nu - 10.0).abs() < 1e-12);
        assert!(rapf_inverse(&[0.0, 0.0, 0.0]).is_err());
        assert_eq!(rapf_inverse(&[1.0, 0.0, 0.0]).unwrap().lambda, 0.0);
    }

    #[test]
    fn predictive_mean_hand_value() {
        let th = Theta::new(0.5, 3.8, 10.0).unwrap();
        assert!((predictive_mean(1.0, &th) - 2.0 * 10.0 / 13.8).abs() < 1e-15);
    }

    #[test]
    fn ess_cases() {
        assert!((ess(&[0.25; 4]).unwrap() - 4.0).abs() < 1e-12);
        assert!((ess(&[1.0, 0.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        let w = [0.1, 0.2, 0.3, 0.4];
        let s: Vec<f64> = w.iter().map(|v| v * 7.5).collect();
        assert!((ess(&w).unwrap() - ess(&s).unwrap()).abs() < 1e-12);
        assert!(ess(&[0.0, 0.0]).is_err());
    }

    fn set(n: usize) -> ParticleSet {
        let th = Theta::new(0.7, 3.8, 10.0).unwrap();
        ParticleSet {
            states: vec![vec![1.0]; n],
            params: vec![th; n],
            weights: (1..=n)
                .map(|i| i as f64)
                .map(|v| v / (n * (n + 1) / 2) as f64)
                .collect(),
            t: 0,
        }
    }

    #[test]
    fn resample_thresholds() {
        let mut rng = stream(1, Purpose::Bench, &[]);
        let (ps, did) = resample_if_needed(set(4), 0.0, &mut rng).unwrap();
        assert!(!did);
        assert_eq!(ps.weights, set(4).weights);
        let (ps, did) = resample_if_needed(set(4), 4.0, &mut rng).unwrap();
        assert!(did);
        assert!(ps.weights.iter().all(|w| *w == 0.25));
    }

    #[test]
    fn liu_west_limits() {
        let pts = vec![[1.0, 0.5, 2.0], [2.0, 0.1, 1.0], [1.5, 0.9, 0.0]];
        let w = vec![0.2, 0.5, 0.3];
        let mut rng = stream(2, Purpose::Bench, &[]);
        let out = liu_west_propose(&pts, &w, &[2, 0, 1], 1.0, &mut rng).unwrap();
        assert_eq!(out, vec![pts[2], pts[0], pts[1]]);
        assert!(liu_west_propose(&pts[..1], &w[..1], &[0], 0.5, &mut rng).is_err());
    }

    #[test]
    fn cholesky_handles_singular() {
        let l = cholesky_jittered(&[[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        assert!(l.iter().flatten().all(|v| v.is_finite()));
        assert!((l[0][0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_proposal_gets_zero_weight() {
        let ps = set(3);
        let good = rapf_reparam(&ps.params[0]);
        let bad = [-1.0, 0.0, 0.0];
        let mut rng = stream(3, Purpose::Bench, &[]);
        let next =
            propagate_and_reweight(&ps, &[0, 1, 2], &[good, bad, good], &[1.0], &mut rng).unwrap();
        assert_eq!(next.weights[1], 0.0);
        assert_eq!(next.params[1], ps.params[1]);
        assert!((next.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(next.t, 1);
    }
}
