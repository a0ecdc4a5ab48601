//! One sequential MCMC chain for one block.
//!
//! A time step of a chain is `jump_extend` (append the new latent rows, keep
//! everything else fixed) followed by `n_t` calls to [`transition_step`], a
//! two-stage Gibbs sweep: a random-walk Metropolis-Hastings update of `theta`
//! on transformed coordinates, then a multi-move update of the whole latent
//! block by forward filtering and backward sampling.
//!
//! The prior on new latent rows is the model transition itself, so the
//! sequence of block targets is compatible by construction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::{ffbs_sample, forward_filter, jump_full_conditional_sample};
use crate::model::{
    ln_transition_density, log_prior, CompleteDataStats, InitialState, LatentBlock, PriorSpec,
    Theta, NUM_PARAMS,
};
use crate::stats::{correlation, ln_gamma_density};

/// Everything about a block that stays fixed while its chains run.
#[derive(Debug, Clone, Copy)]
pub struct BlockContext<'a> {
    /// Observations of the block's series (at least up to the chain horizon).
    pub y: &'a [Vec<f64>],
    pub init: &'a InitialState,
    /// Prior, with the fractional power of this block.
    pub prior: &'a PriorSpec,
}

/// State of one chain: `theta` plus the latent block up to time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub theta: Theta,
    pub latents: LatentBlock,
    pub block_id: usize,
    pub replica_id: usize,
    pub proposed: u64,
    pub accepted: u64,
}

impl ChainState {
    pub fn new(theta: Theta, num_series: usize, block_id: usize, replica_id: usize) -> Self {
        ChainState {
            theta,
            latents: LatentBlock::empty(num_series),
            block_id,
            replica_id,
            proposed: 0,
            accepted: 0,
        }
    }

    /// Current time horizon.
    pub fn t(&self) -> usize {
        self.latents.len()
    }

    /// Dimension `p + t K` of the augmented state.
    pub fn dim(&self) -> usize {
        NUM_PARAMS + self.t() * self.latents.num_series()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            return f64::NAN;
        }
        self.accepted as f64 / self.proposed as f64
    }

    /// Coordinates tracked for rate estimation: `theta` followed by the latent
    /// rows from `since_row` to the current horizon, series-major.
    pub fn tracked_coordinates(&self, since_row: usize) -> Vec<f64> {
        let mut out = self.theta.to_array().to_vec();
        for s in self.latents.series() {
            out.extend_from_slice(&s[since_row.min(s.len())..]);
        }
        out
    }
}

/// Tuning of the per-update sweep count and of the random-walk proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    /// Threshold: `n_t` is the smallest lag whose rate is `<= 1 - epsilon`.
    pub epsilon: f64,
    pub n_min: usize,
    pub n_max: usize,
    /// Random-walk standard deviations on `(ln kappa, ln nu, ln((1-lambda)/lambda))`.
    /// `None` tunes them once on a pilot run.
    pub rw_scales: Option<[f64; NUM_PARAMS]>,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            epsilon: 0.1,
            n_min: 10,
            n_max: 50,
            rw_scales: None,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::param("epsilon must be in (0, 1)"));
        }
        if self.n_min < 1 || self.n_max < self.n_min {
            return Err(Error::param("need 1 <= n_min <= n_max"));
        }
        if let Some(s) = self.rw_scales {
            if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::param("random-walk scales must be positive"));
            }
        }
        Ok(())
    }
}

/// Maps `theta` to `(ln kappa, ln nu, ln((1 - lambda) / lambda))`.
pub fn to_unconstrained(theta: &Theta) -> [f64; NUM_PARAMS] {
    [
        theta.kappa.ln(),
        theta.nu.ln(),
        ((1.0 - theta.lambda) / theta.lambda).ln(),
    ]
}

pub fn from_unconstrained(u: &[f64; NUM_PARAMS]) -> Theta {
    Theta {
        kappa: u[0].exp(),
        nu: u[1].exp(),
        lambda: 1.0 / (1.0 + u[2].exp()),
    }
}

/// `ln |d theta / d u|` of the inverse transform.
pub fn ln_jacobian(theta: &Theta) -> f64 {
    theta.kappa.ln() + theta.nu.ln() + theta.lambda.ln() + (1.0 - theta.lambda).ln()
}

fn ln_target_unconstrained(stats: &CompleteDataStats, theta: &Theta, prior: &PriorSpec) -> f64 {
    let lp = log_prior(theta, prior);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    let ll = stats.loglik(theta);
    if ll == f64::NEG_INFINITY {
        return ll;
    }
    ll + lp + ln_jacobian(theta)
}

fn propose<R: Rng + ?Sized>(theta: &Theta, scales: &[f64; NUM_PARAMS], rng: &mut R) -> Theta {
    let u = to_unconstrained(theta);
    let mut v = u;
    let mut changed = [false; NUM_PARAMS];
    for k in 0..NUM_PARAMS {
        let z: f64 = StandardNormal.sample(rng);
        let step = scales[k] * z;
        if step != 0.0 {
            v[k] = u[k] + step;
            changed[k] = true;
        }
    }
    let mapped = from_unconstrained(&v);
    // Untouched coordinates keep their exact value rather than a round trip.
    Theta {
        kappa: if changed[0] {
            mapped.kappa
        } else {
            theta.kappa
        },
        nu: if changed[1] { mapped.nu } else { theta.nu },
        lambda: if changed[2] {
            mapped.lambda
        } else {
            theta.lambda
        },
    }
}

/// Random-walk Metropolis-Hastings update of `theta` given the chain's
/// latent block. Returns the new value and whether the proposal was accepted.
pub fn mh_update_theta<R: Rng + ?Sized>(
    chain: &ChainState,
    ctx: &BlockContext<'_>,
    scales: &[f64; NUM_PARAMS],
    rng: &mut R,
) -> Result<(Theta, bool)> {
    let stats = CompleteDataStats::new(ctx.y, &chain.latents, ctx.init)?;
    Ok(mh_step_with_stats(
        &stats,
        &chain.theta,
        ctx.prior,
        scales,
        rng,
    ))
}

fn mh_step_with_stats<R: Rng + ?Sized>(
    stats: &CompleteDataStats,
    theta: &Theta,
    prior: &PriorSpec,
    scales: &[f64; NUM_PARAMS],
    rng: &mut R,
) -> (Theta, bool) {
    let proposal = propose(theta, scales, rng);
    let u: f64 = rng.random();
    let new = ln_target_unconstrained(stats, &proposal, prior);
    if new == f64::NEG_INFINITY {
        return (*theta, false);
    }
    let cur = ln_target_unconstrained(stats, theta, prior);
    // An infeasible current state (e.g. fresh jump rows outside the beta
    // support) is left for any feasible proposal.
    if cur == f64::NEG_INFINITY || new >= cur || u.ln() < new - cur {
        (proposal, true)
    } else {
        (*theta, false)
    }
}

/// Value of `sigma2_0` used by the filter under a given initial condition.
///
/// For a known `x_0` the filter starts from the gamma law with shape
/// `(nu + kappa)/2` and mean `x_0`; the backward-sampled path is then used as
/// an independence proposal and corrected towards the exact start.
pub fn filter_start(init: &InitialState, j: usize, theta: &Theta) -> f64 {
    match init.x0(j) {
        None => 0.0,
        Some(x0) => (theta.nu + theta.kappa) / (theta.kappa * x0),
    }
}

/// Log ratio `g(x_1 | x_0) / predictive(x_1)` between the exact start and the
/// filter's start for a known initial state.
fn start_correction(x1: f64, x0: f64, theta: &Theta, sigma2_0: f64) -> f64 {
    ln_transition_density(x1, x0, theta)
        - ln_gamma_density(
            x1,
            0.5 * theta.nu,
            0.5 * theta.lambda * theta.kappa * sigma2_0,
        )
}

/// Multi-move update of the latent block at the chain's `theta`: every series
/// is filtered and a full path is drawn backwards. With a known initial state
/// each path is accepted with the independence Metropolis-Hastings ratio of
/// the exact start against the filter start.
pub fn update_states<R: Rng + ?Sized>(
    chain: &ChainState,
    ctx: &BlockContext<'_>,
    rng: &mut R,
) -> Result<LatentBlock> {
    let mut out = chain.latents.clone();
    update_states_in_place(&chain.theta, &mut out, ctx, rng)?;
    Ok(out)
}

fn update_states_in_place<R: Rng + ?Sized>(
    theta: &Theta,
    latents: &mut LatentBlock,
    ctx: &BlockContext<'_>,
    rng: &mut R,
) -> Result<()> {
    let t = latents.len();
    if t == 0 {
        return Ok(());
    }
    if ctx.y.len() != latents.num_series() {
        return Err(Error::input(
            "observation block does not match latent block",
        ));
    }
    for (j, current) in latents.series_mut().iter_mut().enumerate() {
        let sigma2_0 = filter_start(ctx.init, j, theta);
        let fs = forward_filter(&ctx.y[j][..t], theta, sigma2_0)?;
        let proposal = ffbs_sample(&fs, rng)?;
        match ctx.init.x0(j) {
            None => *current = proposal,
            Some(x0) => {
                let new = start_correction(proposal[0], x0, theta, sigma2_0);
                let cur = start_correction(current[0], x0, theta, sigma2_0);
                let u: f64 = rng.random();
                if new == f64::NEG_INFINITY {
                    continue;
                }
                if !(cur > f64::NEG_INFINITY) || u.ln() < new - cur {
                    *current = proposal;
                }
            }
        }
    }
    Ok(())
}

/// One full Gibbs sweep; the dimension of the chain is unchanged.
pub fn transition_step<R: Rng + ?Sized>(
    chain: &mut ChainState,
    ctx: &BlockContext<'_>,
    scales: &[f64; NUM_PARAMS],
    rng: &mut R,
) -> Result<bool> {
    let (theta, accepted) = mh_update_theta(chain, ctx, scales, rng)?;
    chain.theta = theta;
    chain.proposed += 1;
    chain.accepted += u64::from(accepted);
    update_states_in_place(&chain.theta, &mut chain.latents, ctx, rng)?;
    Ok(accepted)
}

/// Jumping kernel: keeps `theta` and the existing latent rows fixed and
/// appends one latent row per new observation row, each drawn from the
/// jumping full conditional.
///
/// `y_new` holds, for every series of the block, the `J` observations that
/// follow the chain's horizon. `ctx.y` supplies the history.
pub fn jump_extend<R: Rng + ?Sized>(
    chain: &mut ChainState,
    ctx: &BlockContext<'_>,
    y_new: &[Vec<f64>],
    rng: &mut R,
) -> Result<()> {
    let k = chain.latents.num_series();
    if y_new.len() != k || ctx.y.len() != k {
        return Err(Error::input(format!(
            "jump needs {k} series, got {} new and {} history",
            y_new.len(),
            ctx.y.len()
        )));
    }
    let rows = y_new[0].len();
    if y_new.iter().any(|s| s.len() != rows) {
        return Err(Error::input("new observation rows are not rectangular"));
    }
    let t = chain.t();
    if ctx.y.iter().any(|s| s.len() < t) {
        return Err(Error::input("history shorter than the chain horizon"));
    }
    let theta = chain.theta;
    for (j, series) in chain.latents.series_mut().iter_mut().enumerate() {
        let mut fs = forward_filter(&ctx.y[j][..t], &theta, filter_start(ctx.init, j, &theta))?;
        series.reserve(rows);
        for &y in &y_new[j] {
            series.push(jump_full_conditional_sample(&mut fs, y, rng)?);
        }
    }
    Ok(())
}

/// Cross-replica estimate of the rate function at one lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub lag: usize,
    /// Maximum over defined coordinates of the cross-replica correlation.
    pub value: f64,
    /// Number of coordinates with nonzero variance on both sides.
    pub defined: usize,
}

/// Cross-replica correlation between two sweeps, maximized over coordinates.
///
/// `first[l]` and `later[l]` are the tracked coordinates of replica `l` at
/// the reference sweep and `lag` sweeps later. Coordinates with zero variance
/// across replicas on either side are skipped.
pub fn estimate_rate(first: &[Vec<f64>], later: &[Vec<f64>], lag: usize) -> Result<RateEstimate> {
    let l = first.len();
    if l < 2 || later.len() != l {
        return Err(Error::input(
            "rate estimation needs at least two replicas on both sides",
        ));
    }
    let dims = first[0].len();
    if first.iter().chain(later).any(|v| v.len() != dims) {
        return Err(Error::input(
            "replicas track different numbers of coordinates",
        ));
    }
    let mut a = vec![0.0; l];
    let mut b = vec![0.0; l];
    let mut best = f64::NEG_INFINITY;
    let mut defined = 0;
    for j in 0..dims {
        for r in 0..l {
            a[r] = first[r][j];
            b[r] = later[r][j];
        }
        if let Some(c) = correlation(&b, &a) {
            defined += 1;
            best = best.max(c);
        }
    }
    if defined == 0 {
        return Err(Error::UndefinedRate);
    }
    Ok(RateEstimate {
        lag,
        value: best,
        defined,
    })
}

/// Smallest lag `s` in `1..=n_max` with `rate(s) <= 1 - epsilon`, clamped to
/// `[n_min, n_max]`.
///
/// `rate` is evaluated lazily in increasing order of `s`, so a caller can
/// advance its chains inside the closure. Undefined rates are skipped; when no
/// lag qualifies the result is `n_max`.
pub fn adapt_iterations<F>(mut rate: F, config: &TuningConfig) -> usize
where
    F: FnMut(usize) -> Result<RateEstimate>,
{
    let threshold = 1.0 - config.epsilon;
    let mut any_defined = false;
    for s in 1..=config.n_max {
        match rate(s) {
            Ok(r) => {
                any_defined = true;
                if r.value <= threshold {
                    return s.clamp(config.n_min, config.n_max);
                }
            }
            Err(Error::UndefinedRate) => {}
            Err(e) => {
                log::warn!("rate evaluation failed at lag {s}: {e}");
                return config.n_max;
            }
        }
    }
    if !any_defined {
        log::warn!(
            "cross-chain rate undefined at every lag; using n_max = {}",
            config.n_max
        );
    }
    config.n_max
}

/// Curvature-based standard deviations of the conditional of `theta` given the
/// latent block, in unconstrained coordinates.
fn conditional_scales(
    stats: &CompleteDataStats,
    theta: &Theta,
    prior: &PriorSpec,
) -> [f64; NUM_PARAMS] {
    let u0 = to_unconstrained(theta);
    let f = |u: &[f64; NUM_PARAMS]| ln_target_unconstrained(stats, &from_unconstrained(u), prior);
    let f0 = f(&u0);
    let mut out = [0.1; NUM_PARAMS];
    for k in 0..NUM_PARAMS {
        for delta in [1e-3, 1e-2, 1e-1] {
            let mut up = u0;
            let mut dn = u0;
            up[k] += delta;
            dn[k] -= delta;
            let d2 = (f(&up) - 2.0 * f0 + f(&dn)) / (delta * delta);
            if d2.is_finite() && d2 < 0.0 {
                out[k] = (-1.0 / d2).sqrt().min(1.0);
                break;
            }
        }
    }
    out
}

/// Tunes the random-walk scales once on a pilot chain so that the acceptance
/// rate is close to `target`.
///
/// The pilot starts at `theta`, extends over every row of `ctx.y` with the
/// jumping kernel and runs `rounds` rounds of `sweeps` transition steps,
/// rescaling after each round. The relative scales come from the curvature of
/// the conditional log target.
pub fn tune_rw_scales<R: Rng + ?Sized>(
    theta: Theta,
    ctx: &BlockContext<'_>,
    target: f64,
    rounds: usize,
    sweeps: usize,
    rng: &mut R,
) -> Result<[f64; NUM_PARAMS]> {
    let k = ctx.y.len();
    let mut chain = ChainState::new(theta, k, usize::MAX, usize::MAX);
    jump_extend(&mut chain, ctx, ctx.y, rng)?;
    let mut factor = 2.38 / (NUM_PARAMS as f64).sqrt();
    let mut scales = [0.1; NUM_PARAMS];
    for round in 0..rounds {
        let stats = CompleteDataStats::new(ctx.y, &chain.latents, ctx.init)?;
        let base = conditional_scales(&stats, &chain.theta, ctx.prior);
        scales = base.map(|b| b * factor);
        let mut acc = 0usize;
        for _ in 0..sweeps {
            acc += usize::from(transition_step(&mut chain, ctx, &scales, rng)?);
        }
        let rate = acc as f64 / sweeps.max(1) as f64;
        log::debug!("pilot round {round}: acceptance {rate:.3}, scales {scales:?}");
        factor *= (2.0 * (rate - target)).exp();
    }
    Ok(scales)
}

/// Serializable snapshot of a chain at a time-block boundary.
///
/// Chains draw from streams keyed by `(master seed, block, replica, update)`,
/// so the stream key is the whole generator state needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSnapshot {
    pub version: u32,
    pub master_seed: u64,
    /// Index of the next update this chain will run.
    pub next_update: usize,
    pub chain: ChainState,
}

pub const SNAPSHOT_VERSION: u32 = 1;
