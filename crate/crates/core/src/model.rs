//! The gamma-beta stochastic volatility panel model.
//!
//! All densities are unnormalized and evaluated in log space. Support
//! violations yield `f64::NEG_INFINITY`, never `NaN`.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::stats::{ln_beta_density, ln_gamma, ln_gamma_density};

/// Names of the structural parameters, in the order used by every array and
/// CSV file in this crate.
pub const PARAM_NAMES: [&str; 3] = ["lambda", "kappa", "nu"];

/// Number of structural parameters.
pub const NUM_PARAMS: usize = 3;

/// Common parameter vector `(lambda, kappa, nu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Discount factor of the latent precision, in `(0, 1)`.
    pub lambda: f64,
    /// Observation shape, `> 0`.
    pub kappa: f64,
    /// Transition shape, `> max(0, kappa - 1)`.
    pub nu: f64,
}

/// The constraint a [`Theta`] violates.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum ThetaViolation {
    #[error("non-finite component")]
    NonFinite,
    #[error("lambda = {0} is not in the open interval (0, 1)")]
    LambdaOutOfRange(f64),
    #[error("kappa = {0} is not positive")]
    KappaNonPositive(f64),
    #[error("nu = {0} is not positive")]
    NuNonPositive(f64),
    #[error("truncation nu > kappa - 1 violated (nu = {nu}, kappa = {kappa})")]
    Truncation { nu: f64, kappa: f64 },
}

impl Theta {
    pub fn new(lambda: f64, kappa: f64, nu: f64) -> Result<Self> {
        let theta = Theta { lambda, kappa, nu };
        validate_theta(&theta)?;
        Ok(theta)
    }

    pub fn is_valid(&self) -> bool {
        validate_theta(self).is_ok()
    }

    pub fn to_array(&self) -> [f64; NUM_PARAMS] {
        [self.lambda, self.kappa, self.nu]
    }

    /// Builds a parameter vector from `[lambda, kappa, nu]` without validation.
    pub fn from_array(a: [f64; NUM_PARAMS]) -> Self {
        Theta {
            lambda: a[0],
            kappa: a[1],
            nu: a[2],
        }
    }
}

impl fmt::Display for Theta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(lambda={}, kappa={}, nu={})",
            self.lambda, self.kappa, self.nu
        )
    }
}

/// Checks the constraint region of the parameter vector.
///
/// Besides the truncation `nu > kappa - 1` the beta transition needs
/// `nu > 0`, which is enforced as well.
pub fn validate_theta(theta: &Theta) -> std::result::Result<(), ThetaViolation> {
    let Theta { lambda, kappa, nu } = *theta;
    if !(lambda.is_finite() && kappa.is_finite() && nu.is_finite()) {
        return Err(ThetaViolation::NonFinite);
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(ThetaViolation::LambdaOutOfRange(lambda));
    }
    if !(kappa > 0.0) {
        return Err(ThetaViolation::KappaNonPositive(kappa));
    }
    if !(nu > kappa - 1.0) {
        return Err(ThetaViolation::Truncation { nu, kappa });
    }
    if !(nu > 0.0) {
        return Err(ThetaViolation::NuNonPositive(nu));
    }
    Ok(())
}

/// A `T x m` panel of strictly positive observations, stored series-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    ids: Vec<String>,
    series: Vec<Vec<f64>>,
}

impl Panel {
    /// Builds a panel from per-series observation vectors.
    pub fn new(ids: Vec<String>, series: Vec<Vec<f64>>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::input("panel has no series"));
        }
        if ids.len() != series.len() {
            return Err(Error::input(format!(
                "{} series identifiers for {} series",
                ids.len(),
                series.len()
            )));
        }
        let t = series[0].len();
        for (j, s) in series.iter().enumerate() {
            if s.len() != t {
                return Err(Error::input(format!(
                    "series {} has {} observations, expected {t}",
                    ids[j],
                    s.len()
                )));
            }
            if let Some((i, v)) = s
                .iter()
                .enumerate()
                .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
            {
                return Err(Error::input(format!(
                    "observation {v} at time {} of series {} is not strictly positive",
                    i + 1,
                    ids[j]
                )));
            }
        }
        Ok(Panel { ids, series })
    }

    /// Panel with generated identifiers `s0001`, `s0002`, ...
    pub fn from_series(series: Vec<Vec<f64>>) -> Result<Self> {
        let ids = default_ids(series.len());
        Self::new(ids, series)
    }

    pub fn num_times(&self) -> usize {
        self.series[0].len()
    }

    pub fn num_series(&self) -> usize {
        self.series.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn series(&self) -> &[Vec<f64>] {
        &self.series
    }

    /// Observation of series `j` at (zero-based) time `t`.
    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.series[j][t]
    }

    /// Series belonging to one block.
    pub fn block(&self, range: Range<usize>) -> &[Vec<f64>] {
        &self.series[range]
    }
}

pub(crate) fn default_ids(m: usize) -> Vec<String> {
    let width = m.to_string().len().max(4);
    (1..=m).map(|j| format!("s{j:0width$}")).collect()
}

/// Contiguous cross-sectional blocks of series.
///
/// When the block size does not divide the number of series, the final block
/// absorbs the remainder (size `K..2K-1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    block_size: usize,
    num_series: usize,
    bounds: Vec<Range<usize>>,
}

impl BlockPartition {
    pub fn new(num_series: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::param("block size must be at least 1"));
        }
        if block_size > num_series {
            return Err(Error::param(format!(
                "block size {block_size} exceeds the number of series {num_series}"
            )));
        }
        let num_blocks = num_series / block_size;
        let bounds = (0..num_blocks)
            .map(|i| {
                let end = if i + 1 == num_blocks {
                    num_series
                } else {
                    (i + 1) * block_size
                };
                i * block_size..end
            })
            .collect();
        Ok(BlockPartition {
            block_size,
            num_series,
            bounds,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.bounds.len()
    }

    pub fn num_series(&self) -> usize {
        self.num_series
    }

    pub fn range(&self, block: usize) -> Range<usize> {
        self.bounds[block].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.bounds
    }

    pub fn block_of(&self, series: usize) -> Option<usize> {
        if series >= self.num_series {
            return None;
        }
        Some((series / self.block_size).min(self.bounds.len() - 1))
    }
}

/// Splits a panel into contiguous blocks of `block_size` series.
pub fn partition_panel(panel: &Panel, block_size: usize) -> Result<BlockPartition> {
    BlockPartition::new(panel.num_series(), block_size)
}

/// Latent volatilities of one block up to time `t`, stored series-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBlock {
    series: Vec<Vec<f64>>,
}

impl LatentBlock {
    /// An empty (`t = 0`) block for `k` series.
    pub fn empty(k: usize) -> Self {
        LatentBlock {
            series: vec![Vec::new(); k],
        }
    }

    pub fn from_series(series: Vec<Vec<f64>>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::input("latent block has no series"));
        }
        let t = series[0].len();
        if series.iter().any(|s| s.len() != t) {
            return Err(Error::input("latent block is not rectangular"));
        }
        Ok(LatentBlock { series })
    }

    pub fn num_series(&self) -> usize {
        self.series.len()
    }

    /// Current time horizon `t`.
    pub fn len(&self) -> usize {
        self.series.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn series(&self) -> &[Vec<f64>] {
        &self.series
    }

    pub(crate) fn series_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.series
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.series[j][t]
    }

    /// Appends one time row.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.series.len() {
            return Err(Error::input(format!(
                "row of length {} for a block of {} series",
                row.len(),
                self.series.len()
            )));
        }
        for (s, &x) in self.series.iter_mut().zip(row) {
            s.push(x);
        }
        Ok(())
    }

    /// Whether every entry is positive and every consecutive ratio is inside
    /// the support of the beta transition under `lambda`.
    pub fn is_feasible(&self, lambda: f64, init: &InitialState) -> bool {
        self.series.iter().enumerate().all(|(j, s)| {
            if s.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return false;
            }
            let first_ok = match (init, s.first()) {
                (InitialState::Known(x0), Some(&x1)) => lambda * x1 / x0[j] < 1.0,
                _ => true,
            };
            first_ok && s.windows(2).all(|w| lambda * w[1] / w[0] < 1.0)
        })
    }
}

/// How the latent process starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialState {
    /// `x_0` is unknown with a diffuse prior; inference conditions on the first
    /// observation, whose filtered law `Gamma((nu+kappa)/2, kappa y_1 / 2)` is
    /// the starting density of `x_1`.
    Diffuse,
    /// Known initial state `x_{j,0}` for every series `j`.
    Known(Vec<f64>),
}

impl InitialState {
    /// Same known initial state for all `m` series.
    pub fn constant(x0: f64, m: usize) -> Self {
        InitialState::Known(vec![x0; m])
    }

    /// Restriction to a block of series.
    pub fn for_block(&self, range: Range<usize>) -> InitialState {
        match self {
            InitialState::Diffuse => InitialState::Diffuse,
            InitialState::Known(x0) => InitialState::Known(x0[range].to_vec()),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if let InitialState::Known(x0) = self {
            if x0.len() != m {
                return Err(Error::input(format!(
                    "initial state has {} entries for {m} series",
                    x0.len()
                )));
            }
            if x0.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::input("initial state entries must be positive"));
            }
        }
        Ok(())
    }

    pub fn x0(&self, j: usize) -> Option<f64> {
        match self {
            InitialState::Diffuse => None,
            InitialState::Known(x0) => Some(x0[j]),
        }
    }
}

/// Prior on `theta`: `nu ~ Ga(nu_shape, nu_rate)`, `kappa ~ Ga(kappa_shape,
/// kappa_rate)`, `lambda ~ U(0, 1)`, truncated to the constraint region and
/// raised to `fractional_power`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub nu_shape: f64,
    pub nu_rate: f64,
    pub kappa_shape: f64,
    pub kappa_rate: f64,
    pub fractional_power: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            nu_shape: 0.5,
            nu_rate: 0.5,
            kappa_shape: 0.5,
            kappa_rate: 0.5,
            fractional_power: 1.0,
        }
    }
}

impl PriorSpec {
    /// The same prior raised to `1 / num_blocks`.
    pub fn for_blocks(self, num_blocks: usize) -> Self {
        PriorSpec {
            fractional_power: 1.0 / num_blocks as f64,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_pos = [
            self.nu_shape,
            self.nu_rate,
            self.kappa_shape,
            self.kappa_rate,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !all_pos {
            return Err(Error::param("prior shapes and rates must be positive"));
        }
        if !(self.fractional_power > 0.0 && self.fractional_power <= 1.0) {
            return Err(Error::param("prior fractional power must be in (0, 1]"));
        }
        Ok(())
    }

    /// Draws from the (un-powered) prior, truncated by rejection.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Theta {
        let nu_d = Gamma::new(self.nu_shape, 1.0 / self.nu_rate).expect("valid prior");
        let kappa_d = Gamma::new(self.kappa_shape, 1.0 / self.kappa_rate).expect("valid prior");
        loop {
            let theta = Theta {
                lambda: rng.random::<f64>(),
                kappa: kappa_d.sample(rng),
                nu: nu_d.sample(rng),
            };
            if theta.is_valid() {
                return theta;
            }
        }
    }
}

/// Log prior up to an additive constant; `-inf` outside the constraint region.
pub fn log_prior(theta: &Theta, prior: &PriorSpec) -> f64 {
    if !theta.is_valid() {
        return f64::NEG_INFINITY;
    }
    let kernel = |x: f64, shape: f64, rate: f64| (shape - 1.0) * x.ln() - rate * x;
    prior.fractional_power
        * (kernel(theta.nu, prior.nu_shape, prior.nu_rate)
            + kernel(theta.kappa, prior.kappa_shape, prior.kappa_rate))
}

/// One step of the latent transition `x_t = x_{t-1} psi / lambda`.
#[inline]
pub fn propagate_latent(x_prev: f64, psi: f64, lambda: f64) -> f64 {
    x_prev * psi / lambda
}

/// Log density of the transition `x | x_prev`: beta density of
/// `lambda x / x_prev` with parameters `(nu/2, kappa/2)` times the Jacobian
/// `lambda / x_prev`.
#[inline]
pub fn ln_transition_density(x: f64, x_prev: f64, theta: &Theta) -> f64 {
    let psi = theta.lambda * x / x_prev;
    ln_beta_density(psi, 0.5 * theta.nu, 0.5 * theta.kappa) + (theta.lambda / x_prev).ln()
}

/// Log density of the observation `y | x ~ Ga(kappa/2, kappa x / 2)`.
#[inline]
pub fn ln_observation_density(y: f64, x: f64, kappa: f64) -> f64 {
    ln_gamma_density(y, 0.5 * kappa, 0.5 * kappa * x)
}

/// Log density of the diffuse-start law `x_1 | y_1 ~ Ga((nu+kappa)/2, kappa y_1 / 2)`.
#[inline]
pub fn ln_diffuse_start_density(x1: f64, y1: f64, theta: &Theta) -> f64 {
    ln_gamma_density(x1, 0.5 * (theta.nu + theta.kappa), 0.5 * theta.kappa * y1)
}

fn check_shapes(y: &[Vec<f64>], x: &LatentBlock, init: &InitialState) -> Result<()> {
    if y.len() != x.num_series() {
        return Err(Error::input(format!(
            "{} observation series for {} latent series",
            y.len(),
            x.num_series()
        )));
    }
    let t = x.len();
    if let Some(j) = y.iter().position(|s| s.len() < t) {
        return Err(Error::input(format!(
            "observation series {j} is shorter than the latent horizon {t}"
        )));
    }
    if let InitialState::Known(x0) = init {
        if x0.len() != y.len() {
            return Err(Error::input("initial state row does not match block width"));
        }
    }
    Ok(())
}

/// Complete-data log likelihood of one block up to the horizon of `x`.
///
/// Observations beyond the latent horizon are ignored. With a known initial
/// state every time contributes an observation and a transition term; with a
/// diffuse start the first time contributes the diffuse-start density of
/// `x_1` instead (the first observation is conditioned on).
pub fn complete_data_loglik(
    y: &[Vec<f64>],
    x: &LatentBlock,
    init: &InitialState,
    theta: &Theta,
) -> Result<f64> {
    check_shapes(y, x, init)?;
    if !theta.is_valid() {
        return Ok(f64::NEG_INFINITY);
    }
    let t = x.len();
    let mut total = 0.0;
    for (j, (ys, xs)) in y.iter().zip(x.series()).enumerate() {
        for s in 0..t {
            let term = if s == 0 {
                match init {
                    InitialState::Known(x0) => {
                        ln_observation_density(ys[0], xs[0], theta.kappa)
                            + ln_transition_density(xs[0], x0[j], theta)
                    }
                    InitialState::Diffuse => ln_diffuse_start_density(xs[0], ys[0], theta),
                }
            } else {
                ln_observation_density(ys[s], xs[s], theta.kappa)
                    + ln_transition_density(xs[s], xs[s - 1], theta)
            };
            if term == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            total += term;
        }
    }
    Ok(total)
}

/// Unnormalized log sub-posterior of one block: complete-data log likelihood
/// plus the log prior at the prior's fractional power.
pub fn sub_posterior_logdensity(
    theta: &Theta,
    x: &LatentBlock,
    y: &[Vec<f64>],
    init: &InitialState,
    prior: &PriorSpec,
) -> Result<f64> {
    let lp = log_prior(theta, prior);
    if lp == f64::NEG_INFINITY {
        check_shapes(y, x, init)?;
        return Ok(f64::NEG_INFINITY);
    }
    Ok(complete_data_loglik(y, x, init, theta)? + lp)
}

/// Sufficient statistics of `(Y, X)` for fast repeated evaluation of the
/// complete-data log likelihood at different `theta` with the block fixed.
///
/// Only the `ln(1 - lambda r)` transition terms still need a pass over the
/// data; everything else is a closed-form function of a few sums.
#[derive(Debug, Clone)]
pub struct CompleteDataStats {
    n_obs: f64,
    sum_ln_x_obs: f64,
    sum_ln_y_obs: f64,
    sum_xy_obs: f64,
    n_trans: f64,
    sum_ln_ratio: f64,
    sum_ln_x_prev: f64,
    ratios: Vec<f64>,
    max_ratio: f64,
    n_diffuse: f64,
    sum_ln_y1: f64,
    sum_ln_x1: f64,
    sum_xy1: f64,
    feasible_data: bool,
}

impl CompleteDataStats {
    pub fn new(y: &[Vec<f64>], x: &LatentBlock, init: &InitialState) -> Result<Self> {
        check_shapes(y, x, init)?;
        let t = x.len();
        let mut st = CompleteDataStats {
            n_obs: 0.0,
            sum_ln_x_obs: 0.0,
            sum_ln_y_obs: 0.0,
            sum_xy_obs: 0.0,
            n_trans: 0.0,
            sum_ln_ratio: 0.0,
            sum_ln_x_prev: 0.0,
            ratios: Vec::with_capacity(t * y.len()),
            max_ratio: 0.0,
            n_diffuse: 0.0,
            sum_ln_y1: 0.0,
            sum_ln_x1: 0.0,
            sum_xy1: 0.0,
            feasible_data: true,
        };
        if t == 0 {
            return Ok(st);
        }
        for (j, (ys, xs)) in y.iter().zip(x.series()).enumerate() {
            if xs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                st.feasible_data = false;
            }
            let obs_start = match init {
                InitialState::Known(x0) => {
                    st.add_transition(x0[j], xs[0]);
                    0
                }
                InitialState::Diffuse => {
                    st.n_diffuse += 1.0;
                    st.sum_ln_y1 += ys[0].ln();
                    st.sum_ln_x1 += xs[0].ln();
                    st.sum_xy1 += xs[0] * ys[0];
                    1
                }
            };
            for s in obs_start..t {
                st.n_obs += 1.0;
                st.sum_ln_x_obs += xs[s].ln();
                st.sum_ln_y_obs += ys[s].ln();
                st.sum_xy_obs += xs[s] * ys[s];
            }
            for s in 1..t {
                st.add_transition(xs[s - 1], xs[s]);
            }
        }
        Ok(st)
    }

    fn add_transition(&mut self, x_prev: f64, x: f64) {
        let r = x / x_prev;
        self.n_trans += 1.0;
        self.sum_ln_ratio += r.ln();
        self.sum_ln_x_prev += x_prev.ln();
        self.max_ratio = self.max_ratio.max(r);
        self.ratios.push(r);
    }

    /// Largest `lambda` for which every transition is inside the beta support.
    pub fn lambda_upper_bound(&self) -> f64 {
        if self.max_ratio > 0.0 {
            1.0 / self.max_ratio
        } else {
            f64::INFINITY
        }
    }

    pub fn loglik(&self, theta: &Theta) -> f64 {
        if !theta.is_valid() || !self.feasible_data {
            return f64::NEG_INFINITY;
        }
        let Theta { lambda, kappa, nu } = *theta;
        if self.n_trans > 0.0 && lambda * self.max_ratio >= 1.0 {
            return f64::NEG_INFINITY;
        }
        let hk = 0.5 * kappa;
        let hn = 0.5 * nu;
        let ln_hk = hk.ln();
        let ln_lambda = lambda.ln();

        let obs = self.n_obs * (hk * ln_hk - ln_gamma(hk))
            + hk * self.sum_ln_x_obs
            + (hk - 1.0) * self.sum_ln_y_obs
            - hk * self.sum_xy_obs;

        let mut trans = 0.0;
        if self.n_trans > 0.0 {
            let sum_ln_1m: f64 = self.ratios.iter().map(|r| (-lambda * r).ln_1p()).sum();
            trans = self.n_trans
                * (ln_gamma(hn + hk) - ln_gamma(hn) - ln_gamma(hk) + hn * ln_lambda)
                + (hn - 1.0) * self.sum_ln_ratio
                + (hk - 1.0) * sum_ln_1m
                - self.sum_ln_x_prev;
        }

        let mut start = 0.0;
        if self.n_diffuse > 0.0 {
            let a = hn + hk;
            start = self.n_diffuse * (a * ln_hk - ln_gamma(a))
                + a * self.sum_ln_y1
                + (a - 1.0) * self.sum_ln_x1
                - hk * self.sum_xy1;
        }
        obs + trans + start
    }
}

/// A simulated panel together with the latent paths that generated it.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: Panel,
    /// Latent states at the retained times, one vector per series.
    pub latent: Vec<Vec<f64>>,
    /// Latent state just before the first retained time (the known initial
    /// state of the retained window).
    pub initial_state: Vec<f64>,
}

/// Simulates `m` independent series of length `t_len` after discarding
/// `burnin` initial steps. Each series uses its own keyed random stream.
pub fn simulate_panel(
    theta: &Theta,
    m: usize,
    t_len: usize,
    x0: f64,
    burnin: usize,
    seed: u64,
) -> Result<SimulatedPanel> {
    validate_theta(theta)?;
    if m == 0 || t_len == 0 {
        return Err(Error::param("simulation needs m >= 1 and T >= 1"));
    }
    if !(x0 > 0.0 && x0.is_finite()) {
        return Err(Error::param("initial state x0 must be positive"));
    }
    let psi_d = Beta::new(0.5 * theta.nu, 0.5 * theta.kappa)
        .map_err(|e| Error::param(format!("beta transition: {e}")))?;
    let obs_d = Gamma::new(0.5 * theta.kappa, 1.0)
        .map_err(|e| Error::param(format!("gamma observation: {e}")))?;
    let rate_scale = 0.5 * theta.kappa;

    let mut series = Vec::with_capacity(m);
    let mut latent = Vec::with_capacity(m);
    let mut initial_state = Vec::with_capacity(m);
    for j in 0..m {
        let mut rng = rng::stream(seed, Purpose::Simulate, &[j as u64]);
        let mut x = x0;
        for _ in 0..burnin {
            x = propagate_latent(x, psi_d.sample(&mut rng), theta.lambda);
            // Observations during burn-in are drawn and discarded so that the
            // retained window does not depend on the burn-in being skipped.
            let _: f64 = obs_d.sample(&mut rng);
        }
        initial_state.push(x);
        let mut ys = Vec::with_capacity(t_len);
        let mut xs = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            x = propagate_latent(x, psi_d.sample(&mut rng), theta.lambda);
            let y = obs_d.sample(&mut rng) / (rate_scale * x);
            // Extreme latent paths can push a draw outside f64 range.
            let y = y.clamp(f64::MIN_POSITIVE, f64::MAX);
            xs.push(x);
            ys.push(y);
        }
        series.push(ys);
        latent.push(xs);
    }
    Ok(SimulatedPanel {
        panel: Panel::from_series(series)?,
        latent,
        initial_state,
    })
}
