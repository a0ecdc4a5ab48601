//! Combination of block sub-posteriors.
//!
//! Each block's pooled `theta` draws are smoothed by a Gaussian kernel density
//! estimate with a bandwidth `h` shared by all blocks. The product of the `M`
//! estimates is itself a Gaussian mixture indexed by one point per block:
//!
//! ```text
//! prod_i kde_i(theta)  ∝  sum_j  w_j  N(theta; mean_j, (h^2 / M) I)
//! mean_j  = (1/M) sum_i theta_i[j_i]
//! ln w_j  = -sum_i |theta_i[j_i] - mean_j|^2 / (2 h^2)
//! ```
//!
//! [`sample_merged`] runs an independent Metropolis-within-Gibbs chain over
//! index vectors and emits one Gaussian draw per sweep.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{log_sum_exp, mean, median, std_dev};

/// Bandwidth selection for [`fit_kde`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Fixed(f64),
    /// `h_k = sigma_k N^{-1/(p+4)}`.
    Scott,
    /// `h_k = (4/(p+2))^{1/(p+4)} sigma_k N^{-1/(p+4)}`.
    Silverman,
}

impl BandwidthRule {
    /// Scalar bandwidth for `draws`: the geometric mean of the per-coordinate
    /// bandwidths for the data-driven rules.
    pub fn bandwidth(&self, draws: &[Vec<f64>]) -> Result<f64> {
        if let BandwidthRule::Fixed(h) = *self {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::param("fixed bandwidth must be positive"));
            }
            return Ok(h);
        }
        let n = draws.len();
        if n < 2 {
            return Err(Error::input(
                "a data-driven bandwidth needs at least two draws",
            ));
        }
        let p = draws[0].len();
        let pf = p as f64;
        let factor = match self {
            BandwidthRule::Silverman => (4.0 / (pf + 2.0)).powf(1.0 / (pf + 4.0)),
            _ => 1.0,
        };
        let shrink = (n as f64).powf(-1.0 / (pf + 4.0));
        let mut ln_sum = 0.0;
        for k in 0..p {
            let col: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let sd = std_dev(&col);
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::input(format!("coordinate {k} has zero spread")));
            }
            ln_sum += (factor * sd * shrink).ln();
        }
        Ok((ln_sum / pf).exp())
    }
}

/// Gaussian kernel density estimate with an isotropic bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    points: Vec<Vec<f64>>,
    bandwidth: f64,
    dim: usize,
}

impl Kde {
    /// Builds a KDE from points and a bandwidth.
    pub fn new(points: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::input("a KDE needs at least one point"));
        };
        let dim = first.len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::input("KDE points must share a nonzero dimension"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::input("KDE points must be finite"));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::param("bandwidth must be positive"));
        }
        Ok(Kde {
            points,
            bandwidth,
            dim,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Result<Self> {
        Kde::new(self.points.clone(), bandwidth)
    }

    /// Mean of the estimate (the mean of its points).
    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|k| mean(&self.points.iter().map(|p| p[k]).collect::<Vec<_>>()))
            .collect()
    }

    /// Draws one point from the estimate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let j = rng.random_range(0..self.points.len());
        self.points[j]
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + self.bandwidth * z
            })
            .collect()
    }
}

/// Fits a KDE to `draws` (one row per draw).
pub fn fit_kde(draws: &[Vec<f64>], rule: BandwidthRule) -> Result<Kde> {
    let h = rule.bandwidth(draws)?;
    Kde::new(draws.to_vec(), h)
}

fn ln_gauss_norm(dim: usize, h: f64) -> f64 {
    -(dim as f64) * (h.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Log density of the estimate at `theta`.
pub fn kde_log_density(kde: &Kde, theta: &[f64]) -> Result<f64> {
    if theta.len() != kde.dim {
        return Err(Error::input(format!(
            "point has dimension {}, KDE has {}",
            theta.len(),
            kde.dim
        )));
    }
    let h2 = kde.bandwidth * kde.bandwidth;
    let terms: Vec<f64> = kde
        .points
        .iter()
        .map(|p| -sq_dist(p, theta) / (2.0 * h2))
        .collect();
    Ok(log_sum_exp(&terms) - (kde.len() as f64).ln() + ln_gauss_norm(kde.dim, kde.bandwidth))
}

/// Density of the estimate at `theta`.
pub fn kde_density(kde: &Kde, theta: &[f64]) -> Result<f64> {
    Ok(kde_log_density(kde, theta)?.exp())
}

/// One component of the product mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductComponent {
    pub index_vector: Vec<usize>,
    pub mean: Vec<f64>,
    /// Unnormalized log weight.
    pub log_weight: f64,
}

fn check_compatible(kdes: &[Kde]) -> Result<(usize, f64)> {
    let Some(first) = kdes.first() else {
        return Err(Error::input("merging needs at least one KDE"));
    };
    for k in kdes {
        if k.dim != first.dim {
            return Err(Error::input("KDEs have different dimensions"));
        }
        if k.bandwidth != first.bandwidth {
            return Err(Error::input(format!(
                "KDEs have different bandwidths ({} and {})",
                first.bandwidth, k.bandwidth
            )));
        }
    }
    Ok((first.dim, first.bandwidth))
}

/// Mean and log weight of the component selecting `index_vector[i]` from
/// block `i`.
pub fn product_component(kdes: &[Kde], index_vector: &[usize]) -> Result<ProductComponent> {
    let (p, h) = check_compatible(kdes)?;
    if index_vector.len() != kdes.len() {
        return Err(Error::input(
            "index vector length differs from the number of KDEs",
        ));
    }
    let m = kdes.len() as f64;
    let mut mean = vec![0.0; p];
    for (kde, &j) in kdes.iter().zip(index_vector) {
        let pt = kde
            .points
            .get(j)
            .ok_or_else(|| Error::input(format!("index {j} out of range")))?;
        for (acc, v) in mean.iter_mut().zip(pt) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    let ss: f64 = kdes
        .iter()
        .zip(index_vector)
        .map(|(kde, &j)| sq_dist(&kde.points[j], &mean))
        .sum();
    Ok(ProductComponent {
        index_vector: index_vector.to_vec(),
        mean,
        log_weight: -ss / (2.0 * h * h),
    })
}

/// Settings of the merge step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub bandwidth_rule: BandwidthRule,
    /// Retained sweeps, one draw each.
    pub sampler_iters: usize,
    pub burnin: usize,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            bandwidth_rule: BandwidthRule::Silverman,
            sampler_iters: 5000,
            burnin: 500,
            seed: 0,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampler_iters == 0 {
            return Err(Error::param("merge needs at least one sampler iteration"));
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth_rule {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::param("fixed bandwidth must be positive"));
            }
        }
        Ok(())
    }
}

/// Running sums that give a component's mean and log weight in `O(p)` after
/// a single index change.
struct IndexChain<'a> {
    kdes: &'a [Kde],
    idx: Vec<usize>,
    sum: Vec<f64>,
    sum_sq: f64,
    inv_two_h2: f64,
}

impl<'a> IndexChain<'a> {
    fn new(kdes: &'a [Kde], idx: Vec<usize>, h: f64) -> Self {
        let p = kdes[0].dim;
        let mut sum = vec![0.0; p];
        let mut sum_sq = 0.0;
        for (kde, &j) in kdes.iter().zip(&idx) {
            let pt = &kde.points[j];
            for (s, v) in sum.iter_mut().zip(pt) {
                *s += v;
            }
            sum_sq += pt.iter().map(|v| v * v).sum::<f64>();
        }
        IndexChain {
            kdes,
            idx,
            sum,
            sum_sq,
            inv_two_h2: 1.0 / (2.0 * h * h),
        }
    }

    fn log_weight_with(&self, sum: &[f64], sum_sq: f64) -> f64 {
        let m = self.kdes.len() as f64;
        let norm2: f64 = sum.iter().map(|v| v * v).sum();
        // Sum of squared deviations, clipped against cancellation.
        -(sum_sq - norm2 / m).max(0.0) * self.inv_two_h2
    }

    /// Independent uniform proposal for block `i` with the Metropolis test.
    fn update<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) {
        let kde = &self.kdes[i];
        let j_new = rng.random_range(0..kde.len());
        let u: f64 = rng.random();
        let j_old = self.idx[i];
        if j_new == j_old {
            return;
        }
        let old = &kde.points[j_old];
        let new = &kde.points[j_new];
        let sum_new: Vec<f64> = self
            .sum
            .iter()
            .zip(old.iter().zip(new))
            .map(|(s, (o, n))| s - o + n)
            .collect();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let sum_sq_new = self.sum_sq - sq(old) + sq(new);
        let lw_old = self.log_weight_with(&self.sum, self.sum_sq);
        let lw_new = self.log_weight_with(&sum_new, sum_sq_new);
        if lw_new >= lw_old || u.ln() < lw_new - lw_old {
            self.idx[i] = j_new;
            self.sum = sum_new;
            self.sum_sq = sum_sq_new;
        }
    }

    fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.kdes.len() {
            self.update(i, rng);
        }
    }

    fn mean(&self) -> Vec<f64> {
        let m = self.kdes.len() as f64;
        self.sum.iter().map(|s| s / m).collect()
    }
}

/// Runs the index chain and returns the index vector after every retained
/// sweep. Exposed for checking the chain against enumerated weights.
pub fn sample_merged_indices<R: Rng + ?Sized>(
    kdes: &[Kde],
    config: &MergeConfig,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    config.validate()?;
    let (_, h) = check_compatible(kdes)?;
    let init: Vec<usize> = kdes.iter().map(|k| rng.random_range(0..k.len())).collect();
    let mut chain = IndexChain::new(kdes, init, h);
    for _ in 0..config.burnin {
        chain.sweep(rng);
    }
    let mut out = Vec::with_capacity(config.sampler_iters);
    for _ in 0..config.sampler_iters {
        chain.sweep(rng);
        out.push(chain.idx.clone());
    }
    Ok(out)
}

/// Draws from the product of the KDEs: `config.sampler_iters` rows, each
/// `N(mean_j, (h^2/M) I)` at the current index vector `j`.
pub fn sample_merged<R: Rng + ?Sized>(
    kdes: &[Kde],
    config: &MergeConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let (_, h) = check_compatible(kdes)?;
    let h_bar = h / (kdes.len() as f64).sqrt();
    let init: Vec<usize> = kdes.iter().map(|k| rng.random_range(0..k.len())).collect();
    let mut chain = IndexChain::new(kdes, init, h);
    for _ in 0..config.burnin {
        chain.sweep(rng);
    }
    let mut out = Vec::with_capacity(config.sampler_iters);
    for _ in 0..config.sampler_iters {
        chain.sweep(rng);
        let draw = chain
            .mean()
            .into_iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + h_bar * z
            })
            .collect();
        out.push(draw);
    }
    Ok(out)
}

/// Largest number of components [`merged_density_bruteforce`] enumerates.
pub const BRUTEFORCE_LIMIT: usize = 1_000_000;

fn all_components(kdes: &[Kde]) -> Result<Vec<ProductComponent>> {
    check_compatible(kdes)?;
    let total = kdes
        .iter()
        .try_fold(1usize, |acc, k| acc.checked_mul(k.len()))
        .filter(|n| *n <= BRUTEFORCE_LIMIT)
        .ok_or_else(|| Error::input("too many mixture components to enumerate"))?;
    let mut idx = vec![0usize; kdes.len()];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(product_component(kdes, &idx)?);
        for (i, kde) in kdes.iter().enumerate() {
            idx[i] += 1;
            if idx[i] < kde.len() {
                break;
            }
            idx[i] = 0;
        }
    }
    Ok(out)
}

/// Normalized weights of every component, in odometer order (block 0
/// fastest). Test oracle; cost is the product of the KDE sizes.
pub fn enumerate_component_weights(kdes: &[Kde]) -> Result<Vec<(Vec<usize>, f64)>> {
    let comps = all_components(kdes)?;
    let lw: Vec<f64> = comps.iter().map(|c| c.log_weight).collect();
    let lse = log_sum_exp(&lw);
    Ok(comps
        .into_iter()
        .map(|c| (c.index_vector, (c.log_weight - lse).exp()))
        .collect())
}

/// Normalized merged density at `theta` by full enumeration of the mixture.
pub fn merged_density_bruteforce(kdes: &[Kde], theta: &[f64]) -> Result<f64> {
    let comps = all_components(kdes)?;
    let (p, h) = check_compatible(kdes)?;
    if theta.len() != p {
        return Err(Error::input("point dimension differs from the KDEs"));
    }
    let h_bar = h / (kdes.len() as f64).sqrt();
    let lw: Vec<f64> = comps.iter().map(|c| c.log_weight).collect();
    let lse = log_sum_exp(&lw);
    let terms: Vec<f64> = comps
        .iter()
        .map(|c| c.log_weight - sq_dist(&c.mean, theta) / (2.0 * h_bar * h_bar))
        .collect();
    Ok((log_sum_exp(&terms) - lse + ln_gauss_norm(p, h_bar)).exp())
}

/// Common affine standardization of all blocks: subtract a shared center and
/// divide by a shared per-coordinate scale, so one isotropic bandwidth is
/// sensible for parameters on different scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Center is the mean of the block means; scale is the median of the
    /// block standard deviations (1 when that is zero).
    pub fn fit(blocks: &[Vec<Vec<f64>>]) -> Result<Self> {
        let Some(p) = blocks.first().and_then(|b| b.first()).map(|d| d.len()) else {
            return Err(Error::input("no draws to standardize"));
        };
        if blocks
            .iter()
            .any(|b| b.is_empty() || b.iter().any(|d| d.len() != p))
        {
            return Err(Error::input(
                "every block needs draws of the same dimension",
            ));
        }
        let mut center = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for k in 0..p {
            let mut means = Vec::with_capacity(blocks.len());
            let mut sds = Vec::with_capacity(blocks.len());
            for b in blocks {
                let col: Vec<f64> = b.iter().map(|d| d[k]).collect();
                means.push(mean(&col));
                sds.push(if col.len() > 1 { std_dev(&col) } else { 0.0 });
            }
            center[k] = mean(&means);
            let s = median(&sds);
            scale[k] = if s > 0.0 && s.is_finite() { s } else { 1.0 };
        }
        Ok(Standardizer { center, scale })
    }

    pub fn identity(p: usize) -> Self {
        Standardizer {
            center: vec![0.0; p],
            scale: vec![1.0; p],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| c + s * v)
            .collect()
    }
}

/// Output of [`merge_blocks`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergedPosterior {
    pub standardizer: Standardizer,
    /// Per-block KDEs in standardized coordinates, sharing one bandwidth.
    pub kdes: Vec<Kde>,
    /// Merged draws in natural coordinates.
    pub draws: Vec<Vec<f64>>,
}

impl MergedPosterior {
    pub fn bandwidth(&self) -> f64 {
        self.kdes[0].bandwidth()
    }
}

/// Full merge of per-block draw sets (natural coordinates, one row per draw):
/// standardize, fit one KDE per block, take the median block bandwidth as
/// the common one, and sample the product.
///
/// A fixed bandwidth is interpreted in standardized units.
pub fn merge_blocks<R: Rng + ?Sized>(
    blocks: &[Vec<Vec<f64>>],
    config: &MergeConfig,
    rng: &mut R,
) -> Result<MergedPosterior> {
    config.validate()?;
    let standardizer = Standardizer::fit(blocks)?;
    let std_blocks: Vec<Vec<Vec<f64>>> = blocks
        .iter()
        .map(|b| b.iter().map(|d| standardizer.forward(d)).collect())
        .collect();
    let h = match config.bandwidth_rule {
        BandwidthRule::Fixed(h) => h,
        rule => {
            let hs = std_blocks
                .iter()
                .map(|b| rule.bandwidth(b))
                .collect::<Result<Vec<_>>>()?;
            median(&hs)
        }
    };
    let kdes = std_blocks
        .into_iter()
        .map(|b| Kde::new(b, h))
        .collect::<Result<Vec<_>>>()?;
    let draws = sample_merged(&kdes, config, rng)?
        .into_iter()
        .map(|z| standardizer.inverse(&z))
        .collect();
    Ok(MergedPosterior {
        standardizer,
        kdes,
        draws,
    })
}

/// Evenly spaced grid of `n` points over `mean ± width · sd` of `values`.
pub fn grid_around(values: &[f64], width: f64, n: usize) -> Vec<f64> {
    let m = mean(values);
    let sd = std_dev(values);
    let half = if sd > 0.0 && sd.is_finite() {
        width * sd
    } else {
        1.0
    };
    if n < 2 {
        return vec![m];
    }
    (0..n)
        .map(|i| m - half + 2.0 * half * i as f64 / (n - 1) as f64)
        .collect()
}

/// Density of a 1-D Gaussian KDE with bandwidth `h` on `grid`.
pub fn density_on_grid(values: &[f64], h: f64, grid: &[f64]) -> Vec<f64> {
    let norm = ln_gauss_norm(1, h) - (values.len() as f64).ln();
    grid.iter()
        .map(|g| {
            let terms: Vec<f64> = values
                .iter()
                .map(|v| -(v - g) * (v - g) / (2.0 * h * h))
                .collect();
            (log_sum_exp(&terms) + norm).exp()
        })
        .collect()
}

/// Marginal density of coordinate `k` of a block KDE in natural units.
pub fn block_marginal_on_grid(kde: &Kde, std: &Standardizer, k: usize, grid: &[f64]) -> Vec<f64> {
    let values: Vec<f64> = kde
        .points()
        .iter()
        .map(|p| std.center[k] + std.scale[k] * p[k])
        .collect();
    density_on_grid(&values, kde.bandwidth() * std.scale[k], grid)
}
