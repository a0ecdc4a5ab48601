//! Baselines and the repeated-run experiment harness.
//!
//! - [`run_full_mcmc`]: fixed-dimension Gibbs sampler over the whole panel.
//! - [`run_sequential_mcmc`]: the same sampler restarted cold at every update
//!   with a given iteration budget.
//! - [`run_experiment`]: repeated simulation, estimation and MSE tables.
//! - [`timing_harness`]: wall clock of one seeded workload at several worker counts.

use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::MergeConfig;
use crate::model::{
    simulate_panel, BlockPartition, InitialState, Panel, PriorSpec, Theta, NUM_PARAMS, PARAM_NAMES,
};
use crate::orchestrator::{run_ep_smcmc, InitBox, PilotConfig, RunConfig, RunResult};
use crate::rng::{stream, Purpose};
use crate::smc::{run_ep_rapf, RapfConfig};
use crate::smcmc::{
    jump_extend, transition_step, tune_rw_scales, BlockContext, ChainState, TuningConfig,
};
use crate::stats::{mean, std_dev};

/// Settings of the full-panel Gibbs sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub iters: usize,
    pub burnin: usize,
    pub seed: u64,
    pub prior: PriorSpec,
    pub initial_state: InitialState,
    /// `None` tunes on a pilot run.
    pub rw_scales: Option<[f64; NUM_PARAMS]>,
    pub init_box: InitBox,
    pub pilot: PilotConfig,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            iters: 1000,
            burnin: 500,
            seed: 0,
            prior: PriorSpec::default(),
            initial_state: InitialState::Diffuse,
            rw_scales: None,
            init_box: InitBox::default(),
            pilot: PilotConfig::default(),
        }
    }
}

/// Output of the full-panel sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcOutput {
    /// Post-burn-in draws.
    pub draws: Vec<Theta>,
    pub acceptance: f64,
    pub rw_scales: [f64; NUM_PARAMS],
}

impl McmcOutput {
    pub fn posterior_mean(&self) -> Theta {
        posterior_mean(&self.draws)
    }
}

pub fn posterior_mean(draws: &[Theta]) -> Theta {
    let col = |f: fn(&Theta) -> f64| mean(&draws.iter().map(f).collect::<Vec<_>>());
    Theta {
        lambda: col(|t| t.lambda),
        kappa: col(|t| t.kappa),
        nu: col(|t| t.nu),
    }
}

/// Full-panel Gibbs sampler with default settings.
pub fn run_full_mcmc(panel: &Panel, iters: usize, burnin: usize, seed: u64) -> Result<McmcOutput> {
    run_full_mcmc_with(
        panel,
        &McmcSettings {
            iters,
            burnin,
            seed,
            ..Default::default()
        },
    )
}

/// Full-panel Gibbs sampler: random-walk update of `theta` under the full
/// prior, then FFBS of every series, `burnin + iters` times.
pub fn run_full_mcmc_with(panel: &Panel, settings: &McmcSettings) -> Result<McmcOutput> {
    run_truncated_mcmc(panel.series(), settings, &[])
}

fn run_truncated_mcmc(y: &[Vec<f64>], settings: &McmcSettings, key: &[u64]) -> Result<McmcOutput> {
    if settings.iters == 0 {
        return Err(Error::param("need at least one retained iteration"));
    }
    settings.prior.validate()?;
    settings.initial_state.validate(y.len())?;
    let ctx = BlockContext {
        y,
        init: &settings.initial_state,
        prior: &settings.prior,
    };
    let mut rng = stream(settings.seed, Purpose::FullMcmc, key);
    let scales = match settings.rw_scales {
        Some(s) => s,
        None => {
            let th = settings.init_box.sample(&mut rng)?;
            let p = &settings.pilot;
            tune_rw_scales(th, &ctx, p.target_acceptance, p.rounds, p.sweeps, &mut rng)?
        }
    };
    let theta = settings.init_box.sample(&mut rng)?;
    let mut chain = ChainState::new(theta, y.len(), 0, 0);
    jump_extend(&mut chain, &ctx, y, &mut rng)?;
    let mut draws = Vec::with_capacity(settings.iters);
    for i in 0..settings.burnin + settings.iters {
        transition_step(&mut chain, &ctx, &scales, &mut rng)?;
        if i >= settings.burnin {
            draws.push(chain.theta);
        }
    }
    Ok(McmcOutput {
        draws,
        acceptance: chain.acceptance_rate(),
        rw_scales: scales,
    })
}

/// Cold-start full-panel MCMC at every update time, using the data up to that
/// time. `iters[u]` sweeps are run at update `u`, of which the first
/// `ceil(burnin_fraction * iters[u])` are discarded. Returns one output per
/// update.
pub fn run_sequential_mcmc(
    panel: &Panel,
    times: &[usize],
    iters: &[usize],
    burnin_fraction: f64,
    settings: &McmcSettings,
) -> Result<Vec<McmcOutput>> {
    if times.len() != iters.len() {
        return Err(Error::input("one iteration budget per update is required"));
    }
    times
        .iter()
        .zip(iters)
        .enumerate()
        .map(|(u, (&t, &n))| {
            if t == 0 || t > panel.num_times() {
                return Err(Error::input(format!("update time {t} outside the panel")));
            }
            let y: Vec<Vec<f64>> = panel.series().iter().map(|s| s[..t].to_vec()).collect();
            let burn = ((n as f64) * burnin_fraction).ceil() as usize;
            let burn = burn.min(n.saturating_sub(1));
            let s = McmcSettings {
                iters: n - burn,
                burnin: burn,
                ..settings.clone()
            };
            run_truncated_mcmc(&y, &s, &[u as u64])
        })
        .collect()
}

/// Mean squared error and its standard error for one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseEstimate {
    pub mse: f64,
    /// Sample standard deviation of the squared errors over `sqrt(R)`; NaN for `R < 2`.
    pub se: f64,
}

/// Per-parameter MSE of posterior means, in `PARAM_NAMES` order.
pub fn compute_mse(estimates: &[Theta], truth: &Theta) -> Result<[MseEstimate; NUM_PARAMS]> {
    if estimates.is_empty() {
        return Err(Error::input("no estimates"));
    }
    let t = truth.to_array();
    let r = estimates.len() as f64;
    Ok(std::array::from_fn(|k| {
        let sq: Vec<f64> = estimates
            .iter()
            .map(|e| (e.to_array()[k] - t[k]).powi(2))
            .collect();
        MseEstimate {
            mse: mean(&sq),
            se: std_dev(&sq) / r.sqrt(),
        }
    }))
}

/// Estimation methods compared by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    EpSmcmc,
    Mcmc,
    EpRapf,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::EpSmcmc => "ep_smcmc",
            Algorithm::Mcmc => "mcmc",
            Algorithm::EpRapf => "ep_rapf",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ep_smcmc" => Ok(Algorithm::EpSmcmc),
            "mcmc" => Ok(Algorithm::Mcmc),
            "ep_rapf" => Ok(Algorithm::EpRapf),
            _ => Err(Error::param(format!("unknown algorithm `{s}`"))),
        }
    }
}

/// One row of an MSE table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseEntry {
    pub algorithm: String,
    pub j: usize,
    pub k: usize,
    pub parameter: String,
    pub mse: f64,
    pub se: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MseTable {
    pub entries: Vec<MseEntry>,
}

impl MseTable {
    pub fn push(
        &mut self,
        algorithm: Algorithm,
        j: usize,
        k: usize,
        estimates: &[Theta],
        truth: &Theta,
    ) -> Result<()> {
        let mse = compute_mse(estimates, truth)?;
        for (name, m) in PARAM_NAMES.iter().zip(mse) {
            self.entries.push(MseEntry {
                algorithm: algorithm.name().to_owned(),
                j,
                k,
                parameter: (*name).to_owned(),
                mse: m.mse,
                se: m.se,
                reps: estimates.len(),
            });
        }
        Ok(())
    }

    pub fn get(
        &self,
        algorithm: Algorithm,
        j: usize,
        k: usize,
        parameter: &str,
    ) -> Option<&MseEntry> {
        self.entries.iter().find(|e| {
            e.algorithm == algorithm.name() && e.j == j && e.k == k && e.parameter == parameter
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<10} {:>6} {:>6} {:<8} {:>12} {:>12} {:>5}\n",
            "algorithm", "J", "K", "param", "mse", "se", "R"
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>6} {:<8} {:>12.6} {:>12.6} {:>5}",
                e.algorithm, e.j, e.k, e.parameter, e.mse, e.se, e.reps
            );
        }
        out
    }
}

/// Design of a repeated-run experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub truth: Theta,
    pub num_series: usize,
    pub num_times: usize,
    pub x0: f64,
    pub burnin: usize,
    /// `(J, K)` cells.
    pub grid: Vec<(usize, usize)>,
    pub algorithms: Vec<Algorithm>,
    pub reps: usize,
    pub seed: u64,
    pub replicas: usize,
    pub workers: usize,
    pub tuning: TuningConfig,
    pub merge: MergeConfig,
    pub particles: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            truth: Theta {
                lambda: 0.7,
                kappa: 3.8,
                nu: 10.0,
            },
            num_series: 100,
            num_times: 200,
            x0: 10.0,
            burnin: 2000,
            grid: vec![(50, 20)],
            algorithms: vec![Algorithm::EpSmcmc, Algorithm::Mcmc],
            reps: 10,
            seed: 0,
            replicas: 5,
            workers: 1,
            tuning: TuningConfig::default(),
            merge: MergeConfig {
                sampler_iters: 2000,
                burnin: 200,
                ..MergeConfig::default()
            },
            particles: 1000,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::param(format!("experiment spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.truth
            .is_valid()
            .then_some(())
            .ok_or_else(|| Error::param("truth is not a valid parameter"))?;
        if self.reps < 1
            || self.num_series < 1
            || self.num_times < 1
            || self.replicas < 1
            || self.workers < 1
        {
            return Err(Error::param(
                "reps, m, T, replicas and workers must be at least 1",
            ));
        }
        if self.grid.is_empty() || self.algorithms.is_empty() {
            return Err(Error::param(
                "the grid and the algorithm list must be nonempty",
            ));
        }
        for &(j, k) in &self.grid {
            if j < 1 || k < 1 || k > self.num_series {
                return Err(Error::param(format!(
                    "grid cell (J={j}, K={k}) does not fit m={}",
                    self.num_series
                )));
            }
        }
        self.tuning.validate()?;
        self.merge.validate()
    }

    /// Run configuration of the sampler for one cell and repetition.
    pub fn run_config(&self, j: usize, k: usize, rep: usize) -> RunConfig {
        RunConfig {
            block_size: k,
            interval: j,
            replicas: self.replicas,
            tuning: self.tuning,
            merge: self.merge,
            workers: self.workers,
            master_seed: derive_seed(self.seed, &[rep as u64, j as u64, k as u64]),
            ..RunConfig::default()
        }
    }
}

fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    use rand::Rng;
    stream(seed, Purpose::Bench, key).random()
}

/// Parses one grid axis: `J=50,100,200`, `K=10..50` (step = start) or
/// `K=10..50:5`.
pub fn parse_grid_axis(text: &str) -> Result<(String, Vec<usize>)> {
    let (name, values) = text
        .split_once('=')
        .ok_or_else(|| Error::param(format!("grid axis `{text}` needs NAME=VALUES")))?;
    let bad = || Error::param(format!("cannot parse grid values `{values}`"));
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let mut out = Vec::new();
    for part in values.split(',') {
        if let Some((a, rest)) = part.split_once("..") {
            let (b, step) = match rest.split_once(':') {
                Some((b, s)) => (parse(b)?, parse(s)?),
                None => {
                    let a = parse(a)?;
                    (parse(rest)?, a)
                }
            };
            let a = parse(a)?;
            if step == 0 || a > b {
                return Err(bad());
            }
            out.extend((a..=b).step_by(step));
        } else {
            out.push(parse(part)?);
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok((name.trim().to_owned(), out))
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub table: MseTable,
    /// Posterior means per `(algorithm, J, K)`, one per repetition.
    pub estimates: Vec<(Algorithm, usize, usize, Vec<Theta>)>,
    /// Realized sweep counts of the sampler per `(J, K)`, all repetitions.
    pub n_t: Vec<(usize, usize, Vec<usize>)>,
    pub seconds: f64,
}

/// Runs every algorithm on every cell for `reps` simulated panels. Within a
/// repetition all algorithms see the same panel. The MCMC baseline restarts
/// at every update with `L n_t` sweeps (the sampler's own `n_t` when it ran
/// on the same cell, otherwise `n_max`).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let start = Instant::now();
    let mut estimates: Vec<(Algorithm, usize, usize, Vec<Theta>)> = Vec::new();
    let mut n_t_log: Vec<(usize, usize, Vec<usize>)> =
        spec.grid.iter().map(|&(j, k)| (j, k, Vec::new())).collect();
    let mut push = |alg: Algorithm, j: usize, k: usize, th: Theta| match estimates
        .iter_mut()
        .find(|e| e.0 == alg && e.1 == j && e.2 == k)
    {
        Some(e) => e.3.push(th),
        None => estimates.push((alg, j, k, vec![th])),
    };
    for rep in 0..spec.reps {
        let data_seed = derive_seed(spec.seed, &[rep as u64]);
        let sim = simulate_panel(
            &spec.truth,
            spec.num_series,
            spec.num_times,
            spec.x0,
            spec.burnin,
            data_seed,
        )?;
        for (cell, &(j, k)) in spec.grid.iter().enumerate() {
            let cfg = spec.run_config(j, k, rep);
            let mut ep: Option<RunResult> = None;
            for alg in &spec.algorithms {
                match alg {
                    Algorithm::EpSmcmc => {
                        let res = run_ep_smcmc(&sim.panel, &cfg)?;
                        let draws = res
                            .final_merged_thetas()
                            .ok_or_else(|| Error::input("run produced no merged draws"))?;
                        push(*alg, j, k, posterior_mean(&draws));
                        n_t_log[cell].2.extend(res.n_t());
                        ep = Some(res);
                    }
                    Algorithm::Mcmc => {
                        let times = cfg.update_times(spec.num_times);
                        let iters: Vec<usize> = match &ep {
                            Some(r) => r.n_t().iter().map(|n| n * spec.replicas).collect(),
                            None => vec![spec.tuning.n_max * spec.replicas; times.len()],
                        };
                        let settings = McmcSettings {
                            seed: cfg.master_seed,
                            rw_scales: ep.as_ref().map(|r| r.rw_scales),
                            ..McmcSettings::default()
                        };
                        let outs = run_sequential_mcmc(
                            &sim.panel,
                            &times,
                            &iters,
                            cfg.burnin_fraction,
                            &settings,
                        )?;
                        let last = outs.last().expect("at least one update");
                        push(*alg, j, k, last.posterior_mean());
                    }
                    Algorithm::EpRapf => {
                        let partition = BlockPartition::new(spec.num_series, k)?;
                        let rc = RapfConfig {
                            particles: spec.particles,
                            seed: cfg.master_seed,
                            block_size: k,
                            merge: spec.merge,
                            workers: spec.workers,
                            ..RapfConfig::default()
                        };
                        let res = run_ep_rapf(&sim.panel, &partition, &rc)?;
                        push(*alg, j, k, posterior_mean(&res.merged_thetas()));
                    }
                }
            }
        }
    }
    let mut table = MseTable::default();
    for (alg, j, k, est) in &estimates {
        table.push(*alg, *j, *k, est, &spec.truth)?;
    }
    Ok(ExperimentReport {
        table,
        estimates,
        n_t: n_t_log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Wall clock of one workload at one worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub workers: usize,
    pub seconds: f64,
    /// Time at the first worker count divided by this time.
    pub speedup: f64,
    /// Hash of every retained and merged draw, bitwise.
    pub fingerprint: u64,
}

/// Hash of all draws of a run, for bitwise comparisons.
pub fn result_fingerprint(result: &RunResult) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for u in &result.updates {
        u.n_t.hash(&mut h);
        for th in u.draws.iter().flatten().flatten() {
            for v in th.to_array() {
                v.to_bits().hash(&mut h);
            }
        }
        if let Some(m) = &u.merged {
            for v in m.draws.iter().flatten() {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

/// Runs the same seeded workload at every worker count in `workers_list`.
pub fn timing_harness(
    panel: &Panel,
    config: &RunConfig,
    workers_list: &[usize],
) -> Result<Vec<TimingRow>> {
    let mut rows: Vec<TimingRow> = Vec::with_capacity(workers_list.len());
    for &w in workers_list {
        let cfg = RunConfig {
            workers: w,
            checkpoint_dir: None,
            ..config.clone()
        };
        let start = Instant::now();
        let res = run_ep_smcmc(panel, &cfg)?;
        let seconds = start.elapsed().as_secs_f64();
        let base = rows.first().map_or(seconds, |r| r.seconds);
        rows.push(TimingRow {
            workers: w,
            seconds,
            speedup: base / seconds,
            fingerprint: result_fingerprint(&res),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_cases() {
        let truth = Theta {
            lambda: 0.7,
            kappa: 3.8,
            nu: 10.0,
        };
        let m = compute_mse(&[truth, truth], &truth).unwrap();
        assert!(m.iter().all(|e| e.mse == 0.0));
        let a = Theta {
            kappa: 4.8,
            ..truth
        };
        let b = Theta {
            kappa: 2.8,
            ..truth
        };
        let m = compute_mse(&[a, b], &truth).unwrap();
        assert!((m[1].mse - 1.0).abs() < 1e-12);
        assert!(m[1].se.abs() < 1e-12);
    }

    #[test]
    fn grid_axis_syntax() {
        assert_eq!(
            parse_grid_axis("J=50,100,200").unwrap(),
            ("J".into(), vec![50, 100, 200])
        );
        assert_eq!(
            parse_grid_axis("K=10..50").unwrap().1,
            vec![10, 20, 30, 40, 50]
        );
        assert_eq!(parse_grid_axis("K=10..20:5").unwrap().1, vec![10, 15, 20]);
        assert!(parse_grid_axis("K").is_err());
        assert!(parse_grid_axis("K=0").is_err());
        assert!(parse_grid_axis("K=5..1").is_err());
    }

    #[test]
    fn table_formats() {
        let mut t = MseTable::default();
        let truth = Theta {
            lambda: 0.7,
            kappa: 3.8,
            nu: 10.0,
        };
        t.push(Algorithm::Mcmc, 50, 20, &[truth], &truth).unwrap();
        assert_eq!(t.entries.len(), 3);
        assert!(t
            .to_csv()
            .unwrap()
            .starts_with("algorithm,j,k,parameter,mse,se,reps"));
        assert!(t.to_text().contains("mcmc"));
        assert!(t.get(Algorithm::Mcmc, 50, 20, "kappa").is_some());
    }

    #[test]
    fn spec_from_toml() {
        let s = ExperimentSpec::from_toml(
            "num_series = 10\nnum_times = 20\nreps = 2\ngrid = [[10, 5]]\nalgorithms = [\"ep_smcmc\"]\n",
        )
        .unwrap();
        assert_eq!(s.grid, vec![(10, 5)]);
        assert!(ExperimentSpec::from_toml("grid = [[10, 500]]\n").is_err());
    }
}
