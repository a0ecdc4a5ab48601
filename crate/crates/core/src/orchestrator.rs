//! End-to-end sequential inference over a blocked panel.
//!
//! The `m` series are split into `M` blocks, each with `L` replica chains.
//! Every `J` time steps all `M L` chains jump to the new horizon and then run
//! sweeps in lockstep. After each sweep the replicas of each block are
//! compared to their post-jump state; the update stops at the first lag whose
//! cross-replica rate (maximized over all blocks) drops below `1 - epsilon`,
//! clamped to `[n_min, n_max]`. Retained `theta` draws are merged across
//! blocks at the configured merge points.
//!
//! Every chain draws from a stream keyed by `(seed, block, replica, update)`,
//! so results do not depend on the number of workers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{merge_blocks, MergeConfig, MergedPosterior};
use crate::model::{BlockPartition, InitialState, Panel, PriorSpec, Theta, NUM_PARAMS};
use crate::rng::{stream, Purpose, StreamRng};
use crate::smcmc::{
    estimate_rate, jump_extend, transition_step, tune_rw_scales, BlockContext, ChainSnapshot,
    ChainState, TuningConfig, SNAPSHOT_VERSION,
};

/// When sub-posteriors are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeSchedule {
    /// Only after the last update.
    #[default]
    FinalOnly,
    EveryUpdate,
}

/// Box from which chain starting values of `theta` are drawn uniformly,
/// rejecting draws outside the constraint region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitBox {
    pub lambda: (f64, f64),
    pub kappa: (f64, f64),
    pub nu: (f64, f64),
}

impl Default for InitBox {
    fn default() -> Self {
        InitBox {
            lambda: (0.2, 0.95),
            kappa: (0.5, 8.0),
            nu: (1.0, 25.0),
        }
    }
}

impl InitBox {
    pub fn validate(&self) -> Result<()> {
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !(ok(self.lambda) && ok(self.kappa) && ok(self.nu)) {
            return Err(Error::param("init box bounds must be finite and ordered"));
        }
        if !(self.lambda.0 > 0.0 && self.lambda.1 < 1.0 && self.kappa.0 > 0.0 && self.nu.0 > 0.0) {
            return Err(Error::param("init box must lie inside the parameter space"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Theta> {
        let u = |rng: &mut R, (a, b): (f64, f64)| a + (b - a) * rng.random::<f64>();
        for _ in 0..10_000 {
            let th = Theta {
                lambda: u(rng, self.lambda),
                kappa: u(rng, self.kappa),
                nu: u(rng, self.nu),
            };
            if th.is_valid() {
                return Ok(th);
            }
        }
        Err(Error::param("init box contains no valid parameter values"))
    }
}

/// Settings of the pilot run that fixes the random-walk scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub target_acceptance: f64,
    pub rounds: usize,
    pub sweeps: usize,
}

impl Default for PilotConfig {
    fn default() -> Self {
        PilotConfig {
            target_acceptance: 0.3,
            rounds: 8,
            sweeps: 25,
        }
    }
}

/// Configuration of [`run_ep_smcmc`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Series per block (`K`).
    pub block_size: usize,
    /// Time steps between updates (`J`); the last update may be shorter.
    pub interval: usize,
    /// Replica chains per block (`L`).
    pub replicas: usize,
    pub tuning: TuningConfig,
    pub merge: MergeConfig,
    pub merge_schedule: MergeSchedule,
    /// Worker threads (`r`).
    pub workers: usize,
    pub master_seed: u64,
    pub prior: PriorSpec,
    pub initial_state: InitialState,
    /// Fraction of each update's sweeps discarded before retaining draws.
    pub burnin_fraction: f64,
    pub init_box: InitBox,
    pub pilot: PilotConfig,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            block_size: 30,
            interval: 200,
            replicas: 5,
            tuning: TuningConfig::default(),
            merge: MergeConfig::default(),
            merge_schedule: MergeSchedule::default(),
            workers: 1,
            master_seed: 0,
            prior: PriorSpec::default(),
            initial_state: InitialState::Diffuse,
            burnin_fraction: 1.0 / 3.0,
            init_box: InitBox::default(),
            pilot: PilotConfig::default(),
            checkpoint_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, panel: &Panel) -> Result<()> {
        if self.block_size < 1 || self.interval < 1 || self.replicas < 1 || self.workers < 1 {
            return Err(Error::param("K, J, L and workers must all be at least 1"));
        }
        if self.block_size > panel.num_series() {
            return Err(Error::param(format!(
                "block size {} exceeds the {} series",
                self.block_size,
                panel.num_series()
            )));
        }
        if !(0.0..1.0).contains(&self.burnin_fraction) {
            return Err(Error::param("burn-in fraction must be in [0, 1)"));
        }
        if !(self.pilot.target_acceptance > 0.0 && self.pilot.target_acceptance < 1.0) {
            return Err(Error::param("pilot target acceptance must be in (0, 1)"));
        }
        self.tuning.validate()?;
        self.merge.validate()?;
        self.prior.validate()?;
        self.init_box.validate()?;
        self.initial_state.validate(panel.num_series())
    }

    /// Number of sweeps discarded from an update of `n_t` sweeps.
    pub fn burnin_sweeps(&self, n_t: usize) -> usize {
        let b = (n_t as f64 * self.burnin_fraction).ceil() as usize;
        b.min(n_t.saturating_sub(1))
    }

    /// End times of the updates: `J, 2J, ..., T`.
    pub fn update_times(&self, t_len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (1..)
            .map(|k| k * self.interval)
            .take_while(|t| *t < t_len)
            .collect();
        out.push(t_len);
        out
    }
}

/// Everything produced by one update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    /// Horizon after the update.
    pub t: usize,
    pub n_t: usize,
    /// Rate at lag `n_t`, when defined.
    pub rate: Option<f64>,
    /// Retained draws indexed `[block][replica][draw]`.
    pub draws: Vec<Vec<Vec<Theta>>>,
    pub merged: Option<MergedPosterior>,
}

impl UpdateRecord {
    /// Pooled draws of one block as `[lambda, kappa, nu]` rows.
    pub fn pooled(&self, block: usize) -> Vec<Vec<f64>> {
        self.draws[block]
            .iter()
            .flatten()
            .map(|th| th.to_array().to_vec())
            .collect()
    }

    pub fn merged_thetas(&self) -> Option<Vec<Theta>> {
        self.merged.as_ref().map(|m| {
            m.draws
                .iter()
                .map(|d| Theta::from_array([d[0], d[1], d[2]]))
                .collect()
        })
    }
}

/// Accumulated wall-clock seconds per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingLedger {
    pub phases: BTreeMap<String, f64>,
}

impl TimingLedger {
    pub fn add(&mut self, phase: &str, since: Instant) {
        *self.phases.entry(phase.to_owned()).or_insert(0.0) += since.elapsed().as_secs_f64();
    }

    pub fn total(&self) -> f64 {
        self.phases.values().sum()
    }
}

/// Output of [`run_ep_smcmc`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub updates: Vec<UpdateRecord>,
    pub rw_scales: [f64; NUM_PARAMS],
    /// Final `theta` of every chain, indexed `[block][replica]`.
    pub final_thetas: Vec<Vec<Theta>>,
    /// Metropolis-Hastings acceptance rate per chain, `[block][replica]`.
    pub acceptance: Vec<Vec<f64>>,
    pub timing: TimingLedger,
    pub num_blocks: usize,
}

impl RunResult {
    pub fn n_t(&self) -> Vec<usize> {
        self.updates.iter().map(|u| u.n_t).collect()
    }

    /// Merged draws of the last merge point.
    pub fn final_merged(&self) -> Option<&MergedPosterior> {
        self.updates.iter().rev().find_map(|u| u.merged.as_ref())
    }

    pub fn final_merged_thetas(&self) -> Option<Vec<Theta>> {
        self.updates.iter().rev().find_map(|u| u.merged_thetas())
    }

    pub fn mean_acceptance(&self) -> f64 {
        let all: Vec<f64> = self
            .acceptance
            .iter()
            .flatten()
            .copied()
            .filter(|a| a.is_finite())
            .collect();
        crate::stats::mean(&all)
    }
}

/// Assignment of work items to workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    /// Contiguous task ranges, one per worker; sizes differ by at most one.
    pub assignments: Vec<std::ops::Range<usize>>,
}

impl ExecutionPlan {
    pub fn num_workers(&self) -> usize {
        self.assignments.len()
    }

    pub fn max_load(&self) -> usize {
        self.assignments.iter().map(|r| r.len()).max().unwrap_or(0)
    }
}

/// Splits `num_tasks` independent tasks across `workers` workers in balanced
/// contiguous ranges. Workers beyond the number of tasks get empty ranges.
pub fn schedule_tasks(num_tasks: usize, workers: usize) -> Result<ExecutionPlan> {
    if workers == 0 {
        return Err(Error::param("need at least one worker"));
    }
    let base = num_tasks / workers;
    let extra = num_tasks % workers;
    let mut start = 0;
    let assignments = (0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect();
    Ok(ExecutionPlan { assignments })
}

/// Runs `f` on every task, distributing contiguous task ranges per `plan`
/// over `pool`.
fn run_plan<T, F>(
    pool: &rayon::ThreadPool,
    plan: &ExecutionPlan,
    tasks: &mut [T],
    f: F,
) -> Result<()>
where
    T: Send,
    F: Fn(&mut T) -> Result<()> + Sync,
{
    let mut chunks = Vec::with_capacity(plan.num_workers());
    let mut rest = tasks;
    for r in &plan.assignments {
        let (head, tail) = rest.split_at_mut(r.len());
        chunks.push(head);
        rest = tail;
    }
    pool.install(|| {
        chunks
            .into_par_iter()
            .map(|chunk| chunk.iter_mut().try_for_each(&f))
            .collect::<Result<Vec<()>>>()
    })?;
    Ok(())
}

/// Cooperative cancellation, checked between sweeps.
#[derive(Debug, Clone, Default)]
pub struct CancelFlag(Arc<AtomicBool>);

impl CancelFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> Arc<AtomicBool> {
        self.0.clone()
    }
}

struct ChainTask {
    chain: ChainState,
    rng: StreamRng,
    draws: Vec<Theta>,
}

struct BlockData {
    y: Vec<Vec<f64>>,
    init: InitialState,
}

/// Runs the blocked sequential sampler over the whole panel.
pub fn run_ep_smcmc(panel: &Panel, config: &RunConfig) -> Result<RunResult> {
    run_ep_smcmc_with_cancel(panel, config, &CancelFlag::new())
}

/// [`run_ep_smcmc`] with a cancellation flag; on cancellation the last
/// completed update stays in the checkpoint directory and
/// [`Error::Interrupted`] is returned.
pub fn run_ep_smcmc_with_cancel(
    panel: &Panel,
    config: &RunConfig,
    cancel: &CancelFlag,
) -> Result<RunResult> {
    config.validate(panel)?;
    let partition = BlockPartition::new(panel.num_series(), config.block_size)?;
    let m_blocks = partition.num_blocks();
    let l = config.replicas;
    let prior = config.prior.for_blocks(m_blocks);
    let blocks: Vec<BlockData> = partition
        .ranges()
        .iter()
        .map(|r| BlockData {
            y: panel.block(r.clone()).to_vec(),
            init: config.initial_state.for_block(r.clone()),
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    let plan = schedule_tasks(m_blocks * l, config.workers)?;
    let mut timing = TimingLedger::default();
    let times = config.update_times(panel.num_times());
    let store = config.checkpoint_dir.as_deref().map(CheckpointStore::new);

    let fingerprint = RunFingerprint::of(panel, config, m_blocks);
    let resumed = match &store {
        Some(s) => s.load_latest(&fingerprint, m_blocks, l)?,
        None => None,
    };

    let (rw_scales, mut tasks, mut updates) = match resumed {
        Some(r) => {
            log::info!("resuming after update {}", r.updates.len());
            let tasks = r
                .chains
                .into_iter()
                .map(|chain| ChainTask {
                    chain,
                    rng: stream(0, Purpose::ChainUpdate, &[]),
                    draws: Vec::new(),
                })
                .collect();
            (r.rw_scales, tasks, r.updates)
        }
        None => {
            let start = Instant::now();
            let scales = match config.tuning.rw_scales {
                Some(s) => s,
                None => {
                    let mut rng = stream(config.master_seed, Purpose::Pilot, &[]);
                    let theta = config.init_box.sample(&mut rng)?;
                    let ctx = BlockContext {
                        y: &blocks[0].y,
                        init: &blocks[0].init,
                        prior: &prior,
                    };
                    let s = tune_rw_scales(
                        theta,
                        &ctx,
                        config.pilot.target_acceptance,
                        config.pilot.rounds,
                        config.pilot.sweeps,
                        &mut rng,
                    )?;
                    log::info!("pilot random-walk scales: {s:?}");
                    s
                }
            };
            timing.add("pilot", start);
            let mut tasks = Vec::with_capacity(m_blocks * l);
            for b in 0..m_blocks {
                for r in 0..l {
                    let mut rng = stream(
                        config.master_seed,
                        Purpose::ChainInit,
                        &[b as u64, r as u64],
                    );
                    let theta = config.init_box.sample(&mut rng)?;
                    let k = partition.range(b).len();
                    tasks.push(ChainTask {
                        chain: ChainState::new(theta, k, b, r),
                        rng,
                        draws: Vec::new(),
                    });
                }
            }
            if let Some(s) = &store {
                s.write_run(&fingerprint, &scales)?;
            }
            (scales, tasks, Vec::new())
        }
    };

    for (u, &t_new) in times.iter().enumerate().skip(updates.len()) {
        let t_prev = if u == 0 { 0 } else { times[u - 1] };
        for task in tasks.iter_mut() {
            let (b, r) = (task.chain.block_id, task.chain.replica_id);
            task.rng = stream(
                config.master_seed,
                Purpose::ChainUpdate,
                &[b as u64, r as u64, u as u64],
            );
            task.draws.clear();
        }

        let start = Instant::now();
        run_plan(&pool, &plan, &mut tasks, |task| {
            let bd = &blocks[task.chain.block_id];
            let ctx = BlockContext {
                y: &bd.y,
                init: &bd.init,
                prior: &prior,
            };
            let y_new: Vec<Vec<f64>> = bd.y.iter().map(|s| s[t_prev..t_new].to_vec()).collect();
            jump_extend(&mut task.chain, &ctx, &y_new, &mut task.rng)
        })?;
        timing.add("jump", start);

        let reference: Vec<Vec<f64>> = if l >= 2 {
            tasks
                .iter()
                .map(|t| t.chain.tracked_coordinates(t_prev))
                .collect()
        } else {
            Vec::new()
        };
        let threshold = 1.0 - config.tuning.epsilon;
        let mut n_t = config.tuning.n_max;
        let mut first_hit: Option<(usize, f64)> = None;
        let mut last_rate = None;
        let mut s = 0;
        while s < n_t {
            if cancel.is_cancelled() {
                return Err(Error::Interrupted);
            }
            s += 1;
            let start = Instant::now();
            run_plan(&pool, &plan, &mut tasks, |task| {
                let bd = &blocks[task.chain.block_id];
                let ctx = BlockContext {
                    y: &bd.y,
                    init: &bd.init,
                    prior: &prior,
                };
                transition_step(&mut task.chain, &ctx, &rw_scales, &mut task.rng)?;
                task.draws.push(task.chain.theta);
                Ok(())
            })?;
            timing.add("sweeps", start);

            if l >= 2 && first_hit.is_none() {
                let start = Instant::now();
                let rate = global_rate(&tasks, &reference, l, t_prev, s)?;
                last_rate = rate;
                if let Some(v) = rate {
                    if v <= threshold {
                        first_hit = Some((s, v));
                        n_t = s.clamp(config.tuning.n_min, config.tuning.n_max);
                    }
                }
                timing.add("tuning", start);
            }
        }
        if first_hit.is_none() && l >= 2 && last_rate.is_none() {
            log::warn!("cross-chain rate undefined at every lag of update {u}; using n_max");
        }

        let burn = config.burnin_sweeps(n_t);
        let mut draws = vec![vec![Vec::new(); l]; m_blocks];
        for task in &tasks {
            draws[task.chain.block_id][task.chain.replica_id] = task.draws[burn..n_t].to_vec();
        }
        let mut record = UpdateRecord {
            update: u,
            t: t_new,
            n_t,
            rate: first_hit.map(|h| h.1).or(last_rate),
            draws,
            merged: None,
        };
        log::info!("update {u}: t = {t_new}, n_t = {n_t}");

        let is_last = u + 1 == times.len();
        if is_last || config.merge_schedule == MergeSchedule::EveryUpdate {
            let start = Instant::now();
            let pooled: Vec<Vec<Vec<f64>>> = (0..m_blocks).map(|b| record.pooled(b)).collect();
            let mut rng = stream(
                config.master_seed,
                Purpose::Merge,
                &[u as u64, config.merge.seed],
            );
            record.merged = Some(merge_blocks(&pooled, &config.merge, &mut rng)?);
            timing.add("merge", start);
        }

        if let Some(store) = &store {
            let start = Instant::now();
            store.write_update(config.master_seed, &record, tasks.iter().map(|t| &t.chain))?;
            timing.add("checkpoint", start);
        }
        updates.push(record);
    }

    let mut final_thetas = vec![Vec::with_capacity(l); m_blocks];
    let mut acceptance = vec![Vec::with_capacity(l); m_blocks];
    for task in &tasks {
        final_thetas[task.chain.block_id].push(task.chain.theta);
        acceptance[task.chain.block_id].push(task.chain.acceptance_rate());
    }
    Ok(RunResult {
        updates,
        rw_scales,
        final_thetas,
        acceptance,
        timing,
        num_blocks: m_blocks,
    })
}

/// Rate at lag `s`, maximized over blocks; `None` when undefined everywhere.
fn global_rate(
    tasks: &[ChainTask],
    reference: &[Vec<f64>],
    l: usize,
    since_row: usize,
    s: usize,
) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for (b, group) in tasks.chunks(l).enumerate() {
        debug_assert!(group.iter().all(|t| t.chain.block_id == b));
        let later: Vec<Vec<f64>> = group
            .iter()
            .map(|t| t.chain.tracked_coordinates(since_row))
            .collect();
        match estimate_rate(&reference[b * l..(b + 1) * l], &later, s) {
            Ok(r) => best = Some(best.map_or(r.value, |v| v.max(r.value))),
            Err(Error::UndefinedRate) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

/// Identity of a run, checked before resuming from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunFingerprint {
    master_seed: u64,
    num_series: usize,
    num_times: usize,
    num_blocks: usize,
    block_size: usize,
    interval: usize,
    replicas: usize,
    data_checksum: u64,
}

impl RunFingerprint {
    fn of(panel: &Panel, config: &RunConfig, num_blocks: usize) -> Self {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in panel.series() {
            for v in s {
                v.to_bits().hash(&mut h);
            }
        }
        RunFingerprint {
            master_seed: config.master_seed,
            num_series: panel.num_series(),
            num_times: panel.num_times(),
            num_blocks,
            block_size: config.block_size,
            interval: config.interval,
            replicas: config.replicas,
            data_checksum: h.finish(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunHeader {
    fingerprint: RunFingerprint,
    rw_scales: [f64; NUM_PARAMS],
}

struct Resumed {
    rw_scales: [f64; NUM_PARAMS],
    chains: Vec<ChainState>,
    updates: Vec<UpdateRecord>,
}

/// Checkpoint directory layout:
///
/// ```text
/// run.json
/// u0000/update.json
/// u0000/b0000_r000.json
/// u0000/complete
/// ```
struct CheckpointStore {
    root: PathBuf,
}

// Resumed chains are bit-identical only with serde_json's float_roundtrip.
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

impl CheckpointStore {
    fn new(root: &Path) -> Self {
        CheckpointStore {
            root: root.to_owned(),
        }
    }

    fn update_dir(&self, u: usize) -> PathBuf {
        self.root.join(format!("u{u:04}"))
    }

    fn write_run(&self, fingerprint: &RunFingerprint, rw_scales: &[f64; NUM_PARAMS]) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let header = RunHeader {
            fingerprint: fingerprint.clone(),
            rw_scales: *rw_scales,
        };
        write_json(&self.root.join("run.json"), &header)
    }

    fn write_update<'a>(
        &self,
        master_seed: u64,
        record: &UpdateRecord,
        chains: impl Iterator<Item = &'a ChainState>,
    ) -> Result<()> {
        let dir = self.update_dir(record.update);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for chain in chains {
            let snap = ChainSnapshot {
                version: SNAPSHOT_VERSION,
                master_seed,
                next_update: record.update + 1,
                chain: chain.clone(),
            };
            let name = format!("b{:04}_r{:03}.json", chain.block_id, chain.replica_id);
            write_json(&dir.join(name), &snap)?;
        }
        write_json(&dir.join("update.json"), record)?;
        let marker = dir.join("complete");
        fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))
    }

    fn load_latest(
        &self,
        fingerprint: &RunFingerprint,
        m_blocks: usize,
        l: usize,
    ) -> Result<Option<Resumed>> {
        let run_path = self.root.join("run.json");
        if !run_path.exists() {
            return Ok(None);
        }
        let header: RunHeader = read_json(&run_path)?;
        if &header.fingerprint != fingerprint {
            return Err(Error::input(format!(
                "checkpoint at {} belongs to a different run",
                self.root.display()
            )));
        }
        let mut updates = Vec::new();
        while self.update_dir(updates.len()).join("complete").exists() {
            let rec: UpdateRecord = read_json(&self.update_dir(updates.len()).join("update.json"))?;
            updates.push(rec);
        }
        if updates.is_empty() {
            return Ok(None);
        }
        let dir = self.update_dir(updates.len() - 1);
        let mut chains = Vec::with_capacity(m_blocks * l);
        for b in 0..m_blocks {
            for r in 0..l {
                let snap: ChainSnapshot = read_json(&dir.join(format!("b{b:04}_r{r:03}.json")))?;
                if snap.version != SNAPSHOT_VERSION || snap.next_update != updates.len() {
                    return Err(Error::Format {
                        path: dir.clone(),
                        reason: "snapshot version or update index mismatch".into(),
                    });
                }
                chains.push(snap.chain);
            }
        }
        Ok(Some(Resumed {
            rw_scales: header.rw_scales,
            chains,
            updates,
        }))
    }
}
