//! Subcommand implementations. Every configuration is validated before any
//! compute starts.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use epsmcmc::bench::{
    parse_grid_axis, run_experiment, run_full_mcmc_with, timing_harness, Algorithm, ExperimentSpec,
    McmcSettings,
};
use epsmcmc::io::{
    read_draws_csv, read_panel_csv, sidecar_path, write_draws_csv, write_latent_csv, write_meta,
    write_panel_csv, DrawRow, PanelMeta,
};
use epsmcmc::merge::{merge_blocks, BandwidthRule, MergeConfig, MergedPosterior};
use epsmcmc::model::simulate_panel;
use epsmcmc::orchestrator::{run_ep_smcmc_with_cancel, CancelFlag, MergeSchedule, RunResult};
use epsmcmc::rng::{stream, Purpose};
use epsmcmc::smc::{run_ep_rapf, RapfConfig};
use epsmcmc::{BlockPartition, Error, InitialState, Panel, RunConfig, Theta};

use crate::output::{
    create_dir, density_rows, manifest_path_for, summarize, summary_text, write_densities,
    write_summary, Manifest,
};
use crate::{BenchArgs, McmcArgs, MergeArgs, MergeOpts, RapfArgs, RunArgs, SimulateArgs};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidTheta(_) | Error::InvalidParameter(_) => Failure::Config(msg),
            Error::InvalidInput(_) | Error::Csv(_) | Error::Format { .. } => Failure::Data(msg),
            Error::UndefinedRate
            | Error::DegenerateWeights(_)
            | Error::Interrupted
            | Error::Io { .. } => Failure::Runtime(msg),
        }
    }
}

/// Errors while reading inputs are data errors whatever their kind.
fn data(e: Error) -> Failure {
    match Failure::from(e) {
        Failure::Config(m) => Failure::Config(m),
        Failure::Data(m) | Failure::Runtime(m) => Failure::Data(m),
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn load_panel(path: &Path) -> Result<Panel, Failure> {
    read_panel_csv(path).map_err(data)
}

fn initial_state(x0: Option<f64>, m: usize) -> Result<InitialState, Failure> {
    match x0 {
        None => Ok(InitialState::Diffuse),
        Some(v) if v > 0.0 && v.is_finite() => Ok(InitialState::constant(v, m)),
        Some(v) => Err(config_err(format!("--x0 must be positive, got {v}"))),
    }
}

fn parse_bandwidth(text: &str) -> Result<BandwidthRule, Failure> {
    match text.trim().to_ascii_lowercase().as_str() {
        "silverman" => Ok(BandwidthRule::Silverman),
        "scott" => Ok(BandwidthRule::Scott),
        other => match other.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(BandwidthRule::Fixed(h)),
            _ => Err(config_err(format!(
                "bandwidth `{text}` is not silverman, scott or a positive number"
            ))),
        },
    }
}

fn merge_config(opts: &MergeOpts, base: MergeConfig, seed: u64) -> Result<MergeConfig, Failure> {
    let mut cfg = MergeConfig { seed, ..base };
    if let Some(b) = &opts.bandwidth {
        cfg.bandwidth_rule = parse_bandwidth(b)?;
    }
    if let Some(n) = opts.merge_iters {
        cfg.sampler_iters = n;
    }
    if let Some(n) = opts.merge_burnin {
        cfg.burnin = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn theta_of(row: &[f64]) -> Theta {
    Theta {
        lambda: row[0],
        kappa: row[1],
        nu: row[2],
    }
}

/// Writes summary, densities and the manifest shared by every sampler.
fn finish_posterior(
    out: &Path,
    draws: &[Theta],
    merged: Option<&MergedPosterior>,
    manifest: &mut Manifest,
) -> Result<(), Failure> {
    if draws.is_empty() {
        return Err(Failure::Runtime("no posterior draws were produced".into()));
    }
    let summary = summarize(draws);
    let p = out.join("summary.csv");
    write_summary(&p, &summary)?;
    manifest.output(&p);
    let p = out.join("density.csv");
    write_densities(&p, &density_rows(draws, "merged", merged))?;
    manifest.output(&p);
    manifest.write(&out.join("manifest.json"))?;
    print!("{}", summary_text(&summary));
    Ok(())
}

fn merged_rows(update: usize, t: usize, draws: &[Vec<f64>]) -> Vec<DrawRow> {
    draws
        .iter()
        .enumerate()
        .map(|(i, d)| DrawRow {
            update,
            t,
            block: 0,
            replica: 0,
            draw: i,
            lambda: d[0],
            kappa: d[1],
            nu: d[2],
        })
        .collect()
}

pub fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let theta = Theta::new(a.lambda, a.kappa, a.nu)?;
    if a.m == 0 || a.t == 0 {
        return Err(config_err("--m and --T must be at least 1"));
    }
    // The sidecar is TOML, whose integers are signed 64-bit.
    if i64::try_from(a.seed).is_err() {
        return Err(config_err("--seed must be at most 2^63 - 1"));
    }
    let sim = simulate_panel(&theta, a.m, a.t, a.x0, a.burnin, a.seed)?;
    write_panel_csv(&a.out, &sim.panel)?;
    let meta = PanelMeta {
        num_series: a.m,
        num_times: a.t,
        theta,
        x0: a.x0,
        burnin: a.burnin,
        seed: a.seed,
    };
    let meta_path = sidecar_path(&a.out);
    write_meta(&meta_path, &meta)?;
    let mut manifest = Manifest::new("simulate", &meta, a.seed)?;
    manifest.output(&a.out);
    manifest.output(&meta_path);
    if let Some(lp) = &a.latent {
        write_latent_csv(lp, sim.panel.ids(), &sim.initial_state, &sim.latent)?;
        manifest.output(lp);
    }
    manifest.write(&manifest_path_for(&a.out))
}

/// Optional defaults for `run`, read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunFile {
    block_size: Option<usize>,
    interval: Option<usize>,
    replicas: Option<usize>,
    epsilon: Option<f64>,
    n_min: Option<usize>,
    n_max: Option<usize>,
    burnin_fraction: Option<f64>,
    seed: Option<u64>,
    workers: Option<usize>,
    x0: Option<f64>,
    bandwidth: Option<String>,
    merge_iters: Option<usize>,
    merge_burnin: Option<usize>,
    merge_every_update: Option<bool>,
    checkpoint: Option<PathBuf>,
}

fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text =
        fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("{}: {}", path.display(), e.message())))
}

fn run_config(a: &RunArgs, panel: &Panel) -> Result<RunConfig, Failure> {
    let file: RunFile = match &a.config {
        Some(p) => load_toml(p)?,
        None => RunFile::default(),
    };
    let base = RunConfig::default();
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let merge_opts = MergeOpts {
        bandwidth: a.merge.bandwidth.clone().or(file.bandwidth),
        merge_iters: a.merge.merge_iters.or(file.merge_iters),
        merge_burnin: a.merge.merge_burnin.or(file.merge_burnin),
    };
    let mut tuning = base.tuning;
    tuning.epsilon = a.epsilon.or(file.epsilon).unwrap_or(tuning.epsilon);
    tuning.n_min = a.n_min.or(file.n_min).unwrap_or(tuning.n_min);
    tuning.n_max = a.n_max.or(file.n_max).unwrap_or(tuning.n_max);
    let every = a.merge_every_update || file.merge_every_update.unwrap_or(false);
    let cfg = RunConfig {
        block_size: a.k.or(file.block_size).unwrap_or(base.block_size),
        interval: a.j.or(file.interval).unwrap_or(base.interval),
        replicas: a.replicas.or(file.replicas).unwrap_or(base.replicas),
        tuning,
        merge: merge_config(&merge_opts, base.merge, seed)?,
        merge_schedule: if every {
            MergeSchedule::EveryUpdate
        } else {
            MergeSchedule::FinalOnly
        },
        workers: a.workers.or(file.workers).unwrap_or(base.workers),
        master_seed: seed,
        initial_state: initial_state(a.x0.or(file.x0), panel.num_series())?,
        burnin_fraction: a
            .burnin_fraction
            .or(file.burnin_fraction)
            .unwrap_or(base.burnin_fraction),
        checkpoint_dir: a.checkpoint.clone().or(file.checkpoint),
        ..base
    };
    cfg.validate(panel)?;
    Ok(cfg)
}

fn install_cancel_handler() -> CancelFlag {
    let flag = CancelFlag::new();
    let handle = flag.clone();
    // A second handler cannot be installed in the same process; a missing
    // handler only loses the graceful flush.
    if ctrlc::set_handler(move || handle.cancel()).is_err() {
        log::warn!("could not install the interrupt handler");
    }
    flag
}

fn write_run_outputs(out: &Path, res: &RunResult, manifest: &mut Manifest) -> Result<(), Failure> {
    let mut rows = Vec::new();
    let mut merged = Vec::new();
    for u in &res.updates {
        for (b, reps) in u.draws.iter().enumerate() {
            for (r, ds) in reps.iter().enumerate() {
                rows.extend(ds.iter().enumerate().map(|(i, th)| DrawRow {
                    update: u.update,
                    t: u.t,
                    block: b,
                    replica: r,
                    draw: i,
                    lambda: th.lambda,
                    kappa: th.kappa,
                    nu: th.nu,
                }));
            }
        }
        if let Some(m) = &u.merged {
            merged.extend(merged_rows(u.update, u.t, &m.draws));
        }
    }
    let p = out.join("draws.csv");
    write_draws_csv(&p, &rows)?;
    manifest.output(&p);
    let p = out.join("merged.csv");
    write_draws_csv(&p, &merged)?;
    manifest.output(&p);

    let p = out.join("n_t.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Failure::Runtime(e.to_string()))?;
    w.write_record(["update", "t", "n_t", "rate"])
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    for u in &res.updates {
        let rate = u.rate.map_or_else(String::new, |r| format!("{r:?}"));
        w.write_record([
            u.update.to_string(),
            u.t.to_string(),
            u.n_t.to_string(),
            rate,
        ])
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    manifest.output(&p);

    let final_merged = res
        .final_merged()
        .ok_or_else(|| Failure::Runtime("run produced no merged posterior".into()))?;
    let draws: Vec<Theta> = final_merged.draws.iter().map(|d| theta_of(d)).collect();
    finish_posterior(out, &draws, Some(final_merged), manifest)
}

pub fn run(a: &RunArgs) -> Result<(), Failure> {
    let panel = load_panel(&a.data)?;
    let cfg = run_config(a, &panel)?;
    create_dir(&a.out)?;
    let mut manifest = Manifest::new("run", &cfg, cfg.master_seed)?;
    manifest.input(&a.data)?;
    let cancel = install_cancel_handler();
    info!(
        "running with K={} J={} L={} on {} workers",
        cfg.block_size, cfg.interval, cfg.replicas, cfg.workers
    );
    let res = run_ep_smcmc_with_cancel(&panel, &cfg, &cancel)?;
    write_run_outputs(&a.out, &res, &mut manifest)
}

#[derive(Debug, Serialize)]
struct McmcRecord<'a> {
    settings: &'a McmcSettings,
}

pub fn mcmc(a: &McmcArgs) -> Result<(), Failure> {
    let panel = load_panel(&a.data)?;
    if a.iters == 0 {
        return Err(config_err("--iters must be at least 1"));
    }
    let settings = McmcSettings {
        iters: a.iters,
        burnin: a.burnin,
        seed: a.seed,
        initial_state: initial_state(a.x0, panel.num_series())?,
        ..McmcSettings::default()
    };
    create_dir(&a.out)?;
    let mut manifest = Manifest::new(
        "mcmc",
        &McmcRecord {
            settings: &settings,
        },
        a.seed,
    )?;
    manifest.input(&a.data)?;
    let outp = run_full_mcmc_with(&panel, &settings)?;
    let rows: Vec<DrawRow> = outp
        .draws
        .iter()
        .enumerate()
        .map(|(i, th)| DrawRow {
            update: 0,
            t: panel.num_times(),
            block: 0,
            replica: 0,
            draw: i,
            lambda: th.lambda,
            kappa: th.kappa,
            nu: th.nu,
        })
        .collect();
    let p = a.out.join("draws.csv");
    write_draws_csv(&p, &rows)?;
    manifest.output(&p);
    info!("acceptance rate {:.3}", outp.acceptance);
    finish_posterior(&a.out, &outp.draws, None, &mut manifest)
}

pub fn rapf(a: &RapfArgs) -> Result<(), Failure> {
    let panel = load_panel(&a.data)?;
    let cfg = RapfConfig {
        particles: a.particles,
        shrinkage: a.shrinkage,
        ess_threshold: a.ess_threshold,
        seed: a.seed,
        block_size: a.k,
        initial_state: initial_state(a.x0, panel.num_series())?,
        merge: merge_config(&a.merge, MergeConfig::default(), a.seed)?,
        workers: a.workers,
        ..RapfConfig::default()
    };
    cfg.validate()?;
    let partition = BlockPartition::new(panel.num_series(), a.k)?;
    create_dir(&a.out)?;
    let mut manifest = Manifest::new("rapf", &cfg, a.seed)?;
    manifest.input(&a.data)?;
    let res = run_ep_rapf(&panel, &partition, &cfg)?;
    let mut rows = Vec::new();
    for (b, ds) in res.block_draws.iter().enumerate() {
        rows.extend(ds.iter().enumerate().map(|(i, d)| DrawRow {
            update: 0,
            t: panel.num_times(),
            block: b,
            replica: 0,
            draw: i,
            lambda: d[0],
            kappa: d[1],
            nu: d[2],
        }));
    }
    let p = a.out.join("draws.csv");
    write_draws_csv(&p, &rows)?;
    manifest.output(&p);
    let p = a.out.join("merged.csv");
    write_draws_csv(&p, &merged_rows(0, panel.num_times(), &res.merged.draws))?;
    manifest.output(&p);
    finish_posterior(
        &a.out,
        &res.merged_thetas(),
        Some(&res.merged),
        &mut manifest,
    )
}

#[derive(Debug, Serialize)]
struct MergeRecord<'a> {
    config: &'a MergeConfig,
    inputs: usize,
}

pub fn merge(a: &MergeArgs) -> Result<(), Failure> {
    let cfg = merge_config(&a.merge, MergeConfig::default(), a.seed)?;
    let mut blocks = Vec::with_capacity(a.draws.len());
    for p in &a.draws {
        let rows = read_draws_csv(p).map_err(data)?;
        if rows.is_empty() {
            return Err(Failure::Data(format!("{}: no draws", p.display())));
        }
        if rows
            .iter()
            .any(|r| !r.values().iter().all(|v| v.is_finite()))
        {
            return Err(Failure::Data(format!("{}: non-finite draw", p.display())));
        }
        blocks.push(rows.iter().map(DrawRow::values).collect::<Vec<_>>());
    }
    create_dir(&a.out)?;
    let mut manifest = Manifest::new(
        "merge",
        &MergeRecord {
            config: &cfg,
            inputs: blocks.len(),
        },
        a.seed,
    )?;
    for p in &a.draws {
        manifest.input(p)?;
    }
    let mut rng = stream(a.seed, Purpose::Merge, &[cfg.seed]);
    let merged = merge_blocks(&blocks, &cfg, &mut rng)?;
    let p = a.out.join("merged.csv");
    write_draws_csv(&p, &merged_rows(0, 0, &merged.draws))?;
    manifest.output(&p);
    let draws: Vec<Theta> = merged.draws.iter().map(|d| theta_of(d)).collect();
    finish_posterior(&a.out, &draws, Some(&merged), &mut manifest)
}

fn bench_spec(a: &BenchArgs) -> Result<ExperimentSpec, Failure> {
    let mut spec = match &a.spec {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(v) = a.m {
        spec.num_series = v;
    }
    if let Some(v) = a.t {
        spec.num_times = v;
    }
    if let Some(v) = a.reps {
        spec.reps = v;
    }
    if let Some(v) = a.replicas {
        spec.replicas = v;
    }
    if let Some(v) = a.n_max {
        spec.tuning.n_max = v;
        spec.tuning.n_min = spec.tuning.n_min.min(v);
    }
    if let Some(v) = a.particles {
        spec.particles = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.workers {
        spec.workers = v;
    }
    if !a.algorithms.is_empty() {
        spec.algorithms = a
            .algorithms
            .iter()
            .map(|s| s.trim().parse::<Algorithm>())
            .collect::<Result<_, _>>()?;
    }
    if !a.grid.is_empty() {
        let (mut js, mut ks) = (None, None);
        for axis in &a.grid {
            let (name, values) = parse_grid_axis(axis)?;
            match name.as_str() {
                "J" | "j" => js = Some(values),
                "K" | "k" => ks = Some(values),
                other => {
                    return Err(config_err(format!(
                        "unknown grid axis `{other}`; use J or K"
                    )))
                }
            }
        }
        let current_j: Vec<usize> = spec.grid.iter().map(|c| c.0).collect();
        let current_k: Vec<usize> = spec.grid.iter().map(|c| c.1).collect();
        let js = js.unwrap_or_else(|| dedup(current_j));
        let ks = ks.unwrap_or_else(|| dedup(current_k));
        spec.grid = js
            .iter()
            .flat_map(|&j| ks.iter().map(move |&k| (j, k)))
            .collect();
    }
    spec.validate()?;
    if a.timing.contains(&0) {
        return Err(config_err("--timing worker counts must be at least 1"));
    }
    Ok(spec)
}

fn dedup(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

pub fn bench(a: &BenchArgs) -> Result<(), Failure> {
    let spec = bench_spec(a)?;
    create_dir(&a.out)?;
    let mut manifest = Manifest::new("bench", &spec, spec.seed)?;
    let report = run_experiment(&spec)?;

    let p = a.out.join("mse.csv");
    fs::write(&p, report.table.to_csv()?)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    manifest.output(&p);
    let text = report.table.to_text();
    let p = a.out.join("mse.txt");
    fs::write(&p, &text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    manifest.output(&p);
    let p = a.out.join("n_t.csv");
    let mut body = String::from("J,K,n_t\n");
    for (j, k, ns) in &report.n_t {
        for n in ns {
            body += &format!("{j},{k},{n}\n");
        }
    }
    fs::write(&p, body).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    manifest.output(&p);

    if !a.timing.is_empty() {
        let sim = simulate_panel(
            &spec.truth,
            spec.num_series,
            spec.num_times,
            spec.x0,
            spec.burnin,
            spec.seed,
        )?;
        let (j, k) = spec.grid[0];
        let rows = timing_harness(&sim.panel, &spec.run_config(j, k, 0), &a.timing)?;
        let p = a.out.join("timing.csv");
        let mut body = String::from("workers,seconds,speedup,fingerprint\n");
        for r in &rows {
            body += &format!(
                "{},{:.3},{:.3},{:016x}\n",
                r.workers, r.seconds, r.speedup, r.fingerprint
            );
        }
        fs::write(&p, body).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        manifest.output(&p);
    }
    manifest.write(&a.out.join("manifest.json"))?;
    print!("{text}");
    Ok(())
}
