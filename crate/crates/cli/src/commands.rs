use std::path::{Path, PathBuf};

use clap::ValueEnum;
use precoding_gnn::checkpoint;
use precoding_gnn::dataset::ChannelDataset;
use precoding_gnn::gnn::{Arch, ArchSpec};
use precoding_gnn::metrics::{
    constraint_satisfaction_ratio, ee, flop_count, se_ratio_multicell, summarize, write_json_lines, FlopArch,
    MetricsRecord,
};
use precoding_gnn::scenario::{sample_channel, sample_variable_users, MultiCellChannel};
use precoding_gnn::train::{train_ee, train_se, PowerModel, TrainConfig, TrainHistory, TrainOutcome, TrainSet};
use precoding_gnn::wmmse::sum_rate_multicell;
use precoding_gnn::{Matrix, MultiCell, Real};
use serde::Serialize;

use crate::config::{ArchName, Config, LossName, OracleName, Precision};
use crate::error::{usage, CliError, CliResult};
use crate::manifest::Manifest;
use crate::oracle::wmmse_cached;
use crate::policy::Policy;

pub const DATASET_FILE: &str = "dataset.pgnn";
pub const CHECKPOINT_FILE: &str = "checkpoint.pgnp";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn prepare_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))
}

pub fn gen(cfg: &Config, out: &Path) -> CliResult<()> {
    if cfg.scenario.user_distribution.is_some() {
        return Err(usage("the dataset format stores a fixed user count; drop scenario.user_distribution"));
    }
    prepare_out(out)?;
    let mut manifest = Manifest::new("gen", cfg.scenario.seed, cfg);
    let data = sample_channel(&cfg.scenario_config(), cfg.scenario.samples)?;
    let path = out.join(DATASET_FILE);
    data.write(&path)?;
    manifest.artifact("dataset", &path);
    manifest.note("samples", data.samples());
    manifest.finish(out, "ok")?;
    println!("{}", path.display());
    Ok(())
}

/// Training channels: the configured dataset file, or fresh draws from the
/// scenario (with per-sample user counts when a distribution is set).
fn training_channels(cfg: &Config) -> CliResult<Vec<MultiCell>> {
    if let Some(path) = &cfg.train.dataset {
        return Ok(ChannelDataset::read(path)?.multicell_channels());
    }
    let s = &cfg.scenario;
    if let Some(dist) = &s.user_distribution {
        let hs = sample_variable_users::<f64>(s.antennas, dist, s.samples, s.seed)?;
        return Ok(hs.into_iter().map(MultiCellChannel::single).collect());
    }
    Ok(sample_channel(&cfg.scenario_config(), s.samples)?.multicell_channels())
}

fn learned_arch(cfg: &Config) -> CliResult<(Arch, ArchSpec)> {
    let name = cfg.arch.kind.ok_or_else(|| usage("no architecture: pass --arch or set arch.kind"))?;
    let arch = name.learned().ok_or_else(|| usage(format!("{} has no trainable parameters", name.label())))?;
    if arch == Arch::ModelMulticell && cfg.loss() == LossName::Ee {
        return Err(usage("the energy-efficiency loss is defined for single-cell architectures"));
    }
    Ok((arch, cfg.arch_spec(arch)?))
}

fn fit_typed<T: Real>(
    channels: &[MultiCell],
    p_max: f64,
    sigma2: f64,
    spec: &ArchSpec,
    tc: &TrainConfig,
) -> precoding_gnn::Result<(Policy, TrainHistory)> {
    let hs: Vec<MultiCellChannel<T>> = channels.iter().map(|h| h.cast()).collect();
    let data = TrainSet::new(hs, T::lit(p_max), T::lit(sigma2))?;
    let TrainOutcome { params, adapter, history } =
        if tc.loss == precoding_gnn::train::LossKind::EeLagrangian { train_ee(&data, spec, tc, None)? } else { train_se(&data, spec, tc, None)? };
    Ok((Policy::Learned { params: params.cast(), adapter: adapter.map(|a| a.cast()) }, history))
}

/// Trains `spec` on `channels`; checkpoints every epoch when `checkpoint` is set.
fn fit(
    cfg: &Config,
    spec: &ArchSpec,
    channels: &[MultiCell],
    checkpoint: Option<PathBuf>,
) -> CliResult<(Policy, TrainHistory)> {
    if channels.is_empty() {
        return Err(usage("no training samples"));
    }
    if spec.arch != Arch::ModelMulticell && channels.iter().any(|h| h.cells() != 1) {
        return Err(usage(format!("{:?} trains on single-cell channels", spec.arch)));
    }
    let (p_max, sigma2) = cfg.scenario_config().power();
    let tc = TrainConfig { checkpoint, ..cfg.train_config() };
    tc.validate()?;
    let result = match cfg.train.precision {
        Precision::F64 => fit_typed::<f64>(channels, p_max, sigma2, spec, &tc),
        Precision::F32 => fit_typed::<f32>(channels, p_max, sigma2, spec, &tc),
    };
    Ok(result?)
}

pub fn train(cfg: &Config, out: &Path) -> CliResult<()> {
    let (_, spec) = learned_arch(cfg)?;
    let channels = training_channels(cfg)?;
    prepare_out(out)?;
    let mut manifest = Manifest::new("train", cfg.train.seed, cfg);
    let ckpt = out.join(CHECKPOINT_FILE);
    match fit(cfg, &spec, &channels, Some(ckpt.clone())) {
        Ok((_, history)) => {
            let hist = out.join(HISTORY_FILE);
            std::fs::write(&hist, history.to_csv())?;
            manifest.artifact("checkpoint", &ckpt);
            manifest.artifact("checkpoint_meta", &precoding_gnn::train::meta_path(&ckpt));
            manifest.artifact("history", &hist);
            if let Some(last) = history.epochs.last() {
                manifest.note("final_loss", last.loss);
            }
            manifest.finish(out, "ok")?;
            println!("{}", ckpt.display());
            Ok(())
        }
        Err(CliError::Numeric(msg)) => {
            let kept = ckpt.exists();
            if kept {
                manifest.artifact("checkpoint", &ckpt);
            }
            manifest.note("error", &msg);
            manifest.finish(out, "numeric-failure")?;
            let tail = if kept { format!("; last good checkpoint kept at {}", ckpt.display()) } else { String::new() };
            Err(CliError::Numeric(format!("{msg}{tail}")))
        }
        Err(e) => Err(e),
    }
}

/// Policy named by the configuration; learned policies come from the checkpoint.
fn load_policy(cfg: &Config) -> CliResult<(Policy, ArchName)> {
    let kind = cfg.arch.kind;
    if let Some(policy) = kind.and_then(|k| Policy::baseline(k, cfg.arch.tgnn_iterations)) {
        return Ok((policy, kind.unwrap()));
    }
    let path = cfg.eval.checkpoint.as_ref().ok_or_else(|| usage("learned architectures need eval.checkpoint"))?;
    let ck = checkpoint::load::<f64>(path)?;
    let found = ArchName::from_arch(ck.params.arch());
    if let Some(k) = kind {
        if k != found {
            return Err(usage(format!("checkpoint holds a {} network, --arch asked for {}", found.label(), k.label())));
        }
    }
    Ok((Policy::Learned { params: ck.params, adapter: ck.adapter }, found))
}

fn test_dataset(cfg: &Config) -> CliResult<ChannelDataset> {
    let data = match &cfg.eval.dataset {
        Some(path) => ChannelDataset::read(path)?,
        None => {
            let sc = precoding_gnn::scenario::ScenarioConfig { seed: cfg.eval.seed, ..cfg.scenario_config() };
            sample_channel(&sc, cfg.eval.samples)?
        }
    };
    if data.samples() == 0 {
        return Err(usage("evaluation needs at least one sample"));
    }
    Ok(data)
}

/// Metrics of `policy` on `data`; EE and constraint satisfaction are
/// reported for single-cell systems.
fn evaluate(
    policy: &Policy,
    label: &str,
    data: &ChannelDataset,
    p_max: f64,
    sigma2: f64,
    r_min: f64,
    oracle: Option<&[Vec<Matrix>]>,
) -> CliResult<MetricsRecord> {
    let start = std::time::Instant::now();
    let dims = data.dims();
    policy.check_cells(dims.cells)?;
    let hs: Vec<MultiCell> = data.multicell_channels();
    let vs = policy.precode(&hs, p_max, sigma2)?;
    let mut rec = if dims.cells == 1 {
        let h1: Vec<Matrix> = hs.iter().map(|h| h.block(0, 0).clone()).collect();
        let v1: Vec<Matrix> = vs.iter().map(|v| v[0].clone()).collect();
        let o1: Option<Vec<Matrix>> = oracle.map(|o| o.iter().map(|v| v[0].clone()).collect());
        let mut rec = summarize(&h1, &v1, o1.as_deref(), sigma2, label)?;
        let power = PowerModel::default();
        let mean_ee = |vs: &[Matrix]| -> CliResult<f64> {
            let total = h1.iter().zip(vs).map(|(h, v)| ee(h, v, &power, sigma2)).sum::<precoding_gnn::Result<f64>>()?;
            Ok(total / h1.len() as f64)
        };
        let learned_ee = mean_ee(&v1)?;
        rec.ee = Some(learned_ee);
        if let Some(o) = &o1 {
            rec.ee_ratio = Some(100.0 * learned_ee / mean_ee(o)?);
        }
        rec.csr = Some(constraint_satisfaction_ratio(&h1, &v1, r_min, sigma2)?);
        rec
    } else {
        let mut total = 0.0;
        let mut per_user = vec![0.0; dims.cells * dims.users];
        for (h, v) in hs.iter().zip(&vs) {
            let r = sum_rate_multicell(h, v, sigma2)?;
            total += r.total;
            per_user.iter_mut().zip(&r.per_user).for_each(|(a, b)| *a += b);
        }
        let count = hs.len() as f64;
        per_user.iter_mut().for_each(|x| *x /= count);
        MetricsRecord {
            scenario: format!("M{}N{}K{}", dims.cells, dims.antennas, dims.users),
            arch: label.to_string(),
            antennas: dims.antennas,
            users: dims.users,
            samples: hs.len(),
            sum_rate: total / count,
            se_ratio: oracle.map(|o| se_ratio_multicell(&hs, &vs, o, sigma2)).transpose()?,
            ee: None,
            ee_ratio: None,
            csr: None,
            per_user_rates: per_user,
            correlation_min: None,
            correlation_median: None,
            flops: None,
            wall_clock: 0.0,
        }
    };
    rec.flops = policy.flops(dims.antennas, dims.users);
    rec.wall_clock = start.elapsed().as_secs_f64();
    Ok(rec)
}

fn cache_dir(cfg: &Config, out: &Path) -> PathBuf {
    cfg.eval.cache_dir.clone().unwrap_or_else(|| out.join("oracle-cache"))
}

fn oracle_for(
    cfg: &Config,
    out: &Path,
    data: &ChannelDataset,
    p_max: f64,
    sigma2: f64,
    manifest: &mut Manifest,
) -> CliResult<Option<Vec<Vec<Matrix>>>> {
    if cfg.eval.oracle == OracleName::None {
        return Ok(None);
    }
    let sol = wmmse_cached(data, p_max, sigma2, &cfg.eval.wmmse, &cache_dir(cfg, out))?;
    manifest.note("oracle_cache", if sol.cached { "hit" } else { "miss" });
    manifest.artifact("oracle", &sol.path);
    Ok(Some(sol.precoders))
}

pub fn eval(cfg: &Config, out: &Path) -> CliResult<()> {
    let (policy, name) = load_policy(cfg)?;
    let data = test_dataset(cfg)?;
    policy.check_cells(data.dims().cells)?;
    prepare_out(out)?;
    let mut manifest = Manifest::new("eval", cfg.eval.seed, cfg);
    let (p_max, sigma2) = cfg.scenario_config().power();
    let oracle = oracle_for(cfg, out, &data, p_max, sigma2, &mut manifest)?;
    let rec = evaluate(&policy, name.label(), &data, p_max, sigma2, cfg.train.r_min, oracle.as_deref())?;
    let path = out.join(METRICS_FILE);
    write_json_lines(std::fs::File::create(&path)?, std::slice::from_ref(&rec))?;
    if let Some(d) = &cfg.eval.dataset {
        manifest.artifact("dataset", d);
    }
    if let Some(c) = &cfg.eval.checkpoint {
        if policy_is_learned(&policy) {
            manifest.artifact("checkpoint", c);
        }
    }
    manifest.artifact("metrics", &path);
    manifest.finish(out, "ok")?;
    println!("{}", rec.to_json_line());
    Ok(())
}

fn policy_is_learned(p: &Policy) -> bool {
    matches!(p, Policy::Learned { .. })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Snr,
    Users,
    Samples,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    kind: &'static str,
    value: f64,
    arch: String,
    seeds: usize,
    cells: usize,
    antennas: usize,
    users: usize,
    train_samples: usize,
    test_samples: usize,
    snr_db: Option<f64>,
    sum_rate: f64,
    se_ratio: Option<f64>,
    se_ratio_std: Option<f64>,
    ee: Option<f64>,
    csr: Option<f64>,
    flops: Option<u128>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn mean_of(recs: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> Option<f64>) -> Option<f64> {
    let xs: Option<Vec<f64>> = recs.iter().map(f).collect();
    xs.map(|x| mean_std(&x).0)
}

/// One row per grid point, averaging `eval.seeds` independently trained
/// policies (closed-form policies are evaluated once per seed as well).
pub fn sweep(cfg: &Config, kind: SweepKind, out: &Path) -> CliResult<()> {
    let name = cfg.arch.kind.ok_or_else(|| usage("no architecture: pass --arch or set arch.kind"))?;
    let learned = name.learned().map(|_| learned_arch(cfg)).transpose()?;
    let grid: Vec<f64> = match kind {
        SweepKind::Snr => cfg.eval.snr_grid.clone(),
        SweepKind::Users => cfg.eval.users_grid.iter().map(|&u| u as f64).collect(),
        SweepKind::Samples => cfg.eval.samples_grid.iter().map(|&s| s as f64).collect(),
    };
    if grid.is_empty() {
        return Err(usage("empty sweep grid"));
    }
    prepare_out(out)?;
    let mut manifest = Manifest::new("sweep", cfg.train.seed, cfg);
    let seeds: Vec<u64> = (0..cfg.eval.seeds as u64).map(|i| cfg.train.seed.wrapping_add(i)).collect();
    let train_policy = |c: &Config, seed: u64| -> CliResult<Policy> {
        let (_, spec) = learned.as_ref().expect("learned architecture");
        let mut c = c.clone();
        c.train.seed = seed;
        eprintln!("training {} seed {seed} at {} samples", name.label(), c.scenario.samples);
        Ok(fit(&c, spec, &training_channels(&c)?, None)?.0)
    };
    // Users sweeps evaluate one trained policy per seed at every K.
    let shared: Option<Vec<Policy>> = match (kind, &learned) {
        (SweepKind::Users, Some(_)) => Some(seeds.iter().map(|&s| train_policy(cfg, s)).collect::<CliResult<_>>()?),
        _ => None,
    };
    let mut rows = Vec::new();
    let mut hits = 0usize;
    for &g in &grid {
        let mut point = cfg.clone();
        match kind {
            SweepKind::Snr => point.scenario.snr_db = Some(g),
            SweepKind::Users => point.scenario.users = g as usize,
            SweepKind::Samples => point.scenario.samples = g as usize,
        }
        point.validate()?;
        let test_cfg = match kind {
            SweepKind::Samples => cfg,
            _ => &point,
        };
        let mut test_point = test_cfg.clone();
        test_point.eval.dataset = None;
        let data = test_dataset(&test_point)?;
        let (p_max, sigma2) = point.scenario_config().power();
        let oracle = oracle_for(cfg, out, &data, p_max, sigma2, &mut manifest)?;
        hits += (manifest.notes.get("oracle_cache").map(String::as_str) == Some("hit")) as usize;
        let mut recs = Vec::new();
        for (i, &seed) in seeds.iter().enumerate() {
            let fresh;
            let policy = match (&shared, &learned) {
                (Some(ps), _) => &ps[i],
                (None, Some(_)) => {
                    fresh = train_policy(&point, seed)?;
                    &fresh
                }
                (None, None) => {
                    fresh = Policy::baseline(name, cfg.arch.tgnn_iterations).expect("closed-form policy");
                    &fresh
                }
            };
            recs.push(evaluate(policy, name.label(), &data, p_max, sigma2, cfg.train.r_min, oracle.as_deref())?);
        }
        let ratios: Option<Vec<f64>> = recs.iter().map(|r| r.se_ratio).collect();
        let dims = data.dims();
        rows.push(SweepRow {
            kind: match kind {
                SweepKind::Snr => "snr",
                SweepKind::Users => "users",
                SweepKind::Samples => "samples",
            },
            value: g,
            arch: name.label().to_string(),
            seeds: seeds.len(),
            cells: dims.cells,
            antennas: dims.antennas,
            users: dims.users,
            train_samples: if learned.is_some() { point.scenario.samples } else { 0 },
            test_samples: data.samples(),
            snr_db: point.scenario.snr_db,
            sum_rate: mean_std(&recs.iter().map(|r| r.sum_rate).collect::<Vec<_>>()).0,
            se_ratio: ratios.as_ref().map(|r| mean_std(r).0),
            se_ratio_std: ratios.as_ref().map(|r| mean_std(r).1),
            ee: mean_of(&recs, |r| r.ee),
            csr: mean_of(&recs, |r| r.csr),
            flops: recs[0].flops,
        });
    }
    let path = out.join(format!("sweep-{}.csv", rows[0].kind));
    let mut w = csv::Writer::from_path(&path).map_err(|e| usage(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| usage(e.to_string()))?;
    }
    w.flush()?;
    manifest.notes.remove("oracle_cache");
    manifest.note("oracle_cache_hits", hits);
    manifest.notes.remove("oracle");
    manifest.artifacts.remove("oracle");
    manifest.artifact("sweep", &path);
    manifest.finish(out, "ok")?;
    println!("{}", path.display());
    Ok(())
}

/// Closed-form forward FLOPs of a Vanilla- or Model-GNN.
pub fn flops(arch: ArchName, n: usize, k: usize, widths: Option<Vec<usize>>) -> CliResult<u128> {
    let (fa, default) = match arch {
        ArchName::Vanilla => (FlopArch::Vanilla, ArchSpec::vanilla_default()),
        ArchName::Model => (FlopArch::Model, ArchSpec::model_se_default()),
        other => return Err(usage(format!("FLOP formulas exist for vanilla and model, not {}", other.label()))),
    };
    let widths = widths.unwrap_or(default.widths);
    Ok(flop_count(fa, n, k, &widths)?)
}
