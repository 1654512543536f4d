//! Subcommand implementations. Each writes its artifacts into the run's
//! output directory and returns a summary for the caller to print.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use ws3_core::layers::checkpoint::{load_checkpoint, save_checkpoint};
use ws3_core::layers::conv::ConvEngine;
use ws3_core::layers::network::{build_network, ConvProfile, Mode, Network, NetworkSpec, ParamCount, Preset};
use ws3_core::pruning::{
    density_csv, is_noop_target, iterative_prune, kernel_density_report, structural_zaxis_prune, PruneLog,
    PruneLogRow, PruneSchedule, PruneTrainer, Scope,
};
use ws3_core::training::data::{gen_synthetic_scene, Scene, SCENE_FEATURES};
use ws3_core::training::metrics::SegMetrics;
use ws3_core::training::trainer::{train_log_csv, SyntheticTrainer};
use ws3_core::voxset::Voxset;
use ws3_core::ws3::{bench_layer, BenchConfig, BenchReport};

use crate::config::{seed_range, DatasetConfig, RunConfig};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "model.wsck";
pub const PRUNED_CHECKPOINT_FILE: &str = "pruned.wsck";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRUNE_LOG_FILE: &str = "prune_log.csv";
pub const DENSITY_FILE: &str = "density.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const BENCH_NETWORK_FILE: &str = "bench_network.csv";
pub const LAYERS_FILE: &str = "layers.csv";

/// Per-layer whole-network timing CSV header.
pub const BENCH_NETWORK_HEADER: &str = "layer,pairs,dense_ms,ws3_ms,speedup,dense_macs,ws3_macs";
pub const LAYERS_HEADER: &str = "layer,prunable,numel,remaining,remaining_fraction";

/// Training and evaluation scenes with their shared dimensions.
pub struct Dataset {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
    pub in_channels: usize,
}

fn read_voxset(path: &Path, num_classes: usize, voxel_size: f64) -> CliResult<Scene> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let v = Voxset::read(BufReader::new(f))?;
    Ok(Scene::from_voxset(&v, num_classes, voxel_size)?)
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { train_seeds, eval_seeds, scene } => {
            let gen = |r: [u64; 2]| -> CliResult<Vec<Scene>> {
                let seeds: Vec<u64> = seed_range(r).collect();
                Ok(seeds.par_iter().map(|&s| gen_synthetic_scene(s, scene)).collect::<Result<_, _>>()?)
            };
            Ok(Dataset { train: gen(*train_seeds)?, eval: gen(*eval_seeds)?, in_channels: SCENE_FEATURES })
        }
        DatasetConfig::Voxset { train, eval, num_classes, voxel_size } => {
            let load = |ps: &[PathBuf]| -> CliResult<Vec<Scene>> {
                ps.iter().map(|p| read_voxset(p, *num_classes, *voxel_size)).collect()
            };
            let train = load(train)?;
            let eval = load(eval)?;
            let in_channels = train[0].input.num_features();
            if let Some(s) = train.iter().chain(&eval).find(|s| s.input.num_features() != in_channels) {
                return Err(CliError::Usage(format!(
                    "voxset files disagree on feature count: {} vs {in_channels}",
                    s.input.num_features()
                )));
            }
            Ok(Dataset { train, eval, in_channels })
        }
    }
}

fn trainer_for(cfg: &RunConfig, data: Dataset) -> CliResult<SyntheticTrainer> {
    let mut t = SyntheticTrainer::from_scenes(cfg.trainer.clone(), cfg.task, data.train, data.eval)?;
    if let Some(lr) = cfg.prune.fine_tune_lr {
        t.fine_tune_lr = lr;
    }
    Ok(t)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn save(net: &Network, path: &Path) -> CliResult<()> {
    save_checkpoint(net, path).map_err(|e| match e {
        ws3_core::Error::Io(io) => CliError::io(path, io),
        e => e.into(),
    })
}

/// Loads a checkpoint, reporting a missing file as a usage error.
pub fn open_checkpoint(path: &Path) -> CliResult<Network> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn check_dims(net: &Network, data: &Dataset) -> CliResult<()> {
    let spec = net.spec();
    if spec.in_channels != data.in_channels {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} input channels, dataset has {}",
            spec.in_channels, data.in_channels
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub final_loss: f64,
    pub metrics: SegMetrics,
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    ensure_dir(&cfg.output_dir)?;
    let data = load_dataset(cfg)?;
    let spec = cfg.network_spec(data.in_channels).map_err(CliError::Usage)?;
    let mut net = build_network(&spec)?;
    let mut trainer = trainer_for(cfg, data)?;
    info!("training {} for {} iterations", spec.name, cfg.trainer.iterations);
    let rows = trainer.train(&mut net, cfg.trainer.iterations)?;
    let metrics = trainer.evaluate_metrics(&mut net)?;
    info!("final mIoU {:.4}, mAcc {:.4}", metrics.miou, metrics.macc);
    write_file(&cfg.output_dir.join(TRAIN_LOG_FILE), &train_log_csv(&rows))?;
    write_file(&cfg.output_dir.join(METRICS_FILE), &metrics.to_csv())?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    save(&net, &checkpoint)?;
    Ok(TrainSummary {
        checkpoint,
        final_loss: rows.last().map_or(f64::NAN, |r| r.loss),
        metrics,
    })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult<SegMetrics> {
    ensure_dir(&cfg.output_dir)?;
    let mut net = open_checkpoint(checkpoint)?;
    let data = load_dataset(cfg)?;
    check_dims(&net, &data)?;
    let mut trainer = trainer_for(cfg, data)?;
    let metrics = trainer.evaluate_metrics(&mut net)?;
    write_file(&cfg.output_dir.join(METRICS_FILE), &metrics.to_csv())?;
    Ok(metrics)
}

/// Expands `blockN` into that block's spatial convolutions; other names pass through.
pub fn expand_layer_names(net: &Network, names: &[String]) -> Vec<String> {
    names
        .iter()
        .flat_map(|n| match n.strip_prefix("block").and_then(|b| b.parse::<usize>().ok()) {
            Some(b) => net.block_spatial_convs(b),
            None => vec![n.clone()],
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PruneSummary {
    pub checkpoint: PathBuf,
    /// Per-step fraction, when magnitude pruning ran.
    pub p: Option<f64>,
    pub log: PruneLog,
    pub counts: ParamCount,
    pub noop: bool,
}

pub fn cmd_prune(cfg: &RunConfig, checkpoint: &Path) -> CliResult<PruneSummary> {
    ensure_dir(&cfg.output_dir)?;
    let mut net = open_checkpoint(checkpoint)?;
    let crit = cfg.criterion().map_err(CliError::Usage)?;
    let structural = expand_layer_names(&net, &cfg.prune.structural);
    let data = load_dataset(cfg)?;
    check_dims(&net, &data)?;
    let mut trainer = trainer_for(cfg, data)?;
    let out = cfg.output_dir.join(PRUNED_CHECKPOINT_FILE);
    let mut summary = PruneSummary {
        checkpoint: out.clone(),
        p: None,
        log: PruneLog::default(),
        counts: net.param_count(),
        noop: false,
    };

    if !structural.is_empty() {
        let before = trainer.evaluate(&mut net)?;
        structural_zaxis_prune(&mut net, &structural)?;
        if cfg.prune.structural_iters > 0 {
            let lr = cfg.prune.structural_lr.unwrap_or(trainer.fine_tune_lr);
            let saved = std::mem::replace(&mut trainer.fine_tune_lr, lr);
            trainer.fine_tune(&mut net, cfg.prune.structural_iters)?;
            trainer.fine_tune_lr = saved;
        }
        let after = trainer.evaluate(&mut net)?;
        info!("z-axis pruning of {} layers: mIoU {before:.4} -> {after:.4}", structural.len());
        let rows = kernel_density_report(&net, Some(&structural))?;
        write_file(&cfg.output_dir.join(DENSITY_FILE), &density_csv(&rows))?;
        let (r, t) = ws3_core::pruning::prunable_counts(&net);
        for (step, metric) in [(0, before), (1, after)] {
            summary.log.rows.push(PruneLogRow {
                step,
                criterion: "zaxis".into(),
                scope: "structural".into(),
                p: 0.0,
                remaining_params: if step == 0 { summary.counts.prunable_remaining } else { r },
                remaining_fraction: if step == 0 {
                    summary.counts.remaining_fraction()
                } else {
                    r as f64 / t.max(1) as f64
                },
                metric,
            });
        }
    } else if is_noop_target(cfg.prune.target_rate) {
        summary.noop = true;
        let metric = trainer.evaluate(&mut net)?;
        summary.log.rows.push(PruneLogRow {
            step: 0,
            criterion: crit.to_string(),
            scope: match crit.scope {
                Scope::Global => "global".into(),
                Scope::Local => "local".into(),
            },
            p: 0.0,
            remaining_params: summary.counts.prunable_remaining,
            remaining_fraction: summary.counts.remaining_fraction(),
            metric,
        });
    } else {
        let sched = PruneSchedule::from_target(
            cfg.prune.target_rate,
            cfg.prune.steps,
            cfg.prune.i_prune,
            cfg.trainer.iterations,
        )?;
        info!(
            "{crit}: target {} over {} steps, per-step p = {:.6}",
            cfg.prune.target_rate, sched.n_prune, sched.p
        );
        summary.p = Some(sched.p);
        summary.log = iterative_prune(&mut net, &sched, crit, &mut trainer)?;
    }
    write_file(&cfg.output_dir.join(PRUNE_LOG_FILE), &summary.log.to_csv())?;
    summary.counts = net.param_count();
    save(&net, &out)?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub layers: Vec<BenchReport>,
    /// Whole-network per-layer rows plus a final `network` total row.
    pub network: Vec<NetworkBenchRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBenchRow {
    pub layer: String,
    pub pairs: usize,
    pub dense_ms: f64,
    pub ws3_ms: f64,
    pub dense_macs: usize,
    pub ws3_macs: usize,
}

impl NetworkBenchRow {
    pub fn speedup(&self) -> f64 {
        self.dense_ms / self.ws3_ms
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{},{}",
            self.layer,
            self.pairs,
            self.dense_ms,
            self.ws3_ms,
            self.speedup(),
            self.dense_macs,
            self.ws3_macs
        )
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median per-layer and total forward time of `engine` over `reps` runs after one warm-up.
fn profile_engine(net: &mut Network, scene: &Scene, engine: ConvEngine, reps: usize) -> CliResult<(Vec<ConvProfile>, f64)> {
    net.set_engine(engine)?;
    net.set_profiling(true);
    net.forward(&scene.input, Mode::Eval)?;
    net.take_profile();
    let mut runs: Vec<Vec<ConvProfile>> = Vec::with_capacity(reps);
    let mut totals = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = std::time::Instant::now();
        net.forward(&scene.input, Mode::Eval)?;
        totals.push(t0.elapsed().as_secs_f64() * 1e3);
        runs.push(net.take_profile());
    }
    net.set_profiling(false);
    let mut out = runs[0].clone();
    for (i, row) in out.iter_mut().enumerate() {
        let mut ms: Vec<f64> = runs.iter().map(|r| r[i].ms).collect();
        row.ms = median(&mut ms);
    }
    Ok((out, median(&mut totals)))
}

pub fn bench_network(net: &mut Network, scene: &Scene, reps: usize) -> CliResult<Vec<NetworkBenchRow>> {
    let (dense, dense_total) = profile_engine(net, scene, ConvEngine::Dense, reps)?;
    let (ws3, ws3_total) = profile_engine(net, scene, ConvEngine::Ws3, reps)?;
    net.set_engine(ConvEngine::Dense)?;
    let mut rows: Vec<NetworkBenchRow> = dense
        .iter()
        .zip(&ws3)
        .map(|(d, w)| NetworkBenchRow {
            layer: d.layer.clone(),
            pairs: d.pairs,
            dense_ms: d.ms,
            ws3_ms: w.ms,
            dense_macs: d.dense_macs,
            ws3_macs: w.ws3_macs,
        })
        .collect();
    let total = NetworkBenchRow {
        layer: "network".into(),
        pairs: rows.iter().map(|r| r.pairs).sum(),
        dense_ms: dense_total,
        ws3_ms: ws3_total,
        dense_macs: rows.iter().map(|r| r.dense_macs).sum(),
        ws3_macs: rows.iter().map(|r| r.ws3_macs).sum(),
    };
    rows.push(total);
    Ok(rows)
}

pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<BenchSummary> {
    ensure_dir(&cfg.output_dir)?;
    let b = &cfg.bench;
    let mut layers = Vec::new();
    for &c in &b.channels {
        for &s in &b.sparsities {
            let bc = BenchConfig {
                layer: format!("synthetic_c{c}_s{s}"),
                n_in: c,
                n_out: c,
                kernel_size: b.kernel_size,
                voxels: b.voxels,
                fill: b.fill,
                sparsity: s,
                reps: b.reps,
                seed: b.seed,
                ..Default::default()
            };
            let r = bench_layer(&bc)?;
            info!("{}: dense {:.3} ms, ws3 {:.3} ms, speedup {:.3}", r.layer, r.dense_ms, r.ws3_ms, r.speedup);
            layers.push(r);
        }
    }
    let mut csv = format!("{}\n", BenchReport::CSV_HEADER);
    layers.iter().for_each(|r| csv.push_str(&format!("{}\n", r.csv_row())));
    write_file(&cfg.output_dir.join(BENCH_FILE), &csv)?;

    let mut network = Vec::new();
    if let Some(path) = checkpoint {
        let mut net = open_checkpoint(path)?;
        let data = load_dataset(cfg)?;
        check_dims(&net, &data)?;
        let trainer = trainer_for(cfg, data)?;
        let scene = trainer.eval_scene().ok_or(CliError::Usage("bench needs evaluation scenes".into()))?;
        network = bench_network(&mut net, scene, b.reps)?;
        let mut csv = format!("{BENCH_NETWORK_HEADER}\n");
        network.iter().for_each(|r| csv.push_str(&format!("{}\n", r.csv_row())));
        write_file(&cfg.output_dir.join(BENCH_NETWORK_FILE), &csv)?;
    }
    Ok(BenchSummary { layers, network })
}

/// Parameter counts of a checkpoint, or of a fresh preset network.
pub fn cmd_count(checkpoint: Option<&Path>, preset: Option<(Preset, f64)>, num_classes: usize) -> CliResult<(String, ParamCount)> {
    let net = match (checkpoint, preset) {
        (Some(p), _) => open_checkpoint(p)?,
        (None, Some((preset, width))) => {
            build_network(&NetworkSpec::preset(preset).with_width(width).with_io(3, num_classes))?
        }
        (None, None) => return Err(CliError::Usage("count needs --checkpoint or --preset".into())),
    };
    Ok((net.spec().name.clone(), net.param_count()))
}

pub fn format_count(name: &str, c: &ParamCount) -> String {
    format!(
        "{name}\ntotal {}\nprunable {}\nprunable_remaining {}\nnon_prunable {}\nremaining_total {}\nremaining_fraction {:.6}\n",
        c.total,
        c.prunable_total,
        c.prunable_remaining,
        c.non_prunable,
        c.remaining_total(),
        c.remaining_fraction()
    )
}

/// Per-layer remaining-weight table and the kernel-offset density report.
pub fn cmd_report(cfg: &RunConfig, checkpoint: &Path, layers: &[String]) -> CliResult<ParamCount> {
    ensure_dir(&cfg.output_dir)?;
    let net = open_checkpoint(checkpoint)?;
    let mut csv = format!("{LAYERS_HEADER}\n");
    net.visit(&mut |l| {
        if let ws3_core::layers::network::LayerRef::Conv { conv, prunable } = l {
            let w = &conv.weights;
            csv.push_str(&format!(
                "{},{},{},{},{:.8}\n",
                conv.name,
                prunable,
                w.numel(),
                w.remaining(),
                w.remaining() as f64 / w.numel().max(1) as f64
            ));
        }
    });
    write_file(&cfg.output_dir.join(LAYERS_FILE), &csv)?;
    let names = expand_layer_names(&net, layers);
    let rows = kernel_density_report(&net, (!names.is_empty()).then_some(names.as_slice()))?;
    write_file(&cfg.output_dir.join(DENSITY_FILE), &density_csv(&rows))?;
    Ok(net.param_count())
}
