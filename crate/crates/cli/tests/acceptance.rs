//! Acceptance gate: runs every criterion in order and prints one PASS/FAIL
//! line each. Exits non-zero when any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use support::{conv_fixture, dense_grid_conv, max_fd_error, network_fd_check, rand_matrix, CONV_CASES};
use ws3_core::kernel_map::{total_pairs, CoordinateManager, KernelOffsets};
use ws3_core::layers::checkpoint::{checkpoint_bytes, parse_checkpoint};
use ws3_core::layers::conv::{sparse_conv_backward, sparse_conv_features, ConvWeights};
use ws3_core::layers::network::{build_network, Mode, Network, NetworkSpec, Preset};
use ws3_core::layers::norm::BatchNorm;
use ws3_core::matrix::Matrix;
use ws3_core::pruning::{
    iterative_prune, kernel_density_report, p_from_target, prunable_counts, prune_step, score_weights,
    structural_zaxis_prune, CriterionKind, PruneCriterion, PruneLog, PruneSchedule, PruneTrainer, Scope,
};
use ws3_core::sparse_tensor::SparseTensor;
use ws3_core::training::data::{SceneConfig, SCENE_FEATURES};
use ws3_core::training::loss::{loss_insseg, loss_semseg};
use ws3_core::training::sgd::TrainerConfig;
use ws3_core::training::trainer::{SyntheticTrainer, Task};
use ws3_core::ws3::{bench_layer, ws3_conv_features_with, BenchConfig, ExecMode, Ws3Kernel};

#[derive(Debug, Clone)]
struct Fail(String);

impl From<String> for Fail {
    fn from(s: String) -> Self {
        Fail(s)
    }
}

impl From<&str> for Fail {
    fn from(s: &str) -> Self {
        Fail(s.to_string())
    }
}

impl From<ws3_core::Error> for Fail {
    fn from(e: ws3_core::Error) -> Self {
        Fail(e.to_string())
    }
}

type Outcome = Result<String, Fail>;

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), Fail> {
    if ok {
        Ok(())
    } else {
        Err(Fail(msg()))
    }
}

fn clone_net(net: &Network) -> Network {
    parse_checkpoint(&checkpoint_bytes(net)).expect("checkpoint round trip")
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    for (preset, published) in [
        (Preset::Res16UNet14A, 8.02e6),
        (Preset::Res16UNet18A, 15.5e6),
        (Preset::Res16UNet34C, 37.9e6),
    ] {
        let net = build_network(&NetworkSpec::preset(preset))?;
        let total = net.param_count().total as f64;
        check(within(total, published, 0.02), || format!("{}: {total} vs {published}", preset.name()))?;
        if preset == Preset::Res16UNet34C {
            check(within(total, 37.85e6, 0.02), || format!("34C {total} vs 37.85M"))?;
        }
        parts.push(format!("{} {:.3}M", preset.name(), total / 1e6));
    }
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 1.0, || format!("runtime {secs:.2}s exceeds 1s"))?;
    Ok(format!("{} ({secs:.2}s)", parts.join(", ")))
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut net = build_network(&NetworkSpec::preset(Preset::Res16UNet34C))?;
    let scores = score_weights(&mut net, CriterionKind::L1, None)?;
    prune_step(&mut net, &scores, Scope::Global, 0.99)?;
    drop(scores);
    let c = net.param_count();
    let total = c.remaining_total() as f64;
    check(within(total, 0.396e6, 0.10), || format!("remaining {total} vs 0.396M"))?;
    Ok(format!(
        "remaining {:.4}M = prunable {} + never-pruned {} (BN affine and heads) vs 0.396M ({:.1}s)",
        total / 1e6,
        c.prunable_remaining,
        c.non_prunable,
        t0.elapsed().as_secs_f64()
    ))
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let cases = 100;
    for case in CONV_CASES {
        for _ in 0..cases {
            let grid = rng.gen_range(2..=8);
            let (n_in, n_out) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            let f = conv_fixture(&mut rng, case, grid, n_in, n_out);
            let got = sparse_conv_features(&f.x, &f.w, &f.km)?;
            let want = dense_grid_conv(&f.input, &f.x, &f.output, &f.w, case.2);
            let d = got.max_abs_diff(&want);
            check(d < 1e-10, || format!("{case:?}: diff {d:e}"))?;
            worst = worst.max(d);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("runtime {secs:.1}s"))?;
    Ok(format!("{cases} cases x 4 configurations, max abs diff {worst:.1e} ({secs:.2}s)"))
}

fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let run = |f: &support::ConvFixture| -> Result<(f64, Matrix, Matrix), Fail> {
        let kernel = Ws3Kernel::from_weights(&f.w)?;
        let dense = sparse_conv_features(&f.x, &f.w, &f.km)?;
        let (a, _) = ws3_conv_features_with(&f.x, &kernel, &f.km, ExecMode::Reference)?;
        let (b, _) = ws3_conv_features_with(&f.x, &kernel, &f.km, ExecMode::Fast)?;
        check(a.as_slice() == b.as_slice(), || "reference and fast modes differ".into())?;
        Ok((a.max_abs_diff(&dense), a, dense))
    };
    for i in 0..100 {
        let case = CONV_CASES[i % 4];
        let (n_in, n_out) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let grid = rng.gen_range(2..=8);
        let mut f = conv_fixture(&mut rng, case, grid, n_in, n_out);
        let rate: f64 = rng.gen_range(0.0..1.0);
        let mask: Vec<bool> = (0..f.w.numel()).map(|_| !rng.gen_bool(rate)).collect();
        f.w.set_mask(mask)?;
        let (d, _, _) = run(&f)?;
        check(d < 1e-10, || format!("case {i}: diff {d:e}"))?;
        worst = worst.max(d);
    }
    for case in CONV_CASES {
        let f = conv_fixture(&mut rng, case, 6, 6, 5);
        let (d, _, _) = run(&f)?;
        check(d < 1e-10, || format!("all-ones {case:?}: diff {d:e}"))?;
        let mut f = conv_fixture(&mut rng, case, 6, 6, 5);
        f.w.set_mask(vec![false; f.w.numel()])?;
        let (d, y, _) = run(&f)?;
        check(d == 0.0 && y.as_slice().iter().all(|&v| v == 0.0), || format!("all-zeros {case:?}"))?;
    }
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("runtime {secs:.1}s"))?;
    Ok(format!("100 random masks + all-ones/all-zeros, max abs diff {worst:.1e} ({secs:.2}s)"))
}

fn criterion_5() -> Outcome {
    let expected = [(0.9, 0.205672), (0.95, 0.258866), (0.99, 0.369043)];
    let base = build_network(&NetworkSpec::preset(Preset::Res16UNet14A).with_width(0.25).with_io(SCENE_FEATURES, 6))?;
    let n_layers = base.prunable_layers_len();
    let mut parts = Vec::new();
    for (target, p_ref) in expected {
        let p = p_from_target(target, 10)?;
        check((p - p_ref).abs() < 5e-7, || format!("p({target}) = {p:.7} vs {p_ref}"))?;
        let mut local_err = 0.0;
        for scope in [Scope::Global, Scope::Local] {
            let mut net = clone_net(&base);
            let (_, total) = prunable_counts(&net);
            for _ in 0..10 {
                let s = score_weights(&mut net, CriterionKind::L1, None)?;
                prune_step(&mut net, &s, scope, p)?;
            }
            let (remaining, _) = prunable_counts(&net);
            let ideal = (1.0 - p).powi(10) * total as f64;
            let err = (remaining as f64 - ideal).abs();
            match scope {
                Scope::Global => check(err <= n_layers as f64, || format!("{target} global: {remaining} vs {ideal:.1}"))?,
                Scope::Local => {
                    // per-layer floor keeps < 1 extra weight per layer per step, decaying by (1 − p) afterwards
                    let bound = n_layers as f64 * (1.0 - (1.0 - p).powi(10)) / p;
                    check(err <= bound, || format!("{target} local: {remaining} vs {ideal:.1} (bound {bound:.0})"))?;
                    local_err = err;
                }
            }
        }
        parts.push(format!("p({target})={p:.6} (local off by {local_err:.0})"));
    }
    Ok(format!(
        "{}; global remaining within ±{n_layers} weights; local uses per-layer floors, within the floor-compounding bound",
        parts.join(" ")
    ))
}

trait LayerCount {
    fn prunable_layers_len(&self) -> usize;
}

impl LayerCount for Network {
    fn prunable_layers_len(&self) -> usize {
        use ws3_core::pruning::PrunableModel;
        self.prunable_layers().len()
    }
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let dot = |a: &Matrix, b: &Matrix| -> f64 { a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum() };

    for case in CONV_CASES {
        let f = conv_fixture(&mut rng, case, 5, 3, 4);
        let coef = rand_matrix(f.output.len(), 4, &mut rng);
        let (gx, gw) = sparse_conv_backward(&coef, &f.x, &f.w, &f.km)?;
        let mut by_x = |v: &[f64]| dot(&sparse_conv_features(&Matrix::from_vec(f.x.rows(), 3, v.to_vec()).unwrap(), &f.w, &f.km).unwrap(), &coef);
        let idx: Vec<usize> = (0..f.x.as_slice().len()).collect();
        worst = worst.max(max_fd_error(&mut by_x, f.x.as_slice(), gx.as_slice(), &idx, H));
        let k = f.w.kernel_size();
        let mut by_w = |v: &[f64]| {
            let w = ConvWeights::from_values(k, 3, 4, v.to_vec()).unwrap();
            dot(&sparse_conv_features(&f.x, &w, &f.km).unwrap(), &coef)
        };
        let idx: Vec<usize> = (0..f.w.numel()).collect();
        worst = worst.max(max_fd_error(&mut by_w, f.w.values(), &gw, &idx, H));
    }
    check(worst < TOL, || format!("conv rel err {worst:e}"))?;

    let (n, c) = (9, 4);
    let x = rand_matrix(n, c, &mut rng);
    let coef = rand_matrix(n, c, &mut rng);
    let mut bn = BatchNorm::new("bn", c);
    bn.gamma.value = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    bn.beta.value = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let y = bn.forward(&x, true)?;
    let _ = y;
    let gx = bn.backward(&coef)?;
    let mut by_x = |v: &[f64]| dot(&bn.clone().forward(&Matrix::from_vec(n, c, v.to_vec()).unwrap(), true).unwrap(), &coef);
    let idx: Vec<usize> = (0..n * c).collect();
    let e = max_fd_error(&mut by_x, x.as_slice(), gx.as_slice(), &idx, H);
    let mut by_gamma = |v: &[f64]| {
        let mut b = bn.clone();
        b.gamma.value = v.to_vec();
        dot(&b.forward(&x, true).unwrap(), &coef)
    };
    let idx: Vec<usize> = (0..c).collect();
    let e = e.max(max_fd_error(&mut by_gamma, &bn.gamma.value.clone(), &bn.gamma.grad.clone(), &idx, H));
    check(e < TOL, || format!("batchnorm rel err {e:e}"))?;
    worst = worst.max(e);

    let logits = rand_matrix(12, 5, &mut rng);
    let labels: Vec<u32> = (0..12).map(|_| rng.gen_range(0..5)).collect();
    let (_, g) = loss_semseg(&logits, &labels)?;
    let mut f = |v: &[f64]| loss_semseg(&Matrix::from_vec(12, 5, v.to_vec()).unwrap(), &labels).unwrap().0;
    let idx: Vec<usize> = (0..60).collect();
    let e = max_fd_error(&mut f, logits.as_slice(), g.as_slice(), &idx, H);
    let pred = rand_matrix(12, 3, &mut rng);
    let target = rand_matrix(12, 3, &mut rng);
    let fg: Vec<bool> = (0..12).map(|i| i % 4 != 0).collect();
    let out = loss_insseg(&logits, &labels, &pred, &target, &fg)?;
    let gp = out.grad_offsets.ok_or("no offset gradient")?;
    let mut f = |v: &[f64]| loss_insseg(&logits, &labels, &Matrix::from_vec(12, 3, v.to_vec()).unwrap(), &target, &fg).unwrap().loss;
    let idx: Vec<usize> = (0..36).collect();
    let e = e.max(max_fd_error(&mut f, pred.as_slice(), gp.as_slice(), &idx, H));
    check(e < TOL, || format!("loss rel err {e:e}"))?;
    worst = worst.max(e);

    let spec = NetworkSpec::preset(Preset::Res16UNet14A).with_width(1.0 / 16.0).with_io(2, 3);
    let mut kinks = 0;
    let mut checked = 0;
    for offset_head in [false, true] {
        let mut net = build_network(&spec.clone().with_offset_head(offset_head))?;
        let coords = support::random_coords(&mut rng, 6, 0.35, 2);
        let feats = rand_matrix(coords.len(), 2, &mut rng);
        let input = SparseTensor::from_parts(coords, 1, feats)?;
        let labels: Vec<u32> = (0..input.len()).map(|_| rng.gen_range(0..3)).collect();
        let r = network_fd_check(&mut net, &input, &labels, &mut rng, 2);
        check(r.max_rel_err < TOL && r.kinks * 20 <= r.checked, || format!("network (offset head {offset_head}): {r:?}"))?;
        worst = worst.max(r.max_rel_err);
        kinks += r.kinks;
        checked += r.checked;
    }
    let secs = t0.elapsed().as_secs_f64();
    check(secs < 120.0, || format!("runtime {secs:.1}s"))?;
    Ok(format!(
        "conv, BN, both losses, tiny network ({checked} params, {kinks} kink-straddling skipped): max rel err {worst:.1e} ({secs:.1}s)"
    ))
}

/// Shared width-0.25 14A experiment: the dense network and its trainer.
struct Experiment {
    dense: Network,
    trainer: SyntheticTrainer,
    dense_miou: f64,
}

fn experiment_setup() -> Result<Experiment, Fail> {
    let scenes = SceneConfig::default();
    let spec = NetworkSpec::preset(Preset::Res16UNet14A).with_width(0.25).with_io(SCENE_FEATURES, scenes.num_classes);
    let cfg = TrainerConfig { iterations: 2000, ..TrainerConfig::default() };
    let mut trainer = SyntheticTrainer::new(cfg, &scenes, Task::Semseg, 0..1000, 100_000..100_016)?;
    let mut dense = build_network(&spec)?;
    trainer.train(&mut dense, 2000)?;
    let dense_miou = trainer.evaluate(&mut dense)?;
    Ok(Experiment { dense, trainer, dense_miou })
}

fn prune_run(exp: &mut Experiment, crit: PruneCriterion) -> Result<PruneLog, Fail> {
    let mut net = clone_net(&exp.dense);
    let sched = PruneSchedule::from_target(0.9, 10, 100, 2000)?;
    Ok(iterative_prune(&mut net, &sched, crit, &mut exp.trainer)?)
}

fn criterion_7(exp: &mut Experiment, train_secs: f64) -> Outcome {
    let t0 = Instant::now();
    let dense = exp.dense_miou;
    check(dense >= 0.90, || format!("dense mIoU {dense:.4} < 0.90"))?;
    let global = prune_run(exp, PruneCriterion::new(CriterionKind::L1, Scope::Global))?;
    let local = prune_run(exp, PruneCriterion::new(CriterionKind::L1, Scope::Local))?;
    println!("  global vs local L1 pruning (mIoU by remaining fraction):");
    println!("  step remaining  L1G     L1L");
    for (g, l) in global.rows.iter().zip(&local.rows) {
        println!("  {:>4} {:>9.4} {:>7.4} {:>7.4}", g.step, g.remaining_fraction, g.metric, l.metric);
    }
    let g = global.final_metric().ok_or("empty prune log")?;
    let l = local.final_metric().ok_or("empty prune log")?;
    check(g >= 0.95 * dense, || format!("L1G 90% mIoU {g:.4} < 0.95 x {dense:.4}"))?;
    let secs = train_secs + t0.elapsed().as_secs_f64();
    check(secs < 1800.0, || format!("runtime {secs:.0}s"))?;
    Ok(format!("dense mIoU {dense:.4}; L1G 90% {g:.4} ({:.3}x); L1L 90% {l:.4} ({secs:.0}s)", g / dense))
}

fn criterion_8(exp: &mut Experiment) -> Outcome {
    let t0 = Instant::now();
    let mut net = clone_net(&exp.dense);
    let layers: Vec<String> = [7, 8].iter().flat_map(|&b| net.block_spatial_convs(b)).collect();
    structural_zaxis_prune(&mut net, &layers)?;
    let density = kernel_density_report(&net, Some(&layers))?;
    for name in &layers {
        let live: Vec<[i32; 3]> = density.iter().filter(|r| &r.layer == name && r.density > 0.0).map(|r| r.offset).collect();
        check(live.len() == 3 && live.iter().all(|o| o[0] == 0 && o[1] == 0), || format!("{name}: live offsets {live:?}"))?;
    }

    let scene = exp.trainer.eval_scene().ok_or("no eval scene")?.clone();
    net.forward(&scene.input, Mode::Eval)?;
    let coords = net
        .last_trace()
        .iter()
        .find(|(n, _)| n == "block8")
        .map(|(_, c)| Arc::clone(c))
        .ok_or("block8 missing from trace")?;
    let mut mgr = CoordinateManager::new(Arc::clone(&coords));
    let km = mgr.kernel_map(&coords, &coords, 3, 1, false)?;
    let offsets = KernelOffsets::new(3)?;
    let z_idx: Vec<usize> = (0..offsets.volume()).filter(|&i| offsets.offsets()[i][..2] == [0, 0]).collect();
    let z_pairs: usize = z_idx.iter().map(|&i| km.pairs[i].len()).sum();
    for name in net.block_spatial_convs(8) {
        let w = &net.conv(&name).ok_or("missing conv")?.weights;
        let kernel = Ws3Kernel::from_weights(w)?;
        let x = rand_matrix(coords.len(), w.n_in(), &mut ChaCha8Rng::seed_from_u64(8));
        let (_, stats) = ws3_conv_features_with(&x, &kernel, &km, ExecMode::Reference)?;
        let expect_macs: usize = z_idx.iter().map(|&i| km.pairs[i].len() * kernel.csr[i].nnz()).sum();
        check(stats.offsets_skipped >= 24 && stats.offsets_executed <= 3, || format!("{name}: {stats:?}"))?;
        check(stats.pairs_processed == z_pairs && stats.macs == expect_macs, || {
            format!("{name}: pairs {} vs z-column {z_pairs} of {}", stats.pairs_processed, total_pairs(&km))
        })?;
    }

    let no_ft = exp.trainer.evaluate(&mut net)?;
    let saved = std::mem::replace(&mut exp.trainer.fine_tune_lr, 0.05);
    exp.trainer.fine_tune(&mut net, 500)?;
    exp.trainer.fine_tune_lr = saved;
    let after = exp.trainer.evaluate(&mut net)?;
    let delta = (after - exp.dense_miou).abs();
    check(delta < 0.02, || format!("mIoU change {delta:.4} (dense {:.4}, z-axis {after:.4})", exp.dense_miou))?;
    Ok(format!(
        "{} layers keep 3/27 offsets; WS3 pairs = z-column share {z_pairs}/{}; mIoU {:.4} -> {after:.4} (|change| {delta:.4}, {no_ft:.4} before fine-tuning) ({:.0}s)",
        layers.len(),
        total_pairs(&km),
        exp.dense_miou,
        t0.elapsed().as_secs_f64()
    ))
}

fn criterion_9() -> Outcome {
    let cfg = BenchConfig {
        layer: "c256".into(),
        n_in: 256,
        n_out: 256,
        voxels: 10_000,
        sparsity: 0.99,
        reps: 5,
        ..BenchConfig::default()
    };
    let r = bench_layer(&cfg)?;
    check(r.max_abs_diff < 1e-9, || format!("paths disagree by {:e}", r.max_abs_diff))?;
    check(r.speedup > 1.0, || format!("speedup {:.3} (dense {:.2} ms, ws3 {:.2} ms)", r.speedup, r.dense_ms, r.ws3_ms))?;
    Ok(format!(
        "256x256, {} voxels, 99% sparse: dense {:.2} ms, WS3 {:.2} ms, speedup {:.2}x on this host",
        r.occupancy, r.dense_ms, r.ws3_ms, r.speedup
    ))
}

const DETERMINISM_CONFIG: &str = r#"
output_dir = "out"
[model]
width = 0.125
[trainer]
iterations = 40
batch_size = 2
[prune]
criterion = "FGG"
target_rate = 0.9
steps = 3
i_prune = 5
[dataset]
source = "synthetic"
train_seeds = [0, 8]
eval_seeds = [100, 102]
[dataset.scene]
grid = 16
min_room = 12
room_height = 6
max_box = 4
max_boxes = 2
"#;

fn cli_run(dir: &Path, args: &[&str]) -> Result<(), Fail> {
    let o = Command::new(env!("CARGO_BIN_EXE_ws3"))
        .current_dir(dir)
        .args(["--config", "run.toml", "--threads", "1"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(o.status.success(), || format!("ws3 {args:?}: {}", String::from_utf8_lossy(&o.stderr)))
}

fn criterion_10() -> Outcome {
    let files = ["model.wsck", "train_log.csv", "metrics.csv", "pruned.wsck", "prune_log.csv"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        std::fs::write(dir.path().join("run.toml"), DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
        cli_run(dir.path(), &["train"])?;
        cli_run(dir.path(), &["prune"])?;
        let blobs: Vec<Vec<u8>> = files
            .iter()
            .map(|f| std::fs::read(dir.path().join("out").join(f)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        runs.push(blobs);
    }
    for (i, f) in files.iter().enumerate() {
        check(runs[0][i] == runs[1][i], || format!("{f} differs between runs"))?;
    }
    Ok(format!("train + FGG prune twice with --threads 1: {} files byte-identical", files.len()))
}

fn report(id: usize, title: &str, outcome: Outcome, failures: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS criterion {id} ({title}): {detail}"),
        Err(Fail(why)) => {
            *failures += 1;
            println!("FAIL criterion {id} ({title}): {why}");
        }
    }
}

fn main() {
    let mut failures = 0;
    report(1, "parameter counts", criterion_1(), &mut failures);
    report(2, "99% global pruning count", criterion_2(), &mut failures);
    report(3, "sparse conv oracle", criterion_3(), &mut failures);
    report(4, "WS3 equivalence", criterion_4(), &mut failures);
    report(5, "compound pruning rate", criterion_5(), &mut failures);
    report(6, "gradient correctness", criterion_6(), &mut failures);
    let t0 = Instant::now();
    match experiment_setup() {
        Ok(mut exp) => {
            let train_secs = t0.elapsed().as_secs_f64();
            report(7, "desk-scale pruning experiment", criterion_7(&mut exp, train_secs), &mut failures);
            report(8, "z-axis structural pruning", criterion_8(&mut exp), &mut failures);
        }
        Err(e) => {
            report(7, "desk-scale pruning experiment", Err(e.clone()), &mut failures);
            report(8, "z-axis structural pruning", Err(e), &mut failures);
        }
    }
    report(9, "WS3 speedup direction", criterion_9(), &mut failures);
    report(10, "determinism", criterion_10(), &mut failures);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 10 acceptance criteria passed");
}
