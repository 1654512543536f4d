//! Training loop over synthetic (or loaded) scenes, doubling as the
//! fine-tuning and calibration backend for iterative pruning.

use std::ops::Range;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::network::{LayerMut, Mode, Network};
use crate::pruning::{GradientSource, PrunableModel, PruneTrainer};
use crate::training::data::{collate, gen_synthetic_scene, Scene, SceneConfig};
use crate::training::loss::{loss_insseg, loss_semseg};
use crate::training::metrics::{argmax_rows, miou_macc, SegMetrics};
use crate::training::sgd::{sgd_step, LrSchedule, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Semseg,
    Insseg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

pub const TRAIN_CSV_HEADER: &str = "iter,loss,lr";

pub fn train_log_csv(rows: &[TrainRow]) -> String {
    let mut s = String::from(TRAIN_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{:.8},{:.8}\n", r.iter, r.loss, r.lr));
    }
    s
}

#[derive(Debug)]
pub struct SyntheticTrainer {
    pub cfg: TrainerConfig,
    /// Initial learning rate of each fine-tuning phase (poly-decayed over it).
    pub fine_tune_lr: f64,
    pub task: Task,
    /// Number of training batches averaged for gradient-based scores.
    pub calib_batches: usize,
    train: Vec<Scene>,
    eval: Option<Scene>,
    cursor: usize,
}

impl SyntheticTrainer {
    pub fn new(cfg: TrainerConfig, scenes: &SceneConfig, task: Task, train: Range<u64>, eval: Range<u64>) -> Result<Self> {
        let gen = |r: Range<u64>| -> Result<Vec<Scene>> {
            r.collect::<Vec<_>>().par_iter().map(|&s| gen_synthetic_scene(s, scenes)).collect()
        };
        Self::from_scenes(cfg, task, gen(train)?, gen(eval)?)
    }

    pub fn from_scenes(cfg: TrainerConfig, task: Task, train: Vec<Scene>, eval: Vec<Scene>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyBatch("training set has no scenes"));
        }
        let eval = if eval.is_empty() {
            None
        } else {
            Some(collate(&eval.iter().collect::<Vec<_>>())?)
        };
        Ok(Self {
            fine_tune_lr: cfg.lr * 0.1,
            calib_batches: 4,
            cfg,
            task,
            train,
            eval,
            cursor: 0,
        })
    }

    fn batch_at(&self, start: usize) -> Result<Scene> {
        let n = self.train.len();
        let picks: Vec<&Scene> = (0..self.cfg.batch_size).map(|j| &self.train[(start + j) % n]).collect();
        collate(&picks)
    }

    /// Forward + backward on `batch`; gradients are accumulated, not applied.
    fn forward_backward(&self, net: &mut Network, batch: &Scene) -> Result<f64> {
        let out = net.forward(&batch.input, Mode::Train)?;
        match (self.task, &out.offsets) {
            (Task::Insseg, Some(pred)) => {
                let l = loss_insseg(&out.logits, &batch.labels, pred, &batch.offsets, &batch.foreground)?;
                net.backward(&l.grad_logits, l.grad_offsets.as_ref())?;
                Ok(l.loss)
            }
            (Task::Insseg, None) => Err(Error::InvalidArgument("instance task needs a network with an offset head".into())),
            (Task::Semseg, _) => {
                let (loss, g) = loss_semseg(&out.logits, &batch.labels)?;
                net.backward(&g, None)?;
                Ok(loss)
            }
        }
    }

    fn run(&mut self, net: &mut Network, sched: &TrainerConfig) -> Result<Vec<TrainRow>> {
        let mut rows = Vec::with_capacity(sched.iterations);
        for it in 0..sched.iterations {
            let batch = self.batch_at(self.cursor)?;
            self.cursor = (self.cursor + self.cfg.batch_size) % self.train.len();
            net.zero_grad();
            let loss = self.forward_backward(net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: it, loss });
            }
            sgd_step(net, sched, it)?;
            if it % 100 == 0 {
                debug!("iter {it}: loss {loss:.5}");
            }
            rows.push(TrainRow { iter: it, loss, lr: sched.lr_at(it) });
        }
        net.zero_grad();
        Ok(rows)
    }

    /// Trains `iterations` steps with the configured schedule. The initial
    /// weights are captured first.
    pub fn train(&mut self, net: &mut Network, iterations: usize) -> Result<Vec<TrainRow>> {
        net.capture_init();
        let sched = TrainerConfig { iterations, ..self.cfg.clone() };
        self.run(net, &sched)
    }

    pub fn predict(net: &mut Network, scene: &Scene) -> Result<Vec<u32>> {
        Ok(argmax_rows(&net.forward(&scene.input, Mode::Eval)?.logits))
    }

    pub fn evaluate_metrics(&mut self, net: &mut Network) -> Result<SegMetrics> {
        let eval = self.eval.as_ref().ok_or(Error::EmptyBatch("no evaluation scenes"))?;
        let pred = Self::predict(net, eval)?;
        miou_macc(&pred, &eval.labels, eval.num_classes)
    }

    pub fn eval_scene(&self) -> Option<&Scene> {
        self.eval.as_ref()
    }
}

impl GradientSource<Network> for SyntheticTrainer {
    fn mean_gradients(&mut self, net: &mut Network) -> Result<Vec<Vec<f64>>> {
        if self.calib_batches == 0 {
            return Err(Error::MissingCalibration);
        }
        let mut stats = Vec::new();
        net.visit_mut(&mut |l| {
            if let LayerMut::Norm(bn) = l {
                stats.push((bn.running_mean.clone(), bn.running_var.clone()));
            }
        });
        net.zero_grad();
        for b in 0..self.calib_batches {
            let batch = self.batch_at(b * self.cfg.batch_size)?;
            self.forward_backward(net, &batch)?;
        }
        let mut it = stats.into_iter();
        net.visit_mut(&mut |l| {
            if let LayerMut::Norm(bn) = l {
                let (m, v) = it.next().expect("same layers");
                bn.running_mean = m;
                bn.running_var = v;
            }
        });
        let inv = 1.0 / self.calib_batches as f64;
        let grads = net
            .prunable_layers()
            .iter()
            .map(|(_, w)| {
                let g = &w.param().grad;
                if g.is_empty() {
                    vec![0.0; w.numel()]
                } else {
                    g.iter().map(|v| v * inv).collect()
                }
            })
            .collect();
        net.zero_grad();
        Ok(grads)
    }
}

impl PruneTrainer<Network> for SyntheticTrainer {
    fn fine_tune(&mut self, net: &mut Network, iters: usize) -> Result<f64> {
        let sched = TrainerConfig {
            lr: self.fine_tune_lr,
            iterations: iters,
            schedule: LrSchedule::Poly,
            ..self.cfg.clone()
        };
        let rows = self.run(net, &sched)?;
        Ok(rows.last().map_or(0.0, |r| r.loss))
    }

    fn evaluate(&mut self, net: &mut Network) -> Result<f64> {
        Ok(self.evaluate_metrics(net)?.miou)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::network::{build_network, NetworkSpec, Preset};
    use crate::training::data::SCENE_FEATURES;

    fn tiny_setup(task: Task) -> (Network, SyntheticTrainer) {
        let scenes = SceneConfig { grid: 16, min_room: 12, room_height: 6, max_box: 4, max_boxes: 2, ..Default::default() };
        let spec = NetworkSpec::preset(Preset::Res16UNet14A)
            .with_width(0.125)
            .with_io(SCENE_FEATURES, scenes.num_classes)
            .with_offset_head(task == Task::Insseg);
        let cfg = TrainerConfig { batch_size: 1, lr: 0.05, ..Default::default() };
        let t = SyntheticTrainer::new(cfg, &scenes, task, 0..4, 100..102).unwrap();
        (build_network(&spec).unwrap(), t)
    }

    #[test]
    fn loss_decreases_on_repeated_scene() {
        let (mut net, mut t) = tiny_setup(Task::Semseg);
        let rows = t.train(&mut net, 30).unwrap();
        let head: f64 = rows[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let tail: f64 = rows[25..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(net.conv("conv0").unwrap().weights.w_init().is_some());
    }

    #[test]
    fn insseg_trains_with_offset_head() {
        let (mut net, mut t) = tiny_setup(Task::Insseg);
        let rows = t.train(&mut net, 3).unwrap();
        assert!(rows.iter().all(|r| r.loss.is_finite()));
        let m = t.evaluate_metrics(&mut net).unwrap();
        assert!((0.0..=1.0).contains(&m.miou));
    }

    #[test]
    fn calibration_gradients_leave_bn_stats() {
        let (mut net, mut t) = tiny_setup(Task::Semseg);
        t.calib_batches = 2;
        let before = net.stem.bn.running_mean.clone();
        let g = t.mean_gradients(&mut net).unwrap();
        assert_eq!(g.len(), net.prunable_layers().len());
        assert_eq!(net.stem.bn.running_mean, before);
        assert!(g.iter().flatten().any(|v| *v != 0.0));
    }
}
