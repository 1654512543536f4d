//! Magnitude-style pruning: scoring criteria, global and per-layer ranking,
//! the iterative prune/fine-tune loop, z-axis structural pruning and
//! kernel-density reporting.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_map::KernelOffsets;
use crate::layers::conv::ConvWeights;
use crate::layers::network::{LayerMut, LayerRef, Network};

/// Anything that exposes an ordered list of prunable weight tensors.
pub trait PrunableModel {
    fn prunable_layers(&self) -> Vec<(&str, &ConvWeights)>;
    fn visit_prunable_mut(&mut self, f: &mut dyn FnMut(&str, &mut ConvWeights));
}

impl PrunableModel for Network {
    fn prunable_layers(&self) -> Vec<(&str, &ConvWeights)> {
        self.layers()
            .into_iter()
            .filter_map(|l| match l {
                LayerRef::Conv { conv, prunable: true } => Some((conv.name.as_str(), &conv.weights)),
                _ => None,
            })
            .collect()
    }

    fn visit_prunable_mut(&mut self, f: &mut dyn FnMut(&str, &mut ConvWeights)) {
        self.visit_mut(&mut |l| {
            if let LayerMut::Conv { conv, prunable: true } = l {
                f(&conv.name, &mut conv.weights);
            }
        });
    }
}

/// A bare list of named weight tensors.
#[derive(Debug, Clone, Default)]
pub struct WeightStack {
    pub layers: Vec<(String, ConvWeights)>,
}

impl PrunableModel for WeightStack {
    fn prunable_layers(&self) -> Vec<(&str, &ConvWeights)> {
        self.layers.iter().map(|(n, w)| (n.as_str(), w)).collect()
    }

    fn visit_prunable_mut(&mut self, f: &mut dyn FnMut(&str, &mut ConvWeights)) {
        for (n, w) in &mut self.layers {
            f(n, w);
        }
    }
}

/// `(unmasked, total)` prunable weight counts.
pub fn prunable_counts<M: PrunableModel + ?Sized>(model: &M) -> (usize, usize) {
    model
        .prunable_layers()
        .iter()
        .fold((0, 0), |(r, t), (_, w)| (r + w.remaining(), t + w.numel()))
}

pub fn remaining_fraction<M: PrunableModel + ?Sized>(model: &M) -> f64 {
    let (r, t) = prunable_counts(model);
    r as f64 / t.max(1) as f64
}

fn layer_weights<M: PrunableModel + ?Sized>(model: &M) -> Vec<(String, &ConvWeights)> {
    model.prunable_layers().into_iter().map(|(n, w)| (n.to_string(), w)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriterionKind {
    /// `|w|`
    L1,
    /// `|w · ∂L/∂w|`, gradient averaged over calibration batches.
    FG,
    /// `|w − w_init|`
    L1S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneCriterion {
    pub kind: CriterionKind,
    pub scope: Scope,
}

impl PruneCriterion {
    pub const ALL: [PruneCriterion; 6] = [
        PruneCriterion::new(CriterionKind::L1, Scope::Global),
        PruneCriterion::new(CriterionKind::L1, Scope::Local),
        PruneCriterion::new(CriterionKind::FG, Scope::Global),
        PruneCriterion::new(CriterionKind::FG, Scope::Local),
        PruneCriterion::new(CriterionKind::L1S, Scope::Global),
        PruneCriterion::new(CriterionKind::L1S, Scope::Local),
    ];

    pub const fn new(kind: CriterionKind, scope: Scope) -> Self {
        Self { kind, scope }
    }

    pub fn kind_tag(&self) -> &'static str {
        match self.kind {
            CriterionKind::L1 => "L1",
            CriterionKind::FG => "FG",
            CriterionKind::L1S => "L1S",
        }
    }

    pub fn scope_tag(&self) -> &'static str {
        match self.scope {
            Scope::Global => "G",
            Scope::Local => "L",
        }
    }
}

impl fmt::Display for PruneCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind_tag(), self.scope_tag())
    }
}

impl FromStr for PruneCriterion {
    type Err = Error;

    /// Accepts `L1G`, `L1L`, `FGG`, `FGL`, `L1SG`, `L1SL` (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let u = s.to_ascii_uppercase();
        let (kind, rest) = if let Some(r) = u.strip_prefix("L1S") {
            (CriterionKind::L1S, r)
        } else if let Some(r) = u.strip_prefix("L1") {
            (CriterionKind::L1, r)
        } else if let Some(r) = u.strip_prefix("FG") {
            (CriterionKind::FG, r)
        } else {
            return Err(Error::InvalidArgument(format!("unknown criterion {s:?}")));
        };
        let scope = match rest {
            "G" => Scope::Global,
            "L" => Scope::Local,
            _ => return Err(Error::InvalidArgument(format!("unknown scope in criterion {s:?}"))),
        };
        Ok(Self { kind, scope })
    }
}

/// Per-step fraction `p` that reaches `target` after `n_prune` steps.
pub fn p_from_target(target: f64, n_prune: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&target) || n_prune == 0 {
        return Err(Error::InvalidArgument(format!(
            "target rate must be in [0, 1) and steps >= 1, got {target} / {n_prune}"
        )));
    }
    Ok(1.0 - (1.0 - target).powf(1.0 / n_prune as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub p: f64,
    pub n_prune: usize,
    pub i_prune: usize,
    pub i_train: usize,
}

impl PruneSchedule {
    pub fn new(p: f64, n_prune: usize, i_prune: usize, i_train: usize) -> Result<Self> {
        let s = Self { p, n_prune, i_prune, i_train };
        s.validate()?;
        Ok(s)
    }

    pub fn from_target(target: f64, n_prune: usize, i_prune: usize, i_train: usize) -> Result<Self> {
        Self::new(p_from_target(target, n_prune)?, n_prune, i_prune, i_train)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidArgument(format!("p must be in (0, 1), got {}", self.p)));
        }
        if self.n_prune == 0 {
            return Err(Error::InvalidArgument("n_prune must be >= 1".into()));
        }
        Ok(())
    }

    /// `1 − (1 − p)^N_prune`
    pub fn target_rate(&self) -> f64 {
        1.0 - (1.0 - self.p).powi(self.n_prune as i32)
    }
}

/// Supplies mean loss gradients over calibration batches for FG scoring.
pub trait GradientSource<M: ?Sized> {
    /// One gradient vector per prunable layer, in visit order.
    fn mean_gradients(&mut self, model: &mut M) -> Result<Vec<Vec<f64>>>;
}

/// Fine-tuning and evaluation hooks driven by [`iterative_prune`].
pub trait PruneTrainer<M: ?Sized>: GradientSource<M> {
    /// Runs `iters` masked training iterations; returns the last loss.
    fn fine_tune(&mut self, model: &mut M, iters: usize) -> Result<f64>;
    /// Task metric (higher is better).
    fn evaluate(&mut self, model: &mut M) -> Result<f64>;
}

/// Per-layer scores; masked-out entries are NaN.
pub type Scores = Vec<Vec<f64>>;

pub fn score_weights<M: PrunableModel + ?Sized>(
    model: &mut M,
    kind: CriterionKind,
    calib: Option<&mut dyn GradientSource<M>>,
) -> Result<Scores> {
    let grads = match kind {
        CriterionKind::FG => {
            let src = calib.ok_or(Error::MissingCalibration)?;
            Some(src.mean_gradients(model)?)
        }
        _ => None,
    };
    let layers = layer_weights(&*model);
    if let Some(g) = &grads {
        if g.len() != layers.len() {
            return Err(Error::shape("FG gradients (layers)", layers.len(), g.len()));
        }
        for ((name, w), gl) in layers.iter().zip(g) {
            if gl.len() != w.numel() {
                return Err(Error::InvalidArgument(format!(
                    "gradient for {name:?} has {} entries, expected {}",
                    gl.len(),
                    w.numel()
                )));
            }
        }
    }
    if kind == CriterionKind::L1S {
        if let Some((name, _)) = layers.iter().find(|(_, w)| w.w_init().is_none()) {
            return Err(Error::MissingInit(name.clone()));
        }
    }
    Ok(layers
        .par_iter()
        .enumerate()
        .map(|(li, (_, w))| {
            let vals = w.values();
            let mask = w.mask();
            (0..w.numel())
                .map(|j| {
                    if !mask[j] {
                        return f64::NAN;
                    }
                    match kind {
                        CriterionKind::L1 => vals[j].abs(),
                        CriterionKind::FG => (vals[j] * grads.as_ref().expect("fg grads")[li][j]).abs(),
                        CriterionKind::L1S => (vals[j] - w.w_init().expect("checked")[j]).abs(),
                    }
                })
                .collect()
        })
        .collect())
}

/// The `k`-th smallest non-NaN score in `pool`.
fn select_lowest<'a, I>(pool: I, k: usize) -> Option<f64>
where
    I: Iterator<Item = &'a f64>,
{
    if k == 0 {
        return None;
    }
    let mut vals: Vec<f64> = pool.copied().filter(|s| !s.is_nan()).collect();
    let (_, kth, _) = vals.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    Some(*kth)
}

/// Masks every entry with score below `threshold`, plus entries equal to it
/// in pool order until `k` entries are masked in total.
fn plan_cut(layers: &[&[f64]], threshold: f64, k: usize) -> Vec<Vec<usize>> {
    let below: usize = layers
        .iter()
        .map(|s| s.iter().filter(|v| v.total_cmp(&threshold) == Ordering::Less).count())
        .sum();
    let mut ties = k - below;
    layers
        .iter()
        .map(|s| {
            let mut cut = Vec::new();
            for (j, v) in s.iter().enumerate() {
                if v.is_nan() {
                    continue;
                }
                match v.total_cmp(&threshold) {
                    Ordering::Less => cut.push(j),
                    Ordering::Equal if ties > 0 => {
                        ties -= 1;
                        cut.push(j);
                    }
                    _ => {}
                }
            }
            cut
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneOutcome {
    pub pruned: usize,
    pub remaining: usize,
}

/// Masks the lowest `floor(p · remaining)` scores (globally or per layer).
pub fn prune_step<M: PrunableModel + ?Sized>(model: &mut M, scores: &Scores, scope: Scope, p: f64) -> Result<PruneOutcome> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p must be in (0, 1), got {p}")));
    }
    let layers = layer_weights(&*model);
    if scores.len() != layers.len() {
        return Err(Error::shape("prune scores (layers)", layers.len(), scores.len()));
    }
    for ((name, w), s) in layers.iter().zip(scores) {
        if s.len() != w.numel() || s.iter().zip(w.mask()).any(|(v, &m)| v.is_nan() == m) {
            return Err(Error::InvalidArgument(format!("scores for {name:?} do not match its mask")));
        }
    }
    let cuts: Vec<Vec<usize>> = match scope {
        Scope::Global => {
            let remaining: usize = layers.iter().map(|(_, w)| w.remaining()).sum();
            let k = (p * remaining as f64).floor() as usize;
            let refs: Vec<&[f64]> = scores.iter().map(Vec::as_slice).collect();
            match select_lowest(scores.iter().flatten(), k) {
                Some(t) => plan_cut(&refs, t, k),
                None => vec![Vec::new(); layers.len()],
            }
        }
        Scope::Local => {
            if let Some((name, _)) = layers.iter().find(|(_, w)| w.remaining() == 0) {
                return Err(Error::DegenerateLayer(name.clone()));
            }
            layers
                .par_iter()
                .zip(scores)
                .map(|((_, w), s)| {
                    let k = (p * w.remaining() as f64).floor() as usize;
                    match select_lowest(s.iter(), k) {
                        Some(t) => plan_cut(&[s.as_slice()], t, k).pop().expect("one layer"),
                        None => Vec::new(),
                    }
                })
                .collect()
        }
    };
    let pruned = cuts.iter().map(Vec::len).sum();
    let mut li = 0;
    model.visit_prunable_mut(&mut |_, w| {
        for &j in &cuts[li] {
            w.prune(j);
        }
        li += 1;
    });
    let (remaining, _) = prunable_counts(&*model);
    Ok(PruneOutcome { pruned, remaining })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneLogRow {
    pub step: usize,
    pub criterion: String,
    pub scope: String,
    pub p: f64,
    pub remaining_params: usize,
    pub remaining_fraction: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub rows: Vec<PruneLogRow>,
}

impl PruneLog {
    pub const CSV_HEADER: &'static str = "step,criterion,scope,p,remaining_params,remaining_fraction,metric";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.6},{},{:.8},{:.6}\n",
                r.step, r.criterion, r.scope, r.p, r.remaining_params, r.remaining_fraction, r.metric
            ));
        }
        s
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.rows.last().map(|r| r.metric)
    }
}

/// Repeats score → prune → fine-tune `n_prune` times. Row 0 of the log is
/// the unpruned baseline.
pub fn iterative_prune<M, T>(model: &mut M, sched: &PruneSchedule, crit: PruneCriterion, trainer: &mut T) -> Result<PruneLog>
where
    M: PrunableModel + ?Sized,
    T: PruneTrainer<M>,
{
    sched.validate()?;
    let scope = match crit.scope {
        Scope::Global => "global",
        Scope::Local => "local",
    };
    let row = |step: usize, model: &M, metric: f64| {
        let (r, t) = prunable_counts(model);
        PruneLogRow {
            step,
            criterion: crit.to_string(),
            scope: scope.into(),
            p: sched.p,
            remaining_params: r,
            remaining_fraction: r as f64 / t.max(1) as f64,
            metric,
        }
    };
    let mut log = PruneLog::default();
    let base = trainer.evaluate(model)?;
    log.rows.push(row(0, model, base));
    for step in 1..=sched.n_prune {
        let scores = score_weights(model, crit.kind, Some(trainer as &mut dyn GradientSource<M>))?;
        let out = prune_step(model, &scores, crit.scope, sched.p)?;
        drop(scores);
        let loss = match trainer.fine_tune(model, sched.i_prune) {
            Ok(l) => l,
            Err(Error::Diverged { loss, .. }) => return Err(Error::Diverged { step, loss }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let metric = trainer.evaluate(model)?;
        info!(
            "{crit} step {step}/{}: pruned {}, remaining {}, metric {metric:.4}",
            sched.n_prune, out.pruned, out.remaining
        );
        log.rows.push(row(step, model, metric));
    }
    Ok(log)
}

/// Masks every offset of the named 3³ layers except the z-axis column
/// `(0,0,−1), (0,0,0), (0,0,+1)`.
pub fn structural_zaxis_prune<M: PrunableModel + ?Sized>(model: &mut M, layer_names: &[String]) -> Result<()> {
    let layers = layer_weights(&*model);
    for name in layer_names {
        match layers.iter().find(|(n, _)| n == name) {
            None => return Err(Error::UnknownLayer(name.clone())),
            Some((_, w)) if w.kernel_size() != 3 => return Err(Error::NotSpatial(name.clone())),
            _ => {}
        }
    }
    let offsets = KernelOffsets::new(3)?;
    let off_axis: Vec<bool> = offsets.offsets().iter().map(|o| o[0] != 0 || o[1] != 0).collect();
    model.visit_prunable_mut(&mut |n, w| {
        if !layer_names.iter().any(|l| l == n) {
            return;
        }
        let block = w.block_len();
        let mask: Vec<bool> = w
            .mask()
            .iter()
            .enumerate()
            .map(|(j, &m)| m && !off_axis[j / block])
            .collect();
        w.set_mask(mask).expect("same length");
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub layer: String,
    pub offset: [i32; 3],
    pub density: f64,
}

/// Fraction of unmasked weights per (layer, offset). `layers = None` reports
/// every prunable layer.
pub fn kernel_density_report<M: PrunableModel + ?Sized>(model: &M, layers: Option<&[String]>) -> Result<Vec<DensityRow>> {
    let all = layer_weights(model);
    if let Some(req) = layers {
        if let Some(missing) = req.iter().find(|r| !all.iter().any(|(n, _)| n == *r)) {
            return Err(Error::UnknownLayer(missing.clone()));
        }
    }
    let mut rows = Vec::new();
    for (name, w) in all {
        if layers.is_some_and(|req| !req.contains(&name)) {
            continue;
        }
        let offs = KernelOffsets::new(w.kernel_size())?;
        let block = w.block_len().max(1) as f64;
        for (i, o) in offs.offsets().iter().enumerate() {
            let on = w.mask_block(i).iter().filter(|&&m| m).count();
            rows.push(DensityRow {
                layer: name.clone(),
                offset: *o,
                density: on as f64 / block,
            });
        }
    }
    Ok(rows)
}

pub const DENSITY_CSV_HEADER: &str = "layer,offset_x,offset_y,offset_z,density";

pub fn density_csv(rows: &[DensityRow]) -> String {
    let mut s = String::from(DENSITY_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.8}\n",
            r.layer, r.offset[0], r.offset[1], r.offset[2], r.density
        ));
    }
    s
}

/// Logs and returns without changes when `target` is zero.
pub fn is_noop_target(target: f64) -> bool {
    if target == 0.0 {
        warn!("target pruning rate 0: nothing to prune");
        true
    } else {
        false
    }
}
