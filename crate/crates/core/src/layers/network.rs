//! Res16UNet-style U-shaped residual network over sparse tensors.
//!
//! Layout (strides in voxels):
//!
//! ```text
//! conv0 (3³, s1) ─────────────────────────────────────────────┐ skip
//! conv1 (2³, ↓2) block1 ──────────────────────────────────┐    │
//! conv2 (2³, ↓2) block2 ─────────────────────────────┐    │    │
//! conv3 (2³, ↓2) block3 ────────────────────────┐    │    │    │
//! conv4 (2³, ↓2) block4                         │    │    │    │
//!   conv4_tr (↑2) ++ ─────────────────────────── ┘    │    │    │
//!   block5, conv5_tr (↑2) ++ ─────────────────────────┘    │    │
//!   block6, conv6_tr (↑2) ++ ──────────────────────────────┘    │
//!   block7, conv7_tr (↑2) ++ ───────────────────────────────────┘
//!   block8 → final (1³ → N_C)   [offset head: 1³ → 1³ → 3]
//! ```
//!
//! `++` is channel concatenation `[upsampled | encoder skip]`. Every conv
//! except the heads is followed by batch norm and ReLU.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel_map::{total_pairs, CoordinateManager, KernelMap};
use crate::layers::conv::{ConvEngine, ConvWeights, Param, SparseConv};
use crate::layers::norm::{BatchNorm, Relu};
use crate::matrix::Matrix;
use crate::sparse_tensor::{CoordSet, SparseTensor};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Res16UNet14A,
    Res16UNet18A,
    Res16UNet34C,
}

impl Preset {
    pub fn planes(self) -> [usize; 8] {
        match self {
            Preset::Res16UNet14A | Preset::Res16UNet18A => [32, 64, 128, 256, 128, 128, 96, 96],
            Preset::Res16UNet34C => [32, 64, 128, 256, 256, 128, 96, 96],
        }
    }

    pub fn repeats(self) -> [usize; 8] {
        match self {
            Preset::Res16UNet14A => [1; 8],
            Preset::Res16UNet18A => [2; 8],
            Preset::Res16UNet34C => [2, 3, 4, 6, 2, 2, 2, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Res16UNet14A => "Res16UNet14A",
            Preset::Res16UNet18A => "Res16UNet18A",
            Preset::Res16UNet34C => "Res16UNet34C",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "res16unet14a" | "14a" => Some(Preset::Res16UNet14A),
            "res16unet18a" | "18a" => Some(Preset::Res16UNet18A),
            "res16unet34c" | "34c" => Some(Preset::Res16UNet34C),
            _ => None,
        }
    }
}

/// Declarative description of a network; channel counts are the unscaled
/// (width 1) values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub init_dim: usize,
    pub stem_kernel: usize,
    pub planes: [usize; 8],
    pub repeats: [usize; 8],
    pub width_multiplier: f64,
    pub offset_head: bool,
    pub seed: u64,
}

impl NetworkSpec {
    /// Preset at the given width; 3 input channels (RGB) and 20 classes.
    pub fn preset(p: Preset) -> Self {
        Self {
            name: p.name().to_string(),
            in_channels: 3,
            num_classes: 20,
            init_dim: 32,
            stem_kernel: 3,
            planes: p.planes(),
            repeats: p.repeats(),
            width_multiplier: 1.0,
            offset_head: false,
            seed: 0,
        }
    }

    pub fn with_width(mut self, w: f64) -> Self {
        self.width_multiplier = w;
        self
    }

    pub fn with_io(mut self, in_channels: usize, num_classes: usize) -> Self {
        self.in_channels = in_channels;
        self.num_classes = num_classes;
        self
    }

    pub fn with_offset_head(mut self, on: bool) -> Self {
        self.offset_head = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "width_multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Channels {
                edge: "input -> conv0".into(),
                produced: 0,
                expected: 1,
            });
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.init_dim == 0 || self.planes.contains(&0) {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.repeats.contains(&0) {
            return Err(Error::InvalidArgument("every block needs at least one residual unit".into()));
        }
        if self.stem_kernel == 0 {
            return Err(Error::InvalidArgument("stem kernel must be positive".into()));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let d = Sha256::digest(&json);
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_edge(edge: &str, produced: usize, expected: usize) -> Result<()> {
    if produced != expected {
        return Err(Error::Channels {
            edge: edge.to_string(),
            produced,
            expected,
        });
    }
    Ok(())
}

/// Conv → BN → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: SparseConv,
    pub bn: BatchNorm,
    relu: Relu,
}

impl ConvBnRelu {
    fn new(conv: SparseConv, bn_name: String) -> Self {
        let c = conv.weights.n_out();
        Self {
            conv,
            bn: BatchNorm::new(bn_name, c),
            relu: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Matrix, km: &KernelMap, engine: ConvEngine, train: bool, prof: &mut Profile) -> Result<Matrix> {
        let h = prof.conv(&mut self.conv, x, km, engine, train)?;
        let h = self.bn.forward(&h, train)?;
        Ok(self.relu.forward(h, train))
    }

    fn backward(&mut self, g: Matrix, km: &KernelMap) -> Result<Matrix> {
        let g = self.relu.backward(g)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g, km)
    }
}

/// Two 3³ convs with BN/ReLU and an additive shortcut (1³ projection + BN
/// when the channel count changes).
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: SparseConv,
    pub bn1: BatchNorm,
    relu1: Relu,
    pub conv2: SparseConv,
    pub bn2: BatchNorm,
    pub downsample: Option<(SparseConv, BatchNorm)>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(prefix: &str, n_in: usize, planes: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = SparseConv::new(
            format!("{prefix}.conv1"),
            ConvWeights::kaiming_uniform(3, n_in, planes, rng),
            1,
            false,
        );
        let conv2 = SparseConv::new(
            format!("{prefix}.conv2"),
            ConvWeights::kaiming_uniform(3, planes, planes, rng),
            1,
            false,
        );
        let downsample = (n_in != planes).then(|| {
            (
                SparseConv::new(
                    format!("{prefix}.downsample"),
                    ConvWeights::kaiming_uniform(1, n_in, planes, rng),
                    1,
                    false,
                ),
                BatchNorm::new(format!("{prefix}.downsample_bn"), planes),
            )
        });
        Self {
            conv1,
            bn1: BatchNorm::new(format!("{prefix}.bn1"), planes),
            relu1: Relu::default(),
            conv2,
            bn2: BatchNorm::new(format!("{prefix}.bn2"), planes),
            downsample,
            relu_out: Relu::default(),
        }
    }

    fn forward(
        &mut self,
        x: &Matrix,
        km3: &KernelMap,
        km1: &KernelMap,
        engine: ConvEngine,
        train: bool,
        prof: &mut Profile,
    ) -> Result<Matrix> {
        let h = prof.conv(&mut self.conv1, x, km3, engine, train)?;
        let h = self.bn1.forward(&h, train)?;
        let h = self.relu1.forward(h, train);
        let h = prof.conv(&mut self.conv2, &h, km3, engine, train)?;
        let mut h = self.bn2.forward(&h, train)?;
        match &mut self.downsample {
            Some((conv, bn)) => {
                let s = prof.conv(conv, x, km1, engine, train)?;
                h.add_assign(&bn.forward(&s, train)?)?;
            }
            None => h.add_assign(x)?,
        }
        Ok(self.relu_out.forward(h, train))
    }

    fn backward(&mut self, g: Matrix, km3: &KernelMap, km1: &KernelMap) -> Result<Matrix> {
        let g = self.relu_out.backward(g)?;
        let g_short = match &mut self.downsample {
            Some((conv, bn)) => {
                let gs = bn.backward(&g)?;
                conv.backward(&gs, km1)?
            }
            None => g.clone(),
        };
        let gh = self.bn2.backward(&g)?;
        let gh = self.conv2.backward(&gh, km3)?;
        let gh = self.relu1.backward(gh)?;
        let gh = self.bn1.backward(&gh)?;
        let mut gx = self.conv1.backward(&gh, km3)?;
        gx.add_assign(&g_short)?;
        Ok(gx)
    }

    fn n_out(&self) -> usize {
        self.conv2.weights.n_out()
    }
}

#[derive(Debug, Clone)]
pub struct OffsetHead {
    pub hidden: ConvBnRelu,
    pub out: SparseConv,
}

/// Mutable view of one layer, yielded in forward order.
pub enum LayerMut<'a> {
    Conv { conv: &'a mut SparseConv, prunable: bool },
    Norm(&'a mut BatchNorm),
}

/// Immutable view of one layer, yielded in forward order.
pub enum LayerRef<'a> {
    Conv { conv: &'a SparseConv, prunable: bool },
    Norm(&'a BatchNorm),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamCount {
    /// All parameters, masked or not.
    pub total: usize,
    /// Weights of prunable convolutions.
    pub prunable_total: usize,
    /// Unmasked weights of prunable convolutions.
    pub prunable_remaining: usize,
    /// BN affine parameters, head weights and biases.
    pub non_prunable: usize,
}

impl ParamCount {
    /// Parameters a pruned network actually keeps.
    pub fn remaining_total(&self) -> usize {
        self.prunable_remaining + self.non_prunable
    }

    pub fn remaining_fraction(&self) -> f64 {
        self.prunable_remaining as f64 / self.prunable_total.max(1) as f64
    }
}

/// Wall time and multiply-accumulate accounting of one convolution call.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvProfile {
    pub layer: String,
    pub ms: f64,
    pub pairs: usize,
    /// `pairs · N_in · N_out`
    pub dense_macs: usize,
    /// `Σ_i |pairs_i| · nnz(W_i)`
    pub ws3_macs: usize,
}

#[derive(Debug, Default)]
struct Profile {
    enabled: bool,
    entries: Vec<ConvProfile>,
}

impl Profile {
    fn conv(
        &mut self,
        conv: &mut SparseConv,
        x: &Matrix,
        km: &KernelMap,
        engine: ConvEngine,
        train: bool,
    ) -> Result<Matrix> {
        if !self.enabled {
            return conv.forward(x, km, engine, train);
        }
        let t0 = Instant::now();
        let out = conv.forward(x, km, engine, train)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let w = &conv.weights;
        let pairs = total_pairs(km);
        let ws3_macs = km
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| p.len() * w.mask_block(i).iter().filter(|&&m| m).count())
            .sum();
        self.entries.push(ConvProfile {
            layer: conv.name.clone(),
            ms,
            pairs,
            dense_macs: pairs * w.n_in() * w.n_out(),
            ws3_macs,
        });
        Ok(out)
    }
}

#[derive(Debug)]
struct ForwardState {
    manager: CoordinateManager,
    levels: Vec<Arc<CoordSet>>,
    /// Output channels of each decoder upsampling, for splitting concat grads.
    up_channels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: Matrix,
    pub offsets: Option<Matrix>,
    pub coords: Arc<CoordSet>,
}

#[derive(Debug)]
pub struct Network {
    spec: NetworkSpec,
    pub stem: ConvBnRelu,
    pub down: Vec<ConvBnRelu>,
    pub enc_blocks: Vec<Vec<BasicBlock>>,
    pub up: Vec<ConvBnRelu>,
    pub dec_blocks: Vec<Vec<BasicBlock>>,
    pub final_head: SparseConv,
    pub offset_head: Option<OffsetHead>,
    engine: ConvEngine,
    state: Option<ForwardState>,
    trace: Vec<(String, Arc<CoordSet>)>,
    profile: Profile,
}

/// Builds the executable network for `spec`.
pub fn build_network(spec: &NetworkSpec) -> Result<Network> {
    Network::new(spec.clone())
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let init = spec.scaled(spec.init_dim);
        let planes: Vec<usize> = spec.planes.iter().map(|&c| spec.scaled(c)).collect();

        let stem = ConvBnRelu::new(
            SparseConv::new(
                "conv0",
                ConvWeights::kaiming_uniform(spec.stem_kernel, spec.in_channels, init, &mut rng),
                1,
                false,
            ),
            "bn0".into(),
        );
        let mut down = Vec::with_capacity(LEVELS);
        let mut enc_blocks = Vec::with_capacity(LEVELS);
        let mut skip_channels = vec![init];
        let mut ch = init;
        for l in 0..LEVELS {
            down.push(ConvBnRelu::new(
                SparseConv::new(
                    format!("conv{}", l + 1),
                    ConvWeights::kaiming_uniform(2, ch, ch, &mut rng),
                    2,
                    false,
                ),
                format!("bn{}", l + 1),
            ));
            let mut blocks = Vec::new();
            for j in 0..spec.repeats[l] {
                let b = BasicBlock::new(&format!("block{}.{}", l + 1, j), ch, planes[l], &mut rng);
                ch = b.n_out();
                blocks.push(b);
            }
            enc_blocks.push(blocks);
            if l + 1 < LEVELS {
                skip_channels.push(ch);
            }
        }
        let mut up = Vec::with_capacity(LEVELS);
        let mut dec_blocks = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let p = planes[LEVELS + l];
            up.push(ConvBnRelu::new(
                SparseConv::new(
                    format!("conv{}_tr", l + 4),
                    ConvWeights::kaiming_uniform(2, ch, p, &mut rng),
                    2,
                    true,
                ),
                format!("bn{}_tr", l + 4),
            ));
            ch = p + skip_channels[LEVELS - 1 - l];
            let mut blocks = Vec::new();
            for j in 0..spec.repeats[LEVELS + l] {
                let b = BasicBlock::new(&format!("block{}.{}", l + 5, j), ch, p, &mut rng);
                ch = b.n_out();
                blocks.push(b);
            }
            dec_blocks.push(blocks);
        }
        let final_head = SparseConv::new(
            "final",
            ConvWeights::kaiming_uniform(1, ch, spec.num_classes, &mut rng),
            1,
            false,
        )
        .with_bias();
        let offset_head = spec.offset_head.then(|| {
            let hidden = planes[7];
            OffsetHead {
                hidden: ConvBnRelu::new(
                    SparseConv::new("offset.0", ConvWeights::kaiming_uniform(1, ch, hidden, &mut rng), 1, false),
                    "offset.0_bn".into(),
                ),
                out: SparseConv::new("offset.1", ConvWeights::kaiming_uniform(1, hidden, 3, &mut rng), 1, false)
                    .with_bias(),
            }
        });
        let net = Self {
            spec,
            stem,
            down,
            enc_blocks,
            up,
            dec_blocks,
            final_head,
            offset_head,
            engine: ConvEngine::Dense,
            state: None,
            trace: Vec::new(),
            profile: Profile::default(),
        };
        net.check_channels()?;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Verifies that every edge of the layer graph carries matching channels.
    pub fn check_channels(&self) -> Result<()> {
        let s = &self.spec;
        check_edge("input -> conv0", s.in_channels, self.stem.conv.weights.n_in())?;
        let mut ch = self.stem.conv.weights.n_out();
        let mut skips = vec![ch];
        for l in 0..LEVELS {
            check_edge(&format!("-> {}", self.down[l].conv.name), ch, self.down[l].conv.weights.n_in())?;
            ch = self.down[l].conv.weights.n_out();
            for b in &self.enc_blocks[l] {
                check_edge(&format!("-> {}", b.conv1.name), ch, b.conv1.weights.n_in())?;
                check_edge(&format!("{} -> {}", b.conv1.name, b.conv2.name), b.conv1.weights.n_out(), b.conv2.weights.n_in())?;
                if b.downsample.is_none() {
                    check_edge(&format!("{} shortcut", b.conv1.name), ch, b.n_out())?;
                }
                ch = b.n_out();
            }
            if l + 1 < LEVELS {
                skips.push(ch);
            }
        }
        for l in 0..LEVELS {
            let u = &self.up[l].conv;
            check_edge(&format!("-> {}", u.name), ch, u.weights.n_in())?;
            ch = u.weights.n_out() + skips[LEVELS - 1 - l];
            for b in &self.dec_blocks[l] {
                check_edge(&format!("-> {}", b.conv1.name), ch, b.conv1.weights.n_in())?;
                if b.downsample.is_none() {
                    check_edge(&format!("{} shortcut", b.conv1.name), ch, b.n_out())?;
                }
                ch = b.n_out();
            }
        }
        check_edge("-> final", ch, self.final_head.weights.n_in())?;
        check_edge("final -> logits", s.num_classes, self.final_head.weights.n_out())?;
        if let Some(h) = &self.offset_head {
            check_edge("-> offset.0", ch, h.hidden.conv.weights.n_in())?;
            check_edge("offset.0 -> offset.1", h.hidden.conv.weights.n_out(), h.out.weights.n_in())?;
        }
        Ok(())
    }

    pub fn engine(&self) -> ConvEngine {
        self.engine
    }

    /// Switches the convolution path used in eval forwards. Selecting WS³
    /// compiles CSR weights for every convolution.
    pub fn set_engine(&mut self, engine: ConvEngine) -> Result<()> {
        if engine == ConvEngine::Ws3 {
            let mut res = Ok(());
            self.visit_mut(&mut |l| {
                if let LayerMut::Conv { conv, .. } = l {
                    if res.is_ok() {
                        res = conv.weights.compile_csr().map(|_| ());
                    }
                }
            });
            res?;
        }
        self.engine = engine;
        Ok(())
    }

    pub fn set_profiling(&mut self, on: bool) {
        self.profile.enabled = on;
        self.profile.entries.clear();
    }

    /// Per-convolution records since the last call, in execution order.
    pub fn take_profile(&mut self) -> Vec<ConvProfile> {
        std::mem::take(&mut self.profile.entries)
    }

    /// Coordinate set produced by each stage of the last forward.
    pub fn last_trace(&self) -> &[(String, Arc<CoordSet>)] {
        &self.trace
    }

    pub fn forward(&mut self, input: &SparseTensor, mode: Mode) -> Result<NetOutput> {
        let train = mode == Mode::Train;
        if train && self.engine == ConvEngine::Ws3 {
            return Err(Error::InvalidArgument("WS³ path is inference-only".into()));
        }
        if input.stride() != 1 {
            return Err(Error::Stride(format!("network input must have stride 1, got {}", input.stride())));
        }
        let engine = self.engine;
        let mut mgr = CoordinateManager::new(Arc::clone(&input.coords));
        let mut levels = Vec::with_capacity(LEVELS + 1);
        for l in 0..=LEVELS {
            levels.push(mgr.coords_at(1 << l)?);
        }
        self.trace.clear();
        let prof = &mut self.profile;

        let km = mgr.kernel_map(&levels[0], &levels[0], self.spec.stem_kernel, 1, false)?;
        let mut x = self.stem.forward(&input.features, &km, engine, train, prof)?;
        self.trace.push(("conv0".into(), Arc::clone(&levels[0])));
        let mut skips = vec![x.clone()];
        for l in 0..LEVELS {
            let km = mgr.kernel_map(&levels[l], &levels[l + 1], 2, 2, false)?;
            x = self.down[l].forward(&x, &km, engine, train, prof)?;
            let km3 = mgr.kernel_map(&levels[l + 1], &levels[l + 1], 3, 1, false)?;
            let km1 = mgr.kernel_map(&levels[l + 1], &levels[l + 1], 1, 1, false)?;
            for b in &mut self.enc_blocks[l] {
                x = b.forward(&x, &km3, &km1, engine, train, prof)?;
            }
            self.trace.push((format!("block{}", l + 1), Arc::clone(&levels[l + 1])));
            if l + 1 < LEVELS {
                skips.push(x.clone());
            }
        }
        let mut up_channels = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let (hi, lo) = (LEVELS - l, LEVELS - l - 1);
            let km = mgr.kernel_map(&levels[hi], &levels[lo], 2, 2, true)?;
            let u = self.up[l].forward(&x, &km, engine, train, prof)?;
            self.trace.push((format!("conv{}_tr", l + 4), Arc::clone(&levels[lo])));
            up_channels.push(u.cols());
            x = Matrix::hconcat(&u, &skips[lo])?;
            let km3 = mgr.kernel_map(&levels[lo], &levels[lo], 3, 1, false)?;
            let km1 = mgr.kernel_map(&levels[lo], &levels[lo], 1, 1, false)?;
            for b in &mut self.dec_blocks[l] {
                x = b.forward(&x, &km3, &km1, engine, train, prof)?;
            }
            self.trace.push((format!("block{}", l + 5), Arc::clone(&levels[lo])));
        }
        let km1 = mgr.kernel_map(&levels[0], &levels[0], 1, 1, false)?;
        let logits = prof.conv(&mut self.final_head, &x, &km1, engine, train)?;
        let offsets = match &mut self.offset_head {
            Some(h) => {
                let z = h.hidden.forward(&x, &km1, engine, train, prof)?;
                Some(prof.conv(&mut h.out, &z, &km1, engine, train)?)
            }
            None => None,
        };
        let coords = Arc::clone(&levels[0]);
        self.state = train.then_some(ForwardState {
            manager: mgr,
            levels,
            up_channels,
        });
        Ok(NetOutput { logits, offsets, coords })
    }

    /// Accumulates parameter gradients for the last training forward.
    pub fn backward(&mut self, grad_logits: &Matrix, grad_offsets: Option<&Matrix>) -> Result<()> {
        let ForwardState {
            mut manager,
            levels,
            up_channels,
        } = self
            .state
            .take()
            .ok_or_else(|| Error::InvalidArgument("backward without a training forward".into()))?;
        let mgr = &mut manager;
        let km1 = mgr.kernel_map(&levels[0], &levels[0], 1, 1, false)?;
        let mut g = self.final_head.backward(grad_logits, &km1)?;
        match (&mut self.offset_head, grad_offsets) {
            (Some(h), Some(go)) => {
                let gz = h.out.backward(go, &km1)?;
                g.add_assign(&h.hidden.backward(gz, &km1)?)?;
            }
            (None, Some(_)) => {
                return Err(Error::InvalidArgument("offset gradient given but network has no offset head".into()))
            }
            (Some(_), None) | (None, None) => {}
        }
        let mut skip_grads: Vec<Option<Matrix>> = vec![None; LEVELS];
        for l in (0..LEVELS).rev() {
            let (hi, lo) = (LEVELS - l, LEVELS - l - 1);
            let km3 = mgr.kernel_map(&levels[lo], &levels[lo], 3, 1, false)?;
            let km1 = mgr.kernel_map(&levels[lo], &levels[lo], 1, 1, false)?;
            for b in self.dec_blocks[l].iter_mut().rev() {
                g = b.backward(g, &km3, &km1)?;
            }
            let uc = up_channels[l];
            let g_up = g.column_slice(0, uc);
            skip_grads[lo] = Some(g.column_slice(uc, g.cols() - uc));
            let km = mgr.kernel_map(&levels[hi], &levels[lo], 2, 2, true)?;
            g = self.up[l].backward(g_up, &km)?;
        }
        for l in (0..LEVELS).rev() {
            let km3 = mgr.kernel_map(&levels[l + 1], &levels[l + 1], 3, 1, false)?;
            let km1 = mgr.kernel_map(&levels[l + 1], &levels[l + 1], 1, 1, false)?;
            for b in self.enc_blocks[l].iter_mut().rev() {
                g = b.backward(g, &km3, &km1)?;
            }
            let km = mgr.kernel_map(&levels[l], &levels[l + 1], 2, 2, false)?;
            g = self.down[l].backward(g, &km)?;
            if let Some(s) = skip_grads[l].take() {
                g.add_assign(&s)?;
            }
        }
        let km = mgr.kernel_map(&levels[0], &levels[0], self.spec.stem_kernel, 1, false)?;
        self.stem.backward(g, &km)?;
        Ok(())
    }

    /// Every layer in forward order.
    pub fn layers(&self) -> Vec<LayerRef<'_>> {
        fn block<'a>(b: &'a BasicBlock, out: &mut Vec<LayerRef<'a>>) {
            out.push(LayerRef::Conv { conv: &b.conv1, prunable: true });
            out.push(LayerRef::Norm(&b.bn1));
            out.push(LayerRef::Conv { conv: &b.conv2, prunable: true });
            out.push(LayerRef::Norm(&b.bn2));
            if let Some((c, bn)) = &b.downsample {
                out.push(LayerRef::Conv { conv: c, prunable: true });
                out.push(LayerRef::Norm(bn));
            }
        }
        let mut out = Vec::new();
        let groups = std::iter::once(&self.stem)
            .map(|c| (c, &[][..]))
            .chain(self.down.iter().zip(&self.enc_blocks).map(|(c, b)| (c, b.as_slice())))
            .chain(self.up.iter().zip(&self.dec_blocks).map(|(c, b)| (c, b.as_slice())));
        for (cbr, blocks) in groups {
            out.push(LayerRef::Conv { conv: &cbr.conv, prunable: true });
            out.push(LayerRef::Norm(&cbr.bn));
            blocks.iter().for_each(|b| block(b, &mut out));
        }
        out.push(LayerRef::Conv { conv: &self.final_head, prunable: false });
        if let Some(h) = &self.offset_head {
            out.push(LayerRef::Conv { conv: &h.hidden.conv, prunable: false });
            out.push(LayerRef::Norm(&h.hidden.bn));
            out.push(LayerRef::Conv { conv: &h.out, prunable: false });
        }
        out
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(LayerRef<'a>)) {
        self.layers().into_iter().for_each(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(LayerMut<'_>)) {
        fn cbr(l: &mut ConvBnRelu, f: &mut dyn FnMut(LayerMut<'_>)) {
            f(LayerMut::Conv { conv: &mut l.conv, prunable: true });
            f(LayerMut::Norm(&mut l.bn));
        }
        fn block(b: &mut BasicBlock, f: &mut dyn FnMut(LayerMut<'_>)) {
            f(LayerMut::Conv { conv: &mut b.conv1, prunable: true });
            f(LayerMut::Norm(&mut b.bn1));
            f(LayerMut::Conv { conv: &mut b.conv2, prunable: true });
            f(LayerMut::Norm(&mut b.bn2));
            if let Some((c, bn)) = &mut b.downsample {
                f(LayerMut::Conv { conv: c, prunable: true });
                f(LayerMut::Norm(bn));
            }
        }
        cbr(&mut self.stem, f);
        for l in 0..LEVELS {
            cbr(&mut self.down[l], f);
            self.enc_blocks[l].iter_mut().for_each(|b| block(b, f));
        }
        for l in 0..LEVELS {
            cbr(&mut self.up[l], f);
            self.dec_blocks[l].iter_mut().for_each(|b| block(b, f));
        }
        f(LayerMut::Conv { conv: &mut self.final_head, prunable: false });
        if let Some(h) = &mut self.offset_head {
            f(LayerMut::Conv { conv: &mut h.hidden.conv, prunable: false });
            f(LayerMut::Norm(&mut h.hidden.bn));
            f(LayerMut::Conv { conv: &mut h.out, prunable: false });
        }
    }

    /// Every trainable tensor with its mask (conv weights only), in forward order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param, Option<&[bool]>)) {
        self.visit_mut(&mut |l| match l {
            LayerMut::Conv { conv, .. } => {
                let name = conv.name.clone();
                {
                    let (p, m) = conv.weights.param_and_mask_mut();
                    f(&name, p, Some(m));
                }
                if let Some(b) = &mut conv.bias {
                    f(&format!("{name}.bias"), b, None);
                }
            }
            LayerMut::Norm(bn) => {
                f(&format!("{}.gamma", bn.name), &mut bn.gamma, None);
                f(&format!("{}.beta", bn.name), &mut bn.beta, None);
            }
        });
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p, _| p.zero_grad());
    }

    /// Snapshots the initial weights of every convolution (first call only).
    pub fn capture_init(&mut self) {
        self.visit_mut(&mut |l| {
            if let LayerMut::Conv { conv, .. } = l {
                conv.weights.capture_init();
            }
        });
    }

    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        self.visit(&mut |l| match l {
            LayerRef::Conv { conv, prunable } => {
                let n = conv.weights.numel();
                let bias = conv.bias.as_ref().map_or(0, Param::len);
                c.total += n + bias;
                c.non_prunable += bias;
                if prunable {
                    c.prunable_total += n;
                    c.prunable_remaining += conv.weights.remaining();
                } else {
                    c.non_prunable += n;
                }
            }
            LayerRef::Norm(bn) => {
                c.total += bn.gamma.len() + bn.beta.len();
                c.non_prunable += bn.gamma.len() + bn.beta.len();
            }
        });
        c
    }

    /// Names of convolutions in forward order.
    pub fn conv_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit(&mut |l| {
            if let LayerRef::Conv { conv, .. } = l {
                v.push(conv.name.clone());
            }
        });
        v
    }

    pub fn conv(&self, name: &str) -> Option<&SparseConv> {
        self.layers().into_iter().find_map(|l| match l {
            LayerRef::Conv { conv, .. } if conv.name == name => Some(conv),
            _ => None,
        })
    }

    /// Names of all 3³ convolutions inside blocks `block{n}`.
    pub fn block_spatial_convs(&self, block: usize) -> Vec<String> {
        let prefix = format!("block{block}.");
        self.conv_names()
            .into_iter()
            .filter(|n| n.starts_with(&prefix) && !n.ends_with("downsample"))
            .collect()
    }

    /// First 3³ convolution of every residual block group, encoder to decoder.
    pub fn first_block_convs(&self) -> Vec<String> {
        (1..=2 * LEVELS).map(|b| format!("block{b}.0.conv1")).collect()
    }
}

/// Exact parameter count; `only_prunable` restricts it to unmasked prunable
/// weights, otherwise BN and head parameters are added on top.
pub fn count_params(net: &Network, only_prunable: bool) -> usize {
    let c = net.param_count();
    if only_prunable {
        c.prunable_remaining
    } else {
        c.remaining_total()
    }
}
