//! Dense-weight spatially sparse convolution.
//!
//! For each kernel offset the input rows named by the kernel map are
//! gathered into a contiguous block, multiplied by that offset's weight
//! matrix, and scatter-added into the output rows.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel_map::KernelMap;
use crate::matrix::{gemm, MatRef, Matrix};
use crate::sparse_tensor::{CoordSet, SparseTensor, DIM};
use crate::ws3::{ws3_conv_features, Ws3Kernel};

/// A trainable tensor with its gradient and momentum buffers.
///
/// `grad` and `velocity` are allocated on first use so that large untrained
/// networks only pay for their values.
#[derive(Debug, Clone, Default)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        Self {
            value,
            grad: Vec::new(),
            velocity: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// `K^3` stacked `n_out × n_in` weight matrices with a binary pruning mask.
///
/// Layout is `[offset][out][in]`, row-major. Masked-out entries are kept at
/// exactly zero in `weight`, so the effective weight `W ⊙ m` is `W` itself.
#[derive(Debug, Clone)]
pub struct ConvWeights {
    kernel_size: usize,
    n_in: usize,
    n_out: usize,
    weight: Param,
    mask: Vec<bool>,
    w_init: Option<Vec<f64>>,
    csr: Option<Ws3Kernel>,
}

impl ConvWeights {
    pub fn zeros(kernel_size: usize, n_in: usize, n_out: usize) -> Self {
        let n = kernel_size.pow(DIM as u32) * n_in * n_out;
        Self {
            kernel_size,
            n_in,
            n_out,
            weight: Param::new(vec![0.0; n]),
            mask: vec![true; n],
            w_init: None,
            csr: None,
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)` with `fan_in = K^3 · n_in`.
    pub fn kaiming_uniform<R: Rng>(kernel_size: usize, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(kernel_size, n_in, n_out);
        let fan_in = (kernel_size.pow(DIM as u32) * n_in).max(1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for v in &mut w.weight.value {
            *v = rng.gen_range(-bound..bound);
        }
        w
    }

    pub fn from_values(kernel_size: usize, n_in: usize, n_out: usize, values: Vec<f64>) -> Result<Self> {
        let mut w = Self::zeros(kernel_size, n_in, n_out);
        if values.len() != w.weight.len() {
            return Err(Error::shape("ConvWeights::from_values", w.weight.len(), values.len()));
        }
        w.weight.value = values;
        Ok(w)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel_size.pow(DIM as u32)
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn block_len(&self) -> usize {
        self.n_in * self.n_out
    }

    pub fn numel(&self) -> usize {
        self.weight.len()
    }

    /// Unmasked entry count.
    pub fn remaining(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn values(&self) -> &[f64] {
        &self.weight.value
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn param(&self) -> &Param {
        &self.weight
    }

    /// Weight matrix of offset `i` (`n_out × n_in`).
    pub fn block(&self, i: usize) -> &[f64] {
        let n = self.block_len();
        &self.weight.value[i * n..(i + 1) * n]
    }

    pub fn mask_block(&self, i: usize) -> &[bool] {
        let n = self.block_len();
        &self.mask[i * n..(i + 1) * n]
    }

    /// Mutable access to the parameter and the mask; drops any compiled CSR.
    pub fn param_and_mask_mut(&mut self) -> (&mut Param, &[bool]) {
        self.csr = None;
        (&mut self.weight, &self.mask)
    }

    /// Mutable access to the values; the caller must re-apply the mask.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.csr = None;
        &mut self.weight.value
    }

    /// Replaces the mask (monotonicity is the caller's business) and zeroes
    /// every newly masked weight and its momentum.
    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.mask.len() {
            return Err(Error::shape("ConvWeights::set_mask", self.mask.len(), mask.len()));
        }
        self.mask = mask;
        self.apply_mask();
        Ok(())
    }

    /// Masks out a single entry.
    pub fn prune(&mut self, flat: usize) {
        self.mask[flat] = false;
        self.weight.value[flat] = 0.0;
        if let Some(v) = self.weight.velocity.get_mut(flat) {
            *v = 0.0;
        }
        self.csr = None;
    }

    pub fn apply_mask(&mut self) {
        self.csr = None;
        let Param { value, velocity, grad } = &mut self.weight;
        for (i, &m) in self.mask.iter().enumerate() {
            if !m {
                value[i] = 0.0;
                if let Some(v) = velocity.get_mut(i) {
                    *v = 0.0;
                }
                if let Some(g) = grad.get_mut(i) {
                    *g = 0.0;
                }
            }
        }
    }

    /// Records the current weights as the initial snapshot. Later calls are
    /// no-ops: the snapshot is immutable once taken.
    pub fn capture_init(&mut self) {
        if self.w_init.is_none() {
            self.w_init = Some(self.weight.value.clone());
        }
    }

    pub fn w_init(&self) -> Option<&[f64]> {
        self.w_init.as_deref()
    }

    pub(crate) fn set_w_init(&mut self, w: Option<Vec<f64>>) -> Result<()> {
        if let Some(v) = &w {
            if v.len() != self.numel() {
                return Err(Error::shape("ConvWeights::set_w_init", self.numel(), v.len()));
            }
        }
        self.w_init = w;
        Ok(())
    }

    /// Builds (or rebuilds) the per-offset CSR form used by WS³ inference.
    pub fn compile_csr(&mut self) -> Result<&Ws3Kernel> {
        let kernel = Ws3Kernel::from_weights(self)?;
        Ok(self.csr.insert(kernel))
    }

    pub fn csr(&self) -> Option<&Ws3Kernel> {
        self.csr.as_ref()
    }

    /// Flat index of `(offset, out, in)`.
    #[inline]
    pub fn flat_index(&self, offset: usize, out: usize, inp: usize) -> usize {
        offset * self.block_len() + out * self.n_in + inp
    }
}

fn check_conv_shapes(x: &Matrix, w: &ConvWeights, km: &KernelMap) -> Result<()> {
    if x.cols() != w.n_in() {
        return Err(Error::shape("sparse conv (input channels)", w.n_in(), x.cols()));
    }
    if x.rows() != km.n_in {
        return Err(Error::shape("sparse conv (input rows vs kernel map)", km.n_in, x.rows()));
    }
    if km.volume() != w.kernel_volume() {
        return Err(Error::shape(
            "sparse conv (kernel volume)",
            w.kernel_volume(),
            km.volume(),
        ));
    }
    Ok(())
}

/// Copies `src[rows[j]]` into row `j` of `dst` (`dst` is `rows.len() × width`).
#[inline]
pub(crate) fn gather_rows(src: &Matrix, rows: &[u32], dst: &mut Vec<f64>) {
    let width = src.cols();
    dst.clear();
    dst.reserve(rows.len() * width);
    for &r in rows {
        dst.extend_from_slice(src.row(r as usize));
    }
}

/// Adds row `j` of `block` into `dst[rows[j]]`.
#[inline]
pub(crate) fn scatter_add_rows(block: &[f64], rows: &[u32], dst: &mut Matrix) {
    let width = dst.cols();
    for (j, &r) in rows.iter().enumerate() {
        let src = &block[j * width..(j + 1) * width];
        for (d, s) in dst.row_mut(r as usize).iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Feature-level dense-weight sparse convolution; returns `km.n_out × n_out`.
pub fn sparse_conv_features(x: &Matrix, w: &ConvWeights, km: &KernelMap) -> Result<Matrix> {
    check_conv_shapes(x, w, km)?;
    let (n_in, n_out) = (w.n_in(), w.n_out());
    let mut out = Matrix::zeros(km.n_out, n_out);
    let cap = km.max_pairs();
    let mut gathered = Vec::with_capacity(cap * n_in);
    let mut partial = vec![0.0; cap * n_out];
    for (i, pairs) in km.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let m = pairs.len();
        gather_rows(x, &pairs.input, &mut gathered);
        // (m × n_in) · (n_in × n_out) with W_iᵀ read through strides
        gemm(
            MatRef::row_major(&gathered, m, n_in),
            MatRef::transposed(w.block(i), n_out, n_in),
            0.0,
            &mut partial[..m * n_out],
            n_out,
        );
        scatter_add_rows(&partial[..m * n_out], &pairs.output, &mut out);
    }
    Ok(out)
}

/// Gradients of [`sparse_conv_features`]: `(grad_input, grad_weight)`, with
/// the weight gradient already multiplied by the mask.
pub fn sparse_conv_backward(
    grad_out: &Matrix,
    x: &Matrix,
    w: &ConvWeights,
    km: &KernelMap,
) -> Result<(Matrix, Vec<f64>)> {
    check_conv_shapes(x, w, km)?;
    let (n_in, n_out) = (w.n_in(), w.n_out());
    if grad_out.rows() != km.n_out || grad_out.cols() != n_out {
        return Err(Error::shape(
            "sparse conv backward (grad_out)",
            format!("{}x{}", km.n_out, n_out),
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
        ));
    }
    let mut grad_in = Matrix::zeros(x.rows(), n_in);
    let mut grad_w = vec![0.0; w.numel()];
    let cap = km.max_pairs();
    let mut gx = Vec::with_capacity(cap * n_in);
    let mut gy = Vec::with_capacity(cap * n_out);
    let mut gin = vec![0.0; cap * n_in];
    let block = w.block_len();
    for (i, pairs) in km.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let m = pairs.len();
        gather_rows(x, &pairs.input, &mut gx);
        gather_rows(grad_out, &pairs.output, &mut gy);
        // dW_i = GYᵀ · GX  (n_out × n_in)
        gemm(
            MatRef::transposed(&gy, m, n_out),
            MatRef::row_major(&gx, m, n_in),
            0.0,
            &mut grad_w[i * block..(i + 1) * block],
            n_in,
        );
        // dX_gathered = GY · W_i  (m × n_in)
        gemm(
            MatRef::row_major(&gy, m, n_out),
            MatRef::row_major(w.block(i), n_out, n_in),
            0.0,
            &mut gin[..m * n_in],
            n_in,
        );
        scatter_add_rows(&gin[..m * n_in], &pairs.input, &mut grad_in);
    }
    for (g, &m) in grad_w.iter_mut().zip(w.mask()) {
        if !m {
            *g = 0.0;
        }
    }
    Ok((grad_in, grad_w))
}

/// Tensor-level convolution producing features on `out_coords`.
pub fn sparse_conv_forward(
    t: &SparseTensor,
    w: &ConvWeights,
    km: &KernelMap,
    out_coords: &Arc<CoordSet>,
) -> Result<SparseTensor> {
    if km.in_id != t.coords.id() || km.out_id != out_coords.id() {
        return Err(Error::InvalidArgument(
            "kernel map was built for different coordinate sets".into(),
        ));
    }
    let features = sparse_conv_features(&t.features, w, km)?;
    SparseTensor::new(Arc::clone(out_coords), features)
}

/// Which arithmetic path a convolution runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvEngine {
    /// Gather → dense GEMM → scatter with the masked dense weights.
    #[default]
    Dense,
    /// Gather → transpose → CSR SpMM → scatter. Needs compiled CSR weights.
    Ws3,
}

/// A convolution layer: weights, geometry, optional bias, and the input
/// cached for backward.
#[derive(Debug, Clone)]
pub struct SparseConv {
    pub name: String,
    pub weights: ConvWeights,
    pub stride: i32,
    pub transposed: bool,
    pub bias: Option<Param>,
    cache: Option<Matrix>,
}

impl SparseConv {
    pub fn new(name: impl Into<String>, weights: ConvWeights, stride: i32, transposed: bool) -> Self {
        Self {
            name: name.into(),
            weights,
            stride,
            transposed,
            bias: None,
            cache: None,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = Some(Param::new(vec![0.0; self.weights.n_out()]));
        self
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.kernel_size()
    }

    pub fn forward(&mut self, x: &Matrix, km: &KernelMap, engine: ConvEngine, train: bool) -> Result<Matrix> {
        let mut out = match engine {
            ConvEngine::Dense => sparse_conv_features(x, &self.weights, km)?,
            ConvEngine::Ws3 => {
                let kernel = self.weights.csr().ok_or_else(|| {
                    Error::InvalidArgument(format!("layer {:?} has no compiled CSR weights", self.name))
                })?;
                ws3_conv_features(x, kernel, km)?.0
            }
        };
        if let Some(b) = &self.bias {
            for r in 0..out.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(&b.value) {
                    *o += bv;
                }
            }
        }
        self.cache = train.then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Matrix, km: &KernelMap) -> Result<Matrix> {
        let x = self.cache.take().ok_or_else(|| {
            Error::InvalidArgument(format!("backward on {:?} without a training forward", self.name))
        })?;
        let (grad_in, grad_w) = sparse_conv_backward(grad_out, &x, &self.weights, km)?;
        let (param, _) = self.weights.param_and_mask_mut();
        for (g, d) in param.grad_mut().iter_mut().zip(&grad_w) {
            *g += d;
        }
        if let Some(b) = &mut self.bias {
            let g = b.grad_mut();
            for r in 0..grad_out.rows() {
                for (gb, go) in g.iter_mut().zip(grad_out.row(r)) {
                    *gb += go;
                }
            }
        }
        Ok(grad_in)
    }
}
