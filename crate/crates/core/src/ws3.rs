//! Weight-sparse spatially sparse (WS³) convolution.
//!
//! Each offset's masked weight matrix is compressed to CSR once. The forward
//! pass then runs, per offset: gather the input rows of the kernel map,
//! transpose them so that channels index rows, multiply with the CSR matrix
//! as the left operand, and scatter the transposed product back into the
//! output rows. Offsets with no pairs or no stored entries are skipped.
//!
//! Weights are stored `[offset][out][in]`, which is already the transposed
//! (output-major) layout the left-operand product needs.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel_map::{build_kernel_map, total_pairs, KernelMap};
use crate::layers::conv::{sparse_conv_features, ConvWeights};
use crate::matrix::Matrix;
use crate::sparse_tensor::{CoordSet, Coordinate, SparseTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Checks the structural invariants; used by tests and on load.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("invalid CSR: {m}")));
        if self.row_ptr.len() != self.nrows + 1 || self.row_ptr[0] != 0 {
            return bad("row_ptr length or origin");
        }
        if self.row_ptr[self.nrows] != self.nnz() || self.col_idx.len() != self.nnz() {
            return bad("row_ptr end != nnz");
        }
        for r in 0..self.nrows {
            let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
            if s > e {
                return bad("row_ptr decreasing");
            }
            let cols = &self.col_idx[s..e];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= self.ncols) {
                return bad("column indices not strictly increasing or out of range");
            }
        }
        Ok(())
    }

    pub fn densify(&self) -> Matrix {
        let mut m = Matrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                m.set(r, self.col_idx[k], self.values[k]);
            }
        }
        m
    }

    /// `y = A·x` for a single dense vector.
    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols {
            return Err(Error::shape("spmv", self.ncols, x.len()));
        }
        Ok((0..self.nrows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.values[k] * x[self.col_idx[k]])
                    .sum()
            })
            .collect())
    }
}

/// Compresses `w ⊙ m` (both `nrows × ncols`, row-major). Every entry with
/// `m = 1` is stored, including exact zeros, so the pattern is the mask.
pub fn csr_from_masked(w: &[f64], mask: &[bool], nrows: usize, ncols: usize) -> Result<CsrMatrix> {
    if w.len() != nrows * ncols {
        return Err(Error::shape("csr_from_masked (weights)", nrows * ncols, w.len()));
    }
    if mask.len() != w.len() {
        return Err(Error::shape("csr_from_masked (mask)", w.len(), mask.len()));
    }
    let mut csr = CsrMatrix::empty(nrows, ncols);
    for r in 0..nrows {
        for c in 0..ncols {
            let k = r * ncols + c;
            if mask[k] {
                csr.col_idx.push(c);
                csr.values.push(w[k]);
            }
        }
        csr.row_ptr[r + 1] = csr.values.len();
    }
    Ok(csr)
}

/// Scheduling of the sparse product. Both modes produce bit-identical
/// results; every output row keeps its ascending-column summation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Reference,
    /// Output rows of each product are computed in parallel.
    Fast,
}

fn spmm_rows(csr: &CsrMatrix, x: &[f64], width: usize, out: &mut [f64], r: usize) {
    let y = &mut out[..width];
    y.iter_mut().for_each(|v| *v = 0.0);
    for k in csr.row_ptr[r]..csr.row_ptr[r + 1] {
        let v = csr.values[k];
        let src = &x[csr.col_idx[k] * width..(csr.col_idx[k] + 1) * width];
        for (d, s) in y.iter_mut().zip(src) {
            *d += v * s;
        }
    }
}

fn spmm_into(csr: &CsrMatrix, x: &[f64], width: usize, out: &mut [f64], mode: ExecMode) {
    match mode {
        ExecMode::Reference => {
            for r in 0..csr.nrows {
                spmm_rows(csr, x, width, &mut out[r * width..(r + 1) * width], r);
            }
        }
        ExecMode::Fast => {
            out[..csr.nrows * width]
                .par_chunks_mut(width.max(1))
                .enumerate()
                .for_each(|(r, row)| spmm_rows(csr, x, width, row, r));
        }
    }
}

/// Sparse × dense product `csr (nrows × ncols) · x (ncols × B)`.
pub fn spmm(csr: &CsrMatrix, x: &Matrix) -> Result<Matrix> {
    if x.rows() != csr.ncols {
        return Err(Error::shape("spmm (inner dimension)", csr.ncols, x.rows()));
    }
    let mut out = Matrix::zeros(csr.nrows, x.cols());
    if x.cols() > 0 {
        spmm_into(csr, x.as_slice(), x.cols(), out.as_mut_slice(), ExecMode::Reference);
    }
    Ok(out)
}

/// Per-offset CSR matrices (`n_out × n_in`) of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Ws3Kernel {
    pub kernel_size: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub csr: Vec<CsrMatrix>,
    /// Mask density of each offset's source matrix.
    pub density: Vec<f64>,
}

impl Ws3Kernel {
    pub fn from_weights(w: &ConvWeights) -> Result<Self> {
        let vol = w.kernel_volume();
        let mut csr = Vec::with_capacity(vol);
        let mut density = Vec::with_capacity(vol);
        for i in 0..vol {
            let m = csr_from_masked(w.block(i), w.mask_block(i), w.n_out(), w.n_in())?;
            density.push(m.nnz() as f64 / w.block_len().max(1) as f64);
            csr.push(m);
        }
        Ok(Self {
            kernel_size: w.kernel_size(),
            n_in: w.n_in(),
            n_out: w.n_out(),
            csr,
            density,
        })
    }

    pub fn nnz(&self) -> usize {
        self.csr.iter().map(CsrMatrix::nnz).sum()
    }
}

/// Work accounting of one WS³ forward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ws3Stats {
    pub offsets_executed: usize,
    pub offsets_skipped: usize,
    pub pairs_processed: usize,
    /// Σ over executed offsets of `|M_i| · nnz_i`.
    pub macs: usize,
}

/// Pairs per tile so that the transposed gather and the product of one
/// tile stay cache resident.
fn pair_chunk(n_in: usize, n_out: usize) -> usize {
    const TILE_BYTES: usize = 64 * 1024;
    (TILE_BYTES / (8 * (n_in + n_out).max(1))).max(16)
}

pub fn ws3_conv_features(x: &Matrix, kernel: &Ws3Kernel, km: &KernelMap) -> Result<(Matrix, Ws3Stats)> {
    ws3_conv_features_with(x, kernel, km, ExecMode::Reference)
}

pub fn ws3_conv_features_with(
    x: &Matrix,
    kernel: &Ws3Kernel,
    km: &KernelMap,
    mode: ExecMode,
) -> Result<(Matrix, Ws3Stats)> {
    if kernel.csr.len() != km.volume() {
        return Err(Error::shape("ws3 conv (kernel volume)", km.volume(), kernel.csr.len()));
    }
    if x.cols() != kernel.n_in {
        return Err(Error::shape("ws3 conv (input channels)", kernel.n_in, x.cols()));
    }
    if x.rows() != km.n_in {
        return Err(Error::shape("ws3 conv (input rows vs kernel map)", km.n_in, x.rows()));
    }
    let (n_in, n_out) = (kernel.n_in, kernel.n_out);
    let mut out = Matrix::zeros(km.n_out, n_out);
    let mut stats = Ws3Stats::default();
    let chunk = pair_chunk(n_in, n_out).min(km.max_pairs().max(1));
    // gather buffer (already transposed: n_in × chunk) and product buffer (n_out × chunk)
    let mut gathered_t = vec![0.0; chunk * n_in];
    let mut product = vec![0.0; chunk * n_out];
    for (pairs, csr) in km.pairs.iter().zip(&kernel.csr) {
        if pairs.is_empty() || csr.nnz() == 0 {
            stats.offsets_skipped += 1;
            continue;
        }
        stats.offsets_executed += 1;
        stats.pairs_processed += pairs.len();
        stats.macs += pairs.len() * csr.nnz();
        for (ins, outs) in pairs.input.chunks(chunk).zip(pairs.output.chunks(chunk)) {
            let m = ins.len();
            // gather + transpose: column j of Gᵀ is input row ins[j]
            let gt = &mut gathered_t[..n_in * m];
            for (j, &a) in ins.iter().enumerate() {
                for (c, &v) in x.row(a as usize).iter().enumerate() {
                    gt[c * m + j] = v;
                }
            }
            // Y = csr · Gᵀ   (n_out × m)
            let y = &mut product[..n_out * m];
            spmm_into(csr, gt, m, y, mode);
            // scatter Yᵀ into output rows, skipping empty CSR rows
            let dst = out.as_mut_slice();
            for r in 0..n_out {
                if csr.row_ptr[r] == csr.row_ptr[r + 1] {
                    continue;
                }
                let yr = &y[r * m..(r + 1) * m];
                for (j, &b) in outs.iter().enumerate() {
                    dst[b as usize * n_out + r] += yr[j];
                }
            }
        }
    }
    Ok((out, stats))
}

/// Tensor-level WS³ convolution onto `out_coords`.
pub fn ws3_conv_forward(
    t: &SparseTensor,
    kernel: &Ws3Kernel,
    km: &KernelMap,
    out_coords: &Arc<CoordSet>,
) -> Result<SparseTensor> {
    if km.in_id != t.coords.id() || km.out_id != out_coords.id() {
        return Err(Error::InvalidArgument(
            "kernel map was built for different coordinate sets".into(),
        ));
    }
    let (features, _) = ws3_conv_features(&t.features, kernel, km)?;
    SparseTensor::new(Arc::clone(out_coords), features)
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub layer: String,
    pub n_in: usize,
    pub n_out: usize,
    pub kernel_size: usize,
    /// Number of occupied voxels.
    pub voxels: usize,
    /// Fraction of the bounding grid that is occupied.
    pub fill: f64,
    /// Fraction of weights masked out.
    pub sparsity: f64,
    pub reps: usize,
    pub seed: u64,
    pub mode: ExecMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            layer: "synthetic".into(),
            n_in: 64,
            n_out: 64,
            kernel_size: 3,
            voxels: 10_000,
            fill: 0.3,
            sparsity: 0.99,
            reps: 5,
            seed: 0,
            mode: ExecMode::Reference,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub layer: String,
    pub n_in: usize,
    pub n_out: usize,
    pub occupancy: usize,
    pub sparsity: f64,
    pub dense_ms: f64,
    pub ws3_ms: f64,
    pub speedup: f64,
    pub total_pairs: usize,
    pub dense_macs: usize,
    pub ws3_macs: usize,
    pub max_abs_diff: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "layer,N_in,N_out,occupancy,sparsity,dense_ms,ws3_ms,speedup,dense_macs,ws3_macs";

    /// MACs avoided by skipping masked weights.
    pub fn saved_macs(&self) -> usize {
        self.dense_macs - self.ws3_macs
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{},{}",
            self.layer,
            self.n_in,
            self.n_out,
            self.occupancy,
            self.sparsity,
            self.dense_ms,
            self.ws3_ms,
            self.speedup,
            self.dense_macs,
            self.ws3_macs
        )
    }
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Random occupancy of `voxels` distinct cells in a cube sized for `fill`.
pub fn random_occupancy(voxels: usize, fill: f64, rng: &mut impl Rng) -> Result<CoordSet> {
    if !(fill > 0.0 && fill <= 1.0) {
        return Err(Error::InvalidArgument(format!("fill must be in (0, 1], got {fill}")));
    }
    let side = ((voxels as f64 / fill).cbrt().ceil() as usize).max(1);
    let mut cells: Vec<usize> = (0..side * side * side).collect();
    if voxels > cells.len() {
        return Err(Error::InvalidArgument("more voxels than grid cells".into()));
    }
    let (chosen, _) = cells.partial_shuffle(rng, voxels);
    let mut coords: Vec<Coordinate> = chosen
        .iter()
        .map(|&c| {
            let (x, y, z) = (c / (side * side), (c / side) % side, c % side);
            Coordinate::new(0, [x as i32, y as i32, z as i32])
        })
        .collect();
    coords.sort_unstable();
    CoordSet::new(coords, 1)
}

/// Times the dense-weight and WS³ paths of one synthetic layer on identical
/// inputs: one warm-up run each, then the median of `reps` runs.
pub fn bench_layer(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < 3 {
        return Err(Error::InvalidArgument(format!("reps must be >= 3, got {}", cfg.reps)));
    }
    if !(0.0..1.0).contains(&cfg.sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity must be in [0, 1), got {}", cfg.sparsity)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = random_occupancy(cfg.voxels, cfg.fill, &mut rng)?;
    let km = build_kernel_map(&coords, &coords, cfg.kernel_size, 1, false)?;
    let mut w = ConvWeights::kaiming_uniform(cfg.kernel_size, cfg.n_in, cfg.n_out, &mut rng);
    let n = w.numel();
    let n_pruned = (cfg.sparsity * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut mask = vec![true; n];
    for &i in &order[..n_pruned] {
        mask[i] = false;
    }
    w.set_mask(mask)?;
    w.compile_csr()?;
    let kernel = w.csr().expect("compiled above");
    let x = Matrix::from_vec(
        coords.len(),
        cfg.n_in,
        (0..coords.len() * cfg.n_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;

    let dense_ref = sparse_conv_features(&x, &w, &km)?;
    let (ws3_ref, stats) = ws3_conv_features_with(&x, kernel, &km, cfg.mode)?;
    let max_abs_diff = dense_ref.max_abs_diff(&ws3_ref);

    let mut dense_t = Vec::with_capacity(cfg.reps);
    let mut ws3_t = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        let y = sparse_conv_features(&x, &w, &km)?;
        dense_t.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&y);
        let t0 = Instant::now();
        let y = ws3_conv_features_with(&x, kernel, &km, cfg.mode)?;
        ws3_t.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&y);
    }
    let dense_ms = median(&mut dense_t);
    let ws3_ms = median(&mut ws3_t);
    let pairs = total_pairs(&km);
    Ok(BenchReport {
        layer: cfg.layer.clone(),
        n_in: cfg.n_in,
        n_out: cfg.n_out,
        occupancy: coords.len(),
        sparsity: cfg.sparsity,
        dense_ms,
        ws3_ms,
        speedup: dense_ms / ws3_ms,
        total_pairs: pairs,
        dense_macs: pairs * cfg.n_in * cfg.n_out,
        ws3_macs: stats.macs,
        max_abs_diff,
    })
}
