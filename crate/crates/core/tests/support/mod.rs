//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ws3_core::kernel_map::{CoordinateManager, KernelMap};
use ws3_core::layers::conv::ConvWeights;
use ws3_core::layers::network::{Mode, Network};
use ws3_core::matrix::Matrix;
use ws3_core::sparse_tensor::{CoordSet, Coordinate, SparseTensor};
use ws3_core::training::loss::{loss_insseg, loss_semseg};

/// Relative error with a floor of `1e-5` on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

pub fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random occupancy of a `grid³` volume over `batches` scenes; at least one voxel.
pub fn random_coords(rng: &mut ChaCha8Rng, grid: i32, fill: f64, batches: u32) -> Vec<Coordinate> {
    let mut v = Vec::new();
    for b in 0..batches {
        for x in 0..grid {
            for y in 0..grid {
                for z in 0..grid {
                    if rng.gen_bool(fill) {
                        v.push(Coordinate::new(b, [x, y, z]));
                    }
                }
            }
        }
    }
    if v.is_empty() {
        v.push(Coordinate::new(0, [rng.gen_range(0..grid), 0, 0]));
    }
    v
}

/// Kernel offsets written out independently of the library.
fn oracle_offsets(k: i32) -> Vec<[i32; 3]> {
    let lo = if k % 2 == 1 { -(k - 1) / 2 } else { 0 };
    let mut v = Vec::new();
    for x in lo..lo + k {
        for y in lo..lo + k {
            for z in lo..lo + k {
                v.push([x, y, z]);
            }
        }
    }
    v
}

/// Dense voxel grid of feature vectors, zero outside the occupied cells.
struct DenseGrid {
    lo: i32,
    side: i32,
    batches: u32,
    ch: usize,
    data: Vec<f64>,
}

impl DenseGrid {
    fn new(lo: i32, side: i32, batches: u32, ch: usize) -> Self {
        let n = batches as usize * (side as usize).pow(3) * ch;
        Self { lo, side, batches, ch, data: vec![0.0; n] }
    }

    fn index(&self, b: u32, p: [i32; 3]) -> Option<usize> {
        let q = p.map(|v| v - self.lo);
        if b >= self.batches || q.iter().any(|&v| v < 0 || v >= self.side) {
            return None;
        }
        let s = self.side as usize;
        let cell = ((b as usize * s + q[0] as usize) * s + q[1] as usize) * s + q[2] as usize;
        Some(cell * self.ch)
    }

    fn cell(&self, b: u32, p: [i32; 3]) -> Option<&[f64]> {
        self.index(b, p).map(|i| &self.data[i..i + self.ch])
    }

    fn cell_mut(&mut self, b: u32, p: [i32; 3]) -> Option<&mut [f64]> {
        let ch = self.ch;
        self.index(b, p).map(move |i| &mut self.data[i..i + ch])
    }
}

/// `out += W_i · x` with `W_i` stored `[out][in]`.
fn matvec_acc(w: &ConvWeights, i: usize, x: &[f64], out: &mut [f64]) {
    let (n_in, n_out) = (w.n_in(), w.n_out());
    let blk = w.block(i);
    for o in 0..n_out {
        let mut acc = 0.0;
        for c in 0..n_in {
            acc += blk[o * n_in + c] * x[c];
        }
        out[o] += acc;
    }
}

/// Dense zero-padded-grid convolution evaluated at `out_coords`.
///
/// Forward: `y[p] = Σ_i W_i · X[p + off_i · in_stride]`.
/// Transposed: every input cell `c` scatters `W_i · X[c]` into
/// `c + off_i · out_stride`.
pub fn dense_grid_conv(
    input: &CoordSet,
    x: &Matrix,
    out_coords: &CoordSet,
    w: &ConvWeights,
    transposed: bool,
) -> Matrix {
    let k = w.kernel_size() as i32;
    let offs = oracle_offsets(k);
    let all = input.coords().iter().chain(out_coords.coords());
    let lo = all.clone().flat_map(|c| c.xyz).min().unwrap_or(0) - 4 * k;
    let hi = all.clone().flat_map(|c| c.xyz).max().unwrap_or(0) + 4 * k;
    let batches = all.map(|c| c.batch).max().unwrap_or(0) + 1;
    let side = hi - lo + 1;
    let mut grid = DenseGrid::new(lo, side, batches, w.n_in());
    for (r, c) in input.coords().iter().enumerate() {
        grid.cell_mut(c.batch, c.xyz).unwrap().copy_from_slice(x.row(r));
    }
    let mut out = Matrix::zeros(out_coords.len(), w.n_out());
    if !transposed {
        let s = input.stride();
        for (r, o) in out_coords.coords().iter().enumerate() {
            for (i, off) in offs.iter().enumerate() {
                let p = [o.xyz[0] + off[0] * s, o.xyz[1] + off[1] * s, o.xyz[2] + off[2] * s];
                if let Some(v) = grid.cell(o.batch, p) {
                    matvec_acc(w, i, v, out.row_mut(r));
                }
            }
        }
    } else {
        let s = out_coords.stride();
        let mut dense_out = DenseGrid::new(lo, side, batches, w.n_out());
        let si = input.stride();
        for b in 0..batches {
            for gx in (lo..=hi).filter(|v| v.rem_euclid(si) == 0) {
                for gy in (lo..=hi).filter(|v| v.rem_euclid(si) == 0) {
                    for gz in (lo..=hi).filter(|v| v.rem_euclid(si) == 0) {
                        let v = grid.cell(b, [gx, gy, gz]).unwrap().to_vec();
                        if v.iter().all(|&a| a == 0.0) {
                            continue;
                        }
                        for (i, off) in offs.iter().enumerate() {
                            let q = [gx + off[0] * s, gy + off[1] * s, gz + off[2] * s];
                            if let Some(dst) = dense_out.cell_mut(b, q) {
                                matvec_acc(w, i, &v, dst);
                            }
                        }
                    }
                }
            }
        }
        for (r, o) in out_coords.coords().iter().enumerate() {
            out.row_mut(r).copy_from_slice(dense_out.cell(o.batch, o.xyz).unwrap());
        }
    }
    out
}

/// One conv configuration: `(K, s, transposed)`.
pub type ConvCase = (usize, i32, bool);

pub const CONV_CASES: [ConvCase; 4] = [(3, 1, false), (2, 2, false), (1, 1, false), (2, 2, true)];

/// Random input/output sets and the kernel map of one case.
pub struct ConvFixture {
    pub input: Arc<CoordSet>,
    pub output: Arc<CoordSet>,
    pub km: Arc<KernelMap>,
    pub x: Matrix,
    pub w: ConvWeights,
}

pub fn conv_fixture(rng: &mut ChaCha8Rng, case: ConvCase, grid: i32, n_in: usize, n_out: usize) -> ConvFixture {
    let (k, s, transposed) = case;
    let fill = rng.gen_range(0.05..0.6);
    let batches = rng.gen_range(1..=2);
    let fine = Arc::new(CoordSet::new(random_coords(rng, grid, fill, batches), 1).unwrap());
    let mut mgr = CoordinateManager::new(Arc::clone(&fine));
    let coarse = mgr.coords_at(s).unwrap();
    let (input, output) = if transposed { (coarse, fine) } else { (fine, coarse) };
    let km = mgr.kernel_map(&input, &output, k, s, transposed).unwrap();
    let x = rand_matrix(input.len(), n_in, rng);
    let w = ConvWeights::kaiming_uniform(k, n_in, n_out, rng);
    ConvFixture { input, output, km, x, w }
}

/// Central-difference derivative of `f` at `x[k]`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[k] += h;
    let fp = f(&p);
    p[k] = x[k] - h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Largest relative error between the analytic gradient and central
/// differences over the listed coordinates.
pub fn max_fd_error(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: &[usize], h: f64) -> f64 {
    coords
        .iter()
        .map(|&k| rel_err(central_diff(f, x, k, h), analytic[k]))
        .fold(0.0, f64::max)
}

/// Full-network gradient check on a training-mode forward with the
/// semantic (or, with an offset head, instance) loss. BN affine parameters
/// are randomized first so no ReLU input sits exactly on its kink. Returns
/// the largest relative error over the smooth picks.
pub fn network_fd_check(net: &mut Network, input: &SparseTensor, labels: &[u32], rng: &mut ChaCha8Rng, per_tensor: usize) -> FdReport {
    net.visit_params(&mut |name, p, _| {
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        }
    });
    let n = input.len();
    let targets = rand_matrix(n, 3, rng);
    let fg: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let loss = |net: &mut Network| -> (f64, Matrix, Option<Matrix>) {
        let out = net.forward(input, Mode::Train).unwrap();
        match &out.offsets {
            Some(p) => {
                let l = loss_insseg(&out.logits, labels, p, &targets, &fg).unwrap();
                (l.loss, l.grad_logits, l.grad_offsets)
            }
            None => {
                let (l, g) = loss_semseg(&out.logits, labels).unwrap();
                (l, g, None)
            }
        }
    };
    net.zero_grad();
    let (_, gl, go) = loss(net);
    net.backward(&gl, go.as_ref()).unwrap();
    let mut picks: Vec<(String, usize, f64)> = Vec::new();
    net.visit_params(&mut |name, p, _| {
        for _ in 0..per_tensor {
            let i = rng.gen_range(0..p.len());
            picks.push((name.to_string(), i, p.grad.get(i).copied().unwrap_or(0.0)));
        }
    });
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    for (name, i, an) in &picks {
        let mut eval = |delta: f64| {
            net.visit_params(&mut |n, p, _| {
                if n == name {
                    p.value[*i] += delta;
                }
            });
            let l = loss(net).0;
            net.visit_params(&mut |n, p, _| {
                if n == name {
                    p.value[*i] -= delta;
                }
            });
            l
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let fd_half = (eval(h / 2.0) - eval(-h / 2.0)) / h;
        if rel_err(fd, fd_half) > 1e-4 {
            kinks += 1;
            continue;
        }
        worst = worst.max(rel_err(fd, *an));
    }
    FdReport { max_rel_err: worst, checked: picks.len() - kinks, kinks }
}

/// Outcome of [`network_fd_check`]. Parameters whose central difference is
/// inconsistent between `h` and `h/2` straddle a ReLU kink and are counted
/// separately.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
}

/// Map from coordinate to row, built without the library's hash index.
pub fn row_lookup(set: &CoordSet) -> HashMap<Coordinate, usize> {
    set.coords().iter().enumerate().map(|(i, c)| (*c, i)).collect()
}
