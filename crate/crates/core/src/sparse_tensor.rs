//! COO sparse tensors over voxel coordinates.
//!
//! A [`SparseTensor`] pairs a shared, immutable [`CoordSet`] (coordinates
//! plus their hash index) with a dense feature matrix whose row `n` belongs
//! to `coords[n]`. Rows are always kept in lexicographic `(batch, x, y, z)`
//! order when produced by this module.

use std::collections::{BTreeMap, HashMap};
use std::hash::{BuildHasher, Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Number of spatial dimensions.
pub const DIM: usize = 3;

/// Seed used by [`CoordBuildHasher::default`].
pub const DEFAULT_HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coordinate {
    pub batch: u32,
    pub xyz: [i32; DIM],
}

impl Coordinate {
    pub const fn new(batch: u32, xyz: [i32; DIM]) -> Self {
        Self { batch, xyz }
    }

    /// `self + offset * scale`, batch unchanged.
    #[inline]
    pub fn shifted(&self, offset: &[i32; DIM], scale: i32) -> Self {
        let mut xyz = self.xyz;
        for d in 0..DIM {
            xyz[d] += offset[d] * scale;
        }
        Self {
            batch: self.batch,
            xyz,
        }
    }
}

impl Hash for Coordinate {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u32(self.batch);
        for v in self.xyz {
            state.write_i32(v);
        }
    }
}

/// Integer hash over the `(batch, x, y, z)` tuple.
///
/// Each written word `w` updates the state as
/// `state = (rotl(state, 5) ^ w) * 0x517cc1b727220a95` (wrapping), and
/// `finish` applies the splitmix64 finalizer. The initial state is the seed,
/// so runs with the same seed produce identical bucket layouts.
#[derive(Debug, Clone, Copy)]
pub struct CoordHasher {
    state: u64,
}

impl CoordHasher {
    #[inline]
    fn mix(&mut self, word: u64) {
        self.state = (self.state.rotate_left(5) ^ word).wrapping_mul(0x517c_c1b7_2722_0a95);
    }
}

impl Hasher for CoordHasher {
    fn finish(&self) -> u64 {
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            self.mix(u64::from_le_bytes(buf));
        }
    }

    #[inline]
    fn write_u32(&mut self, i: u32) {
        self.mix(i as u64);
    }

    #[inline]
    fn write_i32(&mut self, i: i32) {
        self.mix(i as u32 as u64);
    }

    #[inline]
    fn write_u64(&mut self, i: u64) {
        self.mix(i);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoordBuildHasher {
    pub seed: u64,
}

impl Default for CoordBuildHasher {
    fn default() -> Self {
        Self {
            seed: DEFAULT_HASH_SEED,
        }
    }
}

impl BuildHasher for CoordBuildHasher {
    type Hasher = CoordHasher;

    fn build_hasher(&self) -> CoordHasher {
        CoordHasher { state: self.seed }
    }
}

pub type CoordIndex = HashMap<Coordinate, usize, CoordBuildHasher>;

/// Maps each coordinate to its row. Fails on the first repeated coordinate.
pub fn build_index(coords: &[Coordinate]) -> Result<CoordIndex> {
    let mut index = CoordIndex::with_capacity_and_hasher(coords.len(), CoordBuildHasher::default());
    for (row, c) in coords.iter().enumerate() {
        if let Some(&first) = index.get(c) {
            return Err(Error::DuplicateCoordinate {
                coord: *c,
                first,
                second: row,
            });
        }
        index.insert(*c, row);
    }
    Ok(index)
}

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// An immutable coordinate set at one tensor stride, with its hash index.
#[derive(Debug)]
pub struct CoordSet {
    id: u64,
    stride: i32,
    coords: Vec<Coordinate>,
    index: CoordIndex,
}

impl CoordSet {
    pub fn new(coords: Vec<Coordinate>, stride: i32) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidArgument(format!("stride must be >= 1, got {stride}")));
        }
        if let Some(c) = coords
            .iter()
            .find(|c| c.xyz.iter().any(|v| v.rem_euclid(stride) != 0))
        {
            return Err(Error::Stride(format!(
                "coordinate {c:?} is not a multiple of stride {stride}"
            )));
        }
        let index = build_index(&coords)?;
        Ok(Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            stride,
            coords,
            index,
        })
    }

    /// Process-unique identity, used as a cache key for kernel maps.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn stride(&self) -> i32 {
        self.stride
    }

    pub fn coords(&self) -> &[Coordinate] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn lookup(&self, c: &Coordinate) -> Option<usize> {
        self.index.get(c).copied()
    }
}

#[derive(Debug, Clone)]
pub struct SparseTensor {
    pub coords: Arc<CoordSet>,
    pub features: Matrix,
}

impl SparseTensor {
    pub fn new(coords: Arc<CoordSet>, features: Matrix) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(Error::shape(
                "SparseTensor::new (feature rows)",
                coords.len(),
                features.rows(),
            ));
        }
        Ok(Self { coords, features })
    }

    pub fn from_parts(coords: Vec<Coordinate>, stride: i32, features: Matrix) -> Result<Self> {
        Self::new(Arc::new(CoordSet::new(coords, stride)?), features)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn stride(&self) -> i32 {
        self.coords.stride()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FeatureReduce {
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelReduce {
    /// Most frequent label; ties go to the smallest label id.
    #[default]
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelizationConfig {
    pub voxel_size: f64,
    #[serde(default)]
    pub feature_reduce: FeatureReduce,
    #[serde(default)]
    pub label_reduce: LabelReduce,
}

impl VoxelizationConfig {
    pub fn new(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            feature_reduce: FeatureReduce::Mean,
            label_reduce: LabelReduce::Majority,
        }
    }
}

#[derive(Default)]
struct VoxelAccum {
    count: usize,
    feat_sum: Vec<f64>,
    labels: BTreeMap<u32, usize>,
}

/// Quantizes points to voxel cells (`floor(p / voxel_size)` per axis) in batch 0.
///
/// Returns the voxel tensor at stride 1 plus one label per voxel (empty when
/// `labels` is `None`).
pub fn voxelize(
    points: &[[f64; DIM]],
    feats: &Matrix,
    labels: Option<&[u32]>,
    cfg: &VoxelizationConfig,
) -> Result<(SparseTensor, Vec<u32>)> {
    if !(cfg.voxel_size > 0.0 && cfg.voxel_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel_size must be positive, got {}",
            cfg.voxel_size
        )));
    }
    if feats.rows() != points.len() {
        return Err(Error::shape("voxelize (feature rows)", points.len(), feats.rows()));
    }
    if let Some(l) = labels {
        if l.len() != points.len() {
            return Err(Error::shape("voxelize (labels)", points.len(), l.len()));
        }
    }
    let nf = feats.cols();
    let mut cells: BTreeMap<Coordinate, VoxelAccum> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let row = feats.row(i);
        if p.iter().chain(row).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        let mut xyz = [0i32; DIM];
        for d in 0..DIM {
            let cell = (p[d] / cfg.voxel_size).floor();
            if cell < i32::MIN as f64 || cell > i32::MAX as f64 {
                return Err(Error::InvalidArgument(format!(
                    "point {i} falls outside the representable voxel range"
                )));
            }
            xyz[d] = cell as i32;
        }
        let acc = cells.entry(Coordinate::new(0, xyz)).or_default();
        if acc.feat_sum.is_empty() {
            acc.feat_sum = vec![0.0; nf];
        }
        acc.count += 1;
        for (s, v) in acc.feat_sum.iter_mut().zip(row) {
            *s += v;
        }
        if let Some(l) = labels {
            *acc.labels.entry(l[i]).or_insert(0) += 1;
        }
    }

    let mut coords = Vec::with_capacity(cells.len());
    let mut out_feats = Matrix::zeros(cells.len(), nf);
    let mut out_labels = Vec::new();
    for (row, (c, acc)) in cells.into_iter().enumerate() {
        coords.push(c);
        let inv = 1.0 / acc.count as f64;
        for (dst, s) in out_feats.row_mut(row).iter_mut().zip(&acc.feat_sum) {
            *dst = s * inv;
        }
        if labels.is_some() {
            // BTreeMap iterates ascending, so the first maximum is the smallest id.
            let mut best = (0u32, 0usize);
            for (&l, &n) in &acc.labels {
                if n > best.1 {
                    best = (l, n);
                }
            }
            out_labels.push(best.0);
        }
    }
    Ok((SparseTensor::from_parts(coords, 1, out_feats)?, out_labels))
}

/// Unique coordinates at stride `t.stride * s`, lexicographically sorted.
pub fn stride_coords(coords: &CoordSet, s: i32) -> Result<Vec<Coordinate>> {
    if s < 1 {
        return Err(Error::InvalidArgument(format!("stride factor must be >= 1, got {s}")));
    }
    let step = coords.stride() * s;
    let mut out: Vec<Coordinate> = coords
        .coords()
        .iter()
        .map(|c| {
            let mut xyz = c.xyz;
            for v in &mut xyz {
                *v = v.div_euclid(step) * step;
            }
            Coordinate::new(c.batch, xyz)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
