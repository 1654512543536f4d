//! Procedural indoor scenes: a floor, four walls and a few box-shaped
//! objects, voxelized directly on the integer grid.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparse_tensor::{CoordSet, Coordinate, SparseTensor};
use crate::voxset::Voxset;

pub const FLOOR: u32 = 0;
pub const WALL: u32 = 1;
/// Normalized x, y, z and one appearance channel.
pub const SCENE_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_classes: usize,
    /// Extent of the whole volume along every axis, in voxels (≤ 32).
    pub grid: i32,
    pub min_room: i32,
    pub room_height: i32,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_box: i32,
    pub max_box: i32,
    pub voxel_size: f64,
    /// Standard deviation of the appearance channel around its class mean.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            grid: 20,
            min_room: 16,
            room_height: 8,
            min_boxes: 1,
            max_boxes: 5,
            min_box: 3,
            max_box: 6,
            voxel_size: 0.05,
            noise: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_classes < 3 {
            return bad("synthetic scenes need at least 3 classes (floor, wall, object)");
        }
        if !(1..=32).contains(&self.grid) || self.min_room > self.grid || self.room_height > self.grid {
            return bad("room must fit in a grid of at most 32 voxels");
        }
        if self.min_room < self.max_box + 4 {
            return bad("room too small for the largest box");
        }
        if self.min_boxes == 0 || self.min_boxes > self.max_boxes || self.min_box < 2 || self.min_box > self.max_box {
            return bad("invalid box count or size range");
        }
        if self.max_box + 1 > self.room_height {
            return bad("boxes must be lower than the walls");
        }
        if !(self.voxel_size > 0.0) || !(self.noise >= 0.0) {
            return bad("voxel_size must be positive and noise non-negative");
        }
        Ok(())
    }

    fn class_mean(&self, class: u32) -> f64 {
        class as f64 / (self.num_classes - 1) as f64
    }
}

/// One scene (or a collated batch of scenes).
#[derive(Debug, Clone)]
pub struct Scene {
    pub input: SparseTensor,
    pub labels: Vec<u32>,
    /// −1 for floor and walls.
    pub instance: Vec<i32>,
    /// `c* = centroid − voxel center`, world units, zero for background.
    pub offsets: Matrix,
    pub foreground: Vec<bool>,
    /// World-space centroid per instance id.
    pub centroids: Vec<[f64; 3]>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy)]
struct Box3 {
    lo: [i32; 3],
    hi: [i32; 3],
}

impl Box3 {
    fn overlaps_padded(&self, o: &Box3) -> bool {
        (0..3).all(|k| self.lo[k] <= o.hi[k] + 1 && o.lo[k] <= self.hi[k] + 1)
    }

    fn on_shell(&self, p: [i32; 3]) -> bool {
        (0..3).any(|k| p[k] == self.lo[k] || p[k] == self.hi[k])
    }
}

pub fn gen_synthetic_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sx = rng.gen_range(cfg.min_room..=cfg.grid);
    let sy = rng.gen_range(cfg.min_room..=cfg.grid);
    let sz = cfg.room_height;
    // (label, instance) per occupied cell; later writers win
    let mut cells: BTreeMap<[i32; 3], (u32, i32)> = BTreeMap::new();
    for x in 0..sx {
        for y in 0..sy {
            cells.insert([x, y, 0], (FLOOR, -1));
            if x == 0 || y == 0 || x == sx - 1 || y == sy - 1 {
                for z in 1..sz {
                    cells.insert([x, y, z], (WALL, -1));
                }
            }
        }
    }
    let n_boxes = rng.gen_range(cfg.min_boxes..=cfg.max_boxes);
    let mut boxes: Vec<(Box3, u32)> = Vec::new();
    for _ in 0..64 {
        if boxes.len() == n_boxes {
            break;
        }
        let size = [
            rng.gen_range(cfg.min_box..=cfg.max_box),
            rng.gen_range(cfg.min_box..=cfg.max_box),
            rng.gen_range(cfg.min_box..=cfg.max_box),
        ];
        let lo = [
            rng.gen_range(2..=sx - 2 - size[0]),
            rng.gen_range(2..=sy - 2 - size[1]),
            1,
        ];
        let b = Box3 {
            lo,
            hi: [lo[0] + size[0] - 1, lo[1] + size[1] - 1, size[2]],
        };
        let class = rng.gen_range(2..cfg.num_classes as u32);
        if boxes.iter().all(|(o, _)| !b.overlaps_padded(o)) {
            boxes.push((b, class));
        }
    }
    for (id, (b, class)) in boxes.iter().enumerate() {
        for x in b.lo[0]..=b.hi[0] {
            for y in b.lo[1]..=b.hi[1] {
                for z in b.lo[2]..=b.hi[2] {
                    if b.on_shell([x, y, z]) {
                        cells.insert([x, y, z], (*class, id as i32));
                    }
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n = cells.len();
    let scale = 2.0 / (cfg.grid - 1).max(1) as f64;
    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * SCENE_FEATURES);
    let mut labels = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);
    let mut sums = vec![([0.0f64; 3], 0usize); boxes.len()];
    for (&xyz, &(label, inst)) in &cells {
        coords.push(Coordinate::new(0, xyz));
        for v in xyz {
            feats.push(v as f64 * scale - 1.0);
        }
        feats.push(cfg.class_mean(label) + noise.sample(&mut rng));
        labels.push(label);
        instance.push(inst);
        if inst >= 0 {
            let c = voxel_center(xyz, cfg.voxel_size);
            let s = &mut sums[inst as usize];
            (0..3).for_each(|k| s.0[k] += c[k]);
            s.1 += 1;
        }
    }
    let centroids: Vec<[f64; 3]> = sums
        .iter()
        .map(|(s, c)| [s[0] / *c as f64, s[1] / *c as f64, s[2] / *c as f64])
        .collect();
    let mut offsets = Matrix::zeros(n, 3);
    for (r, (&inst, c)) in instance.iter().zip(&coords).enumerate() {
        if inst >= 0 {
            let v = voxel_center(c.xyz, cfg.voxel_size);
            let cen = centroids[inst as usize];
            for k in 0..3 {
                offsets.set(r, k, cen[k] - v[k]);
            }
        }
    }
    Ok(Scene {
        input: SparseTensor::new(
            Arc::new(CoordSet::new(coords, 1)?),
            Matrix::from_vec(n, SCENE_FEATURES, feats)?,
        )?,
        foreground: instance.iter().map(|&i| i >= 0).collect(),
        labels,
        instance,
        offsets,
        centroids,
        num_classes: cfg.num_classes,
    })
}

pub fn voxel_center(xyz: [i32; 3], voxel_size: f64) -> [f64; 3] {
    xyz.map(|v| (v as f64 + 0.5) * voxel_size)
}

/// Stacks scenes into one batch, scene `b` getting batch index `b`.
pub fn collate(scenes: &[&Scene]) -> Result<Scene> {
    let first = scenes.first().ok_or(Error::EmptyBatch("collate of zero scenes"))?;
    let nf = first.input.num_features();
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut instance = Vec::new();
    let mut offsets = Vec::new();
    let mut centroids = Vec::new();
    for (b, s) in scenes.iter().enumerate() {
        if s.input.num_features() != nf || s.num_classes != first.num_classes {
            return Err(Error::InvalidArgument("scenes in a batch must share feature and class counts".into()));
        }
        let base = centroids.len() as i32;
        coords.extend(s.input.coords.coords().iter().map(|c| Coordinate::new(b as u32, c.xyz)));
        feats.extend_from_slice(s.input.features.as_slice());
        labels.extend_from_slice(&s.labels);
        instance.extend(s.instance.iter().map(|&i| if i >= 0 { i + base } else { -1 }));
        offsets.extend_from_slice(s.offsets.as_slice());
        centroids.extend_from_slice(&s.centroids);
    }
    let n = labels.len();
    Ok(Scene {
        input: SparseTensor::from_parts(coords, 1, Matrix::from_vec(n, nf, feats)?)?,
        foreground: instance.iter().map(|&i| i >= 0).collect(),
        labels,
        instance,
        offsets: Matrix::from_vec(n, 3, offsets)?,
        centroids,
        num_classes: first.num_classes,
    })
}

impl Scene {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// voxset v1 export with labels and per-voxel instance centroids
    /// (voxel center for background).
    pub fn to_voxset(&self, voxel_size: f64) -> Voxset {
        let centroids = self
            .input
            .coords
            .coords()
            .iter()
            .zip(&self.instance)
            .map(|(c, &i)| if i >= 0 { self.centroids[i as usize] } else { voxel_center(c.xyz, voxel_size) })
            .collect();
        Voxset {
            coords: self.input.coords.coords().to_vec(),
            features: self.input.features.clone(),
            labels: Some(self.labels.clone()),
            centroids: Some(centroids),
        }
    }

    /// Rebuilds a scene from a labelled voxset (centroids optional).
    pub fn from_voxset(v: &Voxset, num_classes: usize, voxel_size: f64) -> Result<Self> {
        let labels = v
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidArgument("voxset has no labels".into()))?;
        let n = labels.len();
        let mut offsets = Matrix::zeros(n, 3);
        let mut foreground = vec![false; n];
        if let Some(cent) = &v.centroids {
            for (r, (c, cen)) in v.coords.iter().zip(cent).enumerate() {
                if labels[r] > WALL {
                    foreground[r] = true;
                    let vc = voxel_center(c.xyz, voxel_size);
                    (0..3).for_each(|k| offsets.set(r, k, cen[k] - vc[k]));
                }
            }
        }
        Ok(Self {
            input: SparseTensor::from_parts(v.coords.clone(), 1, v.features.clone())?,
            instance: foreground.iter().map(|&f| if f { 0 } else { -1 }).collect(),
            foreground,
            labels,
            offsets,
            centroids: Vec::new(),
            num_classes,
        })
    }
}
