//! Kernel maps: for every kernel offset, the `(input_row, output_row)` pairs
//! that a sparse convolution gathers from and scatters into.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparse_tensor::{stride_coords, CoordSet, DIM};

/// Fixed, lexicographically ordered hypercube of kernel offsets.
///
/// Odd sizes are centred (`-(K-1)/2 ..= (K-1)/2`), even sizes are anchored at
/// the origin (`0 ..= K-1`). The last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelOffsets {
    kernel_size: usize,
    offsets: Vec<[i32; DIM]>,
}

impl KernelOffsets {
    pub fn new(kernel_size: usize) -> Result<Self> {
        if kernel_size == 0 {
            return Err(Error::InvalidArgument("kernel size must be positive".into()));
        }
        let k = kernel_size as i32;
        let lo = if k % 2 == 1 { -(k - 1) / 2 } else { 0 };
        let axis: Vec<i32> = (lo..lo + k).collect();
        let mut offsets = Vec::with_capacity(kernel_size.pow(DIM as u32));
        for &x in &axis {
            for &y in &axis {
                for &z in &axis {
                    offsets.push([x, y, z]);
                }
            }
        }
        Ok(Self {
            kernel_size,
            offsets,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn volume(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[[i32; DIM]] {
        &self.offsets
    }

    pub fn position(&self, offset: &[i32; DIM]) -> Option<usize> {
        self.offsets.iter().position(|o| o == offset)
    }
}

/// Pair list for one kernel offset, stored as two parallel row arrays.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OffsetPairs {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
}

impl OffsetPairs {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.input
            .iter()
            .zip(&self.output)
            .map(|(&a, &b)| (a as usize, b as usize))
    }
}

#[derive(Debug, Clone)]
pub struct KernelMap {
    pub offsets: KernelOffsets,
    pub pairs: Vec<OffsetPairs>,
    pub stride: i32,
    pub transposed: bool,
    pub in_id: u64,
    pub out_id: u64,
    pub n_in: usize,
    pub n_out: usize,
}

impl KernelMap {
    pub fn kernel_size(&self) -> usize {
        self.offsets.kernel_size()
    }

    pub fn volume(&self) -> usize {
        self.offsets.volume()
    }

    /// Largest pair list, i.e. the gather buffer capacity a layer needs.
    pub fn max_pairs(&self) -> usize {
        self.pairs.iter().map(OffsetPairs::len).max().unwrap_or(0)
    }
}

/// Number of `(offset, pair)` multiply-accumulate tiles in a map.
pub fn total_pairs(km: &KernelMap) -> usize {
    km.pairs.iter().map(OffsetPairs::len).sum()
}

fn forward_pairs(fine: &CoordSet, coarse: &CoordSet, offsets: &KernelOffsets) -> Vec<OffsetPairs> {
    let scale = fine.stride();
    offsets
        .offsets()
        .par_iter()
        .map(|off| {
            let mut pairs = OffsetPairs::default();
            for (b, c) in coarse.coords().iter().enumerate() {
                if let Some(a) = fine.lookup(&c.shifted(off, scale)) {
                    pairs.input.push(a as u32);
                    pairs.output.push(b as u32);
                }
            }
            pairs
        })
        .collect()
}

/// Builds the kernel map between `input` and `output` coordinate sets.
///
/// Forward maps pair input row `a` with output row `b` under offset `i` when
/// `in[a] = out[b] + offset_i * in.stride` (batches equal); this requires
/// `out.stride = in.stride * stride`. Transposed maps require
/// `in.stride = out.stride * stride` and are the swap of the forward map
/// from `output` to `input`.
pub fn build_kernel_map(
    input: &CoordSet,
    output: &CoordSet,
    kernel_size: usize,
    stride: i32,
    transposed: bool,
) -> Result<KernelMap> {
    if stride < 1 {
        return Err(Error::InvalidArgument(format!("stride must be >= 1, got {stride}")));
    }
    let offsets = KernelOffsets::new(kernel_size)?;
    let pairs = if !transposed {
        if output.stride() != input.stride() * stride {
            return Err(Error::Stride(format!(
                "output stride {} != input stride {} x {}",
                output.stride(),
                input.stride(),
                stride
            )));
        }
        forward_pairs(input, output, &offsets)
    } else {
        if input.stride() != output.stride() * stride {
            return Err(Error::Stride(format!(
                "transposed: input stride {} != output stride {} x {}",
                input.stride(),
                output.stride(),
                stride
            )));
        }
        forward_pairs(output, input, &offsets)
            .into_iter()
            .map(|p| OffsetPairs {
                input: p.output,
                output: p.input,
            })
            .collect()
    };
    Ok(KernelMap {
        offsets,
        pairs,
        stride,
        transposed,
        in_id: input.id(),
        out_id: output.id(),
        n_in: input.len(),
        n_out: output.len(),
    })
}

type MapKey = (u64, u64, usize, i32, bool);

/// Per-forward-pass cache of coordinate sets (keyed by tensor stride) and of
/// kernel maps (keyed by set identities, kernel size, stride, transposition).
#[derive(Debug)]
pub struct CoordinateManager {
    levels: BTreeMap<i32, Arc<CoordSet>>,
    maps: HashMap<MapKey, Arc<KernelMap>>,
}

impl CoordinateManager {
    pub fn new(base: Arc<CoordSet>) -> Self {
        let mut levels = BTreeMap::new();
        levels.insert(base.stride(), base);
        Self {
            levels,
            maps: HashMap::new(),
        }
    }

    /// Coordinate set at `stride`, derived from the finest cached level that
    /// divides it. Repeated calls return the same `Arc`.
    pub fn coords_at(&mut self, stride: i32) -> Result<Arc<CoordSet>> {
        if let Some(set) = self.levels.get(&stride) {
            return Ok(Arc::clone(set));
        }
        let source = self
            .levels
            .range(..stride)
            .rev()
            .find(|(s, _)| stride % **s == 0)
            .map(|(_, set)| Arc::clone(set))
            .ok_or_else(|| Error::Stride(format!("no cached level divides stride {stride}")))?;
        let coords = stride_coords(&source, stride / source.stride())?;
        let set = Arc::new(CoordSet::new(coords, stride)?);
        self.levels.insert(stride, Arc::clone(&set));
        Ok(set)
    }

    pub fn kernel_map(
        &mut self,
        input: &Arc<CoordSet>,
        output: &Arc<CoordSet>,
        kernel_size: usize,
        stride: i32,
        transposed: bool,
    ) -> Result<Arc<KernelMap>> {
        let key = (input.id(), output.id(), kernel_size, stride, transposed);
        if let Some(km) = self.maps.get(&key) {
            return Ok(Arc::clone(km));
        }
        let km = Arc::new(build_kernel_map(input, output, kernel_size, stride, transposed)?);
        self.maps.insert(key, Arc::clone(&km));
        Ok(km)
    }

    pub fn cached_maps(&self) -> usize {
        self.maps.len()
    }
}
