//! Spatially sparse 3D convolution with weight-sparse (CSR) inference and
//! magnitude-based pruning.

pub mod error;
pub mod kernel_map;
pub mod layers;
pub mod matrix;
pub mod pruning;
pub mod sparse_tensor;
pub mod training;
pub mod voxset;
pub mod ws3;

pub use error::{Error, Result};
pub use kernel_map::{build_kernel_map, CoordinateManager, KernelMap, KernelOffsets};
pub use layers::conv::{sparse_conv_forward, ConvEngine, ConvWeights, SparseConv};
pub use layers::network::{build_network, count_params, Mode, Network, NetworkSpec, Preset};
pub use matrix::Matrix;
pub use sparse_tensor::{voxelize, CoordSet, Coordinate, SparseTensor, VoxelizationConfig};
pub use ws3::{ws3_conv_forward, CsrMatrix, Ws3Kernel};
