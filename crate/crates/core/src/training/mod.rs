pub mod data;
pub mod loss;
pub mod metrics;
pub mod sgd;
pub mod trainer;

pub use data::{collate, gen_synthetic_scene, Scene, SceneConfig};
pub use loss::{loss_insseg, loss_semseg};
pub use metrics::{miou_macc, SegMetrics};
pub use sgd::{sgd_step, LrSchedule, TrainerConfig};
pub use trainer::{SyntheticTrainer, Task};
