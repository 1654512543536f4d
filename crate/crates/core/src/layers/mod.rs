pub mod checkpoint;
pub mod conv;
pub mod network;
pub mod norm;
