pub mod doa;
pub mod features;
pub mod scene;
pub mod autodiff;
pub mod model;
pub mod pit;
pub mod optim;
pub mod checkpoint;
pub mod metrics;
pub mod data;
pub mod infer;
pub mod train;
