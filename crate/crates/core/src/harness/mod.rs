//! Training and evaluation infrastructure: dataset generation and disk
//! format, the optimizer and lr schedule, checkpointing, the training
//! loop, evaluation, inference, and plot emission. The CLI binary is a
//! thin dispatcher over the `cmd_*` entry points here.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod evalrun;
pub mod optim;
pub mod plot;
pub mod pngio;
pub mod train;

pub use config::HarnessConfig;
pub use dataset::cmd_synth;
pub use evalrun::{cmd_eval, cmd_infer};
pub use plot::cmd_plot;
pub use train::cmd_train;
