//! Training, evaluation and tooling around the model.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use bench::{bench_scaling, BenchRow, BENCH_HEADER};
pub use checkpoint::{load_checkpoint, load_into, read_checkpoint, save_checkpoint, CheckpointError};
pub use config::TrainConfig;
pub use data::{augment, generate_synthetic_dataset, hflip, pk_sample, AugmentConfig, PkSampler, SynthDataset, SynthSpec};
pub use gradcheck::{run_gradcheck, GradcheckReport, SELECTORS};
pub use optim::{lr_schedule, Schedule, Sgd};
pub use train::{evaluate, infer_batch, infer_features, output_dir, train_step, EvalReport, MetricsLog, StepLog, Trainer};
