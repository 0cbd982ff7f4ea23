mod adam;
mod seed;
mod tune;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use seed::{seed_all, stream, substream, RngStreams, Stream};
pub use tune::{
    gather, metrics_csv, tune, write_metrics_csv, StepMetrics, TrainConfig, TrainSet, TuneOutcome, METRICS_HEADER,
};
