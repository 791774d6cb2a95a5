//! Round-by-round simulation of the edge -> fog -> cloud deployment.

pub mod cloud;
pub mod experiment;
pub mod fog;
pub mod metrics;
pub mod task;
pub mod train;
pub mod transport;

pub use cloud::cloud_round;
pub use experiment::{run_experiment, ExperimentResult};
pub use fog::{fog_receive, fog_round, FogInput, FogOutput, FogSettings};
pub use metrics::{compute_metrics, ClientRecord, RoundRecord, Summary};
pub use task::{Evaluation, SyntheticTask};
pub use train::{client_local_train, train_on_shard, Adam};
