//! Corruption-aware repair for hierarchical federated learning.
//!
//! The crate models an edge -> fog -> cloud deployment in which client
//! updates are damaged in transit. The fog detects the damage statistically,
//! repairs it with one of several operators (parity recovery, selective
//! retransmission, robust aggregation, low-rank subspace completion, EMA
//! smoothing), validates the repair, and forwards accepted updates to a cloud
//! that aggregates them under pairwise-masked secure aggregation and adds
//! central Gaussian noise with zCDP accounting.
//!
//! Module map:
//!
//! * [`update`] - flattened model updates, layer partitions, history windows
//! * [`channel`] - fault injectors and the lossy link
//! * [`detection`] - per-layer indicators and repair-mode classification
//! * [`repair`] - FEC coding and the repair operators, chained by the pipeline
//! * [`privacy`] - clipping, secure aggregation, DP noise and accounting
//! * [`sim`] - synthetic tasks and the round-by-round simulator
//! * [`config`] / [`report`] - experiment configuration and CSV output

pub mod channel;
pub mod config;
pub mod detection;
pub mod error;
pub mod privacy;
pub mod repair;
pub mod report;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod update;

pub use channel::{ChannelParams, CorruptionKind, CorruptionSpec, GroundTruthMask};
pub use config::ExperimentConfig;
pub use detection::{DetectionConfig, DetectionReport, DistortionClass, RepairMode};
pub use error::{EmarError, Result};
pub use privacy::{ClipParams, MaskedUpdate, PrivacyLedger};
pub use repair::{RepairConfig, RepairOutcome, SubspaceModel};
pub use sim::{run_experiment, ExperimentResult, RoundRecord};
pub use update::{HistoryWindow, IndexSets, LayerPartition, ModelUpdate};
