//! Shadow removal with a channel-attention transformer whose bottleneck
//! attention is reweighted by a shadow/non-shadow correlation map.
//!
//! The crate covers the whole pipeline: Retinex-style shadow synthesis
//! ([`retinex`]), the network ([`model`], built from [`nn`] layers with
//! hand-written backward passes), training ([`training`]), region-wise
//! evaluation ([`metrics`]) and dataset ingestion ([`datasets`]).

pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod retinex;
pub mod rng;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use datasets::{scan, DatasetSpec, Layout, Split, TripletRecord};
pub use error::{Error, Result};
pub use imaging::{ImageTensor, ShadowMask};
pub use metrics::{MetricsReport, Region, RmseConvention};
pub use model::{param_count, ModelConfig, ShadowFormer};
pub use nn::{correlation_map, CorrelationMap, Parameterized};
pub use retinex::{compose_shadow, generate_dataset, sample_scene, RetinexScene};
pub use tensor::{FeatureMap, Tensor3};
pub use training::{TrainConfig, TrainState};
