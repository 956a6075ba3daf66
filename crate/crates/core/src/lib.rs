//! Bayesian autoregressive and recurrent neural networks with time-varying
//! weights.
//!
//! Static weights `Ω` are rescaled at every timestep by a dropout rate
//! `α_t = p/(1−p)` produced by a small encoder network, giving a weight
//! posterior `N(α_t Ω, (α_t Ω)²)`. Training maximises a temporal ELBO against a
//! prior built from the batch-aggregated posterior; inference unrolls the
//! model with fresh weight samples per step and reports ensemble moments.
//!
//! The crate ships its own small reverse-mode autodiff over dense `f64`
//! tensors ([`autodiff`]), the variational layers and encoder ([`layers`]),
//! the KL terms ([`prior`]), the two model families ([`forecaster`],
//! [`rnn`]), ensemble inference ([`inference`]), evaluation metrics
//! ([`metrics`]), synthetic datasets ([`datagen`]) and a checkpoint format
//! ([`checkpoint`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod forecaster;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod rnn;
pub mod tensor;

pub use autodiff::{finite_diff_grad, Tape, Var};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::Config;
pub use datagen::{gen_ring_corpus, gen_sinusoid, RingString, Trajectory};
pub use error::{Error, Result};
pub use forecaster::{Forecaster, ForecasterConfig, PriorKind, Variant};
pub use inference::{ensemble_moments, EnsembleForecast};
pub use layers::{PosteriorEncoder, SampleMode, VariationalLinear};
pub use metrics::{metric_ece, metric_nll, metric_rmse, ring_validity, MetricsReport};
pub use optim::AdamState;
pub use prior::{kl_loguniform, kl_tvamp, tvamp_stats, PriorStats};
pub use rnn::{RnnConfig, RnnModel};
pub use tensor::Tensor;
