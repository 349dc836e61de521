//! Federated training of small convolutional networks in which clients
//! exchange only low-rank adapter parameters, optionally quantized to
//! 2/4/8-bit per-channel affine codes, with byte-exact cost accounting.
//!
//! The pieces, bottom-up:
//!
//! * [`tensor`] and [`autograd`]: a dense FP32 tensor and a reverse-mode tape
//!   covering conv2d, group norm, linear, ReLU, average pooling and
//!   softmax cross-entropy.
//! * [`nn`]: ResNet-8/18-style CIFAR models with group norm and parameter
//!   counting.
//! * [`lora`]: conv and classifier adapters, freezing policies, merging.
//! * [`quant`]: affine quantization and bit packing.
//! * [`wire`]: the update-message format, cost ledger and size reports.
//! * [`data`]: CIFAR-10 loading, synthetic data and Dirichlet partitioning.
//! * [`federation`]: sampling, local training, aggregation and rounds.

pub mod autograd;
pub mod data;
pub mod error;
pub mod federation;
mod kernels;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod quant;
pub mod tensor;
pub mod wire;

pub use autograd::{Tape, Var};
pub use data::{Dataset, PartitionMap};
pub use error::{Error, Result};
pub use federation::{FederationConfig, Federation, Method, RoundReport};
pub use lora::{AdaptedModel, AdapterPair, FreezePolicy, PolicyVariant, TrainingMode};
pub use nn::{CountFilter, ModelKind, ModelSpec, ParamSet, Role};
pub use quant::{BitWidth, QuantParams, QuantizedTensor};
pub use tensor::Tensor;
pub use wire::{CostLedger, Encoding, UpdateMessage};
