//! One-stage instance segmentation by four-colour constrained pixel embeddings.
//!
//! A U-Net style network maps every pixel to a `K`-dimensional vector that a
//! sharpened power-normalisation pushes towards one of `K` one-hot corners.
//! Objects are trained to be internally coherent (cosine similarity) and
//! distinct from their neighbours, so that with `K = 4` touching nuclei land in
//! different channels and instances fall out of per-channel connected
//! components.
//!
//! Module map:
//!
//! * [`imgdata`]: image/label containers, I/O, normalisation, resizing and the
//!   synthetic blob generator.
//! * [`graph`]: object adjacency and an exact k-colouring search.
//! * [`activation`]: hard argmax, softmax, the power-normalised argmax
//!   surrogate and the sharpness schedule.
//! * [`loss`]: intra/inter cosine objective with analytic gradients.
//! * [`net`]: encoder-decoder network, backward pass and checkpoints.
//! * [`trainer`]: Adam optimisation loop and evaluation.
//! * [`postprocess`]: hardening and per-channel component extraction.
//! * [`metrics`]: Dice2, AJI, F1 and PQ.
//! * [`cli`]: the `fcrseg` command line.

pub mod activation;
pub mod cli;
pub mod config;
pub mod error;
pub mod graph;
pub mod imgdata;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod postprocess;
pub mod trainer;

pub use activation::{ActivationSpec, EmbeddingMap};
pub use error::{Error, Result};
pub use graph::{Coloring, ObjectGraph};
pub use imgdata::{DatasetSplit, LabelImage, RawImage, Sample};
pub use loss::LossBreakdown;
pub use metrics::EvalReport;
pub use net::{ModelState, NetConfig};
pub use postprocess::{BackgroundPolicy, InstanceResult};
pub use trainer::TrainConfig;
