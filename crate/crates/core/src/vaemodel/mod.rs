//! Equivariant variational autoencoder over linker graphs: encoder,
//! autoregressive decoder heads, coordinate operators, teacher forcing and
//! free generation.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod forcing;
mod generate;
mod net;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint};
pub use config::ModelConfig;
pub use decoder::{
    anchor_mask, decoder_inputs, decoder_mp, edge_logits, first_anchor_logits, node_type_logits,
    omega, second_anchor_logits, DecoderFeatures, PartialState, Reference,
};
pub use encoder::{
    encode, encode_fragments, kl_divergence, prior_latents, sample_latents, FragmentLatents,
    LatentNoise, Latents, Posterior, SIGMA_FLOOR,
};
pub use forcing::{teacher_forced_loss, CoordFeed, ForcedLoss, LOG_MSE_FLOOR};
pub use generate::{decision_budget, generate, generate_with_noise, GenStatus, Generation};
pub use net::{Model, Net, OmegaNet};

use crate::molgraph::MolError;
use crate::tensorcore::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("trace does not fit the model: {0}")]
    Vocabulary(String),
    #[error("fragment {fragment} has no node with free valence")]
    NoEligibleAnchor { fragment: usize },
    #[error("checkpoint config differs from the requested config")]
    ConfigMismatch,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[cfg(test)]
mod tests;
