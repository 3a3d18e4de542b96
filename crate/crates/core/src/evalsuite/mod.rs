//! Generation metrics, generated-set records, the equivariance audit, the
//! gated-sum property head and ablation runs.

mod ablation;
mod audit;
mod gradsuite;
mod metrics;
mod property;
mod records;

pub use ablation::{ablation_run, train_and_evaluate, AblationReport};
pub use audit::{
    equivariance_audit, AuditReport, AuditSettings, COORD_TOL, ENCODER_TOL, LOGPROB_TOL,
};
pub use gradsuite::{
    gradient_suite, GradEntry, GradSuiteReport, GradSuiteSettings, GRAD_TOL, KINK_MARGIN,
};
pub use metrics::{
    evaluate, linker_key, novelty, recovery, rmsd, training_linker_keys, uniqueness, validity,
    EvalReport, PairReport, SampleReport, RMSD_SEARCH_BUDGET,
};
pub use property::{
    molecule_latents, synthetic_property, train_property_head, MoleculeLatents, PropertyConfig,
    PropertyHead, PropertyReport,
};
pub use records::{
    read_generated, record_from_json, record_to_json, sample_generations, write_generated,
    GeneratedRecord, SampleSettings,
};

use crate::molgraph::MolError;
use crate::tensorcore::TensorError;
use crate::training::TrainError;
use crate::vaemodel::ModelError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no samples")]
    NoSamples,
    #[error("molecules are not isomorphic")]
    NotIsomorphic,
    #[error("generated pair id {0} has no ground-truth entry")]
    UnknownPair(usize),
    #[error("generated pair {0} does not extend the ground-truth fragments")]
    FragmentMismatch(usize),
    #[error("invalid setting: {0}")]
    Config(String),
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
