//! Molecule graphs, double-cut extraction, decoding order and isomorphism.

mod cut;
pub mod io;
mod iso;
mod molecule;
mod trace;

pub use cut::{bridges, cut_linker, double_cuts, sample_from_cut, DoubleCut, LinkerSample};
pub use iso::{
    canonical_key, canonical_labeling, find_isomorphism, graph_isomorphic, min_cost_isomorphism,
    MinCostMatch,
};
pub use molecule::{validate, Molecule3D, ValenceTable, ValencyViolation, ValidationReport};
pub use trace::{bfs_order, replay, EdgeTarget, GenerationTrace, TraceEvent};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MolError {
    #[error("malformed molecule: {0}")]
    Malformed(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("linker is not attached to anchor {anchor}")]
    LinkerNotAttached { anchor: usize },
    #[error("bad trace at event {event}: {detail}")]
    BadTrace { event: usize, detail: String },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("i/o error: {0}")]
    Io(String),
}
