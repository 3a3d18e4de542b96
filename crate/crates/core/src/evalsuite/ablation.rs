use serde::{Deserialize, Serialize};

use super::{
    evaluate, sample_generations, training_linker_keys, EvalError, EvalReport, SampleSettings,
};
use crate::molgraph::LinkerSample;
use crate::training::{train, TrainConfig, TrainOptions, TrainReport};
use crate::vaemodel::Model;

/// Trains on `data`, samples for every pair of `pairs`, and evaluates the
/// generations against those pairs with `data` as the novelty reference.
pub fn train_and_evaluate(
    data: &[LinkerSample],
    pairs: &[LinkerSample],
    cfg: &TrainConfig,
    sampling: &SampleSettings,
) -> Result<(Model, TrainReport, EvalReport), EvalError> {
    let (model, report) = train(data, cfg, TrainOptions::default())?;
    let generated = sample_generations(&model, pairs, sampling)?;
    let eval = evaluate(
        &generated,
        pairs,
        &training_linker_keys(data),
        &model.cfg.valence_table(),
    )?;
    Ok((model, report, eval))
}

/// Base model against each ablation, all sharing data, seeds and sampling.
/// Deltas are ablated minus base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base: EvalReport,
    pub no_coord_update: EvalReport,
    pub no_equivariant: EvalReport,
    pub rmsd_delta_no_coord_update: Option<f64>,
    pub rmsd_delta_no_equivariant: Option<f64>,
    pub recovery_delta_no_coord_update: f64,
    pub recovery_delta_no_equivariant: f64,
}

pub fn ablation_run(
    data: &[LinkerSample],
    pairs: &[LinkerSample],
    base: &TrainConfig,
    sampling: &SampleSettings,
) -> Result<AblationReport, EvalError> {
    let mut no_upd = base.clone();
    no_upd.model.disable_coord_update = true;
    let mut no_eqv = base.clone();
    no_eqv.model.disable_equivariant = true;
    let (_, _, b) = train_and_evaluate(data, pairs, base, sampling)?;
    let (_, _, u) = train_and_evaluate(data, pairs, &no_upd, sampling)?;
    let (_, _, e) = train_and_evaluate(data, pairs, &no_eqv, sampling)?;
    let delta = |x: &EvalReport| match (x.rmsd, b.rmsd) {
        (Some(a), Some(c)) => Some(a - c),
        _ => None,
    };
    Ok(AblationReport {
        rmsd_delta_no_coord_update: delta(&u),
        rmsd_delta_no_equivariant: delta(&e),
        recovery_delta_no_coord_update: u.recovery - b.recovery,
        recovery_delta_no_equivariant: e.recovery - b.recovery,
        base: b,
        no_coord_update: u,
        no_equivariant: e,
    })
}
