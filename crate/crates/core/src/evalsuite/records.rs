use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::EvalError;
use crate::molgraph::io::{
    f17, molecule_from_json, molecule_to_json, read_lines, trace_from_json, trace_to_json,
};
use crate::molgraph::{GenerationTrace, LinkerSample, MolError, Molecule3D};
use crate::vaemodel::{generate, GenStatus, Model};

/// One generated molecule for fragment pair `pair` (its index in the
/// fragments file).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedRecord {
    pub pair: usize,
    pub index: usize,
    pub status: GenStatus,
    pub molecule: Molecule3D,
    pub trace: GenerationTrace,
    pub log_probs: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord<'a> {
    pair: usize,
    index: usize,
    status: GenStatus,
    #[serde(borrow)]
    molecule: &'a RawValue,
    #[serde(borrow)]
    trace: &'a RawValue,
    log_probs: Vec<f64>,
}

#[derive(Serialize)]
struct OutRecord {
    pair: usize,
    index: usize,
    status: GenStatus,
    molecule: Box<RawValue>,
    trace: Box<RawValue>,
    log_probs: Vec<Box<RawValue>>,
}

pub fn record_to_json(r: &GeneratedRecord) -> String {
    let raw = |s: String| RawValue::from_string(s).expect("nested record is valid JSON");
    let out = OutRecord {
        pair: r.pair,
        index: r.index,
        status: r.status,
        molecule: raw(molecule_to_json(&r.molecule)),
        trace: raw(trace_to_json(&r.trace)),
        log_probs: r.log_probs.iter().map(|&x| f17(x)).collect(),
    };
    serde_json::to_string(&out).expect("record serializes")
}

pub fn record_from_json(text: &str, line: usize) -> Result<GeneratedRecord, MolError> {
    let r: RawRecord<'_> = serde_json::from_str(text).map_err(|e| MolError::Parse {
        line,
        detail: e.to_string(),
    })?;
    Ok(GeneratedRecord {
        pair: r.pair,
        index: r.index,
        status: r.status,
        molecule: molecule_from_json(r.molecule.get(), line)?,
        trace: trace_from_json(r.trace.get(), line)?,
        log_probs: r.log_probs,
    })
}

pub fn read_generated(reader: impl BufRead) -> Result<Vec<GeneratedRecord>, MolError> {
    read_lines(reader, record_from_json)
}

pub fn write_generated(mut w: impl Write, records: &[GeneratedRecord]) -> Result<(), MolError> {
    for r in records {
        writeln!(w, "{}", record_to_json(r)).map_err(|e| MolError::Io(e.to_string()))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSettings {
    /// Generations per fragment pair.
    pub k: usize,
    pub max_linker_nodes: usize,
    /// Use each pair's recorded anchors instead of predicting them.
    pub given_anchors: bool,
    pub seed: u64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            k: 250,
            max_linker_nodes: 12,
            given_anchors: false,
            seed: 0,
        }
    }
}

/// `k` free generations per pair. Pair `p` draws from its own stream of the
/// seeded generator, so the output does not depend on scheduling.
pub fn sample_generations(
    model: &Model,
    pairs: &[LinkerSample],
    settings: &SampleSettings,
) -> Result<Vec<GeneratedRecord>, EvalError> {
    if settings.k == 0 || settings.max_linker_nodes == 0 {
        return Err(EvalError::Config(
            "k and max_linker_nodes must be positive".into(),
        ));
    }
    let per_pair: Vec<Result<Vec<GeneratedRecord>, EvalError>> = pairs
        .par_iter()
        .enumerate()
        .map(|(p, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(p as u64);
            let anchors = settings.given_anchors.then_some(s.anchors);
            (0..settings.k)
                .map(|index| {
                    let g = generate(
                        model,
                        &s.fragments,
                        settings.max_linker_nodes,
                        anchors,
                        &mut rng,
                    )?;
                    Ok(GeneratedRecord {
                        pair: p,
                        index,
                        status: g.status,
                        molecule: g.molecule,
                        trace: g.trace,
                        log_probs: g.log_probs,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(pairs.len() * settings.k);
    for r in per_pair {
        out.extend(r?);
    }
    Ok(out)
}
