use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, GeneratedRecord};
use crate::molgraph::{
    canonical_key, graph_isomorphic, min_cost_isomorphism, validate, LinkerSample, Molecule3D,
    ValenceTable,
};

/// Search-tree expansions allowed when minimising RMSD over isomorphisms.
pub const RMSD_SEARCH_BUDGET: usize = 2_000_000;

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Share of molecules passing every validation check, in percent.
pub fn validity(mols: &[Molecule3D], table: &ValenceTable) -> Result<f64, EvalError> {
    if mols.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let ok = mols
        .par_iter()
        .filter(|m| validate(m, table).is_valid())
        .count();
    Ok(percent(ok, mols.len()))
}

/// Share of fragment pairs with at least one valid generated molecule
/// isomorphic to the ground truth, in percent. `generated[p]` belongs to
/// `truth[p]`.
pub fn recovery(
    generated: &[Vec<Molecule3D>],
    truth: &[Molecule3D],
    table: &ValenceTable,
) -> Result<f64, EvalError> {
    if generated.is_empty() {
        return Err(EvalError::NoSamples);
    }
    if generated.len() != truth.len() {
        return Err(EvalError::Config(format!(
            "{} generated groups for {} truths",
            generated.len(),
            truth.len()
        )));
    }
    let hits = generated
        .par_iter()
        .zip(truth)
        .filter(|(g, t)| {
            g.iter()
                .any(|m| validate(m, table).is_valid() && graph_isomorphic(m, t))
        })
        .count();
    Ok(percent(hits, truth.len()))
}

/// Root-mean-square deviation between matched atoms, in the shared frame and
/// minimised over type-preserving isomorphisms. The result is symmetric in
/// its arguments: squared terms are summed in sorted order.
pub fn rmsd(a: &Molecule3D, b: &Molecule3D) -> Result<f64, EvalError> {
    let (ca, cb) = (a.coords(), b.coords());
    let sq = |i: usize, j: usize| (0..3).map(|k| (ca[i][k] - cb[j][k]).powi(2)).sum::<f64>();
    let m = min_cost_isomorphism(a, b, sq, RMSD_SEARCH_BUDGET).ok_or(EvalError::NotIsomorphic)?;
    if !m.exact {
        log::warn!(
            "rmsd: isomorphism search budget exhausted on a {}-node molecule",
            a.n()
        );
    }
    if a.n() == 0 {
        return Ok(0.0);
    }
    let mut terms: Vec<f64> = m.map.iter().enumerate().map(|(i, &j)| sq(i, j)).collect();
    terms.sort_by(f64::total_cmp);
    Ok((terms.iter().sum::<f64>() / a.n() as f64).sqrt())
}

/// Share of distinct canonical keys, in percent.
pub fn uniqueness(mols: &[Molecule3D]) -> Result<f64, EvalError> {
    if mols.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let keys: HashSet<String> = mols
        .par_iter()
        .map(canonical_key)
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    Ok(percent(keys.len(), mols.len()))
}

/// Canonical key of the linker part (nodes from `n_frag` on).
pub fn linker_key(mol: &Molecule3D, n_frag: usize) -> String {
    let nodes: Vec<usize> = (n_frag..mol.n()).collect();
    canonical_key(&mol.subgraph(&nodes))
}

pub fn training_linker_keys(samples: &[LinkerSample]) -> HashSet<String> {
    samples.iter().map(|s| canonical_key(&s.linker)).collect()
}

/// Share of linkers whose key is absent from `training`, in percent.
pub fn novelty(linkers: &[Molecule3D], training: &HashSet<String>) -> Result<f64, EvalError> {
    if linkers.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let novel = linkers
        .par_iter()
        .filter(|l| !training.contains(&canonical_key(l)))
        .count();
    Ok(percent(novel, linkers.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub pair: usize,
    pub index: usize,
    pub valid: bool,
    pub recovered: bool,
    pub rmsd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub pair: usize,
    pub generated: usize,
    pub valid: usize,
    pub recovered_samples: usize,
    pub recovered: bool,
    pub best_rmsd: Option<f64>,
    pub mean_rmsd: Option<f64>,
}

/// Percentages lie in `[0, 100]`; `rmsd` averages over recovered samples
/// only and is `None` when nothing was recovered. Uniqueness and novelty
/// are taken over valid samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub pairs: usize,
    pub validity: f64,
    pub recovery: f64,
    pub rmsd: Option<f64>,
    pub uniqueness: f64,
    pub novelty: f64,
    pub per_pair: Vec<PairReport>,
    pub per_sample: Vec<SampleReport>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "model,valid_pct,recovered_pct,rmsd,unique_pct,novel_pct";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row in [`Self::CSV_HEADER`] layout.
    pub fn csv_row(&self, label: &str) -> String {
        let rmsd = self.rmsd.map(|r| format!("{r:.4}")).unwrap_or_default();
        format!(
            "{label},{:.2},{:.2},{rmsd},{:.2},{:.2}",
            self.validity, self.recovery, self.uniqueness, self.novelty
        )
    }

    pub fn to_csv(&self, label: &str) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row(label))
    }
}

fn extends_fragments(mol: &Molecule3D, fragments: &Molecule3D) -> bool {
    let nf = fragments.n();
    mol.n() >= nf
        && mol.types()[..nf] == *fragments.types()
        && mol.coords()[..nf] == *fragments.coords()
        && fragments.edges().iter().all(|&(a, b)| mol.has_edge(a, b))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full report for generated records against `truth[pair]`.
pub fn evaluate(
    generated: &[GeneratedRecord],
    truth: &[LinkerSample],
    training: &HashSet<String>,
    table: &ValenceTable,
) -> Result<EvalReport, EvalError> {
    if generated.is_empty() {
        return Err(EvalError::NoSamples);
    }
    for r in generated {
        let t = truth.get(r.pair).ok_or(EvalError::UnknownPair(r.pair))?;
        if !extends_fragments(&r.molecule, &t.fragments) {
            return Err(EvalError::FragmentMismatch(r.pair));
        }
    }
    let per_sample: Vec<SampleReport> = generated
        .par_iter()
        .map(|r| {
            let t = &truth[r.pair];
            let valid = validate(&r.molecule, table).is_valid();
            let recovered = valid && graph_isomorphic(&r.molecule, &t.full);
            let rmsd = if recovered {
                Some(rmsd(&r.molecule, &t.full)?)
            } else {
                None
            };
            Ok(SampleReport {
                pair: r.pair,
                index: r.index,
                valid,
                recovered,
                rmsd,
            })
        })
        .collect::<Result<_, EvalError>>()?;

    let mut groups: BTreeMap<usize, Vec<&SampleReport>> = BTreeMap::new();
    for s in &per_sample {
        groups.entry(s.pair).or_default().push(s);
    }
    let per_pair: Vec<PairReport> = groups
        .iter()
        .map(|(&pair, ss)| {
            let rm: Vec<f64> = ss.iter().filter_map(|s| s.rmsd).collect();
            PairReport {
                pair,
                generated: ss.len(),
                valid: ss.iter().filter(|s| s.valid).count(),
                recovered_samples: rm.len(),
                recovered: !rm.is_empty(),
                best_rmsd: rm.iter().copied().reduce(f64::min),
                mean_rmsd: mean(rm.iter().copied()),
            }
        })
        .collect();

    let valid: Vec<&GeneratedRecord> = generated
        .iter()
        .zip(&per_sample)
        .filter(|(_, s)| s.valid)
        .map(|(r, _)| r)
        .collect();
    let (uniq, novel) = if valid.is_empty() {
        (0.0, 0.0)
    } else {
        let mols: Vec<Molecule3D> = valid.iter().map(|r| r.molecule.clone()).collect();
        let linkers: Vec<Molecule3D> = valid
            .iter()
            .map(|r| {
                let nf = truth[r.pair].fragments.n();
                r.molecule
                    .subgraph(&(nf..r.molecule.n()).collect::<Vec<_>>())
            })
            .collect();
        (uniqueness(&mols)?, novelty(&linkers, training)?)
    };
    Ok(EvalReport {
        samples: generated.len(),
        pairs: per_pair.len(),
        validity: percent(valid.len(), generated.len()),
        recovery: percent(
            per_pair.iter().filter(|p| p.recovered).count(),
            per_pair.len(),
        ),
        rmsd: mean(per_sample.iter().filter_map(|s| s.rmsd)),
        uniqueness: uniq,
        novelty: novel,
        per_pair,
        per_sample,
    })
}
