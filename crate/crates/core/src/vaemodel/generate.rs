use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{
    anchor_mask, decoder_inputs, decoder_mp, edge_logits, first_anchor_logits, node_type_logits,
    omega, second_anchor_logits, DecoderFeatures, PartialState, Reference,
};
use super::encoder::{encode_fragments, prior_latents, LatentNoise};
use super::forcing::row3;
use super::{Model, ModelError};
use crate::molgraph::{replay, EdgeTarget, GenerationTrace, Molecule3D, TraceEvent};
use crate::tensorcore::{masked_log_softmax, Tape};

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenStatus {
    Complete,
    /// The decision cap was reached; the molecule holds what was built.
    BudgetExceeded,
}

/// One decoded molecule with its full decision record.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub molecule: Molecule3D,
    pub trace: GenerationTrace,
    /// Log-probability of every sampled decision (anchors, types, edges).
    pub log_probs: Vec<f64>,
    pub status: GenStatus,
}

/// Cap on edge decisions (STOP included) for `m` linker slots. Every focus
/// adds at most `max_valence` bonds and one STOP, and at most `m + 2` nodes
/// are ever focused.
pub fn decision_budget(m: usize, max_valence: usize) -> usize {
    (m + 2) * (max_valence + 1)
}

/// Draws one index from a masked softmax using a single uniform variate.
fn sample_index<R: Rng>(rng: &mut R, logits: &[f64], mask: &[bool]) -> (usize, f64) {
    let lp = masked_log_softmax(logits, mask);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in lp.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        last = i;
        acc += l.exp();
        if u < acc {
            return (i, l);
        }
    }
    (last, lp[last])
}

/// Decodes a linker between the two components of `fragments` from prior
/// latents drawn with `rng`. Fragment 1 is the component of node 0 unless
/// `anchors` fixes both attachment points.
pub fn generate<R: Rng>(
    model: &Model,
    fragments: &Molecule3D,
    max_linker_nodes: usize,
    anchors: Option<(usize, usize)>,
    rng: &mut R,
) -> Result<Generation> {
    let noise = LatentNoise::sample(
        rng,
        max_linker_nodes,
        model.cfg.latent_h,
        model.cfg.latent_v,
    );
    generate_with_noise(model, fragments, &noise, anchors, rng)
}

/// [`generate`] with explicit prior noise; `noise.n_linker()` sets the
/// number of linker slots.
pub fn generate_with_noise<R: Rng>(
    model: &Model,
    fragments: &Molecule3D,
    noise: &LatentNoise,
    anchors: Option<(usize, usize)>,
    rng: &mut R,
) -> Result<Generation> {
    let cfg = &model.cfg;
    let table = cfg.valence_table();
    let nf = fragments.n();
    let m = noise.n_linker();
    if m == 0 {
        return Err(ModelError::Input(
            "max_linker_nodes must be positive".into(),
        ));
    }
    if fragments.num_components() != 2 {
        return Err(ModelError::Input(
            "fragments must form exactly two components".into(),
        ));
    }
    let comp = fragments.components();
    let n = nf + m;
    let tape = Tape::with_params(&model.store);
    let frag = encode_fragments(&tape, model, fragments)?;
    let lat = prior_latents(&tape, model, &frag, noise)?;
    let mut log_probs = Vec::new();
    let mut events = Vec::new();

    let (a1, a2) = match anchors {
        Some((a1, a2)) => {
            if a1 >= nf || a2 >= nf || comp[a1] == comp[a2] {
                return Err(ModelError::Input(
                    "given anchors must lie one per fragment".into(),
                ));
            }
            (a1, a2)
        }
        None => {
            let f1: Vec<usize> = (0..nf).filter(|&i| comp[i] == comp[0]).collect();
            let f2: Vec<usize> = (0..nf).filter(|&i| comp[i] != comp[0]).collect();
            let m1 = anchor_mask(fragments, &f1, &table);
            let m2 = anchor_mask(fragments, &f2, &table);
            for (k, mk) in [&m1, &m2].into_iter().enumerate() {
                if !mk.iter().any(|&b| b) {
                    return Err(ModelError::NoEligibleAnchor { fragment: k + 1 });
                }
            }
            let l1 = first_anchor_logits(&tape, model, &lat, &f1)?.value();
            let (i1, lp1) = sample_index(rng, l1.data(), &m1);
            let a1 = f1[i1];
            let l2 = second_anchor_logits(&tape, model, &lat, &f2, a1)?.value();
            let (i2, lp2) = sample_index(rng, l2.data(), &m2);
            log_probs.extend([lp1, lp2]);
            (a1, f2[i2])
        }
    };
    events.push(TraceEvent::Anchors { a1, a2 });

    let zl: Vec<usize> = (nf..n).collect();
    let type_logits = node_type_logits(&tape, model, lat.zh.gather(&zl)?)?.value();
    let nt = cfg.n_types();
    let all = vec![true; nt];
    let mut types = Vec::with_capacity(m);
    for r in 0..m {
        let (t, lp) = sample_index(rng, &type_logits.data()[r * nt..(r + 1) * nt], &all);
        types.push(t);
        log_probs.push(lp);
    }
    events.push(TraceEvent::Types {
        types: types.clone(),
    });

    let mut st = PartialState::new(fragments, &types, (a1, a2));
    let inputs = decoder_inputs(&tape, model, &lat, &st.types)?;
    let mut feat: Option<DecoderFeatures<'_>> = None;
    let mut queue = VecDeque::from([a1, a2]);
    let budget = decision_budget(m, table.max_valence());
    let mut used = 0;
    let mut status = GenStatus::Complete;
    'outer: while let Some(f) = queue.pop_front() {
        events.push(TraceEvent::Focus { node: f });
        loop {
            if used == budget {
                status = GenStatus::BudgetExceeded;
                break 'outer;
            }
            used += 1;
            let ft = match feat {
                Some(ft) => ft,
                None => {
                    let ft = decoder_mp(&tape, model, &inputs, &st)?;
                    feat = Some(ft);
                    ft
                }
            };
            let mask = st.edge_mask(f, &table);
            let logits = edge_logits(&tape, model, &lat, &ft, f)?.value();
            let (idx, lp) = sample_index(rng, logits.data(), &mask);
            log_probs.push(lp);
            if idx == n {
                events.push(TraceEvent::Edge {
                    focus: f,
                    target: EdgeTarget::Stop,
                });
                st.closed[f] = true;
                if !cfg.disable_coord_update {
                    let linker = st.present_linker();
                    if !linker.is_empty() {
                        let out = omega(
                            &tape,
                            &model.net.omega_updt,
                            &ft,
                            &st,
                            &linker,
                            Reference::Own,
                        )?
                        .value();
                        let vals = out.data();
                        let positions: Vec<(usize, [f64; 3])> = linker
                            .iter()
                            .enumerate()
                            .map(|(r, &i)| (i, row3(vals, r)))
                            .collect();
                        for &(i, p) in &positions {
                            st.coords[i] = p;
                        }
                        feat = None;
                        events.push(TraceEvent::Update { positions });
                    }
                }
                break;
            }
            events.push(TraceEvent::Edge {
                focus: f,
                target: EdgeTarget::Node(idx),
            });
            st.add_edge(f, idx);
            if !st.present[idx] {
                let out = omega(
                    &tape,
                    &model.net.omega_pred,
                    &ft,
                    &st,
                    &[idx],
                    Reference::MassCenter,
                )?
                .value();
                let pos = row3(out.data(), 0);
                st.place(idx, pos);
                events.push(TraceEvent::Coord { node: idx, pos });
                queue.push_back(idx);
            }
            feat = None;
        }
    }
    let trace = GenerationTrace { events };
    let molecule = replay(&trace, fragments)?;
    Ok(Generation {
        molecule,
        trace,
        log_probs,
        status,
    })
}
