use super::decoder::{
    anchor_mask, decoder_inputs, decoder_mp, edge_logits, first_anchor_logits, node_type_logits,
    omega, second_anchor_logits, DecoderFeatures, PartialState, Reference,
};
use super::encoder::Latents;
use super::{Model, ModelError};
use crate::molgraph::{EdgeTarget, LinkerSample, TraceEvent};
use crate::tensorcore::{Tape, Var};

type Result<T> = std::result::Result<T, ModelError>;

/// Floor inside the coordinate log-MSE.
pub const LOG_MSE_FLOOR: f64 = 1e-8;

/// Where linker coordinates of the current graph come from while the
/// graph itself follows the trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordFeed {
    /// Ground-truth positions.
    #[default]
    Truth,
    /// The model's own (detached) placements and refinements.
    Predicted,
}

/// Summed negative log-likelihood terms of one trace plus bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct ForcedLoss<'t> {
    pub anchor_ce: Var<'t>,
    pub type_ce: Var<'t>,
    pub edge_ce: Var<'t>,
    /// `log(MSE + 1e-8)` over all placements and refinements, if any.
    pub coord: Option<Var<'t>>,
    pub sq_err: f64,
    pub coord_count: usize,
    /// Share of `sq_err` / `coord_count` from first placements.
    pub placed_sq_err: f64,
    pub placed_count: usize,
    pub correct: usize,
    pub decisions: usize,
    /// Correct and total decisions per kind: anchors, types, edges.
    pub by_kind: [(usize, usize); 3],
}

impl ForcedLoss<'_> {
    pub fn coord_mse(&self) -> f64 {
        if self.coord_count == 0 {
            0.0
        } else {
            self.sq_err / self.coord_count as f64
        }
    }
}

fn argmax_masked(logits: &[f64], mask: &[bool]) -> usize {
    let mut best = usize::MAX;
    for (i, (&x, &m)) in logits.iter().zip(mask).enumerate() {
        if m && (best == usize::MAX || x > logits[best]) {
            best = i;
        }
    }
    best
}

struct Tally<'t> {
    ce: Option<Var<'t>>,
    correct: usize,
    decisions: usize,
}

impl<'t> Tally<'t> {
    fn new() -> Self {
        Tally {
            ce: None,
            correct: 0,
            decisions: 0,
        }
    }

    fn push(&mut self, logits: Var<'t>, mask: &[bool], target: usize) -> Result<()> {
        let ce = logits.masked_cross_entropy(mask, target)?;
        self.ce = Some(match self.ce {
            Some(acc) => acc.add(&ce)?,
            None => ce,
        });
        if argmax_masked(logits.value().data(), mask) == target {
            self.correct += 1;
        }
        self.decisions += 1;
        Ok(())
    }

    fn total(&self, tape: &'t Tape<'t>) -> Var<'t> {
        self.ce.unwrap_or_else(|| tape.scalar(0.0))
    }
}

fn vocab(k: usize, detail: impl Into<String>) -> ModelError {
    ModelError::Vocabulary(format!("event {k}: {}", detail.into()))
}

/// Likelihood of every decision in the sample's trace with the true history
/// fed back at each step. Decoder message passing is recomputed only when
/// the current graph or its coordinates change.
pub fn teacher_forced_loss<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    sample: &LinkerSample,
    lat: &Latents<'t>,
    feed: CoordFeed,
) -> Result<ForcedLoss<'t>> {
    let trace = sample
        .trace
        .as_ref()
        .ok_or_else(|| ModelError::Input("sample has no trace".into()))?;
    let table = model.cfg.valence_table();
    let nf = sample.n_frag();
    let n = sample.full.n();
    if lat.n() != n || lat.n_frag != nf {
        return Err(ModelError::Input(format!(
            "latents cover {} nodes, sample has {n}",
            lat.n()
        )));
    }
    let truth = sample.full.coords();
    let mut anchors = Tally::new();
    let mut types = Tally::new();
    let mut edges = Tally::new();
    let mut sq_terms: Vec<Var<'t>> = Vec::new();
    let mut sq_err = 0.0;
    let mut coord_count = 0;

    let mut state: Option<PartialState> = None;
    let mut inputs = None;
    let mut feat: Option<DecoderFeatures<'t>> = None;
    let mut focus = usize::MAX;

    let mut placed = (0.0, 0usize);
    let mut score = |pred: Var<'t>, nodes: &[usize], first: bool| -> Result<()> {
        let t: Vec<[f64; 3]> = nodes.iter().map(|&i| truth[i]).collect();
        let diff = pred.sub(&tape.leaf(crate::equivariant::geometry::coords_tensor(&t)))?;
        let sq = diff.square()?.sum()?;
        sq_err += sq.item();
        coord_count += nodes.len();
        if first {
            placed.0 += sq.item();
            placed.1 += nodes.len();
        }
        sq_terms.push(sq);
        Ok(())
    };

    for (k, ev) in trace.events.iter().enumerate() {
        match ev {
            TraceEvent::Anchors { a1, a2 } => {
                let (a1, a2) = (*a1, *a2);
                if a1 >= nf || a2 >= nf {
                    return Err(vocab(k, "anchor outside fragments"));
                }
                let f1 = sample.fragment_component(a1);
                let f2 = sample.fragment_component(a2);
                let m1 = anchor_mask(&sample.fragments, &f1, &table);
                let m2 = anchor_mask(&sample.fragments, &f2, &table);
                let p1 = f1
                    .iter()
                    .position(|&i| i == a1)
                    .expect("anchor in own component");
                let p2 = f2
                    .iter()
                    .position(|&i| i == a2)
                    .ok_or_else(|| vocab(k, "anchors share a fragment"))?;
                if !m1[p1] || !m2[p2] {
                    return Err(vocab(k, "anchor has no free valence"));
                }
                anchors.push(first_anchor_logits(tape, model, lat, &f1)?, &m1, p1)?;
                anchors.push(second_anchor_logits(tape, model, lat, &f2, a1)?, &m2, p2)?;
                state = Some(PartialState::new(
                    &sample.fragments,
                    &sample.full.types()[nf..],
                    (a1, a2),
                ));
            }
            TraceEvent::Types { types: ts } => {
                if ts.len() != n - nf || ts.iter().any(|&t| t >= model.cfg.n_types()) {
                    return Err(vocab(k, "type list does not match the linker"));
                }
                let zl: Vec<usize> = (nf..n).collect();
                let logits = node_type_logits(tape, model, lat.zh.gather(&zl)?)?;
                let all = vec![true; model.cfg.n_types()];
                for (r, &t) in ts.iter().enumerate() {
                    let row = logits.narrow(0, r, 1)?.reshape(&[model.cfg.n_types()])?;
                    types.push(row, &all, t)?;
                }
                let st = state
                    .as_ref()
                    .ok_or_else(|| vocab(k, "types before anchors"))?;
                inputs = Some(decoder_inputs(tape, model, lat, &st.types)?);
            }
            TraceEvent::Focus { node } => {
                if *node >= n {
                    return Err(vocab(k, "focus out of range"));
                }
                focus = *node;
            }
            TraceEvent::Edge { focus: f, target } => {
                let st = state
                    .as_mut()
                    .ok_or_else(|| vocab(k, "edge before anchors"))?;
                let inp = inputs
                    .as_ref()
                    .ok_or_else(|| vocab(k, "edge before types"))?;
                if *f != focus {
                    return Err(vocab(k, "edge focus differs from the current focus"));
                }
                let ft = match feat {
                    Some(ft) => ft,
                    None => {
                        let ft = decoder_mp(tape, model, inp, st)?;
                        feat = Some(ft);
                        ft
                    }
                };
                let mask = st.edge_mask(focus, &table);
                let idx = match target {
                    EdgeTarget::Node(j) if *j < n => *j,
                    EdgeTarget::Node(_) => return Err(vocab(k, "edge target out of range")),
                    EdgeTarget::Stop => n,
                };
                if !mask[idx] {
                    return Err(vocab(
                        k,
                        format!("target {idx} is masked for focus {focus}"),
                    ));
                }
                edges.push(edge_logits(tape, model, lat, &ft, focus)?, &mask, idx)?;
                match target {
                    EdgeTarget::Node(j) => {
                        let j = *j;
                        st.add_edge(focus, j);
                        if !st.present[j] {
                            let pred = omega(
                                tape,
                                &model.net.omega_pred,
                                &ft,
                                st,
                                &[j],
                                Reference::MassCenter,
                            )?;
                            let pos = match feed {
                                CoordFeed::Truth => truth[j],
                                CoordFeed::Predicted => row3(&pred.value().into_data(), 0),
                            };
                            score(pred, &[j], true)?;
                            st.place(j, pos);
                        }
                        feat = None;
                    }
                    EdgeTarget::Stop => st.closed[focus] = true,
                }
            }
            TraceEvent::Coord { .. } => {}
            TraceEvent::Update { .. } => {
                if model.cfg.disable_coord_update {
                    continue;
                }
                let st = state
                    .as_mut()
                    .ok_or_else(|| vocab(k, "update before anchors"))?;
                let inp = inputs
                    .as_ref()
                    .ok_or_else(|| vocab(k, "update before types"))?;
                let linker = st.present_linker();
                if linker.is_empty() {
                    continue;
                }
                let ft = match feat {
                    Some(ft) => ft,
                    None => {
                        let ft = decoder_mp(tape, model, inp, st)?;
                        feat = Some(ft);
                        ft
                    }
                };
                let pred = omega(
                    tape,
                    &model.net.omega_updt,
                    &ft,
                    st,
                    &linker,
                    Reference::Own,
                )?;
                if feed == CoordFeed::Predicted {
                    let vals = pred.value().into_data();
                    for (r, &i) in linker.iter().enumerate() {
                        st.coords[i] = row3(&vals, r);
                    }
                    feat = None;
                }
                score(pred, &linker, false)?;
            }
        }
    }
    drop(score);
    let coord = if sq_terms.is_empty() {
        None
    } else {
        let mut total = sq_terms[0];
        for t in &sq_terms[1..] {
            total = total.add(t)?;
        }
        Some(
            total
                .scale(1.0 / coord_count as f64)?
                .add_scalar(LOG_MSE_FLOOR)?
                .log()?,
        )
    };
    Ok(ForcedLoss {
        anchor_ce: anchors.total(tape),
        type_ce: types.total(tape),
        edge_ce: edges.total(tape),
        coord,
        sq_err,
        coord_count,
        placed_sq_err: placed.0,
        placed_count: placed.1,
        correct: anchors.correct + types.correct + edges.correct,
        decisions: anchors.decisions + types.decisions + edges.decisions,
        by_kind: [
            (anchors.correct, anchors.decisions),
            (types.correct, types.decisions),
            (edges.correct, edges.decisions),
        ],
    })
}

pub(crate) fn row3(data: &[f64], r: usize) -> [f64; 3] {
    [data[3 * r], data[3 * r + 1], data[3 * r + 2]]
}
