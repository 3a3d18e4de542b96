use super::encoder::Latents;
use super::net::OmegaNet;
use super::{Model, ModelError};
use crate::equivariant::geometry::coords_tensor;
use crate::equivariant::{MpGraph, NodeState};
use crate::molgraph::{Molecule3D, ValenceTable};
use crate::tensorcore::{Tape, Tensor, Var};

type Result<T> = std::result::Result<T, ModelError>;

/// The partially decoded molecule `(G_t, R_t)` plus the bookkeeping of the
/// breadth-first decoder. Nodes `0..n_frag` are fragment atoms and are
/// always present; linker slots join when first connected.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialState {
    pub n_frag: usize,
    pub anchors: (usize, usize),
    pub types: Vec<usize>,
    pub present: Vec<bool>,
    pub coords: Vec<[f64; 3]>,
    /// Current edges as `(min, max)`, fragment bonds included.
    pub edges: Vec<(usize, usize)>,
    pub degree: Vec<usize>,
    pub closed: Vec<bool>,
}

impl PartialState {
    pub fn new(fragments: &Molecule3D, linker_types: &[usize], anchors: (usize, usize)) -> Self {
        let nf = fragments.n();
        let n = nf + linker_types.len();
        let mut types = fragments.types().to_vec();
        types.extend_from_slice(linker_types);
        let mut coords = fragments.coords().to_vec();
        coords.resize(n, [0.0; 3]);
        let mut degree = fragments.degrees();
        degree.resize(n, 0);
        PartialState {
            n_frag: nf,
            anchors,
            types,
            present: (0..n).map(|i| i < nf).collect(),
            coords,
            edges: fragments.edges().to_vec(),
            degree,
            closed: vec![false; n],
        }
    }

    pub fn n(&self) -> usize {
        self.types.len()
    }

    pub fn present_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.present[i]).collect()
    }

    pub fn present_linker(&self) -> Vec<usize> {
        (self.n_frag..self.n())
            .filter(|&i| self.present[i])
            .collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        self.edges.push((a.min(b), a.max(b)));
        self.degree[a] += 1;
        self.degree[b] += 1;
    }

    /// Writes a linker node position and marks it present.
    pub fn place(&mut self, node: usize, pos: [f64; 3]) {
        debug_assert!(node >= self.n_frag, "fragment coordinates are fixed");
        self.coords[node] = pos;
        self.present[node] = true;
    }

    fn has_free_valence(&self, i: usize, table: &ValenceTable) -> bool {
        self.degree[i] < table.max_degree(self.types[i])
    }

    /// Selectable targets for `focus`: entries `0..n` are nodes and entry
    /// `n` is STOP, which is always selectable.
    pub fn edge_mask(&self, focus: usize, table: &ValenceTable) -> Vec<bool> {
        let n = self.n();
        let nf = self.n_frag;
        let mut mask = vec![false; n + 1];
        mask[n] = true;
        if !self.has_free_valence(focus, table) {
            return mask;
        }
        for (i, m) in mask.iter_mut().enumerate().take(n) {
            let fragment_ok =
                i >= nf || (focus >= nf && (i == self.anchors.0 || i == self.anchors.1));
            *m = i != focus
                && fragment_ok
                && !self.closed[i]
                && self.has_free_valence(i, table)
                && !self.has_edge(focus, i);
        }
        mask
    }

    /// The molecule spanned by the present nodes, renumbered in index order.
    pub fn current_molecule(&self) -> Molecule3D {
        let nodes = self.present_nodes();
        let mut map = vec![usize::MAX; self.n()];
        for (k, &i) in nodes.iter().enumerate() {
            map[i] = k;
        }
        let edges = self.edges.iter().map(|&(a, b)| (map[a], map[b])).collect();
        Molecule3D::new(
            nodes.iter().map(|&i| self.types[i]).collect(),
            edges,
            nodes.iter().map(|&i| self.coords[i]).collect(),
        )
        .expect("partial state is a well-formed molecule")
    }
}

/// Decoder features `z~h: [n, m_h + e]`, `z~v: [n, 3, m_v]` for every slot.
#[derive(Clone, Copy, Debug)]
pub struct DecoderFeatures<'t> {
    pub h: Var<'t>,
    pub v: Var<'t>,
}

/// Decoder inputs: latents with the type embedding appended.
pub fn decoder_inputs<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    lat: &Latents<'t>,
    types: &[usize],
) -> Result<NodeState<'t>> {
    let emb = tape.param(model.net.dec_embed).gather(types)?;
    Ok(NodeState {
        h: tape.concat(&[lat.zh, emb], 1)?,
        v: lat.zv,
    })
}

/// Runs the decoder message passing over the present nodes. Slots outside
/// `G_t` keep their inputs unchanged.
pub fn decoder_mp<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    inputs: &NodeState<'t>,
    state: &PartialState,
) -> Result<DecoderFeatures<'t>> {
    let n = state.n();
    let present = state.present_nodes();
    if present.is_empty() {
        return Err(ModelError::Input("current graph is empty".into()));
    }
    let mut map = vec![usize::MAX; n];
    for (k, &i) in present.iter().enumerate() {
        map[i] = k;
    }
    let edges: Vec<(usize, usize)> = state.edges.iter().map(|&(a, b)| (map[a], map[b])).collect();
    let g = MpGraph::from_undirected(present.len(), &edges);
    let coords: Vec<[f64; 3]> = present.iter().map(|&i| state.coords[i]).collect();
    let coords = tape.leaf(coords_tensor(&coords));
    let sub = NodeState {
        h: inputs.h.gather(&present)?,
        v: inputs.v.gather(&present)?,
    };
    let out = model
        .net
        .decoder
        .forward(tape, &g, coords, sub, model.cfg.equivariant())?;
    if present.len() == n {
        return Ok(DecoderFeatures { h: out.h, v: out.v });
    }
    let absent: Vec<usize> = (0..n).filter(|&i| !state.present[i]).collect();
    let h = out
        .h
        .scatter_add(&present, n)?
        .add(&inputs.h.gather(&absent)?.scatter_add(&absent, n)?)?;
    let v = out
        .v
        .scatter_add(&present, n)?
        .add(&inputs.v.gather(&absent)?.scatter_add(&absent, n)?)?;
    Ok(DecoderFeatures { h, v })
}

/// `[rows, m_h + m_v]` invariant anchor features `(z^h, |A1 z^v|)`.
fn anchor_features<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    lat: &Latents<'t>,
    nodes: &[usize],
) -> Result<Var<'t>> {
    let zh = lat.zh.gather(nodes)?;
    let nv = lat
        .zv
        .gather(nodes)?
        .matmul(&tape.param(model.net.a1))?
        .norm_axis(1)?;
    Ok(tape.concat(&[zh, nv], 1)?)
}

/// Scores `c_i` for the first anchor over `frag1` nodes.
pub fn first_anchor_logits<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    lat: &Latents<'t>,
    frag1: &[usize],
) -> Result<Var<'t>> {
    let x = anchor_features(tape, model, lat, frag1)?;
    Ok(model
        .net
        .anchor1
        .forward(tape, x)?
        .reshape(&[frag1.len()])?)
}

/// Scores `c'_i` for the second anchor over `frag2` nodes given `a1`.
pub fn second_anchor_logits<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    lat: &Latents<'t>,
    frag2: &[usize],
    a1: usize,
) -> Result<Var<'t>> {
    let x = anchor_features(tape, model, lat, frag2)?;
    let xa = anchor_features(tape, model, lat, &[a1])?.gather(&vec![0; frag2.len()])?;
    let x = tape.concat(&[x, xa], 1)?;
    Ok(model
        .net
        .anchor2
        .forward(tape, x)?
        .reshape(&[frag2.len()])?)
}

/// Nodes of `nodes` that can still take a bond.
pub fn anchor_mask(fragments: &Molecule3D, nodes: &[usize], table: &ValenceTable) -> Vec<bool> {
    let deg = fragments.degrees();
    nodes
        .iter()
        .map(|&i| deg[i] < table.max_degree(fragments.types()[i]))
        .collect()
}

/// Type logits `[L, n_types]` from single-head self-attention over the
/// linker latents followed by a per-node MLP.
pub fn node_type_logits<'t>(tape: &'t Tape<'t>, model: &Model, zh: Var<'t>) -> Result<Var<'t>> {
    let net = &model.net;
    let q = zh.matmul(&tape.param(net.wq))?;
    let k = zh.matmul(&tape.param(net.wk))?;
    let v = zh.matmul(&tape.param(net.wv))?;
    let scale = 1.0 / (model.cfg.attn_dim as f64).sqrt();
    let att = q.matmul(&k.transpose()?)?.scale(scale)?.softmax()?;
    let ctx = att.matmul(&v)?;
    Ok(net.type_head.forward(tape, tape.concat(&[zh, ctx], 1)?)?)
}

/// Edge logits `[n + 1]` for `focus`; the last entry scores STOP.
///
/// Each candidate row is `(z~h_i, z~h_f, |A2 z~v_i|, |A2 z~v_f|, sum z~h,
/// sum z^h)` with both sums over all slots. STOP uses its learned invariant
/// embedding and a zero vector part.
pub fn edge_logits<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    lat: &Latents<'t>,
    feat: &DecoderFeatures<'t>,
    focus: usize,
) -> Result<Var<'t>> {
    let net = &model.net;
    let n = feat.h.shape()[0];
    let rows = vec![0usize; n + 1];
    let hi = tape.concat(&[feat.h, tape.param(net.stop)], 0)?;
    let hf = feat.h.gather(&vec![focus; n + 1])?;
    let norms = feat.v.matmul(&tape.param(net.a2))?.norm_axis(1)?;
    let ni = tape.concat(
        &[norms, tape.leaf(Tensor::zeros(&[1, model.cfg.latent_v]))],
        0,
    )?;
    let nf = norms.gather(&vec![focus; n + 1])?;
    let dh = feat.h.shape()[1];
    let sum_t = feat.h.sum_axis(0)?.reshape(&[1, dh])?.gather(&rows)?;
    let sum_z = lat
        .zh
        .sum_axis(0)?
        .reshape(&[1, model.cfg.latent_h])?
        .gather(&rows)?;
    let x = tape.concat(&[hi, hf, ni, nf, sum_t, sum_z], 1)?;
    Ok(net.edge_head.forward(tape, x)?.reshape(&[n + 1])?)
}

/// Which reference point the coordinate operator builds on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    /// Mass centre of the current graph (placement of a new node).
    MassCenter,
    /// The node's own position (refinement).
    Own,
}

/// Coordinates `[|S|, 3]` for `targets`:
/// `r~_i = r + sum_j p_ij (r_j - r) + VN_out(sum_j q_ij * VN_pair(z~v_i, z~v_j))`
/// with `j` over the present nodes other than `i`, and `p, q` read from
/// `(z~h_i, z~h_j, <A3 z~v_i, A4 z~v_j>, b_ij)` where `b_ij` is 1 when `i`
/// and `j` are bonded in `state`. A newly connected node is bonded to its
/// focus before its position is predicted.
pub fn omega<'t>(
    tape: &'t Tape<'t>,
    net: &OmegaNet,
    feat: &DecoderFeatures<'t>,
    state: &PartialState,
    targets: &[usize],
    reference: Reference,
) -> Result<Var<'t>> {
    let present = state.present_nodes();
    if present.is_empty() || targets.is_empty() {
        return Err(ModelError::Input(
            "coordinate operator needs a non-empty graph and targets".into(),
        ));
    }
    let center = {
        let mut c = [0.0; 3];
        for &j in &present {
            for a in 0..3 {
                c[a] += state.coords[j][a];
            }
        }
        c.map(|x| x / present.len() as f64)
    };
    let mut pair_i = Vec::new();
    let mut pair_j = Vec::new();
    let mut pair_slot = Vec::new();
    let mut rel = Vec::new();
    let mut bonded = Vec::new();
    let mut refs = Vec::with_capacity(targets.len());
    for (s, &i) in targets.iter().enumerate() {
        let r0 = match reference {
            Reference::MassCenter => center,
            Reference::Own => state.coords[i],
        };
        refs.push(r0);
        for &j in present.iter().filter(|&&j| j != i) {
            pair_i.push(i);
            pair_j.push(j);
            pair_slot.push(s);
            bonded.push(if state.has_edge(i, j) { 1.0 } else { 0.0 });
            rel.extend((0..3).map(|a| state.coords[j][a] - r0[a]));
        }
    }
    let base = tape.leaf(coords_tensor(&refs));
    if pair_i.is_empty() {
        return Ok(base);
    }
    let p_count = pair_i.len();
    let vi = feat.v.gather(&pair_i)?;
    let vj = feat.v.gather(&pair_j)?;
    let inner = vi
        .matmul(&tape.param(net.a3))?
        .dot_axis(&vj.matmul(&tape.param(net.a4))?, 1)?;
    let bond = tape.leaf(Tensor::new(vec![p_count, 1], bonded).expect("bond column"));
    let x = tape.concat(
        &[
            feat.h.gather(&pair_i)?,
            feat.h.gather(&pair_j)?,
            inner,
            bond,
        ],
        1,
    )?;
    let p = net.phi_p.forward(tape, x)?;
    let q = net.phi_q.forward(tape, x)?;
    let rel = tape.leaf(Tensor::new(vec![p_count, 3], rel).expect("pair offsets"));
    let ones = tape.leaf(Tensor::full(&[1, 3], 1.0));
    let shift = p
        .matmul(&ones)?
        .mul(&rel)?
        .scatter_add(&pair_slot, targets.len())?;
    let pair_vec = net.vn_pair.forward_cat(tape, &[vi, vj])?;
    let gated = q
        .expand(1, 3)?
        .mul(&pair_vec)?
        .scatter_add(&pair_slot, targets.len())?;
    let vec_out = net
        .vn_out
        .forward(tape, gated)?
        .reshape(&[targets.len(), 3])?;
    Ok(base.add(&shift)?.add(&vec_out)?)
}
