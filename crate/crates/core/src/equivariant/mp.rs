use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{default_means, Gru, Mlp, ParamBuilder, RbfKernel, VnMlp};
use crate::tensorcore::{Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// Directed message edges `src -> dst` over `n` nodes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MpGraph {
    pub n: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl MpGraph {
    /// Both directions of every undirected edge, in edge order.
    pub fn from_undirected(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = MpGraph {
            n,
            src: Vec::with_capacity(2 * edges.len()),
            dst: Vec::new(),
        };
        for &(a, b) in edges {
            g.src.extend([a, b]);
            g.dst.extend([b, a]);
        }
        g
    }
}

/// Invariant and equivariant node features: `h: [N, n_h]`, `v: [N, 3, n_v]`.
#[derive(Clone, Copy, Debug)]
pub struct NodeState<'t> {
    pub h: Var<'t>,
    pub v: Var<'t>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpConfig {
    pub n_h: usize,
    pub n_v: usize,
    pub layers: usize,
    pub hidden: usize,
    pub vn_depth: usize,
}

impl Default for MpConfig {
    fn default() -> Self {
        MpConfig {
            n_h: 64,
            n_v: 16,
            layers: 4,
            hidden: 64,
            vn_depth: 2,
        }
    }
}

/// Weights for the feature mixing step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub phi1: Mlp,
    pub phi2: Mlp,
    pub phi3: Mlp,
    pub vn1: VnMlp,
    pub vn2: VnMlp,
    pub vn3: VnMlp,
}

/// Mixed intermediate features `(h', h'', v')`.
#[derive(Clone, Copy, Debug)]
pub struct Mixed<'t> {
    pub h1: Var<'t>,
    pub h2: Var<'t>,
    pub v1: Var<'t>,
}

/// `h' = phi1(h, |VN1 v|)`, `h'' = phi2(h, |VN2 v|)`, `v' = phi3(h) * VN3 v`.
///
/// With `equivariant == false` the vector paths are bypassed: norms are
/// replaced by zeros and `v'` is zero.
pub fn mix_features<'t>(
    tape: &'t Tape<'t>,
    p: &MixParams,
    s: NodeState<'t>,
    equivariant: bool,
) -> Result<Mixed<'t>> {
    let n = s.h.shape()[0];
    let nv = p.vn3.c_out();
    let norms = |vn: &VnMlp| -> Result<Var<'t>> {
        if equivariant {
            vn.forward(tape, s.v)?.norm_axis(1)
        } else {
            Ok(tape.leaf(Tensor::zeros(&[n, vn.c_out()])))
        }
    };
    let h1 = p
        .phi1
        .forward(tape, tape.concat(&[s.h, norms(&p.vn1)?], 1)?)?;
    let h2 = p
        .phi2
        .forward(tape, tape.concat(&[s.h, norms(&p.vn2)?], 1)?)?;
    let v1 = if equivariant {
        let gate = p.phi3.forward(tape, s.h)?;
        gate.expand(1, 3)?.mul(&p.vn3.forward(tape, s.v)?)?
    } else {
        tape.leaf(Tensor::zeros(&[n, 3, nv]))
    };
    Ok(Mixed { h1, h2, v1 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageParams {
    pub ker1: RbfKernel,
    pub ker2: RbfKernel,
    pub ker3: RbfKernel,
}

/// Per-edge messages for `g`: `m^h = Ker1(d) * h'_j` and
/// `m^v = Ker2(d) * v'_j + (Ker3(d) * h''_j) r_ij^T` with `r_ij = r_i - r_j`.
///
/// Returns `None` for an edgeless graph.
pub fn messages<'t>(
    tape: &'t Tape<'t>,
    p: &MessageParams,
    g: &MpGraph,
    mixed: &Mixed<'t>,
    coords: Var<'t>,
) -> Result<Option<(Var<'t>, Var<'t>)>> {
    if g.src.is_empty() {
        return Ok(None);
    }
    let nv = mixed.v1.shape()[2];
    let r = coords.gather(&g.dst)?.sub(&coords.gather(&g.src)?)?;
    let d = r.norm_axis(1)?;
    let mh = p.ker1.forward(tape, d)?.mul(&mixed.h1.gather(&g.src)?)?;
    let k2 = p.ker2.forward(tape, d)?;
    let k3 = p.ker3.forward(tape, d)?.mul(&mixed.h2.gather(&g.src)?)?;
    let mv = k2
        .expand(1, 3)?
        .mul(&mixed.v1.gather(&g.src)?)?
        .add(&k3.expand(1, 3)?.mul(&r.expand(2, nv)?)?)?;
    Ok(Some((mh, mv)))
}

/// Sums messages into their destination nodes.
pub fn aggregate_messages<'t>(
    tape: &'t Tape<'t>,
    g: &MpGraph,
    msgs: Option<(Var<'t>, Var<'t>)>,
    n_h: usize,
    n_v: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    match msgs {
        Some((mh, mv)) => Ok((mh.scatter_add(&g.dst, g.n)?, mv.scatter_add(&g.dst, g.n)?)),
        None => Ok((
            tape.leaf(Tensor::zeros(&[g.n, n_h])),
            tape.leaf(Tensor::zeros(&[g.n, 3, n_v])),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggParams {
    pub gru: Gru,
    pub vn4: VnMlp,
}

/// `h~ = GRU(h, sum m^h)`, `v~ = VN4([v ; sum m^v])`.
pub fn aggregate<'t>(
    tape: &'t Tape<'t>,
    p: &AggParams,
    s: NodeState<'t>,
    sum_h: Var<'t>,
    sum_v: Var<'t>,
    equivariant: bool,
) -> Result<NodeState<'t>> {
    let h = p.gru.forward(tape, s.h, sum_h)?;
    let v = if equivariant {
        p.vn4.forward_cat(tape, &[s.v, sum_v])?
    } else {
        let sh = s.v.shape();
        tape.leaf(Tensor::zeros(&[sh[0], 3, p.vn4.c_out()]))
    };
    Ok(NodeState { h, v })
}

/// One mixed-features message-passing layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfMpLayer {
    pub mix: MixParams,
    pub msg: MessageParams,
    pub agg: AggParams,
    pub n_h: usize,
    pub n_v: usize,
}

impl MfMpLayer {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: &MpConfig) -> Self {
        let (nh, nv, hid) = (cfg.n_h, cfg.n_v, cfg.hidden);
        let vn_dims = |c_in: usize| {
            let mut d = vec![c_in];
            d.extend(std::iter::repeat_n(nv, cfg.vn_depth.max(1)));
            d
        };
        let means = default_means();
        MfMpLayer {
            mix: MixParams {
                phi1: Mlp::new(pb, &format!("{name}.phi1"), &[nh + nv, hid, nh]),
                phi2: Mlp::new(pb, &format!("{name}.phi2"), &[nh + nv, hid, nv]),
                phi3: Mlp::new(pb, &format!("{name}.phi3"), &[nh, hid, nv]),
                vn1: VnMlp::new(pb, &format!("{name}.vn1"), &vn_dims(nv)),
                vn2: VnMlp::new(pb, &format!("{name}.vn2"), &vn_dims(nv)),
                vn3: VnMlp::new(pb, &format!("{name}.vn3"), &vn_dims(nv)),
            },
            msg: MessageParams {
                ker1: RbfKernel::new(pb, &format!("{name}.ker1"), &means, nh),
                ker2: RbfKernel::new(pb, &format!("{name}.ker2"), &means, nv),
                ker3: RbfKernel::new(pb, &format!("{name}.ker3"), &means, nv),
            },
            agg: AggParams {
                gru: Gru::new(pb, &format!("{name}.gru"), nh),
                vn4: VnMlp::new(pb, &format!("{name}.vn4"), &vn_dims(2 * nv)),
            },
            n_h: nh,
            n_v: nv,
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<'t>,
        g: &MpGraph,
        coords: Var<'t>,
        s: NodeState<'t>,
        equivariant: bool,
    ) -> Result<NodeState<'t>> {
        let mixed = mix_features(tape, &self.mix, s, equivariant)?;
        let msgs = messages(tape, &self.msg, g, &mixed, coords)?;
        let (sh, sv) = aggregate_messages(tape, g, msgs, self.n_h, self.n_v)?;
        aggregate(tape, &self.agg, s, sh, sv, equivariant)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfMpStack {
    pub layers: Vec<MfMpLayer>,
}

impl MfMpStack {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: &MpConfig) -> Self {
        MfMpStack {
            layers: (0..cfg.layers)
                .map(|l| MfMpLayer::new(pb, &format!("{name}.{l}"), cfg))
                .collect(),
        }
    }

    /// Runs every layer over `g`; `coords` is `[N, 3]` and must cover all
    /// nodes of the graph.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<'t>,
        g: &MpGraph,
        coords: Var<'t>,
        s: NodeState<'t>,
        equivariant: bool,
    ) -> Result<NodeState<'t>> {
        let cs = coords.shape();
        if cs != [g.n, 3] || s.h.shape()[0] != g.n || s.v.shape()[0] != g.n {
            return Err(TensorError::ShapeMismatch {
                op: "mf_mp",
                detail: format!("graph of {} nodes, coordinates {:?}", g.n, cs),
            });
        }
        let mut st = s;
        for l in &self.layers {
            st = l.forward(tape, g, coords, st, equivariant)?;
        }
        Ok(st)
    }
}
