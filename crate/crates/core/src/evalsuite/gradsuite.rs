use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::equivariant::{
    aggregate, messages, mix_features, MfMpLayer, Mlp, MpGraph, NodeState, VnMlp,
};
use crate::molgraph::LinkerSample;
use crate::synthdata::{gen_dataset, GenSpec};
use crate::tensorcore::{
    directional_grad_check, finite_diff_check_with_params, ParamId, ParamStore, Tape, Tensor,
    TensorError, Var,
};
use crate::training::elbo_loss;
use crate::vaemodel::{
    decoder_inputs, decoder_mp, edge_logits, encode, first_anchor_logits, node_type_logits, omega,
    sample_latents, second_anchor_logits, CoordFeed, LatentNoise, Model, ModelError, OmegaNet,
    PartialState, Reference,
};

/// Largest tolerated relative error between tape and central-difference
/// gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Draws whose Vector-ReLU kink margin is at or below this are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradSuiteSettings {
    pub eps: f64,
    pub seed: u64,
    /// Random directions per parameter-level check.
    pub directions: usize,
    /// Fresh inputs tried per check before giving up on the kink margin.
    pub max_draws: usize,
    pub beta: f64,
}

impl Default for GradSuiteSettings {
    fn default() -> Self {
        GradSuiteSettings {
            eps: 1e-5,
            seed: 0,
            directions: 8,
            max_draws: 40,
            beta: 0.6,
        }
    }
}

/// One checked block. `max_rel_err` is infinite when no draw cleared the
/// kink margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub kink_margin: f64,
    pub draws: usize,
}

impl GradEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub entries: Vec<GradEntry>,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(GradEntry::passed)
    }

    /// Entry with the largest error; NaN sorts last.
    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| {
            let key = |e: &GradEntry| {
                if e.max_rel_err.is_nan() {
                    f64::INFINITY
                } else {
                    e.max_rel_err
                }
            };
            key(a).total_cmp(&key(b))
        })
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

struct Draw {
    err: f64,
    checked: usize,
    margin: f64,
}

/// Runs `attempt` on fresh draws until one clears the kink margin.
fn first_clear(
    name: &str,
    settings: &GradSuiteSettings,
    mut attempt: impl FnMut(u64) -> Result<Draw, EvalError>,
) -> Result<GradEntry, EvalError> {
    let mut last_margin = 0.0;
    for d in 0..settings.max_draws {
        let r = attempt(settings.seed.wrapping_mul(1_000_003).wrapping_add(d as u64))?;
        if r.margin > KINK_MARGIN {
            return Ok(GradEntry {
                name: name.to_string(),
                max_rel_err: r.err,
                checked: r.checked,
                kink_margin: r.margin,
                draws: d + 1,
            });
        }
        last_margin = r.margin;
    }
    Ok(GradEntry {
        name: name.to_string(),
        max_rel_err: f64::INFINITY,
        checked: 0,
        kink_margin: last_margin,
        draws: settings.max_draws,
    })
}

type InputLoss<'a> = dyn for<'t> Fn(&'t Tape<'t>, Var<'t>) -> Result<Var<'t>, TensorError> + 'a;

/// Per-coordinate input check plus a directional check over `params`, both
/// on a fixed random projection of the block output.
fn layer_draw(
    store: &ParamStore,
    params: &[ParamId],
    f: &InputLoss<'_>,
    x: &Tensor,
    settings: &GradSuiteSettings,
    seed: u64,
) -> Result<Draw, EvalError> {
    let (e_in, m_in) = finite_diff_check_with_params(store, f, x, settings.eps)?;
    let rep = directional_grad_check(
        store,
        params,
        settings.directions,
        settings.eps,
        seed,
        |t| {
            let xv = t.leaf(x.clone());
            f(t, xv)
        },
    )?;
    Ok(Draw {
        err: e_in.max(rep.max_rel_err),
        checked: x.numel() + rep.checked,
        margin: m_in.min(rep.kink_margin),
    })
}

fn mlp_ids(m: &Mlp) -> Vec<ParamId> {
    m.layers.iter().flat_map(|l| [l.w, l.b]).collect()
}

fn vn_ids(m: &VnMlp) -> Vec<ParamId> {
    m.layers.iter().flat_map(|l| [l.w, l.u]).collect()
}

fn omega_ids(o: &OmegaNet) -> Vec<ParamId> {
    let mut v = vec![o.a3, o.a4];
    v.extend(mlp_ids(&o.phi_p));
    v.extend(mlp_ids(&o.phi_q));
    v.extend(vn_ids(&o.vn_pair));
    v.extend(vn_ids(&o.vn_out));
    v
}

fn project<'t>(t: &'t Tape<'t>, y: Var<'t>, seed: u64) -> Result<Var<'t>, TensorError> {
    let w = rand_tensor(&y.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    y.mul(&t.leaf(w))?.sum()
}

fn layer_entries(model: &Model, settings: &GradSuiteSettings) -> Result<Vec<GradEntry>, EvalError> {
    let layer: &MfMpLayer = &model.net.encoder.layers[0];
    let (nh, nv, n) = (layer.n_h, layer.n_v, 5);
    let eqv = model.cfg.equivariant();
    let g = MpGraph::from_undirected(n, &[(0, 1), (1, 2), (2, 3), (1, 4), (3, 4)]);
    let store = &model.store;
    let fixture = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Tensor::new(
            vec![n, 3],
            (0..3 * n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .expect("shape");
        (
            c,
            rand_tensor(&[n, nh], &mut rng),
            rand_tensor(&[n, 3, nv], &mut rng),
        )
    };
    let mut out = Vec::new();

    let vn = &layer.agg.vn4;
    out.push(first_clear("vn_relu", settings, |s| {
        let x = rand_tensor(&[n, 3, vn.c_in()], &mut ChaCha8Rng::seed_from_u64(s));
        let loss: Box<InputLoss<'_>> = Box::new(move |t, x| project(t, vn.forward(t, x)?, s ^ 1));
        layer_draw(store, &vn_ids(vn), loss.as_ref(), &x, settings, s)
    })?);

    let mix = &layer.mix;
    out.push(first_clear("mix_features", settings, |s| {
        let (_, h, v) = fixture(s);
        let loss: Box<InputLoss<'_>> = Box::new(move |t, x| {
            let m = mix_features(
                t,
                mix,
                NodeState {
                    h: t.leaf(h.clone()),
                    v: x,
                },
                eqv,
            )?;
            let a = project(t, m.h1, s ^ 2)?.add(&project(t, m.h2, s ^ 3)?)?;
            a.add(&project(t, m.v1, s ^ 4)?)
        });
        let mut ids = mlp_ids(&mix.phi1);
        for m in [&mix.phi2, &mix.phi3] {
            ids.extend(mlp_ids(m));
        }
        for m in [&mix.vn1, &mix.vn2, &mix.vn3] {
            ids.extend(vn_ids(m));
        }
        layer_draw(store, &ids, loss.as_ref(), &v, settings, s)
    })?);

    let msg = &layer.msg;
    let gm = &g;
    out.push(first_clear("messages", settings, |s| {
        let (c, h, v) = fixture(s);
        let loss: Box<InputLoss<'_>> = Box::new(move |t, x| {
            let m = mix_features(
                t,
                mix,
                NodeState {
                    h: t.leaf(h.clone()),
                    v: t.leaf(v.clone()),
                },
                eqv,
            )?;
            let (mh, mv) = messages(t, msg, gm, &m, x)?.expect("fixture has edges");
            project(t, mh, s ^ 5)?.add(&project(t, mv, s ^ 6)?)
        });
        let mut ids = Vec::new();
        for k in [&msg.ker1, &msg.ker2, &msg.ker3] {
            ids.extend([k.sharpness, k.affine.w, k.affine.b]);
        }
        layer_draw(store, &ids, loss.as_ref(), &c, settings, s)
    })?);

    let agg = &layer.agg;
    out.push(first_clear("aggregate", settings, |s| {
        let (_, h, v) = fixture(s);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 7);
        let (sum_h, sum_v) = (
            rand_tensor(&[n, nh], &mut rng),
            rand_tensor(&[n, 3, nv], &mut rng),
        );
        let loss: Box<InputLoss<'_>> = Box::new(move |t, x| {
            let st = NodeState {
                h: x,
                v: t.leaf(v.clone()),
            };
            let o = aggregate(
                t,
                agg,
                st,
                t.leaf(sum_h.clone()),
                t.leaf(sum_v.clone()),
                eqv,
            )?;
            project(t, o.h, s ^ 8)?.add(&project(t, o.v, s ^ 9)?)
        });
        let mut ids = vec![agg.gru.w_i, agg.gru.b_i, agg.gru.w_h, agg.gru.b_h];
        ids.extend(vn_ids(&agg.vn4));
        layer_draw(store, &ids, loss.as_ref(), &h, settings, s)
    })?);
    Ok(out)
}

/// Decoder head outputs at the step right after the first linker node
/// joins: anchor logits, type logits, edge logits for that node, and both
/// coordinate operators.
fn head_outputs<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    s: &LinkerSample,
    noise: &LatentNoise,
) -> Result<Vec<Var<'t>>, ModelError> {
    let nf = s.n_frag();
    let (p, f) = encode(tape, model, s)?;
    let lat = sample_latents(tape, model, &p, &f, noise)?;
    let mut st = PartialState::new(&s.fragments, &s.full.types()[nf..], s.anchors);
    let j = s.cut_edges[0].1;
    st.add_edge(s.anchors.0, j);
    st.place(j, s.full.coords()[j]);
    let inputs = decoder_inputs(tape, model, &lat, &st.types)?;
    let feat = decoder_mp(tape, model, &inputs, &st)?;
    let rows: Vec<usize> = (nf..st.n()).collect();
    let others: Vec<usize> = rows.iter().copied().filter(|&i| i != j).collect();
    Ok(vec![
        first_anchor_logits(tape, model, &lat, &s.fragment_component(s.anchors.0))?,
        second_anchor_logits(
            tape,
            model,
            &lat,
            &s.fragment_component(s.anchors.1),
            s.anchors.0,
        )?,
        node_type_logits(tape, model, lat.zh.gather(&rows)?)?,
        edge_logits(tape, model, &lat, &feat, j)?,
        omega(
            tape,
            &model.net.omega_pred,
            &feat,
            &st,
            &others,
            Reference::MassCenter,
        )?,
        omega(
            tape,
            &model.net.omega_updt,
            &feat,
            &st,
            &[j],
            Reference::Own,
        )?,
    ])
}

fn probe_samples(model: &Model, seed: u64) -> Result<Vec<LinkerSample>, EvalError> {
    let spec = GenSpec {
        min_nodes: 7,
        max_nodes: 8,
        min_linker: 2,
        valence: model.cfg.valence.clone(),
        seed,
        ..GenSpec::default()
    };
    gen_dataset(8, &spec)
        .map(|r| r.0)
        .map_err(|e| EvalError::Config(e.to_string()))
}

fn model_entries(model: &Model, settings: &GradSuiteSettings) -> Result<Vec<GradEntry>, EvalError> {
    let pool = probe_samples(model, settings.seed)?;
    let (mh, mv) = (model.cfg.latent_h, model.cfg.latent_v);
    let draw = |d: u64| -> (&LinkerSample, LatentNoise) {
        let s = &pool[(d % pool.len() as u64) as usize];
        let noise = LatentNoise::sample(&mut ChaCha8Rng::seed_from_u64(d), s.n_linker(), mh, mv);
        (s, noise)
    };
    let net = &model.net;
    let mut blocks: Vec<(&str, Vec<ParamId>)> = vec![
        (
            "anchor head",
            [mlp_ids(&net.anchor1), mlp_ids(&net.anchor2), vec![net.a1]].concat(),
        ),
        (
            "type head",
            [mlp_ids(&net.type_head), vec![net.wq, net.wk, net.wv]].concat(),
        ),
        (
            "edge head",
            [mlp_ids(&net.edge_head), vec![net.a2, net.stop]].concat(),
        ),
        ("omega pred", omega_ids(&net.omega_pred)),
        ("omega updt", omega_ids(&net.omega_updt)),
    ];
    let output_of = [vec![0, 1], vec![2], vec![3], vec![4], vec![5]];
    let mut out = Vec::new();
    for (b, (name, ids)) in blocks.drain(..).enumerate() {
        let which = &output_of[b];
        out.push(first_clear(name, settings, |d| {
            let (s, noise) = draw(d);
            let rep = directional_grad_check(
                &model.store,
                &ids,
                settings.directions,
                settings.eps,
                d,
                |t| {
                    let outs = head_outputs(t, model, s, &noise)?;
                    let mut acc = t.scalar(0.0);
                    for &k in which {
                        acc = acc.add(&project(t, outs[k], d ^ (k as u64 + 11))?)?;
                    }
                    Ok::<_, EvalError>(acc)
                },
            )?;
            Ok(Draw {
                err: rep.max_rel_err,
                checked: rep.checked,
                margin: rep.kink_margin,
            })
        })?);
    }
    let all: Vec<ParamId> = model.store.ids().collect();
    out.push(first_clear("elbo_loss", settings, |d| {
        let (s, noise) = draw(d);
        let rep = directional_grad_check(
            &model.store,
            &all,
            settings.directions,
            settings.eps,
            d,
            |t| {
                elbo_loss(t, model, s, settings.beta, &noise, CoordFeed::Truth, 0)
                    .map(|e| e.total)
                    .map_err(EvalError::from)
            },
        )?;
        Ok(Draw {
            err: rep.max_rel_err,
            checked: rep.checked,
            margin: rep.kink_margin,
        })
    })?);
    Ok(out)
}

/// Finite-difference checks of every layer kind, each decoder head, both
/// coordinate operators and the full objective, using `model`'s weights.
/// Layer checks run per coordinate on the block inputs and along random
/// directions in the block parameters; model-level checks run along random
/// parameter directions.
pub fn gradient_suite(
    model: &Model,
    settings: &GradSuiteSettings,
) -> Result<GradSuiteReport, EvalError> {
    if !(settings.eps > 0.0) || settings.directions == 0 || settings.max_draws == 0 {
        return Err(EvalError::Config(
            "eps, directions and max_draws must be positive".into(),
        ));
    }
    let mut entries = layer_entries(model, settings)?;
    entries.extend(model_entries(model, settings)?);
    Ok(GradSuiteReport { entries })
}
