use super::{Model, ModelError};
use crate::equivariant::geometry::coords_tensor;
use crate::equivariant::{MpGraph, NodeState};
use crate::molgraph::{LinkerSample, Molecule3D};
use crate::tensorcore::{Tape, Tensor, Var};

type Result<T> = std::result::Result<T, ModelError>;

/// Floor added to softplus outputs so standard deviations stay positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Posterior parameters of the linker nodes: `mu_h, sigma_h: [L, m_h]`,
/// `mu_v: [L, 3, m_v]`, `sigma_v: [L, m_v]` (shared over x, y, z).
#[derive(Clone, Copy, Debug)]
pub struct Posterior<'t> {
    pub mu_h: Var<'t>,
    pub sigma_h: Var<'t>,
    pub mu_v: Var<'t>,
    pub sigma_v: Var<'t>,
}

/// Deterministic fragment latents: `zh: [F, m_h]`, `zv: [F, 3, m_v]`.
#[derive(Clone, Copy, Debug)]
pub struct FragmentLatents<'t> {
    pub zh: Var<'t>,
    pub zv: Var<'t>,
}

/// Latents for every node: fragment rows first, then linker slots.
#[derive(Clone, Copy, Debug)]
pub struct Latents<'t> {
    pub zh: Var<'t>,
    pub zv: Var<'t>,
    pub n_frag: usize,
}

impl Latents<'_> {
    pub fn n(&self) -> usize {
        self.zh.shape()[0]
    }
}

/// Encoder message passing over a whole molecule, starting from type
/// embeddings and zero vector features.
fn encode_graph<'t>(tape: &'t Tape<'t>, model: &Model, mol: &Molecule3D) -> Result<NodeState<'t>> {
    let cfg = &model.cfg;
    let n = mol.n();
    if let Some(&t) = mol.types().iter().find(|&&t| t >= cfg.n_types()) {
        return Err(ModelError::Vocabulary(format!(
            "atom type {t} outside the {}-type alphabet",
            cfg.n_types()
        )));
    }
    let h = tape.param(model.net.enc_embed).gather(mol.types())?;
    let v = tape.leaf(Tensor::zeros(&[n, 3, cfg.enc_v]));
    let g = MpGraph::from_undirected(n, mol.edges());
    let coords = tape.leaf(coords_tensor(mol.coords()));
    Ok(model
        .net
        .encoder
        .forward(tape, &g, coords, NodeState { h, v }, cfg.equivariant())?)
}

/// Fragment latents from a pass over the fragments alone.
pub fn encode_fragments<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    fragments: &Molecule3D,
) -> Result<FragmentLatents<'t>> {
    if fragments.n() == 0 {
        return Err(ModelError::Input("fragments are empty".into()));
    }
    let s = encode_graph(tape, model, fragments)?;
    Ok(FragmentLatents {
        zh: model.net.frag_h.forward(tape, s.h)?,
        zv: model.net.frag_v.forward(tape, s.v)?,
    })
}

/// Posterior over linker latents from the full molecule, plus fragment
/// latents from the fragments-only pass with the same weights.
pub fn encode<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    sample: &LinkerSample,
) -> Result<(Posterior<'t>, FragmentLatents<'t>)> {
    let net = &model.net;
    let nf = sample.n_frag();
    let s = encode_graph(tape, model, &sample.full)?;
    let lidx: Vec<usize> = (nf..sample.full.n()).collect();
    let h = s.h.gather(&lidx)?;
    let v = s.v.gather(&lidx)?;
    let post = Posterior {
        mu_h: net.mu_h.forward(tape, h)?,
        sigma_h: net
            .sigma_h
            .forward(tape, h)?
            .softplus()?
            .add_scalar(SIGMA_FLOOR)?,
        mu_v: net.mu_v.forward(tape, v)?,
        sigma_v: net
            .sigma_v
            .forward(tape, h)?
            .softplus()?
            .add_scalar(SIGMA_FLOOR)?,
    };
    let frag = encode_fragments(tape, model, &sample.fragments)?;
    Ok((post, frag))
}

/// Standard-normal draws for the linker latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    /// `[L, m_h]`
    pub eps_h: Tensor,
    /// `[L, 3, m_v]`
    pub eps_v: Tensor,
}

impl LatentNoise {
    pub fn sample<R: rand::Rng>(rng: &mut R, n_linker: usize, m_h: usize, m_v: usize) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut draw =
            |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(rng)).collect() };
        let eps_h = Tensor::new(vec![n_linker, m_h], draw(n_linker * m_h)).expect("noise shape");
        let eps_v =
            Tensor::new(vec![n_linker, 3, m_v], draw(n_linker * 3 * m_v)).expect("noise shape");
        LatentNoise { eps_h, eps_v }
    }

    pub fn zeros(n_linker: usize, m_h: usize, m_v: usize) -> Self {
        LatentNoise {
            eps_h: Tensor::zeros(&[n_linker, m_h]),
            eps_v: Tensor::zeros(&[n_linker, 3, m_v]),
        }
    }

    pub fn n_linker(&self) -> usize {
        self.eps_h.shape()[0]
    }

    /// Noise with its vector part rotated by `q` along the spatial axis.
    pub fn rotated(&self, q: &crate::equivariant::geometry::Mat3) -> Self {
        LatentNoise {
            eps_h: self.eps_h.clone(),
            eps_v: crate::equivariant::geometry::rotate_spatial(&self.eps_v, q),
        }
    }
}

fn check_noise(noise: &LatentNoise, l: usize, m_h: usize, m_v: usize) -> Result<()> {
    if noise.eps_h.shape() != [l, m_h] || noise.eps_v.shape() != [l, 3, m_v] {
        return Err(ModelError::Input(format!(
            "noise shapes {:?} / {:?} do not match {l} linker nodes",
            noise.eps_h.shape(),
            noise.eps_v.shape()
        )));
    }
    Ok(())
}

/// Reparameterised linker latents `z = mu + sigma * eps` stacked under the
/// fragment latents. Vector latents are zeroed when equivariant features
/// are disabled.
pub fn sample_latents<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    post: &Posterior<'t>,
    frag: &FragmentLatents<'t>,
    noise: &LatentNoise,
) -> Result<Latents<'t>> {
    let (mh, mv) = (model.cfg.latent_h, model.cfg.latent_v);
    let l = post.mu_h.shape()[0];
    check_noise(noise, l, mh, mv)?;
    let zh = post
        .mu_h
        .add(&post.sigma_h.mul(&tape.leaf(noise.eps_h.clone()))?)?;
    let zv = post.mu_v.add(
        &post
            .sigma_v
            .expand(1, 3)?
            .mul(&tape.leaf(noise.eps_v.clone()))?,
    )?;
    stack_latents(tape, model, frag, zh, zv)
}

/// Latents drawn from the standard-normal prior for `noise.n_linker()` slots.
pub fn prior_latents<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    frag: &FragmentLatents<'t>,
    noise: &LatentNoise,
) -> Result<Latents<'t>> {
    let (mh, mv) = (model.cfg.latent_h, model.cfg.latent_v);
    check_noise(noise, noise.n_linker(), mh, mv)?;
    let zh = tape.leaf(noise.eps_h.clone());
    let zv = tape.leaf(noise.eps_v.clone());
    stack_latents(tape, model, frag, zh, zv)
}

fn stack_latents<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    frag: &FragmentLatents<'t>,
    zh: Var<'t>,
    zv: Var<'t>,
) -> Result<Latents<'t>> {
    let n_frag = frag.zh.shape()[0];
    let zh_all = tape.concat(&[frag.zh, zh], 0)?;
    let zv_all = if model.cfg.equivariant() {
        tape.concat(&[frag.zv, zv], 0)?
    } else {
        let n = zh_all.shape()[0];
        tape.leaf(Tensor::zeros(&[n, 3, model.cfg.latent_v]))
    };
    Ok(Latents {
        zh: zh_all,
        zv: zv_all,
        n_frag,
    })
}

/// Closed-form `KL(q || N(0, I))` summed over linker nodes, split into the
/// invariant and vector parts.
///
/// Invariant: `1/2 (s^2 + mu^2 - 1 - ln s^2)` per dimension. Vector, per
/// channel with isotropic spread: `1/2 (3 s^2 + |mu|^2 - 3 - 3 ln s^2)`.
pub fn kl_divergence<'t>(post: &Posterior<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let s2 = post.sigma_h.square()?;
    let kl_h = s2
        .add(&post.mu_h.square()?)?
        .sub(&s2.log()?)?
        .add_scalar(-1.0)?
        .sum()?
        .scale(0.5)?;
    let sv2 = post.sigma_v.square()?;
    let mu_norm2 = post.mu_v.square()?.sum_axis(1)?;
    let kl_v = sv2
        .scale(3.0)?
        .add(&mu_norm2)?
        .sub(&sv2.log()?.scale(3.0)?)?
        .add_scalar(-3.0)?
        .sum()?
        .scale(0.5)?;
    Ok((kl_h, kl_v))
}
