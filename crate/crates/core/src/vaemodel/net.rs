use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::equivariant::{MfMpStack, Mlp, ParamBuilder, VnMlp};
use crate::tensorcore::{ParamId, ParamStore};

/// One coordinate operator `Omega`: pairwise invariant weights `p`, channel
/// gates `q`, and the two vector MLPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaNet {
    pub a3: ParamId,
    pub a4: ParamId,
    pub phi_p: Mlp,
    pub phi_q: Mlp,
    pub vn_pair: VnMlp,
    pub vn_out: VnMlp,
}

impl OmegaNet {
    fn new<R: rand::Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, cfg: &ModelConfig) -> Self {
        let (dh, mv, hid, c) = (cfg.dec_h(), cfg.latent_v, cfg.hidden, cfg.omega_channels);
        OmegaNet {
            a3: pb.uniform(&format!("{name}.a3"), &[mv, mv], mv),
            a4: pb.uniform(&format!("{name}.a4"), &[mv, mv], mv),
            phi_p: Mlp::new(pb, &format!("{name}.phi_p"), &[2 * dh + mv + 1, hid, 1]),
            phi_q: Mlp::new(pb, &format!("{name}.phi_q"), &[2 * dh + mv + 1, hid, c]),
            vn_pair: VnMlp::new(pb, &format!("{name}.vn_pair"), &[2 * mv, c, c]),
            vn_out: VnMlp::new(pb, &format!("{name}.vn_out"), &[c, c, 1]),
        }
    }
}

/// Every learnable block of the model; ids point into [`Model::store`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub enc_embed: ParamId,
    pub encoder: MfMpStack,
    pub mu_h: Mlp,
    pub sigma_h: Mlp,
    pub mu_v: VnMlp,
    pub sigma_v: Mlp,
    pub frag_h: Mlp,
    pub frag_v: VnMlp,
    pub dec_embed: ParamId,
    pub decoder: MfMpStack,
    pub a1: ParamId,
    pub anchor1: Mlp,
    pub anchor2: Mlp,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub type_head: Mlp,
    pub a2: ParamId,
    pub edge_head: Mlp,
    pub stop: ParamId,
    pub omega_pred: OmegaNet,
    pub omega_updt: OmegaNet,
}

impl Net {
    fn new<R: rand::Rng>(pb: &mut ParamBuilder<'_, R>, cfg: &ModelConfig) -> Self {
        let (eh, ev, hid) = (cfg.enc_h, cfg.enc_v, cfg.hidden);
        let (mh, mv, dh, t) = (cfg.latent_h, cfg.latent_v, cfg.dec_h(), cfg.n_types());
        let vn_head = |c_out: usize| {
            let mut d = vec![ev];
            d.extend(std::iter::repeat_n(c_out, cfg.vn_depth.max(1)));
            d
        };
        Net {
            enc_embed: pb.uniform("enc.embed", &[t, eh], 1),
            encoder: MfMpStack::new(pb, "enc.mp", &cfg.enc_mp()),
            mu_h: Mlp::new(pb, "enc.mu_h", &[eh, hid, mh]),
            sigma_h: Mlp::new(pb, "enc.sigma_h", &[eh, hid, mh]),
            mu_v: VnMlp::new(pb, "enc.mu_v", &vn_head(mv)),
            sigma_v: Mlp::new(pb, "enc.sigma_v", &[eh, hid, mv]),
            frag_h: Mlp::new(pb, "enc.frag_h", &[eh, hid, mh]),
            frag_v: VnMlp::new(pb, "enc.frag_v", &vn_head(mv)),
            dec_embed: pb.uniform("dec.embed", &[t, cfg.type_emb], 1),
            decoder: MfMpStack::new(pb, "dec.mp", &cfg.dec_mp()),
            a1: pb.uniform("anchor.a1", &[mv, mv], mv),
            anchor1: Mlp::new(pb, "anchor.first", &[mh + mv, hid, 1]),
            anchor2: Mlp::new(pb, "anchor.second", &[2 * (mh + mv), hid, 1]),
            wq: pb.uniform("types.wq", &[mh, cfg.attn_dim], mh),
            wk: pb.uniform("types.wk", &[mh, cfg.attn_dim], mh),
            wv: pb.uniform("types.wv", &[mh, cfg.attn_dim], mh),
            type_head: Mlp::new(pb, "types.head", &[mh + cfg.attn_dim, hid, t]),
            a2: pb.uniform("edge.a2", &[mv, mv], mv),
            edge_head: Mlp::new(pb, "edge.head", &[3 * dh + 2 * mv + mh, hid, 1]),
            stop: pb.uniform("edge.stop", &[1, dh], 1),
            omega_pred: OmegaNet::new(pb, "omega.pred", cfg),
            omega_updt: OmegaNet::new(pb, "omega.updt", cfg),
        }
    }
}

/// Configuration, parameter values and the block layout that indexes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub net: Net,
}

impl Model {
    /// Fresh model with weights drawn from a seeded stream. Panics on an
    /// invalid config; call [`ModelConfig::validate`] first for user input.
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net::new(
            &mut ParamBuilder {
                store: &mut store,
                rng: &mut rng,
            },
            &cfg,
        );
        Model { cfg, store, net }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}
