use serde::{Deserialize, Serialize};

use crate::equivariant::MpConfig;
use crate::molgraph::ValenceTable;

/// Architecture and decoding switches. Everything that affects parameter
/// shapes lives here and is echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Max degree per atom type; its length is the type alphabet size.
    pub valence: Vec<usize>,
    pub enc_h: usize,
    pub enc_v: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub vn_depth: usize,
    pub latent_h: usize,
    pub latent_v: usize,
    pub type_emb: usize,
    pub attn_dim: usize,
    /// Channels of the pairwise vector map inside the coordinate operator.
    pub omega_channels: usize,
    /// Zero the vector channels and bypass every vector path.
    pub disable_equivariant: bool,
    /// Skip the coordinate refinement after each STOP.
    pub disable_coord_update: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            valence: ValenceTable::default().entries().to_vec(),
            enc_h: 64,
            enc_v: 16,
            enc_layers: 4,
            dec_layers: 4,
            hidden: 64,
            vn_depth: 2,
            latent_h: 32,
            latent_v: 8,
            type_emb: 8,
            attn_dim: 16,
            omega_channels: 8,
            disable_equivariant: false,
            disable_coord_update: false,
        }
    }
}

impl ModelConfig {
    /// Small widths for desk-scale overfitting runs.
    pub fn compact() -> Self {
        ModelConfig {
            enc_h: 24,
            enc_v: 6,
            enc_layers: 2,
            dec_layers: 2,
            hidden: 32,
            vn_depth: 1,
            latent_h: 16,
            latent_v: 4,
            type_emb: 6,
            attn_dim: 8,
            omega_channels: 4,
            ..Self::default()
        }
    }

    pub fn n_types(&self) -> usize {
        self.valence.len()
    }

    pub fn valence_table(&self) -> ValenceTable {
        ValenceTable::new(self.valence.clone()).expect("validated config")
    }

    /// Width of decoder invariant features: latent plus type embedding.
    pub fn dec_h(&self) -> usize {
        self.latent_h + self.type_emb
    }

    pub fn equivariant(&self) -> bool {
        !self.disable_equivariant
    }

    pub fn enc_mp(&self) -> MpConfig {
        MpConfig {
            n_h: self.enc_h,
            n_v: self.enc_v,
            layers: self.enc_layers,
            hidden: self.hidden,
            vn_depth: self.vn_depth,
        }
    }

    pub fn dec_mp(&self) -> MpConfig {
        MpConfig {
            n_h: self.dec_h(),
            n_v: self.latent_v,
            layers: self.dec_layers,
            hidden: self.hidden,
            vn_depth: self.vn_depth,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        ValenceTable::new(self.valence.clone()).map_err(|e| e.to_string())?;
        let widths = [
            ("enc_h", self.enc_h),
            ("enc_v", self.enc_v),
            ("hidden", self.hidden),
            ("vn_depth", self.vn_depth),
            ("latent_h", self.latent_h),
            ("latent_v", self.latent_v),
            ("type_emb", self.type_emb),
            ("attn_dim", self.attn_dim),
            ("omega_channels", self.omega_channels),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}
