use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::equivariant::{Mlp, ParamBuilder};
use crate::molgraph::LinkerSample;
use crate::tensorcore::{adam_step, AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vaemodel::{encode, sample_latents, LatentNoise, Model};

/// Node latents of one molecule: `zh: [N, m_h]`, `zv: [N, 3, m_v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoleculeLatents {
    pub zh: Tensor,
    pub zv: Tensor,
}

/// Encoder latents at the posterior mean: fragment rows from the
/// fragments-only pass, then linker rows.
pub fn molecule_latents(
    model: &Model,
    sample: &LinkerSample,
) -> Result<MoleculeLatents, EvalError> {
    let tape = Tape::with_params(&model.store);
    let (post, frag) = encode(&tape, model, sample)?;
    let noise = LatentNoise::zeros(sample.n_linker(), model.cfg.latent_h, model.cfg.latent_v);
    let lat = sample_latents(&tape, model, &post, &frag, &noise)?;
    Ok(MoleculeLatents {
        zh: lat.zh.value(),
        zv: lat.zv.value(),
    })
}

/// Linker nodes covered by the size term of [`synthetic_property`].
const SIZE_SCALE: f64 = 12.0;

/// Stand-in drug-likeness target in `(0, 1)`: a fixed logistic of the
/// linker size (over 12) and the mean full-molecule degree of linker nodes
/// (over the largest valence).
pub fn synthetic_property(sample: &LinkerSample, max_valence: usize) -> f64 {
    let nf = sample.n_frag();
    let deg = sample.full.degrees();
    let nl = sample.n_linker();
    let mean_deg = deg[nf..].iter().sum::<usize>() as f64 / nl.max(1) as f64;
    let x = 3.0 * nl as f64 / SIZE_SCALE + 3.0 * mean_deg / max_valence.max(1) as f64 - 2.5;
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropertyConfig {
    pub hidden: usize,
    /// Output channels of the maps `V` and `U`.
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PropertyConfig {
    fn default() -> Self {
        PropertyConfig {
            hidden: 32,
            channels: 4,
            epochs: 200,
            batch_size: 16,
            lr: 0.005,
            seed: 0,
        }
    }
}

/// `sigma(sum_i sigma(phi13(z^h_i, |V z^v_i|)) * phi14(z^h_i, |U z^v_i|))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyHead {
    pub store: ParamStore,
    pub phi13: Mlp,
    pub phi14: Mlp,
    pub v: ParamId,
    pub u: ParamId,
    pub latent_h: usize,
    pub latent_v: usize,
}

impl PropertyHead {
    pub fn new(latent_h: usize, latent_v: usize, cfg: &PropertyConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut pb = ParamBuilder {
            store: &mut store,
            rng: &mut rng,
        };
        let c = cfg.channels;
        let v = pb.uniform("property.v", &[latent_v, c], latent_v);
        let u = pb.uniform("property.u", &[latent_v, c], latent_v);
        let phi13 = Mlp::new(&mut pb, "property.phi13", &[latent_h + c, cfg.hidden, 1]);
        let phi14 = Mlp::new(&mut pb, "property.phi14", &[latent_h + c, cfg.hidden, 1]);
        PropertyHead {
            store,
            phi13,
            phi14,
            v,
            u,
            latent_h,
            latent_v,
        }
    }

    /// Per-node gated terms `[N]`.
    fn terms<'t>(&self, tape: &'t Tape<'t>, lat: &MoleculeLatents) -> Result<Var<'t>, EvalError> {
        let n = lat.zh.shape()[0];
        if lat.zh.shape() != [n, self.latent_h] || lat.zv.shape() != [n, 3, self.latent_v] {
            return Err(EvalError::Config(format!(
                "latent shapes {:?} / {:?} do not fit the head",
                lat.zh.shape(),
                lat.zv.shape()
            )));
        }
        let zh = tape.leaf(lat.zh.clone());
        let zv = tape.leaf(lat.zv.clone());
        let nv = zv.matmul(&tape.param(self.v))?.norm_axis(1)?;
        let nu = zv.matmul(&tape.param(self.u))?.norm_axis(1)?;
        let gate = self
            .phi13
            .forward(tape, tape.concat(&[zh, nv], 1)?)?
            .sigmoid()?;
        let val = self.phi14.forward(tape, tape.concat(&[zh, nu], 1)?)?;
        Ok(gate.mul(&val)?.reshape(&[n])?)
    }

    fn output<'t>(&self, tape: &'t Tape<'t>, lat: &MoleculeLatents) -> Result<Var<'t>, EvalError> {
        Ok(self.terms(tape, lat)?.sum()?.sigmoid()?)
    }

    /// Prediction in `(0, 1)`. Node terms are summed in sorted order, so
    /// relabeling nodes leaves the result bit-identical.
    pub fn predict(&self, lat: &MoleculeLatents) -> Result<f64, EvalError> {
        let tape = Tape::with_params(&self.store);
        let mut t = self.terms(&tape, lat)?.value().into_data();
        t.sort_by(f64::total_cmp);
        let s: f64 = t.iter().sum();
        Ok(1.0 / (1.0 + (-s).exp()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub train_rmse: f64,
    pub test_rmse: f64,
    /// RMSE on the test set of predicting the mean training target.
    pub baseline_rmse: f64,
    pub losses: Vec<f64>,
}

fn rmse(head: &PropertyHead, data: &[(MoleculeLatents, f64)]) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut se = 0.0;
    for (lat, y) in data {
        se += (head.predict(lat)? - y).powi(2);
    }
    Ok((se / data.len() as f64).sqrt())
}

/// Fits a head by mini-batch Adam on squared error.
pub fn train_property_head(
    train: &[(MoleculeLatents, f64)],
    test: &[(MoleculeLatents, f64)],
    cfg: &PropertyConfig,
) -> Result<(PropertyHead, PropertyReport), EvalError> {
    let first = train.first().ok_or(EvalError::NoSamples)?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(EvalError::Config(
            "batch_size and lr must be positive".into(),
        ));
    }
    let mut head = PropertyHead::new(first.0.zh.shape()[1], first.0.zv.shape()[2], cfg);
    let mut adam = AdamState::new(&head.store);
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::with_params(&head.store);
            let mut total: Option<Var<'_>> = None;
            for &i in chunk {
                let (lat, y) = &train[i];
                let e = head.output(&tape, lat)?.add_scalar(-y)?.square()?;
                total = Some(match total {
                    None => e,
                    Some(t) => t.add(&e)?,
                });
            }
            let loss = total
                .expect("non-empty chunk")
                .scale(1.0 / chunk.len() as f64)?;
            epoch_loss += loss.item() * chunk.len() as f64;
            let grads = tape.backward(loss)?.params(&head.store);
            drop(tape);
            adam_step(&mut head.store, &grads, &mut adam, &adam_cfg)?;
        }
        losses.push(epoch_loss / train.len() as f64);
    }
    let mean_y = train.iter().map(|(_, y)| y).sum::<f64>() / train.len() as f64;
    let baseline = if test.is_empty() {
        0.0
    } else {
        (test.iter().map(|(_, y)| (y - mean_y).powi(2)).sum::<f64>() / test.len() as f64).sqrt()
    };
    let report = PropertyReport {
        train_rmse: rmse(&head, train)?,
        test_rmse: rmse(&head, test)?,
        baseline_rmse: baseline,
        losses,
    };
    Ok((head, report))
}
