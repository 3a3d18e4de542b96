//! ELBO objective, mini-batch Adam training, and teacher-forced metrics.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::molgraph::{LinkerSample, MolError};
use crate::tensorcore::{
    adam_step, clip_grad_norm, grad_norm, AdamConfig, AdamState, Tape, Tensor, TensorError, Var,
};
use crate::vaemodel::{
    encode, kl_divergence, sample_latents, save_checkpoint, teacher_forced_loss, CoordFeed,
    LatentNoise, Model, ModelConfig, ModelError,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {sample}: non-finite value in {component} ({op})")]
    NonFinite {
        sample: usize,
        component: &'static str,
        op: &'static str,
    },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Batch {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mol(#[from] MolError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// KL weight.
    pub beta: f64,
    /// Linker slots used when sampling after training.
    pub max_linker_nodes: usize,
    pub seed: u64,
    /// Duplicate every sample with the two fragments swapped.
    pub augment_swap: bool,
    pub coord_feed: CoordFeed,
    /// Global gradient-norm cap; off unless set.
    pub clip_grad_norm: Option<f64>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.006,
            batch_size: 48,
            beta: 0.6,
            max_linker_nodes: 12,
            seed: 0,
            augment_swap: true,
            coord_feed: CoordFeed::Truth,
            clip_grad_norm: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.max_linker_nodes == 0 {
            return bad("max_linker_nodes must be >= 1");
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad("clip_grad_norm must be positive");
            }
        }
        self.model.validate().map_err(TrainError::Config)
    }
}

/// ELBO pieces for one sample; `total` is on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ElboParts<'t> {
    pub total: Var<'t>,
    pub recon: f64,
    pub kl: f64,
    pub coord_log_mse: f64,
    pub sq_err: f64,
    pub coord_count: usize,
    pub correct: usize,
    pub decisions: usize,
}

fn finite(x: f64, sample: usize, component: &'static str) -> Result<f64, TrainError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TrainError::NonFinite {
            sample,
            component,
            op: "total",
        })
    }
}

/// Attributes a tape-level numeric fault to the stage that raised it.
fn stage<T, E: Into<ModelError>>(
    r: Result<T, E>,
    sample: usize,
    component: &'static str,
) -> Result<T, TrainError> {
    r.map_err(|e| match e.into() {
        ModelError::Tensor(TensorError::NumericFault { op }) => TrainError::NonFinite {
            sample,
            component,
            op,
        },
        other => other.into(),
    })
}

/// Negative ELBO: teacher-forced reconstruction (anchor, type and edge
/// cross-entropies plus coordinate log-MSE) plus `beta` times the KL of the
/// linker posteriors. The vector KL is dropped when vector features are
/// disabled.
pub fn elbo_loss<'t>(
    tape: &'t Tape<'t>,
    model: &Model,
    sample: &LinkerSample,
    beta: f64,
    noise: &LatentNoise,
    feed: CoordFeed,
    index: usize,
) -> Result<ElboParts<'t>, TrainError> {
    let (post, frag) = stage(encode(tape, model, sample), index, "encoder")?;
    let lat = stage(
        sample_latents(tape, model, &post, &frag, noise),
        index,
        "latent sampling",
    )?;
    let f = stage(
        teacher_forced_loss(tape, model, sample, &lat, feed),
        index,
        "reconstruction",
    )?;
    let (kl_h, kl_v) = stage(kl_divergence(&post), index, "KL divergence")?;
    let kl = if model.cfg.equivariant() {
        stage(kl_h.add(&kl_v), index, "KL divergence")?
    } else {
        kl_h
    };
    finite(f.anchor_ce.item(), index, "anchor cross-entropy")?;
    finite(f.type_ce.item(), index, "type cross-entropy")?;
    finite(f.edge_ce.item(), index, "edge cross-entropy")?;
    finite(kl.item(), index, "KL divergence")?;
    let mut recon = f.anchor_ce.add(&f.type_ce)?.add(&f.edge_ce)?;
    let mut coord_log_mse = 0.0;
    if let Some(c) = f.coord {
        coord_log_mse = finite(c.item(), index, "coordinate log-MSE")?;
        recon = recon.add(&c)?;
    }
    let total = recon.add(&kl.scale(beta)?)?;
    Ok(ElboParts {
        total,
        recon: recon.item(),
        kl: kl.item(),
        coord_log_mse,
        sq_err: f.sq_err,
        coord_count: f.coord_count,
        correct: f.correct,
        decisions: f.decisions,
    })
}

/// Per-epoch telemetry. Wall time is kept out of serialized reports so
/// repeated runs produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub coord_log_mse: f64,
    pub coord_mse: f64,
    pub accuracy: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: u64,
    pub samples_per_epoch: usize,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Where training resumes from and where checkpoints go.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Written after every epoch, after a numeric fault (last good state),
    /// and at the end.
    pub checkpoint: Option<&'a Path>,
    /// Continue from these weights; the step counter carries on.
    pub resume: Option<Resume>,
}

/// State restored from a checkpoint. Training runs epochs
/// `epochs_done + 1 ..= cfg.epochs`.
pub struct Resume {
    pub model: Model,
    pub step: u64,
    pub epochs_done: usize,
}

impl Resume {
    /// Reads the step counter and epoch count written by [`train`].
    pub fn from_checkpoint(model: Model, meta: &serde_json::Value) -> Result<Self, TrainError> {
        let field = |k: &str| {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| TrainError::Config(format!("checkpoint has no {k}")))
        };
        Ok(Resume {
            model,
            step: field("step")?,
            epochs_done: field("epochs_done")? as usize,
        })
    }
}

fn augmented(dataset: &[LinkerSample], swap: bool) -> Result<Vec<LinkerSample>, TrainError> {
    let mut out = Vec::with_capacity(dataset.len() * 2);
    for s in dataset {
        if s.trace.is_none() {
            out.push(s.clone().with_trace()?);
        } else {
            out.push(s.clone());
        }
        if swap {
            out.push(s.swapped()?);
        }
    }
    Ok(out)
}

fn checkpoint_meta(epoch: usize, step: u64, cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({ "epochs_done": epoch, "step": step, "train": cfg })
}

/// Trains from scratch (or from `opts.resume`) and returns the final model.
pub fn train(
    dataset: &[LinkerSample],
    cfg: &TrainConfig,
    opts: TrainOptions<'_>,
) -> Result<(Model, TrainReport), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let data = augmented(dataset, cfg.augment_swap)?;
    let (mut model, start_step, done) = match opts.resume {
        Some(r) => {
            if r.model.cfg != cfg.model {
                return Err(ModelError::ConfigMismatch.into());
            }
            (r.model, r.step, r.epochs_done)
        }
        None => (Model::new(cfg.model.clone(), cfg.seed), 0, 0),
    };
    let mut adam = AdamState::new(&model.store);
    adam.step = start_step;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    rng.set_stream(start_step);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        samples_per_epoch: data.len(),
        ..TrainReport::default()
    };
    let started = Instant::now();
    let save = |model: &Model, epoch: usize, step: u64| -> Result<(), TrainError> {
        if let Some(p) = opts.checkpoint {
            save_checkpoint(p, model, &checkpoint_meta(epoch, step, cfg))?;
        }
        Ok(())
    };
    let (mh, mv) = (cfg.model.latent_h, cfg.model.latent_v);
    for epoch in done + 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let (mut sq, mut cc, mut correct, mut decisions) = (0.0, 0usize, 0usize, 0usize);
        let mut norms = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let noises: Vec<LatentNoise> = chunk
                .iter()
                .map(|&i| LatentNoise::sample(&mut rng, data[i].n_linker(), mh, mv))
                .collect();
            let mut step = || -> Result<(), TrainError> {
                let results: Vec<
                    Result<(Vec<Tensor>, [f64; 4], f64, usize, usize, usize), TrainError>,
                > = chunk
                    .par_iter()
                    .zip(&noises)
                    .map(|(&i, noise)| {
                        let tape = Tape::with_params(&model.store);
                        let e =
                            elbo_loss(&tape, &model, &data[i], cfg.beta, noise, cfg.coord_feed, i)?;
                        let g = tape.backward(e.total)?.params(&model.store);
                        Ok((
                            g,
                            [e.total.item(), e.recon, e.kl, e.coord_log_mse],
                            e.sq_err,
                            e.coord_count,
                            e.correct,
                            e.decisions,
                        ))
                    })
                    .collect();
                let mut acc: Option<Vec<Tensor>> = None;
                for r in results {
                    let (g, parts, s2, c2, ok, dec) = r?;
                    for k in 0..4 {
                        sums[k] += parts[k];
                    }
                    sq += s2;
                    cc += c2;
                    correct += ok;
                    decisions += dec;
                    match acc.as_mut() {
                        None => acc = Some(g),
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
                    }
                }
                let mut grads = acc.expect("non-empty batch");
                let scale = 1.0 / chunk.len() as f64;
                grads
                    .iter_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= scale));
                let norm = match cfg.clip_grad_norm {
                    Some(c) => clip_grad_norm(&mut grads, c),
                    None => grad_norm(&grads),
                };
                norms.push(norm);
                adam_step(&mut model.store, &grads, &mut adam, &adam_cfg)?;
                Ok(())
            };
            if let Err(e) = step() {
                save(&model, epoch - 1, adam.step)?;
                return Err(TrainError::Batch {
                    epoch,
                    batch: b,
                    source: Box::new(e),
                });
            }
        }
        let n = data.len() as f64;
        let rec = EpochRecord {
            epoch,
            loss: sums[0] / n,
            recon: sums[1] / n,
            kl: sums[2] / n,
            coord_log_mse: sums[3] / n,
            coord_mse: if cc == 0 { 0.0 } else { sq / cc as f64 },
            accuracy: if decisions == 0 {
                0.0
            } else {
                correct as f64 / decisions as f64
            },
            grad_norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
            grad_norm_max: norms.iter().copied().fold(0.0, f64::max),
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} recon {:.4} kl {:.4} coord_mse {:.4} acc {:.4} ({:.1}s)",
            rec.loss,
            rec.recon,
            rec.kl,
            rec.coord_mse,
            rec.accuracy,
            rec.wall_seconds
        );
        report.epochs.push(rec);
        save(&model, epoch, adam.step)?;
    }
    report.steps = adam.step;
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Teacher-forced accuracy and coordinate error with latents at the
/// posterior mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcedMetrics {
    pub accuracy: f64,
    pub coord_mse: f64,
    /// Error of first placements alone.
    pub placed_mse: f64,
    pub correct: usize,
    pub decisions: usize,
    /// Accuracy per decision kind: anchors, types, edges.
    pub accuracy_by_kind: [f64; 3],
}

pub fn forced_metrics(
    model: &Model,
    samples: &[LinkerSample],
    feed: CoordFeed,
) -> Result<ForcedMetrics, TrainError> {
    type Counts = (usize, usize, f64, usize, f64, usize, [(usize, usize); 3]);
    let per: Vec<Result<Counts, TrainError>> = samples
        .par_iter()
        .map(|s| {
            let tape = Tape::with_params(&model.store);
            let (post, frag) = encode(&tape, model, s)?;
            let noise = LatentNoise::zeros(s.n_linker(), model.cfg.latent_h, model.cfg.latent_v);
            let lat = sample_latents(&tape, model, &post, &frag, &noise)?;
            let f = teacher_forced_loss(&tape, model, s, &lat, feed)?;
            Ok((
                f.correct,
                f.decisions,
                f.sq_err,
                f.coord_count,
                f.placed_sq_err,
                f.placed_count,
                f.by_kind,
            ))
        })
        .collect();
    let (mut c, mut d, mut sq, mut n, mut psq, mut pn) = (0, 0, 0.0, 0, 0.0, 0);
    let mut kinds = [(0usize, 0usize); 3];
    for r in per {
        let (a, b, e, k, pe, pk, bk) = r?;
        for (acc, x) in kinds.iter_mut().zip(bk) {
            acc.0 += x.0;
            acc.1 += x.1;
        }
        c += a;
        d += b;
        sq += e;
        n += k;
        psq += pe;
        pn += pk;
    }
    Ok(ForcedMetrics {
        accuracy: if d == 0 { 0.0 } else { c as f64 / d as f64 },
        coord_mse: if n == 0 { 0.0 } else { sq / n as f64 },
        placed_mse: if pn == 0 { 0.0 } else { psq / pn as f64 },
        correct: c,
        decisions: d,
        accuracy_by_kind: kinds.map(|(a, b)| if b == 0 { 0.0 } else { a as f64 / b as f64 }),
    })
}

#[cfg(test)]
mod tests;
