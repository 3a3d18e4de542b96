use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::equivariant::geometry::{rotate_spatial, RigidTransform};
use crate::molgraph::LinkerSample;
use crate::tensorcore::{Tape, Tensor};
use crate::vaemodel::{encode, generate_with_noise, Generation, LatentNoise, Model};

/// Largest tolerated deviation of encoder invariants.
pub const ENCODER_TOL: f64 = 1e-9;
/// Largest tolerated deviation of generated coordinates after undoing the
/// transform.
pub const COORD_TOL: f64 = 1e-6;
/// Largest tolerated deviation of decision log-probabilities.
pub const LOGPROB_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSettings {
    pub transforms: usize,
    pub seed: u64,
    /// Linker slots per generation; `None` uses the sample's linker size
    /// plus two so unused slots are exercised.
    pub max_linker_nodes: Option<usize>,
    pub translation_scale: f64,
}

impl Default for AuditSettings {
    fn default() -> Self {
        AuditSettings {
            transforms: 100,
            seed: 0,
            max_linker_nodes: None,
            translation_scale: 5.0,
        }
    }
}

/// Maximum deviations over all (sample, transform) pairs. A generation
/// whose graph decisions differ counts as a mismatch and sets the
/// coordinate and log-probability deviations to infinity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub samples: usize,
    pub transforms: usize,
    pub reflections: usize,
    pub encoder_invariant_dev: f64,
    pub encoder_equivariant_dev: f64,
    pub coord_dev: f64,
    pub logprob_dev: f64,
    pub decision_mismatches: usize,
    /// `sample s, transform t: <quantity>` of the largest relative breach,
    /// or of the largest coordinate deviation when nothing breaches.
    pub worst: String,
}

impl AuditReport {
    pub fn breaches(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, dev: f64, tol: f64| {
            if !(dev < tol) {
                out.push(format!("{name} deviation {dev:e} >= {tol:e}"));
            }
        };
        check("encoder invariant", self.encoder_invariant_dev, ENCODER_TOL);
        check(
            "encoder equivariant",
            self.encoder_equivariant_dev,
            COORD_TOL,
        );
        check("coordinate", self.coord_dev, COORD_TOL);
        check("log-probability", self.logprob_dev, LOGPROB_TOL);
        if self.decision_mismatches > 0 {
            out.push(format!(
                "{} generations changed their graph decisions",
                self.decision_mismatches
            ));
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.breaches().is_empty()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn transformed(s: &LinkerSample, t: &RigidTransform) -> LinkerSample {
    LinkerSample {
        fragments: s.fragments.transformed(&t.q, t.t),
        linker: s.linker.transformed(&t.q, t.t),
        full: s.full.transformed(&t.q, t.t),
        ..s.clone()
    }
}

struct EncoderOut {
    invariant: Vec<f64>,
    equivariant: Vec<Tensor>,
}

fn encoder_out(model: &Model, s: &LinkerSample) -> Result<EncoderOut, EvalError> {
    let tape = Tape::with_params(&model.store);
    let (p, f) = encode(&tape, model, s)?;
    let mut invariant = Vec::new();
    for v in [p.mu_h, p.sigma_h, p.sigma_v, f.zh] {
        invariant.extend_from_slice(v.value().data());
    }
    Ok(EncoderOut {
        invariant,
        equivariant: vec![p.mu_v.value(), f.zv.value()],
    })
}

#[derive(Default)]
struct Devs {
    enc_inv: (f64, String),
    enc_eqv: (f64, String),
    coord: (f64, String),
    logp: (f64, String),
    mismatches: usize,
}

impl Devs {
    fn bump(slot: &mut (f64, String), dev: f64, at: impl FnOnce() -> String) {
        if dev > slot.0 || (dev.is_nan() && !slot.0.is_nan()) {
            *slot = (dev, at());
        }
    }

    fn merge(mut self, o: Devs) -> Devs {
        for (a, b) in [
            (&mut self.enc_inv, o.enc_inv),
            (&mut self.enc_eqv, o.enc_eqv),
            (&mut self.coord, o.coord),
            (&mut self.logp, o.logp),
        ] {
            if b.0 > a.0 {
                *a = b;
            }
        }
        self.mismatches += o.mismatches;
        self
    }
}

fn same_graph(a: &Generation, b: &Generation) -> bool {
    a.molecule.types() == b.molecule.types()
        && a.molecule.edges() == b.molecule.edges()
        && a.status == b.status
}

/// Re-encodes and re-generates every sample under `settings.transforms`
/// random rigid motions (every second one a reflection) with co-rotated
/// noise, and records the largest deviations from the untransformed run.
pub fn equivariance_audit(
    model: &Model,
    samples: &[LinkerSample],
    settings: &AuditSettings,
) -> Result<AuditReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let (mh, mv) = (model.cfg.latent_h, model.cfg.latent_v);
    let per: Vec<Result<Devs, EvalError>> = samples
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let m = settings.max_linker_nodes.unwrap_or(s.n_linker() + 2);
            let mut noise_rng = ChaCha8Rng::seed_from_u64(settings.seed);
            noise_rng.set_stream(2 * si as u64);
            let noise = LatentNoise::sample(&mut noise_rng, m, mh, mv);
            let gen_rng = |stream: u64| {
                let mut r = ChaCha8Rng::seed_from_u64(settings.seed ^ 0xa0d1_7000);
                r.set_stream(stream);
                r
            };
            let base_enc = encoder_out(model, s)?;
            let base_gen =
                generate_with_noise(model, &s.fragments, &noise, None, &mut gen_rng(si as u64))?;
            let mut t_rng = ChaCha8Rng::seed_from_u64(settings.seed);
            t_rng.set_stream(2 * si as u64 + 1);
            let mut d = Devs::default();
            for k in 0..settings.transforms {
                let t = RigidTransform::random(
                    &mut t_rng,
                    settings.translation_scale,
                    Some(k % 2 == 1),
                );
                let at = |what: &str| format!("sample {si}, transform {k}: {what}");
                let ts = transformed(s, &t);
                let enc = encoder_out(model, &ts)?;
                Devs::bump(
                    &mut d.enc_inv,
                    max_abs_diff(&enc.invariant, &base_enc.invariant),
                    || at("encoder invariants"),
                );
                let eqv = enc
                    .equivariant
                    .iter()
                    .zip(&base_enc.equivariant)
                    .map(|(x, b)| max_abs_diff(x.data(), rotate_spatial(b, &t.q).data()))
                    .fold(0.0, f64::max);
                Devs::bump(&mut d.enc_eqv, eqv, || at("encoder vector latents"));
                let g = generate_with_noise(
                    model,
                    &ts.fragments,
                    &noise.rotated(&t.q),
                    None,
                    &mut gen_rng(si as u64),
                )?;
                if !same_graph(&g, &base_gen) {
                    d.mismatches += 1;
                    Devs::bump(&mut d.coord, f64::INFINITY, || at("graph decisions"));
                    Devs::bump(&mut d.logp, f64::INFINITY, || at("graph decisions"));
                    continue;
                }
                let back: Vec<f64> = g
                    .molecule
                    .coords()
                    .iter()
                    .flat_map(|&r| t.apply_inverse(r))
                    .collect();
                let orig: Vec<f64> = base_gen
                    .molecule
                    .coords()
                    .iter()
                    .flat_map(|r| r.iter().copied())
                    .collect();
                Devs::bump(&mut d.coord, max_abs_diff(&back, &orig), || {
                    at("generated coordinates")
                });
                Devs::bump(
                    &mut d.logp,
                    max_abs_diff(&g.log_probs, &base_gen.log_probs),
                    || at("decision log-probabilities"),
                );
            }
            Ok(d)
        })
        .collect();
    let mut total = Devs::default();
    for d in per {
        total = total.merge(d?);
    }
    let rel = |dev: f64, tol: f64| dev / tol;
    let candidates = [
        (rel(total.enc_inv.0, ENCODER_TOL), &total.enc_inv.1),
        (rel(total.enc_eqv.0, COORD_TOL), &total.enc_eqv.1),
        (rel(total.coord.0, COORD_TOL), &total.coord.1),
        (rel(total.logp.0, LOGPROB_TOL), &total.logp.1),
    ];
    let worst = candidates
        .iter()
        .filter(|(r, _)| *r >= 1.0)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, w)| (*w).clone())
        .unwrap_or_else(|| total.coord.1.clone());
    Ok(AuditReport {
        samples: samples.len(),
        transforms: settings.transforms,
        reflections: settings.transforms / 2,
        encoder_invariant_dev: total.enc_inv.0,
        encoder_equivariant_dev: total.enc_eqv.0,
        coord_dev: total.coord.0,
        logprob_dev: total.logp.0,
        decision_mismatches: total.mismatches,
        worst,
    })
}
