use std::sync::atomic::{AtomicU8, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensorcore::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// Appends named parameters under a dotted prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.store.add_uniform(name, shape, bound, self.rng)
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(name, value)
    }
}

/// Affine map `x W + b` over the last axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = pb.uniform(&format!("{name}.w"), &[d_in, d_out], d_in);
        let b = pb.uniform(&format!("{name}.b"), &[d_out], d_in);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&tape.param(self.w))?.add_bias(&tape.param(self.b))
    }
}

/// Linear layers with SiLU between them and no output activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(pb, &format!("{name}.{k}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut y = x;
        for (k, l) in self.layers.iter().enumerate() {
            y = l.forward(tape, y)?;
            if k + 1 < self.layers.len() {
                y = y.silu()?;
            }
        }
        Ok(y)
    }
}

/// Equivariant features have layout `[N, 3, C]`: per node, three spatial
/// rows of `C` channels. Channel maps act on the last axis and therefore
/// commute with any `Q` acting on the spatial axis.
pub const VN_EPS: f64 = 1e-8;

/// Deliberate Vector-ReLU defects for fault-injection runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VnFault {
    None,
    /// Adds a fixed vector that does not co-rotate with the input.
    Equivariance,
    /// Scales the output by 1.01 through an untracked term, so recorded
    /// gradients are off by that factor.
    Gradient,
}

static VN_FAULT: AtomicU8 = AtomicU8::new(0);

/// Process-wide switch; every Vector-ReLU evaluated afterwards carries the
/// defect.
pub fn inject_vn_fault(fault: VnFault) {
    let code = match fault {
        VnFault::None => 0,
        VnFault::Equivariance => 1,
        VnFault::Gradient => 2,
    };
    VN_FAULT.store(code, Ordering::SeqCst);
}

pub fn vn_fault() -> VnFault {
    match VN_FAULT.load(Ordering::SeqCst) {
        1 => VnFault::Equivariance,
        2 => VnFault::Gradient,
        _ => VnFault::None,
    }
}

fn with_fault<'t>(tape: &'t Tape<'t>, out: Var<'t>) -> Result<Var<'t>> {
    match vn_fault() {
        VnFault::None => Ok(out),
        VnFault::Equivariance => {
            let shape = out.shape();
            let c = shape[2];
            let data = (0..out.value().numel())
                .map(|i| if (i / c) % 3 == 0 { 0.1 } else { 0.0 })
                .collect();
            out.add(&tape.leaf(Tensor::new(shape, data)?))
        }
        VnFault::Gradient => {
            let v = out.value();
            let scaled = v.data().iter().map(|x| 0.01 * x).collect();
            out.add(&tape.leaf(Tensor::new(v.shape().to_vec(), scaled)?))
        }
    }
}

/// One Vector-ReLU unit: `q = v W`, `k = v U`; rows with `<q,k> < 0` are
/// projected onto the plane orthogonal to `k`.
///
/// When `|k| < VN_EPS` the row passes through as `q`. The branch mask is a
/// constant on the tape, so gradients follow the selected branch.
pub fn vn_relu<'t>(tape: &'t Tape<'t>, v: Var<'t>, w: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let q = v.matmul(&w)?;
    let k = v.matmul(&u)?;
    let d = q.dot_axis(&k, 1)?;
    let kk = k.dot_axis(&k, 1)?;
    let (dv, kkv, qq) = (d.value(), kk.value(), q.dot_axis(&q, 1)?.value());
    let mut mask = Vec::with_capacity(dv.numel());
    let mut margin = f64::INFINITY;
    for ((&di, &ki), &qi) in dv.data().iter().zip(kkv.data()).zip(qq.data()) {
        let kn = ki.sqrt();
        mask.push(if di < 0.0 && kn >= VN_EPS { 1.0 } else { 0.0 });
        let denom = kn * qi.sqrt();
        if denom > 0.0 {
            margin = margin.min(di.abs() / denom);
        }
    }
    tape.note_kink(margin);
    let shape = dv.shape().to_vec();
    let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let m = tape.leaf(Tensor::new(shape.clone(), mask)?);
    let guard = tape.leaf(Tensor::new(shape, inv)?);
    let coeff = d.mul(&m)?.div(&kk.add(&guard)?)?;
    with_fault(tape, q.sub(&coeff.expand(1, 3)?.mul(&k)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VnLayer {
    pub w: ParamId,
    pub u: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

/// Stack of Vector-ReLU units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VnMlp {
    pub layers: Vec<VnLayer>,
}

impl VnMlp {
    /// `dims = [c_in, hidden.., c_out]`.
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| VnLayer {
                w: pb.uniform(&format!("{name}.{k}.w"), &[d[0], d[1]], d[0]),
                u: pb.uniform(&format!("{name}.{k}.u"), &[d[0], d[1]], d[0]),
                c_in: d[0],
                c_out: d[1],
            })
            .collect();
        VnMlp { layers }
    }

    pub fn c_in(&self) -> usize {
        self.layers[0].c_in
    }

    pub fn c_out(&self) -> usize {
        self.layers.last().unwrap().c_out
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let mut y = v;
        for l in &self.layers {
            y = vn_relu(tape, y, tape.param(l.w), tape.param(l.u))?;
        }
        Ok(y)
    }

    /// Multi-input form: inputs are concatenated along the channel axis.
    pub fn forward_cat<'t>(&self, tape: &'t Tape<'t>, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(parts, 2)?
        };
        let c = *cat.shape().last().unwrap();
        if c != self.c_in() {
            return Err(TensorError::ShapeMismatch {
                op: "vn_mlp",
                detail: format!("{c} input channels, expected {}", self.c_in()),
            });
        }
        self.forward(tape, cat)
    }
}

/// Gated recurrent unit with fused gate weights `[d, 3d]` (reset, update,
/// candidate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub w_i: ParamId,
    pub b_i: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub d: usize,
}

impl Gru {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, d: usize) -> Self {
        Gru {
            w_i: pb.uniform(&format!("{name}.w_i"), &[d, 3 * d], d),
            b_i: pb.uniform(&format!("{name}.b_i"), &[3 * d], d),
            w_h: pb.uniform(&format!("{name}.w_h"), &[d, 3 * d], d),
            b_h: pb.uniform(&format!("{name}.b_h"), &[3 * d], d),
            d,
        }
    }

    /// New hidden state for hidden `h` and input `x`, both `[N, d]`.
    pub fn forward<'t>(&self, tape: &'t Tape<'t>, h: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let d = self.d;
        let gi = x
            .matmul(&tape.param(self.w_i))?
            .add_bias(&tape.param(self.b_i))?;
        let gh = h
            .matmul(&tape.param(self.w_h))?
            .add_bias(&tape.param(self.b_h))?;
        let r = gi.narrow(1, 0, d)?.add(&gh.narrow(1, 0, d)?)?.sigmoid()?;
        let z = gi.narrow(1, d, d)?.add(&gh.narrow(1, d, d)?)?.sigmoid()?;
        let n = gi
            .narrow(1, 2 * d, d)?
            .add(&r.mul(&gh.narrow(1, 2 * d, d)?)?)?
            .tanh()?;
        n.add(&z.mul(&h.sub(&n)?)?)
    }
}

/// Gaussian radial basis `exp(-k (d - mu_j)^2)` followed by a learnable
/// affine map to `d_out` outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub means: Vec<f64>,
    pub sharpness: ParamId,
    pub affine: Linear,
}

impl RbfKernel {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        name: &str,
        means: &[f64],
        d_out: usize,
    ) -> Self {
        assert!(
            means.windows(2).all(|w| w[0] < w[1]),
            "kernel means must increase"
        );
        RbfKernel {
            means: means.to_vec(),
            sharpness: pb.constant(
                &format!("{name}.k"),
                Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            ),
            affine: Linear::new(pb, &format!("{name}.affine"), means.len(), d_out),
        }
    }

    /// Gaussian components for distances `d: [E]`, shape `[E, K]`.
    pub fn basis<'t>(&self, tape: &'t Tape<'t>, d: Var<'t>) -> Result<Var<'t>> {
        let e = d.shape()[0];
        let kdim = self.means.len();
        let neg_mu = tape.leaf(Tensor::vector(self.means.iter().map(|m| -m).collect()));
        let spread = d
            .reshape(&[e, 1])?
            .matmul(&tape.leaf(Tensor::full(&[1, kdim], 1.0)))?;
        let diff2 = spread.add_bias(&neg_mu)?.square()?;
        let scaled = diff2
            .reshape(&[e * kdim, 1])?
            .matmul(&tape.param(self.sharpness))?;
        scaled.neg()?.exp()?.reshape(&[e, kdim])
    }

    pub fn forward<'t>(&self, tape: &'t Tape<'t>, d: Var<'t>) -> Result<Var<'t>> {
        let b = self.basis(tape, d)?;
        self.affine.forward(tape, b)
    }
}

/// Default kernel centres 0.5, 1.0, ..., 5.0.
pub fn default_means() -> Vec<f64> {
    (1..=10).map(|k| 0.5 * k as f64).collect()
}
