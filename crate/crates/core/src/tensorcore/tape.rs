//! Reverse-mode tape over [`Tensor`] primitives.
//!
//! Every primitive evaluates eagerly, appends one record to the tape, and
//! knows its own vector-Jacobian product. `backward` replays the records in
//! reverse insertion order, which is a valid topological order because a
//! record can only reference records created before it.

use std::cell::{Cell, RefCell};

use super::tensor::{axis_split, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{ParamId, ParamStore, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Expand {
        a: usize,
        axis: usize,
        size: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    SumAll(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        a: usize,
        idx: Vec<usize>,
    },
    ScatterAdd {
        a: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
    Transpose(usize),
    NormAxis {
        a: usize,
        axis: usize,
    },
    DotAxis {
        a: usize,
        b: usize,
        axis: usize,
    },
    Softmax(usize),
    MaskedCe {
        a: usize,
        mask: Vec<bool>,
        target: usize,
    },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Silu(usize),
    Softplus(usize),
    Relu(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive evaluations.
///
/// A tape is single-writer; build one per forward pass (per sample during
/// training) and drop it after `backward`.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<Vec<Option<usize>>>,
    kink_margin: Cell<f64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape<'t>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only leaves can be differentiated.
    pub fn new() -> Self {
        Tape {
            params: None,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(Vec::new()),
            kink_margin: Cell::new(f64::INFINITY),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(vec![None; params.len()]),
            kink_margin: Cell::new(f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a constant or input tensor.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var {
            tape: self.cast(),
            id: nodes.len() - 1,
        }
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(x))
    }

    /// Leaf bound to a stored parameter; repeated calls share one record.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        let store = self
            .params
            .expect("tape was created without a parameter store");
        if let Some(node) = self.param_nodes.borrow()[id.0] {
            return Var {
                tape: self.cast(),
                id: node,
            };
        }
        let v = self.leaf(store.get(id).clone());
        self.param_nodes.borrow_mut()[id.0] = Some(v.id);
        v
    }

    pub fn params(&self) -> Option<&'p ParamStore> {
        self.params
    }

    fn cast(&self) -> &Tape<'_> {
        self
    }

    /// Records the smallest normalized distance to a non-differentiable
    /// branch point seen so far (used to qualify finite-difference checks).
    pub fn note_kink(&self, margin: f64) {
        if margin < self.kink_margin.get() {
            self.kink_margin.set(margin);
        }
    }

    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.get()
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or_else(|| TensorError::ShapeMismatch {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(k, &d)| k != axis && d != base[k])
            {
                return Err(shape_err(
                    "concat",
                    format!("{base:?} vs {s:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs: ids, axis },
            "concat",
        )
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NumericFault { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Ok(Var {
            tape: self.cast(),
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if !std::ptr::eq(
            loss.tape as *const Tape<'_> as *const u8,
            self as *const Tape<'p> as *const u8,
        ) || loss.id >= nodes.len()
        {
            return Err(TensorError::NotOnTape);
        }
        if !nodes[loss.id].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: nodes[loss.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let param_nodes = self.param_nodes.borrow().clone();
        Ok(Grads { grads, param_nodes })
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn acc(grads: &mut [Option<Tensor>], id: usize, shape: &[usize], contrib: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape));
    contrib(slot.data_mut());
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let gd = g.data();
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let k = bv.shape()[0];
            let n = bv.shape()[1];
            let m = av.numel() / k;
            acc(grads, *a, av.shape(), |d| {
                gemm_nt_acc(gd, bv.data(), d, m, k, n)
            });
            acc(grads, *b, bv.shape(), |d| {
                gemm_tn_acc(av.data(), gd, d, m, k, n)
            });
        }
        Op::Add(a, b) => {
            acc(grads, *a, out.shape(), |d| add_into(d, gd));
            acc(grads, *b, out.shape(), |d| add_into(d, gd));
        }
        Op::Sub(a, b) => {
            acc(grads, *a, out.shape(), |d| add_into(d, gd));
            acc(grads, *b, out.shape(), |d| {
                for (x, y) in d.iter_mut().zip(gd) {
                    *x -= y;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, *a, out.shape(), |d| {
                for ((x, gi), bi) in d.iter_mut().zip(gd).zip(bv.data()) {
                    *x += gi * bi;
                }
            });
            acc(grads, *b, out.shape(), |d| {
                for ((x, gi), ai) in d.iter_mut().zip(gd).zip(av.data()) {
                    *x += gi * ai;
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, *a, out.shape(), |d| {
                for ((x, gi), bi) in d.iter_mut().zip(gd).zip(bv.data()) {
                    *x += gi / bi;
                }
            });
            acc(grads, *b, out.shape(), |d| {
                for (((x, gi), ai), bi) in d.iter_mut().zip(gd).zip(av.data()).zip(bv.data()) {
                    *x -= gi * ai / (bi * bi);
                }
            });
        }
        Op::AddBias(a, b) => {
            let bv = val(*b);
            let n = bv.numel();
            acc(grads, *a, out.shape(), |d| add_into(d, gd));
            acc(grads, *b, bv.shape(), |d| {
                for row in gd.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        Op::Scale(a, c) => {
            acc(grads, *a, out.shape(), |d| {
                for (x, gi) in d.iter_mut().zip(gd) {
                    *x += c * gi;
                }
            });
        }
        Op::AddScalar(a) => acc(grads, *a, out.shape(), |d| add_into(d, gd)),
        Op::Expand { a, axis, size } => {
            let av = val(*a);
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            acc(grads, *a, av.shape(), |d| {
                for o in 0..outer {
                    for s in 0..*size {
                        let src = &gd[(o * size + s) * inner..(o * size + s + 1) * inner];
                        add_into(&mut d[o * inner..(o + 1) * inner], src);
                    }
                }
            });
        }
        Op::SumAxis { a, axis } => {
            let av = val(*a);
            let (outer, dim, inner) = axis_split(av.shape(), *axis);
            acc(grads, *a, av.shape(), |d| {
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for k in 0..dim {
                        add_into(
                            &mut d[(o * dim + k) * inner..(o * dim + k + 1) * inner],
                            src,
                        );
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let av = val(*a);
            let gv = gd[0];
            acc(grads, *a, av.shape(), |d| {
                d.iter_mut().for_each(|x| *x += gv)
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &p in inputs {
                let pv = val(p);
                let dim = pv.shape()[*axis];
                acc(grads, p, pv.shape(), |d| {
                    for o in 0..outer {
                        let src =
                            &gd[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                        add_into(&mut d[o * dim * inner..(o + 1) * dim * inner], src);
                    }
                });
                offset += dim;
            }
        }
        Op::Narrow { a, axis, start } => {
            let av = val(*a);
            let (outer, dim, inner) = axis_split(av.shape(), *axis);
            let len = out.shape()[*axis];
            acc(grads, *a, av.shape(), |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * dim + start) * inner..(o * dim + start + len) * inner];
                    add_into(dst, &gd[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Gather { a, idx } => {
            let av = val(*a);
            let w = av.numel() / av.shape()[0];
            acc(grads, *a, av.shape(), |d| {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * w..(i + 1) * w], &gd[r * w..(r + 1) * w]);
                }
            });
        }
        Op::ScatterAdd { a, idx } => {
            let av = val(*a);
            let w = av.numel() / av.shape()[0];
            acc(grads, *a, av.shape(), |d| {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut d[r * w..(r + 1) * w], &gd[i * w..(i + 1) * w]);
                }
            });
        }
        Op::Reshape(a) => {
            let av = val(*a);
            acc(grads, *a, av.shape(), |d| add_into(d, gd));
        }
        Op::Transpose(a) => {
            let av = val(*a);
            let (r, c) = (av.shape()[0], av.shape()[1]);
            acc(grads, *a, av.shape(), |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += gd[j * r + i];
                    }
                }
            });
        }
        Op::NormAxis { a, axis } => {
            let av = val(*a);
            let (outer, dim, inner) = axis_split(av.shape(), *axis);
            let nv = out.data();
            acc(grads, *a, av.shape(), |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let n = nv[o * inner + i];
                        if n <= 0.0 {
                            continue;
                        }
                        let s = gd[o * inner + i] / n;
                        for k in 0..dim {
                            let j = (o * dim + k) * inner + i;
                            d[j] += s * av.data()[j];
                        }
                    }
                }
            });
        }
        Op::DotAxis { a, b, axis } => {
            let (av, bv) = (val(*a), val(*b));
            let (outer, dim, inner) = axis_split(av.shape(), *axis);
            for (target, other) in [(*a, bv), (*b, av)] {
                acc(grads, target, av.shape(), |d| {
                    for o in 0..outer {
                        for k in 0..dim {
                            for i in 0..inner {
                                let j = (o * dim + k) * inner + i;
                                d[j] += gd[o * inner + i] * other.data()[j];
                            }
                        }
                    }
                });
            }
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            acc(grads, *a, out.shape(), |d| {
                for ((drow, yrow), grow) in
                    d.chunks_mut(n).zip(out.data().chunks(n)).zip(gd.chunks(n))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((x, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *x += y * (g - dot);
                    }
                }
            });
        }
        Op::MaskedCe { a, mask, target } => {
            let av = val(*a);
            let p = masked_softmax(av.data(), mask);
            let gv = gd[0];
            acc(grads, *a, av.shape(), |d| {
                for (j, x) in d.iter_mut().enumerate() {
                    let ind = if j == *target { 1.0 } else { 0.0 };
                    if mask[j] {
                        *x += gv * (p[j] - ind);
                    }
                }
            });
        }
        Op::Sigmoid(a) => unary(grads, *a, out, gd, |_, y| y * (1.0 - y), val(*a)),
        Op::Tanh(a) => unary(grads, *a, out, gd, |_, y| 1.0 - y * y, val(*a)),
        Op::Exp(a) => unary(grads, *a, out, gd, |_, y| y, val(*a)),
        Op::Log(a) => unary(grads, *a, out, gd, |x, _| 1.0 / x, val(*a)),
        Op::Silu(a) => unary(
            grads,
            *a,
            out,
            gd,
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
            val(*a),
        ),
        Op::Softplus(a) => unary(grads, *a, out, gd, |x, _| sigmoid(x), val(*a)),
        Op::Relu(a) => unary(
            grads,
            *a,
            out,
            gd,
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
            val(*a),
        ),
    }
}

fn unary(
    grads: &mut [Option<Tensor>],
    a: usize,
    out: &Tensor,
    gd: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    input: &Tensor,
) {
    acc(grads, a, out.shape(), |d| {
        for (((x, g), xi), yi) in d.iter_mut().zip(gd).zip(input.data()).zip(out.data()) {
            *x += g * deriv(*xi, *yi);
        }
    });
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Softmax over the unmasked entries; masked entries are exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &k)| if k { (x - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = out.iter().sum();
    for x in &mut out {
        *x /= s;
    }
    out
}

/// Log-softmax restricted to unmasked entries (masked entries are `-inf`).
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(&x, _)| (x - m).exp())
        .sum::<f64>()
        .ln();
    logits
        .iter()
        .zip(mask)
        .map(|(&x, &k)| if k { x - lse } else { f64::NEG_INFINITY })
        .collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<'t> {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with2<R>(&self, other: &Var<'_>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn map(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.with(|t| {
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        });
        self.tape.push(out, op, name)
    }

    fn zip(
        &self,
        other: &Var<'t>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = self.with2(other, |a, b| {
            if a.shape() != b.shape() {
                return Err(shape_err(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            Ok(Tensor::from_parts(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            ))
        })?;
        self.tape.push(out, op, name)
    }

    /// `[..., k] x [k, n] -> [..., n]`
    pub fn matmul(&self, w: &Var<'t>) -> Result<Var<'t>> {
        let out = self.with2(w, |a, b| {
            let (k, n) = match b.shape() {
                [k, n] => (*k, *n),
                s => return Err(shape_err("matmul", format!("rhs must be 2-D, got {s:?}"))),
            };
            if a.shape().last() != Some(&k) {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let m = a.numel() / k;
            let mut data = vec![0.0; m * n];
            gemm_acc(a.data(), b.data(), &mut data, m, k, n);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(out, Op::MatMul(self.id, w.id), "matmul")
    }

    pub fn add(&self, o: &Var<'t>) -> Result<Var<'t>> {
        self.zip(o, Op::Add(self.id, o.id), "add", |x, y| x + y)
    }

    pub fn sub(&self, o: &Var<'t>) -> Result<Var<'t>> {
        self.zip(o, Op::Sub(self.id, o.id), "sub", |x, y| x - y)
    }

    pub fn mul(&self, o: &Var<'t>) -> Result<Var<'t>> {
        self.zip(o, Op::Mul(self.id, o.id), "mul", |x, y| x * y)
    }

    pub fn div(&self, o: &Var<'t>) -> Result<Var<'t>> {
        self.zip(o, Op::Div(self.id, o.id), "div", |x, y| x / y)
    }

    /// Adds a `[n]` bias to every row of a `[..., n]` tensor.
    pub fn add_bias(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let out = self.with2(b, |a, bias| {
            let n = bias.numel();
            if bias.shape().len() != 1 || a.shape().last() != Some(&n) {
                return Err(shape_err(
                    "add_bias",
                    format!("{:?} + {:?}", a.shape(), bias.shape()),
                ));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                add_into(row, bias.data());
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        })?;
        self.tape.push(out, Op::AddBias(self.id, b.id), "add_bias")
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.map(Op::Scale(self.id, c), "scale", |x| c * x)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.map(Op::AddScalar(self.id), "add_scalar", |x| x + c)
    }

    /// Inserts a new axis of length `size` at `axis`, repeating values.
    pub fn expand(&self, axis: usize, size: usize) -> Result<Var<'t>> {
        let out = self.with(|a| {
            if axis > a.shape().len() || size == 0 {
                return Err(shape_err(
                    "expand",
                    format!("axis {axis} into {:?}", a.shape()),
                ));
            }
            let outer: usize = a.shape()[..axis].iter().product();
            let inner: usize = a.shape()[axis..].iter().product();
            let mut data = Vec::with_capacity(a.numel() * size);
            for o in 0..outer {
                let chunk = &a.data()[o * inner..(o + 1) * inner];
                for _ in 0..size {
                    data.extend_from_slice(chunk);
                }
            }
            let mut shape = a.shape().to_vec();
            shape.insert(axis, size);
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(
            out,
            Op::Expand {
                a: self.id,
                axis,
                size,
            },
            "expand",
        )
    }

    /// Sums out `axis`; a rank-1 input yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = self.with(|a| {
            if axis >= a.shape().len() {
                return Err(shape_err(
                    "sum_axis",
                    format!("axis {axis} of {:?}", a.shape()),
                ));
            }
            let (outer, dim, inner) = axis_split(a.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..dim {
                    let src = &a.data()[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                    add_into(&mut data[o * inner..(o + 1) * inner], src);
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape
            .push(out, Op::SumAxis { a: self.id, axis }, "sum_axis")
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.with(|a| a.data().iter().sum::<f64>());
        self.tape
            .push(Tensor::scalar(s), Op::SumAll(self.id), "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.with(|a| a.numel());
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.with(|a| {
            if axis >= a.shape().len() || start + len > a.shape()[axis] || len == 0 {
                return Err(shape_err(
                    "narrow",
                    format!("{start}+{len} on axis {axis} of {:?}", a.shape()),
                ));
            }
            let (outer, dim, inner) = axis_split(a.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(
                    &a.data()[(o * dim + start) * inner..(o * dim + start + len) * inner],
                );
            }
            let mut shape = a.shape().to_vec();
            shape[axis] = len;
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(
            out,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            "narrow",
        )
    }

    /// Selects rows (axis 0) by index; indices may repeat.
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t>> {
        let out = self.with(|a| {
            let rows = a.shape()[0];
            if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
                return Err(shape_err(
                    "gather",
                    format!("indices {idx:?} for {rows} rows"),
                ));
            }
            let w = a.numel() / rows;
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                data.extend_from_slice(&a.data()[i * w..(i + 1) * w]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = idx.len();
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(
            out,
            Op::Gather {
                a: self.id,
                idx: idx.to_vec(),
            },
            "gather",
        )
    }

    /// Sums row `r` into output row `idx[r]` of an `n`-row result.
    pub fn scatter_add(&self, idx: &[usize], n: usize) -> Result<Var<'t>> {
        let out = self.with(|a| {
            let rows = a.shape()[0];
            if idx.len() != rows || idx.iter().any(|&i| i >= n) || n == 0 {
                return Err(shape_err(
                    "scatter_add",
                    format!("{} indices for {rows} rows into {n}", idx.len()),
                ));
            }
            let w = a.numel() / rows;
            let mut data = vec![0.0; n * w];
            for (r, &i) in idx.iter().enumerate() {
                add_into(&mut data[i * w..(i + 1) * w], &a.data()[r * w..(r + 1) * w]);
            }
            let mut shape = a.shape().to_vec();
            shape[0] = n;
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(
            out,
            Op::ScatterAdd {
                a: self.id,
                idx: idx.to_vec(),
            },
            "scatter_add",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.with(|a| a.reshape(shape))?;
        self.tape.push(out, Op::Reshape(self.id), "reshape")
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = self.with(|a| {
            let [r, c] = a.shape() else {
                return Err(shape_err(
                    "transpose",
                    format!("expected 2-D, got {:?}", a.shape()),
                ));
            };
            let (r, c) = (*r, *c);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Ok(Tensor::from_parts(vec![c, r], data))
        })?;
        self.tape.push(out, Op::Transpose(self.id), "transpose")
    }

    /// Euclidean norm over `axis`. The subgradient at zero is zero.
    pub fn norm_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = self.with(|a| {
            if axis >= a.shape().len() {
                return Err(shape_err(
                    "norm_axis",
                    format!("axis {axis} of {:?}", a.shape()),
                ));
            }
            let (outer, dim, inner) = axis_split(a.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..dim)
                        .map(|k| a.data()[(o * dim + k) * inner + i].powi(2))
                        .sum();
                    data[o * inner + i] = s.sqrt();
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape
            .push(out, Op::NormAxis { a: self.id, axis }, "norm_axis")
    }

    /// Inner product of two equally shaped tensors over `axis`.
    pub fn dot_axis(&self, o: &Var<'t>, axis: usize) -> Result<Var<'t>> {
        let out = self.with2(o, |a, b| {
            if a.shape() != b.shape() || axis >= a.shape().len() {
                return Err(shape_err(
                    "dot_axis",
                    format!("{:?} . {:?} on {axis}", a.shape(), b.shape()),
                ));
            }
            let (outer, dim, inner) = axis_split(a.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..dim {
                    for i in 0..inner {
                        let j = (o * dim + k) * inner + i;
                        data[o * inner + i] += a.data()[j] * b.data()[j];
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Ok(Tensor::from_parts(shape, data))
        })?;
        self.tape.push(
            out,
            Op::DotAxis {
                a: self.id,
                b: o.id,
                axis,
            },
            "dot_axis",
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let out = self.with(|a| {
            let n = *a.shape().last().unwrap();
            let mut data = Vec::with_capacity(a.numel());
            for row in a.data().chunks(n) {
                data.extend(masked_softmax(row, &vec![true; n]));
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        });
        self.tape.push(out, Op::Softmax(self.id), "softmax")
    }

    /// Negative log-probability of `target` under a softmax over the
    /// unmasked entries of a flat logit vector.
    pub fn masked_cross_entropy(&self, mask: &[bool], target: usize) -> Result<Var<'t>> {
        let out = self.with(|a| {
            if mask.len() != a.numel() || target >= mask.len() || !mask[target] {
                return Err(shape_err(
                    "masked_cross_entropy",
                    format!("target {target} not selectable among {} logits", a.numel()),
                ));
            }
            let lp = masked_log_softmax(a.data(), mask);
            Ok(Tensor::scalar(-lp[target]))
        })?;
        self.tape.push(
            out,
            Op::MaskedCe {
                a: self.id,
                mask: mask.to_vec(),
                target,
            },
            "masked_cross_entropy",
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.map(Op::Sigmoid(self.id), "sigmoid", sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.map(Op::Tanh(self.id), "tanh", f64::tanh)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.map(Op::Exp(self.id), "exp", f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.map(Op::Log(self.id), "log", f64::ln)
    }

    pub fn silu(&self) -> Result<Var<'t>> {
        self.map(Op::Silu(self.id), "silu", |x| x * sigmoid(x))
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.map(Op::Softplus(self.id), "softplus", softplus)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.map(Op::Relu(self.id), "relu", |x| x.max(0.0))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<Option<usize>>,
}

impl Grads {
    /// Gradient with respect to a recorded value (zeros when unreachable).
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }

    /// One gradient per stored parameter, zero for unused or unreachable ones.
    pub fn params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.param_nodes.get(id.0).copied().flatten() {
                Some(node) => match &self.grads[node] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(store.get(id).shape()),
                },
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }
}
