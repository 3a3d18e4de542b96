//! Central finite-difference oracle for tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, TensorError, Var};

/// Max over coordinates of `|g_ad - g_fd| / (|g_fd| + 1e-8)` for a scalar
/// function of one input tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape<'t>, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    input_grad_check(None, f, x, eps).map(|(e, _)| e)
}

/// [`finite_diff_check`] for functions that also read parameters from
/// `store`. Returns the error and the smallest kink margin seen at `x`.
pub fn finite_diff_check_with_params<F>(
    store: &ParamStore,
    f: F,
    x: &Tensor,
    eps: f64,
) -> Result<(f64, f64), TensorError>
where
    F: for<'t> Fn(&'t Tape<'t>, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    input_grad_check(Some(store), f, x, eps)
}

fn input_grad_check<F>(
    store: Option<&ParamStore>,
    f: F,
    x: &Tensor,
    eps: f64,
) -> Result<(f64, f64), TensorError>
where
    F: for<'t> Fn(&'t Tape<'t>, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let new_tape = || match store {
        Some(s) => Tape::with_params(s),
        None => Tape::new(),
    };
    let tape = new_tape();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let g_ad = tape.backward(y)?.wrt(&xv);
    let margin = tape.kink_margin();
    let eval = |p: &Tensor| -> Result<f64, TensorError> {
        let t = new_tape();
        let v = t.leaf(p.clone());
        let out = f(&t, v)?;
        let val = out.item();
        if val.is_finite() {
            Ok(val)
        } else {
            Err(TensorError::NumericFault {
                op: "finite_diff_check",
            })
        }
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let g_fd = (fp - fm) / (2.0 * eps);
        worst = worst.max(rel_err(g_ad.data()[i], g_fd));
    }
    Ok((worst, margin))
}

pub fn rel_err(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / (g_fd.abs() + 1e-8)
}

/// Result of checking parameter gradients of a scalar loss.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Smallest kink margin recorded while evaluating the unperturbed loss.
    pub kink_margin: f64,
}

/// Finite-difference check of `d loss / d param` for the selected
/// parameters. `stride` > 1 checks every `stride`-th coordinate.
pub fn param_grad_check<F, E>(
    store: &ParamStore,
    params: &[ParamId],
    stride: usize,
    eps: f64,
    loss: F,
) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let (g_ad, kink_margin) = {
        let tape = Tape::with_params(store);
        let l = loss(&tape)?;
        (tape.backward(l)?.params(store), tape.kink_margin())
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        kink_margin,
    };
    let eval = |s: &ParamStore| -> Result<f64, E> {
        let tape = Tape::with_params(s);
        let v = loss(&tape)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NumericFault {
                op: "param_grad_check",
            }
            .into())
        }
    };
    for &id in params {
        let n = store.get(id).numel();
        for i in (0..n).step_by(stride.max(1)) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let g_fd = (fp - fm) / (2.0 * eps);
            let e = rel_err(g_ad[id.index()].data()[i], g_fd);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Directional finite-difference check of a parameter gradient.
///
/// Each of `n_dirs` directions moves every coordinate of the selected
/// parameters by `±eps` (signs from a seeded stream), and compares `g . u` against
/// the central difference along `u`. Directional derivatives keep the
/// signal far above floating-point cancellation even when individual
/// gradient entries are tiny. The reported kink margin is the minimum over
/// all evaluations, perturbed ones included.
pub fn directional_grad_check<F, E>(
    store: &ParamStore,
    params: &[ParamId],
    n_dirs: usize,
    eps: f64,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    use rand::{Rng, SeedableRng};
    let (g_ad, mut margin) = {
        let tape = Tape::with_params(store);
        let l = loss(&tape)?;
        (tape.backward(l)?.params(store), tape.kink_margin())
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        kink_margin: margin,
    };
    let mut work = store.clone();
    for d in 0..n_dirs {
        let signs: Vec<Vec<f64>> = store
            .ids()
            .map(|id| {
                let n = store.get(id).numel();
                if params.contains(&id) {
                    (0..n)
                        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                        .collect()
                } else {
                    vec![0.0; n]
                }
            })
            .collect();
        let mut eval = |sign: f64| -> Result<f64, E> {
            for ((w, base), u) in work
                .tensors_mut()
                .iter_mut()
                .zip(store.tensors())
                .zip(&signs)
            {
                for ((x, &b), &ui) in w.data_mut().iter_mut().zip(base.data()).zip(u) {
                    *x = b + sign * eps * ui;
                }
            }
            let tape = Tape::with_params(&work);
            let v = loss(&tape)?.item();
            margin = margin.min(tape.kink_margin());
            if v.is_finite() {
                Ok(v)
            } else {
                Err(TensorError::NumericFault {
                    op: "directional_grad_check",
                }
                .into())
            }
        };
        let fp = eval(1.0)?;
        let fm = eval(-1.0)?;
        let g_fd = (fp - fm) / (2.0 * eps);
        let g_dir: f64 = g_ad
            .iter()
            .zip(&signs)
            .map(|(g, u)| g.data().iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let e = rel_err(g_dir, g_fd);
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_param = format!("direction {d}");
            report.worst_index = d;
        }
    }
    report.kink_margin = margin;
    Ok(report)
}
