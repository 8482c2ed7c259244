//! Central finite-difference gradient oracle.

use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, Error, Result};
use crate::nn::{ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// `(index, analytic, numeric)` for every checked element, in order.
    pub samples: Vec<(usize, f64, f64)>,
}

impl GradCheckReport {
    /// `||a - n|| / max(||a||, ||n||)` over all checked elements, the usual
    /// whole-model figure when individual gradients span many magnitudes.
    pub fn norm_rel_error(&self) -> f64 {
        norm_rel_error(self.samples.iter().map(|&(_, a, n)| (a, n)))
    }
}

/// Norm-wise relative error of paired `(analytic, numeric)` values.
pub fn norm_rel_error(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let (mut d, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (a, n) in pairs {
        d += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
    }
    let denom = a2.max(n2).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        d.sqrt() / denom
    }
}

fn eval<S, F>(f: &F, x: &Tensor<S>, requires_grad: bool) -> Result<(Graph<S>, Var, Var)>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), requires_grad)?;
    let out = f(&mut g, xv)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok((g, xv, out))
}

fn value_at<S, F>(f: &F, x: &Tensor<S>) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let (g, _, out) = eval(f, x, false)?;
    Ok(g.value(out).data()[0].as_f64())
}

/// Max relative error between the reverse-mode gradient of scalar `f` at `x`
/// and central differences with step `eps`, over every element of `x`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    Ok(grad_check_at(f, x, eps, None)?.max_rel_error)
}

/// Like [`grad_check`], restricted to `indices` when given.
pub fn grad_check_at<S, F>(f: F, x: &Tensor<S>, eps: f64, indices: Option<&[usize]>) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(arg_err("grad_check", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let first = value_at(&f, x)?;
    let second = value_at(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let (mut g, xv, out) = eval(&f, x, true)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(xv).expect("leaf requires grad").clone();

    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
        samples: Vec::with_capacity(indices.len()),
    };
    let mut probe = x.clone().into_data();
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + S::lit(eps);
        let plus = value_at(&f, &Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - S::lit(eps);
        let minus = value_at(&f, &Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i].as_f64();
        report.samples.push((i, a, numeric));
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Gradient check of `f` with respect to the named parameter; every other
/// parameter is held constant.
pub fn param_grad_check<S, F>(
    params: &ParamStore<S>,
    name: &str,
    f: F,
    eps: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Session<S>) -> Result<Var>,
{
    let x = params
        .get(name)
        .ok_or_else(|| arg_err("param_grad_check", format!("unknown parameter {name:?}")))?;
    grad_check_at(
        |g, xv| {
            let mut sess = Session::new(params, false);
            sess.graph = std::mem::take(g);
            sess.bind(name, xv);
            let out = f(&mut sess);
            *g = std::mem::take(&mut sess.graph);
            out
        },
        x,
        eps,
        indices,
    )
}
