use super::{Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Coordinates whose gradient magnitude falls below this are compared
/// absolutely; finite differences cannot resolve relative error there.
const REL_FLOOR: f64 = 1e-3;

/// Checks the tape gradient of the scalar function `f` at `x` against
/// central differences with step `eps`. Passes when the worst relative
/// error is at most `tol`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if eps <= 0.0 {
        return Err(invalid!("grad_check eps must be positive, got {eps}"));
    }
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(point, false);
        let out = f(&tape, v)?;
        if out.numel() != 1 {
            return Err(invalid!(
                "grad_check needs a scalar function, got shape {:?}",
                out.shape()
            ));
        }
        Ok(out.item())
    };

    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&tape, v)?;
    if out.numel() != 1 {
        return Err(invalid!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        ));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .expect("parameter leaf has a gradient")
        .data()
        .to_vec();

    let mut report = GradCheckReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst_index: 0,
        pass: true,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.pass = report.max_rel_error <= tol;
    Ok(report)
}

/// Deterministic values in `±[0.1, 1.1)`, away from the kinks of ReLU and L1.
fn probe(shape: &[usize], salt: usize) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let k = (i * 7919 + salt * 104_729) % 1009;
        let mag = 0.1 + k as f64 / 1009.0;
        if (i + salt).is_multiple_of(3) {
            -mag
        } else {
            mag
        }
    })
}

/// Reduces `y` to a scalar with fixed, shape-dependent weights so every
/// output element reaches the gradient.
fn weigh<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = probe(&y.shape(), 99);
    Ok(y.mul(tape.constant(w))?.sum())
}

/// Finite-difference checks of every differentiable tape primitive at small
/// shapes (`eps = 1e-6`). Binary operations are checked in each operand.
pub fn primitive_suite(tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    type Case = (
        &'static str,
        Vec<usize>,
        Box<dyn for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>>,
    );
    let img = vec![4, 5, 6];
    let c = |shape: &[usize], salt: usize| probe(shape, salt);
    let cases: Vec<Case> = vec![
        (
            "add",
            img.clone(),
            Box::new(move |t, x| x.add(t.constant(c(&[4, 5, 6], 1)))),
        ),
        (
            "sub.lhs",
            img.clone(),
            Box::new(move |t, x| x.sub(t.constant(c(&[4, 5, 6], 1)))),
        ),
        (
            "sub.rhs",
            img.clone(),
            Box::new(move |t, x| t.constant(c(&[4, 5, 6], 1)).sub(x)),
        ),
        (
            "mul",
            img.clone(),
            Box::new(move |t, x| x.mul(t.constant(c(&[4, 5, 6], 2)))),
        ),
        ("mul.self", img.clone(), Box::new(|_, x| x.mul(x))),
        ("scale", img.clone(), Box::new(|_, x| Ok(x.scale(-1.7)))),
        (
            "add_scalar",
            img.clone(),
            Box::new(|_, x| x.add_scalar(0.3).mul(x)),
        ),
        ("relu", img.clone(), Box::new(|_, x| Ok(x.relu()))),
        ("gelu", img.clone(), Box::new(|_, x| Ok(x.gelu()))),
        ("reshape", img.clone(), Box::new(|_, x| x.reshape(&[20, 6]))),
        (
            "permute",
            img.clone(),
            Box::new(|_, x| x.permute(&[2, 0, 1])),
        ),
        ("narrow", img.clone(), Box::new(|_, x| x.narrow(1, 1, 3))),
        (
            "concat",
            img.clone(),
            Box::new(move |t, x| Var::concat(&[x, t.constant(c(&[2, 5, 6], 3)), x], 0)),
        ),
        (
            "gather",
            vec![12],
            Box::new(|_, x| x.gather(vec![3, 3, 0, super::ZERO_FILL, 11, 7, 7, 7], &[2, 4])),
        ),
        (
            "linear.input",
            vec![3, 4],
            Box::new(move |t, x| x.linear(t.constant(c(&[4, 5], 4)), Some(t.constant(c(&[5], 5))))),
        ),
        (
            "linear.weight",
            vec![4, 5],
            Box::new(move |t, w| t.constant(c(&[3, 4], 4)).linear(w, None)),
        ),
        (
            "bmm.lhs",
            vec![2, 3, 4],
            Box::new(move |t, x| x.bmm(t.constant(c(&[2, 4, 5], 6)), false)),
        ),
        (
            "bmm.rhs_transposed",
            vec![2, 5, 4],
            Box::new(move |t, x| t.constant(c(&[2, 3, 4], 6)).bmm(x, true)),
        ),
        ("bmm.gram", vec![2, 3, 4], Box::new(|_, x| x.bmm(x, true))),
        (
            "conv2d.input",
            img.clone(),
            Box::new(move |t, x| {
                x.conv2d(
                    t.constant(c(&[6, 4, 3, 3], 7)),
                    Some(t.constant(c(&[6], 8))),
                    1,
                    1,
                    1,
                )
            }),
        ),
        (
            "conv2d.weight_strided",
            vec![6, 4, 3, 3],
            Box::new(move |t, w| t.constant(c(&[4, 5, 6], 9)).conv2d(w, None, 2, 1, 1)),
        ),
        (
            "conv2d.grouped",
            vec![4, 2, 3, 3],
            Box::new(move |t, w| t.constant(c(&[4, 5, 6], 10)).conv2d(w, None, 1, 1, 2)),
        ),
        (
            "conv2d.depthwise_bias",
            vec![4],
            Box::new(move |t, b| {
                t.constant(c(&[4, 5, 6], 11)).conv2d(
                    t.constant(c(&[4, 1, 3, 3], 12)),
                    Some(b),
                    1,
                    1,
                    4,
                )
            }),
        ),
        (
            "layer_norm",
            vec![3, 6],
            Box::new(move |t, x| {
                x.layer_norm(t.constant(c(&[6], 13)), t.constant(c(&[6], 14)), 1e-5)
            }),
        ),
        (
            "layer_norm_axis.input",
            img.clone(),
            Box::new(move |t, x| {
                x.layer_norm_axis(t.constant(c(&[4], 13)), t.constant(c(&[4], 14)), 1e-5, 0)
            }),
        ),
        (
            "layer_norm_axis.gamma",
            vec![4],
            Box::new(move |t, g| {
                t.constant(c(&[4, 5, 6], 15))
                    .layer_norm_axis(g, t.constant(c(&[4], 14)), 1e-5, 0)
            }),
        ),
        ("softmax.last", vec![3, 5], Box::new(|_, x| x.softmax(1))),
        (
            "softmax.middle",
            vec![2, 4, 3],
            Box::new(|_, x| x.softmax(1)),
        ),
        (
            "l2_normalize",
            vec![3, 5],
            Box::new(|_, x| Ok(x.l2_normalize(1e-12))),
        ),
        (
            "avg_pool2d",
            img.clone(),
            Box::new(|_, x| x.avg_pool2d(3, 1, 1)),
        ),
        (
            "avg_pool2d.strided",
            vec![2, 6, 6],
            Box::new(|_, x| x.avg_pool2d(2, 2, 0)),
        ),
        (
            "pixel_shuffle",
            vec![8, 2, 3],
            Box::new(|_, x| x.pixel_shuffle(2)),
        ),
        (
            "pixel_unshuffle",
            vec![2, 4, 6],
            Box::new(|_, x| x.pixel_unshuffle(2)),
        ),
        (
            "reflect_pad",
            vec![2, 4, 5],
            Box::new(|_, x| x.reflect_pad(2, 3)),
        ),
        ("crop", img.clone(), Box::new(|_, x| x.crop(3, 4))),
    ];
    let mut out = Vec::with_capacity(cases.len() + 3);
    for (i, (name, shape, f)) in cases.iter().enumerate() {
        let x = probe(shape, i);
        out.push((*name, grad_check(|t, v| weigh(t, f(t, v)?), &x, 1e-6, tol)?));
    }
    let x = probe(&img, 50);
    out.push((
        "sum",
        grad_check(|_, v| Ok(v.mul(v)?.sum()), &x, 1e-6, tol)?,
    ));
    out.push((
        "mean",
        grad_check(|_, v| Ok(v.mul(v)?.mean()), &x, 1e-6, tol)?,
    ));
    let target = probe(&img, 51);
    out.push((
        "l1_loss",
        grad_check(|t, v| v.l1_loss(t.constant(target.clone())), &x, 1e-6, tol)?,
    ));
    Ok(out)
}
