//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it stays independent
//! of every backward rule it verifies. Run it in `f64`.

use super::tape::Val;
use super::{Tape, Tensor};
use crate::error::Result;

/// Outcome of one gradient comparison.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
}

/// Compare reverse-mode gradients of `f` against central finite differences.
///
/// `f` maps leaf values to a scalar loss. The error metric is
/// `|a - b| / max(1, |a|, |b|)`, so it behaves like an absolute tolerance for
/// small gradients and a relative one for large gradients.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Val<'t, f64>]) -> Result<Val<'t, f64>>,
{
    // analytic gradients
    let tape = Tape::new();
    let leaves: Vec<Val<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Val<'_, f64>> = xs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        Ok(f(&tape, &leaves)?.item()?)
    };

    let mut report = GradCheckReport { max_err: 0.0, worst_input: 0, worst_index: 0 };
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let perturb = |delta: f64| -> Result<f64> {
                let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
                let mut data = t.data().to_vec();
                data[i] += delta;
                xs[ti] = Tensor::from_vec(t.shape().to_vec(), data)?;
                eval(&xs)
            };
            let fd = (perturb(step)? - perturb(-step)?) / (2.0 * step);
            let an = analytic[ti].data()[i];
            let err = (an - fd).abs() / 1.0_f64.max(an.abs()).max(fd.abs());
            if err > report.max_err {
                report = GradCheckReport { max_err: err, worst_input: ti, worst_index: i };
            }
        }
    }
    if report.max_err > tol {
        return Err(crate::error::Error::Usage(format!(
            "gradient check failed: err {:.3e} > tol {:.3e} at input {} index {}",
            report.max_err, tol, report.worst_input, report.worst_index
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{concat, embedding};

    fn rt(shape: Vec<usize>, label: &str) -> Tensor<f64> {
        let mut rng = crate::rng::derive(11, label, 0);
        Tensor::randn(shape, &mut rng)
    }

    /// Weighted sum so the scalar loss is sensitive to every output entry.
    fn wsum<'t>(v: Val<'t, f64>) -> Result<Val<'t, f64>> {
        let shape = v.shape();
        let n: usize = shape.iter().product();
        let weights: Vec<f64> = (0..n).map(|i| 0.3 + 0.11 * (i as f64).sin()).collect();
        let w = v.tape().constant(Tensor::from_vec(shape, weights)?);
        Ok(v.mul(w)?.sum_all())
    }

    #[test]
    fn primitives_pass_finite_difference_checks() {
        let tol = 1e-4;
        let step = 1e-5;

        // elementwise with trailing broadcast
        check(&[rt(vec![2, 3, 4], "a"), rt(vec![3, 1], "b")], |_, v| {
            wsum(v[0].add(v[1])?)
        }, step, tol).unwrap();
        check(&[rt(vec![2, 3, 4], "c"), rt(vec![4], "d")], |_, v| {
            wsum(v[0].sub(v[1])?)
        }, step, tol).unwrap();
        check(&[rt(vec![2, 3, 4], "e"), rt(vec![3, 4], "f")], |_, v| {
            wsum(v[0].mul(v[1])?)
        }, step, tol).unwrap();
        check(
            &[rt(vec![2, 3], "g"), rt(vec![3], "h").map(|x| x + 4.0)],
            |_, v| wsum(v[0].div(v[1])?),
            step,
            tol,
        )
        .unwrap();

        // unary
        for (name, f) in [
            ("neg", (|v: Val<'_, f64>| Ok(v.neg())) as fn(Val<'_, f64>) -> Result<Val<'_, f64>>),
            ("square", |v| Ok(v.square())),
            ("sigmoid", |v| Ok(v.sigmoid())),
            ("swish", |v| Ok(v.swish())),
            ("tanh", |v| Ok(v.tanh())),
            ("scale", |v| Ok(v.scale(1.7))),
            ("softmax", |v| v.softmax_last()),
        ] {
            check(&[rt(vec![3, 5], name)], |_, v| wsum(f(v[0])?), step, tol)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        // sqrt and abs need inputs away from their kinks
        check(&[rt(vec![3, 5], "sqrt").map(|x| x.abs() + 0.5)], |_, v| {
            wsum(v[0].sqrt())
        }, step, tol).unwrap();
        check(&[rt(vec![3, 5], "abs").map(|x| x + 3.0)], |_, v| {
            wsum(v[0].abs())
        }, step, tol).unwrap();
        check(&[rt(vec![3, 5], "relu").map(|x| x + 3.0)], |_, v| {
            wsum(v[0].relu())
        }, step, tol).unwrap();

        // matrix products
        check(&[rt(vec![4, 3], "mm-a"), rt(vec![3, 5], "mm-b")], |_, v| {
            wsum(v[0].matmul(v[1])?)
        }, step, tol).unwrap();
        check(&[rt(vec![2, 3, 4], "bmm-a"), rt(vec![2, 4, 2], "bmm-b")], |_, v| {
            wsum(v[0].bmm(v[1])?)
        }, step, tol).unwrap();

        // reductions and structure
        check(&[rt(vec![2, 3, 4], "red")], |_, v| {
            wsum(v[0].mean_axis(1, true)?)
        }, step, tol).unwrap();
        check(&[rt(vec![2, 3, 4], "red2")], |_, v| {
            wsum(v[0].sum_axis(2, false)?)
        }, step, tol).unwrap();
        check(&[rt(vec![2, 3, 4], "perm")], |_, v| {
            wsum(v[0].permute(&[2, 0, 1])?)
        }, step, tol).unwrap();
        check(&[rt(vec![2, 6], "narrow")], |_, v| {
            wsum(v[0].narrow(1, 2, 3)?)
        }, step, tol).unwrap();
        check(&[rt(vec![2, 8], "glu")], |_, v| wsum(v[0].glu(1)?), step, tol).unwrap();
        check(&[rt(vec![2, 3, 6], "l2")], |_, v| {
            wsum(v[0].l2_norm_last(1e-8)?)
        }, step, tol).unwrap();
        check(&[rt(vec![2, 4], "cat-a"), rt(vec![2, 3], "cat-b")], |t, v| {
            wsum(concat(t, &[v[0], v[1]], 1)?)
        }, step, tol).unwrap();
        check(&[rt(vec![3, 5], "gather")], |_, v| {
            wsum(v[0].gather_last(&[4, 0, 2])?)
        }, step, tol).unwrap();
        check(&[rt(vec![5, 3], "embed")], |_, v| {
            wsum(embedding(v[0], &[0, 2, 2, 4])?)
        }, step, tol).unwrap();

        // layer norm with affine parameters
        check(
            &[rt(vec![4, 6], "ln-x"), rt(vec![6], "ln-g"), rt(vec![6], "ln-b")],
            |_, v| wsum(v[0].layer_norm(v[1], v[2], 1e-5)?),
            step,
            tol,
        )
        .unwrap();

        // convolutions
        check(
            &[rt(vec![2, 3, 11], "c1-x"), rt(vec![4, 3, 5], "c1-w"), rt(vec![4], "c1-b")],
            |_, v| wsum(v[0].conv1d(v[1], Some(v[2]), 2, 2)?),
            step,
            tol,
        )
        .unwrap();
        check(
            &[rt(vec![2, 3, 6], "ct-x"), rt(vec![3, 4, 6], "ct-w"), rt(vec![4], "ct-b")],
            |_, v| wsum(v[0].conv_transpose1d(v[1], Some(v[2]), 3, 1)?),
            step,
            tol,
        )
        .unwrap();
        check(
            &[rt(vec![2, 4, 9], "dw-x"), rt(vec![4, 5], "dw-w")],
            |_, v| wsum(v[0].depthwise_conv1d(v[1])?),
            step,
            tol,
        )
        .unwrap();

        // FFT-backed STFT magnitude
        check(&[rt(vec![2, 40], "stft")], |_, v| {
            wsum(v[0].stft_mag(16, 8)?)
        }, step, tol).unwrap();
    }

    #[test]
    fn layer_norm_sum_matches_finite_differences() {
        // loss = sum(layer_norm(x)); tolerance 1e-4 in double precision
        check(
            &[rt(vec![3, 7], "lnsum"), Tensor::ones(vec![7]), Tensor::zeros(vec![7])],
            |_, v| Ok(v[0].layer_norm(v[1], v[2], 1e-5)?.sum_all()),
            1e-5,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // sum(x * 2) checked against a deliberately wrong op built from scale:
        // use a correct op here and assert pass, then check failure detection
        // by comparing against an intentionally perturbed closure.
        let mut rng = crate::rng::derive(0, "gradcheck", 0);
        let x = Tensor::<f64>::randn(vec![3, 3], &mut rng);
        // correct
        check(&[x.clone()], |_, vs| Ok(vs[0].scale(2.0).sum_all()), 1e-5, 1e-8).unwrap();
        // wrong: forward computes 2x but we sneak a value-dependent branch that
        // differs between analytic path and FD path via detach
        let res = check(
            &[x],
            |_, vs| Ok(vs[0].detach().scale(2.0).sum_all().add(vs[0].sum_all().scale(0.0))?),
            1e-5,
            1e-8,
        );
        assert!(res.is_err(), "detached path must show zero analytic grad vs FD 2.0");
    }
}
