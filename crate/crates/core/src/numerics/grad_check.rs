//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::InvalidShape {
            shape: v.shape().to_vec(),
            reason: "grad_check needs a scalar-valued function".into(),
        });
    }
    Ok(v.item())
}

/// Max over all coordinates of all inputs of
/// `|analytic - central| / max(1, |central|)`.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::InvalidShape {
            shape: g.value(out).shape().to_vec(),
            reason: "grad_check needs a scalar-valued function".into(),
        });
    }
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, x) in xs.iter().enumerate() {
        let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let up = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let down = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);

        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_vector_output_and_bad_eps() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|g, v| g.exp(v), &x, 1e-5).is_err());
        assert!(grad_check(|g, v| g.sum(v), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::vector(vec![-1.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let l = g.log(v)?;
                g.sum(l)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
