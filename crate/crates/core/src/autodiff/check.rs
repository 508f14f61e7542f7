use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

/// Largest relative error between the reverse-mode gradient of `f` at `x`
/// and a central finite difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several leaves at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars = xs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var)?;
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let hi = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let lo = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        rng::normal_tensor(&mut rng::stream(seed, "check"), shape)
    }

    #[test]
    fn quadratic_is_exact() {
        let err = grad_check(|g, x| g.square(x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn linear_is_at_rounding_level() {
        let err = grad_check(
            |g, x| {
                let y = g.scale(x, 2.5)?;
                let y = g.add_scalar(y, -1.0)?;
                g.sum(y)
            },
            &random(1, &[2, 3]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check(|g, x| g.square(x), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn composed_mlp_loss() {
        let x = random(2, &[5, 4]);
        let w1 = random(3, &[6, 4]);
        let b1 = random(4, &[1, 6]);
        let w2 = random(5, &[3, 6]);
        let b2 = random(6, &[1, 3]);
        let labels = [0usize, 2, 1, 1, 0];
        let err = grad_check_many(
            |g, v| {
                let xc = g.constant(x.clone());
                let h = g.linear(xc, v[0], v[1])?;
                let h = g.tanh(h)?;
                let logits = g.linear(h, v[2], v[3])?;
                g.softmax_cross_entropy(logits, &labels)
            },
            &[w1, b1, w2, b2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
