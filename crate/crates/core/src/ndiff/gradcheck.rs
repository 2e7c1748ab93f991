use super::{Graph, NdiffError, Tensor, Var};

/// Central-difference derivative of `f` with respect to every coordinate
/// of `point`, evaluated without building any backward pass.
pub fn central_difference<F>(f: &F, point: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>, NdiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NdiffError>,
{
    let eval = |pt: &[Tensor]| -> Result<f64, NdiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pt.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item()?;
        if !v.is_finite() {
            return Err(NdiffError::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };
    let mut work: Vec<Tensor> = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for p in 0..point.len() {
        let mut d = Vec::with_capacity(point[p].numel());
        for k in 0..point[p].numel() {
            let orig = point[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            d.push((plus - minus) / (2.0 * eps));
        }
        out.push(d);
    }
    Ok(out)
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over all coordinates.
pub fn grad_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64, NdiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NdiffError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(NdiffError::InvalidArgument(format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(NdiffError::NonFinite(format!("objective evaluated to {value}")));
    }
    let grads = g.backward(out)?;
    let numeric = central_difference(&f, point, eps)?;

    let mut worst = 0.0_f64;
    for (v, num) in vars.iter().zip(&numeric) {
        let analytic = grads.get(*v).expect("params always receive a gradient");
        for (a, n) in analytic.iter().zip(num) {
            let err = (a - n).abs() / a.abs().max(1.0);
            if !err.is_finite() {
                return Err(NdiffError::NonFinite(format!(
                    "gradient comparison produced {err}"
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact_enough() {
        let err = grad_check(
            |g, v| {
                let s = g.square(v[0])?;
                g.sum(s)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nan_objective_is_reported() {
        let res = grad_check(
            |g, v| {
                let nan = g.scalar(f64::NAN);
                let y = g.mul(v[0], nan)?;
                g.sum(y)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(res, Err(NdiffError::NonFinite(_))));
    }

    #[test]
    fn eps_range_enforced() {
        let f = |g: &mut Graph, v: &[Var]| g.sum(v[0]);
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 0.1).is_err());
    }
}
