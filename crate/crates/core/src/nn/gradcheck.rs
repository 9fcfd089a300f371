use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - fd| / max(|analytic|, |fd|, GRAD_CHECK_FLOOR)`
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coordinates: usize,
    /// (parameter index, flat coordinate) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients of the scalar `f` with central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, one coordinate at a time.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    if loss.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(Tensor::grad).collect();
    drop(loss);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coordinates: 0,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        if analytic[pi].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("analytic gradient of parameter {pi}")));
        }
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + eps;
            let plus = f()?.item();
            p.data_mut()[i] = orig - eps;
            let minus = f()?.item();
            p.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective at parameter {pi}, coordinate {i}")));
            }
            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][i];
            let abs = (a - fd).abs();
            let rel = abs / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
            report.coordinates += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((pi, i));
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn square_at_three() {
        let x = Tensor::parameter(alloc::vec![3.0], &[1]).unwrap();
        let r = grad_check(|| Ok(x.square().sum_all()), &[x.clone()], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        x.square().sum_all().backward().unwrap();
        assert_eq!(x.grad(), alloc::vec![6.0]);
    }

    #[test]
    fn silu_of_linear_map() {
        let mut init = Init::new(42);
        let w = init.uniform(&[4, 3], 1.0);
        let x = init.uniform(&[2, 4], 1.0);
        let r = grad_check(|| Ok(x.matmul(&w)?.silu().sum_all()), &[w.clone(), x.clone()], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn nonfinite_objective_is_reported() {
        let x = Tensor::parameter(alloc::vec![-1.0], &[1]).unwrap();
        let r = grad_check(|| Ok(x.ln().sum_all()), &[x.clone()], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
