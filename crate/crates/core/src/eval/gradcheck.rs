use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the autodiff gradient of scalar `f` at `input` with central
/// differences of step `eps`. `input` must be f64.
pub fn fd_gradient_check<F>(f: F, input: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if input.dtype() != DType::F64 {
        return Err(Error::validation("gradient checks run in f64"));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let y = f(t)?;
        if y.elem_count() != 1 {
            return Err(Error::shape(format!(
                "gradient check needs a scalar, got {:?}",
                y.dims()
            )));
        }
        let v = y.flatten_all()?.to_vec1::<f64>()?[0];
        if !v.is_finite() {
            return Err(Error::validation("function value is not finite"));
        }
        Ok(v)
    };

    let var = Var::from_tensor(input)?;
    let y = f(var.as_tensor())?;
    eval(input)?;
    let grads = y.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; input.elem_count()],
    };

    let base: Vec<f64> = input.flatten_all()?.to_vec1()?;
    let mut numeric = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = eval(&Tensor::from_slice(&probe, input.shape(), input.device())?)?;
        probe[i] = base[i] - eps;
        let down = eval(&Tensor::from_slice(&probe, input.shape(), input.device())?)?;
        probe[i] = base[i];
        numeric.push((up - down) / (2.0 * eps));
    }

    let mut worst = 0;
    let mut max_relative_error = 0.0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
        if err > max_relative_error {
            max_relative_error = err;
            worst = i;
        }
    }
    Ok(GradCheck {
        max_relative_error,
        worst,
        analytic,
        numeric,
    })
}
