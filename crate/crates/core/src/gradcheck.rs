//! Central finite-difference checks of autograd gradients (use `F64` models).

use candle_core::{DType, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    /// Largest analytic gradient magnitude seen; guards against vacuous checks.
    pub max_abs_grad: f64,
}

impl GradCheck {
    /// Compare analytic gradients of the scalar `loss()` with respect to `vars`
    /// against central differences. `vars` are restored afterwards.
    pub fn run<F>(&self, vars: &[(String, Var)], loss: F) -> Result<GradReport>
    where
        F: Fn() -> Result<Tensor>,
    {
        let grads = loss()?.backward()?;
        let mut report = GradReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            max_abs_grad: 0.0,
        };
        for (name, var) in vars {
            let analytic = match grads.get(var) {
                Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
                None => vec![0.0; var.elem_count()],
            };
            let original = var.as_tensor().copy()?;
            let shape = original.shape().clone();
            let base = original.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for (i, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| -> Result<f64> {
                    let mut v = base.clone();
                    v[i] += delta;
                    let t = Tensor::from_vec(v, shape.clone(), original.device())?
                        .to_dtype(original.dtype())?;
                    var.set(&t)?;
                    Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
                };
                let numeric = (eval(self.step)? - eval(-self.step)?) / (2.0 * self.step);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                report.max_abs_grad = report.max_abs_grad.max(a.abs());
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.clone(), i, a, numeric));
                }
            }
            var.set(&original)?;
        }
        Ok(report)
    }
}
