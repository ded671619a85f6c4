//! Central finite-difference verification of taped gradients (64-bit).

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Group gradients smaller than this are compared on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub numel: usize,
    /// `max |analytic - numeric| / max(|analytic|∞, |numeric|∞, SCALE_FLOOR)`
    pub max_rel_err: f64,
}

/// Compare the tape gradient of a scalar function against central differences
/// for every named input.
pub fn check_gradients<F>(inputs: &[(String, Tensor<f64>)], step: f64, f: F) -> Result<Vec<GradCheckReport>>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|(n, t)| g.param(n, t.clone())).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf grad")).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = values.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; values[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + step;
            let up = eval(&values)?;
            values[k].data_mut()[i] = orig - step;
            let down = eval(&values)?;
            values[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        reports.push(GradCheckReport {
            name: name.clone(),
            numel: numeric.len(),
            max_rel_err: relative_error(analytic[k].data(), &numeric),
        });
    }
    Ok(reports)
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(analytic).max(inf(numeric)).max(SCALE_FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.5]) > 0.1);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
