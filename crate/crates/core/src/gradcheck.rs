//! Central finite-difference verification of the analytic gradients.
//!
//! Runs at f64 only; 32-bit arithmetic does not leave enough headroom
//! between truncation and roundoff error for a meaningful comparison.

use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over all parameter entries of
    /// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_relative_error: f64,
    /// (parameter index, element index) where the maximum occurred
    pub worst: Option<(usize, usize)>,
}

/// Compare tape gradients of `forward` against central differences for
/// every entry of every parameter. `forward` must rebuild the loss from the
/// parameters' current values each time it is called.
pub fn grad_check<F>(params: &[Tensor<f64>], mut forward: F, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>) -> Result<Tensor<f64>>,
{
    // analytic pass
    let mut graph = Graph::new();
    let loss = forward(&mut graph)?;
    if loss.numel() != 1 {
        return Err(CoreError::invalid(format!(
            "grad_check: loss must be scalar, got shape {}",
            loss.shape()
        )));
    }
    for p in params {
        p.zero_grad();
    }
    graph.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    let eval = |forward: &mut F| -> Result<f64> {
        let mut g = Graph::inference();
        Ok(forward(&mut g)?.item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
    };
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let original = p.data()[ei];
            p.data_mut()[ei] = original + eps;
            let plus = eval(&mut forward)?;
            p.data_mut()[ei] = original - eps;
            let minus = eval(&mut forward)?;
            p.data_mut()[ei] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
