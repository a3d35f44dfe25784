//! Central finite-difference gradient checking.
//!
//! The checker only ever runs forward passes when computing numerical
//! gradients, so it stays independent of the backward implementation it is
//! judging. Used by the unit tests and by the `gradcheck` CLI command.

use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of checking one leaf tensor.
#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub leaves: Vec<LeafReport>,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Elementwise relative error with an absolute floor so that near-zero
/// gradient pairs compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients of `build()` (a scalar-valued graph over the
/// given leaves) against central finite differences with step `h`.
///
/// `build` must be a pure function of the current leaf data: it is invoked
/// repeatedly while leaf entries are nudged up and down.
pub fn check_gradients<F>(build: F, leaves: &[(&str, Tensor)], h: f64) -> CheckReport
where
    F: Fn() -> Tensor,
{
    for (_, leaf) in leaves {
        leaf.zero_grad();
    }
    let loss = build();
    loss.backward();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|(name, leaf)| {
            leaf.grad().unwrap_or_else(|| {
                panic!("leaf {name} received no gradient; is it part of the graph?")
            })
        })
        .collect();

    let mut reports = Vec::new();
    for ((name, leaf), grad) in leaves.iter().zip(&analytic) {
        let mut max_rel = 0.0;
        let mut worst = 0;
        for (i, &analytic_grad) in grad.iter().enumerate() {
            let original = leaf.value_at(i);
            leaf.set_value(i, original + h);
            let up = build().item();
            leaf.set_value(i, original - h);
            let down = build().item();
            leaf.set_value(i, original);
            let numeric = (up - down) / (2.0 * h);
            let rel = relative_error(analytic_grad, numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        reports.push(LeafReport {
            name: name.to_string(),
            max_rel_error: max_rel,
            worst_index: worst,
        });
    }
    CheckReport { leaves: reports }
}
