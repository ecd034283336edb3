//! Central finite-difference verification of the analytic gradients.

use serde::{Deserialize, Serialize};

use super::objective::example_objective;
use crate::error::{ensure, Result};
use crate::model::{GuidanceMode, ModelParams};
use crate::numerics::{SeededRng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Weight decay included in the checked loss.
    pub lambda: f64,
    /// Coordinates sampled per group; every coordinate when `None`.
    pub max_coords: Option<usize>,
    /// A coordinate whose absolute disagreement is at most this also passes.
    /// Zero applies the relative test alone.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tolerance: 1e-4,
            lambda: 1e-3,
            max_coords: None,
            abs_floor: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates failing both the relative test and the absolute floor.
    pub failures: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failed_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.group.as_str())
            .collect()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(x + εe_k) − f(x − εe_k)) / 2ε` for every coordinate `k`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], epsilon: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + epsilon;
            let plus = f(&probe);
            probe[k] = x[k] - epsilon;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}

fn sample_coords(len: usize, max: Option<usize>, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(k) = max {
        if k < len {
            rng.shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
        }
    }
    idx
}

/// Compares `analytic` against central differences of `loss` around `params`,
/// group by group.
pub fn compare_gradients(
    params: &ModelParams,
    analytic: &ModelParams,
    mut loss: impl FnMut(&ModelParams) -> Result<f64>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    ensure!(options.epsilon > 0.0, "epsilon must be positive");
    ensure!(
        params.dims == analytic.dims && params.groups() == analytic.groups(),
        "gradient shape differs from the parameters"
    );
    let mut rng = SeededRng::new(options.seed);
    let mut probe = params.clone();
    let mut groups = Vec::new();
    for group in params.groups() {
        let coords = sample_coords(params.slice(group).len(), options.max_coords, &mut rng);
        let mut worst = 0.0f64;
        let mut worst_abs = 0.0f64;
        let mut failures = 0;
        for &k in &coords {
            let x = params.slice(group)[k];
            probe.slice_mut(group)[k] = x + options.epsilon;
            let plus = loss(&probe)?;
            probe.slice_mut(group)[k] = x - options.epsilon;
            let minus = loss(&probe)?;
            probe.slice_mut(group)[k] = x;
            let numeric = (plus - minus) / (2.0 * options.epsilon);
            let a = analytic.slice(group)[k];
            let re = relative_error(a, numeric);
            let abs = (a - numeric).abs();
            if !(re < options.tolerance || abs <= options.abs_floor) {
                failures += 1;
            }
            worst = worst.max(re);
            worst_abs = worst_abs.max(abs);
        }
        groups.push(GroupCheck {
            group: group.name(),
            coords: coords.len(),
            max_rel_error: worst,
            max_abs_error: worst_abs,
            failures,
            passed: failures == 0,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport { groups, max_rel_error, passed })
}

/// Checks the full captioner gradient on one example.
pub fn gradient_check(
    params: &ModelParams,
    raw: &Vector,
    token_ids: &[usize],
    mode: GuidanceMode,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = example_objective(params, raw, token_ids, mode, options.lambda)?;
    compare_gradients(
        params,
        &analytic,
        |p| example_objective(p, raw, token_ids, mode, options.lambda).map(|(l, _)| l),
        options,
    )
}
