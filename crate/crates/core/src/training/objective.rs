use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::model::{backward_sequence, forward_sequence, GuidanceMode, ModelParams};
use crate::numerics::{Matrix, Vector};

/// `-Σ_k logprob_k[target_k] + (λ/2)·‖W_img‖²`.
pub fn loss<R: AsRef<[f64]>>(logprobs: &[R], targets: &[usize], lambda: f64, image_weight: &Matrix) -> Result<f64> {
    ensure!(
        logprobs.len() == targets.len(),
        "{} logprob rows for {} targets",
        logprobs.len(),
        targets.len()
    );
    let mut data = 0.0;
    for (row, &t) in logprobs.iter().zip(targets) {
        let row = row.as_ref();
        ensure!(t < row.len(), "target {t} outside a row of {} logprobs", row.len());
        data -= row[t];
    }
    Ok(data + 0.5 * lambda * image_weight.frobenius_sq())
}

/// Regularized loss of one caption and its gradient.
pub fn example_objective(
    params: &ModelParams,
    raw: &Vector,
    token_ids: &[usize],
    mode: GuidanceMode,
    lambda: f64,
) -> Result<(f64, ModelParams)> {
    let trace = forward_sequence(params, raw, token_ids, mode)?;
    let value = loss(&trace.logprob_rows(), &token_ids[1..], lambda, &params.image_weight)?;
    let mut grads = backward_sequence(params, &trace, token_ids, mode)?;
    if lambda != 0.0 {
        for (g, w) in grads.image_weight.as_mut_slice().iter_mut().zip(params.image_weight.as_slice()) {
            *g += lambda * w;
        }
    }
    Ok((value, grads))
}

/// Mean loss and mean gradient over `batch`. Per-example work may run on the
/// current rayon pool; the reduction always walks `batch` in the given order.
pub(crate) fn batch_objective(
    params: &ModelParams,
    dataset: &Dataset,
    batch: &[usize],
    mode: GuidanceMode,
    lambda: f64,
    parallel: bool,
) -> Result<(f64, ModelParams)> {
    ensure!(!batch.is_empty(), "empty minibatch");
    let one = |&i: &usize| {
        let ex = &dataset.examples[i];
        example_objective(params, &dataset.features.row(ex.feature_id), &ex.token_ids, mode, lambda)
    };
    let parts: Vec<Result<(f64, ModelParams)>> = if parallel {
        batch.par_iter().map(one).collect()
    } else {
        batch.iter().map(one).collect()
    };
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_scaled(&g, 1.0);
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Mean per-token negative log-likelihood over the whole dataset, without the
/// weight-decay term.
pub fn mean_token_loss(params: &ModelParams, dataset: &Dataset, mode: GuidanceMode) -> Result<f64> {
    if dataset.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for ex in &dataset.examples {
        let trace = forward_sequence(params, &dataset.features.row(ex.feature_id), &ex.token_ids, mode)?;
        nll += trace.nll();
        tokens += trace.steps.len();
    }
    Ok(nll / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let uniform = vec![vec![-(4f64.ln()); 4]];
        let z = Matrix::zeros(2, 2);
        assert!((loss(&uniform, &[2], 0.0, &z).unwrap() - 1.3862944).abs() < 1e-7);

        let certain = vec![vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]];
        assert_eq!(loss(&certain, &[1], 0.0, &z).unwrap(), 0.0);

        let ones = Matrix::filled(2, 2, 1.0);
        let with = loss(&uniform, &[0], 1e-3, &ones).unwrap();
        let without = loss(&uniform, &[0], 0.0, &ones).unwrap();
        assert!((with - without - 0.002).abs() < 1e-15);

        assert!(loss(&uniform, &[0, 1], 0.0, &z).is_err());
    }
}
