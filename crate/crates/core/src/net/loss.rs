//! Softmax cross-entropy and mean-squared error.

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// How per-sample losses are combined. The reported loss value is always the
/// batch mean; `Sum` only changes the scale of the returned gradient so that
/// row `i` is the gradient of sample `i`'s own loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(shape_err!("{} logit rows for {} labels", logits.rows(), labels.len()));
    }
    if logits.rows() == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Input(format!("label {bad} out of range for {} classes", logits.cols())));
    }
    Ok(())
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Cross-entropy of each sample.
pub fn per_sample_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (-log_softmax_row(logits.row(i))[y]).max(0.0))
        .collect())
}

/// Softmax cross-entropy: returns the mean loss and its gradient with respect
/// to the logits.
pub fn loss_and_grad(logits: &Matrix, labels: &[usize], reduction: Reduction) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let m = logits.rows();
    let scale = match reduction {
        Reduction::Mean => 1.0 / m as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Matrix::zeros(m, logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logp = log_softmax_row(logits.row(i));
        total += (-logp[y]).max(0.0);
        for (g, lp) in grad.row_mut(i).iter_mut().zip(&logp) {
            *g = lp.exp() * scale;
        }
        grad[(i, y)] -= scale;
    }
    Ok((total / m as f64, grad))
}

/// Mean over samples of `‖output − target‖²`, with its gradient.
pub fn mse_and_grad(output: &Matrix, target: &Matrix, reduction: Reduction) -> Result<(f64, Matrix)> {
    if output.shape() != target.shape() {
        return Err(shape_err!("mse between {:?} and {:?}", output.shape(), target.shape()));
    }
    let m = output.rows();
    if m == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let diff = output.sub(target)?;
    let loss = diff.frobenius_norm_sq() / m as f64;
    let scale = match reduction {
        Reduction::Mean => 2.0 / m as f64,
        Reduction::Sum => 2.0,
    };
    Ok((loss, diff.scale(scale)))
}

/// Index of the largest logit in each row (ties resolve to the lowest index).
pub fn predictions(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
