//! Training losses: soft Dice (and its auxiliary sum) and per-group
//! weighted cross-entropy.

use crate::error::{ensure, Result};
use crate::schema::LabelSchema;

use super::tensor::Tensor;

/// Default Dice smoothing.
pub const DICE_EPS: f64 = 1e-6;

/// `1 - (2 Σ p·t + eps) / (Σ p + Σ t + eps)`, with its gradient in `pred`.
pub fn dice_loss_with_grad(pred: &Tensor, truth: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    pred.same_shape(truth)?;
    ensure!(eps > 0.0, Contract, "dice eps must be positive");
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        inter += p * t;
        sp += p;
        st += t;
    }
    let num = 2.0 * inter + eps;
    let den = sp + st + eps;
    let loss = 1.0 - num / den;
    // d/dp_i of -(num/den) = -(2 t_i den - num) / den²
    let grad = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(_, &t)| -(2.0 * t * den - num) / (den * den))
        .collect();
    Ok((loss, Tensor::from_vec(pred.shape(), grad)?))
}

pub fn dice_loss(pred: &Tensor, truth: &Tensor, eps: f64) -> Result<f64> {
    dice_loss_with_grad(pred, truth, eps).map(|(l, _)| l)
}

/// Sum of pairwise Dice losses, with per-prediction gradients.
pub fn aux_seg_loss_with_grad(preds: &[Tensor], truths: &[Tensor], eps: f64) -> Result<(f64, Vec<Tensor>)> {
    ensure!(
        preds.len() == truths.len(),
        Contract,
        "{} predicted masks for {} targets",
        preds.len(),
        truths.len()
    );
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(truths) {
        let (l, g) = dice_loss_with_grad(p, t, eps)?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn aux_seg_loss(preds: &[Tensor], truths: &[Tensor], eps: f64) -> Result<f64> {
    aux_seg_loss_with_grad(preds, truths, eps).map(|(l, _)| l)
}

/// Per-position hard targets: one true state index per label group.
pub fn one_hot_targets(schema: &LabelSchema, states: &[Vec<usize>]) -> Result<Tensor> {
    let c = schema.total_states();
    let offsets = schema.offsets();
    let mut data = vec![0.0; states.len() * c];
    for (p, row) in states.iter().enumerate() {
        schema.check_states(row)?;
        for (g, &s) in row.iter().enumerate() {
            data[p * c + offsets[g] + s] = 1.0;
        }
    }
    Tensor::from_vec(&[states.len(), c], data)
}

/// Weighted cross-entropy with soft targets. `logits` and `targets` are
/// `[P, C]` with `C` the schema's total state count; each group's target
/// slice must be a distribution. Per position and group the loss is
/// `Σ_s q_s w_s (−log softmax_s)`, summed over groups and averaged over
/// positions.
pub fn weighted_ce_with_grad(logits: &Tensor, targets: &Tensor, schema: &LabelSchema) -> Result<(f64, Tensor)> {
    logits.same_shape(targets)?;
    let c = schema.total_states();
    ensure!(
        logits.rank() == 2 && logits.shape()[1] == c,
        Contract,
        "logits must be [P, {c}], got {:?}",
        logits.shape()
    );
    ensure!(logits.is_finite(), Numeric, "non-finite logits");
    let positions = logits.shape()[0];
    ensure!(positions > 0, Contract, "no positions to score");
    let offsets = schema.offsets();
    let mut loss = 0.0;
    let mut grad = vec![0.0; positions * c];
    let scale = 1.0 / positions as f64;
    for p in 0..positions {
        let row = &logits.data()[p * c..(p + 1) * c];
        let trow = &targets.data()[p * c..(p + 1) * c];
        for (g, grp) in schema.groups.iter().enumerate() {
            let o = offsets[g];
            let k = grp.state_count();
            let z = &row[o..o + k];
            let q = &trow[o..o + k];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let mut qw = 0.0;
            for s in 0..k {
                let wq = q[s] * grp.weights[s];
                loss += wq * (lse - z[s]);
                qw += wq;
            }
            for s in 0..k {
                let prob = (z[s] - lse).exp();
                grad[p * c + o + s] = scale * (prob * qw - q[s] * grp.weights[s]);
            }
        }
    }
    Ok((loss * scale, Tensor::from_vec(logits.shape(), grad)?))
}

/// Weighted cross-entropy against hard state indices (one row per position).
pub fn weighted_ce_loss(logits: &Tensor, true_states: &[Vec<usize>], schema: &LabelSchema) -> Result<f64> {
    let targets = one_hot_targets(schema, true_states)?;
    weighted_ce_with_grad(logits, &targets, schema).map(|(l, _)| l)
}
