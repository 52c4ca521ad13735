//! Training objectives, each as a plain scalar function and as a graph
//! builder with identical arithmetic.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub const BCE_EPS: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;

fn check_lengths(pred: usize, gt: usize, valid: usize) {
    assert!(pred == gt && gt == valid, "loss inputs differ in length ({pred}, {gt}, {valid})");
}

/// Mean binary cross-entropy over valid positions.
pub fn bce_loss(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    check_lengths(pred.len(), gt.len(), valid.len());
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if !valid[i] {
            continue;
        }
        let (p, y) = (pred[i], gt[i]);
        total -= y * libm::log(p + BCE_EPS) + (1.0 - y) * libm::log(1.0 - p + BCE_EPS);
        n += 1;
    }
    if n == 0 {
        bail!(UndefinedLoss, "binary cross-entropy over zero valid positions");
    }
    Ok(total / n as f64)
}

/// Soft Dice loss over valid positions.
pub fn dice_loss(pred: &[f64], gt: &[f64], valid: &[bool]) -> f64 {
    check_lengths(pred.len(), gt.len(), valid.len());
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        if valid[i] {
            inter += pred[i] * gt[i];
            sp += pred[i];
            sg += gt[i];
        }
    }
    1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS)
}

/// Mean token cross-entropy, skipping targets equal to `pad`.
pub fn text_loss(logits: &Tensor, target: &[usize], pad: usize) -> Result<f64> {
    assert_eq!(logits.rows(), target.len(), "one target per logit row");
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, &t) in target.iter().enumerate() {
        if t == pad {
            continue;
        }
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(row.iter().map(|&x| libm::exp(x - m)).sum::<f64>());
        total += lse - row[t];
        n += 1;
    }
    if n == 0 {
        bail!(UndefinedLoss, "text loss over an all-padding target");
    }
    Ok(total / n as f64)
}

fn valid_rows(valid: &[bool]) -> Vec<usize> {
    valid.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect()
}

/// Graph form of [`bce_loss`]; `pred` is `N × 1`.
pub fn bce_graph(g: &Graph, pred: Var, gt: &[f64], valid: &[bool]) -> Result<Var> {
    check_lengths(g.shape(pred).0, gt.len(), valid.len());
    let idx = valid_rows(valid);
    if idx.is_empty() {
        bail!(UndefinedLoss, "binary cross-entropy over zero valid positions");
    }
    let y: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
    let not_y = Tensor::column_vector(&y.iter().map(|v| 1.0 - v).collect::<Vec<_>>());
    let y = Tensor::column_vector(&y);
    let n = idx.len() as f64;
    let p = g.gather_rows(pred, idx);
    let pos = g.mul_const(g.ln(g.add_scalar(p, BCE_EPS)), y);
    let neg = g.mul_const(g.ln(g.add_scalar(g.scale(p, -1.0), 1.0 + BCE_EPS)), not_y);
    Ok(g.scale(g.sum_all(g.add(pos, neg)), -1.0 / n))
}

/// Graph form of [`dice_loss`]; `pred` is `N × 1`.
pub fn dice_graph(g: &Graph, pred: Var, gt: &[f64], valid: &[bool]) -> Var {
    check_lengths(g.shape(pred).0, gt.len(), valid.len());
    let idx = valid_rows(valid);
    let y: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
    let sg: f64 = y.iter().sum();
    let p = g.gather_rows(pred, idx);
    let inter = g.sum_all(g.mul_const(p, Tensor::column_vector(&y)));
    let num = g.add_scalar(g.scale(inter, 2.0), DICE_EPS);
    let den = g.add_scalar(g.sum_all(p), sg + DICE_EPS);
    let ratio = g.mul(num, g.recip(den));
    g.add_scalar(g.scale(ratio, -1.0), 1.0)
}

/// Graph form of [`text_loss`].
pub fn text_loss_graph(g: &Graph, logits: Var, target: &[usize], pad: usize) -> Result<Var> {
    assert_eq!(g.shape(logits).0, target.len(), "one target per logit row");
    let rows: Vec<usize> = (0..target.len()).filter(|&r| target[r] != pad).collect();
    if rows.is_empty() {
        bail!(UndefinedLoss, "text loss over an all-padding target");
    }
    let picks: Vec<usize> = rows.iter().map(|&r| target[r]).collect();
    let n = rows.len() as f64;
    let ls = g.log_softmax_rows(g.gather_rows(logits, rows));
    Ok(g.scale(g.sum_all(g.pick(ls, picks)), -1.0 / n))
}
