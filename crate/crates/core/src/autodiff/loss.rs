//! Mean-reduced losses. Classification losses take logits.

use std::rc::Rc;

use super::{Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Mean squared error.
pub fn mse_loss<'t, T: Float>(pred: &Var<'t, T>, target: &Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    let n = pred.value().len() as f64;
    Ok(pred.sub(target)?.sum_sq().scale(1.0 / n))
}

/// Mean absolute error.
pub fn l1_loss<'t, T: Float>(pred: &Var<'t, T>, target: &Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", pred.shape(), target.shape()));
    }
    let n = pred.value().len() as f64;
    Ok(pred.sub(target)?.l1().scale(1.0 / n))
}

/// Binary cross entropy on logits, one label in {0, 1} per logit, or a
/// single label shared by all of them.
pub fn bce_with_logits<'t, T: Float>(logits: &Var<'t, T>, labels: &[f64]) -> Result<Var<'t, T>> {
    let n = logits.value().len();
    if labels.len() != n && labels.len() != 1 {
        return Err(Error::shape("bce_with_logits", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::LabelOutOfRange {
            op: "bce_with_logits",
            label: bad,
        });
    }
    let labels: Vec<T> = (0..n)
        .map(|i| T::from_f64(if labels.len() == 1 { labels[0] } else { labels[i] }))
        .collect();
    // softplus(x) - y*x, stable for both signs of x
    let total: T = logits
        .value()
        .data()
        .iter()
        .zip(&labels)
        .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    let out = Tensor::scalar(total / T::from_f64(n as f64));
    let a = logits.src();
    let av = logits.value_rc();
    Ok(logits.tape().record(out, &[a], || Op::BceLogits {
        a,
        av,
        labels: Rc::new(labels),
    }))
}

/// Softmax cross entropy of `[rows, K]` logits against class indices in `0..K`.
pub fn cross_entropy<'t, T: Float>(logits: &Var<'t, T>, classes: &[usize]) -> Result<Var<'t, T>> {
    let v = logits.value();
    if v.rank() != 2 || v.shape()[0] != classes.len() {
        return Err(Error::shape("cross_entropy", v.shape(), &[classes.len()]));
    }
    let k = v.shape()[1];
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::IndexOutOfRange {
            op: "cross_entropy",
            index: bad,
            bound: k,
        });
    }
    let mut probs = Vec::with_capacity(v.len());
    let mut total = T::zero();
    for (row, &c) in v.data().chunks_exact(k).zip(classes) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[c];
        probs.extend(row.iter().map(|&x| (x - log_z).exp()));
    }
    let rows = classes.len();
    let out = Tensor::scalar(total / T::from_f64(rows as f64));
    let a = logits.src();
    let shape = v.shape().to_vec();
    Ok(logits.tape().record(out, &[a], || Op::CrossEntropy {
        a,
        probs: Tensor::from_parts(shape, probs),
        classes: Rc::new(classes.to_vec()),
    }))
}
