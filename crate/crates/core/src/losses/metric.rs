//! Identity classification and batch-hard triplet objectives.

use std::rc::Rc;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

/// Checks the P×K structure: at least two identities, each with the same count `K ≥ 2`.
pub fn check_pk(labels: &[usize]) -> Result<(usize, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let p = counts.len();
    let k = counts.values().next().copied().unwrap_or(0);
    if p < 2 {
        return Err(Error::Batch(format!("need at least 2 identities, got {p}")));
    }
    if k < 2 || counts.values().any(|&c| c != k) {
        return Err(Error::Batch("every identity needs the same count K >= 2".into()));
    }
    Ok((p, k))
}

impl Graph {
    /// Mean cross-entropy against targets with `1−ε` on the true class and
    /// `ε/(C−1)` elsewhere.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>, eps: f64) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.dim();
        if labels.len() != rows {
            return Err(Error::Shape("one label per logit row".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::OutOfRange(format!("label {bad} (have {classes} classes)")));
        }
        if !(0.0..1.0).contains(&eps) || (classes < 2 && eps > 0.0) {
            return Err(Error::Config("label smoothing must be in [0,1) with at least 2 classes".into()));
        }
        let off = if classes > 1 { eps / (classes - 1) as f64 } else { 0.0 };
        let mut probs = Mat::zeros((rows, classes));
        let mut loss = 0.0;
        for i in 0..rows {
            let row = lv.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..classes {
                let logp = row[c] - lse;
                probs[[i, c]] = logp.exp();
                let q = if c == labels[i] { 1.0 - eps } else { off };
                loss -= q * logp;
            }
        }
        loss /= rows as f64;
        Ok(self.custom(
            Mat::from_elem((1, 1), loss),
            vec![logits],
            Box::new(move |ctx| {
                let scale = ctx.grad[[0, 0]] / rows as f64;
                let mut g = probs.clone();
                for (i, mut r) in g.rows_mut().into_iter().enumerate() {
                    for (c, v) in r.iter_mut().enumerate() {
                        let q = if c == labels[i] { 1.0 - eps } else { off };
                        *v = (*v - q) * scale;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean over anchors of `max(0, d(a,p*) − d(a,n*) + margin)` with the
    /// farthest positive and closest negative under Euclidean distance.
    pub fn batch_hard_triplet(&mut self, f: Var, labels: Rc<Vec<usize>>, margin: f64) -> Result<Var> {
        let fv = self.value(f);
        let rows = fv.nrows();
        if labels.len() != rows {
            return Err(Error::Shape("one label per feature row".into()));
        }
        check_pk(&labels)?;
        let dist = pairwise_distances(fv);
        let mut loss = 0.0;
        // (anchor, positive, negative) for active anchors
        let mut active = Vec::new();
        for a in 0..rows {
            let mut pos = (a, f64::NEG_INFINITY);
            let mut neg = (a, f64::INFINITY);
            for j in 0..rows {
                if j == a {
                    continue;
                }
                let d = dist[[a, j]];
                if labels[j] == labels[a] {
                    if d > pos.1 {
                        pos = (j, d);
                    }
                } else if d < neg.1 {
                    neg = (j, d);
                }
            }
            let hinge = pos.1 - neg.1 + margin;
            if hinge > 0.0 {
                loss += hinge;
                active.push((a, pos.0, neg.0));
            }
        }
        loss /= rows as f64;
        Ok(self.custom(
            Mat::from_elem((1, 1), loss),
            vec![f],
            Box::new(move |ctx| {
                let f = ctx.inputs[0];
                let scale = ctx.grad[[0, 0]] / rows as f64;
                let mut g = Mat::zeros(f.raw_dim());
                let mut push = |i: usize, j: usize, sign: f64| {
                    let d = dist[[i, j]];
                    if d == 0.0 {
                        return;
                    }
                    let diff = (&f.row(i) - &f.row(j)) * (sign * scale / d);
                    let mut gi = g.row_mut(i);
                    gi += &diff;
                    let mut gj = g.row_mut(j);
                    gj -= &diff;
                };
                for &(a, p, n) in &active {
                    push(a, p, 1.0);
                    push(a, n, -1.0);
                }
                vec![Some(g)]
            }),
        ))
    }
}

pub fn pairwise_distances(f: &Mat) -> Mat {
    let n = f.nrows();
    let mut d = Mat::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = f
                .row(i)
                .iter()
                .zip(f.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

pub fn id_loss(logits: &Mat, labels: &[usize], eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.smoothed_cross_entropy(l, Rc::new(labels.to_vec()), eps)?;
    Ok(g.scalar(loss))
}

pub fn batch_hard_triplet(f: &Mat, labels: &[usize], margin: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(f.clone());
    let loss = g.batch_hard_triplet(v, Rc::new(labels.to_vec()), margin)?;
    Ok(g.scalar(loss))
}
