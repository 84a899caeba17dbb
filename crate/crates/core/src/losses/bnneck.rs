//! Batch-normalization neck: the metric feature goes to the triplet loss, its
//! batch-normalized version feeds a bias-free identity classifier.

use ndarray::Axis;
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::params::{normal, ParamId, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BnNeckHead {
    pub dim: usize,
    pub num_classes: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// `dim × num_classes`, no bias.
    pub classifier: ParamId,
}

/// Batch statistics from a train-mode pass, applied later with [`BnNeckHead::update_running`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Mat,
    pub var_unbiased: Mat,
}

pub struct NeckOutput {
    pub bn: Var,
    pub logits: Var,
    pub stats: Option<BatchStats>,
}

impl BnNeckHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            gamma: store.add(format!("{name}.bn.gamma"), Mat::ones((1, dim))),
            beta: store.add(format!("{name}.bn.beta"), Mat::zeros((1, dim))),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Mat::zeros((1, dim))),
            running_var: store.add_buffer(format!("{name}.bn.running_var"), Mat::ones((1, dim))),
            classifier: store.add(format!("{name}.classifier"), normal(rng, dim, num_classes, 0.001)),
        }
    }

    /// In eval mode before any training step the initial running statistics
    /// (mean 0, variance 1) are used.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, mode: Mode) -> Result<NeckOutput> {
        let (rows, dim) = g.value(f).dim();
        if dim != self.dim {
            return Err(Error::Shape(format!("neck expects {} dims, got {dim}", self.dim)));
        }
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (bn, stats) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::Batch("batch normalization needs at least 2 rows".into()));
                }
                let (normed, stats) = g.batch_standardize(f, BN_EPS);
                let scaled = g.mul_row(normed, gamma);
                (g.add_row(scaled, beta), Some(stats))
            }
            Mode::Eval => {
                let mean = store.value(self.running_mean);
                let inv = store.value(self.running_var).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let shift = g.constant(-mean);
                let inv = g.constant(inv);
                let centered = g.add_row(f, shift);
                let normed = g.mul_row(centered, inv);
                let scaled = g.mul_row(normed, gamma);
                (g.add_row(scaled, beta), None)
            }
        };
        let w = g.param(store, self.classifier);
        let logits = g.matmul(bn, w);
        Ok(NeckOutput { bn, logits, stats })
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        let m = store.value_mut(self.running_mean);
        *m = &*m * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
        let v = store.value_mut(self.running_var);
        *v = &*v * (1.0 - BN_MOMENTUM) + &stats.var_unbiased * BN_MOMENTUM;
    }
}

impl Graph {
    /// Standardizes each column with the batch mean and biased variance.
    pub fn batch_standardize(&mut self, x: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (rows, _) = xv.dim();
        let mean = xv.mean_axis(Axis(0)).expect("non-empty batch").insert_axis(Axis(0));
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let stats = BatchStats {
            mean,
            var_unbiased: &var * (rows as f64 / (rows as f64 - 1.0)),
        };
        let out = self.custom(
            xhat,
            vec![x],
            Box::new(move |ctx| {
                let (g, xhat) = (ctx.grad, ctx.output);
                let mean_g = g.mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
                let mean_gx = (g * xhat).mean_axis(Axis(0)).expect("rows").insert_axis(Axis(0));
                let gx = (g - &mean_g - &(xhat * &mean_gx)) * &inv_std;
                vec![Some(gx)]
            }),
        );
        (out, stats)
    }
}

/// Plain helper: BN features and logits for a feature matrix.
pub fn bnneck_apply(f: &Mat, store: &ParamStore, head: &BnNeckHead, mode: Mode) -> Result<(Mat, Mat, Option<BatchStats>)> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let out = head.forward(&mut g, store, fv, mode)?;
    Ok((g.value(out.bn).clone(), g.value(out.logits).clone(), out.stats))
}
