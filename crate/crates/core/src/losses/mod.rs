//! Training objectives: BNNeck heads, smoothed identity loss, batch-hard
//! triplet loss and the ranking-aware regularizer, combined as
//! `(1/G)·Σ_g (id_g + tri_g) + ρ·(intra + inter)`.

pub mod bnneck;
pub mod metric;
pub mod ranking;

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::error::Result;

pub use bnneck::{bnneck_apply, BatchStats, BnNeckHead};
pub use metric::{batch_hard_triplet, check_pk, id_loss};
pub use ranking::{
    cosine_similarity_matrix, dktau, negative_centroid_similarities, ratr, ratr_inter, ratr_intra, RatrConfig,
    SimilarityView,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub margin: f64,
    pub ratr: RatrConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            margin: 1.2,
            ratr: RatrConfig::default(),
        }
    }
}

/// One logged loss value.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub term: &'static str,
    pub branch: Option<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub id: Vec<f64>,
    pub triplet: Vec<f64>,
    pub ratr_intra: f64,
    pub ratr_inter: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean_id(&self) -> f64 {
        self.id.iter().sum::<f64>() / self.id.len().max(1) as f64
    }

    pub fn mean_triplet(&self) -> f64 {
        self.triplet.iter().sum::<f64>() / self.triplet.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ratr_intra.is_finite()
            && self.ratr_inter.is_finite()
            && self.id.iter().chain(&self.triplet).all(|v| v.is_finite())
    }

    pub fn records(&self) -> Vec<LossRecord> {
        let mut out = Vec::new();
        for (b, &v) in self.id.iter().enumerate() {
            out.push(LossRecord { term: "id", branch: Some(b), value: v });
        }
        for (b, &v) in self.triplet.iter().enumerate() {
            out.push(LossRecord { term: "triplet", branch: Some(b), value: v });
        }
        out.push(LossRecord { term: "ratr_intra", branch: None, value: self.ratr_intra });
        out.push(LossRecord { term: "ratr_inter", branch: None, value: self.ratr_inter });
        out.push(LossRecord { term: "total", branch: None, value: self.total });
        out
    }
}

/// Total loss over `G` branches. `features[g]` are the pre-BN features fed to
/// the triplet and ranking terms; `logits[g]` come from the BNNeck classifiers.
pub fn total_loss(
    g: &mut Graph,
    features: &[Var],
    logits: &[Var],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.ratr.validate()?;
    assert_eq!(features.len(), logits.len(), "one logit matrix per branch");
    let labels_rc = Rc::new(labels.to_vec());
    let mut breakdown = LossBreakdown::default();
    let mut supervised = Vec::with_capacity(features.len());
    for (&f, &l) in features.iter().zip(logits) {
        let id = g.smoothed_cross_entropy(l, Rc::clone(&labels_rc), cfg.label_smoothing)?;
        let tri = g.batch_hard_triplet(f, Rc::clone(&labels_rc), cfg.margin)?;
        breakdown.id.push(g.scalar(id));
        breakdown.triplet.push(g.scalar(tri));
        supervised.push(g.add(id, tri));
    }
    let mut sum = supervised[0];
    for &s in &supervised[1..] {
        sum = g.add(sum, s);
    }
    let mut total = g.scale(sum, 1.0 / features.len() as f64);
    if features.len() >= 2 {
        let intra = ranking::ratr_intra_graph(g, features, labels, cfg.ratr.tau)?;
        let inter = ranking::ratr_inter_graph(g, features, labels, cfg.ratr.tau)?;
        breakdown.ratr_intra = g.scalar(intra);
        breakdown.ratr_inter = g.scalar(inter);
        if cfg.ratr.rho != 0.0 {
            let r = g.add(intra, inter);
            let r = g.scale(r, cfg.ratr.rho);
            total = g.add(total, r);
        }
    }
    breakdown.total = g.scalar(total);
    Ok((total, breakdown))
}
