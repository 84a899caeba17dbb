//! Exact ranking statistics and retrieval evaluation.

use crate::error::{Error, Result};
use crate::autograd::Mat;
use crate::losses::SimilarityView;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Kendall's Tau with ties contributing zero.
pub fn ktau_exact(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape("sequences differ in length".into()));
    }
    let b = x.len();
    if b < 2 {
        return Err(Error::Undefined("Kendall's Tau needs sequences of length >= 2".into()));
    }
    let mut acc = 0.0;
    for i in 0..b {
        for j in i + 1..b {
            acc += sign(x[i] - x[j]) * sign(y[i] - y[j]);
        }
    }
    Ok(acc / (b * (b - 1) / 2) as f64)
}

/// Mean of precision@k over the relevant positions of a ranked list.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Undefined("average precision needs a relevant entry".into()));
    }
    Ok(acc / hits as f64)
}

#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    /// One feature per row.
    pub features: Mat,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RankedGallery {
    pub query: LabeledFeatures,
    pub gallery: LabeledFeatures,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// `(k, CMC@k)` in the order requested.
    pub cmc: Vec<(usize, f64)>,
    /// Queries dropped because no valid match remained.
    pub excluded: usize,
}

impl RetrievalMetrics {
    pub fn cmc_at(&self, k: usize) -> Option<f64> {
        self.cmc.iter().find(|(r, _)| *r == k).map(|(_, v)| *v)
    }
}

fn normalized_rows(m: &Mat) -> Result<Mat> {
    let mut out = m.clone();
    for (i, mut r) in out.rows_mut().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if !(n > 0.0) {
            return Err(Error::Degenerate(format!("feature row {i} has zero norm")));
        }
        r /= n;
    }
    Ok(out)
}

/// mAP and CMC under cosine similarity. Gallery entries sharing both identity
/// and camera with the query are skipped; similarity ties keep gallery order.
pub fn evaluate_map_cmc(gal: &RankedGallery, ranks: &[usize]) -> Result<RetrievalMetrics> {
    let q = &gal.query;
    let g = &gal.gallery;
    if q.features.ncols() != g.features.ncols() {
        return Err(Error::Shape("query and gallery widths differ".into()));
    }
    if q.identities.len() != q.features.nrows()
        || q.cameras.len() != q.features.nrows()
        || g.identities.len() != g.features.nrows()
        || g.cameras.len() != g.features.nrows()
    {
        return Err(Error::Shape("labels do not match features".into()));
    }
    let sims = normalized_rows(&q.features)?.dot(&normalized_rows(&g.features)?.t());
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; ranks.len()];
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for qi in 0..q.features.nrows() {
        let mut order: Vec<usize> = (0..g.features.nrows())
            .filter(|&j| !(g.identities[j] == q.identities[qi] && g.cameras[j] == q.cameras[qi]))
            .collect();
        order.sort_by(|&a, &b| sims[[qi, b]].total_cmp(&sims[[qi, a]]));
        let relevance: Vec<bool> = order.iter().map(|&j| g.identities[j] == q.identities[qi]).collect();
        let Some(first) = relevance.iter().position(|&r| r) else {
            excluded += 1;
            continue;
        };
        evaluated += 1;
        ap_sum += average_precision(&relevance)?;
        for (h, &k) in hits.iter_mut().zip(ranks) {
            if first < k {
                *h += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::Undefined("no query has a valid gallery match".into()));
    }
    Ok(RetrievalMetrics {
        map: ap_sum / evaluated as f64,
        cmc: ranks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / evaluated as f64)).collect(),
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiversityReport {
    pub intra: f64,
    pub inter: f64,
}

/// Exact-KTau agreement between branch rankings of each anchor's positives and
/// of its negative-class centroids, averaged over anchors and branch pairs.
/// Anchors with fewer than two positives are left out of the intra average.
pub fn branch_diversity_report(features: &[Mat], labels: &[usize]) -> Result<DiversityReport> {
    if features.len() < 2 {
        return Err(Error::Config("diversity report needs at least 2 branches".into()));
    }
    let views = features
        .iter()
        .map(|f| SimilarityView::new(f, labels))
        .collect::<Result<Vec<_>>>()?;
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for k in 0..labels.len() {
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                let (x, y) = (views[i].positive_sequence(k), views[j].positive_sequence(k));
                if x.len() >= 2 {
                    intra += ktau_exact(&x, &y)?;
                    n_intra += 1;
                }
                let (x, y) = (&views[i].negative_centroids[k], &views[j].negative_centroids[k]);
                if x.len() >= 2 {
                    inter += ktau_exact(x, y)?;
                    n_inter += 1;
                }
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::Undefined("need >= 3 instances and >= 3 identities for a diversity report".into()));
    }
    Ok(DiversityReport {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
    })
}
