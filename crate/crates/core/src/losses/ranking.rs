//! Ranking-aware triplet regularization.
//!
//! For every anchor, each branch induces a ranking of the anchor's positives
//! (by cosine similarity) and of the negative class centroids. The
//! regularizer is the mean, over anchors and branch pairs, of the
//! differentiable Kendall's Tau between those rankings; minimizing it pushes
//! branches toward different orderings.

use std::collections::BTreeSet;
use std::rc::Rc;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatrConfig {
    /// Smoothness of the tanh surrogate.
    pub tau: f64,
    /// Weight in the total loss.
    pub rho: f64,
}

impl Default for RatrConfig {
    fn default() -> Self {
        Self { tau: 0.1, rho: 1.0 }
    }
}

impl RatrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.rho >= 0.0) {
            return Err(Error::Config("need tau > 0 and rho >= 0".into()));
        }
        Ok(())
    }
}

fn pairs(b: usize) -> f64 {
    (b * (b.saturating_sub(1)) / 2) as f64
}

/// Tanh surrogate of Kendall's Tau.
pub fn dktau(x: &[f64], y: &[f64], tau: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape("sequences differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::Undefined("D-KTau needs sequences of length >= 2".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config("tau must be positive".into()));
    }
    Ok(dktau_unchecked(x, y, tau))
}

fn dktau_unchecked(x: &[f64], y: &[f64], tau: f64) -> f64 {
    let b = x.len();
    let mut acc = 0.0;
    for i in 0..b {
        for j in i + 1..b {
            acc += ((x[i] - x[j]) / tau).tanh() * ((y[i] - y[j]) / tau).tanh();
        }
    }
    acc / pairs(b)
}

/// Accumulates `scale·∂dktau/∂x` into `gx` and `scale·∂dktau/∂y` into `gy`.
fn dktau_grad(x: &[f64], y: &[f64], tau: f64, scale: f64, gx: &mut [f64], gy: &mut [f64]) {
    let b = x.len();
    let c = scale / (pairs(b) * tau);
    for i in 0..b {
        for j in i + 1..b {
            let tx = ((x[i] - x[j]) / tau).tanh();
            let ty = ((y[i] - y[j]) / tau).tanh();
            let dx = (1.0 - tx * tx) * ty * c;
            let dy = (1.0 - ty * ty) * tx * c;
            gx[i] += dx;
            gx[j] -= dx;
            gy[i] += dy;
            gy[j] -= dy;
        }
    }
}

fn check_rows(m: &Mat, what: &str) -> Result<()> {
    for (i, r) in m.rows().into_iter().enumerate() {
        let n = r.dot(&r);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(format!("{what} row {i} has zero or non-finite norm")));
        }
    }
    Ok(())
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_cross(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_rows(g.value(a), "feature")?;
    check_rows(g.value(b), "feature")?;
    let an = g.l2_normalize_rows(a);
    let bn = if a == b { an } else { g.l2_normalize_rows(b) };
    let bt = g.transpose(bn);
    Ok(g.matmul(an, bt))
}

pub fn cosine_similarity_matrix(f: &Mat) -> Result<Mat> {
    let mut g = Graph::new();
    let v = g.constant(f.clone());
    let s = cosine_cross(&mut g, v, v)?;
    Ok(g.value(s).clone())
}

/// Distinct labels in ascending order.
pub fn class_order(labels: &[usize]) -> Vec<usize> {
    labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

/// `P×PK` matrix averaging the rows of each class, classes in ascending label order.
fn centroid_operator(labels: &[usize]) -> Mat {
    let classes = class_order(labels);
    let mut op = Mat::zeros((classes.len(), labels.len()));
    for (c, &cls) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == cls).collect();
        for &i in &members {
            op[[c, i]] = 1.0 / members.len() as f64;
        }
    }
    op
}

/// Positive columns of every anchor (same label, excluding itself).
pub fn positive_sets(labels: &[usize]) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|k| (0..labels.len()).filter(|&j| j != k && labels[j] == labels[k]).collect())
        .collect()
}

/// Columns of the centroid-similarity matrix holding each anchor's negative classes.
pub fn negative_class_sets(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = class_order(labels);
    labels
        .iter()
        .map(|&l| (0..classes.len()).filter(|&c| classes[c] != l).collect())
        .collect()
}

/// Similarities between `features[anchor]` and each negative class centroid,
/// classes in ascending label order.
pub fn negative_centroid_similarities(features: &Mat, anchor: usize, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != features.nrows() || anchor >= labels.len() {
        return Err(Error::Shape("labels/anchor do not match features".into()));
    }
    if class_order(labels).len() < 2 {
        return Err(Error::Undefined("need at least 2 identities for negative centroids".into()));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let sims = centroid_similarities(&mut g, f, labels)?;
    let neg = &negative_class_sets(labels)[anchor];
    Ok(neg.iter().map(|&c| g.value(sims)[[anchor, c]]).collect())
}

fn centroid_similarities(g: &mut Graph, f: Var, labels: &[usize]) -> Result<Var> {
    let op = g.constant(centroid_operator(labels));
    let centroids = g.matmul(op, f);
    cosine_cross(g, f, centroids)
}

/// Per-branch similarity structure of a batch.
#[derive(Clone, Debug)]
pub struct SimilarityView {
    /// `PK×PK` cosine similarities.
    pub similarity: Mat,
    /// Per-anchor positive indices (`K−1` each).
    pub positives: Vec<Vec<usize>>,
    /// Per-anchor similarity to each negative class centroid (`P−1` each).
    pub negative_centroids: Vec<Vec<f64>>,
}

impl SimilarityView {
    pub fn new(features: &Mat, labels: &[usize]) -> Result<Self> {
        let similarity = cosine_similarity_matrix(features)?;
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let cs = centroid_similarities(&mut g, f, labels)?;
        let cs = g.value(cs);
        let negative_centroids = negative_class_sets(labels)
            .iter()
            .enumerate()
            .map(|(k, cols)| cols.iter().map(|&c| cs[[k, c]]).collect())
            .collect();
        Ok(Self {
            similarity,
            positives: positive_sets(labels),
            negative_centroids,
        })
    }

    pub fn positive_sequence(&self, k: usize) -> Vec<f64> {
        self.positives[k].iter().map(|&j| self.similarity[[k, j]]).collect()
    }
}

impl Graph {
    /// `(1/R)·Σ_k Σ_{i<j} D-KTau(S_i[k, cols_k], S_j[k, cols_k]) / C(G,2)`
    /// over the `R` rows of the equally-shaped matrices `sims`. Rows whose
    /// column set has fewer than two entries contribute nothing.
    pub fn rank_agreement(&mut self, sims: &[Var], cols: Rc<Vec<Vec<usize>>>, tau: f64) -> Var {
        let g_count = sims.len();
        let rows = cols.len();
        let branch_pairs = pairs(g_count);
        if branch_pairs == 0.0 {
            return self.constant(Mat::zeros((1, 1)));
        }
        let seq = |m: &Mat, k: usize, cs: &[usize]| cs.iter().map(|&c| m[[k, c]]).collect::<Vec<_>>();
        let mut total = 0.0;
        for (k, cs) in cols.iter().enumerate() {
            if cs.len() < 2 {
                continue;
            }
            for i in 0..g_count {
                for j in i + 1..g_count {
                    let x = seq(self.value(sims[i]), k, cs);
                    let y = seq(self.value(sims[j]), k, cs);
                    total += dktau_unchecked(&x, &y, tau);
                }
            }
        }
        let norm = rows as f64 * branch_pairs;
        self.custom(
            Mat::from_elem((1, 1), total / norm),
            sims.to_vec(),
            Box::new(move |ctx| {
                let scale = ctx.grad[[0, 0]] / norm;
                let mut grads: Vec<Mat> = ctx.inputs.iter().map(|m| Mat::zeros(m.raw_dim())).collect();
                for (k, cs) in cols.iter().enumerate() {
                    if cs.len() < 2 {
                        continue;
                    }
                    for i in 0..g_count {
                        for j in i + 1..g_count {
                            let x = seq(ctx.inputs[i], k, cs);
                            let y = seq(ctx.inputs[j], k, cs);
                            let mut gx = vec![0.0; cs.len()];
                            let mut gy = vec![0.0; cs.len()];
                            dktau_grad(&x, &y, tau, scale, &mut gx, &mut gy);
                            for (t, &c) in cs.iter().enumerate() {
                                grads[i][[k, c]] += gx[t];
                                grads[j][[k, c]] += gy[t];
                            }
                        }
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }
}

fn check_branches(g: &Graph, features: &[Var], labels: &[usize]) -> Result<()> {
    let shape = g.value(features[0]).dim();
    if features.iter().any(|&f| g.value(f).dim() != shape) {
        return Err(Error::Shape("branch features differ in shape".into()));
    }
    if labels.len() != shape.0 {
        return Err(Error::Shape("one label per feature row".into()));
    }
    Ok(())
}

/// Intra-class term over positive similarity rankings.
pub fn ratr_intra_graph(g: &mut Graph, features: &[Var], labels: &[usize], tau: f64) -> Result<Var> {
    if features.len() < 2 {
        return Ok(g.constant(Mat::zeros((1, 1))));
    }
    check_branches(g, features, labels)?;
    let pos = positive_sets(labels);
    if pos.iter().any(|p| p.is_empty()) {
        return Err(Error::Undefined("intra diversity undefined: an anchor has no positives".into()));
    }
    let sims = features
        .iter()
        .map(|&f| cosine_cross(g, f, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.rank_agreement(&sims, Rc::new(pos), tau))
}

/// Inter-class term over negative-centroid similarity rankings.
pub fn ratr_inter_graph(g: &mut Graph, features: &[Var], labels: &[usize], tau: f64) -> Result<Var> {
    if features.len() < 2 {
        return Ok(g.constant(Mat::zeros((1, 1))));
    }
    check_branches(g, features, labels)?;
    if class_order(labels).len() <= 2 {
        return Err(Error::Undefined(
            "inter diversity undefined (sequence too short): need at least 3 identities".into(),
        ));
    }
    let sims = features
        .iter()
        .map(|&f| centroid_similarities(g, f, labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.rank_agreement(&sims, Rc::new(negative_class_sets(labels)), tau))
}

fn eval_plain(
    features: &[Mat],
    labels: &[usize],
    tau: f64,
    f: impl Fn(&mut Graph, &[Var], &[usize], f64) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = features.iter().map(|m| g.constant(m.clone())).collect();
    let out = f(&mut g, &vars, labels, tau)?;
    Ok(g.scalar(out))
}

pub fn ratr_intra(features: &[Mat], labels: &[usize], cfg: &RatrConfig) -> Result<f64> {
    cfg.validate()?;
    eval_plain(features, labels, cfg.tau, ratr_intra_graph)
}

pub fn ratr_inter(features: &[Mat], labels: &[usize], cfg: &RatrConfig) -> Result<f64> {
    cfg.validate()?;
    eval_plain(features, labels, cfg.tau, ratr_inter_graph)
}

pub fn ratr(features: &[Mat], labels: &[usize], cfg: &RatrConfig) -> Result<f64> {
    Ok(ratr_intra(features, labels, cfg)? + ratr_inter(features, labels, cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ktau_exact;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dktau_examples() {
        assert_eq!(dktau(&[0.3, 0.3, 0.3], &[1.0, 5.0, 2.0], 0.1).unwrap(), 0.0);
        let x = [0.0, 2.0, 4.0, 6.0];
        assert!((dktau(&x, &x, 0.1).unwrap() - 1.0).abs() < 1e-6);
        assert!(dktau(&[1.0], &[1.0], 0.1).is_err());
        assert!(dktau(&[1.0, 2.0], &[1.0], 0.1).is_err());
    }

    #[test]
    fn dktau_approaches_exact_ktau() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let b = rng.random_range(2..10);
            let x: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gap = |v: &[f64]| {
                let mut m = f64::INFINITY;
                for i in 0..b {
                    for j in i + 1..b {
                        m = m.min((v[i] - v[j]).abs());
                    }
                }
                m
            };
            let tau = gap(&x).min(gap(&y)) / 20.0;
            let d = dktau(&x, &y, tau).unwrap();
            assert!((d - ktau_exact(&x, &y).unwrap()).abs() < 1e-3);
        }
    }

    #[test]
    fn cosine_examples() {
        let same = array![[1.0, 2.0], [1.0, 2.0], [2.0, 4.0]];
        let s = cosine_similarity_matrix(&same).unwrap();
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let orth = array![[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 0.5]];
        assert_eq!(cosine_similarity_matrix(&orth).unwrap(), Mat::eye(3));
        assert!(cosine_similarity_matrix(&array![[0.0, 0.0], [1.0, 1.0]]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Mat::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let s = cosine_similarity_matrix(&f).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let (a, b) = (f.row(i), f.row(j));
                let want = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
                assert!((s[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centroid_examples() {
        let labels = [0, 0, 1, 1, 2, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Mat::from_shape_simple_fn((6, 3), || rng.random_range(-1.0..1.0));
        for k in 0..6 {
            let got = negative_centroid_similarities(&f, k, &labels).unwrap();
            let negs: Vec<usize> = [0, 1, 2].into_iter().filter(|&c| c != labels[k]).collect();
            assert_eq!(got.len(), 2);
            for (t, &c) in negs.iter().enumerate() {
                let centroid = (&f.row(2 * c) + &f.row(2 * c + 1)) / 2.0;
                let a = f.row(k);
                let want = a.dot(&centroid) / (a.dot(&a).sqrt() * centroid.dot(&centroid).sqrt());
                assert!((got[t] - want).abs() < 1e-12);
            }
        }
        let two = negative_centroid_similarities(&f.slice(ndarray::s![..4, ..]).to_owned(), 0, &labels[..4]).unwrap();
        assert_eq!(two.len(), 1);
        // identical members: centroid equals the member
        let mut g = f.clone();
        let r = g.row(2).to_owned();
        g.row_mut(3).assign(&r);
        let s = negative_centroid_similarities(&g, 0, &labels).unwrap();
        let pair = cosine_similarity_matrix(&g).unwrap()[[0, 2]];
        assert!((s[0] - pair).abs() < 1e-12);
    }

    fn brute_force(features: &[Mat], labels: &[usize], tau: f64, inter: bool) -> f64 {
        let gc = features.len();
        let views: Vec<SimilarityView> = features.iter().map(|f| SimilarityView::new(f, labels).unwrap()).collect();
        let mut total = 0.0;
        for k in 0..labels.len() {
            for i in 0..gc {
                for j in i + 1..gc {
                    let (x, y) = if inter {
                        (views[i].negative_centroids[k].clone(), views[j].negative_centroids[k].clone())
                    } else {
                        (views[i].positive_sequence(k), views[j].positive_sequence(k))
                    };
                    if x.len() >= 2 {
                        total += dktau(&x, &y, tau).unwrap() / (gc * (gc - 1) / 2) as f64;
                    }
                }
            }
        }
        total / labels.len() as f64
    }

    #[test]
    fn ratr_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = RatrConfig::default();
        let labels = [0, 0, 0, 1, 1, 1];
        let feats: Vec<Mat> = (0..2).map(|_| Mat::from_shape_simple_fn((6, 5), || rng.random_range(-1.0..1.0))).collect();
        let intra = ratr_intra(&feats, &labels, &cfg).unwrap();
        assert!((intra - brute_force(&feats, &labels, 0.1, false)).abs() < 1e-12);

        let labels = [0, 0, 1, 1, 2, 2, 3, 3];
        let feats: Vec<Mat> = (0..2).map(|_| Mat::from_shape_simple_fn((8, 5), || rng.random_range(-1.0..1.0))).collect();
        let inter = ratr_inter(&feats, &labels, &cfg).unwrap();
        assert!((inter - brute_force(&feats, &labels, 0.1, true)).abs() < 1e-12);
        let total = ratr(&feats, &labels, &cfg).unwrap();
        let intra = ratr_intra(&feats, &labels, &cfg).unwrap();
        assert!((total - intra - inter).abs() < 1e-15);
    }

    #[test]
    fn ratr_degenerate_cases() {
        let cfg = RatrConfig::default();
        let labels = [0, 0, 1, 1];
        let f = array![[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.2, 1.0]];
        assert_eq!(ratr_intra(&[f.clone()], &labels, &cfg).unwrap(), 0.0);
        assert_eq!(ratr(&[f.clone()], &labels, &cfg).unwrap(), 0.0);
        assert!(ratr_inter(&[f.clone(), f.clone()], &labels, &cfg).is_err());
        assert!(ratr_intra(&[f.clone(), f.clone()], &[0, 1, 2, 3], &cfg).is_err());
    }

    #[test]
    fn identical_and_reversed_branches() {
        // features built so similarity gaps are far larger than tau
        let cfg = RatrConfig { tau: 1e-3, rho: 1.0 };
        let labels = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let f = Mat::from_shape_simple_fn((12, 6), || rng.random_range(-1.0..1.0));
        let intra = ratr_intra(&[f.clone(), f.clone()], &labels, &cfg).unwrap();
        assert!((intra - 1.0).abs() < 1e-2);
        let labels4: Vec<usize> = (0..12).map(|i| i / 3).collect();
        let inter = ratr_inter(&[f.clone(), f.clone()], &labels4, &cfg).unwrap();
        assert!((inter - 1.0).abs() < 1e-2);
    }
}
