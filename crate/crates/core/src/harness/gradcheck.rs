//! Finite-difference gradient checks for the differentiable components.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::layout::Image;
use crate::losses::{total_loss, LossConfig};
use crate::mgfe::FusionKind;
use crate::model::{ModelConfig, ReIdMamba};
use crate::nn::{Linear, Mode};
use crate::params::{normal, ParamStore};
use crate::ssm::{BiMbBlock, Direction, SsmConfig};

pub const SELECTORS: [&str; 7] = ["linear", "dktau", "ratr", "triplet", "scan", "bimb", "model"];

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Lower bound on the denominator of the relative error, so groups whose true
/// gradient is ~0 are judged on absolute error instead of rounding noise.
pub const NORM_FLOOR: f64 = 1e-6;
/// Coordinates sampled per parameter tensor.
pub const COORDS_PER_TENSOR: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub selector: String,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupCheck> {
        self.groups.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

/// Compares the analytic gradient of a scalar objective against central
/// differences, for every trainable tensor in `store`.
pub fn check_store<F>(selector: &str, store: &ParamStore, rng: &mut impl Rng, objective: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = objective(&mut g, store)?;
    let loss_val = g.scalar(loss);
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("{selector} objective")));
    }
    let grads = g.backward(loss);
    let analytic = g.param_grads(&grads);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = objective(&mut g, s)?;
        Ok(g.scalar(v))
    };
    let mut work = store.clone();
    let mut groups = Vec::new();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let grad = analytic.iter().find(|(i, _)| *i == id).map(|(_, m)| m.clone());
        let grad = grad.unwrap_or_else(|| Mat::zeros(p.value.dim()));
        let total = p.value.len();
        let picks = sample(rng, total, total.min(COORDS_PER_TENSOR)).into_vec();
        let cols = p.value.ncols();
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for flat in picks {
            let (r, c) = (flat / cols, flat % cols);
            let orig = p.value[[r, c]];
            work.value_mut(id)[[r, c]] = orig + FD_STEP;
            let up = eval(&work)?;
            work.value_mut(id)[[r, c]] = orig - FD_STEP;
            let down = eval(&work)?;
            work.value_mut(id)[[r, c]] = orig;
            a.push(grad[[r, c]]);
            n.push((up - down) / (2.0 * FD_STEP));
        }
        groups.push(GroupCheck { name: p.name.clone(), rel_error: relative_error(&a, &n), checked: a.len() });
    }
    Ok(GradcheckReport { selector: selector.to_string(), groups })
}

/// Fixed random projection to a scalar: `Σ out ⊙ R`.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let dim = g.value(out).dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(normal(&mut rng, dim.0, dim.1, 1.0));
    let prod = g.mul(out, r);
    g.sum(prod)
}

/// Adds Gaussian noise to every trainable tensor except the state matrices, so
/// that small initial scales do not hide gradient errors.
fn roughen(store: &mut ParamStore, rng: &mut impl Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        if !p.trainable || p.name.ends_with("a_log") {
            continue;
        }
        let (r, c) = p.value.dim();
        let noise = normal(rng, r, c, std);
        *store.value_mut(id) += &noise;
    }
}

fn labels_pk(p: usize, k: usize) -> Vec<usize> {
    (0..p * k).map(|i| i / k).collect()
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 8,
        patch_size: 4,
        stride: 4,
        embed_dim: 8,
        depth: 3,
        num_class_tokens: 4,
        reduction: 2,
        branches: 2,
        d_state: 3,
        fusion: FusionKind::Gem,
        drop_rate: 0.3,
        num_cameras: 2,
        side_weight: 3.0,
        num_identities: 3,
    }
}

pub fn run_gradcheck(selector: &str, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match selector {
        "linear" => {
            let lin = Linear::new(&mut store, &mut rng, "linear", 5, 4, true, 0.5);
            let x = store.add("x", normal(&mut rng, 3, 5, 1.0));
            roughen(&mut store, &mut rng, 0.1);
            check_store(selector, &store, &mut rng, |g, s| {
                let xv = g.param(s, x);
                let y = lin.forward(g, s, xv);
                Ok(project(g, y, seed))
            })
        }
        "dktau" => {
            let ids: Vec<_> = (0..3).map(|i| store.add(format!("sims.{i}"), normal(&mut rng, 4, 5, 1.0))).collect();
            let cols = Rc::new(vec![vec![0, 1, 2, 3, 4], vec![1, 3, 4], vec![0, 2], vec![4, 3, 2, 1]]);
            check_store(selector, &store, &mut rng, |g, s| {
                let sims: Vec<Var> = ids.iter().map(|&i| g.param(s, i)).collect();
                Ok(g.rank_agreement(&sims, Rc::clone(&cols), 0.5))
            })
        }
        "ratr" => {
            let labels = labels_pk(4, 3);
            let ids: Vec<_> = (0..3).map(|i| store.add(format!("f.{i}"), normal(&mut rng, 12, 4, 1.0))).collect();
            check_store(selector, &store, &mut rng, |g, s| {
                let f: Vec<Var> = ids.iter().map(|&i| g.param(s, i)).collect();
                let a = crate::losses::ranking::ratr_intra_graph(g, &f, &labels, 0.5)?;
                let b = crate::losses::ranking::ratr_inter_graph(g, &f, &labels, 0.5)?;
                Ok(g.add(a, b))
            })
        }
        "triplet" => {
            let labels = Rc::new(labels_pk(3, 3));
            let f = store.add("f", normal(&mut rng, 9, 4, 0.5));
            check_store(selector, &store, &mut rng, |g, s| {
                let fv = g.param(s, f);
                g.batch_hard_triplet(fv, Rc::clone(&labels), 1.2)
            })
        }
        "scan" => {
            let (t, d, n) = (5, 3, 4);
            let rows = 2 * t;
            let u = store.add("u", normal(&mut rng, rows, d, 1.0));
            let delta = store.add("delta", Mat::from_shape_simple_fn((rows, d), || rng.random_range(0.2..1.0)));
            let a = store.add("a", Mat::from_shape_simple_fn((d, n), || -rng.random_range(0.3..1.5)));
            let b = store.add("b", normal(&mut rng, rows, n, 1.0));
            let c = store.add("c", normal(&mut rng, rows, n, 1.0));
            let dk = store.add("d_skip", normal(&mut rng, 1, d, 1.0));
            check_store(selector, &store, &mut rng, |g, s| {
                let [u, delta, a, b, c, dk] = [u, delta, a, b, c, dk].map(|i| g.param(s, i));
                let yf = g.selective_scan(u, delta, a, b, c, dk, t, Direction::Forward);
                let yb = g.selective_scan(u, delta, a, b, c, dk, t, Direction::Backward);
                let y = g.add(yf, yb);
                Ok(project(g, y, seed))
            })
        }
        "bimb" => {
            let cfg = SsmConfig::for_width(6, 3);
            let block = BiMbBlock::new(&mut store, &mut rng, "block", &cfg, 0.3);
            let x = store.add("x", normal(&mut rng, 8, 6, 1.0));
            roughen(&mut store, &mut rng, 0.3);
            let draws = [0.9, 0.1];
            check_store(selector, &store, &mut rng, |g, s| {
                let xv = g.param(s, x);
                let y = block.forward(g, s, xv, 4, Mode::Train, &draws);
                Ok(project(g, y, seed))
            })
        }
        "model" => {
            let cfg = tiny_model_config();
            let mut model = ReIdMamba::new(cfg.clone(), &mut rng)?;
            roughen(&mut model.store, &mut rng, 0.1);
            let store = model.store.clone();
            let images: Vec<Image> = (0..6)
                .map(|_| Image::from_shape_simple_fn((cfg.image_height, cfg.image_width, 3), || rng.random_range(-1.0..1.0)))
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let cameras = [0, 1, 1, 0, 0, 1];
            let labels = labels_pk(3, 2);
            let loss_cfg = LossConfig::default();
            check_store(selector, &store, &mut rng, |g, s| {
                let mut model = model.clone();
                model.store = s.clone();
                let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD5);
                let fv = model.forward_graph(g, &refs, &cameras, Mode::Train, &mut drop_rng as &mut dyn RngCore)?;
                Ok(total_loss(g, &fv.features, &fv.logits, &labels, &loss_cfg)?.0)
            })
        }
        other => Err(Error::UnknownSelector(other.to_string())),
    }
}
