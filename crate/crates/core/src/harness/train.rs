//! Training loop, inference and evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat};
use crate::error::{Error, Result};
use crate::layout::Image;
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::metrics::{branch_diversity_report, evaluate_map_cmc, LabeledFeatures, RankedGallery};
use crate::mgfe::FeatureNorm;
use crate::model::ReIdMamba;
use crate::nn::Mode;

use super::config::TrainConfig;
use super::data::{augment, generate_synthetic_dataset, hflip, AugmentConfig, PkSampler, Split, SynthDataset};
use super::optim::{lr_schedule, Schedule, Sgd};

/// Environment variable naming the directory for run artifacts.
pub const OUTPUT_DIR_ENV: &str = "REIDMAMBA_OUTPUT_DIR";

pub fn output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub const METRICS_HEADER: &str =
    "step,lr,loss_total,loss_id,loss_tri,loss_ratr_intra,loss_ratr_inter,mAP,r1,ktau_intra,ktau_inter";

/// One optimizer step on a labelled batch. BNNeck running statistics are
/// updated after the parameter update. A non-finite loss aborts the step
/// before any parameter changes.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut ReIdMamba,
    opt: &mut Sgd,
    images: &[&Image],
    cameras: &[usize],
    labels: &[usize],
    loss_cfg: &LossConfig,
    lr: f64,
    rng: &mut dyn RngCore,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let fv = model.forward_graph(&mut g, images, cameras, Mode::Train, rng)?;
    let (loss, breakdown) = total_loss(&mut g, &fv.features, &fv.logits, labels, loss_cfg)?;
    if !breakdown.is_finite() {
        let dump: Vec<String> = breakdown
            .records()
            .iter()
            .map(|r| match r.branch {
                Some(b) => format!("{}[{b}]={}", r.term, r.value),
                None => format!("{}={}", r.term, r.value),
            })
            .collect();
        return Err(Error::NonFinite(format!("loss: {}", dump.join(" "))));
    }
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads);
    if let Some((id, _)) = pg.iter().find(|(_, m)| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of `{}`", model.store.get(*id).name)));
    }
    opt.step(&mut model.store, &pg, lr);
    model.update_running_stats(&fv.stats);
    Ok(breakdown)
}

#[derive(Clone, Debug)]
pub struct InferredFeatures {
    /// Concatenated per-branch unit vectors, one row per image.
    pub concat: Mat,
    /// Unit-normalized flip-averaged features of each branch.
    pub branches: Vec<Mat>,
}

const INFER_CHUNK: usize = 64;

fn l2_rows(m: &mut Mat) -> Result<()> {
    for (i, mut r) in m.rows_mut().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Degenerate(format!("feature row {i} cannot be normalized")));
        }
        r /= n;
    }
    Ok(())
}

/// Eval-mode features averaged with the horizontally flipped image, then
/// L2-normalized per branch and concatenated. Each image is processed
/// independently of the others in the batch.
pub fn infer_batch(model: &ReIdMamba, images: &[&Image], cameras: &[usize]) -> Result<InferredFeatures> {
    if images.len() != cameras.len() || images.is_empty() {
        return Err(Error::Shape("need one camera id per image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut per_branch: Vec<Vec<Mat>> = vec![Vec::new(); model.cfg.branches];
    for (imgs, cams) in images.chunks(INFER_CHUNK).zip(cameras.chunks(INFER_CHUNK)) {
        let flipped: Vec<Image> = imgs.iter().map(|im| hflip(im)).collect();
        let both: Vec<&Image> = imgs.iter().copied().chain(flipped.iter()).collect();
        let cams2: Vec<usize> = cams.iter().chain(cams).copied().collect();
        let mut g = Graph::new();
        let patches = g.constant(model.patch_matrix(&both)?);
        let feats = model.features_graph(&mut g, patches, &cams2, Mode::Eval, FeatureNorm::Layer, &mut rng)?;
        let n = imgs.len();
        for (slot, f) in per_branch.iter_mut().zip(feats) {
            let v = g.value(f);
            let mut avg = (&v.slice(ndarray::s![..n, ..]) + &v.slice(ndarray::s![n.., ..])) * 0.5;
            l2_rows(&mut avg)?;
            slot.push(avg);
        }
    }
    let branches = per_branch
        .into_iter()
        .map(|parts| {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = branches.iter().map(|b| b.view()).collect();
    let concat = concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(InferredFeatures { concat, branches })
}

/// Retrieval feature of one image; its norm is `sqrt(G)`.
pub fn infer_features(model: &ReIdMamba, image: &Image, camera: usize) -> Result<Vec<f64>> {
    Ok(infer_batch(model, &[image], &[camera])?.concat.row(0).to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Branch agreement over test images; `None` for a single branch.
    pub ktau_intra: Option<f64>,
    pub ktau_inter: Option<f64>,
}

fn labeled(model: &ReIdMamba, split: &Split) -> Result<(LabeledFeatures, Vec<Mat>)> {
    let inf = infer_batch(model, &split.images(), &split.cameras())?;
    Ok((
        LabeledFeatures { features: inf.concat, identities: split.identities(), cameras: split.cameras() },
        inf.branches,
    ))
}

pub fn evaluate(model: &ReIdMamba, data: &SynthDataset) -> Result<EvalReport> {
    let (query, qb) = labeled(model, &data.query)?;
    let (gallery, gb) = labeled(model, &data.gallery)?;
    let mut labels = query.identities.clone();
    labels.extend(&gallery.identities);
    let metrics = evaluate_map_cmc(&RankedGallery { query, gallery }, &[1, 5, 10])?;
    let (ktau_intra, ktau_inter) = if qb.len() >= 2 {
        let joined = qb
            .iter()
            .zip(&gb)
            .map(|(q, g)| concatenate(Axis(0), &[q.view(), g.view()]).map_err(|e| Error::Shape(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let d = branch_diversity_report(&joined, &labels)?;
        (Some(d.intra), Some(d.inter))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        map: metrics.map,
        r1: metrics.cmc_at(1).unwrap_or(0.0),
        r5: metrics.cmc_at(5).unwrap_or(0.0),
        r10: metrics.cmc_at(10).unwrap_or(0.0),
        ktau_intra,
        ktau_inter,
    })
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub eval: Option<EvalReport>,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let e = self.eval.as_ref();
        format!(
            "{},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.step,
            self.lr,
            self.loss.total,
            self.loss.mean_id(),
            self.loss.mean_triplet(),
            self.loss.ratr_intra,
            self.loss.ratr_inter,
            opt(e.map(|e| e.map)),
            opt(e.map(|e| e.r1)),
            opt(e.and_then(|e| e.ktau_intra)),
            opt(e.and_then(|e| e.ktau_inter)),
        )
    }
}

/// CSV sink for per-step metrics.
pub struct MetricsLog {
    out: BufWriter<fs::File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &StepLog) -> Result<()> {
        writeln!(self.out, "{}", row.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ReIdMamba,
    pub data: SynthDataset,
    pub step: usize,
    opt: Sgd,
    sampler: PkSampler,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate_synthetic_dataset(&cfg.data)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: TrainConfig, data: SynthDataset) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = ReIdMamba::new(cfg.model.clone(), &mut rng)?;
        let sampler = PkSampler::new(&data.train.identities(), cfg.batch_p, cfg.batch_k)?;
        Ok(Self {
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            cfg,
            model,
            data,
            step: 0,
            sampler,
            rng,
        })
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_lr: self.cfg.warmup_lr,
            base_lr: self.cfg.base_lr,
            warmup_steps: self.cfg.warmup_steps,
            total_steps: self.cfg.steps,
        }
    }

    pub fn step_once(&mut self) -> Result<StepLog> {
        let lr = lr_schedule(self.step, &self.schedule());
        let idx = self.sampler.next_batch(&mut self.rng);
        let aug = AugmentConfig {
            flip_prob: self.cfg.flip_prob,
            pad: self.cfg.pad,
            erase_prob: self.cfg.erase_prob,
        };
        let samples = &self.data.train.samples;
        let images: Vec<Image> = idx.iter().map(|&i| augment(&samples[i].image, &aug, &mut self.rng)).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let cameras: Vec<usize> = idx.iter().map(|&i| samples[i].camera).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| samples[i].identity).collect();
        let loss = train_step(
            &mut self.model,
            &mut self.opt,
            &refs,
            &cameras,
            &labels,
            &self.cfg.loss,
            lr,
            &mut self.rng,
        )?;
        self.step += 1;
        let due = self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0;
        let eval = if due || self.step == self.cfg.steps {
            Some(evaluate(&self.model, &self.data)?)
        } else {
            None
        };
        Ok(StepLog { step: self.step, lr, loss, eval })
    }

    /// Runs the remaining steps and returns the final evaluation.
    pub fn run(&mut self, mut log: Option<&mut MetricsLog>) -> Result<EvalReport> {
        let mut last = None;
        while self.step < self.cfg.steps {
            let row = self.step_once()?;
            if let Some(l) = log.as_deref_mut() {
                l.write(&row)?;
            }
            if let Some(e) = &row.eval {
                log::info!(
                    "step {} loss {:.4} mAP {:.4} R1 {:.4} ktau_intra {:?}",
                    row.step,
                    row.loss.total,
                    e.map,
                    e.r1,
                    e.ktau_intra
                );
            }
            if row.eval.is_some() {
                last = row.eval;
            }
        }
        match last {
            Some(e) => Ok(e),
            None => evaluate(&self.model, &self.data),
        }
    }
}
