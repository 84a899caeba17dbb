//! Multi-granularity feature extraction.
//!
//! Branch `g` takes the shared trunk output, fuses each run of `2^g` adjacent
//! class tokens into one, re-spreads the fused tokens among the image tokens,
//! runs two branch-owned blocks and reduces the surviving class tokens into a
//! feature of `M·D/r` dimensions (the per-row reduction factor is `r/2^g`).

use std::rc::Rc;

use rand::{Rng, RngCore};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::layout::{batched_positions, interleave_index, sequence_layout, TokenSequence};
use crate::nn::{LayerNorm, Linear, Mode};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{run_blocks, BiMbBlock, SsmConfig};

/// Lower clamp applied before the generalized-mean power.
pub const GEM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Min,
    Max,
    Avg,
    Gem,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            "avg" | "mean" => Ok(Self::Avg),
            "gem" => Ok(Self::Gem),
            other => Err(Error::Config(format!("unknown fusion op `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Min => "min",
            Self::Max => "max",
            Self::Avg => "avg",
            Self::Gem => "gem",
        })
    }
}

/// Fusion operator with its (possibly learnable) generalized-mean power.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionOp {
    pub kind: FusionKind,
    pub gem_power: f64,
}

impl FusionOp {
    pub fn new(kind: FusionKind) -> Self {
        Self { kind, gem_power: 3.0 }
    }
}

impl Graph {
    /// Reduces each run of `group` consecutive rows elementwise. `power` is the
    /// `1×1` generalized-mean exponent and is required for [`FusionKind::Gem`].
    /// Groups of one pass `x` through unchanged.
    pub fn group_reduce(&mut self, x: Var, group: usize, kind: FusionKind, power: Option<Var>) -> Var {
        if group == 1 {
            return x;
        }
        let xv = self.value(x);
        let (rows, d) = xv.dim();
        assert!(group >= 1 && rows % group == 0, "group_reduce: rows not divisible by group");
        let out_rows = rows / group;
        let p = power.map(|p| self.value(p)[[0, 0]]);
        let mut y = Mat::zeros((out_rows, d));
        // winner[o*d + c] = source row chosen by min/max
        let mut winner = vec![0usize; out_rows * d];
        for o in 0..out_rows {
            for c in 0..d {
                let vals = (0..group).map(|k| (o * group + k, xv[[o * group + k, c]]));
                y[[o, c]] = match kind {
                    FusionKind::Max | FusionKind::Min => {
                        let better = |a: f64, b: f64| if kind == FusionKind::Max { a > b } else { a < b };
                        let mut best = (o * group, xv[[o * group, c]]);
                        for (r, v) in vals.skip(1) {
                            if better(v, best.1) {
                                best = (r, v);
                            }
                        }
                        winner[o * d + c] = best.0;
                        best.1
                    }
                    FusionKind::Avg => vals.map(|(_, v)| v).sum::<f64>() / group as f64,
                    FusionKind::Gem => {
                        let p = p.expect("gem needs a power");
                        let m = vals.map(|(_, v)| v.max(GEM_EPS).powf(p)).sum::<f64>() / group as f64;
                        m.powf(1.0 / p)
                    }
                };
            }
        }
        let mut parents = vec![x];
        if let (FusionKind::Gem, Some(pv)) = (kind, power) {
            parents.push(pv);
        }
        self.custom(
            y,
            parents,
            Box::new(move |ctx| {
                let (x, y, gy) = (ctx.inputs[0], ctx.output, ctx.grad);
                let mut gx = Mat::zeros(x.raw_dim());
                let mut gp = 0.0;
                for o in 0..out_rows {
                    for c in 0..d {
                        let g = gy[[o, c]];
                        match kind {
                            FusionKind::Max | FusionKind::Min => gx[[winner[o * d + c], c]] += g,
                            FusionKind::Avg => {
                                for k in 0..group {
                                    gx[[o * group + k, c]] += g / group as f64;
                                }
                            }
                            FusionKind::Gem => {
                                let p = ctx.inputs[1][[0, 0]];
                                let yv = y[[o, c]];
                                let m = yv.powf(p);
                                let mut dm_dp = 0.0;
                                for k in 0..group {
                                    let xv = x[[o * group + k, c]];
                                    let cl = xv.max(GEM_EPS);
                                    if xv > GEM_EPS {
                                        gx[[o * group + k, c]] += g * yv / m * cl.powf(p - 1.0) / group as f64;
                                    }
                                    dm_dp += cl.powf(p) * cl.ln() / group as f64;
                                }
                                gp += g * yv * (-m.ln() / (p * p) + dm_dp / (p * m));
                            }
                        }
                    }
                }
                let mut out = vec![Some(gx)];
                if ctx.inputs.len() == 2 {
                    out.push(Some(Mat::from_elem((1, 1), gp)));
                }
                out
            }),
        )
    }
}

/// Gathers class rows and image rows of a sequence, each in position order.
pub fn split_tokens(z: &TokenSequence) -> (Mat, Mat) {
    let gather = |pos: &[usize]| {
        let mut m = Mat::zeros((pos.len(), z.data.ncols()));
        for (i, &p) in pos.iter().enumerate() {
            m.row_mut(i).assign(&z.data.row(p));
        }
        m
    };
    (gather(&z.class_positions), gather(&z.image_positions))
}

pub fn fuse_class_tokens(class_tokens: &Mat, g: usize, op: FusionOp) -> Result<Mat> {
    let group = 1usize << g;
    if class_tokens.nrows() % group != 0 {
        return Err(Error::Config(format!(
            "{} class tokens cannot be fused in groups of {group}",
            class_tokens.nrows()
        )));
    }
    if op.kind == FusionKind::Gem && !(op.gem_power > 0.0) {
        return Err(Error::Config("generalized-mean power must be positive".into()));
    }
    let mut graph = Graph::new();
    let x = graph.constant(class_tokens.clone());
    let p = graph.constant(Mat::from_elem((1, 1), op.gem_power));
    let y = graph.group_reduce(x, group, op.kind, Some(p));
    Ok(graph.value(y).clone())
}

/// Evenly spreads `class_tokens` among `image_tokens`; no embeddings are added.
pub fn reinterleave_tokens(class_tokens: &Mat, image_tokens: &Mat) -> Result<TokenSequence> {
    let (m, n) = (class_tokens.nrows(), image_tokens.nrows());
    if class_tokens.ncols() != image_tokens.ncols() {
        return Err(Error::Shape("class and image token widths differ".into()));
    }
    let (class_positions, image_positions) = sequence_layout(m, n)?;
    let mut data = Mat::zeros((m + n, class_tokens.ncols()));
    for (j, &p) in class_positions.iter().enumerate() {
        data.row_mut(p).assign(&class_tokens.row(j));
    }
    for (i, &p) in image_positions.iter().enumerate() {
        data.row_mut(p).assign(&image_tokens.row(i));
    }
    Ok(TokenSequence {
        data,
        class_positions,
        image_positions,
        spacing: n / (m + 1),
    })
}

/// Final normalization applied to a branch feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureNorm {
    /// Layer normalization only: the training-time feature.
    Layer,
    /// Layer normalization followed by unit-L2 scaling: the retrieval feature.
    L2,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub index: usize,
    pub fusion: FusionKind,
    pub gem_power: Option<ParamId>,
    /// `M/2^g`
    pub class_count: usize,
    /// Width of each reduced class token, `D·2^g/r`.
    pub token_dim: usize,
    pub blocks: Vec<BiMbBlock>,
    pub token_norm: LayerNorm,
    pub reduce: Linear,
    pub feature_norm: LayerNorm,
}

impl Branch {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        index: usize,
        num_class_tokens: usize,
        reduction: usize,
        fusion: FusionKind,
        ssm: &SsmConfig,
        drop_rate: f64,
    ) -> Result<Self> {
        let factor = 1usize << index;
        if num_class_tokens % factor != 0 {
            return Err(Error::Config(format!(
                "branch {index}: M={num_class_tokens} must be divisible by {factor}"
            )));
        }
        let d = ssm.d_model;
        // reduction factor r/2^g may drop below 1, widening the tokens
        if reduction == 0 || (d * factor) % reduction != 0 {
            return Err(Error::Config(format!(
                "branch {index}: D·2^g={} not divisible by r={reduction}",
                d * factor
            )));
        }
        let token_dim = d * factor / reduction;
        let m_g = num_class_tokens / factor;
        let name = format!("branch.{index}");
        let blocks = (0..2)
            .map(|k| BiMbBlock::new(store, rng, &format!("{name}.block.{k}"), ssm, drop_rate))
            .collect();
        let gem_power = (fusion == FusionKind::Gem && index > 0)
            .then(|| store.add(format!("{name}.gem_p"), Mat::from_elem((1, 1), 3.0)));
        Ok(Self {
            index,
            fusion,
            gem_power,
            class_count: m_g,
            token_dim,
            blocks,
            token_norm: LayerNorm::new(store, &format!("{name}.token_norm"), d),
            reduce: Linear::new(store, rng, &format!("{name}.reduce"), d, token_dim, true, 1.0 / (d as f64).sqrt()),
            feature_norm: LayerNorm::new(store, &format!("{name}.feature_norm"), m_g * token_dim),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.class_count * self.reduce.out_dim
    }

    /// Split → fuse → re-interleave → two blocks → class rows. `z_shared`
    /// stacks `batch` sequences of `m + n` rows; the result stacks `batch`
    /// blocks of `M/2^g` class rows.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_shared: Var,
        m: usize,
        n: usize,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let t = m + n;
        let rows = g.value(z_shared).nrows();
        if rows % t != 0 {
            return Err(Error::Shape("shared tokens not a multiple of sequence length".into()));
        }
        let batch = rows / t;
        let (class_pos, image_pos) = sequence_layout(m, n)?;
        let cls = g.gather_rows(z_shared, Rc::new(batched_positions(&class_pos, t, batch)));
        let img = g.gather_rows(z_shared, Rc::new(batched_positions(&image_pos, t, batch)));
        let power = self.gem_power.map(|p| g.param(store, p));
        let fused = g.group_reduce(cls, 1 << self.index, self.fusion, power);
        let m_g = self.class_count;
        let joined = g.concat_rows(&[img, fused]);
        let idx = interleave_index(m_g, n, batch, |b, i| b * n + i, |b, j| batch * n + b * m_g + j)?;
        let seq = g.gather_rows(joined, Rc::new(idx));
        let t_g = m_g + n;
        let out = run_blocks(g, store, &self.blocks, seq, t_g, mode, rng)?;
        let (class_g, _) = sequence_layout(m_g, n)?;
        Ok(g.gather_rows(out, Rc::new(batched_positions(&class_g, t_g, batch))))
    }

    /// Normalize rows → shared reduction → concatenate → normalize.
    /// `z_lg` stacks `batch` blocks of class rows; output is `batch × M·D/r`.
    pub fn feature_graph(&self, g: &mut Graph, store: &ParamStore, z_lg: Var, norm: FeatureNorm) -> Result<Var> {
        let (rows, d) = g.value(z_lg).dim();
        if d != self.reduce.in_dim || rows % self.class_count != 0 {
            return Err(Error::Shape(format!(
                "branch {} expects blocks of {}x{}, got {rows}x{d}",
                self.index, self.class_count, self.reduce.in_dim
            )));
        }
        if g.value(z_lg).rows().into_iter().any(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Degenerate("cannot normalize an all-zero class token".into()));
        }
        let batch = rows / self.class_count;
        let xn = self.token_norm.forward(g, store, z_lg);
        let red = self.reduce.forward(g, store, xn);
        let flat = g.reshape(red, batch, self.feature_dim());
        let f = self.feature_norm.forward(g, store, flat);
        Ok(match norm {
            FeatureNorm::Layer => f,
            FeatureNorm::L2 => g.l2_normalize_rows(f),
        })
    }
}

/// Runs one branch on a single shared sequence, returning its `M/2^g × D` class rows.
pub fn branch_forward(
    z_shared: &TokenSequence,
    store: &ParamStore,
    branch: &Branch,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Mat> {
    let mut g = Graph::new();
    let z = g.constant(z_shared.data.clone());
    let out = branch.forward_graph(&mut g, store, z, z_shared.num_class(), z_shared.num_image(), mode, rng)?;
    Ok(g.value(out).clone())
}

pub fn extract_branch_feature(z_lg: &Mat, store: &ParamStore, branch: &Branch, norm: FeatureNorm) -> Result<Vec<f64>> {
    if z_lg.nrows() != branch.class_count {
        return Err(Error::Shape(format!(
            "expected {} class rows, got {}",
            branch.class_count,
            z_lg.nrows()
        )));
    }
    let mut g = Graph::new();
    let z = g.constant(z_lg.clone());
    let f = branch.feature_graph(&mut g, store, z, norm)?;
    Ok(g.value(f).iter().copied().collect())
}
