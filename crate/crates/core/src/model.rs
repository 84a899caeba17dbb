//! Full network: embedding, shared trunk, branches and BNNeck heads.

use ndarray::Axis;
use rand::{Rng, RngCore};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::layout::{compute_patch_grid, embed_batch, patchify, EmbedConfig, EmbeddingState, Image};
use crate::losses::{BatchStats, BnNeckHead};
use crate::mgfe::{Branch, FeatureNorm, FusionKind};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::ssm::{Backbone, BackboneMode, SsmConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    /// Total blocks `L` seen by every branch path (`L−2` shared + 2 per branch).
    pub depth: usize,
    pub num_class_tokens: usize,
    pub reduction: usize,
    pub branches: usize,
    pub d_state: usize,
    pub fusion: FusionKind,
    pub drop_rate: f64,
    pub num_cameras: usize,
    pub side_weight: f64,
    pub num_identities: usize,
}

impl ModelConfig {
    /// Small configuration used for CPU training.
    pub fn desk() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            patch_size: 16,
            stride: 16,
            embed_dim: 64,
            depth: 6,
            num_class_tokens: 4,
            reduction: 2,
            branches: 2,
            d_state: 8,
            fusion: FusionKind::Max,
            drop_rate: 0.3,
            num_cameras: 4,
            side_weight: 3.0,
            num_identities: 32,
        }
    }

    /// Full-size shape: 256×128 input, 16-pixel patches, D=384, 24 blocks,
    /// M=12, r=4, G=3.
    pub fn paper_shape() -> Self {
        Self {
            image_height: 256,
            image_width: 128,
            patch_size: 16,
            stride: 16,
            embed_dim: 384,
            depth: 24,
            num_class_tokens: 12,
            reduction: 4,
            branches: 3,
            d_state: 16,
            fusion: FusionKind::Max,
            drop_rate: 0.3,
            num_cameras: 6,
            side_weight: 3.0,
            num_identities: 751,
        }
    }

    pub fn embed(&self) -> EmbedConfig {
        EmbedConfig {
            image_height: self.image_height,
            image_width: self.image_width,
            patch_size: self.patch_size,
            stride: self.stride,
            embed_dim: self.embed_dim,
            num_class_tokens: self.num_class_tokens,
            num_cameras: self.num_cameras,
            side_weight: self.side_weight,
        }
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig::for_width(self.embed_dim, self.d_state)
    }

    /// Dimension of every branch feature, `M·D/r`.
    pub fn branch_feature_dim(&self) -> usize {
        self.num_class_tokens * self.embed_dim / self.reduction
    }

    /// Dimension of the concatenated retrieval feature.
    pub fn feature_dim(&self) -> usize {
        self.branches * self.branch_feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let grid = compute_patch_grid(&self.embed())?;
        if self.depth < 3 {
            return Err(Error::Config("need at least 3 blocks (L-2 shared + 2 per branch)".into()));
        }
        if self.branches == 0 {
            return Err(Error::Config("need at least one branch".into()));
        }
        let top = 1usize << (self.branches - 1);
        if self.num_class_tokens % top != 0 {
            return Err(Error::Config(format!(
                "M={} must be divisible by 2^(G-1)={top}",
                self.num_class_tokens
            )));
        }
        if self.reduction == 0 || self.embed_dim % self.reduction != 0 {
            return Err(Error::Config("D must be divisible by r".into()));
        }
        if self.num_class_tokens >= grid.count {
            return Err(Error::Config(format!(
                "M={} must be smaller than the patch count {}",
                self.num_class_tokens, grid.count
            )));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config("drop rate must be in [0,1)".into()));
        }
        if self.num_identities < 2 || self.d_state == 0 {
            return Err(Error::Config("need >= 2 identities and a positive state size".into()));
        }
        Ok(())
    }
}

/// Per-branch outputs for a batch.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// Raw (layer-normalized) features `f^(g)`, one `batch × M·D/r` matrix per branch.
    pub features: Vec<Mat>,
    pub bn_features: Vec<Mat>,
    pub logits: Vec<Mat>,
}

/// Graph handles from a forward pass through model and heads.
pub struct ForwardVars {
    pub features: Vec<Var>,
    pub bn_features: Vec<Var>,
    pub logits: Vec<Var>,
    pub stats: Vec<Option<BatchStats>>,
}

#[derive(Clone, Debug)]
pub struct ReIdMamba {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbeddingState,
    pub backbone: Backbone,
    pub branches: Vec<Branch>,
    pub heads: Vec<BnNeckHead>,
}

impl ReIdMamba {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let embed = EmbeddingState::new(&mut store, rng, &cfg.embed())?;
        let ssm = cfg.ssm();
        let backbone = Backbone::new(&mut store, rng, &ssm, cfg.depth - 2, cfg.drop_rate, BackboneMode::Shared)?;
        let branches = (0..cfg.branches)
            .map(|g| {
                Branch::new(
                    &mut store,
                    rng,
                    g,
                    cfg.num_class_tokens,
                    cfg.reduction,
                    cfg.fusion,
                    &ssm,
                    cfg.drop_rate,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = (0..cfg.branches)
            .map(|g| BnNeckHead::new(&mut store, rng, &format!("head.{g}"), cfg.branch_feature_dim(), cfg.num_identities))
            .collect();
        Ok(Self {
            cfg,
            store,
            embed,
            backbone,
            branches,
            heads,
        })
    }

    /// Stacked flattened patches of a batch.
    pub fn patch_matrix(&self, images: &[&Image]) -> Result<Mat> {
        let ecfg = self.cfg.embed();
        let parts = images.iter().map(|im| patchify(im, &ecfg)).collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Per-branch features (`batch × M·D/r`) for stacked patches.
    pub fn features_graph(
        &self,
        g: &mut Graph,
        patches: Var,
        cameras: &[usize],
        mode: Mode,
        norm: FeatureNorm,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Var>> {
        let m = self.cfg.num_class_tokens;
        let tokens = embed_batch(g, &self.store, &self.embed, &self.cfg.embed(), patches, cameras)?;
        let t = g.value(tokens).nrows() / cameras.len();
        let n = t - m;
        let depth = self.backbone.depth();
        let shared = self.backbone.forward(g, &self.store, tokens, t, depth, mode, rng)?;
        let mut out = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let z = branch.forward_graph(g, &self.store, shared, m, n, mode, rng)?;
            out.push(branch.feature_graph(g, &self.store, z, norm)?);
        }
        Ok(out)
    }

    /// Features, BNNeck outputs and logits for every branch.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        images: &[&Image],
        cameras: &[usize],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardVars> {
        if images.len() != cameras.len() || images.is_empty() {
            return Err(Error::Shape("need one camera id per image".into()));
        }
        let patches = self.patch_matrix(images)?;
        let pv = g.constant(patches);
        let features = self.features_graph(g, pv, cameras, mode, FeatureNorm::Layer, rng)?;
        let mut fv = ForwardVars {
            features: features.clone(),
            bn_features: Vec::new(),
            logits: Vec::new(),
            stats: Vec::new(),
        };
        for (f, head) in features.into_iter().zip(&self.heads) {
            let out = head.forward(g, &self.store, f, mode)?;
            fv.bn_features.push(out.bn);
            fv.logits.push(out.logits);
            fv.stats.push(out.stats);
        }
        Ok(fv)
    }

    pub fn forward(&self, images: &[&Image], cameras: &[usize], mode: Mode, rng: &mut dyn RngCore) -> Result<FeatureBundle> {
        let mut g = Graph::new();
        let fv = self.forward_graph(&mut g, images, cameras, mode, rng)?;
        let grab = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect();
        Ok(FeatureBundle {
            features: grab(&fv.features),
            bn_features: grab(&fv.bn_features),
            logits: grab(&fv.logits),
        })
    }

    /// Applies batch statistics gathered in a train-mode pass.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (head, s) in self.heads.iter().zip(stats) {
            if let Some(s) = s {
                head.update_running(&mut self.store, s);
            }
        }
    }
}

/// Single-image forward.
pub fn model_forward(
    image: &Image,
    model: &ReIdMamba,
    camera_id: usize,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<FeatureBundle> {
    model.forward(&[image], &[camera_id], mode, rng)
}
