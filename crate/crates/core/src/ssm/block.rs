use ndarray::Array2;
use rand::{Rng, RngCore};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::layout::TokenSequence;
use crate::nn::{LayerNorm, Linear, Mode};
use crate::params::{uniform, ParamId, ParamStore};

use super::scan::Direction;

#[derive(Clone, Debug, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
}

impl SsmConfig {
    /// Mamba defaults: expansion 2, `dt_rank = ⌈D/16⌉`, conv width 4.
    pub fn for_width(d_model: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state,
            dt_rank: d_model.div_ceil(16),
            conv_width: 4,
        }
    }
}

/// One direction's selective-SSM parameters.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    /// `D_inner → dt_rank + 2n` producing the low-rank step input, `B_t` and `C_t`.
    pub x_proj: Linear,
    /// `dt_rank → D_inner` with bias, followed by softplus.
    pub dt_proj: Linear,
    /// `D_inner×n`, `A = −exp(A_log)`.
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl SsmParams {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &SsmConfig) -> Self {
        let (di, n, rank, k) = (cfg.d_inner, cfg.d_state, cfg.dt_rank, cfg.conv_width);
        let conv_weight = store.add(
            format!("{name}.conv.weight"),
            uniform(rng, k, di, 1.0 / (k as f64).sqrt()),
        );
        let conv_bias = store.add(format!("{name}.conv.bias"), Mat::zeros((1, di)));
        let x_proj = Linear::new(
            store,
            rng,
            &format!("{name}.x_proj"),
            di,
            rank + 2 * n,
            false,
            1.0 / (di as f64).sqrt(),
        );
        let dt_proj = Linear::new(store, rng, &format!("{name}.dt_proj"), rank, di, true, 0.0);
        *store.value_mut(dt_proj.weight) = uniform(rng, rank, di, 1.0 / (rank as f64).sqrt());
        // softplus(bias) log-uniform in [1e-3, 1e-1]
        let bias = Array2::from_shape_simple_fn((1, di), || {
            let dt: f64 = (rng.random_range(0.0..1.0) * (0.1f64.ln() - 0.001f64.ln()) + 0.001f64.ln()).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        *store.value_mut(dt_proj.bias.expect("dt bias")) = bias;
        let a_log = store.add(
            format!("{name}.a_log"),
            Array2::from_shape_fn((di, n), |(_, s)| ((s + 1) as f64).ln()),
        );
        let d_skip = store.add(format!("{name}.d_skip"), Mat::ones((1, di)));
        Self {
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj,
            a_log,
            d_skip,
        }
    }

    /// conv → SiLU → selective scan, in the given direction.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &SsmConfig,
        x: Var,
        seq_len: usize,
        direction: Direction,
    ) -> Var {
        let w = g.param(store, self.conv_weight);
        let b = g.param(store, self.conv_bias);
        let xc = g.depthwise_conv(x, w, b, seq_len, direction);
        let u = g.silu(xc);
        let proj = self.x_proj.forward(g, store, u);
        let (rank, n) = (cfg.dt_rank, cfg.d_state);
        let dt_low = g.slice_cols(proj, 0, rank);
        let bm = g.slice_cols(proj, rank, rank + n);
        let cm = g.slice_cols(proj, rank + n, rank + 2 * n);
        let dt = self.dt_proj.forward(g, store, dt_low);
        let delta = g.softplus(dt);
        let a_log = g.param(store, self.a_log);
        let a = g.exp(a_log);
        let a = g.scale(a, -1.0);
        let dsk = g.param(store, self.d_skip);
        g.selective_scan(u, delta, a, bm, cm, dsk, seq_len, direction)
    }
}

/// Bidirectional Mamba block: pre-norm, gated value path, forward and
/// backward selective scans with independent parameters, residual add.
#[derive(Clone, Debug)]
pub struct BiMbBlock {
    pub cfg: SsmConfig,
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub forward_ssm: SsmParams,
    pub backward_ssm: SsmParams,
    pub out_proj: Linear,
    pub drop_rate: f64,
}

impl BiMbBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &SsmConfig,
        drop_rate: f64,
    ) -> Self {
        let (d, di) = (cfg.d_model, cfg.d_inner);
        Self {
            cfg: cfg.clone(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            in_proj: Linear::new(store, rng, &format!("{name}.in_proj"), d, 2 * di, true, 1.0 / (d as f64).sqrt()),
            forward_ssm: SsmParams::new(store, rng, &format!("{name}.fwd"), cfg),
            backward_ssm: SsmParams::new(store, rng, &format!("{name}.bwd"), cfg),
            out_proj: Linear::new(store, rng, &format!("{name}.out_proj"), di, d, true, 1.0 / (di as f64).sqrt()),
            drop_rate,
        }
    }

    /// Forward over `rows/seq_len` stacked sequences. `draws` holds one uniform
    /// sample per sequence and is only consulted in train mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seq_len: usize,
        mode: Mode,
        draws: &[f64],
    ) -> Var {
        let di = self.cfg.d_inner;
        let xn = self.norm.forward(g, store, x);
        let xz = self.in_proj.forward(g, store, xn);
        let value = g.slice_cols(xz, 0, di);
        let gate = g.slice_cols(xz, di, 2 * di);
        let yf = self.forward_ssm.forward(g, store, &self.cfg, value, seq_len, Direction::Forward);
        let yb = self.backward_ssm.forward(g, store, &self.cfg, value, seq_len, Direction::Backward);
        let y = g.add(yf, yb);
        let gate = g.silu(gate);
        let gated = g.mul(y, gate);
        let mut residual = self.out_proj.forward(g, store, gated);
        if mode == Mode::Train && self.drop_rate > 0.0 {
            let rows = g.value(x).nrows();
            assert_eq!(draws.len() * seq_len, rows, "one draw per sequence");
            let keep = 1.0 / (1.0 - self.drop_rate);
            let factors = (0..rows)
                .map(|r| if draws[r / seq_len] < self.drop_rate { 0.0 } else { keep })
                .collect();
            residual = g.scale_rows(residual, factors);
        }
        g.add(x, residual)
    }

    /// Swaps the forward and backward parameter sets.
    pub fn mirrored(&self) -> Self {
        let mut b = self.clone();
        std::mem::swap(&mut b.forward_ssm, &mut b.backward_ssm);
        b
    }
}

/// Runs one block on a single `T×D` sequence.
pub fn bimb_forward(x: &Mat, store: &ParamStore, block: &BiMbBlock, mode: Mode, draw: f64) -> Result<Mat> {
    if x.ncols() != block.cfg.d_model || x.nrows() == 0 {
        return Err(Error::Shape(format!(
            "block expects width {}, got {}x{}",
            block.cfg.d_model,
            x.nrows(),
            x.ncols()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = block.forward(&mut g, store, xv, x.nrows(), mode, &[draw]);
    let y = g.value(out).clone();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("block output".into()));
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneMode {
    /// All `L` blocks feed the head.
    Baseline,
    /// First `L−2` blocks are shared; the rest live in the branches.
    Shared,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub blocks: Vec<BiMbBlock>,
    pub mode: BackboneMode,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &SsmConfig,
        num_blocks: usize,
        drop_rate: f64,
        mode: BackboneMode,
    ) -> Result<Self> {
        if mode == BackboneMode::Shared && num_blocks < 1 {
            return Err(Error::Config("shared trunk needs at least one block".into()));
        }
        let blocks = (0..num_blocks)
            .map(|i| BiMbBlock::new(store, rng, &format!("backbone.{i}"), cfg, drop_rate))
            .collect();
        Ok(Self { blocks, mode })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Applies the first `depth` blocks. In train mode each block draws one
    /// uniform per sequence from `rng`, block by block.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        seq_len: usize,
        depth: usize,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        if depth > self.blocks.len() {
            return Err(Error::OutOfRange(format!("depth {depth} (have {})", self.blocks.len())));
        }
        run_blocks(g, store, &self.blocks[..depth], x, seq_len, mode, rng)
    }
}

pub(crate) fn draw_uniforms(rng: &mut dyn RngCore, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.random::<f64>()).collect()
}

pub(crate) fn run_blocks(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[BiMbBlock],
    mut x: Var,
    seq_len: usize,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    let batch = g.value(x).nrows() / seq_len;
    for block in blocks {
        let draws = match mode {
            Mode::Train => draw_uniforms(rng, batch),
            Mode::Eval => Vec::new(),
        };
        x = block.forward(g, store, x, seq_len, mode, &draws);
    }
    if g.value(x).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("backbone activations".into()));
    }
    Ok(x)
}

/// Runs the first `depth` blocks on a single token sequence; layout metadata is carried through.
pub fn backbone_forward(
    z0: &TokenSequence,
    store: &ParamStore,
    bb: &Backbone,
    depth: usize,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let x = g.constant(z0.data.clone());
    let out = bb.forward(&mut g, store, x, z0.len(), depth, mode, rng)?;
    Ok(TokenSequence {
        data: g.value(out).clone(),
        ..z0.clone()
    })
}

/// Geometric bound on the state norm: with per-entry decay `ρ = max exp(Δ·A) < 1`
/// and per-step input bounded by `β`, `|h_t| ≤ β/(1−ρ)` entrywise.
pub fn state_decay_factor(a_log: &Mat, delta_min: f64) -> f64 {
    a_log
        .iter()
        .map(|&v| (-delta_min * v.exp()).exp())
        .fold(0.0, f64::max)
}
