//! Patch tokenization and the interleaved class-token sequence layout.
//!
//! `M` class tokens are spread evenly through the `N` image tokens: with
//! `J = ⌊N/(M+1)⌋`, class token `j` sits at position `(j+1)·J + j` and the
//! `N − M·J` leftover image tokens trail after the last class token.

use std::rc::Rc;

use ndarray::{s, Array1, Array3};
use rand::Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{normal, ParamId, ParamStore};

/// RGB image, `H×W×3`.
pub type Image = Array3<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub num_class_tokens: usize,
    pub num_cameras: usize,
    /// Weight of the camera embedding.
    pub side_weight: f64,
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 {
            return bad("patch size must be positive");
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return bad("stride must satisfy 1 <= S <= patch size");
        }
        if self.image_height < self.patch_size || self.image_width < self.patch_size {
            return bad("image smaller than patch");
        }
        if self.num_class_tokens == 0 || self.embed_dim == 0 || self.num_cameras == 0 {
            return bad("M, D and camera count must be positive");
        }
        if !(self.side_weight >= 0.0) {
            return bad("side weight must be non-negative");
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
}

pub fn compute_patch_grid(cfg: &EmbedConfig) -> Result<PatchGrid> {
    cfg.validate()?;
    let along = |extent: usize| (extent + cfg.stride).saturating_sub(cfg.patch_size) / cfg.stride;
    let rows = along(cfg.image_height);
    let cols = along(cfg.image_width);
    if rows == 0 || cols == 0 {
        return Err(Error::Config("image smaller than patch".into()));
    }
    Ok(PatchGrid {
        rows,
        cols,
        count: rows * cols,
    })
}

/// Spacing `J = ⌊N/(M+1)⌋` between class tokens.
pub fn class_token_spacing(m: usize, n: usize) -> usize {
    n / (m + 1)
}

pub fn class_token_positions(m: usize, n: usize) -> Result<Vec<usize>> {
    if m == 0 || m >= n {
        return Err(Error::Config(format!(
            "need 1 <= M < N for class-token layout, got M={m}, N={n}"
        )));
    }
    let j = class_token_spacing(m, n);
    Ok((0..m).map(|k| (k + 1) * j + k).collect())
}

/// Class and image positions for a sequence of `m + n` tokens.
pub fn sequence_layout(m: usize, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let class = class_token_positions(m, n)?;
    let mut is_class = vec![false; m + n];
    for &p in &class {
        is_class[p] = true;
    }
    let image = (0..m + n).filter(|&p| !is_class[p]).collect();
    Ok((class, image))
}

/// Row indices that build `batch` interleaved sequences out of a source
/// matrix. `image_row(b, i)` and `class_row(b, j)` locate image token `i` and
/// class token `j` of sample `b` in the source.
pub fn interleave_index(
    m: usize,
    n: usize,
    batch: usize,
    image_row: impl Fn(usize, usize) -> usize,
    class_row: impl Fn(usize, usize) -> usize,
) -> Result<Vec<usize>> {
    let (class, _) = sequence_layout(m, n)?;
    let t = m + n;
    let mut idx = Vec::with_capacity(batch * t);
    for b in 0..batch {
        let (mut ci, mut ii) = (0, 0);
        for p in 0..t {
            if ci < m && class[ci] == p {
                idx.push(class_row(b, ci));
                ci += 1;
            } else {
                idx.push(image_row(b, ii));
                ii += 1;
            }
        }
    }
    Ok(idx)
}

/// Indices of rows at `positions` within each of `batch` stacked sequences of length `t`.
pub fn batched_positions(positions: &[usize], t: usize, batch: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| positions.iter().map(move |&p| b * t + p))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub data: Mat,
    pub class_positions: Vec<usize>,
    pub image_positions: Vec<usize>,
    pub spacing: usize,
}

impl TokenSequence {
    pub fn num_class(&self) -> usize {
        self.class_positions.len()
    }

    pub fn num_image(&self) -> usize {
        self.image_positions.len()
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }
}

/// Learnable embedding parameters.
#[derive(Clone, Debug)]
pub struct EmbeddingState {
    pub patch_projection: Linear,
    /// `M×D`
    pub class_tokens: ParamId,
    /// `(M+N)×D`
    pub position: ParamId,
    /// `N_c×D`
    pub side: ParamId,
}

impl EmbeddingState {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &EmbedConfig,
    ) -> Result<Self> {
        let grid = compute_patch_grid(cfg)?;
        let (d, m) = (cfg.embed_dim, cfg.num_class_tokens);
        let fan_in = cfg.patch_dim() as f64;
        Ok(Self {
            patch_projection: Linear::new(
                store,
                rng,
                "embed.patch",
                cfg.patch_dim(),
                d,
                true,
                1.0 / fan_in.sqrt(),
            ),
            class_tokens: store.add("embed.cls", normal(rng, m, d, 0.02)),
            position: store.add("embed.pos", normal(rng, m + grid.count, d, 0.02)),
            side: store.add("embed.side", normal(rng, cfg.num_cameras, d, 0.02)),
        })
    }
}

/// Flattened patches in row-major grid order; each patch is `(py, px, channel)` flattened.
pub fn patchify(image: &Image, cfg: &EmbedConfig) -> Result<Mat> {
    let grid = compute_patch_grid(cfg)?;
    let (h, w, c) = image.dim();
    if h != cfg.image_height || w != cfg.image_width || c != 3 {
        return Err(Error::Shape(format!(
            "image is {h}x{w}x{c}, expected {}x{}x3",
            cfg.image_height, cfg.image_width
        )));
    }
    let p = cfg.patch_size;
    let mut out = Mat::zeros((grid.count, cfg.patch_dim()));
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let (y0, x0) = (gr * cfg.stride, gc * cfg.stride);
            let patch = image.slice(s![y0..y0 + p, x0..x0 + p, ..]);
            let mut row = out.row_mut(gr * grid.cols + gc);
            for (dst, &v) in row.iter_mut().zip(patch.iter()) {
                *dst = v;
            }
        }
    }
    Ok(out)
}

pub fn patchify_project(
    image: &Image,
    store: &ParamStore,
    state: &EmbeddingState,
    cfg: &EmbedConfig,
) -> Result<Mat> {
    let patches = patchify(image, cfg)?;
    Ok(state.patch_projection.apply(store, &patches))
}

fn check_camera(camera_id: usize, cfg: &EmbedConfig) -> Result<()> {
    if camera_id >= cfg.num_cameras {
        return Err(Error::OutOfRange(format!(
            "camera id {camera_id} (have {})",
            cfg.num_cameras
        )));
    }
    Ok(())
}

/// Interleaves class tokens with projected patch tokens and adds the position
/// and weighted camera embeddings to every row.
pub fn assemble_sequence(
    patch_tokens: &Mat,
    store: &ParamStore,
    state: &EmbeddingState,
    camera_id: usize,
    cfg: &EmbedConfig,
) -> Result<TokenSequence> {
    check_camera(camera_id, cfg)?;
    let (n, d) = patch_tokens.dim();
    let m = cfg.num_class_tokens;
    if d != cfg.embed_dim {
        return Err(Error::Shape(format!("patch tokens have {d} columns, expected {}", cfg.embed_dim)));
    }
    let (class_positions, image_positions) = sequence_layout(m, n)?;
    let pos = store.value(state.position);
    if pos.nrows() != m + n {
        return Err(Error::Shape(format!(
            "position embedding has {} rows, sequence has {}",
            pos.nrows(),
            m + n
        )));
    }
    let cls = store.value(state.class_tokens);
    let side: Array1<f64> = store.value(state.side).row(camera_id).to_owned() * cfg.side_weight;
    let mut data = Mat::zeros((m + n, d));
    for (j, &p) in class_positions.iter().enumerate() {
        data.row_mut(p).assign(&cls.row(j));
    }
    for (i, &p) in image_positions.iter().enumerate() {
        data.row_mut(p).assign(&patch_tokens.row(i));
    }
    data += pos;
    data += &side;
    Ok(TokenSequence {
        data,
        class_positions,
        image_positions,
        spacing: class_token_spacing(m, n),
    })
}

/// Batched, differentiable embedding. `patches` stacks `batch` patch matrices
/// (`batch·N` rows); the result stacks `batch` sequences of `M+N` rows.
pub fn embed_batch(
    g: &mut Graph,
    store: &ParamStore,
    state: &EmbeddingState,
    cfg: &EmbedConfig,
    patches: Var,
    cameras: &[usize],
) -> Result<Var> {
    let batch = cameras.len();
    for &c in cameras {
        check_camera(c, cfg)?;
    }
    let total = g.value(patches).nrows();
    if batch == 0 || total % batch != 0 {
        return Err(Error::Shape("patch rows not divisible by batch size".into()));
    }
    let n = total / batch;
    let m = cfg.num_class_tokens;
    let t = m + n;
    let tokens = state.patch_projection.forward(g, store, patches);
    let cls = g.param(store, state.class_tokens);
    let joined = g.concat_rows(&[tokens, cls]);
    let idx = interleave_index(m, n, batch, |b, i| b * n + i, |_, j| total + j)?;
    let seq = g.gather_rows(joined, Rc::new(idx));

    let pos = g.param(store, state.position);
    if g.value(pos).nrows() != t {
        return Err(Error::Shape("position embedding length does not match sequence".into()));
    }
    let pos_idx: Vec<usize> = (0..batch * t).map(|r| r % t).collect();
    let pos_tiled = g.gather_rows(pos, Rc::new(pos_idx));
    let seq = g.add(seq, pos_tiled);

    if cfg.side_weight == 0.0 {
        return Ok(seq);
    }
    let side = g.param(store, state.side);
    let cam_idx: Vec<usize> = (0..batch * t).map(|r| cameras[r / t]).collect();
    let side_rows = g.gather_rows(side, Rc::new(cam_idx));
    let side_rows = g.scale(side_rows, cfg.side_weight);
    Ok(g.add(seq, side_rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(h: usize, w: usize, p: usize, s: usize) -> EmbedConfig {
        EmbedConfig {
            image_height: h,
            image_width: w,
            patch_size: p,
            stride: s,
            embed_dim: 8,
            num_class_tokens: 1,
            num_cameras: 3,
            side_weight: 3.0,
        }
    }

    #[test]
    fn patch_grid_examples() {
        let g = compute_patch_grid(&cfg(256, 128, 16, 16)).unwrap();
        assert_eq!((g.rows, g.cols, g.count), (16, 8, 128));
        let g = compute_patch_grid(&cfg(384, 128, 16, 12)).unwrap();
        assert_eq!((g.rows, g.cols, g.count), (31, 10, 310));
        let g = compute_patch_grid(&cfg(16, 16, 16, 16)).unwrap();
        assert_eq!(g.count, 1);
        assert!(compute_patch_grid(&cfg(8, 16, 16, 16)).is_err());
        assert!(compute_patch_grid(&cfg(16, 16, 16, 17)).is_err());
    }

    #[test]
    fn class_positions_examples() {
        assert_eq!(class_token_positions(4, 32).unwrap(), vec![6, 13, 20, 27]);
        assert_eq!(class_token_positions(1, 2).unwrap(), vec![1]);
        let expected: Vec<usize> = (0..12).map(|j| 9 * (j + 1) + j).collect();
        assert_eq!(class_token_positions(12, 128).unwrap(), expected);
        assert_eq!(*expected.last().unwrap(), 119);
        assert!(class_token_positions(4, 4).is_err());
        assert!(class_token_positions(0, 4).is_err());
    }

    #[test]
    fn single_class_token_trails_remainder() {
        let (class, image) = sequence_layout(1, 10).unwrap();
        assert_eq!(class, vec![5]);
        assert_eq!(&image[5..], &[6, 7, 8, 9, 10]);
    }

    fn setup(c: &EmbedConfig) -> (ParamStore, EmbeddingState) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let st = EmbeddingState::new(&mut store, &mut rng, c).unwrap();
        (store, st)
    }

    #[test]
    fn zero_image_projects_to_zero() {
        let c = cfg(32, 32, 16, 16);
        let (store, st) = setup(&c);
        let img = Image::zeros((32, 32, 3));
        let out = patchify_project(&img, &store, &st, &c).unwrap();
        assert_eq!(out.dim(), (4, 8));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_reproduces_pixels() {
        let mut c = cfg(2, 2, 2, 2);
        c.embed_dim = 12;
        let (mut store, st) = setup(&c);
        *store.value_mut(st.patch_projection.weight) = Mat::eye(12);
        let img = Image::from_shape_fn((2, 2, 3), |(y, x, ch)| (y * 6 + x * 3 + ch) as f64);
        let out = patchify_project(&img, &store, &st, &c).unwrap();
        let flat: Vec<f64> = img.iter().copied().collect();
        assert_eq!(out.row(0).to_vec(), flat);
    }

    #[test]
    fn projection_matches_per_patch_oracle() {
        let c = cfg(32, 32, 16, 16);
        let (store, st) = setup(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::from_shape_simple_fn((32, 32, 3), || rng.random_range(-1.0..1.0));
        let out = patchify_project(&img, &store, &st, &c).unwrap();
        let w = store.value(st.patch_projection.weight);
        let b = store.value(st.patch_projection.bias.unwrap());
        for (k, (py, px)) in [(0, 0), (0, 16), (16, 0), (16, 16)].into_iter().enumerate() {
            for o in 0..8 {
                let mut acc = b[[0, o]];
                let mut f = 0;
                for y in 0..16 {
                    for x in 0..16 {
                        for ch in 0..3 {
                            acc += img[[py + y, px + x, ch]] * w[[f, o]];
                            f += 1;
                        }
                    }
                }
                assert!((acc - out[[k, o]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlapping_patches_share_pixels() {
        let c = cfg(24, 16, 16, 8);
        let img = Image::from_shape_fn((24, 16, 3), |(y, x, ch)| (y * 100 + x * 3 + ch) as f64);
        let p = patchify(&img, &c).unwrap();
        assert_eq!(p.nrows(), 2);
        // row 8 of patch 0 is row 0 of patch 1
        let row_len = 16 * 3;
        assert_eq!(
            p.row(0).slice(s![8 * row_len..9 * row_len]).to_vec(),
            p.row(1).slice(s![0..row_len]).to_vec()
        );
    }

    #[test]
    fn assemble_layout_and_camera_terms() {
        let mut c = cfg(64, 128, 16, 16);
        c.num_class_tokens = 4;
        let (store, st) = setup(&c);
        let tokens = normal(&mut ChaCha8Rng::seed_from_u64(1), 32, 8, 1.0);
        let a = assemble_sequence(&tokens, &store, &st, 0, &c).unwrap();
        assert_eq!(a.len(), 36);
        assert_eq!(a.class_positions, vec![6, 13, 20, 27]);
        let b = assemble_sequence(&tokens, &store, &st, 2, &c).unwrap();
        let side = store.value(st.side);
        let diff_expected = (&side.row(0) - &side.row(2)) * 3.0;
        for r in 0..36 {
            let diff = &a.data.row(r) - &b.data.row(r);
            for (x, y) in diff.iter().zip(diff_expected.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(assemble_sequence(&tokens, &store, &st, 3, &c).is_err());
        c.side_weight = 0.0;
        let a = assemble_sequence(&tokens, &store, &st, 0, &c).unwrap();
        let b = assemble_sequence(&tokens, &store, &st, 1, &c).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn too_many_class_tokens_rejected() {
        let mut c = cfg(32, 32, 16, 16);
        c.num_class_tokens = 4;
        let (store, st) = setup(&c);
        let tokens = Mat::zeros((4, 8));
        assert!(assemble_sequence(&tokens, &store, &st, 0, &c).is_err());
    }

    #[test]
    fn batched_embedding_matches_single() {
        let mut c = cfg(32, 32, 8, 8);
        c.num_class_tokens = 3;
        let (store, st) = setup(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let imgs: Vec<Image> = (0..2)
            .map(|_| Image::from_shape_simple_fn((32, 32, 3), || rng.random_range(0.0..1.0)))
            .collect();
        let cams = [1, 2];
        let patches: Vec<Mat> = imgs.iter().map(|i| patchify(i, &c).unwrap()).collect();
        let stacked = ndarray::concatenate(
            ndarray::Axis(0),
            &patches.iter().map(|p| p.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut g = Graph::new();
        let pv = g.constant(stacked);
        let seq = embed_batch(&mut g, &store, &st, &c, pv, &cams).unwrap();
        let out = g.value(seq);
        for (b, img) in imgs.iter().enumerate() {
            let tok = patchify_project(img, &store, &st, &c).unwrap();
            let one = assemble_sequence(&tok, &store, &st, cams[b], &c).unwrap();
            let block = out.slice(s![b * 19..(b + 1) * 19, ..]);
            for (x, y) in block.iter().zip(one.data.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
