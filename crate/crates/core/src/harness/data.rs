//! Synthetic pedestrian-like images, augmentation and P×K sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layout::Image;
use crate::model::ModelConfig;

/// Pixel statistics used to center generated images.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub num_cameras: usize,
    pub height: usize,
    pub width: usize,
    /// Std of per-pixel noise; also scales brightness and pose jitter.
    pub noise: f64,
    /// Magnitude of the per-camera color offset.
    pub color_shift: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn desk(model: &ModelConfig) -> Self {
        Self {
            train_identities: model.num_identities,
            test_identities: 32,
            images_per_identity: 8,
            num_cameras: model.num_cameras,
            height: model.image_height,
            width: model.image_width,
            noise: 0.05,
            color_shift: 0.15,
            seed: 7,
        }
    }

    pub fn num_identities(&self) -> usize {
        self.train_identities + self.test_identities
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn identities(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect()
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.camera).collect()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.samples.iter().map(|s| &s.image).collect()
    }
}

/// Train identities are `0..train_identities` (classifier targets); test
/// identities are numbered after them and never appear in training.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: Split,
    pub query: Split,
    pub gallery: Split,
}

#[derive(Clone, Debug)]
struct Appearance {
    head: [f64; 3],
    upper: [f64; 3],
    lower: [f64; 3],
    shoes: [f64; 3],
    stripe: [f64; 3],
    stripe_period: usize,
    has_stripes: bool,
    /// Fraction of the height covered by the upper body.
    waist: f64,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn appearance(seed: u64, identity: usize) -> Appearance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (identity as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Appearance {
        head: color(&mut rng),
        upper: color(&mut rng),
        lower: color(&mut rng),
        shoes: color(&mut rng),
        stripe: color(&mut rng),
        stripe_period: [4, 6, 8][rng.random_range(0..3)],
        has_stripes: rng.random_bool(0.5),
        waist: rng.random_range(0.45..0.6),
    }
}

fn camera_offset(seed: u64, camera: usize, magnitude: f64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xC0FFEE) ^ camera as u64);
    [0; 3].map(|_| rng.random_range(-magnitude..=magnitude))
}

fn render(spec: &SynthSpec, look: &Appearance, camera: usize, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (spec.height, spec.width);
    let offset = camera_offset(spec.seed, camera, spec.color_shift);
    let jitter = spec.noise > 0.0;
    let shift = if jitter { rng.random_range(-2i64..=2) } else { 0 };
    let gain = if jitter { 1.0 + rng.random_range(-1.0..1.0) * spec.noise } else { 1.0 };
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise std");
    let head_end = h as f64 * 0.15;
    let waist = h as f64 * look.waist;
    let shoes_start = h as f64 * 0.92;
    Image::from_shape_fn((h, w, 3), |(y, x, c)| {
        let yy = (y as i64 - shift).clamp(0, h as i64 - 1) as f64;
        let margin = (w as f64 * 0.15) as usize;
        let base = if x < margin || x >= w - margin {
            0.5
        } else if yy < head_end {
            look.head[c]
        } else if yy < waist {
            let band = (yy as usize / look.stripe_period) % 2 == 1;
            if look.has_stripes && band {
                look.stripe[c]
            } else {
                look.upper[c]
            }
        } else if yy < shoes_start {
            look.lower[c]
        } else {
            look.shoes[c]
        };
        let v = (base * gain + offset[c] + noise.sample(rng)).clamp(0.0, 1.0);
        (v - PIXEL_MEAN) / PIXEL_STD
    })
}

/// Each identity gets a fixed appearance; image `i` of an identity is taken by
/// camera `i mod C`. For test identities the first image is the query and the
/// rest form the gallery, so every query has matches under other cameras.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.num_cameras < 2 || spec.images_per_identity < 2 {
        return Err(Error::Config("need >= 2 cameras and >= 2 images per identity".into()));
    }
    if spec.train_identities < 2 || spec.test_identities < 1 {
        return Err(Error::Config("need >= 2 training and >= 1 test identities".into()));
    }
    if !(spec.noise >= 0.0 && spec.color_shift >= 0.0) {
        return Err(Error::Config("noise and color shift must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for identity in 0..spec.num_identities() {
        let look = appearance(spec.seed, identity);
        for i in 0..spec.images_per_identity {
            let camera = i % spec.num_cameras;
            let sample = Sample {
                image: render(spec, &look, camera, &mut rng),
                identity,
                camera,
            };
            if identity < spec.train_identities {
                train.push(sample);
            } else if i == 0 {
                query.push(sample);
            } else {
                gallery.push(sample);
            }
        }
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        train: Split { samples: train },
        query: Split { samples: query },
        gallery: Split { samples: gallery },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub pad: usize,
    pub erase_prob: f64,
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

/// Flip, zero-pad + random crop, then random erasing over 2–40% of the area
/// with aspect ratio in [0.3, 3.3].
pub fn augment<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let (h, w, c) = image.dim();
    let mut img = if rng.random_bool(cfg.flip_prob) { hflip(image) } else { image.clone() };
    if cfg.pad > 0 {
        let p = cfg.pad;
        let dy = rng.random_range(0..=2 * p) as i64 - p as i64;
        let dx = rng.random_range(0..=2 * p) as i64 - p as i64;
        let src = img;
        img = Image::from_shape_fn((h, w, c), |(y, x, ch)| {
            let (sy, sx) = (y as i64 + dy, x as i64 + dx);
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                0.0
            } else {
                src[[sy as usize, sx as usize, ch]]
            }
        });
    }
    if rng.random_bool(cfg.erase_prob) {
        let area = (h * w) as f64;
        for _ in 0..100 {
            let target = rng.random_range(0.02..0.4) * area;
            let aspect = rng.random_range(0.3f64.ln()..3.3f64.ln()).exp();
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let y0 = rng.random_range(0..=h - eh);
            let x0 = rng.random_range(0..=w - ew);
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    for ch in 0..c {
                        img[[y, x, ch]] = rng.random_range(-1.0..1.0) / PIXEL_STD * 0.5;
                    }
                }
            }
            break;
        }
    }
    img
}

/// Draws batches of `P` identities × `K` images, without replacement within an
/// epoch. Identities with fewer than `K` unused images wait for the next epoch;
/// among the rest, those with the most unused images are drawn first.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_identity: Vec<Vec<usize>>,
    pool: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(identities: &[usize], p: usize, k: usize) -> Result<Self> {
        let num = identities.iter().max().map_or(0, |m| m + 1);
        let mut by_identity = vec![Vec::new(); num];
        for (i, &id) in identities.iter().enumerate() {
            by_identity[id].push(i);
        }
        by_identity.retain(|v| !v.is_empty());
        let eligible = by_identity.iter().filter(|v| v.len() >= k).count();
        if eligible < p || k == 0 || p == 0 {
            return Err(Error::Batch(format!(
                "only {eligible} identities have {k} images, need P={p}"
            )));
        }
        Ok(Self { by_identity, pool: Vec::new(), p, k })
    }

    fn refill<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.pool = self.by_identity.clone();
        for v in &mut self.pool {
            v.shuffle(rng);
        }
    }

    /// Indices of one batch, grouped by identity.
    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut ready: Vec<usize> = (0..self.pool.len()).filter(|&i| self.pool[i].len() >= self.k).collect();
        if ready.len() < self.p {
            self.refill(rng);
            ready = (0..self.pool.len()).filter(|&i| self.pool[i].len() >= self.k).collect();
        }
        // fullest identities first, so an epoch is used up evenly
        ready.shuffle(rng);
        ready.sort_by_key(|&i| std::cmp::Reverse(self.pool[i].len()));
        let mut out = Vec::with_capacity(self.p * self.k);
        for &i in &ready[..self.p] {
            let v = &mut self.pool[i];
            out.extend(v.drain(v.len() - self.k..));
        }
        out
    }
}

pub fn pk_sample<R: Rng + ?Sized>(identities: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    Ok(PkSampler::new(identities, p, k)?.next_batch(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn spec() -> SynthSpec {
        SynthSpec {
            train_identities: 6,
            test_identities: 4,
            images_per_identity: 6,
            num_cameras: 3,
            height: 32,
            width: 16,
            noise: 0.05,
            color_shift: 0.1,
            seed: 3,
        }
    }

    #[test]
    fn splits_are_disjoint_and_cross_camera() {
        let d = generate_synthetic_dataset(&spec()).unwrap();
        assert_eq!(d.train.samples.len(), 36);
        assert_eq!(d.query.samples.len(), 4);
        assert_eq!(d.gallery.samples.len(), 20);
        assert!(d.train.identities().iter().all(|&i| i < 6));
        assert!(d.query.identities().iter().all(|&i| i >= 6));
        for q in &d.query.samples {
            let other_cam = d
                .gallery
                .samples
                .iter()
                .filter(|g| g.identity == q.identity && g.camera != q.camera)
                .count();
            assert!(other_cam >= 1);
        }
        assert_eq!(d.train.samples[0].image.dim(), (32, 16, 3));
    }

    #[test]
    fn noiseless_images_repeat_per_camera() {
        let mut s = spec();
        s.noise = 0.0;
        let d = generate_synthetic_dataset(&s).unwrap();
        let same: Vec<_> = d.train.samples.iter().filter(|x| x.identity == 0 && x.camera == 1).collect();
        assert_eq!(same.len(), 2);
        assert_eq!(same[0].image, same[1].image);
        let again = generate_synthetic_dataset(&s).unwrap();
        assert_eq!(again.gallery.samples[3].image, d.gallery.samples[3].image);
    }

    #[test]
    fn augment_keeps_shape_and_flip_is_involutive() {
        let d = generate_synthetic_dataset(&spec()).unwrap();
        let img = &d.train.samples[0].image;
        assert_eq!(&hflip(&hflip(img)), img);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig { flip_prob: 0.5, pad: 10, erase_prob: 1.0 };
        for _ in 0..20 {
            assert_eq!(augment(img, &cfg, &mut rng).dim(), img.dim());
        }
        let none = AugmentConfig { flip_prob: 0.0, pad: 0, erase_prob: 0.0 };
        assert_eq!(&augment(img, &none, &mut rng), img);
    }

    #[test]
    fn pk_batches_cover_an_epoch_without_repeats() {
        let ids: Vec<usize> = (0..8).flat_map(|i| std::iter::repeat_n(i, 4)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = PkSampler::new(&ids, 4, 2).unwrap();
        let mut seen = Vec::new();
        for _ in 0..4 {
            let b = s.next_batch(&mut rng);
            let mut counts = BTreeMap::new();
            for &i in &b {
                *counts.entry(ids[i]).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 4);
            assert!(counts.values().all(|&c| c == 2));
            seen.extend(b);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..32).collect::<Vec<_>>());
        assert!(PkSampler::new(&ids, 9, 2).is_err());
    }
}
