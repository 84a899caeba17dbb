#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use reidmamba::autograd::Mat;
use reidmamba::layout::sequence_layout;
use reidmamba::ssm::ScanParams;

/// Textbook recurrence with explicit discretization, written independently of the kernel.
pub fn naive(u: &Mat, delta: &Mat, p: &ScanParams<f64>, reverse: bool) -> Mat {
    let (t, d) = u.dim();
    let n = p.a_log.ncols();
    let mut y = Mat::zeros((t, d));
    let mut h = vec![vec![0.0; n]; d];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for &step in &order {
        let bt: Vec<f64> = (0..n).map(|s| (0..d).map(|k| u[[step, k]] * p.b_proj[[k, s]]).sum()).collect();
        let ct: Vec<f64> = (0..n).map(|s| (0..d).map(|k| u[[step, k]] * p.c_proj[[k, s]]).sum()).collect();
        for ch in 0..d {
            let mut out = p.d_skip[ch] * u[[step, ch]];
            for s in 0..n {
                let a = -p.a_log[[ch, s]].exp();
                let a_bar = (delta[[step, ch]] * a).exp();
                let b_bar = delta[[step, ch]] * bt[s];
                h[ch][s] = a_bar * h[ch][s] + b_bar * u[[step, ch]];
                out += ct[s] * h[ch][s];
            }
            y[[step, ch]] = out;
        }
    }
    y
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Mat, Mat, ScanParams<f64>) {
    let t = rng.random_range(1..=64);
    let d = rng.random_range(1..=8);
    let n = rng.random_range(1..=8);
    let mut m = |r: usize, c: usize, lo: f64, hi: f64| Array2::from_shape_simple_fn((r, c), || rng.random_range(lo..hi));
    let u = m(t, d, -2.0, 2.0);
    let delta = m(t, d, 1e-3, 1.0);
    let params = ScanParams {
        a_log: m(d, n, -2.0, 1.5),
        b_proj: m(d, n, -1.0, 1.0),
        c_proj: m(d, n, -1.0, 1.0),
        d_skip: m(1, d, -1.0, 1.0).into_raw_vec_and_offset().0,
    };
    (u, delta, params)
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Concordant minus discordant over ordered pairs, halved.
pub fn brute_ktau(x: &[f64], y: &[f64]) -> f64 {
    let b = x.len();
    let (mut conc, mut disc) = (0i64, 0i64);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            if (x[i] < x[j] && y[i] < y[j]) || (x[i] > x[j] && y[i] > y[j]) {
                conc += 1;
            } else if (x[i] < x[j] && y[i] > y[j]) || (x[i] > x[j] && y[i] < y[j]) {
                disc += 1;
            }
        }
    }
    ((conc - disc) / 2) as f64 / (b * (b - 1) / 2) as f64
}

pub fn distinct_seq(rng: &mut ChaCha8Rng, b: usize, gap: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..b).map(|i| i as f64 * gap + rng.random_range(0.0..gap * 0.25)).collect();
    for i in (1..b).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

pub fn min_gap(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

pub fn check_partition(m: usize, n: usize) {
    let (class, image) = sequence_layout(m, n).unwrap();
    assert_eq!(class.len(), m);
    assert_eq!(image.len(), n);
    let mut seen = vec![false; m + n];
    for &p in class.iter().chain(&image) {
        assert!(!seen[p], "position {p} used twice for M={m}, N={n}");
        seen[p] = true;
    }
    assert!(seen.iter().all(|&s| s));
    assert!(class.windows(2).all(|w| w[0] < w[1]));
    assert!(image.windows(2).all(|w| w[0] < w[1]));
}

