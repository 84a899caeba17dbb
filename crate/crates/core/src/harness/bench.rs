//! Wall-clock scaling of a bidirectional block against naive self-attention.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::params::{normal, ParamStore};
use crate::ssm::{BiMbBlock, SsmConfig};

pub const BENCH_HEADER: &str = "tokens,scan_ms,attention_ms,scan_floats,attention_floats";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub tokens: usize,
    /// Median wall time of one block forward pass.
    pub scan_ms: f64,
    pub attention_ms: f64,
    /// Values materialized during the pass, as a memory proxy.
    pub scan_floats: usize,
    pub attention_floats: usize,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.4},{},{}",
            self.tokens, self.scan_ms, self.attention_ms, self.scan_floats, self.attention_floats
        )
    }
}

/// Single-head attention with Q/K/V/output projections; materializes the
/// full `N×N` score matrix.
pub struct NaiveAttention {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
}

impl NaiveAttention {
    pub fn new(width: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let mut w = || normal(rng, width, width, std);
        Self { wq: w(), wk: w(), wv: w(), wo: w() }
    }

    /// Output and number of values materialized.
    pub fn forward(&self, x: &Mat) -> (Mat, usize) {
        let q = x.dot(&self.wq);
        let k = x.dot(&self.wk);
        let v = x.dot(&self.wv);
        let mut s = q.dot(&k.t()) / (x.ncols() as f64).sqrt();
        for mut row in s.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|z| (z - m).exp());
            let sum = row.sum();
            row /= sum;
        }
        let o = s.dot(&v).dot(&self.wo);
        let floats = q.len() + k.len() + v.len() + s.len() + 2 * o.len();
        (o, floats)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over `repeats` timed runs after one warm-up.
fn time_ms<F: FnMut() -> usize>(repeats: usize, mut f: F) -> (f64, usize) {
    let floats = f();
    let samples = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    (median(samples), floats)
}

pub fn bench_scaling(tokens: &[usize], width: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 || tokens.contains(&0) {
        return Err(Error::Config("need positive token counts and repeats".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = BiMbBlock::new(&mut store, &mut rng, "bench", &SsmConfig::for_width(width, 16), 0.0);
    let attn = NaiveAttention::new(width, &mut rng);
    let mut rows = Vec::with_capacity(tokens.len());
    for &n in tokens {
        let x = normal(&mut rng, n, width, 1.0);
        let (scan_ms, scan_floats) = time_ms(repeats, || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = block.forward(&mut g, &store, xv, n, Mode::Eval, &[]);
            std::hint::black_box(g.value(y));
            g.stored_floats()
        });
        let (attention_ms, attention_floats) = time_ms(repeats, || {
            let (o, floats) = attn.forward(&x);
            std::hint::black_box(&o);
            floats
        });
        rows.push(BenchRow { tokens: n, scan_ms, attention_ms, scan_floats, attention_floats });
    }
    Ok(rows)
}
