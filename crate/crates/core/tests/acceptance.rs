//! End-to-end acceptance suite. Criteria run one after another inside a single
//! test so that timings are not disturbed by sibling tests; each prints one
//! PASS/FAIL line and the test fails if any criterion does.

mod common;

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_ktau, check_partition, distinct_seq, max_abs, min_gap, naive, random_instance};
use reidmamba::autograd::{Graph, Mat};
use reidmamba::harness::bench::bench_scaling;
use reidmamba::harness::checkpoint::{decode, encode};
use reidmamba::harness::config::TrainConfig;
use reidmamba::harness::data::PkSampler;
use reidmamba::harness::gradcheck::run_gradcheck;
use reidmamba::harness::optim::Sgd;
use reidmamba::harness::train::{train_step, EvalReport, Trainer};
use reidmamba::layout::{batched_positions, class_token_positions, embed_batch, sequence_layout, Image};
use reidmamba::losses::dktau;
use reidmamba::metrics::ktau_exact;
use reidmamba::mgfe::{extract_branch_feature, Branch, FeatureNorm, FusionKind};
use reidmamba::model::{ModelConfig, ReIdMamba};
use reidmamba::params::ParamStore;
use reidmamba::ssm::{selective_scan, Direction, SsmConfig};
use reidmamba::Mode;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn scan_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (u, delta, p) = random_instance(&mut rng);
        for (dir, rev) in [(Direction::Forward, false), (Direction::Backward, true)] {
            let got = selective_scan(u.view(), delta.view(), &p, dir).unwrap();
            worst = worst.max(max_abs(&got, &naive(&u, &delta, &p, rev)));
        }
    }
    let t = secs(start.elapsed());
    outcome(worst < 1e-10 && t < 10.0, format!("max abs err {worst:.2e} over 200 instances, {t:.2}s"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for sel in ["dktau", "ratr", "triplet", "model"] {
        let err = run_gradcheck(sel, 0).unwrap().max_rel_error();
        pass &= err < 1e-3;
        parts.push(format!("{sel} {err:.1e}"));
    }
    let t = secs(start.elapsed());
    outcome(pass && t < 120.0, format!("{}, {t:.1}s", parts.join(", ")))
}

fn ktau_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut exact = 0;
    for _ in 0..1000 {
        let b = rng.random_range(2..=12);
        let x: Vec<f64> = (0..b).map(|_| rng.random_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..b).map(|_| rng.random_range(0..6) as f64).collect();
        if ktau_exact(&x, &y).unwrap() == brute_ktau(&x, &y) {
            exact += 1;
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let b = rng.random_range(2..=12);
        let x = distinct_seq(&mut rng, b, 0.05);
        let y = distinct_seq(&mut rng, b, 0.05);
        let tau = min_gap(&x).min(min_gap(&y)) / 20.0;
        worst = worst.max((dktau(&x, &y, tau).unwrap() - ktau_exact(&x, &y).unwrap()).abs());
    }
    outcome(exact == 1000 && worst < 1e-3, format!("{exact}/1000 exact, dktau at delta/20 max dev {worst:.1e}"))
}

fn branch_dims(d: usize, m: usize, r: usize, branches: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let ssm = SsmConfig::for_width(d, 4);
    (0..branches)
        .map(|g| {
            let mut store = ParamStore::new();
            let b = Branch::new(&mut store, &mut rng, g, m, r, FusionKind::Max, &ssm, 0.0).unwrap();
            let z = Mat::from_shape_fn((b.class_count, d), |(i, j)| ((i * 13 + j * 7) % 11) as f64 - 5.0);
            extract_branch_feature(&z, &store, &b, FeatureNorm::L2).unwrap().len()
        })
        .collect()
}

fn dimension_conformance() -> Outcome {
    let a = branch_dims(384, 12, 4, 3);
    let b = branch_dims(384, 12, 2, 3);
    let cfg = ModelConfig::paper_shape();
    let wide = ModelConfig { reduction: 2, ..cfg.clone() };
    let pass = a == vec![1152; 3]
        && a.iter().sum::<usize>() == 3456
        && b.iter().sum::<usize>() == 6912
        && cfg.feature_dim() == 3456
        && wide.feature_dim() == 6912;
    outcome(pass, format!("(12,4,3) branches {a:?} total {}; (12,2,3) total {}", a.iter().sum::<usize>(), b.iter().sum::<usize>()))
}

fn layout_conformance() -> Outcome {
    let fig = class_token_positions(4, 32).unwrap();
    let start = Instant::now();
    let mut count = 0;
    for n in 2..=512 {
        for m in 1..n {
            check_partition(m, n);
            count += 1;
        }
    }
    outcome(fig == vec![6, 13, 20, 27], format!("(4,32) -> {fig:?}; {count} (M,N) partitions checked in {:.1}s", secs(start.elapsed())))
}

struct Run {
    report: EvalReport,
    trace: Vec<u64>,
    elapsed: Duration,
}

fn desk_run(rho: f64) -> Run {
    let mut cfg = TrainConfig::desk();
    cfg.loss.ratr.rho = rho;
    cfg.eval_every = 0;
    let start = Instant::now();
    let mut t = Trainer::new(cfg).unwrap();
    let mut trace = Vec::new();
    let mut report = None;
    while t.step < t.cfg.steps {
        let row = t.step_once().unwrap();
        trace.push(row.loss.total.to_bits());
        report = row.eval.or(report);
    }
    Run { report: report.unwrap(), trace, elapsed: start.elapsed() }
}

fn prefix_trace(rho: f64, steps: usize) -> Vec<u64> {
    let mut cfg = TrainConfig::desk();
    cfg.loss.ratr.rho = rho;
    cfg.eval_every = 0;
    let mut t = Trainer::new(cfg).unwrap();
    (0..steps).map(|_| t.step_once().unwrap().loss.total.to_bits()).collect()
}

fn synthetic_training(run: &Run) -> Outcome {
    let again = prefix_trace(1.0, 10);
    let deterministic = again[..] == run.trace[..10];
    let r = &run.report;
    let t = secs(run.elapsed);
    outcome(
        r.map >= 0.90 && r.r1 >= 0.95 && deterministic && t < 600.0,
        format!("mAP {:.4}, R@1 {:.4}, {t:.0}s, repeat trace identical: {deterministic}", r.map, r.r1),
    )
}

fn ratr_effect(with: &Run, without: &Run) -> Outcome {
    let (a, b) = (with.report.ktau_intra.unwrap(), without.report.ktau_intra.unwrap());
    let drop = b - a;
    let map_loss = without.report.map - with.report.map;
    let t = secs(with.elapsed + without.elapsed);
    outcome(
        drop >= 0.05 && map_loss <= 0.02 && t < 1200.0,
        format!("intra KTau {b:.4} -> {a:.4} (drop {drop:.4}), mAP {:.4} -> {:.4}, {t:.0}s", without.report.map, with.report.map),
    )
}

fn scaling_benchmark() -> Outcome {
    let rows = bench_scaling(&[256, 512, 1024, 2048], 64, 20, 0).unwrap();
    let ratio = |f: fn(&reidmamba::harness::bench::BenchRow) -> f64, i: usize| f(&rows[i + 1]) / f(&rows[i]);
    let scan: Vec<f64> = (0..3).map(|i| ratio(|r| r.scan_ms, i)).collect();
    let attn = ratio(|r| r.attention_ms, 2);
    outcome(
        scan[2] <= 2.5 && attn >= 3.0,
        format!(
            "scan t(2N)/t(N) {:.2}/{:.2}/{:.2} at N=256/512/1024, attention {attn:.2} at N=1024",
            scan[0], scan[1], scan[2]
        ),
    )
}

fn baseline_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.model.branches = 1;
    cfg.loss.ratr.rho = 0.0;
    cfg
}

/// Embedding → all blocks in one run → class rows → reduction head → BNNeck →
/// ID + triplet, built directly from the components.
fn baseline_step(model: &mut ReIdMamba, opt: &mut Sgd, images: &[&Image], cams: &[usize], labels: &[usize], cfg: &TrainConfig, lr: f64, rng: &mut ChaCha8Rng) -> f64 {
    let mc = model.cfg.clone();
    let mut g = Graph::new();
    let patches = g.constant(model.patch_matrix(images).unwrap());
    let mut x = embed_batch(&mut g, &model.store, &model.embed, &mc.embed(), patches, cams).unwrap();
    let batch = images.len();
    let t = g.value(x).nrows() / batch;
    let branch = &model.branches[0];
    for block in model.backbone.blocks.iter().chain(&branch.blocks) {
        let draws: Vec<f64> = (0..batch).map(|_| rng.random::<f64>()).collect();
        x = block.forward(&mut g, &model.store, x, t, Mode::Train, &draws);
    }
    let (class_pos, _) = sequence_layout(mc.num_class_tokens, t - mc.num_class_tokens).unwrap();
    let cls = g.gather_rows(x, Rc::new(batched_positions(&class_pos, t, batch)));
    let xn = branch.token_norm.forward(&mut g, &model.store, cls);
    let red = branch.reduce.forward(&mut g, &model.store, xn);
    let flat = g.reshape(red, batch, branch.feature_dim());
    let f = branch.feature_norm.forward(&mut g, &model.store, flat);
    let head = model.heads[0].forward(&mut g, &model.store, f, Mode::Train).unwrap();
    let lab = Rc::new(labels.to_vec());
    let id = g.smoothed_cross_entropy(head.logits, Rc::clone(&lab), cfg.loss.label_smoothing).unwrap();
    let tri = g.batch_hard_triplet(f, lab, cfg.loss.margin).unwrap();
    let total = g.add(id, tri);
    let grads = g.backward(total);
    let pg = g.param_grads(&grads);
    opt.step(&mut model.store, &pg, lr);
    model.update_running_stats(&[head.stats]);
    g.scalar(total)
}

fn baseline_degeneracy() -> Outcome {
    let cfg = baseline_config();
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let data = &trainer.data;
    let mut lib = trainer.model.clone();
    let mut hand = trainer.model.clone();
    let (mut opt_a, mut opt_b) = (Sgd::new(cfg.momentum, cfg.weight_decay), Sgd::new(cfg.momentum, cfg.weight_decay));
    let (mut rng_a, mut rng_b) = (ChaCha8Rng::seed_from_u64(9), ChaCha8Rng::seed_from_u64(9));
    let mut sampler = PkSampler::new(&data.train.identities(), cfg.batch_p, cfg.batch_k).unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(10);
    let mut matched = 0;
    let mut first_diff = None;
    for step in 0..10 {
        let idx = sampler.next_batch(&mut pick);
        let images: Vec<&Image> = idx.iter().map(|&i| &data.train.samples[i].image).collect();
        let cams: Vec<usize> = idx.iter().map(|&i| data.train.samples[i].camera).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.samples[i].identity).collect();
        let lr = 0.004;
        let a = train_step(&mut lib, &mut opt_a, &images, &cams, &labels, &cfg.loss, lr, &mut rng_a).unwrap().total;
        let b = baseline_step(&mut hand, &mut opt_b, &images, &cams, &labels, &cfg, lr, &mut rng_b);
        if a.to_bits() == b.to_bits() {
            matched += 1;
        } else if first_diff.is_none() {
            first_diff = Some((step, a, b));
        }
    }
    let params_equal = encode(&lib) == encode(&hand);
    outcome(
        matched == 10 && params_equal,
        match first_diff {
            None => format!("10/10 losses bit-identical, final parameters identical: {params_equal}"),
            Some((s, a, b)) => format!("{matched}/10 identical; step {s}: {a:e} vs {b:e}"),
        },
    )
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = ModelConfig { embed_dim: 16, depth: 3, d_state: 4, ..ModelConfig::desk() };
    let model = ReIdMamba::new(cfg, &mut ChaCha8Rng::seed_from_u64(103)).unwrap();
    let bytes = encode(&model);
    let again = encode(&decode(&bytes).unwrap().into_model().unwrap());
    let identical = bytes == again;
    let code = |b: &[u8]| decode(b).map(|_| ()).unwrap_err().code();
    let truncated = code(&bytes[..bytes.len() - 5]);
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[1, 2, 3, 4, 5, 6, 7, 8]);
    let trailing = code(&trailing);
    let mut versioned = bytes.clone();
    let pos = versioned.iter().position(|&c| c == b'\n').unwrap() - 1;
    versioned[pos] = b'7';
    let version = code(&versioned);
    let pass = identical && truncated == "E_TRUNCATED" && trailing == "E_SHAPE" && version == "E_VERSION";
    outcome(pass, format!("re-save identical: {identical}; truncated {truncated}, trailing {trailing}, version {version}"))
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 scan oracle", scan_oracle());
    report("2 gradient suite", gradient_suite());
    report("3 ktau oracles", ktau_oracles());
    report("4 dimension conformance", dimension_conformance());
    report("5 layout conformance", layout_conformance());
    let with = desk_run(1.0);
    let without = desk_run(0.0);
    report("6 synthetic training", synthetic_training(&with));
    report("7 ratr effect", ratr_effect(&with, &without));
    report("8 scaling benchmark", scaling_benchmark());
    report("9 baseline degeneracy", baseline_degeneracy());
    report("10 checkpoint round trip", checkpoint_round_trip());
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
