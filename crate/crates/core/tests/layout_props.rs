mod common;

use common::check_partition;
use proptest::prelude::*;
use reidmamba::autograd::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reidmamba::layout::{
    assemble_sequence, class_token_positions, compute_patch_grid, sequence_layout, EmbedConfig, EmbeddingState, TokenSequence,
};
use reidmamba::params::ParamStore;
use reidmamba::mgfe::{reinterleave_tokens, split_tokens};

proptest! {
    #[test]
    fn layout_partitions_the_sequence((m, n) in (2usize..=4096).prop_flat_map(|n| (1..n, Just(n)))) {
        check_partition(m, n);
        let j = n / (m + 1);
        let class = class_token_positions(m, n).unwrap();
        for (k, &p) in class.iter().enumerate() {
            prop_assert_eq!(p, (k + 1) * j + k);
        }
    }

    #[test]
    fn split_then_reinterleave_round_trips(
        (m, n) in (2usize..=40).prop_flat_map(|n| (1..n, Just(n))),
        seed in any::<u64>(),
    ) {
        let (class_positions, image_positions) = sequence_layout(m, n).unwrap();
        let data = Mat::from_shape_fn((m + n, 3), |(i, j)| ((seed ^ (i * 31 + j) as u64) % 1000) as f64 - 500.0);
        let seq = TokenSequence { data: data.clone(), class_positions, image_positions, spacing: n / (m + 1) };
        let (c, i) = split_tokens(&seq);
        let back = reinterleave_tokens(&c, &i).unwrap();
        prop_assert_eq!(back.data, data);
    }

    #[test]
    fn smaller_stride_never_loses_patches(h in 16usize..80, w in 16usize..80, p in 1usize..16, s in 1usize..16) {
        prop_assume!(s < p);
        let cfg = |stride| EmbedConfig {
            image_height: h,
            image_width: w,
            patch_size: p,
            stride,
            embed_dim: 4,
            num_class_tokens: 1,
            num_cameras: 1,
            side_weight: 0.0,
        };
        let fine = compute_patch_grid(&cfg(s)).unwrap();
        let coarse = compute_patch_grid(&cfg(s + 1)).unwrap();
        prop_assert!(fine.count >= coarse.count);
    }
}

#[test]
fn paper_layouts() {
    assert_eq!(class_token_positions(4, 32).unwrap(), vec![6, 13, 20, 27]);
    assert_eq!(class_token_positions(1, 2).unwrap(), vec![1]);
    let p = class_token_positions(12, 128).unwrap();
    assert_eq!(p, (0..12).map(|j| 9 * (j + 1) + j).collect::<Vec<_>>());
    assert_eq!(*p.last().unwrap(), 119);
    assert!(class_token_positions(4, 4).is_err());
}

fn embed_cfg(cameras: usize, side_weight: f64) -> EmbedConfig {
    EmbedConfig {
        image_height: 32,
        image_width: 16,
        patch_size: 8,
        stride: 8,
        embed_dim: 6,
        num_class_tokens: 3,
        num_cameras: cameras,
        side_weight,
    }
}

proptest! {
    #[test]
    fn camera_term_is_linear(seed in any::<u64>(), c1 in 0usize..4, c2 in 0usize..4, lambda in 0.0f64..5.0) {
        let cfg = embed_cfg(4, lambda);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let state = EmbeddingState::new(&mut store, &mut rng, &cfg).unwrap();
        let n = compute_patch_grid(&cfg).unwrap().count;
        let patches = Mat::from_shape_simple_fn((n, cfg.embed_dim), || rng.random_range(-1.0..1.0));
        let a = assemble_sequence(&patches, &store, &state, c1, &cfg).unwrap();
        let b = assemble_sequence(&patches, &store, &state, c2, &cfg).unwrap();
        let side = store.value(state.side);
        let want = (&side.row(c1) - &side.row(c2)) * lambda;
        for row in (&a.data - &b.data).rows() {
            for (x, y) in row.iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn class_rows_hold_the_class_tokens() {
    let cfg = EmbedConfig { num_class_tokens: 2, ..embed_cfg(1, 0.0) };
    let mut store = ParamStore::new();
    let state = EmbeddingState::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
    store.value_mut(state.position).fill(0.0);
    store.value_mut(state.class_tokens).fill(1e6);
    let n = compute_patch_grid(&cfg).unwrap().count;
    let seq = assemble_sequence(&Mat::zeros((n, cfg.embed_dim)), &store, &state, 0, &cfg).unwrap();
    let (c, i) = split_tokens(&seq);
    assert!(c.iter().all(|&v| v == 1e6));
    assert!(i.iter().all(|&v| v == 0.0));
    let marked: Vec<usize> = (0..seq.len()).filter(|&r| seq.data[[r, 0]] == 1e6).collect();
    assert_eq!(marked, seq.class_positions);
}

#[test]
fn fused_layout_example() {
    assert_eq!(class_token_positions(2, 32).unwrap(), vec![10, 21]);
}
