mod support;

use dilattn_core::attention::{
    dilated_attention, dilated_attention_with, multi_head_dilated, naive_attention, naive_attention_scaled,
    tiled_attention, tiled_attention_scaled, worker_pool, Exec, MultiHeadWeights,
};
use dilattn_core::{AttentionConfig, Kernel, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::oracle::{dilated_mask, full_mask, masked_attention};

fn qkv<T: dilattn_core::Scalar>(n: usize, d: usize, seed: u64) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::randn(&[n, d], 1.0, &mut rng),
        Tensor::randn(&[n, d], 1.0, &mut rng),
        Tensor::randn(&[n, d], 1.0, &mut rng),
    )
}

#[test]
fn dilated_matches_masked_dense_oracle() {
    let d = 4;
    let mut checked = 0;
    for n in [8, 16, 32] {
        for w in [2, 4, 8] {
            for r in [1, 2, 4] {
                if r > w || w > n || n % w != 0 || w % r != 0 {
                    continue;
                }
                let cfg = AttentionConfig::new(n, w, r, 1, d).unwrap();
                let (q, k, v) = qkv::<f64>(n, d, (n * 100 + w * 10 + r) as u64);
                for offset in 0..r {
                    let got = dilated_attention(&q, &k, &v, &cfg, offset).unwrap();
                    let want = masked_attention(&q, &k, &v, &dilated_mask(n, w, r, offset), cfg.score_scale());
                    assert!(got.max_abs_diff(&want).unwrap() <= 1e-10, "N={n} w={w} r={r} γ={offset}");
                }
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 24);
}

#[test]
fn ragged_tail_matches_oracle() {
    let cfg = AttentionConfig::new(11, 4, 2, 1, 3).unwrap();
    let (q, k, v) = qkv::<f64>(11, 3, 7);
    for offset in 0..2 {
        let got = dilated_attention(&q, &k, &v, &cfg, offset).unwrap();
        let want = masked_attention(&q, &k, &v, &dilated_mask(11, 4, 2, offset), cfg.score_scale());
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-10);
    }
}

#[test]
fn naive_matches_loop_oracle() {
    let (q, k, v) = qkv::<f64>(9, 5, 1);
    let want = masked_attention(&q, &k, &v, &full_mask(9), 1.0 / 5f64.sqrt());
    assert!(naive_attention(&q, &k, &v).unwrap().max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn tiled_matches_naive() {
    for seed in 0..100u64 {
        let n = 1 + (seed as usize * 37) % 128;
        let d = 1 + (seed as usize % 8);
        let (q, k, v) = qkv::<f64>(n, d, seed);
        let (qf, kf, vf) = qkv::<f32>(n, d, seed);
        let reference = naive_attention(&q, &k, &v).unwrap();
        let reference_f = naive_attention(&qf, &kf, &vf).unwrap();
        for tile in [1, 2, 8, n] {
            let got = tiled_attention(&q, &k, &v, tile).unwrap();
            assert!(got.max_abs_diff(&reference).unwrap() <= 1e-12, "seed {seed} tile {tile}");
            let got = tiled_attention(&qf, &kf, &vf, tile).unwrap();
            assert!(got.max_abs_diff(&reference_f).unwrap() <= 1e-5, "f32 seed {seed} tile {tile}");
        }
    }
}

#[test]
fn tiled_score_buffer_is_bounded() {
    let (q, k, v) = qkv::<f64>(64, 8, 3);
    for tile in [1, 4, 16, 63] {
        let (_, stats) = tiled_attention_scaled(&q, &k, &v, 0.3, tile).unwrap();
        assert!(stats.peak_score_scalars <= 64 * tile);
    }
    let (out, _) = tiled_attention_scaled(&q, &k, &v, 0.3, 5).unwrap();
    assert!(out.max_abs_diff(&naive_attention_scaled(&q, &k, &v, 0.3).unwrap()).unwrap() <= 1e-12);
}

#[test]
fn collapse_to_dense() {
    for seed in 0..20u64 {
        let n = 16 + seed as usize;
        let cfg = AttentionConfig::new(n, n, 1, 1, 8).unwrap();
        let (q, k, v) = qkv::<f32>(n, 8, seed);
        let got = dilated_attention(&q, &k, &v, &cfg, 0).unwrap();
        assert!(got.max_abs_diff(&naive_attention(&q, &k, &v).unwrap()).unwrap() <= 1e-6);
    }
}

#[test]
fn tiled_kernel_inside_dilated_segments() {
    let base = AttentionConfig::new(64, 16, 2, 1, 8).unwrap();
    let tiled = base.clone().with_kernel(Kernel::Tiled { tile_size: 3 });
    let (q, k, v) = qkv::<f64>(64, 8, 5);
    for offset in 0..2 {
        let a = dilated_attention(&q, &k, &v, &base, offset).unwrap();
        let b = dilated_attention(&q, &k, &v, &tiled, offset).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    }
}

#[test]
fn worker_count_does_not_change_bits() {
    let pool = worker_pool(4).unwrap();
    for seed in 0..10u64 {
        let cfg = AttentionConfig::new(64, 8, 2, 1, 4).unwrap();
        let (q, k, v) = qkv::<f64>(64, 4, seed);
        for offset in 0..2 {
            let serial = dilated_attention_with(&q, &k, &v, &cfg, offset, Exec::Serial).unwrap();
            let parallel = dilated_attention_with(&q, &k, &v, &cfg, offset, Exec::Pool(&pool)).unwrap();
            assert_eq!(serial, parallel);
        }
    }
}

#[test]
fn multi_head_covers_every_row() {
    let cfg = AttentionConfig::new(32, 8, 4, 4, 2).unwrap().with_full_coverage().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::randn(&[32, 8], 1.0, &mut rng);
    let w = MultiHeadWeights::random(8, 0.5, &mut rng);
    let out = multi_head_dilated(&x, &w, &cfg, Exec::Serial).unwrap();
    assert!(out.all_finite());
    // a head whose stream misses a row gives that row's slice exactly zero
    let q = x.matmul(&w.wq).unwrap();
    let head0 = dilated_attention(&q.slice_cols(0, 2).unwrap(), &q.slice_cols(0, 2).unwrap(), &q.slice_cols(0, 2).unwrap(), &cfg, 0).unwrap();
    assert!(head0.row(1).iter().all(|&x| x == 0.0));
    assert!(head0.row(0).iter().any(|&x| x != 0.0));
    let mut short = AttentionConfig::new(32, 8, 4, 2, 2).unwrap();
    short.full_coverage = true;
    assert!(short.validate().is_err() || short.check_coverage().is_err());
}
