//! WS³ CSR inference against the dense gather-GEMM-scatter path.

mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use support::{conv_fixture, CONV_CASES};
use ws3_core::layers::conv::{sparse_conv_features, ConvWeights};
use ws3_core::ws3::{ws3_conv_features_with, ExecMode, Ws3Kernel};

fn random_prune(w: &mut ConvWeights, rate: f64, rng: &mut ChaCha8Rng) {
    let mask: Vec<bool> = (0..w.numel()).map(|_| !rng.gen_bool(rate)).collect();
    w.set_mask(mask).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ws3_matches_dense_and_modes_agree(
        seed in any::<u64>(),
        case_idx in 0usize..4,
        grid in 2i32..=8,
        n_in in 1usize..=8,
        n_out in 1usize..=8,
        rate in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = conv_fixture(&mut rng, CONV_CASES[case_idx], grid, n_in, n_out);
        random_prune(&mut f.w, rate, &mut rng);
        let dense = sparse_conv_features(&f.x, &f.w, &f.km).unwrap();
        let kernel = Ws3Kernel::from_weights(&f.w).unwrap();
        let (r, rs) = ws3_conv_features_with(&f.x, &kernel, &f.km, ExecMode::Reference).unwrap();
        let (q, qs) = ws3_conv_features_with(&f.x, &kernel, &f.km, ExecMode::Fast).unwrap();
        prop_assert!(r.max_abs_diff(&dense) < 1e-10);
        prop_assert_eq!(r.as_slice(), q.as_slice());
        prop_assert_eq!(rs.macs, qs.macs);
    }
}

#[test]
fn all_ones_mask_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in CONV_CASES {
        let f = conv_fixture(&mut rng, case, 6, 5, 4);
        let kernel = Ws3Kernel::from_weights(&f.w).unwrap();
        let (y, stats) = ws3_conv_features_with(&f.x, &kernel, &f.km, ExecMode::Reference).unwrap();
        let dense = sparse_conv_features(&f.x, &f.w, &f.km).unwrap();
        assert!(y.max_abs_diff(&dense) < 1e-10, "{case:?}");
        let pairs: usize = f.km.pairs.iter().map(|p| p.len()).sum();
        assert_eq!(stats.macs, pairs * 5 * 4);
    }
}

#[test]
fn all_zero_mask_gives_zero_output_and_skips_every_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in CONV_CASES {
        let mut f = conv_fixture(&mut rng, case, 6, 3, 3);
        f.w.set_mask(vec![false; f.w.numel()]).unwrap();
        let kernel = Ws3Kernel::from_weights(&f.w).unwrap();
        let (y, stats) = ws3_conv_features_with(&f.x, &kernel, &f.km, ExecMode::Fast).unwrap();
        assert_eq!(y.rows(), f.output.len());
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(stats.offsets_executed, 0);
        assert_eq!(stats.offsets_skipped, f.w.kernel_volume());
        assert_eq!(stats.macs, 0);
    }
}

#[test]
fn heavily_masked_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in CONV_CASES {
        let mut f = conv_fixture(&mut rng, case, 8, 8, 8);
        random_prune(&mut f.w, 0.99, &mut rng);
        let kernel = Ws3Kernel::from_weights(&f.w).unwrap();
        let (y, stats) = ws3_conv_features_with(&f.x, &kernel, &f.km, ExecMode::Reference).unwrap();
        let dense = sparse_conv_features(&f.x, &f.w, &f.km).unwrap();
        assert!(y.max_abs_diff(&dense) < 1e-10, "{case:?}");
        let expected: usize = f
            .km
            .pairs
            .iter()
            .zip(&kernel.csr)
            .map(|(p, c)| p.len() * c.nnz())
            .sum();
        assert_eq!(stats.macs, expected);
    }
}
