use mvdet_core::denoising::{denoise_mask, DenoiseLayout};
use mvdet_core::groupattn::{build_mask, masked_self_attention, GroupMask, MultiHeadAttention};
use mvdet_core::nn::ParamInit;
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cameras(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<usize> {
    let mut cams: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
    cams.sort_unstable();
    cams
}

#[test]
fn perturbing_one_camera_leaves_others_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..100 {
        let n = rng.gen_range(2..40);
        let cams = random_cameras(&mut rng, n, 6);
        let groups = GroupMask::from_cameras(&cams);
        let mask = build_mask(&groups, None).unwrap();
        let attn = MultiHeadAttention::new(8, 2, &mut ParamInit::new(case)).unwrap();
        let x = Array2::from_shape_fn((n, 8), |_| rng.gen_range(-2.0..2.0));
        let target = cams[rng.gen_range(0..n)];
        let mut y = x.clone();
        for i in 0..n {
            if cams[i] == target {
                for k in 0..8 {
                    y[[i, k]] += rng.gen_range(-5.0..5.0);
                }
            }
        }
        let a = masked_self_attention(x.view(), &mask, &attn).unwrap();
        let b = masked_self_attention(y.view(), &mask, &attn).unwrap();
        for i in (0..n).filter(|&i| cams[i] != target) {
            for k in 0..8 {
                assert_eq!(a[[i, k]].to_bits(), b[[i, k]].to_bits());
            }
        }
    }
}

#[test]
fn dropping_denoise_part_leaves_match_part_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for case in 0..50 {
        let n_match = rng.gen_range(1..30);
        let n_groups = rng.gen_range(1..4);
        let lens: Vec<usize> = (0..n_groups).map(|_| rng.gen_range(1..8)).collect();
        let layout = DenoiseLayout::stacked(n_match, &lens);
        let mut cams = random_cameras(&mut rng, n_match, 6);
        for &l in &lens {
            cams.extend(random_cameras(&mut rng, l, 6));
        }
        let total = cams.len();
        let full_mask = denoise_mask(&layout, &GroupMask::from_cameras(&cams)).unwrap();
        let match_mask = build_mask(&GroupMask::from_cameras(&cams[..n_match]), None).unwrap();
        let attn = MultiHeadAttention::new(8, 4, &mut ParamInit::new(100 + case)).unwrap();
        let x = Array2::from_shape_fn((total, 8), |_| rng.gen_range(-2.0..2.0));
        let full = masked_self_attention(x.view(), &full_mask, &attn).unwrap();
        let alone = masked_self_attention(x.slice(s![..n_match, ..]), &match_mask, &attn).unwrap();
        for i in 0..n_match {
            for k in 0..8 {
                assert_eq!(full[[i, k]].to_bits(), alone[[i, k]].to_bits());
            }
        }
    }
}

proptest! {
    #[test]
    fn mask_is_symmetric_with_unit_diagonal(cams in proptest::collection::vec(0usize..4, 1..30), lens in proptest::collection::vec(0usize..5, 0..4)) {
        let mut sorted = cams.clone();
        sorted.sort_unstable();
        let n_match = sorted.len() / 2;
        let dn: usize = lens.iter().sum();
        prop_assume!(n_match + dn <= sorted.len());
        let layout = DenoiseLayout::stacked(sorted.len() - dn, &lens);
        let mask = denoise_mask(&layout, &GroupMask::from_cameras(&sorted)).unwrap();
        for i in 0..sorted.len() {
            prop_assert!(mask.allowed(i, i));
            for j in 0..sorted.len() {
                prop_assert_eq!(mask.allowed(i, j), mask.allowed(j, i));
                let same = sorted[i] == sorted[j] && layout.part_of(i) == layout.part_of(j);
                prop_assert_eq!(mask.allowed(i, j), same);
            }
        }
    }
}
