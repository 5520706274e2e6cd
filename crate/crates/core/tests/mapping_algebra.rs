use mvdet_core::allocation::{allocate, gather_2d, scatter_mean, AllocationLimits, MappingMatrix};
use mvdet_core::geometry::{project_anchor, Anchor3D, Rig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_anchor(rng: &mut ChaCha8Rng) -> Anchor3D {
    Anchor3D::new(
        [
            rng.gen_range(-35.0..35.0),
            rng.gen_range(-35.0..35.0),
            rng.gen_range(-0.5..2.0),
        ],
        [
            rng.gen_range(0.4..3.0),
            rng.gen_range(0.4..8.0),
            rng.gen_range(0.5..3.0),
        ],
        rng.gen_range(-3.2..3.2),
        [0.0; 2],
    )
}

fn random_rig(rng: &mut ChaCha8Rng) -> Rig {
    let mut rig = Rig::surround_six();
    let keep = rng.gen_range(1..=6);
    while rig.len() > keep {
        let id = rig.views()[rng.gen_range(0..rig.len())].view_id;
        rig = rig.without_view(id);
    }
    rig
}

fn dense(m: &MappingMatrix) -> Array2<f64> {
    let mut t = Array2::zeros((m.n_3d(), m.n_2d()));
    for (row, col) in m.entries() {
        t[[row, col]] = 1.0;
    }
    t
}

#[test]
fn gather_and_scatter_match_dense_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let n = rng.gen_range(0..=32);
        let anchors: Vec<Anchor3D> = (0..n).map(|_| random_anchor(&mut rng)).collect();
        let rig = random_rig(&mut rng);
        let alloc = allocate(&anchors, &rig, &AllocationLimits::default()).unwrap();
        let t = dense(&alloc.mapping);
        let c = 5;
        let q3 = Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0));
        let q2 = Array2::from_shape_fn((alloc.n_2d(), c), |_| rng.gen_range(-1.0..1.0));

        let g = gather_2d(&alloc.mapping, q3.view()).unwrap();
        let want_g = t.t().dot(&q3);
        assert!((&g - &want_g).iter().all(|d| d.abs() <= 1e-12));

        let s = scatter_mean(&alloc.mapping, q2.view()).unwrap();
        let sums = t.dot(&q2);
        for i in 0..n {
            let cnt: f64 = t.row(i).sum();
            for k in 0..c {
                let want = if cnt > 0.0 { sums[[i, k]] / cnt } else { 0.0 };
                assert!((s[[i, k]] - want).abs() <= 1e-12);
            }
        }
        for j in 0..alloc.n_2d() {
            assert_eq!(t.column(j).sum(), 1.0);
        }
    }
}

#[test]
fn columns_follow_validity() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let rig = Rig::surround_six();
    let anchors: Vec<Anchor3D> = (0..64).map(|_| random_anchor(&mut rng)).collect();
    let alloc = allocate(&anchors, &rig, &AllocationLimits::unlimited()).unwrap();
    let mut expected = Vec::new();
    for v in rig.views() {
        for (i, a) in anchors.iter().enumerate() {
            let p = project_anchor(v, a);
            if p.valid && !alloc.dropped_degenerate.contains(&(i, v.view_id)) {
                expected.push((i, v.view_id, p.center_in_view));
            }
        }
    }
    let got: Vec<(usize, usize, bool)> = (0..alloc.n_2d())
        .map(|j| {
            (
                alloc.mapping.owner(j),
                alloc.mapping.camera_of_col()[j],
                alloc.center_in_view[j],
            )
        })
        .collect();
    assert_eq!(got, expected);
}

#[test]
fn straddling_anchor_gets_two_columns() {
    // long box ahead and to the left: center in the front view, a corner in
    // the front-left view only
    let rig = Rig::surround_six();
    let mut found = false;
    for k in 0..400 {
        let y = 2.0 + 0.05 * k as f64;
        let a = Anchor3D::new([12.0, y, 0.8], [2.0, 6.0, 1.6], 1.2, [0.0; 2]);
        let views: Vec<_> = rig.views().iter().map(|v| project_anchor(v, &a)).collect();
        if views[0].center_in_view && views[5].valid && !views[5].center_in_view && views[1..5].iter().all(|p| !p.valid)
        {
            let alloc = allocate(&[a], &rig, &AllocationLimits::default()).unwrap();
            assert_eq!(alloc.n_2d(), 2);
            assert_eq!(alloc.mapping.owners(), &[0, 0]);
            assert_eq!(alloc.center_in_view, vec![true, false]);
            found = true;
            break;
        }
    }
    assert!(found, "no straddling configuration in sweep");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncation_cap_is_respected(seed in 0u64..10_000, cap in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors: Vec<Anchor3D> = (0..48).map(|_| random_anchor(&mut rng)).collect();
        let limits = AllocationLimits { max_truncated_per_camera: cap, ..AllocationLimits::default() };
        let alloc = allocate(&anchors, &Rig::surround_six(), &limits).unwrap();
        for (_, t) in alloc.truncated_per_camera() {
            prop_assert!(t <= cap);
        }
        // groups are contiguous and in rig order
        let cams = alloc.mapping.camera_of_col();
        prop_assert!(cams.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn gather_then_scatter_is_identity_on_covered_rows(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors: Vec<Anchor3D> = (0..16).map(|_| random_anchor(&mut rng)).collect();
        let alloc = allocate(&anchors, &Rig::surround_six(), &AllocationLimits::default()).unwrap();
        let q = Array2::from_shape_fn((16, 3), |(i, k)| (i * 3 + k) as f64 * 0.25);
        let back = scatter_mean(&alloc.mapping, gather_2d(&alloc.mapping, q.view()).unwrap().view()).unwrap();
        let counts = alloc.mapping.row_counts();
        for i in 0..16 {
            for k in 0..3 {
                let want = if counts[i] > 0 { q[[i, k]] } else { 0.0 };
                prop_assert!((back[[i, k]] - want).abs() < 1e-12);
            }
        }
    }
}
