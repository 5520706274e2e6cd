use mvdet_core::crop_scale::{derive_view, extend_rig, front_rear_rules, original_camera, CropRule, Placement};
use mvdet_core::geometry::Rig;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn two_path_projection_agrees() {
    let rig = Rig::surround_six();
    let source = rig.view(0).unwrap();
    let original = original_camera(source, [1600, 900]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for placement in Placement::ALL {
        for rate in [1.5, 2.0, 2.5] {
            let rule = CropRule::new(0, placement, rate);
            let (derived, map) = derive_view(&original, &rule, [704, 256], 9).unwrap();
            let mut n = 0;
            let mut worst: f64 = 0.0;
            while n < 2_000 {
                let p = Vector3::new(
                    rng.gen_range(2.0..120.0),
                    rng.gen_range(-40.0..40.0),
                    rng.gen_range(-2.0..5.0),
                );
                let (Some(a), Some(b)) = (derived.project_point(&p), original.project_point(&p)) else {
                    continue;
                };
                if !derived.contains(a) || !original.contains(b) {
                    continue;
                }
                let c = map.apply(b);
                worst = worst.max((a[0] - c[0]).abs()).max((a[1] - c[1]).abs());
                n += 1;
            }
            assert!(worst <= 1e-6, "{placement:?} x{rate}: {worst}");
        }
    }
}

#[test]
fn crop_views_are_appended_with_fresh_ids() {
    let rig = Rig::surround_six();
    let ext = extend_rig(&rig, &front_rear_rules(2.0)).unwrap();
    assert_eq!(ext.len(), 8);
    let ids: Vec<usize> = ext.views().iter().map(|v| v.view_id).collect();
    assert_eq!(ids, vec![0, 1, 2, 3, 4, 5, 6, 7]);
    assert_eq!(ext.view(6).unwrap().derived_from(), Some(0));
    assert_eq!(ext.view(7).unwrap().derived_from(), Some(3));
    // doubled focal length with the same principal point for a centered crop
    let (a, b) = (ext.view(0).unwrap(), ext.view(6).unwrap());
    assert!((b.fx() - 2.0 * a.fx()).abs() < 1e-9);
    assert!((b.cx() - a.cx()).abs() < 1e-9 && (b.cy() - a.cy()).abs() < 1e-9);
}

#[test]
fn bad_rates_are_rejected() {
    let rig = Rig::surround_six();
    for rate in [1.0, 0.5, f64::NAN] {
        assert!(extend_rig(&rig, &[CropRule::new(0, Placement::CenteredOnFocal, rate)]).is_err());
    }
    let dup = [
        CropRule::new(0, Placement::CenteredOnFocal, 2.0),
        CropRule::new(0, Placement::LeftAlignedHorizon, 2.0),
    ];
    assert!(extend_rig(&rig, &dup).is_err());
}
