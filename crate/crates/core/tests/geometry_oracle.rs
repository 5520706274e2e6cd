use mvdet_core::geometry::{project_anchor, Anchor3D, CameraView, Rig, EPS_DEPTH};
use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ego -> camera axes: camera x = -ego y, camera y = -ego z, camera z = ego x.
fn axes() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

fn random_view(rng: &mut ChaCha8Rng, id: usize) -> CameraView {
    let (w, h) = (rng.gen_range(200..1600u32), rng.gen_range(150..900u32));
    let fx = rng.gen_range(200.0..1500.0);
    let fy = fx * rng.gen_range(0.9..1.1);
    let cx = w as f64 * rng.gen_range(0.3..0.7);
    let cy = h as f64 * rng.gen_range(0.3..0.7);
    let rot = Rotation3::from_euler_angles(
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-3.1..3.1),
    );
    let pos = Vector3::new(
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(1.0..2.0),
    );
    // camera -> ego rotation is rot * axes^T; invert for ego -> camera
    let r = axes() * rot.matrix().transpose();
    let t = -(r * pos);
    let mut e = Matrix4::identity();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
    CameraView::new(id, k, e, w, h).unwrap()
}

/// Full 3x4 projection matrix product on homogeneous coordinates.
fn oracle_project(view: &CameraView, p: [f64; 3]) -> Option<[f64; 2]> {
    let k = view.intrinsics();
    let e = view.extrinsic();
    let ph = [p[0], p[1], p[2], 1.0];
    let mut cam = [0.0; 3];
    for (r, c) in cam.iter_mut().enumerate() {
        *c = (0..4).map(|j| e[(r, j)] * ph[j]).sum();
    }
    if cam[2] <= EPS_DEPTH {
        return None;
    }
    let mut img = [0.0; 3];
    for (r, c) in img.iter_mut().enumerate() {
        *c = (0..3).map(|j| k[(r, j)] * cam[j]).sum();
    }
    Some([img[0] / img[2], img[1] / img[2]])
}

fn oracle_corners(a: &Anchor3D) -> Vec<[f64; 3]> {
    let (c, s) = (a.yaw.cos(), a.yaw.sin());
    let mut pts = vec![a.center];
    for dz in [-0.5, 0.5] {
        for (dl, dw) in [(0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)] {
            let (lx, ly) = (dl * a.size[1], dw * a.size[0]);
            pts.push([
                a.center[0] + c * lx - s * ly,
                a.center[1] + s * lx + c * ly,
                a.center[2] + dz * a.size[2],
            ]);
        }
    }
    pts
}

#[test]
fn projection_matches_homogeneous_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let views: Vec<CameraView> = (0..20).map(|i| random_view(&mut rng, i)).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..20_000 {
        let v = &views[rng.gen_range(0..views.len())];
        let p = [
            rng.gen_range(-60.0..60.0),
            rng.gen_range(-60.0..60.0),
            rng.gen_range(-3.0..5.0),
        ];
        let got = v.project_point(&Vector3::from(p));
        let want = oracle_project(v, p);
        assert_eq!(got.is_some(), want.is_some());
        if let (Some(a), Some(b)) = (got, want) {
            worst = worst.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
    }
    assert!(worst <= 1e-9, "max error {worst}");
}

#[test]
fn validity_matches_nine_point_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rig = Rig::surround_six();
    for _ in 0..5_000 {
        let a = Anchor3D::new(
            [
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-1.0..3.0),
            ],
            [
                rng.gen_range(0.3..5.0),
                rng.gen_range(0.3..12.0),
                rng.gen_range(0.5..4.0),
            ],
            rng.gen_range(-3.2..3.2),
            [0.0; 2],
        );
        let v = &rig.views()[rng.gen_range(0..rig.len())];
        let (w, h) = (v.width() as f64, v.height() as f64);
        let brute = oracle_corners(&a)
            .into_iter()
            .filter_map(|p| oracle_project(v, p))
            .any(|uv| uv[0] > 0.0 && uv[0] < w && uv[1] > 0.0 && uv[1] < h);
        assert_eq!(project_anchor(v, &a).valid, brute);
    }
}

#[test]
fn rig_json_round_trip() {
    let rig = Rig::surround_six();
    let text = serde_json::to_string(&rig).unwrap();
    let back: Rig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, rig);
}

proptest! {
    #[test]
    fn clipped_rect_stays_inside_image(
        x in -30.0..30.0f64, y in -30.0..30.0f64, z in -1.0..3.0f64,
        w in 0.2..4.0f64, l in 0.2..10.0f64, h in 0.2..4.0f64, yaw in -3.2..3.2f64,
    ) {
        let rig = Rig::surround_six();
        let a = Anchor3D::new([x, y, z], [w, l, h], yaw, [0.0; 2]);
        for v in rig.views() {
            let p = project_anchor(v, &a);
            prop_assert_eq!(p.valid, p.rect.is_some());
            if let Some(r) = p.rect {
                let [x0, y0, x1, y1] = r.corners();
                prop_assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= v.width() as f64 && y1 <= v.height() as f64);
                prop_assert!(x0 <= x1 && y0 <= y1);
            }
            if p.center_in_view {
                prop_assert!(p.valid);
            }
        }
    }

    #[test]
    fn yaw_turn_is_invisible(yaw in -3.0..3.0f64, x in 3.0..30.0f64) {
        let rig = Rig::surround_six();
        let a = Anchor3D::new([x, 1.0, 0.5], [1.9, 4.5, 1.6], yaw, [0.0; 2]);
        let b = Anchor3D { yaw: yaw + std::f64::consts::PI, ..a };
        let pa = project_anchor(&rig.views()[0], &a);
        let pb = project_anchor(&rig.views()[0], &b);
        prop_assert_eq!(pa.valid, pb.valid);
        if let (Some(ra), Some(rb)) = (pa.rect, pb.rect) {
            for (u, v) in ra.corners().iter().zip(rb.corners()) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }
    }
}
