use lsrm::geometry::{pluecker_rays, project_point, unproject, Camera};
use lsrm::interp::trilinear_interpolate;
use lsrm::tensor::Tensor;
use lsrm::LsrmError;
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

fn camera(az: f64, el: f64, dist: f64, focal: f64) -> Camera {
    let c = Vector3::repeat(0.5);
    let eye = c + dist * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
    Camera::look_at(eye, c, Vector3::new(0.0, 0.0, 1.0), focal, 96, 64).unwrap()
}

fn cameras() -> impl Strategy<Value = Camera> {
    (0.0..6.28f64, -1.2..1.2f64, 1.8..5.0f64, 40.0..300.0f64).prop_map(|(a, e, d, f)| camera(a, e, d, f))
}

fn unit_point() -> impl Strategy<Value = Vector3<f64>> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn project_then_unproject_is_identity(cam in cameras(), p in unit_point()) {
        let (px, depth) = project_point(&cam, &p).unwrap();
        prop_assert!(depth > 0.0);
        let back = unproject(&cam, Vector2::new(px.x, px.y), depth);
        prop_assert!((back - p).norm() <= 1e-9);
    }

    #[test]
    fn pluecker_moments_are_orthogonal(cam in cameras()) {
        let rays = pluecker_rays(&cam, (12, 9)).unwrap();
        prop_assert_eq!(rays.shape(), &[9, 12, 6]);
        let o = cam.center();
        for r in rays.data().chunks(6) {
            let d = Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64);
            let m = Vector3::new(r[3] as f64, r[4] as f64, r[5] as f64);
            prop_assert!((d.norm() - 1.0).abs() < 1e-6);
            prop_assert!(d.dot(&m).abs() <= 1e-6);
            // the moment is the camera centre crossed with the direction
            prop_assert!((o.cross(&d) - m).norm() <= 1e-5);
        }
    }

    #[test]
    fn trilinear_stays_within_corner_values(seed in 0u64..1000, p in unit_point()) {
        let s = lsrm::rng::SeedStream::new(seed);
        let vol = s.uniform(&[5, 4, 3, 2], 1.0);
        let got = trilinear_interpolate(&vol, &p).unwrap();
        for (c, g) in got.iter().enumerate() {
            let vals = vol.data().iter().skip(c).step_by(2);
            let (lo, hi) = vals.fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            prop_assert!(*g >= lo - 1e-6 && *g <= hi + 1e-6);
        }
    }

    #[test]
    fn trilinear_reproduces_affine_fields(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64, e in -2.0..2.0f64,
                                           u in 0.0..1.0f64, v in 0.0..1.0f64, w in 0.0..1.0f64) {
        let n = 6usize;
        let f = |x: f64, y: f64, z: f64| a + b * x + c * y + e * z;
        let at = |i: usize| (i as f64 + 0.5) / n as f64;
        let vol = Tensor::from_fn(&[n, n, n, 1], |i| f(at(i / 36), at((i / 6) % 6), at(i % 6)) as f32);
        let span = |t: f64| 0.5 / n as f64 + t * (1.0 - 1.0 / n as f64);
        let p = Vector3::new(span(u), span(v), span(w));
        let got = trilinear_interpolate(&vol, &p).unwrap()[0] as f64;
        prop_assert!((got - f(p.x, p.y, p.z)).abs() <= 1e-5);
    }
}

#[test]
fn points_behind_the_camera_are_rejected() {
    let cam = camera(0.3, 0.2, 3.0, 100.0);
    let behind = cam.center() + (cam.center() - Vector3::repeat(0.5));
    assert!(matches!(project_point(&cam, &behind), Err(LsrmError::BehindCamera { .. })));
}
