use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{LsrmError, Result};
use crate::interp::Point3;
use crate::tensor::Tensor;

/// Pinhole camera with OpenCV axes (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    /// Columns are the camera axes expressed in world space.
    pub rotation: Matrix3<f64>,
    /// Camera centre in world space.
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Camera {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > 1e-6 || self.rotation.determinant() <= 0.0 {
            return Err(LsrmError::config(format!(
                "camera rotation is not a proper orthonormal matrix (|RᵀR - I| = {err:e})"
            )));
        }
        if self.intrinsics[(0, 0)] <= 0.0 || self.intrinsics[(1, 1)] <= 0.0 {
            return Err(LsrmError::config("camera focal length must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(LsrmError::config("camera image size must be positive"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; focal given in pixels.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        let intrinsics = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(intrinsics, rotation, eye, width, height)
    }

    /// Same pose, intrinsics rescaled to a new image size.
    pub fn resized(&self, width: u32, height: u32) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let mut k = self.intrinsics;
        k.row_mut(0).scale_mut(sx);
        k.row_mut(1).scale_mut(sy);
        Camera {
            intrinsics: k,
            width,
            height,
            ..self.clone()
        }
    }

    /// `T * camera`: moves the camera rigidly with the world.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Camera {
        Camera {
            rotation: rotation * self.rotation,
            translation: rotation * self.translation + translation,
            ..self.clone()
        }
    }

    pub fn center(&self) -> Point3 {
        self.translation
    }

    /// Unit world-space direction through a (sub)pixel position.
    pub fn pixel_direction(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        let k = &self.intrinsics;
        let yc = (pixel.y - k[(1, 2)]) / k[(1, 1)];
        let xc = (pixel.x - k[(0, 2)] - k[(0, 1)] * yc) / k[(0, 0)];
        (self.rotation * Vector3::new(xc, yc, 1.0)).normalize()
    }

    pub fn to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Pinhole projection to pixel coordinates plus depth along the optical axis.
pub fn project_point(camera: &Camera, p: &Point3) -> Result<(Vector2<f64>, f64)> {
    let pc = camera.to_camera(p);
    if pc.z <= 0.0 {
        return Err(LsrmError::BehindCamera { depth: pc.z });
    }
    let uvw = camera.intrinsics * pc;
    Ok((Vector2::new(uvw.x / uvw.z, uvw.y / uvw.z), pc.z))
}

/// Inverse of [`project_point`] for a known depth.
pub fn unproject(camera: &Camera, pixel: Vector2<f64>, depth: f64) -> Point3 {
    let k_inv = camera
        .intrinsics
        .try_inverse()
        .expect("validated intrinsics are invertible");
    let pc = k_inv * Vector3::new(pixel.x, pixel.y, 1.0) * depth;
    camera.rotation * pc + camera.translation
}

/// Per-cell Plücker encoding `(d, o × d)` on a `grid = (w, h)` lattice of
/// cell centres spanning the image. Output is `[h, w, 6]`.
pub fn pluecker_rays(camera: &Camera, grid: (usize, usize)) -> Result<Tensor> {
    camera.validate()?;
    let (gw, gh) = grid;
    let o = camera.center();
    let mut data = Vec::with_capacity(gw * gh * 6);
    let sx = camera.width as f64 / gw as f64;
    let sy = camera.height as f64 / gh as f64;
    for r in 0..gh {
        for c in 0..gw {
            let px = Vector2::new((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
            let d = camera.pixel_direction(px);
            let m = o.cross(&d);
            data.extend([d.x, d.y, d.z, m.x, m.y, m.z].iter().map(|&v| v as f32));
        }
    }
    Tensor::new(vec![gh, gw, 6], data)
}

/// Cameras evenly spaced on a ring around the cube centre.
pub fn orbit_rig(
    views: usize,
    radius: f64,
    elevation_deg: f64,
    azimuth_offset_deg: f64,
    focal_ratio: f64,
    size: u32,
) -> Result<Vec<Camera>> {
    let c = Vector3::new(0.5, 0.5, 0.5);
    let el = elevation_deg.to_radians();
    (0..views)
        .map(|i| {
            let az = azimuth_offset_deg.to_radians()
                + 2.0 * std::f64::consts::PI * i as f64 / views as f64;
            let eye = c + radius
                * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            Camera::look_at(
                eye,
                c,
                Vector3::new(0.0, 0.0, 1.0),
                focal_ratio * size as f64,
                size,
                size,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(size: u32) -> Camera {
        Camera::new(
            Matrix3::new(100.0, 0.0, size as f64 / 2.0, 0.0, 100.0, size as f64 / 2.0, 0.0, 0.0, 1.0),
            Matrix3::identity(),
            Vector3::zeros(),
            size,
            size,
        )
        .unwrap()
    }

    #[test]
    fn centre_pixel_ray_through_origin() {
        let rays = pluecker_rays(&identity_cam(5), (5, 5)).unwrap();
        let r = &rays.data()[(2 * 5 + 2) * 6..(2 * 5 + 2) * 6 + 6];
        assert!((r[2] - 1.0).abs() < 1e-6 && r[0].abs() < 1e-6 && r[1].abs() < 1e-6);
        assert!(r[3..].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn translation_changes_only_moment() {
        let cam = identity_cam(4);
        let t = Vector3::new(0.3, -1.0, 2.0);
        let moved = Camera {
            translation: t,
            ..cam.clone()
        };
        let a = pluecker_rays(&cam, (4, 4)).unwrap();
        let b = pluecker_rays(&moved, (4, 4)).unwrap();
        for i in 0..16 {
            let (ra, rb) = (&a.data()[i * 6..i * 6 + 6], &b.data()[i * 6..i * 6 + 6]);
            assert_eq!(&ra[..3], &rb[..3]);
            let d = Vector3::new(ra[0] as f64, ra[1] as f64, ra[2] as f64);
            let m = t.cross(&d);
            for k in 0..3 {
                assert!((rb[3 + k] as f64 - m[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = orbit_rig(3, 2.0, 10.0, 0.0, 1.1, 64).unwrap().remove(1);
        let axis = cam.rotation.column(2).into_owned();
        let p = cam.center() + 1.7 * axis;
        let (px, depth) = project_point(&cam, &p).unwrap();
        assert!((px - Vector2::new(32.0, 32.0)).norm() < 1e-9);
        assert!((depth - 1.7).abs() < 1e-12);
    }

    #[test]
    fn focal_scales_offsets() {
        let cam = identity_cam(64);
        let mut cam2 = cam.clone();
        cam2.intrinsics[(0, 0)] *= 2.0;
        cam2.intrinsics[(1, 1)] *= 2.0;
        let p = Vector3::new(0.2, -0.1, 3.0);
        let (a, _) = project_point(&cam, &p).unwrap();
        let (b, _) = project_point(&cam2, &p).unwrap();
        let pp = Vector2::new(32.0, 32.0);
        assert!(((b - pp) - 2.0 * (a - pp)).norm() < 1e-9);
    }

    #[test]
    fn behind_camera_is_error() {
        let cam = identity_cam(8);
        assert!(matches!(
            project_point(&cam, &Vector3::new(0.0, 0.0, -1.0)),
            Err(LsrmError::BehindCamera { .. })
        ));
    }

    #[test]
    fn invalid_rotation_rejected() {
        let mut cam = identity_cam(8);
        cam.rotation[(0, 0)] = 1.5;
        assert!(cam.validate().is_err());
        let mut cam = identity_cam(8);
        cam.intrinsics[(0, 0)] = -3.0;
        assert!(cam.validate().is_err());
    }
}
