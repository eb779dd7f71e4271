//! Scene description files and synthetic input views.
//!
//! Schema (JSON, `"schema": 1`):
//!
//! ```json
//! {
//!   "schema": 1,
//!   "seed": 21,
//!   "sdf": { "kind": "sphere", "center": [0.5, 0.5, 0.5], "radius": 0.3 },
//!   "rig": { "views": 4, "radius": 2.2, "elevation_deg": 20.0, "focal_ratio": 1.4 },
//!   "cameras": [
//!     { "fx": 90.0, "fy": 90.0, "cx": 64.0, "cy": 64.0,
//!       "rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [0.5,0.5,-1.7],
//!       "width": 128, "height": 128 }
//!   ]
//! }
//! ```
//!
//! `rotation` is row-major world-from-camera, `translation` the camera centre.
//! Cameras from `rig` come first, explicit `cameras` are appended. `sdf` kinds
//! are `sphere`, `box`, `union` (with `children`) and `constant`.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LsrmError, Result};
use crate::geometry::{eval_sdf, orbit_rig, sphere_trace, Camera, SdfField, SdfSpec};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl CameraSpec {
    pub fn build(&self) -> Result<Camera> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        Camera::new(k, r, Vector3::from(self.translation), self.width, self.height)
    }

    pub fn from_camera(c: &Camera) -> Self {
        CameraSpec {
            fx: c.intrinsics[(0, 0)],
            fy: c.intrinsics[(1, 1)],
            cx: c.intrinsics[(0, 2)],
            cy: c.intrinsics[(1, 2)],
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| c.rotation[(i, j)])),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            width: c.width,
            height: c.height,
        }
    }
}

fn default_size() -> u32 {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigSpec {
    pub views: usize,
    pub radius: f64,
    #[serde(default)]
    pub elevation_deg: f64,
    #[serde(default)]
    pub azimuth_offset_deg: f64,
    pub focal_ratio: f64,
    #[serde(default = "default_size")]
    pub size: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig: Option<RigSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cameras: Vec<CameraSpec>,
    pub sdf: SdfSpec,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub seed: u64,
    pub cameras: Vec<Camera>,
    pub field: SdfField,
}

impl SceneFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn build(&self) -> Result<Scene> {
        if self.schema != SCHEMA_VERSION {
            return Err(LsrmError::config(format!(
                "scene schema {} is not supported (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        let mut cameras = Vec::new();
        if let Some(r) = &self.rig {
            cameras.extend(orbit_rig(
                r.views,
                r.radius,
                r.elevation_deg,
                r.azimuth_offset_deg,
                r.focal_ratio,
                r.size,
            )?);
        }
        for c in &self.cameras {
            cameras.push(c.build()?);
        }
        if cameras.is_empty() {
            return Err(LsrmError::config("scene has no cameras"));
        }
        Ok(Scene {
            seed: self.seed,
            cameras,
            field: self.sdf.build(),
        })
    }
}

impl Scene {
    /// Sphere of radius 0.3 at the cube centre seen by an orbit rig.
    pub fn sphere(views: usize) -> Self {
        SceneFile::preset("sphere", views).build().expect("preset is valid")
    }
}

pub const PRESETS: [&str; 5] = ["sphere", "small_sphere", "box", "union", "empty"];

impl SceneFile {
    /// Built-in scenes: `sphere`, `small_sphere`, `box`, `union`, `empty`.
    pub fn preset(name: &str, views: usize) -> Self {
        let sdf = match name {
            "box" => SdfSpec::Box {
                center: [0.52, 0.47, 0.5],
                half_extents: [0.22, 0.15, 0.27],
            },
            "union" => SdfSpec::Union {
                children: vec![
                    SdfSpec::Sphere {
                        center: [0.36, 0.5, 0.45],
                        radius: 0.18,
                    },
                    SdfSpec::Box {
                        center: [0.64, 0.52, 0.55],
                        half_extents: [0.12, 0.2, 0.16],
                    },
                ],
            },
            "small_sphere" => SdfSpec::Sphere {
                center: [0.46, 0.53, 0.5],
                radius: 0.15,
            },
            "empty" => SdfSpec::Constant { value: 1.0 },
            _ => SdfSpec::Sphere {
                center: [0.5, 0.5, 0.5],
                radius: 0.3,
            },
        };
        SceneFile {
            schema: SCHEMA_VERSION,
            seed: 21,
            rig: Some(RigSpec {
                views,
                radius: 2.2,
                elevation_deg: 20.0,
                azimuth_offset_deg: 15.0,
                focal_ratio: 1.4,
                size: 128,
            }),
            cameras: Vec::new(),
            sdf,
        }
    }
}

/// Synthetic input view: normal-shaded colour `[H, W, 3]` and a binary
/// silhouette `[H, W]`, found by sphere tracing the analytic field.
pub fn render_view(field: &SdfField, camera: &Camera) -> (Tensor, Tensor) {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let o = camera.center();
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut rgb = Vec::with_capacity(w * 3);
            let mut alpha = Vec::with_capacity(w);
            for c in 0..w {
                let d = camera.pixel_direction(Vector2::new(c as f64 + 0.5, r as f64 + 0.5));
                match sphere_trace(field, &o, &d) {
                    Some(t) => {
                        let p = o + t * d;
                        let e = 1e-4;
                        let n = Vector3::new(
                            eval_sdf(field, &(p + Vector3::x() * e)) - eval_sdf(field, &(p - Vector3::x() * e)),
                            eval_sdf(field, &(p + Vector3::y() * e)) - eval_sdf(field, &(p - Vector3::y() * e)),
                            eval_sdf(field, &(p + Vector3::z() * e)) - eval_sdf(field, &(p - Vector3::z() * e)),
                        );
                        let n = if n.norm() > 0.0 { n.normalize() } else { n };
                        rgb.extend(n.iter().map(|&v| (0.5 + 0.5 * v) as f32));
                        alpha.push(1.0);
                    }
                    None => {
                        rgb.extend([0.0f32; 3]);
                        alpha.push(0.0);
                    }
                }
            }
            (rgb, alpha)
        })
        .collect();
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut alpha = Vec::with_capacity(w * h);
    for (a, b) in rows {
        rgb.extend(a);
        alpha.extend(b);
    }
    (
        Tensor::new(vec![h, w, 3], rgb).expect("sized"),
        Tensor::new(vec![h, w], alpha).expect("sized"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_json_round_trip() {
        let mut file = SceneFile::preset("union", 3);
        let cam = file.build().unwrap().cameras[0].clone();
        file.cameras.push(CameraSpec::from_camera(&cam));
        let text = serde_json::to_string_pretty(&file).unwrap();
        let back: SceneFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
        let scene = back.build().unwrap();
        assert_eq!(scene.cameras.len(), 4);
        assert!((scene.cameras[3].rotation - cam.rotation).abs().max() < 1e-12);
    }

    #[test]
    fn wrong_schema_rejected() {
        let mut file = SceneFile::preset("sphere", 2);
        file.schema = 2;
        assert!(file.build().is_err());
    }

    #[test]
    fn silhouette_is_centred() {
        let scene = Scene::sphere(2);
        let cam = scene.cameras[0].resized(32, 32);
        let (rgb, alpha) = render_view(&scene.field, &cam);
        assert_eq!(rgb.shape(), &[32, 32, 3]);
        assert_eq!(alpha.data()[16 * 32 + 16], 1.0);
        assert_eq!(alpha.data()[0], 0.0);
    }
}
