//! Single-ray VolSDF march used to place image tokens in 3D.

use nalgebra::Vector3;

use super::sdf::{eval_sdf, SdfField};
use crate::error::{LsrmError, Result};
use crate::interp::Point3;

/// Uniform samples across the cube diagonal.
pub const N_MARCH: usize = 128;
/// Default Laplace sharpness in object-space units.
pub const DEFAULT_BETA: f64 = 0.02;
/// A ray whose best sample contributes less than this much opacity has no peak.
pub const PEAK_MIN_WEIGHT: f64 = 0.05;

pub fn march_step() -> f64 {
    3f64.sqrt() / N_MARCH as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub origin: Point3,
    pub direction: Vector3<f64>,
    /// First sign change of the SDF along the ray.
    pub t_hit: Option<f64>,
    /// Sample carrying the largest opacity contribution.
    pub opacity_peak: Option<Point3>,
    pub peak_t: Option<f64>,
}

impl RaySample {
    pub fn point_at(&self, t: f64) -> Point3 {
        self.origin + t * self.direction
    }
}

/// Parametric entry/exit of a ray with the unit cube, clipped to `t >= 0`.
pub fn ray_cube_interval(origin: &Point3, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut t0 = 0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < 0.0 || origin[a] > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((0.0 - origin[a]) * inv, (1.0 - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Laplace CDF with zero mean and scale `beta`.
pub fn laplace_cdf(x: f64, beta: f64) -> f64 {
    if x <= 0.0 {
        0.5 * (x / beta).exp()
    } else {
        1.0 - 0.5 * (-x / beta).exp()
    }
}

/// VolSDF density `(1/beta) * Psi_beta(-s)`.
pub fn volsdf_density(s: f64, beta: f64) -> f64 {
    laplace_cdf(-s, beta) / beta
}

/// March the cube with a fixed step of `sqrt(3)/128`, convert SDF to density,
/// and return the sample with the largest transmittance-weighted alpha.
pub fn surface_point_for_ray(
    field: &SdfField,
    origin: Point3,
    direction: Vector3<f64>,
    beta: f64,
) -> Result<RaySample> {
    if !(beta > 0.0) {
        return Err(LsrmError::config(format!("beta must be positive, got {beta}")));
    }
    let len = direction.norm();
    if !(len > 0.0) || !len.is_finite() {
        return Err(LsrmError::config("ray direction must be non-zero"));
    }
    let direction = direction / len;
    let mut sample = RaySample {
        origin,
        direction,
        t_hit: None,
        opacity_peak: None,
        peak_t: None,
    };
    let Some((t0, t1)) = ray_cube_interval(&origin, &direction) else {
        return Ok(sample);
    };
    let step = march_step();
    let mut transmittance = 1.0;
    let mut best = (0.0, f64::NAN);
    let mut prev: Option<(f64, f64)> = None;
    for n in 0..N_MARCH {
        let t = t0 + (n as f64 + 0.5) * step;
        if t > t1 {
            break;
        }
        let s = eval_sdf(field, &sample.point_at(t));
        if sample.t_hit.is_none() {
            if let Some((tp, sp)) = prev {
                if (sp > 0.0) != (s > 0.0) {
                    sample.t_hit = Some(tp + step * sp / (sp - s));
                }
            }
        }
        prev = Some((t, s));
        let alpha = 1.0 - (-volsdf_density(s, beta) * step).exp();
        let weight = transmittance * alpha;
        if weight > best.0 {
            best = (weight, t);
        }
        transmittance *= 1.0 - alpha;
    }
    if best.0 >= PEAK_MIN_WEIGHT {
        sample.peak_t = Some(best.1);
        sample.opacity_peak = Some(sample.point_at(best.1));
    }
    Ok(sample)
}

/// Sphere tracing against an exact (1-Lipschitz) field; returns hit distance.
/// Used only to synthesize input silhouettes and colours.
pub fn sphere_trace(field: &SdfField, origin: &Point3, dir: &Vector3<f64>) -> Option<f64> {
    let (t0, t1) = ray_cube_interval(origin, dir)?;
    let mut t = t0;
    for _ in 0..256 {
        let s = eval_sdf(field, &(origin + t * dir));
        if s < 1e-5 {
            return Some(t);
        }
        t += s;
        if t > t1 {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_interval() {
        let (a, b) = ray_cube_interval(&Vector3::new(-1.0, 0.5, 0.5), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        assert!(ray_cube_interval(&Vector3::new(-1.0, 2.0, 0.5), &Vector3::new(1.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn density_is_half_over_beta_at_surface() {
        assert!((volsdf_density(0.0, 0.02) - 25.0).abs() < 1e-12);
        assert!(volsdf_density(-1.0, 0.02) > 49.9);
    }

    #[test]
    fn miss_has_no_peak() {
        let f = SdfField::sphere([0.5, 0.5, 0.5], 0.1);
        let r = surface_point_for_ray(&f, Vector3::new(-1.0, 0.05, 0.05), Vector3::new(1.0, 0.0, 0.0), 0.02).unwrap();
        assert!(r.opacity_peak.is_none() && r.t_hit.is_none());
        let outside = surface_point_for_ray(&f, Vector3::new(-1.0, 5.0, 0.5), Vector3::new(1.0, 0.0, 0.0), 0.02).unwrap();
        assert!(outside.opacity_peak.is_none());
    }

    #[test]
    fn peak_sits_at_first_crossing_for_sharp_beta() {
        let fields = [SdfField::sphere([0.5, 0.5, 0.5], 0.3), SdfField::cuboid([0.5, 0.45, 0.5], [0.2, 0.25, 0.15])];
        let origin = Vector3::new(-1.0, 0.1, -0.2);
        for f in &fields {
            let mut hits = 0;
            for i in 0..50 {
                let target = Vector3::new(0.5, 0.3 + 0.008 * i as f64, 0.35 + 0.006 * i as f64);
                let r = surface_point_for_ray(f, origin, target - origin, 0.005).unwrap();
                if let (Some(t), Some(pt)) = (r.t_hit, r.peak_t) {
                    hits += 1;
                    assert!((t - pt).abs() <= march_step(), "hit {t}, peak {pt}");
                }
            }
            assert!(hits > 20);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = SdfField::sphere([0.5; 3], 0.3);
        assert!(surface_point_for_ray(&f, Vector3::zeros(), Vector3::zeros(), 0.02).is_err());
        assert!(surface_point_for_ray(&f, Vector3::zeros(), Vector3::x(), 0.0).is_err());
    }

    #[test]
    fn sphere_trace_hits_sphere() {
        let f = SdfField::sphere([0.5, 0.5, 0.5], 0.3);
        let t = sphere_trace(&f, &Vector3::new(-1.0, 0.5, 0.5), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((t - 1.2).abs() < 1e-4);
    }
}
