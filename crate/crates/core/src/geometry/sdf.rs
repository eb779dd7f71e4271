use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::interp::{trilinear_interpolate, Point3};
use crate::tensor::{Mlp, Tensor};

/// Radius of the bounding-sphere prior used by [`s_bias`].
pub const BIAS_RADIUS: f64 = 0.45;

/// Signed-distance prior added to decoded SDFs: distance to a sphere of
/// radius 0.45 around the cube centre, so empty border space decodes positive.
pub fn s_bias(p: &Point3) -> f64 {
    (p - Vector3::new(0.5, 0.5, 0.5)).norm() - BIAS_RADIUS
}

/// SDF decoded from a dense feature volume: `MLP_s(trilinear(X; p)) + s_bias(p)`.
#[derive(Clone, Debug)]
pub struct DecodedSdf {
    pub volume: Tensor,
    pub head: Mlp,
}

impl DecodedSdf {
    pub fn eval(&self, p: &Point3) -> f64 {
        let q = p.map(|c| c.clamp(0.0, 1.0));
        let f = trilinear_interpolate(&self.volume, &q).expect("volume validated at construction");
        let s = self.head.forward_vec(&f).expect("head width validated at construction");
        s[0] as f64 + s_bias(&q)
    }
}

/// Scalar field whose zero level set is the object surface; negative inside.
#[derive(Clone, Debug)]
pub enum SdfField {
    Sphere { center: Point3, radius: f64 },
    Box { center: Point3, half_extents: Vector3<f64> },
    Union(Vec<SdfField>),
    /// Spatially constant value; handy for degenerate-case tests.
    Constant(f64),
    Decoded(Arc<DecodedSdf>),
}

impl SdfField {
    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        SdfField::Sphere {
            center: Vector3::from(center),
            radius,
        }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3]) -> Self {
        SdfField::Box {
            center: Vector3::from(center),
            half_extents: Vector3::from(half_extents),
        }
    }

    pub fn is_analytic(&self) -> bool {
        match self {
            SdfField::Decoded(_) => false,
            SdfField::Union(c) => c.iter().all(SdfField::is_analytic),
            _ => true,
        }
    }
}

pub fn eval_sdf(field: &SdfField, p: &Point3) -> f64 {
    match field {
        SdfField::Sphere { center, radius } => (p - center).norm() - radius,
        SdfField::Box {
            center,
            half_extents,
        } => {
            let q = (p - center).abs() - half_extents;
            let outside = q.map(|c| c.max(0.0)).norm();
            let inside = q.max().min(0.0);
            outside + inside
        }
        SdfField::Union(children) => children
            .iter()
            .map(|c| eval_sdf(c, p))
            .fold(f64::INFINITY, f64::min),
        SdfField::Constant(v) => *v,
        SdfField::Decoded(d) => d.eval(p),
    }
}

/// Serializable description of analytic geometry for scene files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SdfSpec {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
    Union { children: Vec<SdfSpec> },
    Constant { value: f64 },
}

impl SdfSpec {
    pub fn build(&self) -> SdfField {
        match self {
            SdfSpec::Sphere { center, radius } => SdfField::sphere(*center, *radius),
            SdfSpec::Box {
                center,
                half_extents,
            } => SdfField::cuboid(*center, *half_extents),
            SdfSpec::Union { children } => {
                SdfField::Union(children.iter().map(SdfSpec::build).collect())
            }
            SdfSpec::Constant { value } => SdfField::Constant(*value),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_values() {
        let s = SdfField::sphere([0.5, 0.5, 0.5], 0.3);
        assert!((eval_sdf(&s, &Vector3::new(0.5, 0.5, 0.5)) + 0.3).abs() < 1e-12);
        assert!(eval_sdf(&s, &Vector3::new(0.5, 0.5, 0.8)).abs() < 1e-12);
    }

    #[test]
    fn bias_values() {
        assert!((s_bias(&Vector3::new(0.5, 0.5, 0.5)) + 0.45).abs() < 1e-12);
        assert!(s_bias(&Vector3::new(0.95, 0.5, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn union_is_min() {
        let a = SdfField::sphere([0.3, 0.5, 0.5], 0.1);
        let b = SdfField::cuboid([0.7, 0.5, 0.5], [0.1, 0.2, 0.1]);
        let u = SdfField::Union(vec![a.clone(), b.clone()]);
        for p in [Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.7, 0.5, 0.5)] {
            assert_eq!(eval_sdf(&u, &p), eval_sdf(&a, &p).min(eval_sdf(&b, &p)));
        }
    }

    #[test]
    fn spec_round_trip() {
        let spec = SdfSpec::Union {
            children: vec![
                SdfSpec::Sphere {
                    center: [0.5; 3],
                    radius: 0.2,
                },
                SdfSpec::Box {
                    center: [0.4; 3],
                    half_extents: [0.1; 3],
                },
            ],
        };
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"union\""));
        assert_eq!(serde_json::from_str::<SdfSpec>(&json).unwrap(), spec);
    }
}
