//! Cameras, Plücker rays, analytic and decoded SDF fields, and the
//! surface-point march that gives image tokens a 3D position.

mod camera;
mod march;
mod sdf;

pub use camera::{orbit_rig, pluecker_rays, project_point, unproject, Camera};
pub use march::{
    laplace_cdf, march_step, ray_cube_interval, sphere_trace, surface_point_for_ray,
    volsdf_density, RaySample, DEFAULT_BETA, N_MARCH, PEAK_MIN_WEIGHT,
};
pub use sdf::{eval_sdf, s_bias, DecodedSdf, SdfField, SdfSpec, BIAS_RADIUS};
