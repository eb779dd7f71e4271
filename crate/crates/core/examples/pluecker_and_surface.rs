//! Camera rays: Pluecker encoding, projection round trips and the surface
//! point each ray lands on, by sphere tracing and by the opacity peak.

use lsrm::geometry::{
    orbit_rig, pluecker_rays, project_point, surface_point_for_ray, unproject, SdfField, DEFAULT_BETA,
};
use nalgebra::{Vector2, Vector3};

fn main() -> lsrm::Result<()> {
    let cams = orbit_rig(4, 2.4, 20.0, 0.0, 1.2, 64)?;
    let cam = &cams[0];
    let rays = pluecker_rays(cam, (8, 8))?;
    let worst = (0..64)
        .map(|i| {
            let r = &rays.data()[i * 6..i * 6 + 6];
            (r[0] * r[3] + r[1] * r[4] + r[2] * r[5]).abs()
        })
        .fold(0.0f32, f32::max);
    println!("pluecker grid {:?}, max |d . m| = {worst:.2e}", rays.shape());

    let p = Vector3::new(0.6, 0.4, 0.55);
    let (px, depth) = project_point(cam, &p)?;
    let back = unproject(cam, px, depth);
    println!("project {:.2?} -> pixel ({:.2}, {:.2}) depth {depth:.3}, round trip error {:.2e}", p.as_slice(), px.x, px.y, (back - p).norm());

    let field = SdfField::sphere([0.5, 0.5, 0.5], 0.3);
    for (r, c) in [(32.0, 32.0), (32.0, 20.0), (2.0, 2.0)] {
        let d = cam.pixel_direction(Vector2::new(c, r));
        let ray = surface_point_for_ray(&field, cam.center(), d, DEFAULT_BETA)?;
        match (ray.t_hit, ray.opacity_peak) {
            (Some(t), Some(peak)) => {
                let hit = ray.point_at(t);
                println!("pixel ({c}, {r}): hit {:.3?}, opacity peak {:.3?}, |hit - peak| = {:.3}", hit.as_slice(), peak.as_slice(), (hit - peak).norm());
            }
            _ => println!("pixel ({c}, {r}): misses the surface"),
        }
    }
    Ok(())
}
