//! Geometry-driven block routing: each token's nearest volume blocks and the
//! image blocks its surface point projects into, checked against brute force.

use lsrm::harness::checks::routing_scene;
use lsrm::oracle;
use lsrm::routing::{build_routing_plan, Budgets, ImageIndex, RoutingInputs, VolumeIndex};
use lsrm::scene::SceneFile;

fn main() -> lsrm::Result<()> {
    let scene = SceneFile::preset("box", 4).build()?;
    let rs = routing_scene(&scene, 32, 32)?;
    let budgets = Budgets::default();
    let plan = build_routing_plan(&RoutingInputs {
        vol_points: &rs.vol_points,
        img_points: &rs.img_points,
        vol_index: &VolumeIndex::new(&rs.vol_part),
        img_index: &ImageIndex::new(&rs.img_part, &rs.img_points)?,
        cameras: &rs.cameras,
        budgets,
    });
    for (name, table) in plan.tables() {
        let mean = table.lists.iter().map(Vec::len).sum::<usize>() as f64 / table.queries().max(1) as f64;
        println!("{name}: {} queries, {mean:.2} blocks each", table.queries());
    }

    let vb = oracle::blocks_from_coords(&rs.vol.coords, rs.vol.grid_res, 8, false);
    let ib = oracle::blocks_from_coords(&rs.img.coords, rs.img.grid_res, 8, true);
    let mut agree = 0;
    for (t, p) in rs.vol_points.points.iter().enumerate() {
        let v = oracle::route_volume(*p, &vb, rs.vol.grid_res, 8, budgets.v2v);
        let i = oracle::route_image(*p, &rs.cameras, &ib, rs.img.grid_res, 8, &rs.img_points.points, budgets.per_view, budgets.v2i);
        agree += (plan.v2v.lists[t] == v && plan.v2i.lists[t] == i) as usize;
    }
    println!("volume queries matching the brute-force router: {agree}/{}", rs.vol_points.points.len());
    let misses = rs.img_points.miss.iter().filter(|&&m| m).count();
    println!("image tokens whose ray misses the surface: {misses}");
    Ok(())
}
