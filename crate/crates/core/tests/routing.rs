use lsrm::harness::checks::routing_scene;
use lsrm::nsa::Selection;
use lsrm::oracle;
use lsrm::geometry::{Camera, SdfSpec};
use lsrm::routing::{
    build_routing_plan, jaccard, Budgets, ImageIndex, RoutingInputs, RoutingPlan, TokenPoints, VolumeIndex,
};
use lsrm::scene::{RigSpec, SceneFile};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn scene_file(center: [f64; 3], radius: f64, views: usize, elevation: f64) -> SceneFile {
    let mut f = SceneFile::preset("sphere", views);
    f.sdf = SdfSpec::Sphere { center, radius };
    f.rig = Some(RigSpec {
        views,
        radius: 2.4,
        elevation_deg: elevation,
        azimuth_offset_deg: 10.0,
        focal_ratio: 1.3,
        size: 128,
    });
    f
}

fn plan_of(cams: &[Camera], vi: &VolumeIndex, ii: &ImageIndex, vp: &TokenPoints, ip: &TokenPoints, budgets: Budgets) -> RoutingPlan {
    build_routing_plan(&RoutingInputs {
        vol_points: vp,
        img_points: ip,
        vol_index: vi,
        img_index: ii,
        cameras: cams,
        budgets,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Lists are distinct occupied blocks within budget, volume lists are
    /// nearest first, the plan equals the oracle, and an exact rotation of
    /// the whole scene leaves it unchanged.
    #[test]
    fn plan_invariants(cx in 0.35..0.65f64, cy in 0.35..0.65f64, r in 0.1..0.3f64, views in 2usize..5, el in -30.0..40.0f64) {
        let scene = scene_file([cx, cy, 0.5], r, views, el).build().unwrap();
        let rs = routing_scene(&scene, 24, 16).unwrap();
        let b = Budgets { per_view: 6, v2v: 5, v2i: 4, i2v: 3, i2i: 7 };
        let vi = VolumeIndex::new(&rs.vol_part);
        let ii = ImageIndex::new(&rs.img_part, &rs.img_points).unwrap();
        let plan = plan_of(&rs.cameras, &vi, &ii, &rs.vol_points, &rs.img_points, b);

        for (name, table) in plan.tables() {
            let (part, budget) = match name {
                "v2v" => (&rs.vol_part, b.v2v),
                "v2i" => (&rs.img_part, b.v2i),
                "i2v" => (&rs.vol_part, b.i2v),
                _ => (&rs.img_part, b.i2i),
            };
            for l in &table.lists {
                prop_assert!(l.len() <= budget);
                let mut sorted = l.clone();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), l.len());
                prop_assert!(l.iter().all(|&blk| part.slot_of_block(blk).is_some()));
            }
        }
        let occupied = rs.vol_part.num_occupied();
        prop_assert!(plan.v2v.lists.iter().all(|l| l.len() == b.v2v.min(occupied)));

        let vb = oracle::blocks_from_coords(&rs.vol.coords, rs.vol.grid_res, 8, false);
        let ib = oracle::blocks_from_coords(&rs.img.coords, rs.img.grid_res, 8, true);
        for (t, p) in rs.vol_points.points.iter().enumerate().step_by(7) {
            prop_assert_eq!(&plan.v2v.lists[t], &oracle::route_volume(*p, &vb, rs.vol.grid_res, 8, b.v2v));
            prop_assert_eq!(&plan.v2i.lists[t], &oracle::route_image(*p, &rs.cameras, &ib, rs.img.grid_res, 8, &rs.img_points.points, b.per_view, b.v2i));
        }

        // quarter turn about z through the origin: exact in floating point
        let rot = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let zero = Vector3::zeros();
        let cams: Vec<_> = rs.cameras.iter().map(|c| c.transformed(&rot, &zero)).collect();
        let turned = plan_of(
            &cams,
            &vi.transformed(&rot, &zero),
            &ii.transformed(&rot, &zero),
            &rs.vol_points.transformed(&rot, &zero),
            &rs.img_points.transformed(&rot, &zero),
            b,
        );
        prop_assert_eq!(turned, plan);
    }
}

proptest! {
    #[test]
    fn jaccard_is_a_similarity(a in prop::collection::vec(0u32..20, 0..12), b in prop::collection::vec(0u32..20, 0..12)) {
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
        let mut rev = a.clone();
        rev.reverse();
        prop_assert_eq!(jaccard(&rev, &b), j);
    }

    #[test]
    fn plan_dump_round_trips(tables in prop::collection::vec(prop::collection::vec(prop::collection::vec(any::<u32>(), 0..6), 0..8), 4)) {
        let sel = |i: usize| Selection { lists: tables[i].clone() };
        let plan = RoutingPlan { v2v: sel(0), v2i: sel(1), i2v: sel(2), i2i: sel(3) };
        let bytes = plan.encode();
        prop_assert_eq!(RoutingPlan::decode(&bytes).unwrap(), plan);
        prop_assert!(RoutingPlan::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(RoutingPlan::decode(&longer).is_err());
    }
}
