mod common;

use lsrm::pipeline::{
    build_instance, sparse_stage_forward, stage_one, GeometrySource, InstanceOptions, Model, RoutingMode,
};
use lsrm::routing::Budgets;
use lsrm::scene::SceneFile;
use lsrm::tokenizer::ZeroFeatures;

#[test]
fn stage_shapes_and_token_bookkeeping() {
    let cfg = common::tiny_config();
    let model = Model::random(&cfg, 2).unwrap();
    assert_eq!(model, Model::random(&cfg, 2).unwrap());
    let scene = common::tiny_scene(cfg.views);
    let s1 = stage_one(&model, &scene, &ZeroFeatures { dim: cfg.d_feat }).unwrap();
    assert_eq!(s1.x_d.shape(), &[cfg.s_vol_d.pow(3), cfg.d]);
    assert_eq!(s1.y_d.shape(), &[cfg.views * cfg.s_img_d.pow(2), cfg.d]);
    let sdf = 4 * cfg.s_vol_d;
    assert_eq!(s1.dense_volume.shape(), &[sdf, sdf, sdf, cfg.d_f]);

    let inst = build_instance(&model, &scene, &s1, &InstanceOptions::default()).unwrap();
    assert_eq!(inst.x_up.len(), inst.vol_mask.count());
    assert_eq!(inst.y_up.len(), inst.img_masks.iter().map(|m| m.count()).sum::<usize>());
    assert_eq!(inst.x_up.grid_res, [cfg.s_vol() as u32; 3]);
    assert_eq!(inst.y_up.grid_res, [cfg.views as u32, cfg.s_img() as u32, cfg.s_img() as u32]);
    assert!(inst.x_up.coords.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(inst.plan.v2v.queries(), inst.x_up.len());
    assert_eq!(inst.plan.i2i.queries(), inst.y_up.len());
}

#[test]
fn zero_stage_two_returns_the_upsampled_tokens() {
    let (mut model, inst) = common::tiny_instance(5, RoutingMode::ThreeD);
    model.zero_sparse_weights();
    let (xs, ys) = sparse_stage_forward(&inst.x_up.features, &inst.y_up.features, &model.sparse_blocks, &inst.ctx).unwrap();
    assert_eq!(xs, inst.x_up.features);
    assert_eq!(ys, inst.y_up.features);
}

#[test]
fn routing_modes_differ_once_budgets_bind() {
    let cfg = common::tiny_config();
    let model = Model::random(&cfg, 6).unwrap();
    let scene = common::tiny_scene(cfg.views);
    let s1 = stage_one(&model, &scene, &ZeroFeatures { dim: cfg.d_feat }).unwrap();
    let budgets = Budgets { per_view: 3, v2v: 2, v2i: 2, i2v: 2, i2i: 2 };
    let run = |routing| {
        let opts = InstanceOptions { routing, budgets, ..InstanceOptions::default() };
        let inst = build_instance(&model, &scene, &s1, &opts).unwrap();
        assert!(inst.vol_part().num_occupied() > 2 && inst.img_part().num_occupied() > 2);
        sparse_stage_forward(&inst.x_up.features, &inst.y_up.features, &model.sparse_blocks, &inst.ctx).unwrap()
    };
    let (a, _) = run(RoutingMode::ThreeD);
    let (b, _) = run(RoutingMode::Score);
    assert!(a.all_finite() && b.all_finite());
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn decoded_geometry_and_empty_scenes() {
    let cfg = common::tiny_config();
    let model = Model::random(&cfg, 8).unwrap();
    let scene = common::tiny_scene(cfg.views);
    let s1 = stage_one(&model, &scene, &ZeroFeatures { dim: cfg.d_feat }).unwrap();
    let opts = InstanceOptions {
        geometry: GeometrySource::Decoded,
        ..InstanceOptions::default()
    };
    // an untrained SDF head gives some mask; it only has to be consistent
    let inst = build_instance(&model, &scene, &s1, &opts).unwrap();
    assert_eq!(inst.x_up.len(), inst.vol_mask.count());

    let empty = SceneFile::preset("empty", cfg.views).build().unwrap();
    let s1 = stage_one(&model, &empty, &ZeroFeatures { dim: cfg.d_feat }).unwrap();
    let inst = build_instance(&model, &empty, &s1, &InstanceOptions::default()).unwrap();
    assert!(inst.is_empty());
}
