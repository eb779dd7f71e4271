//! The two-stage pipeline: dense coarse stage, mask-guided upsampling, sparse
//! fine stage, then field queries before and after refinement.

use lsrm::pipeline::{
    build_instance, decode_point, decode_sparse_volume, sparse_stage_forward, stage_one, FeatureVolume,
    InstanceOptions, Model, ModelConfig, QueryMode,
};
use lsrm::scene::SceneFile;
use lsrm::tokenizer::{TokenSet, ZeroFeatures};
use nalgebra::Vector3;

fn main() -> lsrm::Result<()> {
    let cfg = ModelConfig::desk();
    let model = Model::random(&cfg, 1)?;
    let scene = SceneFile::preset("small_sphere", cfg.views).build()?;
    let s1 = stage_one(&model, &scene, &ZeroFeatures { dim: cfg.d_feat })?;
    println!("stage 1: {} volume and {} image tokens", s1.x_d.rows(), s1.y_d.rows());

    let inst = build_instance(&model, &scene, &s1, &InstanceOptions::default())?;
    println!(
        "upsampled: {} volume tokens of {}^3, {} image tokens (tau {:.4})",
        inst.x_up.len(),
        cfg.s_vol(),
        inst.y_up.len(),
        inst.tau
    );
    let (x_s, _) = sparse_stage_forward(&inst.x_up.features, &inst.y_up.features, &model.sparse_blocks, &inst.ctx)?;

    let coarse = FeatureVolume {
        dense: s1.dense_volume.clone(),
        sparse: decode_sparse_volume(&inst.x_up, &model.volume_decoder)?,
        mask: inst.vol_mask.clone(),
    };
    let refined = FeatureVolume {
        sparse: decode_sparse_volume(&TokenSet { features: x_s, ..inst.x_up.clone() }, &model.volume_decoder)?,
        ..coarse.clone()
    };
    // two refined voxel centres, then a point far from the surface
    let centers = inst.x_up.voxel_centers();
    for p in [centers[0], centers[centers.len() / 2], Vector3::new(0.05, 0.05, 0.05)] {
        let (_, s_dense) = decode_point(&coarse, &model.heads, &p, QueryMode::Dense)?;
        let (_, s_fine) = decode_point(&refined, &model.heads, &p, QueryMode::Blend)?;
        println!("sdf at {:.2?}: coarse {s_dense:+.4}, refined {s_fine:+.4}", p.as_slice());
    }
    Ok(())
}
