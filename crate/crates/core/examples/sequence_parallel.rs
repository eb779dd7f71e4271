//! The sparse stage sharded over simulated workers: identical output to the
//! serial stage, with every collective logged.

use lsrm::parallel::{bytes_of, parallel_sparse_stage, CollectiveKind};
use lsrm::pipeline::{build_instance, sparse_stage_forward, stage_one, InstanceOptions, Model, ModelConfig};
use lsrm::scene::SceneFile;
use lsrm::tokenizer::ZeroFeatures;

fn main() -> lsrm::Result<()> {
    let cfg = ModelConfig::desk();
    let model = Model::random(&cfg, 2)?;
    let scene = SceneFile::preset("small_sphere", cfg.views).build()?;
    let s1 = stage_one(&model, &scene, &ZeroFeatures { dim: cfg.d_feat })?;
    let inst = build_instance(&model, &scene, &s1, &InstanceOptions::default())?;
    let (x, y) = sparse_stage_forward(&inst.x_up.features, &inst.y_up.features, &model.sparse_blocks, &inst.ctx)?;

    for workers in [1, 2, 4] {
        let par = parallel_sparse_stage(&inst, &model.sparse_blocks, workers)?;
        let log = &par.topology.message_log;
        let diff = par.x_s.max_abs_diff(&x).max(par.y_s.max_abs_diff(&y));
        println!(
            "W={workers}: loads {:?}, max diff vs serial {diff:.1e}, bytes all_to_all {} kv_gather {} window {}",
            par.topology.loads,
            bytes_of(log, CollectiveKind::AllToAll),
            bytes_of(log, CollectiveKind::AllGatherKv),
            bytes_of(log, CollectiveKind::WindowLocal),
        );
    }
    Ok(())
}
