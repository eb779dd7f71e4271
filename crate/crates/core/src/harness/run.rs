//! End-to-end run: Stage 1, masks, routing, Stage 2 (serial and sharded),
//! artifact dumps and a JSON summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::Serialize;

use super::compare::{compare_layers, OverlapRow, Reference};
use super::config::{RunConfig, SceneRef};
use crate::blocks::{occupancy_stats, OccupancyStats};
use crate::error::Result;
use crate::geometry::sphere_trace;
use crate::golden;
use crate::parallel::{bytes_of, imbalance_report, message_log_csv, parallel_sparse_stage, CollectiveKind, ImbalanceRow};
use crate::pipeline::{
    build_instance, decode_point, decode_sparse_volume, stage_one, FeatureVolume, Model, QueryMode, SparseInstance, StageOne,
};
use crate::tensor::Tensor;
use crate::tokenizer::{informative_voxel_mask, TokenSet, MASK_SAMPLES_PER_AXIS};

/// Side of the query grid written to `field.gv`.
pub const FIELD_GRID: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenCounts {
    pub volume: usize,
    pub image: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub status: String,
    pub scene: String,
    pub seed: u64,
    pub workers: usize,
    pub routing: crate::pipeline::RoutingMode,
    pub coarse_tokens: TokenCounts,
    pub fine_tokens: TokenCounts,
    pub tau: f64,
    pub occupancy: Option<[OccupancyStats; 2]>,
    pub imbalance: Option<ImbalanceRow>,
    pub overlap: Vec<OverlapRow>,
    /// Max-abs difference between sharded and serial Stage 2.
    pub parity_max_abs: Option<f64>,
    pub bytes_by_kind: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
}

fn scene_label(cfg: &RunConfig) -> String {
    match &cfg.scene {
        SceneRef::Preset(p) => format!("preset:{p}"),
        SceneRef::Path(p) => p.display().to_string(),
    }
}

fn field_samples(fv: &FeatureVolume, model: &Model, mode: QueryMode) -> Result<Tensor> {
    let n = FIELD_GRID;
    let c = model.config.z_channels + 1;
    let mut data = Vec::with_capacity(n * n * n * c);
    for i in 0..n * n * n {
        let at = |v: usize| (v as f64 + 0.5) / n as f64;
        let p = Vector3::new(at(i / (n * n)), at((i / n) % n), at(i % n));
        let (z, s) = decode_point(fv, &model.heads, &p, mode)?;
        data.extend(z);
        data.push(s as f32);
    }
    Tensor::new(vec![n, n, n, c], data)
}

struct Writer {
    dir: PathBuf,
    written: Vec<String>,
}

impl Writer {
    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn tensors(&mut self, name: &str, t: &[&Tensor]) -> Result<()> {
        self.bytes(name, &golden::encode(t))
    }

    fn tokens(&mut self, stem: &str, t: &TokenSet) -> Result<()> {
        self.tensors(&format!("{stem}.gv"), &[&t.features])?;
        self.bytes(&format!("{stem}.coords"), &golden::encode_coords(&t.coords))
    }
}

/// Executes a full run and writes its artifacts into `cfg.out`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    let model = Model::random(&cfg.model, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut w = Writer {
        dir: cfg.out.clone(),
        written: Vec::new(),
    };
    let s1 = stage_one(&model, &scene, cfg.feature_provider().as_ref())?;
    w.tensors("stage1.gv", &[&s1.x_d, &s1.y_d, &s1.dense_volume])?;
    let inst = build_instance(&model, &scene, &s1, &cfg.instance_options())?;
    let mut summary = RunSummary {
        status: "ok".into(),
        scene: scene_label(cfg),
        seed: cfg.seed,
        workers: cfg.workers,
        routing: cfg.routing,
        coarse_tokens: TokenCounts {
            volume: s1.x_d.rows(),
            image: s1.y_d.rows(),
        },
        fine_tokens: TokenCounts {
            volume: inst.x_up.len(),
            image: inst.y_up.len(),
        },
        tau: inst.tau,
        occupancy: None,
        imbalance: None,
        overlap: Vec::new(),
        parity_max_abs: None,
        bytes_by_kind: BTreeMap::new(),
        artifacts: Vec::new(),
    };
    if inst.is_empty() {
        summary.status = "no active tokens".into();
    } else {
        sparse_artifacts(cfg, &model, &s1, &inst, &mut w, &mut summary)?;
    }
    summary.artifacts = w.written.clone();
    summary.artifacts.push("summary.json".into());
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(cfg.out.join("summary.json"), json)?;
    Ok(summary)
}

fn sparse_artifacts(
    cfg: &RunConfig,
    model: &Model,
    s1: &StageOne,
    inst: &SparseInstance,
    w: &mut Writer,
    summary: &mut RunSummary,
) -> Result<()> {
    w.tokens("tokens_vol", &inst.x_up)?;
    w.tokens("tokens_img", &inst.y_up)?;
    w.bytes("plan.bin", &inst.plan.encode())?;
    let (cmp, (x_s, y_s)) = compare_layers(inst, &model.sparse_blocks, cfg.budgets, Reference::Score)?;
    w.tensors("stage2.gv", &[&x_s, &y_s])?;

    let stage1 = FeatureVolume {
        dense: s1.dense_volume.clone(),
        sparse: decode_sparse_volume(&inst.x_up, &model.volume_decoder)?,
        mask: inst.vol_mask.clone(),
    };
    let stage2 = FeatureVolume {
        sparse: decode_sparse_volume(
            &TokenSet {
                features: x_s.clone(),
                ..inst.x_up.clone()
            },
            &model.volume_decoder,
        )?,
        ..stage1.clone()
    };
    w.tensors(
        "field.gv",
        &[&field_samples(&stage1, model, QueryMode::Dense)?, &field_samples(&stage2, model, QueryMode::Blend)?],
    )?;

    let par = parallel_sparse_stage(inst, &model.sparse_blocks, cfg.workers)?;
    let log = &par.topology.message_log;
    w.bytes("message_log.csv", message_log_csv(log).as_bytes())?;
    summary.parity_max_abs = Some(x_s.max_abs_diff(&par.x_s).max(y_s.max_abs_diff(&par.y_s)) as f64);
    for kind in [
        CollectiveKind::AllToAll,
        CollectiveKind::AllGatherKv,
        CollectiveKind::WindowLocal,
        CollectiveKind::ReverseAllToAll,
    ] {
        summary.bytes_by_kind.insert(kind.name().into(), bytes_of(log, kind));
    }
    summary.occupancy = Some([occupancy_stats(inst.vol_part()), occupancy_stats(inst.img_part())]);
    summary.imbalance = imbalance_report(&[(inst.vol_part(), inst.img_part())], cfg.workers)?.pop();
    summary.overlap = cmp.rows;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DryRunEstimate {
    pub scene: String,
    pub s_vol: usize,
    pub s_img: usize,
    pub views: usize,
    pub coarse_tokens: TokenCounts,
    /// Informative voxels of the analytic field at `s_vol`.
    pub fine_volume_tokens: usize,
    /// Fine patches whose centre ray hits the surface; silhouettes only grow
    /// this by the boundary ring.
    pub fine_image_tokens_estimate: usize,
    pub dense_volume_tokens: usize,
    pub dense_image_tokens: usize,
}

/// Token estimates without running either network.
pub fn dry_run(cfg: &RunConfig) -> Result<DryRunEstimate> {
    cfg.validate()?;
    let m = &cfg.model;
    let scene = cfg.scene()?;
    let (s_vol, s_img) = (m.s_vol(), m.s_img());
    let tau = cfg.tau.unwrap_or(1.0 / s_vol as f64);
    let fine_volume_tokens = informative_voxel_mask(&scene.field, s_vol, tau, MASK_SAMPLES_PER_AXIS)?.count();
    let mut hits = 0;
    for cam in scene.cameras.iter().take(m.views) {
        let cam = cam.resized(s_img as u32, s_img as u32);
        let o = cam.center();
        for r in 0..s_img {
            for c in 0..s_img {
                let d = cam.pixel_direction(Vector2::new(c as f64 + 0.5, r as f64 + 0.5));
                hits += sphere_trace(&scene.field, &o, &d).is_some() as usize;
            }
        }
    }
    Ok(DryRunEstimate {
        scene: scene_label(cfg),
        s_vol,
        s_img,
        views: m.views,
        coarse_tokens: TokenCounts {
            volume: m.s_vol_d.pow(3),
            image: m.views * m.s_img_d.pow(2),
        },
        fine_volume_tokens,
        fine_image_tokens_estimate: hits,
        dense_volume_tokens: s_vol.pow(3),
        dense_image_tokens: m.views * s_img * s_img,
    })
}

/// Artifact files a completed non-empty run writes, in order.
pub const ARTIFACTS: [&str; 10] = [
    "stage1.gv",
    "tokens_vol.gv",
    "tokens_vol.coords",
    "tokens_img.gv",
    "tokens_img.coords",
    "plan.bin",
    "stage2.gv",
    "field.gv",
    "message_log.csv",
    "summary.json",
];

/// Byte-compares every artifact of two run directories; returns the names
/// of differing or missing files.
pub fn diff_runs(a: &Path, b: &Path) -> Result<Vec<String>> {
    let mut differing = Vec::new();
    for name in ARTIFACTS {
        let (pa, pb) = (a.join(name), b.join(name));
        match (pa.exists(), pb.exists()) {
            (false, false) => {}
            (true, true) => {
                if std::fs::read(&pa)? != std::fs::read(&pb)? {
                    differing.push(name.to_string());
                }
            }
            _ => differing.push(name.to_string()),
        }
    }
    Ok(differing)
}
