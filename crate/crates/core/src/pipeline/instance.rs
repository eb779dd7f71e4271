use serde::{Deserialize, Serialize};

use crate::blocks::{partition, BlockPartition, BLOCK};
use crate::error::{LsrmError, Result};
use crate::geometry::{pluecker_rays, Camera, SdfField, DEFAULT_BETA};
use crate::routing::{
    build_routing_plan, image_token_points, to_slots, Budgets, ImageIndex, RoutingInputs,
    RoutingPlan, TokenPoints, VolumeIndex,
};
use crate::scene::{render_view, Scene};
use crate::tensor::Tensor;
use crate::tokenizer::{
    embed_image_tokens, factorized_pos_embed, foreground_patch_mask, full_grid_coords,
    informative_voxel_mask, patchify, upsample_select_tokens, FeatureProvider, PatchMask,
    TokenSet, VoxelMask, MASK_SAMPLES_PER_AXIS, PATCH,
};

use super::decode::decode_feature_volume;
use super::sparse::{Routing, SparseContext};
use super::Model;

/// Which SDF drives the informative mask and image-token surface points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometrySource {
    /// The scene's analytic field.
    #[default]
    Analytic,
    /// The SDF decoded from the Stage-1 feature volume.
    Decoded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Top-k by logits against compressed keys, recomputed every layer.
    Score,
    /// Geometric plan built once from Stage-1 geometry.
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceOptions {
    pub geometry: GeometrySource,
    /// Mask distance threshold; `None` means one fine voxel, `1 / S_vol`.
    pub tau: Option<f64>,
    pub beta: f64,
    pub budgets: Budgets,
    pub routing: RoutingMode,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        InstanceOptions {
            geometry: GeometrySource::Analytic,
            tau: None,
            beta: DEFAULT_BETA,
            budgets: Budgets::default(),
            routing: RoutingMode::ThreeD,
        }
    }
}

/// Stage-1 outputs.
#[derive(Clone, Debug)]
pub struct StageOne {
    pub cameras: Vec<Camera>,
    pub x0: Tensor,
    pub y0: Tensor,
    pub x_d: Tensor,
    pub y_d: Tensor,
    /// `[4 s_vol_d, 4 s_vol_d, 4 s_vol_d, d_f]`
    pub dense_volume: Tensor,
}

/// Renders the input views, embeds tokens and runs the dense transformer.
pub fn stage_one(model: &Model, scene: &Scene, provider: &dyn FeatureProvider) -> Result<StageOne> {
    let cfg = &model.config;
    let p = cfg.attention();
    if scene.cameras.len() < cfg.views {
        return Err(LsrmError::config(format!(
            "model uses {} views but the scene has {} cameras",
            cfg.views,
            scene.cameras.len()
        )));
    }
    let size = cfg.image_size();
    let cameras: Vec<Camera> = scene.cameras[..cfg.views]
        .iter()
        .map(|c| c.resized(size, size))
        .collect();
    let mut per_view = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let (rgb, _) = render_view(&scene.field, cam);
        let rays = pluecker_rays(cam, (size as usize, size as usize))?;
        per_view.push(embed_image_tokens(
            &patchify(&rgb, PATCH)?,
            &patchify(&rays, PATCH)?,
            &model.image_embed,
            provider,
            &rgb,
        )?);
    }
    let parts: Vec<&Tensor> = per_view.iter().collect();
    let y0 = Tensor::concat_rows(&parts, &[cfg.d])?;
    let x0 = factorized_pos_embed(&model.coarse_pe, &full_grid_coords(cfg.s_vol_d))?;
    let (x_d, y_d) = super::dense_stage_forward(&x0, &y0, &model.dense_blocks, &p)?;
    let dense_volume = decode_feature_volume(&x_d, cfg.s_vol_d, &model.volume_decoder)?;
    Ok(StageOne {
        cameras,
        x0,
        y0,
        x_d,
        y_d,
        dense_volume,
    })
}

/// Everything Stage 2 consumes, serial or sharded.
#[derive(Clone, Debug)]
pub struct SparseInstance {
    pub x_up: TokenSet,
    pub y_up: TokenSet,
    pub vol_mask: VoxelMask,
    pub img_masks: Vec<PatchMask>,
    pub vol_points: TokenPoints,
    pub img_points: TokenPoints,
    /// Block-id plan (always built, used only in 3D routing mode).
    pub plan: RoutingPlan,
    pub ctx: SparseContext,
    pub field: SdfField,
    pub tau: f64,
}

impl SparseInstance {
    pub fn vol_part(&self) -> &BlockPartition {
        &self.ctx.vol_part
    }

    pub fn img_part(&self) -> &BlockPartition {
        &self.ctx.img_part
    }

    pub fn is_empty(&self) -> bool {
        self.x_up.is_empty() || self.y_up.is_empty()
    }
}

/// Masks, fine tokens, partitions and routing for Stage 2.
pub fn build_instance(
    model: &Model,
    scene: &Scene,
    s1: &StageOne,
    opts: &InstanceOptions,
) -> Result<SparseInstance> {
    let cfg = &model.config;
    let (s_vol, s_img) = (cfg.s_vol(), cfg.s_img());
    let tau = opts.tau.unwrap_or(1.0 / s_vol as f64);
    let field = match opts.geometry {
        GeometrySource::Analytic => scene.field.clone(),
        GeometrySource::Decoded => model.heads.decoded_sdf(&s1.dense_volume)?,
    };
    let vol_mask = informative_voxel_mask(&field, s_vol, tau, MASK_SAMPLES_PER_AXIS)?;
    let fine_px = (s_img * PATCH) as u32;
    let mut img_masks = Vec::with_capacity(s1.cameras.len());
    for cam in &s1.cameras {
        let (_, alpha) = render_view(&scene.field, &cam.resized(fine_px, fine_px));
        img_masks.push(foreground_patch_mask(&alpha, PATCH)?);
    }
    let (x_up, y_up) = upsample_select_tokens(
        &s1.x_d,
        cfg.s_vol_d,
        &s1.y_d,
        cfg.s_img_d,
        &vol_mask,
        &img_masks,
        cfg.factor_vol,
        cfg.factor_img,
        &model.fine_vol_pe,
        &model.fine_img_pe,
    )?;
    let vol_part = partition(&x_up, BLOCK)?;
    let img_part = partition(&y_up, BLOCK)?;
    let vol_points = TokenPoints::volume(&x_up);
    let img_points = image_token_points(&y_up, &s1.cameras, &field, opts.beta)?;
    let plan = build_routing_plan(&RoutingInputs {
        vol_points: &vol_points,
        img_points: &img_points,
        vol_index: &VolumeIndex::new(&vol_part),
        img_index: &ImageIndex::new(&img_part, &img_points)?,
        cameras: &s1.cameras,
        budgets: opts.budgets,
    });
    let routing = match opts.routing {
        RoutingMode::Score => Routing::Score(opts.budgets),
        RoutingMode::ThreeD => Routing::Plan {
            v2v: to_slots(&plan.v2v, &vol_part)?,
            v2i: to_slots(&plan.v2i, &img_part)?,
            i2v: to_slots(&plan.i2v, &vol_part)?,
            i2i: to_slots(&plan.i2i, &img_part)?,
        },
    };
    let ctx = SparseContext::new(cfg.attention(), vol_part, img_part, routing)?;
    Ok(SparseInstance {
        x_up,
        y_up,
        vol_mask,
        img_masks,
        vol_points,
        img_points,
        plan,
        ctx,
        field,
        tau,
    })
}
