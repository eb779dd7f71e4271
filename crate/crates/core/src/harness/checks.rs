//! Property checks shared by `lsrm verify` and the acceptance tests. Each
//! compares a fast path with an oracle over seeded cases and reports the
//! worst error and the first failing case.

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::attention::{dense_cross_attention, AttentionParams};
use crate::blocks::{partition, BlockPartition, BLOCK};
use crate::error::Result;
use crate::geometry::{
    eval_sdf, orbit_rig, pluecker_rays, project_point, unproject, Camera, SdfSpec, DEFAULT_BETA,
};
use crate::interp::trilinear_interpolate;
use crate::nsa::{
    nsa_cross_attention, sel_attention, BranchSet, EmptySelection, KvSet, NsaInputs, NsaWeights,
    Selection, SelectionSource, WindowCtx,
};
use crate::oracle::{self, Shape};
use crate::parallel::{
    bytes_of, imbalance_report, lpt_assign, parallel_sparse_stage, token_bytes, worker_loads,
    CollectiveKind,
};
use crate::pipeline::{
    build_instance, decode_point, decode_sparse_volume, dense_block_forward, dense_stage_forward,
    sparse_stage_forward, stage_one, DenseBlockWeights, FeatureVolume, InstanceOptions, Model,
    ModelConfig, QueryMode,
};
use crate::rng::SeedStream;
use crate::routing::{build_routing_plan, image_token_points, Budgets, ImageIndex, RoutingInputs, TokenPoints, VolumeIndex};
use crate::scene::{render_view, RigSpec, Scene, SceneFile};
use crate::tensor::Tensor;
use crate::tokenizer::{
    foreground_patch_mask, informative_voxel_mask, Modality, TokenSet, ZeroFeatures,
    MASK_SAMPLES_PER_AXIS, PATCH,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Label of the first failing case, e.g. its seed.
    pub first_failure: Option<String>,
    pub detail: String,
}

struct Check {
    r: CheckResult,
}

impl Check {
    fn new(name: &str, tolerance: f64) -> Self {
        Check {
            r: CheckResult {
                name: name.into(),
                passed: true,
                cases: 0,
                max_error: 0.0,
                tolerance,
                first_failure: None,
                detail: String::new(),
            },
        }
    }

    fn error(&mut self, case: impl FnOnce() -> String, err: f64) {
        self.r.cases += 1;
        if err.is_nan() || err > self.r.tolerance {
            self.fail(case());
        }
        if err > self.r.max_error || err.is_nan() {
            self.r.max_error = err;
        }
    }

    fn truth(&mut self, case: impl FnOnce() -> String, ok: bool) {
        self.error(case, if ok { 0.0 } else { 1.0 });
    }

    fn fail(&mut self, case: String) {
        self.r.passed = false;
        if self.r.first_failure.is_none() {
            self.r.first_failure = Some(case);
        }
    }

    fn done(mut self, detail: impl Into<String>) -> CheckResult {
        self.r.detail = detail.into();
        self.r
    }
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b) as f64
}

fn random_volume_tokens(n: usize, res: u32, width: usize, s: &SeedStream) -> TokenSet {
    let mut cells: Vec<u32> = (0..res * res * res).collect();
    cells.shuffle(&mut s.child("cells").rng());
    let mut coords: Vec<[u32; 3]> = cells[..n]
        .iter()
        .map(|&c| [c / (res * res), (c / res) % res, c % res])
        .collect();
    coords.sort_unstable();
    TokenSet {
        modality: Modality::Volume,
        features: s.child("features").uniform(&[n, width], 1.0),
        coords,
        grid_res: [res; 3],
    }
}

/// Selected attention over every block equals dense attention, and both
/// match the scalar oracle. Alternates the 8/1 and 32/2 head layouts.
pub fn sparse_attention_matches_dense(seeds: u64, tol: f64) -> Result<CheckResult> {
    let mut c = Check::new("sel_attention_full_equals_dense", tol);
    for seed in 0..seeds {
        let s = SeedStream::new(seed).child("sel_vs_dense");
        let p = if seed % 2 == 0 {
            AttentionParams::new(8, 1, 8)
        } else {
            AttentionParams::new(32, 2, 4)
        };
        let mut rng = s.rng();
        let (nx, ny) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let keys = random_volume_tokens(ny, 24, 1, &s);
        let part = partition(&keys, BLOCK)?;
        let q = s.child("q").uniform(&[nx, p.h_q, p.d_h], 1.0);
        let k = s.child("k").uniform(&[ny, p.h_kv, p.d_h], 1.0);
        let v = s.child("v").uniform(&[ny, p.h_kv, p.d_h], 1.0);
        let sel = sel_attention(&q, &k, &v, &part, &Selection::all(nx, part.num_occupied()), &p, None)?;
        let dense = dense_cross_attention(&q, &k, &v, &p, None)?;
        let scalar = oracle::dense_attention(&q, &k, &v, &p).reshape(dense.shape())?;
        let err = max_abs(&sel, &dense).max(max_abs(&dense, &scalar));
        c.error(|| format!("seed {seed} (h_q={}, h_kv={}, nx={nx}, ny={ny})", p.h_q, p.h_kv), err);
    }
    Ok(c.done(format!("{seeds} seeded instances, Nx, Ny <= 64")))
}

/// Saturated gates (selected branch on, others off) with every block
/// selected reduce gated attention to dense attention plus output projection.
pub fn saturated_gates_match_dense(seeds: u64, tol: f64) -> Result<CheckResult> {
    let mut c = Check::new("nsa_saturated_gates_equal_dense", tol);
    let p = AttentionParams::desk();
    for seed in 0..seeds {
        let s = SeedStream::new(seed).child("nsa_degenerate");
        let mut rng = s.rng();
        let self_attention = seed % 2 == 0;
        let ny = rng.gen_range(2..=64);
        let keys = random_volume_tokens(ny, 24, p.d, &s.child("y"));
        let part = partition(&keys, BLOCK)?;
        let x = if self_attention {
            keys.features.clone()
        } else {
            s.child("x").uniform(&[rng.gen_range(1..=64), p.d], 1.0)
        };
        let branches = if self_attention { BranchSet::Full } else { BranchSet::CmpSel };
        let mut w = NsaWeights::random(&p, branches, &s.child("w"));
        if self_attention {
            w.set_constant_gates(&[-40.0, 40.0, -40.0])?;
        } else {
            w.set_constant_gates(&[-40.0, 40.0])?;
        }
        let kv = KvSet::build(&keys.features, &part, &w, &p)?;
        let own: Vec<usize> = (0..ny).map(|t| part.slot_of_token(t)).collect();
        let sel = Selection::all(x.rows(), part.num_occupied());
        let out = nsa_cross_attention(
            &NsaInputs {
                x: &x,
                kv: &kv,
                selection: SelectionSource::Given(&sel),
                window: self_attention.then_some(WindowCtx { kv: &kv, own_slot: &own }),
                on_empty: EmptySelection::Error,
            },
            &w,
            &p,
        )?;
        let q = w.proj.queries(&x, &p)?;
        let (k, v) = w.proj.keys_values(&keys.features, &p)?;
        let dense = dense_cross_attention(&q, &k, &v, &p, None)?;
        let expect = w.proj.wo.forward(&dense.reshape(&[x.rows(), p.d])?)?;
        c.error(|| format!("seed {seed}"), max_abs(&out.out, &expect));
    }
    Ok(c.done(format!("{seeds} seeds, self (three branches) and cross (two branches) alternating")))
}

/// Zero Stage-2 weights: the field decoded from the Stage-2 tokens equals the
/// field decoded from the upsampled Stage-1 tokens.
pub fn residual_identity(points: usize, tol: f64, seed: u64) -> Result<CheckResult> {
    let mut c = Check::new("zero_stage2_residual_identity", tol);
    let cfg = ModelConfig::desk();
    let mut model = Model::random(&cfg, seed)?;
    model.zero_sparse_weights();
    let scene = SceneFile::preset("small_sphere", cfg.views).build()?;
    let s1 = stage_one(&model, &scene, &ZeroFeatures { dim: cfg.d_feat })?;
    let inst = build_instance(&model, &scene, &s1, &InstanceOptions::default())?;
    let (x_s, _) = sparse_stage_forward(&inst.x_up.features, &inst.y_up.features, &model.sparse_blocks, &inst.ctx)?;
    let volume = |features: &Tensor| -> Result<FeatureVolume> {
        Ok(FeatureVolume {
            dense: s1.dense_volume.clone(),
            sparse: decode_sparse_volume(
                &TokenSet {
                    features: features.clone(),
                    ..inst.x_up.clone()
                },
                &model.volume_decoder,
            )?,
            mask: inst.vol_mask.clone(),
        })
    };
    let (stage2, upsampled) = (volume(&x_s)?, volume(&inst.x_up.features)?);
    // half the points land in active fine voxels, where the sparse blend matters
    let qs = SeedStream::new(seed).child("query_points");
    let coords = qs.uniform_f64(0.0, 1.0, 3 * points);
    let mut rng = qs.child("active").rng();
    let res = inst.x_up.grid_res[0] as f64;
    let mut touched = 0;
    for (n, p) in coords.chunks(3).enumerate() {
        let p = if n % 2 == 1 && !inst.x_up.is_empty() {
            let c = inst.x_up.coords[rng.gen_range(0..inst.x_up.len())];
            Vector3::new((c[0] as f64 + p[0]) / res, (c[1] as f64 + p[1]) / res, (c[2] as f64 + p[2]) / res)
        } else {
            Vector3::new(p[0], p[1], p[2])
        };
        let (za, sa) = decode_point(&stage2, &model.heads, &p, QueryMode::Blend)?;
        let (zb, sb) = decode_point(&upsampled, &model.heads, &p, QueryMode::Blend)?;
        let dz = za.iter().zip(&zb).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
        c.error(|| format!("point {n} {p:?}"), dz.max((sa - sb).abs()));
        let cell = |v: f64| ((v * stage2.mask.res as f64) as usize).min(stage2.mask.res - 1);
        touched += stage2.mask.get(cell(p.x), cell(p.y), cell(p.z)) as usize;
    }
    Ok(c.done(format!(
        "{points} random points, {touched} inside active voxels, {} active tokens",
        inst.x_up.len()
    )))
}

fn shape_of(spec: &SdfSpec) -> Shape {
    match spec {
        SdfSpec::Sphere { center, radius } => Shape::Sphere(*center, *radius),
        SdfSpec::Box { center, half_extents } => Shape::Box(*center, *half_extents),
        SdfSpec::Union { children } => Shape::Union(children.iter().map(shape_of).collect()),
        SdfSpec::Constant { .. } => Shape::Union(Vec::new()),
    }
}

/// Informative masks of the analytic presets against the brute-force rule,
/// and a dense-lattice check that no surface-crossing voxel is dropped.
pub fn mask_matches_brute_force(resolutions: &[usize]) -> Result<Vec<CheckResult>> {
    let mut eq = Check::new("mask_equals_brute_force", 0.0);
    let mut cross = Check::new("mask_keeps_zero_crossings", 0.0);
    let mut active = Vec::new();
    for name in ["sphere", "box", "union"] {
        let spec = SceneFile::preset(name, 1).sdf;
        let (field, shape) = (spec.build(), shape_of(&spec));
        for &s in resolutions {
            let tau = 1.0 / s as f64;
            let mask = informative_voxel_mask(&field, s, tau, MASK_SAMPLES_PER_AXIS)?;
            let brute = oracle::brute_force_mask(&shape, s, tau, MASK_SAMPLES_PER_AXIS);
            let diff = mask.bits.iter().zip(&brute).filter(|(a, b)| a != b).count();
            eq.error(|| format!("{name} at S_vol={s}: {diff} voxels differ"), diff as f64);
            let crossing = oracle::crossing_voxels(&shape, s, 3);
            let dropped = crossing.iter().zip(&mask.bits).filter(|(c, m)| **c && !**m).count();
            cross.error(|| format!("{name} at S_vol={s}: {dropped} crossing voxels excluded"), dropped as f64);
            active.push(format!("{name}@{s}={}", mask.count()));
        }
    }
    let detail = format!("active voxels: {}", active.join(", "));
    Ok(vec![eq.done(detail.clone()), cross.done(detail)])
}

/// Camera rigs for routing checks.
pub fn test_rigs() -> Vec<RigSpec> {
    vec![
        RigSpec {
            views: 4,
            radius: 2.2,
            elevation_deg: 20.0,
            azimuth_offset_deg: 15.0,
            focal_ratio: 1.4,
            size: 128,
        },
        RigSpec {
            views: 3,
            radius: 1.8,
            elevation_deg: 38.0,
            azimuth_offset_deg: 40.0,
            focal_ratio: 1.1,
            size: 128,
        },
        RigSpec {
            views: 6,
            radius: 2.6,
            elevation_deg: -12.0,
            azimuth_offset_deg: 0.0,
            focal_ratio: 1.7,
            size: 128,
        },
    ]
}

/// Fine token sets of a scene with zero-width features, as routing sees them.
pub struct RoutingScene {
    pub cameras: Vec<Camera>,
    pub vol: TokenSet,
    pub img: TokenSet,
    pub vol_part: BlockPartition,
    pub img_part: BlockPartition,
    pub vol_points: TokenPoints,
    pub img_points: TokenPoints,
}

pub fn routing_scene(scene: &Scene, s_vol: usize, s_img: usize) -> Result<RoutingScene> {
    let mask = informative_voxel_mask(&scene.field, s_vol, 1.0 / s_vol as f64, MASK_SAMPLES_PER_AXIS)?;
    let vol = TokenSet {
        modality: Modality::Volume,
        features: Tensor::zeros(&[mask.count(), 1]),
        coords: mask.coords(),
        grid_res: [s_vol as u32; 3],
    };
    let fine_px = (s_img * PATCH) as u32;
    let mut coords = Vec::new();
    for (v, cam) in scene.cameras.iter().enumerate() {
        let (_, alpha) = render_view(&scene.field, &cam.resized(fine_px, fine_px));
        let m = foreground_patch_mask(&alpha, PATCH)?;
        for r in 0..m.rows {
            for col in 0..m.cols {
                if m.get(r, col) {
                    coords.push([v as u32, r as u32, col as u32]);
                }
            }
        }
    }
    let img = TokenSet {
        modality: Modality::Image,
        features: Tensor::zeros(&[coords.len(), 1]),
        coords,
        grid_res: [scene.cameras.len() as u32, s_img as u32, s_img as u32],
    };
    Ok(RoutingScene {
        vol_points: TokenPoints::volume(&vol),
        img_points: image_token_points(&img, &scene.cameras, &scene.field, DEFAULT_BETA)?,
        vol_part: partition(&vol, BLOCK)?,
        img_part: partition(&img, BLOCK)?,
        cameras: scene.cameras.clone(),
        vol,
        img,
    })
}

/// All four routing tables against the exhaustive oracles, list for list.
pub fn routing_matches_oracle(scenes: &[&str], rigs: &[RigSpec], s_vol: usize, s_img: usize) -> Result<CheckResult> {
    let mut c = Check::new("routing_tables_equal_brute_force", 0.0);
    let b = Budgets::default();
    let mut queries = 0usize;
    for name in scenes {
        for (ri, rig) in rigs.iter().enumerate() {
            let mut file = SceneFile::preset(name, rig.views);
            file.rig = Some(rig.clone());
            let rs = routing_scene(&file.build()?, s_vol, s_img)?;
            let plan = build_routing_plan(&RoutingInputs {
                vol_points: &rs.vol_points,
                img_points: &rs.img_points,
                vol_index: &VolumeIndex::new(&rs.vol_part),
                img_index: &ImageIndex::new(&rs.img_part, &rs.img_points)?,
                cameras: &rs.cameras,
                budgets: b,
            });
            let vb = oracle::blocks_from_coords(&rs.vol.coords, rs.vol.grid_res, BLOCK as u32, false);
            let ib = oracle::blocks_from_coords(&rs.img.coords, rs.img.grid_res, BLOCK as u32, true);
            let route = |p, to_vol, to_img| {
                (
                    oracle::route_volume(p, &vb, rs.vol.grid_res, BLOCK as u32, to_vol),
                    oracle::route_image(p, &rs.cameras, &ib, rs.img.grid_res, BLOCK as u32, &rs.img_points.points, b.per_view, to_img),
                )
            };
            let mut wrong = 0usize;
            let mut first = None;
            for (t, p) in rs.vol_points.points.iter().enumerate() {
                let (v, i) = route(*p, b.v2v, b.v2i);
                for (table, got, want) in [("v2v", &plan.v2v.lists[t], v), ("v2i", &plan.v2i.lists[t], i)] {
                    if *got != want {
                        wrong += 1;
                        first.get_or_insert(format!("{name} rig {ri} {table} query {t}: {got:?} vs {want:?}"));
                    }
                }
            }
            for (t, p) in rs.img_points.points.iter().enumerate() {
                let (v, i) = route(*p, b.i2v, b.i2i);
                for (table, got, want) in [("i2v", &plan.i2v.lists[t], v), ("i2i", &plan.i2i.lists[t], i)] {
                    if *got != want {
                        wrong += 1;
                        first.get_or_insert(format!("{name} rig {ri} {table} query {t}: {got:?} vs {want:?}"));
                    }
                }
            }
            queries += rs.vol.len() + rs.img.len();
            c.error(|| first.unwrap_or_default(), wrong as f64);
        }
    }
    Ok(c.done(format!(
        "{} scenes x {} rigs, {queries} queries, S_vol={s_vol}, S_img={s_img}",
        scenes.len(),
        rigs.len()
    )))
}

/// Sharded sparse stage against the serial one, plus the locality and
/// conservation contracts of the message log.
pub fn parallel_parity(model: &Model, scene: &Scene, workers: &[usize], tol: f64) -> Result<Vec<CheckResult>> {
    let cfg = &model.config;
    let s1 = stage_one(model, scene, &ZeroFeatures { dim: cfg.d_feat })?;
    let inst = build_instance(model, scene, &s1, &InstanceOptions::default())?;
    let (xs, ys) = sparse_stage_forward(&inst.x_up.features, &inst.y_up.features, &model.sparse_blocks, &inst.ctx)?;
    let mut parity = Check::new("parallel_equals_serial", tol);
    let mut local = Check::new("window_attention_zero_bytes", 0.0);
    let mut conserve = Check::new("token_conservation", 0.0);
    let (nv, ni) = (inst.x_up.len(), inst.y_up.len());
    let depth = model.sparse_blocks.len();
    for &w in workers {
        let out = parallel_sparse_stage(&inst, &model.sparse_blocks, w)?;
        parity.error(|| format!("W={w}"), max_abs(&out.x_s, &xs).max(max_abs(&out.y_s, &ys)));
        let log = &out.topology.message_log;
        let window: Vec<_> = log.iter().filter(|m| m.kind == CollectiveKind::WindowLocal).collect();
        let per_layer_ok = (1..=depth).all(|l| window.iter().filter(|m| m.layer == l && m.src == m.dst).count() == w);
        local.truth(|| format!("W={w}: window entries per layer or bytes wrong"), per_layer_ok && window.iter().all(|m| m.bytes == 0));
        let loads_ok = out.topology.loads.iter().sum::<usize>() == nv + ni;
        let tb = token_bytes(cfg.d);
        let moved = bytes_of(log, CollectiveKind::AllToAll);
        let back = bytes_of(log, CollectiveKind::ReverseAllToAll);
        let shapes_ok = out.x_s.rows() == nv && out.y_s.rows() == ni;
        conserve.truth(
            || format!("W={w}: loads {:?}, forward {moved} B, reverse {back} B", out.topology.loads),
            loads_ok && shapes_ok && moved == back && moved % tb == 0 && moved / tb <= (nv + ni) as u64,
        );
    }
    let detail = format!("{nv} volume + {ni} image tokens, depth {depth}, W in {workers:?}");
    Ok(vec![parity.done(detail.clone()), local.done(detail.clone()), conserve.done(detail)])
}

/// Random sphere/box scenes, partitioned at the given fine resolutions.
pub fn scene_corpus(n: usize, seed: u64, s_vol: usize, s_img: usize, views: usize) -> Result<Vec<(BlockPartition, BlockPartition)>> {
    (0..n)
        .map(|i| {
            let s = SeedStream::new(seed).child("corpus").index(i as u64);
            let u = s.uniform_f64(0.0, 1.0, 6);
            let center = [0.3 + 0.4 * u[0], 0.3 + 0.4 * u[1], 0.3 + 0.4 * u[2]];
            let mut file = SceneFile::preset("sphere", views);
            file.sdf = if i % 2 == 0 {
                SdfSpec::Sphere { center, radius: 0.08 + 0.2 * u[3] }
            } else {
                SdfSpec::Box {
                    center,
                    half_extents: [0.06 + 0.2 * u[3], 0.06 + 0.2 * u[4], 0.06 + 0.2 * u[5]],
                }
            };
            let rs = routing_scene(&file.build()?, s_vol, s_img)?;
            Ok((rs.vol_part, rs.img_part))
        })
        .collect()
}

/// LPT bound `max <= mean + max block` on partitioned instances, and the 4/3
/// approximation against the exhaustive optimum on random small instances.
pub fn lpt_quality(instances: &[(BlockPartition, BlockPartition)], workers: &[usize], small_cases: u64) -> Result<Vec<CheckResult>> {
    let mut bound = Check::new("lpt_max_within_mean_plus_largest_block", 0.0);
    for (n, (vol, img)) in instances.iter().enumerate() {
        let occ: Vec<usize> = (0..vol.num_occupied())
            .map(|s| vol.tokens_of_slot(s).len())
            .chain((0..img.num_occupied()).map(|s| img.tokens_of_slot(s).len()))
            .collect();
        for &w in workers {
            let loads = worker_loads(&occ, &lpt_assign(&occ, w)?, w);
            let mean = occ.iter().sum::<usize>() as f64 / w as f64;
            let excess = *loads.iter().max().unwrap() as f64 - mean - *occ.iter().max().unwrap_or(&0) as f64;
            bound.error(|| format!("instance {n}, W={w}"), excess.max(0.0));
        }
    }
    let mut approx = Check::new("lpt_within_four_thirds_of_optimum", 4.0 / 3.0);
    approx.r.max_error = 1.0;
    for seed in 0..small_cases {
        let s = SeedStream::new(seed).child("lpt_small");
        let mut rng = s.rng();
        let items = rng.gen_range(1..=12);
        let w = rng.gen_range(2..=4);
        let occ: Vec<usize> = (0..items).map(|_| rng.gen_range(1..=512)).collect();
        let lpt = *worker_loads(&occ, &lpt_assign(&occ, w)?, w).iter().max().unwrap();
        let opt = oracle::optimal_makespan(&occ, w);
        approx.error(|| format!("seed {seed}: loads {occ:?}, W={w}"), lpt as f64 / opt as f64);
    }
    Ok(vec![
        bound.done(format!("{} instances, W in {workers:?}", instances.len())),
        approx.done(format!("{small_cases} random instances of at most 12 blocks, W in 2..=4")),
    ])
}

/// Block-aware LPT is no worse than the naive contiguous split on at least
/// `min_fraction` of the instances.
pub fn block_aware_beats_naive(instances: &[(BlockPartition, BlockPartition)], workers: usize, min_fraction: f64) -> Result<CheckResult> {
    let pairs: Vec<_> = instances.iter().map(|(v, i)| (v, i)).collect();
    let rows = imbalance_report(&pairs, workers)?;
    let wins = rows.iter().filter(|r| r.block_aware_ratio <= r.naive_ratio).count();
    let frac = wins as f64 / rows.len() as f64;
    let mut c = Check::new("block_aware_not_worse_than_naive", 0.0);
    c.truth(|| format!("only {wins} of {} instances", rows.len()), frac >= min_fraction);
    let mean = |f: fn(&crate::parallel::ImbalanceRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(c.done(format!(
        "{wins}/{} instances at W={workers}; mean max/mean block-aware {:.3}, naive {:.3}",
        rows.len(),
        mean(|r| r.block_aware_ratio),
        mean(|r| r.naive_ratio)
    )))
}

/// Hardware-faithful mode accepts exactly the layouts with `(h_q/h_kv) % 16 == 0`.
pub fn gqa_constraint() -> CheckResult {
    let mut c = Check::new("gqa_multiple_of_16", 0.0);
    for h_q in [8, 16, 24, 32, 48, 64, 128] {
        for h_kv in [1, 2, 3, 4, 8] {
            let p = AttentionParams {
                hardware_faithful: true,
                ..AttentionParams::new(h_q, h_kv, 4)
            };
            let expect = h_q % h_kv == 0 && (h_q / h_kv) % 16 == 0;
            c.truth(|| format!("h_q={h_q}, h_kv={h_kv}"), p.validate().is_ok() == expect);
        }
    }
    c.truth(|| "full-scale layout 32/2 rejected".into(), AttentionParams::full_scale().validate().is_ok());
    c.truth(|| "full-scale model config rejected".into(), ModelConfig::full_scale().validate().is_ok());
    let desk_hw = ModelConfig {
        hardware_faithful: true,
        ..ModelConfig::desk()
    };
    c.truth(|| "8/1 accepted in hardware-faithful mode".into(), desk_hw.validate().is_err());
    c.done("h_q x h_kv grid plus full-scale and desk configurations")
}

/// Trilinear exactness on affine fields, Plücker orthogonality and the
/// project/unproject round trip.
pub fn geometry_primitives(rays: usize, tol_trilinear: f64, tol_pluecker: f64, tol_roundtrip: f64) -> Result<Vec<CheckResult>> {
    let s = SeedStream::new(9).child("geometry");

    let mut tri = Check::new("trilinear_reproduces_affine_fields", tol_trilinear);
    let n = 8usize;
    let coef = [0.25, 0.5, -0.75, 0.125];
    let f = |x: f64, y: f64, z: f64| coef[0] + coef[1] * x + coef[2] * y + coef[3] * z;
    let vol = Tensor::from_fn(&[n, n, n, 1], |i| {
        let (a, b, c) = (i / (n * n), (i / n) % n, i % n);
        let at = |v: usize| (v as f64 + 0.5) / n as f64;
        f(at(a), at(b), at(c)) as f32
    });
    // affine reproduction holds between the outermost voxel centres
    let (lo, hi) = (0.5 / n as f64, 1.0 - 0.5 / n as f64);
    let pts = s.child("trilinear").uniform_f64(lo, hi, 3 * 1000);
    for (i, p) in pts.chunks(3).enumerate() {
        let got = trilinear_interpolate(&vol, &Vector3::new(p[0], p[1], p[2]))?[0] as f64;
        tri.error(|| format!("point {i}"), (got - f(p[0], p[1], p[2])).abs());
    }

    let mut pl = Check::new("pluecker_moment_orthogonal", tol_pluecker);
    let side = (rays as f64).sqrt().ceil() as usize;
    let eyes = s.child("eyes").uniform_f64(-2.0, 3.0, 3 * 4);
    let mut counted = 0usize;
    for (ci, e) in eyes.chunks(3).enumerate() {
        let eye = Vector3::new(e[0], e[1], e[2] + 3.5);
        let cam = Camera::look_at(eye, Vector3::repeat(0.5), Vector3::new(0.0, 0.0, 1.0), 150.0, 128, 96)?;
        let per_cam = side.div_ceil(2);
        let t = pluecker_rays(&cam, (per_cam, per_cam))?;
        for (ri, r) in t.data().chunks(6).enumerate() {
            if counted == rays {
                break;
            }
            let dot: f64 = (0..3).map(|a| r[a] as f64 * r[3 + a] as f64).sum();
            pl.error(|| format!("camera {ci} ray {ri}"), dot.abs());
            counted += 1;
        }
    }

    let mut rt = Check::new("project_unproject_round_trip", tol_roundtrip);
    let cams = orbit_rig(5, 2.3, 25.0, 10.0, 1.3, 256)?;
    let pts = s.child("roundtrip").uniform_f64(0.0, 1.0, 3 * 2000);
    for (i, p) in pts.chunks(3).enumerate() {
        let p = Vector3::new(p[0], p[1], p[2]);
        let cam = &cams[i % cams.len()];
        let (px, depth) = project_point(cam, &p)?;
        let back = unproject(cam, Vector2::new(px.x, px.y), depth);
        rt.error(|| format!("point {i}"), (back - p).norm());
    }
    Ok(vec![
        tri.done("1000 interior points on an 8^3 affine field"),
        pl.done(format!("{counted} rays over 4 cameras")),
        rt.done("2000 points over a 5-view rig"),
    ])
}

/// Dense stage at depth `k + 1` equals one more block applied to depth `k`.
pub fn dense_stage_composes(seeds: u64) -> Result<CheckResult> {
    let mut c = Check::new("dense_stage_composes", 0.0);
    let p = AttentionParams::desk();
    for seed in 0..seeds {
        let s = SeedStream::new(seed).child("dense_compose");
        let x = s.child("x").uniform(&[27, p.d], 1.0);
        let y = s.child("y").uniform(&[40, p.d], 1.0);
        let blocks: Vec<_> = (0..3).map(|m| DenseBlockWeights::random(&p, &s.index(m))).collect();
        let (x2, y2) = dense_stage_forward(&x, &y, &blocks[..2], &p)?;
        let (x3, y3) = dense_stage_forward(&x, &y, &blocks, &p)?;
        let (xa, ya) = dense_block_forward(&x2, &y2, &blocks[2], &p)?;
        c.error(|| format!("seed {seed}"), max_abs(&x3, &xa).max(max_abs(&y3, &ya)));
    }
    Ok(c.done(format!("{seeds} seeds, depth 2 -> 3")))
}

/// Analytic sign agreement between the library SDF and the oracle shapes.
pub fn sdf_agrees_with_oracle(samples: usize) -> CheckResult {
    let mut c = Check::new("analytic_sdf_matches_oracle", 1e-12);
    let pts = SeedStream::new(3).child("sdf").uniform_f64(0.0, 1.0, 3 * samples);
    for name in ["sphere", "box", "union"] {
        let spec = SceneFile::preset(name, 1).sdf;
        let (field, shape) = (spec.build(), shape_of(&spec));
        for (i, p) in pts.chunks(3).enumerate() {
            let a = eval_sdf(&field, &Vector3::new(p[0], p[1], p[2]));
            c.error(|| format!("{name} point {i}"), (a - shape.eval([p[0], p[1], p[2]])).abs());
        }
    }
    c.done(format!("{samples} points per preset"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_checks_pass() {
        assert!(sparse_attention_matches_dense(6, 1e-5).unwrap().passed);
        assert!(saturated_gates_match_dense(4, 1e-4).unwrap().passed);
        assert!(gqa_constraint().passed);
        assert!(dense_stage_composes(2).unwrap().passed);
        assert!(sdf_agrees_with_oracle(200).passed);
        for r in geometry_primitives(400, 1e-6, 1e-6, 1e-5).unwrap() {
            assert!(r.passed, "{r:?}");
        }
        for r in mask_matches_brute_force(&[12]).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn failing_case_is_reported() {
        let mut c = Check::new("x", 0.5);
        c.error(|| "a".into(), 0.1);
        c.error(|| "b".into(), 0.9);
        c.error(|| "c".into(), 2.0);
        let r = c.done("");
        assert!(!r.passed);
        assert_eq!(r.first_failure.as_deref(), Some("b"));
        assert_eq!(r.max_error, 2.0);
        assert_eq!(r.cases, 3);
    }
}
