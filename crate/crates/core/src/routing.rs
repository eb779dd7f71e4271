//! Geometric KV-block routing.
//!
//! Volume targets are ranked by distance from the query point to block
//! centres. Image targets use two stages: per view, the `B_i` occupied blocks
//! whose 2D centres are nearest the query's projection; then the pooled
//! candidates ranked by the smallest 3D distance from the query to any token
//! point of the block.
//!
//! Squared distances are compared through [`dist_key`], a fixed-point value
//! with 2^-40 resolution, and ties fall to the lower block id. Voxel and block
//! centres sit on regular grids, so exact ties are common; the quantization
//! keeps their resolution stable when the whole scene is moved rigidly.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockPartition;
use crate::error::{LsrmError, Result};
use crate::geometry::{project_point, ray_cube_interval, surface_point_for_ray, Camera, SdfField};
use crate::interp::Point3;
use crate::nsa::Selection;
use crate::tokenizer::{Modality, TokenSet};

pub fn dist_key(d2: f64) -> u64 {
    (d2 * (1u64 << 40) as f64).round() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budgets {
    /// Candidates per view in the first image stage.
    pub per_view: usize,
    pub v2v: usize,
    pub v2i: usize,
    pub i2v: usize,
    pub i2i: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            per_view: 16,
            v2v: 8,
            v2i: 8,
            i2v: 8,
            i2i: 8,
        }
    }
}

/// Object-space position of every token of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPoints {
    pub points: Vec<Point3>,
    /// Image tokens whose ray found no surface; their point is the cube entry.
    pub miss: Vec<bool>,
}

impl TokenPoints {
    pub fn volume(tokens: &TokenSet) -> Self {
        TokenPoints {
            points: tokens.voxel_centers(),
            miss: vec![false; tokens.len()],
        }
    }

    pub fn transformed(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        TokenPoints {
            points: self.points.iter().map(|p| r * p + t).collect(),
            miss: self.miss.clone(),
        }
    }
}

/// Pixel centre of image token `(row, col)` on a `res x res` token grid.
pub fn token_pixel(camera: &Camera, row: u32, col: u32, res: [u32; 2]) -> Vector2<f64> {
    Vector2::new(
        (col as f64 + 0.5) * camera.width as f64 / res[1] as f64,
        (row as f64 + 0.5) * camera.height as f64 / res[0] as f64,
    )
}

/// Surface point of each image token's patch-centre ray. Rays without an
/// opacity peak fall back to their cube entry point, or to the point of the
/// ray closest to the cube centre (clamped) when the cube is missed.
pub fn image_token_points(
    tokens: &TokenSet,
    cameras: &[Camera],
    field: &SdfField,
    beta: f64,
) -> Result<TokenPoints> {
    if tokens.modality != Modality::Image {
        return Err(LsrmError::config("image token points need image tokens"));
    }
    if tokens.grid_res[0] as usize > cameras.len() {
        return Err(LsrmError::config(format!(
            "{} views but {} cameras",
            tokens.grid_res[0],
            cameras.len()
        )));
    }
    let res = [tokens.grid_res[1], tokens.grid_res[2]];
    let out: Vec<(Point3, bool)> = tokens
        .coords
        .par_iter()
        .map(|c| -> Result<(Point3, bool)> {
            let cam = &cameras[c[0] as usize];
            let o = cam.center();
            let d = cam.pixel_direction(token_pixel(cam, c[1], c[2], res));
            let r = surface_point_for_ray(field, o, d, beta)?;
            Ok(match r.opacity_peak {
                Some(p) => (p, false),
                None => match ray_cube_interval(&o, &r.direction) {
                    Some((t0, _)) => (r.point_at(t0), true),
                    None => {
                        let t = (Vector3::repeat(0.5) - o).dot(&r.direction).max(0.0);
                        (r.point_at(t).map(|v| v.clamp(0.0, 1.0)), true)
                    }
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(TokenPoints {
        points: out.iter().map(|x| x.0).collect(),
        miss: out.iter().map(|x| x.1).collect(),
    })
}

/// Occupied volume blocks with their object-space centres.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeIndex {
    pub blocks: Vec<u32>,
    pub centers: Vec<Point3>,
}

impl VolumeIndex {
    pub fn new(part: &BlockPartition) -> Self {
        VolumeIndex {
            blocks: part.occupied.clone(),
            centers: part
                .occupied
                .iter()
                .map(|&b| Vector3::from(part.centers[b as usize]))
                .collect(),
        }
    }

    pub fn transformed(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        VolumeIndex {
            blocks: self.blocks.clone(),
            centers: self.centers.iter().map(|c| r * c + t).collect(),
        }
    }
}

/// The `budget` occupied volume blocks nearest `p`, nearest first.
pub fn route_to_volume_blocks(p: &Point3, index: &VolumeIndex, budget: usize) -> Vec<u32> {
    let mut ranked: Vec<(u64, u32)> = index
        .blocks
        .iter()
        .zip(&index.centers)
        .map(|(&b, c)| (dist_key((p - c).norm_squared()), b))
        .collect();
    if budget < ranked.len() {
        ranked.select_nth_unstable(budget);
        ranked.truncate(budget);
    }
    ranked.sort_unstable();
    ranked.into_iter().map(|(_, b)| b).collect()
}

/// Occupied image blocks grouped by view, with 2D centres in token units and
/// the 3D points of each block's tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageIndex {
    pub token_res: [u32; 2],
    /// Per view: `(block id, [row, col] centre)`.
    pub per_view: Vec<Vec<(u32, [f64; 2])>>,
    /// Per occupied slot: token points.
    pub block_points: Vec<Vec<Point3>>,
    slot_of: std::collections::HashMap<u32, usize>,
}

impl ImageIndex {
    pub fn new(part: &BlockPartition, points: &TokenPoints) -> Result<Self> {
        if part.modality != Modality::Image || points.points.len() != part.num_tokens() {
            return Err(LsrmError::config("image index needs an image partition and one point per token"));
        }
        let views = part.block_grid[0] as usize;
        let mut per_view = vec![Vec::new(); views];
        let mut block_points = Vec::with_capacity(part.num_occupied());
        let mut slot_of = std::collections::HashMap::new();
        for (s, &b) in part.occupied.iter().enumerate() {
            let c = part.centers[b as usize];
            per_view[part.view_of_block(b) as usize].push((b, [c[1], c[2]]));
            block_points.push(
                part.tokens_of_slot(s)
                    .iter()
                    .map(|&t| points.points[t as usize])
                    .collect(),
            );
            slot_of.insert(b, s);
        }
        Ok(ImageIndex {
            token_res: [part.grid_res[1], part.grid_res[2]],
            per_view,
            block_points,
            slot_of,
        })
    }

    pub fn transformed(&self, r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        ImageIndex {
            block_points: self
                .block_points
                .iter()
                .map(|ps| ps.iter().map(|p| r * p + t).collect())
                .collect(),
            ..self.clone()
        }
    }

    pub fn points_of_block(&self, block: u32) -> &[Point3] {
        &self.block_points[self.slot_of[&block]]
    }
}

/// Projection of `p` into view `camera` in token units `[row, col]`, or
/// `None` when `p` is behind the camera.
pub fn project_to_tokens(camera: &Camera, p: &Point3, token_res: [u32; 2]) -> Option<[f64; 2]> {
    let (px, _) = project_point(camera, p).ok()?;
    Some([
        px.y * token_res[0] as f64 / camera.height as f64,
        px.x * token_res[1] as f64 / camera.width as f64,
    ])
}

/// Two-stage image routing; an empty list means no view sees `p`.
pub fn route_to_image_blocks(
    p: &Point3,
    cameras: &[Camera],
    index: &ImageIndex,
    per_view: usize,
    budget: usize,
) -> Vec<u32> {
    let mut pooled = Vec::new();
    for (cam, blocks) in cameras.iter().zip(&index.per_view) {
        let Some(uv) = project_to_tokens(cam, p, index.token_res) else {
            continue;
        };
        let mut ranked: Vec<(u64, u32)> = blocks
            .iter()
            .map(|(b, c)| {
                let d2 = (uv[0] - c[0]).powi(2) + (uv[1] - c[1]).powi(2);
                (dist_key(d2), *b)
            })
            .collect();
        ranked.sort_unstable();
        pooled.extend(ranked.into_iter().take(per_view).map(|(_, b)| b));
    }
    let mut scored: Vec<(u64, u32)> = pooled
        .into_iter()
        .map(|b| {
            let best = index
                .points_of_block(b)
                .iter()
                .map(|q| dist_key((p - q).norm_squared()))
                .min()
                .unwrap_or(u64::MAX);
            (best, b)
        })
        .collect();
    scored.sort_unstable();
    scored.into_iter().take(budget).map(|(_, b)| b).collect()
}

/// Block-id selections for all four query/key modality pairs, one list per
/// query token.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingPlan {
    pub v2v: Selection,
    pub v2i: Selection,
    pub i2v: Selection,
    pub i2i: Selection,
}

pub struct RoutingInputs<'a> {
    pub vol_points: &'a TokenPoints,
    pub img_points: &'a TokenPoints,
    pub vol_index: &'a VolumeIndex,
    pub img_index: &'a ImageIndex,
    pub cameras: &'a [Camera],
    pub budgets: Budgets,
}

pub fn build_routing_plan(inp: &RoutingInputs<'_>) -> RoutingPlan {
    let b = inp.budgets;
    let route = |pts: &TokenPoints, to_vol: usize, to_img: usize| -> (Selection, Selection) {
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = pts
            .points
            .par_iter()
            .map(|p| {
                (
                    route_to_volume_blocks(p, inp.vol_index, to_vol),
                    route_to_image_blocks(p, inp.cameras, inp.img_index, b.per_view, to_img),
                )
            })
            .collect();
        let (v, i) = pairs.into_iter().unzip();
        (Selection { lists: v }, Selection { lists: i })
    };
    let (v2v, v2i) = route(inp.vol_points, b.v2v, b.v2i);
    let (i2v, i2i) = route(inp.img_points, b.i2v, b.i2i);
    RoutingPlan { v2v, v2i, i2v, i2i }
}

/// Map block-id lists to occupied-slot lists of `part`.
pub fn to_slots(sel: &Selection, part: &BlockPartition) -> Result<Selection> {
    let lists = sel
        .lists
        .iter()
        .map(|l| {
            l.iter()
                .map(|&b| {
                    part.slot_of_block(b).map(|s| s as u32).ok_or_else(|| {
                        LsrmError::config(format!("routing selected unoccupied block {b}"))
                    })
                })
                .collect::<Result<Vec<u32>>>()
        })
        .collect::<Result<_>>()?;
    Ok(Selection { lists })
}

/// Map occupied-slot lists of `part` back to block ids.
pub fn to_blocks(sel: &Selection, part: &BlockPartition) -> Selection {
    Selection {
        lists: sel
            .lists
            .iter()
            .map(|l| l.iter().map(|&s| part.occupied[s as usize]).collect())
            .collect(),
    }
}

fn encode_table(out: &mut Vec<u8>, sel: &Selection) {
    out.extend((sel.lists.len() as u32).to_le_bytes());
    for l in &sel.lists {
        out.extend((l.len() as u32).to_le_bytes());
        for &b in l {
            out.extend(b.to_le_bytes());
        }
    }
}

impl RoutingPlan {
    pub fn tables(&self) -> [(&'static str, &Selection); 4] {
        [("v2v", &self.v2v), ("v2i", &self.v2i), ("i2v", &self.i2v), ("i2i", &self.i2i)]
    }

    /// Little-endian dump: per table (v2v, v2i, i2v, i2i) a u32 query count,
    /// then per query a u32 length followed by the block ids.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.tables() {
            encode_table(&mut out, t);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next = |what: &str| -> Result<u32> {
            let b = bytes.get(pos..pos + 4).ok_or_else(|| LsrmError::Format {
                offset: pos as u64,
                msg: format!("truncated {what}"),
            })?;
            pos += 4;
            Ok(u32::from_le_bytes(b.try_into().unwrap()))
        };
        let mut tables = Vec::with_capacity(4);
        for _ in 0..4 {
            let n = next("query count")?;
            let mut lists = Vec::new();
            for _ in 0..n {
                let len = next("list length")?;
                lists.push((0..len).map(|_| next("block id")).collect::<Result<Vec<u32>>>()?);
            }
            tables.push(Selection { lists });
        }
        if pos != bytes.len() {
            return Err(LsrmError::Format {
                offset: pos as u64,
                msg: "trailing bytes after plan".into(),
            });
        }
        let mut it = tables.into_iter();
        Ok(RoutingPlan {
            v2v: it.next().unwrap(),
            v2i: it.next().unwrap(),
            i2v: it.next().unwrap(),
            i2i: it.next().unwrap(),
        })
    }
}

pub fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let sa: std::collections::BTreeSet<_> = a.iter().collect();
    let sb: std::collections::BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapReport {
    pub per_query: Vec<f64>,
    pub mean: f64,
}

/// Jaccard overlap between two selections of the same queries.
pub fn routing_overlap_report(plan: &Selection, scored: &Selection) -> Result<OverlapReport> {
    if plan.queries() != scored.queries() {
        return Err(LsrmError::config(format!(
            "overlap of {} vs {} queries",
            plan.queries(),
            scored.queries()
        )));
    }
    let per_query: Vec<f64> = plan
        .lists
        .iter()
        .zip(&scored.lists)
        .map(|(a, b)| jaccard(a, b))
        .collect();
    let mean = if per_query.is_empty() {
        1.0
    } else {
        per_query.iter().sum::<f64>() / per_query.len() as f64
    };
    Ok(OverlapReport { per_query, mean })
}
