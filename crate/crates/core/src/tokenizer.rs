//! Image and volume token sets.
//!
//! Image token coordinates are `[view, row, col]` on a per-view `S x S` patch
//! grid; volume token coordinates are `[i, j, k]` on an `S^3` voxel grid whose
//! voxel `(i, j, k)` spans `[i/S, (i+1)/S) x ...` in object space. Token order
//! within a set is ascending lexicographic coordinate order.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{LsrmError, Result};
use crate::geometry::{eval_sdf, SdfField};
use crate::interp::Point3;
use crate::rng::SeedStream;
use crate::tensor::{Linear, Tensor};

pub const PATCH: usize = 8;
/// Samples per axis inside a voxel for the informative-voxel rule (T = 4^3).
pub const MASK_SAMPLES_PER_AXIS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Volume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub modality: Modality,
    /// `[N, d]`
    pub features: Tensor,
    pub coords: Vec<[u32; 3]>,
    pub grid_res: [u32; 3],
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.row_width()
    }

    pub fn linear_index(&self, c: &[u32; 3]) -> u64 {
        let r = self.grid_res;
        (c[0] as u64 * r[1] as u64 + c[1] as u64) * r[2] as u64 + c[2] as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.coords.len() {
            return Err(LsrmError::config(format!(
                "token set has {} feature rows but {} coordinates",
                self.features.rows(),
                self.coords.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.coords.len());
        for c in &self.coords {
            if c.iter().zip(&self.grid_res).any(|(v, r)| v >= r) {
                return Err(LsrmError::config(format!(
                    "coordinate {c:?} outside grid {:?}",
                    self.grid_res
                )));
            }
            if !seen.insert(*c) {
                return Err(LsrmError::config(format!("duplicate coordinate {c:?}")));
            }
        }
        Ok(())
    }

    /// Object-space voxel centre of each volume token.
    pub fn voxel_centers(&self) -> Vec<Point3> {
        let r = self.grid_res;
        self.coords
            .iter()
            .map(|c| {
                Vector3::new(
                    (c[0] as f64 + 0.5) / r[0] as f64,
                    (c[1] as f64 + 0.5) / r[1] as f64,
                    (c[2] as f64 + 0.5) / r[2] as f64,
                )
            })
            .collect()
    }
}

/// Non-overlapping `patch x patch` tiles, row-major over tiles, each tile
/// flattened row-major with channels fastest. `[H, W, C] -> [(H/p)(W/p), p*p*C]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || patch == 0 || s[0] % patch != 0 || s[1] % patch != 0 {
        return Err(LsrmError::config(format!(
            "image {s:?} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ph, pw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..ph {
        for pc in 0..pw {
            for y in 0..patch {
                let row = pr * patch + y;
                let start = (row * w + pc * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![ph * pw, patch * patch * c], out)
}

pub fn unpatchify(patches: &Tensor, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor> {
    if patch == 0
        || h % patch != 0
        || w % patch != 0
        || patches.shape() != [(h / patch) * (w / patch), patch * patch * c]
    {
        return Err(LsrmError::config(format!(
            "patches {:?} do not tile a {h}x{w}x{c} image",
            patches.shape()
        )));
    }
    let pw = w / patch;
    let mut out = vec![0f32; h * w * c];
    for (t, tile) in patches.data().chunks(patch * patch * c).enumerate() {
        let (pr, pc) = (t / pw, t % pw);
        for y in 0..patch {
            let dst = ((pr * patch + y) * w + pc * patch) * c;
            out[dst..dst + patch * c].copy_from_slice(&tile[y * patch * c..(y + 1) * patch * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Source of per-patch appearance features fused into image tokens.
pub trait FeatureProvider: Sync {
    fn dim(&self) -> usize;
    /// One row per `patch x patch` tile of `image`.
    fn features(&self, image: &Tensor, patch: usize) -> Result<Tensor>;
}

/// Returns all-zero features.
#[derive(Clone, Debug)]
pub struct ZeroFeatures {
    pub dim: usize,
}

impl FeatureProvider for ZeroFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, image: &Tensor, patch: usize) -> Result<Tensor> {
        let n = patchify(image, patch)?.rows();
        Ok(Tensor::zeros(&[n, self.dim]))
    }
}

/// Fixed random projection of raw patch pixels.
#[derive(Clone, Debug)]
pub struct RandomProjectionFeatures {
    pub projection: Linear,
}

impl RandomProjectionFeatures {
    pub fn new(patch_width: usize, dim: usize, stream: &SeedStream) -> Self {
        RandomProjectionFeatures {
            projection: Linear::random(patch_width, dim, stream),
        }
    }
}

impl FeatureProvider for RandomProjectionFeatures {
    fn dim(&self) -> usize {
        self.projection.d_out()
    }

    fn features(&self, image: &Tensor, patch: usize) -> Result<Tensor> {
        self.projection.forward(&patchify(image, patch)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedWeights {
    /// `Linear(patch ‖ ray-patch)`
    pub patch_ray: Linear,
    /// `Linear(provider features)`
    pub feat: Linear,
}

impl ImageEmbedWeights {
    pub fn random(channels: usize, d_feat: usize, d: usize, stream: &SeedStream) -> Self {
        let w = PATCH * PATCH * (channels + 6);
        ImageEmbedWeights {
            patch_ray: Linear::random(w, d, &stream.child("patch_ray")),
            feat: Linear::random(d_feat, d, &stream.child("feat")),
        }
    }
}

/// `Linear(patch ‖ rays) + Linear(features)` per token. `patches` is
/// `[N, p*p*C]`, `ray_patches` is `[N, p*p*6]`.
pub fn embed_image_tokens(
    patches: &Tensor,
    ray_patches: &Tensor,
    weights: &ImageEmbedWeights,
    provider: &dyn FeatureProvider,
    image: &Tensor,
) -> Result<Tensor> {
    let n = patches.rows();
    if ray_patches.rows() != n {
        return Err(LsrmError::config(format!(
            "{n} patches but {} ray patches",
            ray_patches.rows()
        )));
    }
    let (pw, rw) = (patches.row_width(), ray_patches.row_width());
    let mut joined = Vec::with_capacity(n * (pw + rw));
    for i in 0..n {
        joined.extend_from_slice(patches.row(i));
        joined.extend_from_slice(ray_patches.row(i));
    }
    let joined = Tensor::new(vec![n, pw + rw], joined)?;
    let feats = provider.features(image, PATCH)?;
    if feats.rows() != n {
        return Err(LsrmError::config(format!(
            "feature provider returned {} rows for {n} patches",
            feats.rows()
        )));
    }
    let a = weights.patch_ray.forward(&joined)?;
    let b = weights.feat.forward(&feats)?;
    a.add(&b)
}

/// Three independent per-axis tables, each `[S, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEmbed {
    pub px: Tensor,
    pub py: Tensor,
    pub pz: Tensor,
}

impl PosEmbed {
    pub fn random(res: usize, d: usize, stream: &SeedStream) -> Self {
        PosEmbed {
            px: stream.child("x").uniform(&[res, d], 1.0),
            py: stream.child("y").uniform(&[res, d], 1.0),
            pz: stream.child("z").uniform(&[res, d], 1.0),
        }
    }

    pub fn zeros(res: usize, d: usize) -> Self {
        PosEmbed {
            px: Tensor::zeros(&[res, d]),
            py: Tensor::zeros(&[res, d]),
            pz: Tensor::zeros(&[res, d]),
        }
    }

    pub fn res(&self) -> usize {
        self.px.rows()
    }

    pub fn width(&self) -> usize {
        self.px.row_width()
    }

    /// 2D variant for image tokens `[view, row, col]`: `Px[row] + Py[col]`.
    pub fn embed_image(&self, coords: &[[u32; 3]]) -> Result<Tensor> {
        let res = self.res() as u32;
        let d = self.width();
        let mut out = Vec::with_capacity(coords.len() * d);
        for c in coords {
            if c[1] >= res || c[2] >= res {
                return Err(LsrmError::config(format!(
                    "image coordinate {c:?} outside embedding resolution {res}"
                )));
            }
            out.extend(
                self.px
                    .row(c[1] as usize)
                    .iter()
                    .zip(self.py.row(c[2] as usize))
                    .map(|(a, b)| a + b),
            );
        }
        Tensor::new(vec![coords.len(), d], out)
    }
}

/// `p_{i,j,k} = Px[i] + Py[j] + Pz[k]`.
pub fn factorized_pos_embed(pe: &PosEmbed, coords: &[[u32; 3]]) -> Result<Tensor> {
    let res = pe.res() as u32;
    let d = pe.width();
    let mut out = Vec::with_capacity(coords.len() * d);
    for c in coords {
        if c.iter().any(|&v| v >= res) {
            return Err(LsrmError::config(format!(
                "coordinate {c:?} outside embedding resolution {res}"
            )));
        }
        let (x, y, z) = (
            pe.px.row(c[0] as usize),
            pe.py.row(c[1] as usize),
            pe.pz.row(c[2] as usize),
        );
        out.extend((0..d).map(|t| x[t] + y[t] + z[t]));
    }
    Tensor::new(vec![coords.len(), d], out)
}

/// All coordinates of an `S^3` grid in token order.
pub fn full_grid_coords(s: usize) -> Vec<[u32; 3]> {
    let s = s as u32;
    let mut out = Vec::with_capacity((s * s * s) as usize);
    for i in 0..s {
        for j in 0..s {
            for k in 0..s {
                out.push([i, j, k]);
            }
        }
    }
    out
}

/// Per-view boolean patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl PatchMask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        PatchMask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }
}

/// Boolean voxel grid, `[i][j][k]` with `k` fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelMask {
    pub res: usize,
    pub bits: Vec<bool>,
}

impl VoxelMask {
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[(i * self.res + j) * self.res + k]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn full(res: usize) -> Self {
        VoxelMask {
            res,
            bits: vec![true; res * res * res],
        }
    }

    pub fn coords(&self) -> Vec<[u32; 3]> {
        let r = self.res;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(n, _)| [(n / (r * r)) as u32, ((n / r) % r) as u32, (n % r) as u32])
            .collect()
    }

    pub fn from_coords(res: usize, coords: &[[u32; 3]]) -> Self {
        let mut bits = vec![false; res * res * res];
        for c in coords {
            bits[(c[0] as usize * res + c[1] as usize) * res + c[2] as usize] = true;
        }
        VoxelMask { res, bits }
    }
}

/// A patch is foreground iff any of its pixels has alpha > 0.5.
pub fn foreground_patch_mask(alpha: &Tensor, patch: usize) -> Result<PatchMask> {
    let s = alpha.shape();
    if s.len() != 2 || patch == 0 || s[0] % patch != 0 || s[1] % patch != 0 {
        return Err(LsrmError::config(format!(
            "alpha {s:?} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (h, w) = (s[0], s[1]);
    let (rows, cols) = (h / patch, w / patch);
    let mut bits = vec![false; rows * cols];
    for (n, &a) in alpha.data().iter().enumerate() {
        if a > 0.5 {
            let (y, x) = (n / w, n % w);
            bits[(y / patch) * cols + x / patch] = true;
        }
    }
    Ok(PatchMask { rows, cols, bits })
}

/// Sample position `t` (per axis, `0..T`) inside voxel `i` of an `s` grid.
pub fn mask_sample_coord(i: usize, t: usize, s: usize) -> f64 {
    (i as f64 + (t as f64 + 0.5) / MASK_SAMPLES_PER_AXIS as f64) / s as f64
}

/// A voxel is informative when `min |s_t| <= tau` or `min s_t * max s_t <= 0`
/// over a `T^3` grid of in-voxel samples.
pub fn informative_voxel_mask(field: &SdfField, s_vol: usize, tau: f64, t_side: usize) -> Result<VoxelMask> {
    if !(tau > 0.0) {
        return Err(LsrmError::config(format!("tau must be positive, got {tau}")));
    }
    if t_side != MASK_SAMPLES_PER_AXIS {
        return Err(LsrmError::config(format!(
            "only {MASK_SAMPLES_PER_AXIS} samples per axis are supported"
        )));
    }
    let bits = (0..s_vol * s_vol * s_vol)
        .into_par_iter()
        .with_min_len(64)
        .map(|n| {
            let (i, j, k) = (n / (s_vol * s_vol), (n / s_vol) % s_vol, n % s_vol);
            let mut min_abs = f64::INFINITY;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for a in 0..t_side {
                let x = mask_sample_coord(i, a, s_vol);
                for b in 0..t_side {
                    let y = mask_sample_coord(j, b, s_vol);
                    for c in 0..t_side {
                        let z = mask_sample_coord(k, c, s_vol);
                        let s = eval_sdf(field, &Vector3::new(x, y, z));
                        min_abs = min_abs.min(s.abs());
                        lo = lo.min(s);
                        hi = hi.max(s);
                    }
                }
            }
            min_abs <= tau || lo * hi <= 0.0
        })
        .collect();
    Ok(VoxelMask { res: s_vol, bits })
}

/// Fine volume tokens: for every mask-true fine voxel, the coarse parent
/// token's feature (nearest replication) plus the fine positional embedding.
pub fn upsample_select_volume(
    x_d: &Tensor,
    coarse_res: usize,
    mask: &VoxelMask,
    factor: usize,
    fine_pe: &PosEmbed,
) -> Result<TokenSet> {
    if mask.res != coarse_res * factor {
        return Err(LsrmError::config(format!(
            "fine mask resolution {} != {coarse_res} x {factor}",
            mask.res
        )));
    }
    if x_d.rows() != coarse_res.pow(3) {
        return Err(LsrmError::config(format!(
            "expected {} coarse volume tokens, got {}",
            coarse_res.pow(3),
            x_d.rows()
        )));
    }
    let coords = mask.coords();
    let parents: Vec<usize> = coords
        .iter()
        .map(|c| {
            let p = c.map(|v| v as usize / factor);
            (p[0] * coarse_res + p[1]) * coarse_res + p[2]
        })
        .collect();
    let mut features = x_d.gather_rows(&parents);
    if features.row_width() != fine_pe.width() {
        return Err(LsrmError::config("fine positional embedding width differs from tokens"));
    }
    features.add_assign(&factorized_pos_embed(fine_pe, &coords)?.reshape(features.shape())?)?;
    let r = mask.res as u32;
    Ok(TokenSet {
        modality: Modality::Volume,
        features,
        coords,
        grid_res: [r, r, r],
    })
}

/// Fine image tokens from per-view fine patch masks; coarse tokens `y_d` are
/// ordered `[view][row][col]` on a `coarse_res^2` grid per view.
pub fn upsample_select_image(
    y_d: &Tensor,
    coarse_res: usize,
    masks: &[PatchMask],
    factor: usize,
    fine_pe: &PosEmbed,
) -> Result<TokenSet> {
    let views = masks.len();
    let fine = coarse_res * factor;
    if y_d.rows() != views * coarse_res * coarse_res {
        return Err(LsrmError::config(format!(
            "expected {} coarse image tokens, got {}",
            views * coarse_res * coarse_res,
            y_d.rows()
        )));
    }
    let mut coords = Vec::new();
    for (v, m) in masks.iter().enumerate() {
        if m.rows != fine || m.cols != fine {
            return Err(LsrmError::config(format!(
                "view {v} mask is {}x{}, expected {fine}x{fine}",
                m.rows, m.cols
            )));
        }
        for r in 0..fine {
            for c in 0..fine {
                if m.get(r, c) {
                    coords.push([v as u32, r as u32, c as u32]);
                }
            }
        }
    }
    let parents: Vec<usize> = coords
        .iter()
        .map(|c| {
            let (v, r, col) = (c[0] as usize, c[1] as usize / factor, c[2] as usize / factor);
            (v * coarse_res + r) * coarse_res + col
        })
        .collect();
    let mut features = y_d.gather_rows(&parents);
    if features.row_width() != fine_pe.width() {
        return Err(LsrmError::config("fine positional embedding width differs from tokens"));
    }
    features.add_assign(&fine_pe.embed_image(&coords)?.reshape(features.shape())?)?;
    Ok(TokenSet {
        modality: Modality::Image,
        features,
        coords,
        grid_res: [views as u32, fine as u32, fine as u32],
    })
}

/// Both modalities at once: `(x_up, y_up)`.
#[allow(clippy::too_many_arguments)]
pub fn upsample_select_tokens(
    x_d: &Tensor,
    vol_coarse_res: usize,
    y_d: &Tensor,
    img_coarse_res: usize,
    vol_mask: &VoxelMask,
    img_masks: &[PatchMask],
    factor_vol: usize,
    factor_img: usize,
    fine_vol_pe: &PosEmbed,
    fine_img_pe: &PosEmbed,
) -> Result<(TokenSet, TokenSet)> {
    Ok((
        upsample_select_volume(x_d, vol_coarse_res, vol_mask, factor_vol, fine_vol_pe)?,
        upsample_select_image(y_d, img_coarse_res, img_masks, factor_img, fine_img_pe)?,
    ))
}
