//! Spatial block partitions over token sets and per-block compressed KV.
//!
//! Block ids are stable: every block of the block grid has an id whether or
//! not any token lands in it. Occupied blocks are additionally numbered by a
//! dense *slot* (ascending block id), and all KV-side tables (compressed KV,
//! selections, gather offsets) are indexed by slot.

use rayon::prelude::*;

use crate::error::{LsrmError, Result};
use crate::rng::SeedStream;
use crate::tensor::{ResBlock, Tensor};
use crate::tokenizer::{Modality, TokenSet};

pub const BLOCK: usize = 8;
pub const EMPTY_SLOT: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPartition {
    pub modality: Modality,
    pub block_size: usize,
    pub grid_res: [u32; 3],
    /// `[views, rows, cols]` for images, `[bx, by, bz]` for volumes.
    pub block_grid: [u32; 3],
    pub block_of_token: Vec<u32>,
    /// Block id of each occupied slot, ascending.
    pub occupied: Vec<u32>,
    slot_of_block: Vec<u32>,
    /// `tokens_of_slot(s) = indices[offsets[s]..offsets[s+1]]`.
    pub offsets: Vec<u32>,
    pub indices: Vec<u32>,
    /// Per block id. Volumes: object-space centre. Images: `[view, row, col]`
    /// centre in token units (token `r` spans `[r, r+1)`).
    pub centers: Vec<[f64; 3]>,
}

fn span_center(b: u32, block: usize, res: u32) -> f64 {
    let lo = b as usize * block;
    let hi = ((b as usize + 1) * block).min(res as usize);
    (lo + hi) as f64 / 2.0
}

fn div_ceil(a: u32, b: usize) -> u32 {
    (a as usize).div_ceil(b) as u32
}

impl BlockPartition {
    pub fn num_blocks(&self) -> usize {
        self.block_grid.iter().map(|&n| n as usize).product()
    }

    pub fn num_occupied(&self) -> usize {
        self.occupied.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.block_of_token.len()
    }

    pub fn slot_of_block(&self, block: u32) -> Option<usize> {
        self.slot_of_block
            .get(block as usize)
            .copied()
            .filter(|&s| s != EMPTY_SLOT)
            .map(|s| s as usize)
    }

    pub fn tokens_of_slot(&self, slot: usize) -> &[u32] {
        &self.indices[self.offsets[slot] as usize..self.offsets[slot + 1] as usize]
    }

    pub fn tokens_of_block(&self, block: u32) -> &[u32] {
        match self.slot_of_block(block) {
            Some(s) => self.tokens_of_slot(s),
            None => &[],
        }
    }

    pub fn occupancy(&self, block: u32) -> usize {
        self.tokens_of_block(block).len()
    }

    /// Occupied slot of token `t`.
    pub fn slot_of_token(&self, t: usize) -> usize {
        self.slot_of_block[self.block_of_token[t] as usize] as usize
    }

    /// View of an image block id.
    pub fn view_of_block(&self, block: u32) -> u32 {
        block / (self.block_grid[1] * self.block_grid[2])
    }

    /// All occupied blocks' tokens, slot-major, ascending within a slot.
    pub fn block_major_order(&self) -> &[u32] {
        &self.indices
    }
}

/// Groups tokens by floor-dividing their spatial coordinates by `block_size`.
/// Image blocks never straddle views because the view index is kept as-is.
pub fn partition(tokens: &TokenSet, block_size: usize) -> Result<BlockPartition> {
    if block_size == 0 {
        return Err(LsrmError::config("block size must be positive"));
    }
    let r = tokens.grid_res;
    let block_grid = match tokens.modality {
        Modality::Image => [r[0], div_ceil(r[1], block_size), div_ceil(r[2], block_size)],
        Modality::Volume => r.map(|n| div_ceil(n, block_size)),
    };
    let spatial_axes = match tokens.modality {
        Modality::Image => 1,
        Modality::Volume => 0,
    };
    let block_of = |c: &[u32; 3]| -> u32 {
        let mut b = [c[0], c[1], c[2]];
        for v in b.iter_mut().skip(spatial_axes) {
            *v /= block_size as u32;
        }
        (b[0] * block_grid[1] + b[1]) * block_grid[2] + b[2]
    };
    let nblocks: usize = block_grid.iter().map(|&n| n as usize).product();
    let mut block_of_token = Vec::with_capacity(tokens.len());
    let mut counts = vec![0u32; nblocks];
    for c in &tokens.coords {
        if c.iter().zip(&r).any(|(v, n)| v >= n) {
            return Err(LsrmError::config(format!("coordinate {c:?} outside grid {r:?}")));
        }
        let b = block_of(c);
        counts[b as usize] += 1;
        block_of_token.push(b);
    }
    let mut slot_of_block = vec![EMPTY_SLOT; nblocks];
    let mut occupied = Vec::new();
    let mut offsets = vec![0u32];
    for (b, &n) in counts.iter().enumerate() {
        if n > 0 {
            slot_of_block[b] = occupied.len() as u32;
            occupied.push(b as u32);
            offsets.push(offsets.last().unwrap() + n);
        }
    }
    let mut fill: Vec<u32> = offsets[..occupied.len()].to_vec();
    let mut indices = vec![0u32; tokens.len()];
    for (t, &b) in block_of_token.iter().enumerate() {
        let s = slot_of_block[b as usize] as usize;
        indices[fill[s] as usize] = t as u32;
        fill[s] += 1;
    }
    let mut centers = Vec::with_capacity(nblocks);
    for a in 0..block_grid[0] {
        for b in 0..block_grid[1] {
            for c in 0..block_grid[2] {
                centers.push(match tokens.modality {
                    Modality::Image => [
                        a as f64,
                        span_center(b, block_size, r[1]),
                        span_center(c, block_size, r[2]),
                    ],
                    Modality::Volume => [
                        span_center(a, block_size, r[0]) / r[0] as f64,
                        span_center(b, block_size, r[1]) / r[1] as f64,
                        span_center(c, block_size, r[2]) / r[2] as f64,
                    ],
                });
            }
        }
    }
    Ok(BlockPartition {
        modality: tokens.modality,
        block_size,
        grid_res: r,
        block_grid,
        block_of_token,
        occupied,
        slot_of_block,
        offsets,
        indices,
        centers,
    })
}

/// Separate residual transforms for keys and values, width `h_kv * d_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressWeights {
    pub k: ResBlock,
    pub v: ResBlock,
}

impl CompressWeights {
    pub fn random(width: usize, stream: &SeedStream) -> Self {
        CompressWeights {
            k: ResBlock::random(width, &stream.child("k")),
            v: ResBlock::random(width, &stream.child("v")),
        }
    }

    pub fn identity(width: usize, stream: &SeedStream) -> Self {
        CompressWeights {
            k: ResBlock::identity(width, &stream.child("k")),
            v: ResBlock::identity(width, &stream.child("v")),
        }
    }
}

/// Rows of a token tensor belonging to each occupied block slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotIndex {
    pub offsets: Vec<u32>,
    pub rows: Vec<u32>,
}

impl SlotIndex {
    pub fn from_partition(part: &BlockPartition) -> Self {
        SlotIndex {
            offsets: part.offsets.clone(),
            rows: part.indices.clone(),
        }
    }

    /// Slots laid out back to back: slot `s` owns the next `counts[s]` rows.
    pub fn contiguous(counts: &[usize]) -> Self {
        let mut offsets = vec![0u32];
        for &c in counts {
            offsets.push(offsets.last().unwrap() + c as u32);
        }
        let rows = (0..*offsets.last().unwrap()).collect();
        SlotIndex { offsets, rows }
    }

    pub fn slots(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn rows_of(&self, slot: usize) -> &[u32] {
        &self.rows[self.offsets[slot] as usize..self.offsets[slot + 1] as usize]
    }
}

/// Mean of the rows of `x` listed in each slot, in listed order, f64.
pub fn block_mean(x: &Tensor, slots: &SlotIndex) -> Tensor {
    let w = x.row_width();
    let mut out = Tensor::zeros(&[slots.slots(), w]);
    out.data_mut()
        .par_chunks_mut(w.max(1))
        .enumerate()
        .for_each(|(s, row)| {
            let toks = slots.rows_of(s);
            let mut acc = vec![0f64; w];
            for &t in toks {
                for (a, b) in acc.iter_mut().zip(x.row(t as usize)) {
                    *a += *b as f64;
                }
            }
            for (o, a) in row.iter_mut().zip(&acc) {
                *o = (a / toks.len() as f64) as f32;
            }
        });
    out
}

/// Per-token ResBlock, then mean within each slot. `k`, `v` are
/// `[N, h_kv, d_h]`; outputs are `[slots, h_kv, d_h]`.
pub fn compress_slots(
    k: &Tensor,
    v: &Tensor,
    slots: &SlotIndex,
    w: &CompressWeights,
) -> Result<(Tensor, Tensor)> {
    if k.shape() != v.shape() || slots.rows.iter().any(|&r| r as usize >= k.rows()) {
        return Err(LsrmError::config(format!(
            "compress inputs k{:?} v{:?} do not cover the slot index",
            k.shape(),
            v.shape()
        )));
    }
    let mut shape = k.shape().to_vec();
    shape[0] = slots.slots();
    let flat = [k.rows(), k.row_width()];
    let kr = w.k.forward(&k.clone().reshape(&flat)?)?;
    let vr = w.v.forward(&v.clone().reshape(&flat)?)?;
    Ok((
        block_mean(&kr, slots).reshape(&shape)?,
        block_mean(&vr, slots).reshape(&shape)?,
    ))
}

/// Compressed KV of every occupied block of `part`, ordered by slot.
pub fn compress_block_kv(
    k: &Tensor,
    v: &Tensor,
    part: &BlockPartition,
    w: &CompressWeights,
) -> Result<(Tensor, Tensor)> {
    if k.rows() != part.num_tokens() {
        return Err(LsrmError::config(format!(
            "compress inputs have {} rows for a partition of {} tokens",
            k.rows(),
            part.num_tokens()
        )));
    }
    compress_slots(k, v, &SlotIndex::from_partition(part), w)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct OccupancyStats {
    /// Token count per block id, empty blocks included.
    pub counts: Vec<u32>,
    pub total: usize,
    pub occupied: usize,
    pub min: u32,
    pub max: u32,
    pub mean: f64,
    pub max_over_mean: f64,
    pub gini: f64,
}

/// Gini coefficient of non-negative loads; 0 for perfectly even loads.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i + 1) as f64 - n as f64 - 1.0) * v)
        .sum();
    weighted / (n as f64 * total)
}

pub fn occupancy_stats(part: &BlockPartition) -> OccupancyStats {
    let counts: Vec<u32> = (0..part.num_blocks() as u32)
        .map(|b| part.occupancy(b) as u32)
        .collect();
    let total = part.num_tokens();
    let mean = if counts.is_empty() {
        0.0
    } else {
        total as f64 / counts.len() as f64
    };
    let max = counts.iter().copied().max().unwrap_or(0);
    let loads: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    OccupancyStats {
        total,
        occupied: part.num_occupied(),
        min: counts.iter().copied().min().unwrap_or(0),
        max,
        mean,
        max_over_mean: if mean > 0.0 { max as f64 / mean } else { 0.0 },
        gini: gini(&loads),
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::full_grid_coords;

    fn volume(res: u32, coords: Vec<[u32; 3]>) -> TokenSet {
        TokenSet {
            modality: Modality::Volume,
            features: Tensor::zeros(&[coords.len(), 1]),
            coords,
            grid_res: [res; 3],
        }
    }

    #[test]
    fn image_block_grid() {
        let t = TokenSet {
            modality: Modality::Image,
            features: Tensor::zeros(&[1, 1]),
            coords: vec![[2, 95, 0]],
            grid_res: [4, 96, 96],
        };
        let p = partition(&t, 8).unwrap();
        assert_eq!(p.block_grid, [4, 12, 12]);
        assert_eq!(p.num_blocks(), 4 * 144);
        assert_eq!(p.occupied, vec![2 * 144 + 11 * 12]);
        assert_eq!(p.view_of_block(p.occupied[0]), 2);
        assert_eq!(p.centers[p.occupied[0] as usize], [2.0, 92.0, 4.0]);
    }

    #[test]
    fn single_token() {
        let p = partition(&volume(96, vec![[0, 0, 0]]), 8).unwrap();
        assert_eq!(p.occupied, vec![0]);
        assert_eq!(p.occupancy(0), 1);
        assert_eq!(p.slot_of_block(1), None);
        let s = occupancy_stats(&p);
        assert_eq!(s.max_over_mean, p.num_blocks() as f64);
    }

    #[test]
    fn uniform_grid_is_balanced() {
        let p = partition(&volume(16, full_grid_coords(16)), 8).unwrap();
        let s = occupancy_stats(&p);
        assert_eq!(s.max_over_mean, 1.0);
        assert_eq!(s.gini, 0.0);
        assert_eq!((s.min, s.max), (512, 512));
    }

    #[test]
    fn in_block_order_is_ascending() {
        let coords = vec![[9, 0, 0], [0, 0, 1], [8, 1, 0], [0, 0, 0]];
        let p = partition(&volume(16, coords), 8).unwrap();
        assert_eq!(p.tokens_of_slot(0), &[1, 3]);
        assert_eq!(p.tokens_of_slot(1), &[0, 2]);
        assert_eq!(p.centers[p.occupied[1] as usize], [0.75, 0.25, 0.25]);
    }

    #[test]
    fn identity_compress_single_token_blocks() {
        let coords = vec![[0, 0, 0], [8, 8, 8]];
        let p = partition(&volume(16, coords), 8).unwrap();
        let s = SeedStream::new(4);
        let k = s.child("k").uniform(&[2, 2, 3], 1.0);
        let v = s.child("v").uniform(&[2, 2, 3], 1.0);
        let w = CompressWeights::identity(6, &s);
        let (kc, vc) = compress_block_kv(&k, &v, &p, &w).unwrap();
        assert_eq!(kc, k);
        assert_eq!(vc, v);
    }

    #[test]
    fn empty_partition_compresses_to_nothing() {
        let p = partition(&volume(16, vec![]), 8).unwrap();
        let w = CompressWeights::random(4, &SeedStream::new(1));
        let z = Tensor::zeros(&[0, 1, 4]);
        let (kc, _) = compress_block_kv(&z, &z, &p, &w).unwrap();
        assert_eq!(kc.shape(), &[0, 1, 4]);
    }

    #[test]
    fn gini_extremes() {
        assert_eq!(gini(&[3.0, 3.0, 3.0]), 0.0);
        assert!((gini(&[0.0, 0.0, 0.0, 4.0]) - 0.75).abs() < 1e-12);
    }
}
