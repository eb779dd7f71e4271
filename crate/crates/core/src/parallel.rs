//! Simulated block-aware sequence parallelism for the sparse stage.
//!
//! Workers are logical partitions executed under rayon; collectives are
//! explicit data movements recorded in a message log. Every spatial block
//! lives on exactly one worker, so window attention never communicates.
//! Compressed and selected attention read a replicated global KV assembled by
//! an all-gather before each layer, while queries stay local.
//!
//! Pooled block ids number volume slots first, then image slots.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::blocks::{BlockPartition, SlotIndex};
use crate::error::{LsrmError, Result};
use crate::nsa::{KvSet, WindowCtx};
use crate::pipeline::{stream_step, SparseBlockWeights, SparseContext, SparseInstance, StreamKv};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllToAll,
    AllGatherKv,
    WindowLocal,
    ReverseAllToAll,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AllToAll => "all_to_all",
            CollectiveKind::AllGatherKv => "all_gather_kv",
            CollectiveKind::WindowLocal => "window_local",
            CollectiveKind::ReverseAllToAll => "reverse_all_to_all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Message {
    pub layer: usize,
    pub kind: CollectiveKind,
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerTopology {
    pub workers: usize,
    /// Owning worker per occupied volume slot.
    pub vol_owner: Vec<u32>,
    /// Owning worker per occupied image slot.
    pub img_owner: Vec<u32>,
    /// Token load per worker.
    pub loads: Vec<usize>,
    pub message_log: Vec<Message>,
}

/// Longest-processing-time greedy: items by load descending (ties by index),
/// each onto the currently lightest worker (ties by worker id).
pub fn lpt_assign(loads: &[usize], workers: usize) -> Result<Vec<u32>> {
    if workers == 0 {
        return Err(LsrmError::config("worker count must be at least 1"));
    }
    let mut order: Vec<usize> = (0..loads.len()).collect();
    order.sort_by(|&a, &b| loads[b].cmp(&loads[a]).then(a.cmp(&b)));
    let mut totals = vec![0usize; workers];
    let mut owner = vec![0u32; loads.len()];
    for item in order {
        let w = (0..workers).min_by_key(|&w| (totals[w], w)).unwrap();
        totals[w] += loads[item];
        owner[item] = w as u32;
    }
    Ok(owner)
}

pub fn worker_loads(loads: &[usize], owner: &[u32], workers: usize) -> Vec<usize> {
    let mut totals = vec![0usize; workers];
    for (&l, &w) in loads.iter().zip(owner) {
        totals[w as usize] += l;
    }
    totals
}

pub fn max_over_mean(loads: &[usize]) -> f64 {
    let total: usize = loads.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mean = total as f64 / loads.len() as f64;
    *loads.iter().max().unwrap() as f64 / mean
}

fn pooled_occupancy(vol: &BlockPartition, img: &BlockPartition) -> Vec<usize> {
    (0..vol.num_occupied())
        .map(|s| vol.tokens_of_slot(s).len())
        .chain((0..img.num_occupied()).map(|s| img.tokens_of_slot(s).len()))
        .collect()
}

/// Assign every occupied block, image and volume pooled, to a worker.
pub fn shard_blocks(vol: &BlockPartition, img: &BlockPartition, workers: usize) -> Result<WorkerTopology> {
    let occ = pooled_occupancy(vol, img);
    let owner = lpt_assign(&occ, workers)?;
    let nv = vol.num_occupied();
    Ok(WorkerTopology {
        workers,
        loads: worker_loads(&occ, &owner, workers),
        vol_owner: owner[..nv].to_vec(),
        img_owner: owner[nv..].to_vec(),
        message_log: Vec::new(),
    })
}

/// Tokens of one modality held by one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    /// Global token id of each local row.
    pub ids: Vec<u32>,
    pub features: Tensor,
}

/// Per worker: volume shard and image shard.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedTokens {
    pub vol: Vec<Shard>,
    pub img: Vec<Shard>,
}

fn contiguous_split(n: usize, workers: usize) -> Vec<Vec<u32>> {
    (0..workers)
        .map(|w| ((w * n / workers) as u32..((w + 1) * n / workers) as u32).collect())
        .collect()
}

fn shard_from(ids: Vec<u32>, all: &Tensor) -> Shard {
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Shard {
        features: all.gather_rows(&rows),
        ids,
    }
}

/// Producer layout: each modality's token sequence cut into `W` contiguous,
/// equally sized ranges.
pub fn source_layout(x: &Tensor, y: &Tensor, workers: usize) -> ShardedTokens {
    ShardedTokens {
        vol: contiguous_split(x.rows(), workers)
            .into_iter()
            .map(|ids| shard_from(ids, x))
            .collect(),
        img: contiguous_split(y.rows(), workers)
            .into_iter()
            .map(|ids| shard_from(ids, y))
            .collect(),
    }
}

/// Global token ids held by each worker under `owner`, slot-ascending and
/// token-ascending inside a slot.
fn block_layout(part: &BlockPartition, owner: &[u32], workers: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); workers];
    for (s, &w) in owner.iter().enumerate() {
        out[w as usize].extend_from_slice(part.tokens_of_slot(s));
    }
    out
}

/// Bytes moved per token: features plus three u32 coordinates.
pub fn token_bytes(d: usize) -> u64 {
    (d * 4 + 12) as u64
}

fn redistribute(
    from: &[Shard],
    to_ids: &[Vec<u32>],
    n_tokens: usize,
    d: usize,
    layer: usize,
    kind: CollectiveKind,
    log: &mut Vec<Message>,
) -> Result<Vec<Shard>> {
    let workers = from.len();
    let mut location = vec![(u32::MAX, 0u32); n_tokens];
    let mut held = 0usize;
    for (w, s) in from.iter().enumerate() {
        for (r, &id) in s.ids.iter().enumerate() {
            let slot = location.get_mut(id as usize).ok_or_else(|| {
                LsrmError::Protocol(format!("worker {w} holds unknown token {id}"))
            })?;
            if slot.0 != u32::MAX {
                return Err(LsrmError::Protocol(format!("token {id} held twice")));
            }
            *slot = (w as u32, r as u32);
            held += 1;
        }
    }
    let wanted: usize = to_ids.iter().map(Vec::len).sum();
    if held != n_tokens || wanted != n_tokens {
        return Err(LsrmError::Protocol(format!(
            "{kind:?}: {held} tokens held, {wanted} assigned, {n_tokens} expected"
        )));
    }
    let mut counts = vec![vec![0u64; workers]; workers];
    let mut out = Vec::with_capacity(workers);
    for (dst, ids) in to_ids.iter().enumerate() {
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let (src, r) = location[id as usize];
            if src == u32::MAX {
                return Err(LsrmError::Protocol(format!("token {id} has no holder")));
            }
            data.extend_from_slice(from[src as usize].features.row(r as usize));
            counts[src as usize][dst] += 1;
        }
        out.push(Shard {
            ids: ids.clone(),
            features: Tensor::new(vec![ids.len(), d], data)?,
        });
    }
    for (src, row) in counts.iter().enumerate() {
        for (dst, &n) in row.iter().enumerate() {
            if src != dst && n > 0 {
                log.push(Message {
                    layer,
                    kind,
                    src,
                    dst,
                    bytes: n * token_bytes(d),
                });
            }
        }
    }
    Ok(out)
}

/// Move tokens from `shards` to the block-aware layout of `topo`.
pub fn all_to_all(
    shards: &ShardedTokens,
    topo: &mut WorkerTopology,
    vol: &BlockPartition,
    img: &BlockPartition,
    d: usize,
) -> Result<ShardedTokens> {
    if topo.vol_owner.len() != vol.num_occupied() || topo.img_owner.len() != img.num_occupied() {
        return Err(LsrmError::Protocol("assignment does not cover every occupied block".into()));
    }
    let w = topo.workers;
    let mut log = Vec::new();
    let out = ShardedTokens {
        vol: redistribute(&shards.vol, &block_layout(vol, &topo.vol_owner, w), vol.num_tokens(), d, 0, CollectiveKind::AllToAll, &mut log)?,
        img: redistribute(&shards.img, &block_layout(img, &topo.img_owner, w), img.num_tokens(), d, 0, CollectiveKind::AllToAll, &mut log)?,
    };
    topo.message_log.extend(log);
    Ok(out)
}

/// Slots owned by each worker, ascending.
fn owned_slots(owner: &[u32], workers: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); workers];
    for (s, &w) in owner.iter().enumerate() {
        out[w as usize].push(s);
    }
    out
}

/// Replicate per-worker KV into one globally ordered set (ascending slot,
/// in-block token order) and log what every worker receives.
pub fn all_gather_kv(
    local: &[KvSet],
    owned: &[Vec<usize>],
    total_slots: usize,
    layer: usize,
    log: &mut Vec<Message>,
) -> Result<KvSet> {
    let workers = local.len();
    let mut where_slot = vec![(usize::MAX, 0usize); total_slots];
    for (w, slots) in owned.iter().enumerate() {
        if slots.len() != local[w].num_slots() {
            return Err(LsrmError::Protocol(format!(
                "worker {w} owns {} slots but contributes {}",
                slots.len(),
                local[w].num_slots()
            )));
        }
        for (ls, &g) in slots.iter().enumerate() {
            if g >= total_slots || where_slot[g].0 != usize::MAX {
                return Err(LsrmError::Protocol(format!("slot {g} gathered twice or out of range")));
            }
            where_slot[g] = (w, ls);
        }
    }
    if where_slot.iter().any(|s| s.0 == usize::MAX) {
        return Err(LsrmError::Protocol("a slot is missing from the gather".into()));
    }
    let trailing = local
        .iter()
        .find(|kv| kv.k.numel() > 0 || kv.k_cmp.numel() > 0)
        .map(|kv| kv.k.shape()[1..].to_vec())
        .unwrap_or_else(|| local[0].k.shape()[1..].to_vec());
    let row_w: usize = trailing.iter().product();
    let (mut k, mut v, mut kc, mut vc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut counts = Vec::with_capacity(total_slots);
    for &(w, ls) in &where_slot {
        let kv = &local[w];
        let rows = kv.slots.rows_of(ls);
        counts.push(rows.len());
        for &r in rows {
            k.extend_from_slice(kv.k.row(r as usize));
            v.extend_from_slice(kv.v.row(r as usize));
        }
        kc.extend_from_slice(&kv.k_cmp.data()[ls * row_w..(ls + 1) * row_w]);
        vc.extend_from_slice(&kv.v_cmp.data()[ls * row_w..(ls + 1) * row_w]);
    }
    let n: usize = counts.iter().sum();
    let shape = |rows: usize| {
        let mut s = vec![rows];
        s.extend_from_slice(&trailing);
        s
    };
    for src in 0..workers {
        let bytes = local[src].bytes();
        for dst in 0..workers {
            if src != dst {
                log.push(Message {
                    layer,
                    kind: CollectiveKind::AllGatherKv,
                    src,
                    dst,
                    bytes,
                });
            }
        }
    }
    Ok(KvSet {
        k: Tensor::new(shape(n), k)?,
        v: Tensor::new(shape(n), v)?,
        k_cmp: Tensor::new(shape(total_slots), kc)?,
        v_cmp: Tensor::new(shape(total_slots), vc)?,
        slots: SlotIndex::contiguous(&counts),
    })
}

/// Static per-worker layout derived from the topology.
struct WorkerPlan {
    vol_ids: Vec<u32>,
    img_ids: Vec<u32>,
    vol_slots: SlotIndex,
    img_slots: SlotIndex,
    /// Local slot of each local token (window branch).
    vol_local_own: Vec<usize>,
    img_local_own: Vec<usize>,
    /// Global slot of each local token (empty-selection fallback).
    vol_global_own: Vec<usize>,
    img_global_own: Vec<usize>,
}

fn worker_plan(ctx: &SparseContext, owned_vol: &[usize], owned_img: &[usize]) -> WorkerPlan {
    let side = |part: &BlockPartition, owned: &[usize]| {
        let mut ids = Vec::new();
        let mut counts = Vec::new();
        let mut local_own = Vec::new();
        let mut global_own = Vec::new();
        for (ls, &g) in owned.iter().enumerate() {
            let toks = part.tokens_of_slot(g);
            ids.extend_from_slice(toks);
            counts.push(toks.len());
            local_own.extend(std::iter::repeat(ls).take(toks.len()));
            global_own.extend(std::iter::repeat(g).take(toks.len()));
        }
        (ids, SlotIndex::contiguous(&counts), local_own, global_own)
    };
    let (vol_ids, vol_slots, vol_local_own, vol_global_own) = side(&ctx.vol_part, owned_vol);
    let (img_ids, img_slots, img_local_own, img_global_own) = side(&ctx.img_part, owned_img);
    WorkerPlan {
        vol_ids,
        img_ids,
        vol_slots,
        img_slots,
        vol_local_own,
        img_local_own,
        vol_global_own,
        img_global_own,
    }
}

#[derive(Clone, Debug)]
pub struct ParallelOutput {
    /// Outputs in global token order, reassembled from the source layout.
    pub x_s: Tensor,
    pub y_s: Tensor,
    pub topology: WorkerTopology,
}

struct LocalState {
    xi: Tensor,
    yi: Tensor,
    xn: Tensor,
    yn: Tensor,
    kv: [KvSet; 4],
}

fn collect_rows(shards: &[Shard], n: usize, d: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[n, d]);
    let mut seen = 0usize;
    for s in shards {
        for (r, &id) in s.ids.iter().enumerate() {
            out.row_mut(id as usize).copy_from_slice(s.features.row(r));
            seen += 1;
        }
    }
    if seen != n {
        return Err(LsrmError::Protocol(format!("reassembled {seen} of {n} tokens")));
    }
    Ok(out)
}

/// Sparse stage on `workers` simulated workers. Output equals the serial
/// [`crate::pipeline::sparse_stage_forward`] bit for bit.
pub fn parallel_sparse_stage(
    inst: &SparseInstance,
    blocks: &[SparseBlockWeights],
    workers: usize,
) -> Result<ParallelOutput> {
    let ctx = &inst.ctx;
    let p = &ctx.params;
    let d = p.d;
    let (vol, img) = (&ctx.vol_part, &ctx.img_part);
    let mut topo = shard_blocks(vol, img, workers)?;
    let source = source_layout(&inst.x_up.features, &inst.y_up.features, workers);
    let sharded = all_to_all(&source, &mut topo, vol, img, d)?;

    let owned_vol = owned_slots(&topo.vol_owner, workers);
    let owned_img = owned_slots(&topo.img_owner, workers);
    let plans: Vec<WorkerPlan> = (0..workers)
        .map(|w| worker_plan(ctx, &owned_vol[w], &owned_img[w]))
        .collect();
    for (w, plan) in plans.iter().enumerate() {
        if plan.vol_ids != sharded.vol[w].ids || plan.img_ids != sharded.img[w].ids {
            return Err(LsrmError::Protocol(format!("worker {w} layout disagrees with all-to-all")));
        }
    }
    let x_up: Vec<&Tensor> = sharded.vol.iter().map(|s| &s.features).collect();
    let y_up: Vec<&Tensor> = sharded.img.iter().map(|s| &s.features).collect();
    let mut xs: Vec<Tensor> = plans.iter().map(|pl| Tensor::zeros(&[pl.vol_ids.len(), d])).collect();
    let mut ys: Vec<Tensor> = plans.iter().map(|pl| Tensor::zeros(&[pl.img_ids.len(), d])).collect();

    for (m, w) in blocks.iter().enumerate() {
        let layer = m + 1;
        let locals: Vec<LocalState> = (0..workers)
            .into_par_iter()
            .map(|k| -> Result<LocalState> {
                let pl = &plans[k];
                let xi = crate::pipeline::injected(&xs[k], x_up[k], &w.x.inject)?;
                let yi = crate::pipeline::injected(&ys[k], y_up[k], &w.y.inject)?;
                let xn = w.x.norm_attn.forward(&xi)?;
                let yn = w.y.norm_attn.forward(&yi)?;
                let kv = [
                    KvSet::build_with_slots(&xn, pl.vol_slots.clone(), &w.x.self_nsa, p)?,
                    KvSet::build_with_slots(&yn, pl.img_slots.clone(), &w.x.cross_nsa, p)?,
                    KvSet::build_with_slots(&yn, pl.img_slots.clone(), &w.y.self_nsa, p)?,
                    KvSet::build_with_slots(&xn, pl.vol_slots.clone(), &w.y.cross_nsa, p)?,
                ];
                Ok(LocalState { xi, yi, xn, yn, kv })
            })
            .collect::<Result<_>>()?;

        let mut global = Vec::with_capacity(4);
        for (n, owned, total) in [
            (0, &owned_vol, vol.num_occupied()),
            (1, &owned_img, img.num_occupied()),
            (2, &owned_img, img.num_occupied()),
            (3, &owned_vol, vol.num_occupied()),
        ] {
            let parts: Vec<KvSet> = locals.iter().map(|l| l.kv[n].clone()).collect();
            global.push(all_gather_kv(&parts, owned, total, layer, &mut topo.message_log)?);
        }
        for k in 0..workers {
            topo.message_log.push(Message {
                layer,
                kind: CollectiveKind::WindowLocal,
                src: k,
                dst: k,
                bytes: 0,
            });
        }

        let updated: Vec<(Tensor, Tensor)> = (0..workers)
            .into_par_iter()
            .map(|k| -> Result<(Tensor, Tensor)> {
                let (pl, st) = (&plans[k], &locals[k]);
                let sel = ctx.sources(Some((&pl.vol_ids, &pl.img_ids)));
                let x = stream_step(
                    &st.xi,
                    &st.xn,
                    &w.x,
                    StreamKv {
                        self_kv: &global[0],
                        cross_kv: &global[1],
                        window: WindowCtx {
                            kv: &st.kv[0],
                            own_slot: &pl.vol_local_own,
                        },
                        own: &pl.vol_global_own,
                        self_sel: sel.get(0),
                        cross_sel: sel.get(1),
                    },
                    p,
                )?;
                let y = stream_step(
                    &st.yi,
                    &st.yn,
                    &w.y,
                    StreamKv {
                        self_kv: &global[2],
                        cross_kv: &global[3],
                        window: WindowCtx {
                            kv: &st.kv[2],
                            own_slot: &pl.img_local_own,
                        },
                        own: &pl.img_global_own,
                        self_sel: sel.get(2),
                        cross_sel: sel.get(3),
                    },
                    p,
                )?;
                Ok((x, y))
            })
            .collect::<Result<_>>()?;
        (xs, ys) = updated.into_iter().unzip();
    }

    let finished = ShardedTokens {
        vol: xs
            .into_iter()
            .zip(&sharded.vol)
            .map(|(mut x, s)| -> Result<Shard> {
                x.add_assign(&s.features)?;
                Ok(Shard { ids: s.ids.clone(), features: x })
            })
            .collect::<Result<_>>()?,
        img: ys
            .into_iter()
            .zip(&sharded.img)
            .map(|(mut y, s)| -> Result<Shard> {
                y.add_assign(&s.features)?;
                Ok(Shard { ids: s.ids.clone(), features: y })
            })
            .collect::<Result<_>>()?,
    };
    let back_layer = blocks.len() + 1;
    let src_vol: Vec<Vec<u32>> = source.vol.iter().map(|s| s.ids.clone()).collect();
    let src_img: Vec<Vec<u32>> = source.img.iter().map(|s| s.ids.clone()).collect();
    let mut log = Vec::new();
    let back = ShardedTokens {
        vol: redistribute(&finished.vol, &src_vol, vol.num_tokens(), d, back_layer, CollectiveKind::ReverseAllToAll, &mut log)?,
        img: redistribute(&finished.img, &src_img, img.num_tokens(), d, back_layer, CollectiveKind::ReverseAllToAll, &mut log)?,
    };
    topo.message_log.extend(log);
    Ok(ParallelOutput {
        x_s: collect_rows(&back.vol, vol.num_tokens(), d)?,
        y_s: collect_rows(&back.img, img.num_tokens(), d)?,
        topology: topo,
    })
}

/// `layer,kind,src,dst,bytes` with a header row.
pub fn message_log_csv(log: &[Message]) -> String {
    let mut out = String::from("layer,kind,src,dst,bytes\n");
    for m in log {
        let _ = writeln!(out, "{},{},{},{},{}", m.layer, m.kind.name(), m.src, m.dst, m.bytes);
    }
    out
}

pub fn bytes_of(log: &[Message], kind: CollectiveKind) -> u64 {
    log.iter().filter(|m| m.kind == kind).map(|m| m.bytes).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImbalanceRow {
    pub instance: usize,
    pub block_aware_loads: Vec<usize>,
    pub block_aware_ratio: f64,
    pub naive_loads: Vec<usize>,
    pub naive_ratio: f64,
}

/// Per-worker token loads under LPT and under a naive split that hands each
/// worker an equal-count contiguous run of the occupied block list.
pub fn imbalance_report(instances: &[(&BlockPartition, &BlockPartition)], workers: usize) -> Result<Vec<ImbalanceRow>> {
    if instances.is_empty() {
        return Err(LsrmError::config("imbalance report needs at least one instance"));
    }
    instances
        .iter()
        .enumerate()
        .map(|(n, (vol, img))| {
            let occ = pooled_occupancy(vol, img);
            let lpt = worker_loads(&occ, &lpt_assign(&occ, workers)?, workers);
            let naive_owner: Vec<u32> = (0..occ.len())
                .map(|b| (b * workers / occ.len().max(1)) as u32)
                .collect();
            let naive = worker_loads(&occ, &naive_owner, workers);
            Ok(ImbalanceRow {
                instance: n,
                block_aware_ratio: max_over_mean(&lpt),
                block_aware_loads: lpt,
                naive_ratio: max_over_mean(&naive),
                naive_loads: naive,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lpt_single_worker() {
        let owner = lpt_assign(&[3, 1, 4, 1, 5], 1).unwrap();
        assert!(owner.iter().all(|&w| w == 0));
        assert!(lpt_assign(&[1], 0).is_err());
    }

    #[test]
    fn lpt_ties() {
        // equal loads go round-robin by worker id in item order
        assert_eq!(lpt_assign(&[2, 2, 2, 2], 2).unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(lpt_assign(&[1, 5, 3], 2).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn ratio_of_empty_is_one() {
        assert_eq!(max_over_mean(&[0, 0]), 1.0);
        assert_eq!(max_over_mean(&[4, 2]), 4.0 / 3.0);
    }

    #[test]
    fn csv_header() {
        let log = vec![Message {
            layer: 2,
            kind: CollectiveKind::WindowLocal,
            src: 1,
            dst: 1,
            bytes: 0,
        }];
        assert_eq!(message_log_csv(&log), "layer,kind,src,dst,bytes\n2,window_local,1,1,0\n");
    }
}
