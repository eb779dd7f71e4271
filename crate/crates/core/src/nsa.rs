//! Gated three-branch sparse attention over block-partitioned keys.
//!
//! Branches, in gate order: compressed (one summary key per occupied block),
//! selected (all original keys of a per-query set of blocks) and window (the
//! keys of the query's own block). Each branch yields `[Nx, h_q * d_h]`; the
//! gated sum goes through one shared output projection.
//!
//! Keys and values live in a [`KvSet`] whose slot index maps every occupied
//! block slot to its rows. Selected keys are visited slot-ascending and, inside
//! a slot, in the order the slot index lists them, so two KV layouts with the
//! same per-slot row contents give bit-identical outputs.

use rayon::prelude::*;

use crate::attention::{attend_row, AttentionParams};
use crate::blocks::{compress_block_kv, compress_slots, BlockPartition, CompressWeights, SlotIndex};
use crate::error::{LsrmError, Result};
use crate::rng::SeedStream;
use crate::tensor::{sigmoid, Linear, Tensor};

/// Query/key/value/output projections of one attention use.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnProj {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttnProj {
    pub fn random(p: &AttentionParams, stream: &SeedStream) -> Self {
        AttnProj {
            wq: Linear::random(p.d, p.d, &stream.child("q")),
            wk: Linear::random(p.d, p.kv_width(), &stream.child("k")),
            wv: Linear::random(p.d, p.kv_width(), &stream.child("v")),
            wo: Linear::random(p.d, p.d, &stream.child("o")),
        }
    }

    pub fn zeros(p: &AttentionParams) -> Self {
        AttnProj {
            wq: Linear::zeros(p.d, p.d),
            wk: Linear::zeros(p.d, p.kv_width()),
            wv: Linear::zeros(p.d, p.kv_width()),
            wo: Linear::zeros(p.d, p.d),
        }
    }

    pub fn queries(&self, x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
        let n = x.rows();
        self.wq.forward(x)?.reshape(&[n, p.h_q, p.d_h])
    }

    pub fn keys_values(&self, y: &Tensor, p: &AttentionParams) -> Result<(Tensor, Tensor)> {
        let n = y.rows();
        Ok((
            self.wk.forward(y)?.reshape(&[n, p.h_kv, p.d_h])?,
            self.wv.forward(y)?.reshape(&[n, p.h_kv, p.d_h])?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchSet {
    /// Compressed, selected and window; intra-modality.
    Full,
    /// Compressed and selected; cross-modality, where blocks are not shared.
    CmpSel,
}

impl BranchSet {
    pub fn count(self) -> usize {
        match self {
            BranchSet::Full => 3,
            BranchSet::CmpSel => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NsaWeights {
    pub proj: AttnProj,
    /// `d -> branches * d`, sigmoid applied.
    pub gate: Linear,
    pub compress: CompressWeights,
    pub branches: BranchSet,
}

impl NsaWeights {
    pub fn random(p: &AttentionParams, branches: BranchSet, stream: &SeedStream) -> Self {
        NsaWeights {
            proj: AttnProj::random(p, &stream.child("proj")),
            gate: Linear::random(p.d, branches.count() * p.d, &stream.child("gate")),
            compress: CompressWeights::random(p.kv_width(), &stream.child("compress")),
            branches,
        }
    }

    /// Gate layer with zero weights and the given per-branch bias, so every
    /// token gets the same gates `sigmoid(bias)`.
    pub fn set_constant_gates(&mut self, bias: &[f32]) -> Result<()> {
        let d = self.gate.d_out() / self.branches.count();
        if bias.len() != self.branches.count() {
            return Err(LsrmError::config(format!(
                "{} gate biases for {} branches",
                bias.len(),
                self.branches.count()
            )));
        }
        self.gate.weight.data_mut().fill(0.0);
        for (b, &v) in bias.iter().enumerate() {
            self.gate.bias[b * d..(b + 1) * d].fill(v);
        }
        Ok(())
    }
}

/// Keys, values and their per-block summaries for one key-side token set.
#[derive(Clone, Debug, PartialEq)]
pub struct KvSet {
    /// `[N, h_kv, d_h]`
    pub k: Tensor,
    pub v: Tensor,
    /// `[B, h_kv, d_h]`, one row per occupied slot.
    pub k_cmp: Tensor,
    pub v_cmp: Tensor,
    pub slots: SlotIndex,
}

impl KvSet {
    /// Project normalized key-side tokens and compress them per block.
    pub fn build(
        y: &Tensor,
        part: &BlockPartition,
        w: &NsaWeights,
        p: &AttentionParams,
    ) -> Result<KvSet> {
        let (k, v) = w.proj.keys_values(y, p)?;
        let (k_cmp, v_cmp) = compress_block_kv(&k, &v, part, &w.compress)?;
        Ok(KvSet {
            k,
            v,
            k_cmp,
            v_cmp,
            slots: SlotIndex::from_partition(part),
        })
    }

    /// Same as [`KvSet::build`] for tokens grouped by an explicit slot index.
    pub fn build_with_slots(
        y: &Tensor,
        slots: SlotIndex,
        w: &NsaWeights,
        p: &AttentionParams,
    ) -> Result<KvSet> {
        let (k, v) = w.proj.keys_values(y, p)?;
        let (k_cmp, v_cmp) = compress_slots(&k, &v, &slots, &w.compress)?;
        Ok(KvSet {
            k,
            v,
            k_cmp,
            v_cmp,
            slots,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.slots()
    }

    /// Payload size in bytes of all four tensors.
    pub fn bytes(&self) -> u64 {
        4 * (self.k.numel() + self.v.numel() + self.k_cmp.numel() + self.v_cmp.numel()) as u64
    }
}

/// Per-query lists of selected occupied-block slots.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Selection {
    pub lists: Vec<Vec<u32>>,
}

impl Selection {
    pub fn all(queries: usize, slots: usize) -> Self {
        let all: Vec<u32> = (0..slots as u32).collect();
        Selection {
            lists: vec![all; queries],
        }
    }

    pub fn queries(&self) -> usize {
        self.lists.len()
    }

    pub fn validate(&self, slots: usize) -> Result<()> {
        for (i, l) in self.lists.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for &s in l {
                if s as usize >= slots || !seen.insert(s) {
                    return Err(LsrmError::config(format!(
                        "query {i} selects invalid or repeated slot {s} (of {slots})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Keep only the listed query rows.
    pub fn subset(&self, rows: &[u32]) -> Selection {
        Selection {
            lists: rows.iter().map(|&r| self.lists[r as usize].clone()).collect(),
        }
    }
}

/// Where the selected branch gets its block lists from.
#[derive(Clone, Copy, Debug)]
pub enum SelectionSource<'a> {
    Given(&'a Selection),
    ScoreTopK(usize),
}

/// What the selected branch does for a query whose selection is empty.
#[derive(Clone, Copy, Debug)]
pub enum EmptySelection<'a> {
    Error,
    /// Attend to the query's own block; slots index the selected KV set.
    OwnBlock(&'a [usize]),
    /// Attend to the compressed summaries instead.
    Compressed,
}

/// Keys for the window branch: query `i` attends to `kv.slots.rows_of(own_slot[i])`.
#[derive(Clone, Copy, Debug)]
pub struct WindowCtx<'a> {
    pub kv: &'a KvSet,
    pub own_slot: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct NsaInputs<'a> {
    /// Normalized query-side tokens `[Nx, d]`.
    pub x: &'a Tensor,
    pub kv: &'a KvSet,
    pub selection: SelectionSource<'a>,
    pub window: Option<WindowCtx<'a>>,
    pub on_empty: EmptySelection<'a>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NsaOutput {
    /// `[Nx, d]` after the output projection.
    pub out: Tensor,
    /// `[Nx, branches * d]`
    pub gates: Tensor,
    /// Per branch `[Nx, d]`, before gating.
    pub branch_outputs: Vec<Tensor>,
    pub selection: Selection,
}

/// Compressed branch: dense attention over block summaries.
pub fn cmp_attention(q: &Tensor, k_cmp: &Tensor, v_cmp: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    crate::attention::dense_cross_attention(q, k_cmp, v_cmp, p, None)
}

/// Window branch: each query sees only the keys of its own block.
pub fn win_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    part_q: &BlockPartition,
    part_kv: &BlockPartition,
    p: &AttentionParams,
) -> Result<Tensor> {
    if q.rows() != part_q.num_tokens() || k.rows() != part_kv.num_tokens() {
        return Err(LsrmError::config("window attention inputs do not match partitions"));
    }
    let lists: Vec<&[u32]> = (0..q.rows())
        .map(|i| part_kv.tokens_of_block(part_q.block_of_token[i]))
        .collect();
    let table = crate::attention::GatherTable::from_lists(lists);
    crate::attention::gathered_attention(q, k, v, p, &table)
}

fn selected_keys(slots: &SlotIndex, list: &[u32]) -> Vec<u32> {
    let mut sorted = list.to_vec();
    sorted.sort_unstable();
    let mut keys = Vec::new();
    for s in sorted {
        keys.extend_from_slice(slots.rows_of(s as usize));
    }
    keys
}

/// Selected branch: each query sees every original key of its selected blocks.
pub fn sel_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    part_kv: &BlockPartition,
    sel: &Selection,
    p: &AttentionParams,
    own_block_fallback: Option<&[usize]>,
) -> Result<Tensor> {
    if sel.queries() != q.rows() || k.rows() != part_kv.num_tokens() {
        return Err(LsrmError::config("selected attention inputs do not match"));
    }
    sel.validate(part_kv.num_occupied())?;
    let slots = SlotIndex::from_partition(part_kv);
    let lists: Vec<Vec<u32>> = sel
        .lists
        .iter()
        .enumerate()
        .map(|(i, l)| match (l.is_empty(), own_block_fallback) {
            (true, Some(own)) => slots.rows_of(own[i]).to_vec(),
            _ => selected_keys(&slots, l),
        })
        .collect();
    let table = crate::attention::GatherTable::from_lists(lists);
    crate::attention::gathered_attention(q, k, v, p, &table)
}

/// Per query: the `budget` slots with the largest logit against the compressed
/// keys, summed over all query heads; ties go to the lower slot.
pub fn score_topk_blocks(q: &Tensor, k_cmp: &Tensor, budget: usize, p: &AttentionParams) -> Selection {
    let b = k_cmp.rows();
    let (d_h, kvw) = (p.d_h, p.kv_width());
    let lists = (0..q.rows())
        .into_par_iter()
        .map(|i| {
            let qr = q.row(i);
            let mut scores: Vec<(f64, u32)> = (0..b)
                .map(|s| {
                    let kr = &k_cmp.data()[s * kvw..(s + 1) * kvw];
                    let mut acc = 0f64;
                    for g in 0..p.h_q {
                        let kh = p.kv_head(g);
                        for t in 0..d_h {
                            acc += qr[g * d_h + t] as f64 * kr[kh * d_h + t] as f64;
                        }
                    }
                    (acc * p.scale(), s as u32)
                })
                .collect();
            scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scores.into_iter().take(budget).map(|(_, s)| s).collect()
        })
        .collect();
    Selection { lists }
}

fn gates_for(x: &Tensor, w: &NsaWeights) -> Result<Tensor> {
    let mut g = w.gate.forward(x)?;
    for v in g.data_mut() {
        *v = sigmoid(*v as f64) as f32;
    }
    Ok(g)
}

/// Gated sparse attention of normalized query tokens against one KV set.
pub fn nsa_cross_attention(inp: &NsaInputs<'_>, w: &NsaWeights, p: &AttentionParams) -> Result<NsaOutput> {
    p.validate()?;
    let x = inp.x;
    let nx = x.rows();
    let kv = inp.kv;
    if kv.num_slots() == 0 {
        return Err(LsrmError::EmptyContext);
    }
    if w.branches == BranchSet::Full && inp.window.is_none() {
        return Err(LsrmError::config("window branch requested without window context"));
    }
    let q = w.proj.queries(x, p)?;
    let gates = gates_for(x, w)?;
    let selection = match inp.selection {
        SelectionSource::Given(s) => {
            if s.queries() != nx {
                return Err(LsrmError::config(format!(
                    "selection has {} rows for {nx} queries",
                    s.queries()
                )));
            }
            s.validate(kv.num_slots())?;
            s.clone()
        }
        SelectionSource::ScoreTopK(budget) => score_topk_blocks(&q, &kv.k_cmp, budget, p),
    };

    let d = p.d;
    let nb = w.branches.count();
    let cmp_keys: Vec<u32> = (0..kv.num_slots() as u32).collect();
    let mut branch = vec![0f32; nx * nb * d];
    branch
        .par_chunks_mut((nb * d).max(1))
        .enumerate()
        .try_for_each(|(i, row)| -> Result<()> {
            let qr = q.row(i);
            let (cmp, rest) = row.split_at_mut(d);
            attend_row(qr, &cmp_keys, &kv.k_cmp, &kv.v_cmp, p, cmp, None);
            let (sel, win) = rest.split_at_mut(d);
            let list = &selection.lists[i];
            if list.is_empty() {
                match inp.on_empty {
                    EmptySelection::Error => return Err(LsrmError::EmptyAttentionRow { query: i }),
                    EmptySelection::OwnBlock(own) => {
                        let keys = kv.slots.rows_of(own[i]);
                        attend_row(qr, keys, &kv.k, &kv.v, p, sel, None);
                    }
                    EmptySelection::Compressed => {
                        attend_row(qr, &cmp_keys, &kv.k_cmp, &kv.v_cmp, p, sel, None)
                    }
                }
            } else {
                let keys = selected_keys(&kv.slots, list);
                attend_row(qr, &keys, &kv.k, &kv.v, p, sel, None);
            }
            if let Some(wc) = inp.window.filter(|_| nb == 3) {
                let keys = wc.kv.slots.rows_of(wc.own_slot[i]);
                if keys.is_empty() {
                    return Err(LsrmError::EmptyAttentionRow { query: i });
                }
                attend_row(qr, keys, &wc.kv.k, &wc.kv.v, p, win, None);
            }
            Ok(())
        })?;

    let mut mixed = Tensor::zeros(&[nx, d]);
    for i in 0..nx {
        let g = gates.row(i);
        let b = &branch[i * nb * d..(i + 1) * nb * d];
        for (t, o) in mixed.row_mut(i).iter_mut().enumerate() {
            let mut acc = 0f64;
            for br in 0..nb {
                acc += g[br * d + t] as f64 * b[br * d + t] as f64;
            }
            *o = acc as f32;
        }
    }
    let out = w.proj.wo.forward(&mixed)?;
    let branch_outputs = (0..nb)
        .map(|br| {
            Tensor::from_fn(&[nx, d], |n| {
                let (i, t) = (n / d, n % d);
                branch[i * nb * d + br * d + t]
            })
        })
        .collect();
    Ok(NsaOutput {
        out,
        gates,
        branch_outputs,
        selection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::dense_cross_attention;
    use crate::blocks::partition;
    use crate::tokenizer::{Modality, TokenSet};

    fn tokens(coords: Vec<[u32; 3]>, d: usize, seed: u64) -> TokenSet {
        TokenSet {
            modality: Modality::Volume,
            features: SeedStream::new(seed).uniform(&[coords.len(), d], 1.0),
            coords,
            grid_res: [32; 3],
        }
    }

    fn scattered(n: usize, seed: u64) -> Vec<[u32; 3]> {
        let s = SeedStream::new(seed).uniform_f64(0.0, 32.0, n * 3);
        let mut set = std::collections::BTreeSet::new();
        for c in s.chunks(3) {
            set.insert([c[0] as u32, c[1] as u32, c[2] as u32]);
        }
        set.into_iter().collect()
    }

    #[test]
    fn full_selection_matches_dense() {
        let p = AttentionParams::new(8, 1, 4);
        let t = tokens(scattered(40, 1), 32, 2);
        let part = partition(&t, 8).unwrap();
        let s = SeedStream::new(3);
        let q = s.child("q").uniform(&[7, 8, 4], 1.0);
        let k = s.child("k").uniform(&[t.len(), 1, 4], 1.0);
        let v = s.child("v").uniform(&[t.len(), 1, 4], 1.0);
        let sel = Selection::all(7, part.num_occupied());
        let a = sel_attention(&q, &k, &v, &part, &sel, &p, None).unwrap();
        let b = dense_cross_attention(&q, &k, &v, &p, None).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn own_block_selection_equals_window() {
        let p = AttentionParams::new(4, 2, 2);
        let t = tokens(scattered(30, 5), 4, 6);
        let part = partition(&t, 8).unwrap();
        let s = SeedStream::new(7);
        let q = s.child("q").uniform(&[t.len(), 4, 2], 1.0);
        let k = s.child("k").uniform(&[t.len(), 2, 2], 1.0);
        let v = s.child("v").uniform(&[t.len(), 2, 2], 1.0);
        let sel = Selection {
            lists: (0..t.len()).map(|i| vec![part.slot_of_token(i) as u32]).collect(),
        };
        let a = sel_attention(&q, &k, &v, &part, &sel, &p, None).unwrap();
        let b = win_attention(&q, &k, &v, &part, &part, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn topk_ties_prefer_low_slots() {
        let p = AttentionParams::new(2, 1, 2);
        let q = Tensor::zeros(&[3, 2, 2]);
        let k_cmp = SeedStream::new(1).uniform(&[6, 1, 2], 1.0);
        let sel = score_topk_blocks(&q, &k_cmp, 2, &p);
        assert!(sel.lists.iter().all(|l| l == &vec![0, 1]));
        let all = score_topk_blocks(&q, &k_cmp, 10, &p);
        assert_eq!(all.lists[0].len(), 6);
    }

    #[test]
    fn topk_picks_aligned_block() {
        let p = AttentionParams::new(1, 1, 3);
        let q = Tensor::new(vec![1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let k_cmp = Tensor::new(vec![3, 1, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(score_topk_blocks(&q, &k_cmp, 1, &p).lists, vec![vec![1]]);
    }

    #[test]
    fn empty_selection_policies() {
        let p = AttentionParams::new(2, 1, 2);
        let t = tokens(scattered(12, 9), 4, 10);
        let part = partition(&t, 8).unwrap();
        let w = NsaWeights::random(&p, BranchSet::CmpSel, &SeedStream::new(11));
        let kv = KvSet::build(&t.features, &part, &w, &p).unwrap();
        let sel = Selection {
            lists: vec![vec![]; t.len()],
        };
        let mut inp = NsaInputs {
            x: &t.features,
            kv: &kv,
            selection: SelectionSource::Given(&sel),
            window: None,
            on_empty: EmptySelection::Error,
        };
        assert!(matches!(
            nsa_cross_attention(&inp, &w, &p),
            Err(LsrmError::EmptyAttentionRow { query: 0 })
        ));
        inp.on_empty = EmptySelection::Compressed;
        let out = nsa_cross_attention(&inp, &w, &p).unwrap();
        assert_eq!(out.branch_outputs[0], out.branch_outputs[1]);
    }

    #[test]
    fn zero_gate_layer_halves_branch_sum() {
        let p = AttentionParams::new(4, 1, 2);
        let t = tokens(scattered(20, 12), 8, 13);
        let part = partition(&t, 8).unwrap();
        let mut w = NsaWeights::random(&p, BranchSet::Full, &SeedStream::new(14));
        w.set_constant_gates(&[0.0, 0.0, 0.0]).unwrap();
        let kv = KvSet::build(&t.features, &part, &w, &p).unwrap();
        let own: Vec<usize> = (0..t.len()).map(|i| part.slot_of_token(i)).collect();
        let inp = NsaInputs {
            x: &t.features,
            kv: &kv,
            selection: SelectionSource::ScoreTopK(2),
            window: Some(WindowCtx { kv: &kv, own_slot: &own }),
            on_empty: EmptySelection::OwnBlock(&own),
        };
        let out = nsa_cross_attention(&inp, &w, &p).unwrap();
        assert!(out.gates.data().iter().all(|&g| g == 0.5));
        let mut sum = Tensor::zeros(&[t.len(), 8]);
        for b in &out.branch_outputs {
            sum.add_assign(b).unwrap();
        }
        sum.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        let expect = w.proj.wo.forward(&sum).unwrap();
        assert!(out.out.max_abs_diff(&expect) < 1e-5);
    }
}
