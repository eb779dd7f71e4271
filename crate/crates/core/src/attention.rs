//! Grouped-query scaled dot-product attention.
//!
//! Layout: `q` is `[Nx, h_q, d_h]`, `k`/`v` are `[Ny, h_kv, d_h]`. Query head
//! `g` reads KV head `g / (h_q / h_kv)`. Logits are scaled by `1/sqrt(d_h)`.
//!
//! Every path (dense, masked, gathered) funnels into [`attend_row`], which
//! walks an explicit key list in order. Two callers presenting the same key
//! sequence therefore produce bit-identical rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LsrmError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub h_q: usize,
    pub h_kv: usize,
    pub d_h: usize,
    pub d: usize,
    /// Enforce the tensor-core layout rule `(h_q / h_kv) % 16 == 0`.
    #[serde(default)]
    pub hardware_faithful: bool,
}

impl AttentionParams {
    pub fn new(h_q: usize, h_kv: usize, d_h: usize) -> Self {
        AttentionParams {
            h_q,
            h_kv,
            d_h,
            d: h_q * d_h,
            hardware_faithful: false,
        }
    }

    /// 32 query heads over 2 KV heads at width 1024.
    pub fn full_scale() -> Self {
        AttentionParams {
            hardware_faithful: true,
            ..AttentionParams::new(32, 2, 32)
        }
    }

    pub fn desk() -> Self {
        AttentionParams::new(8, 1, 8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_q == 0 || self.h_kv == 0 || self.d_h == 0 {
            return Err(LsrmError::config("attention head counts and d_h must be positive"));
        }
        if self.d != self.h_q * self.d_h {
            return Err(LsrmError::config(format!(
                "d = {} but h_q * d_h = {}",
                self.d,
                self.h_q * self.d_h
            )));
        }
        if self.h_q % self.h_kv != 0 {
            return Err(LsrmError::config(format!(
                "h_q = {} is not a multiple of h_kv = {}",
                self.h_q, self.h_kv
            )));
        }
        if self.hardware_faithful && (self.h_q / self.h_kv) % 16 != 0 {
            return Err(LsrmError::config(format!(
                "hardware-faithful mode needs h_q/h_kv to be a multiple of 16, got {}",
                self.h_q / self.h_kv
            )));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group(&self) -> usize {
        self.h_q / self.h_kv
    }

    pub fn kv_head(&self, query_head: usize) -> usize {
        query_head / self.group()
    }

    pub fn kv_width(&self) -> usize {
        self.h_kv * self.d_h
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_h as f64).sqrt()
    }
}

/// Boolean `[Nx, Ny]` admissibility matrix; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        AttnMask {
            rows,
            cols,
            bits: vec![fill; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        AttnMask { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.cols + j] = value;
    }
}

/// Per-query key lists padded to a common width. Only the first `len[i]`
/// entries of row `i` are live; the tail is masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherTable {
    width: usize,
    idx: Vec<u32>,
    len: Vec<u32>,
}

impl GatherTable {
    pub fn from_lists<I>(lists: I) -> Self
    where
        I: IntoIterator,
        I::Item: AsRef<[u32]>,
    {
        let lists: Vec<I::Item> = lists.into_iter().collect();
        let width = lists.iter().map(|l| l.as_ref().len()).max().unwrap_or(0);
        let mut idx = vec![0u32; lists.len() * width];
        let mut len = Vec::with_capacity(lists.len());
        for (i, l) in lists.iter().enumerate() {
            let l = l.as_ref();
            idx[i * width..i * width + l.len()].copy_from_slice(l);
            len.push(l.len() as u32);
        }
        GatherTable { width, idx, len }
    }

    pub fn queries(&self) -> usize {
        self.len.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keys(&self, i: usize) -> &[u32] {
        &self.idx[i * self.width..i * self.width + self.len[i] as usize]
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor, p: &AttentionParams) -> Result<()> {
    p.validate()?;
    let ok_q = q.shape().len() == 3 && q.shape()[1] == p.h_q && q.shape()[2] == p.d_h;
    let ok_k = k.shape().len() == 3 && k.shape()[1] == p.h_kv && k.shape()[2] == p.d_h;
    if !ok_q || !ok_k || k.shape() != v.shape() {
        return Err(LsrmError::config(format!(
            "attention shapes q{:?} k{:?} v{:?} do not match h_q={} h_kv={} d_h={}",
            q.shape(),
            k.shape(),
            v.shape(),
            p.h_q,
            p.h_kv,
            p.d_h
        )));
    }
    Ok(())
}

/// One query row against an ordered key list. `out` is `h_q * d_h` wide.
/// When `weights` is given it receives the softmax weights per head,
/// `[h_q, keys.len()]`.
pub(crate) fn attend_row(
    q_row: &[f32],
    keys: &[u32],
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
    out: &mut [f32],
    mut weights: Option<&mut [f64]>,
) {
    thread_local! {
        static SCRATCH: std::cell::RefCell<[Vec<f64>; 4]> = const { std::cell::RefCell::new([Vec::new(), Vec::new(), Vec::new(), Vec::new()]) };
    }
    let (d_h, group) = (p.d_h, p.group());
    let kvw = p.kv_width();
    let (kd, vd) = (k.data(), v.data());
    let scale = p.scale();
    let n = keys.len();
    SCRATCH.with(|cell| {
        let mut guard = cell.borrow_mut();
        let [logits, acc, q64, dots] = &mut *guard;
        dots.clear();
        dots.resize(group, 0.0);
        logits.clear();
        logits.resize(group * n, 0.0);
        acc.clear();
        acc.resize(group * d_h, 0.0);
        for kvh in 0..p.h_kv {
            let heads = kvh * group..(kvh + 1) * group;
            // logits[gi * n + l] for query head kvh * group + gi
            // head-interleaved so the per-head accumulation chains overlap;
            // each head still sums over d_h in order
            let qh = &q_row[heads.start * d_h..heads.end * d_h];
            q64.clear();
            q64.extend((0..d_h).flat_map(|t| (0..group).map(move |gi| qh[gi * d_h + t] as f64)));
            for (l, &key) in keys.iter().enumerate() {
                let off = key as usize * kvw + kvh * d_h;
                let kr = &kd[off..off + d_h];
                dots.iter_mut().for_each(|x| *x = 0.0);
                for (t, &kv) in kr.iter().enumerate() {
                    let kv = kv as f64;
                    for (x, q) in dots.iter_mut().zip(&q64[t * group..(t + 1) * group]) {
                        *x += q * kv;
                    }
                }
                for (gi, x) in dots.iter().enumerate() {
                    logits[gi * n + l] = x * scale;
                }
            }
            let mut sums = [0f64; 64];
            let mut sums_vec;
            let sums: &mut [f64] = if group <= 64 {
                &mut sums[..group]
            } else {
                sums_vec = vec![0f64; group];
                &mut sums_vec
            };
            for (gi, sum) in sums.iter_mut().enumerate() {
                let row = &mut logits[gi * n..(gi + 1) * n];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for l in row.iter_mut() {
                    *l = (*l - max).exp();
                    *sum += *l;
                }
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (l, &key) in keys.iter().enumerate() {
                let off = key as usize * kvw + kvh * d_h;
                let vr = &vd[off..off + d_h];
                for gi in 0..group {
                    let w = logits[gi * n + l];
                    for (a, b) in acc[gi * d_h..(gi + 1) * d_h].iter_mut().zip(vr) {
                        *a += w * *b as f64;
                    }
                }
            }
            for (gi, g) in heads.enumerate() {
                let sum = sums[gi];
                for (o, a) in out[g * d_h..(g + 1) * d_h].iter_mut().zip(&acc[gi * d_h..(gi + 1) * d_h]) {
                    *o = (a / sum) as f32;
                }
                if let Some(w) = weights.as_deref_mut() {
                    for (dst, l) in w[g * n..(g + 1) * n].iter_mut().zip(&logits[gi * n..(gi + 1) * n]) {
                        *dst = l / sum;
                    }
                }
            }
        }
    });
}

/// Attention where query `i` sees exactly the keys of `table.keys(i)`.
pub fn gathered_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
    table: &GatherTable,
) -> Result<Tensor> {
    check_qkv(q, k, v, p)?;
    let nx = q.rows();
    if table.queries() != nx {
        return Err(LsrmError::config(format!(
            "gather table has {} rows for {nx} queries",
            table.queries()
        )));
    }
    let ny = k.rows() as u32;
    let mut out = Tensor::zeros(&[nx, p.h_q, p.d_h]);
    let w = p.h_q * p.d_h;
    if nx == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(w)
        .enumerate()
        .try_for_each(|(i, row)| {
            let keys = table.keys(i);
            if keys.is_empty() {
                return Err(LsrmError::EmptyAttentionRow { query: i });
            }
            if let Some(&bad) = keys.iter().find(|&&key| key >= ny) {
                return Err(LsrmError::config(format!(
                    "query {i} gathers key {bad} but only {ny} exist"
                )));
            }
            attend_row(q.row(i), keys, k, v, p, row, None);
            Ok(())
        })?;
    Ok(out)
}

fn mask_table(nx: usize, ny: usize, mask: Option<&AttnMask>) -> Result<GatherTable> {
    match mask {
        None => {
            let all: Vec<u32> = (0..ny as u32).collect();
            Ok(GatherTable::from_lists((0..nx).map(|_| all.as_slice())))
        }
        Some(m) => {
            if m.rows() != nx || m.cols() != ny {
                return Err(LsrmError::config(format!(
                    "mask is {}x{}, attention is {nx}x{ny}",
                    m.rows(),
                    m.cols()
                )));
            }
            let lists: Vec<Vec<u32>> = (0..nx)
                .map(|i| (0..ny).filter(|&j| m.get(i, j)).map(|j| j as u32).collect())
                .collect();
            Ok(GatherTable::from_lists(lists))
        }
    }
}

/// Dense (optionally masked) grouped-query cross attention. The reference
/// every sparse branch is checked against.
pub fn dense_cross_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    p: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    check_qkv(q, k, v, p)?;
    if k.rows() == 0 {
        return Err(LsrmError::EmptyContext);
    }
    let table = mask_table(q.rows(), k.rows(), mask)?;
    gathered_attention(q, k, v, p, &table)
}

/// Debug hook: softmax weights `[Nx, h_q, Ny]`, zero at masked positions.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    p: &AttentionParams,
    mask: Option<&AttnMask>,
) -> Result<Tensor> {
    check_qkv(q, k, k, p)?;
    let (nx, ny) = (q.rows(), k.rows());
    if ny == 0 {
        return Err(LsrmError::EmptyContext);
    }
    let table = mask_table(nx, ny, mask)?;
    let mut out = Tensor::zeros(&[nx, p.h_q, ny]);
    let mut scratch = vec![0f32; p.h_q * p.d_h];
    for i in 0..nx {
        let keys = table.keys(i);
        if keys.is_empty() {
            return Err(LsrmError::EmptyAttentionRow { query: i });
        }
        let mut w = vec![0f64; p.h_q * keys.len()];
        attend_row(q.row(i), keys, k, k, p, &mut scratch, Some(&mut w));
        let row = out.row_mut(i);
        for g in 0..p.h_q {
            for (t, &key) in keys.iter().enumerate() {
                row[g * ny + key as usize] = w[g * keys.len() + t] as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn qkv(nx: usize, ny: usize, p: &AttentionParams, seed: u64) -> (Tensor, Tensor, Tensor) {
        let s = SeedStream::new(seed);
        (
            s.child("q").uniform(&[nx, p.h_q, p.d_h], 1.0),
            s.child("k").uniform(&[ny, p.h_kv, p.d_h], 1.0),
            s.child("v").uniform(&[ny, p.h_kv, p.d_h], 1.0),
        )
    }

    #[test]
    fn single_key_returns_its_value() {
        let p = AttentionParams::new(4, 2, 3);
        let (q, k, v) = qkv(5, 1, &p, 1);
        let o = dense_cross_attention(&q, &k, &v, &p, None).unwrap();
        for i in 0..5 {
            for g in 0..4 {
                let kvh = p.kv_head(g);
                let got = &o.row(i)[g * 3..g * 3 + 3];
                let want = &v.row(0)[kvh * 3..kvh * 3 + 3];
                for (a, b) in got.iter().zip(want) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let p = AttentionParams::new(1, 1, 2);
        // q = (1,0) orthogonal to keys (0,1) and (0,-1)
        let q = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let k = Tensor::new(vec![2, 1, 2], vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let v = Tensor::new(vec![2, 1, 2], vec![2.0, 4.0, 6.0, -8.0]).unwrap();
        let o = dense_cross_attention(&q, &k, &v, &p, None).unwrap();
        assert!((o.data()[0] - 4.0).abs() < 1e-6);
        assert!((o.data()[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn all_masked_row_is_an_error() {
        let p = AttentionParams::new(2, 1, 2);
        let (q, k, v) = qkv(3, 4, &p, 2);
        let mut m = AttnMask::new(3, 4, true);
        for j in 0..4 {
            m.set(1, j, false);
        }
        let err = dense_cross_attention(&q, &k, &v, &p, Some(&m)).unwrap_err();
        assert!(matches!(err, LsrmError::EmptyAttentionRow { query: 1 }));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let p = AttentionParams::new(4, 2, 3);
        let (q, k, _) = qkv(2, 3, &p, 3);
        let bad_v = Tensor::zeros(&[4, 2, 3]);
        assert!(matches!(
            dense_cross_attention(&q, &k, &bad_v, &p, None),
            Err(LsrmError::Config(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = AttentionParams::new(4, 1, 4);
        let (q, k, _) = qkv(6, 9, &p, 4);
        let mask = AttnMask::from_fn(6, 9, |i, j| (i + j) % 3 != 0);
        let w = attention_weights(&q, &k, &p, Some(&mask)).unwrap();
        for i in 0..6 {
            for g in 0..4 {
                let s: f32 = w.row(i)[g * 9..(g + 1) * 9].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gqa_constraint() {
        assert!(AttentionParams::full_scale().validate().is_ok());
        let mut p = AttentionParams::new(32, 4, 32);
        p.hardware_faithful = true;
        assert!(p.validate().is_err());
        assert!(AttentionParams::new(6, 4, 2).validate().is_err());
    }
}

