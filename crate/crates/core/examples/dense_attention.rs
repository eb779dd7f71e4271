//! Grouped-query cross attention against the naive per-head reference, with
//! and without a mask.

use lsrm::attention::{attention_weights, dense_cross_attention, AttnMask, AttentionParams};
use lsrm::oracle;
use lsrm::rng::SeedStream;

fn main() -> lsrm::Result<()> {
    let p = AttentionParams::new(8, 2, 16);
    p.validate()?;
    let s = SeedStream::new(3);
    let (nx, ny) = (12, 40);
    let q = s.child("q").uniform(&[nx, p.h_q, p.d_h], 1.0);
    let k = s.child("k").uniform(&[ny, p.h_kv, p.d_h], 1.0);
    let v = s.child("v").uniform(&[ny, p.h_kv, p.d_h], 1.0);

    let fast = dense_cross_attention(&q, &k, &v, &p, None)?;
    let slow = oracle::dense_attention(&q, &k, &v, &p).reshape(fast.shape())?;
    println!("heads {}q/{}kv, group {}: max |fast - reference| = {:.2e}", p.h_q, p.h_kv, p.group(), fast.max_abs_diff(&slow));

    // each query sees a sliding band of keys
    let mask = AttnMask::from_fn(nx, ny, |i, j| j / 4 + 2 >= i && j / 4 <= i);
    let lists: Vec<Vec<usize>> = (0..nx).map(|i| (0..ny).filter(|&j| mask.get(i, j)).collect()).collect();
    let masked = dense_cross_attention(&q, &k, &v, &p, Some(&mask))?;
    let want = oracle::listed_attention(&q, &k, &v, &p, &lists).reshape(masked.shape())?;
    println!("banded mask: max |fast - reference| = {:.2e}", masked.max_abs_diff(&want));

    let w = attention_weights(&q, &k, &p, Some(&mask))?;
    let row: f32 = w.data()[..ny].iter().sum();
    println!("query 0, head 0: weights sum to {row:.6} over {} visible keys", lists[0].len());
    Ok(())
}
