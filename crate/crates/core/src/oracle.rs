//! Slow, independent reference implementations used by the test suites.
//!
//! Nothing here shares code with the fast paths beyond plain tensor
//! containers and linear layers: loops are scalar, candidate sets are
//! enumerated in full, and block structure is recomputed from coordinates.

use std::collections::BTreeMap;

use crate::attention::AttentionParams;
use crate::geometry::Camera;
use crate::interp::Point3;
use crate::nsa::{NsaWeights, Selection};
use crate::tensor::Tensor;

/// Softmax attention of one query head over explicit key rows.
fn naive_head(q: &[f32], keys: &[usize], k: &Tensor, v: &Tensor, kv_head: usize, d_h: usize, scale: f64) -> Vec<f64> {
    let at = |t: &Tensor, r: usize, c: usize| t.data()[(r * t.row_width()) + kv_head * d_h + c] as f64;
    let logits: Vec<f64> = keys
        .iter()
        .map(|&r| (0..d_h).map(|c| q[c] as f64 * at(k, r, c)).sum::<f64>() * scale)
        .collect();
    let top = logits.iter().cloned().fold(f64::MIN, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    (0..d_h)
        .map(|c| keys.iter().zip(&w).map(|(&r, wi)| wi * at(v, r, c)).sum::<f64>() / z)
        .collect()
}

/// Attention of every query row of `q` (`[N, h_q, d_h]`) over the key rows
/// listed for it; output `[N, h_q * d_h]`.
pub fn listed_attention(q: &Tensor, k: &Tensor, v: &Tensor, p: &AttentionParams, lists: &[Vec<usize>]) -> Tensor {
    let (h_q, d_h) = (p.h_q, p.d_h);
    let per_kv = h_q / p.h_kv;
    let scale = 1.0 / (d_h as f64).sqrt();
    let n = q.shape()[0];
    let mut out = Tensor::zeros(&[n, h_q * d_h]);
    for i in 0..n {
        for g in 0..h_q {
            let qg = &q.data()[(i * h_q + g) * d_h..(i * h_q + g + 1) * d_h];
            let o = naive_head(qg, &lists[i], k, v, g / per_kv, d_h, scale);
            for c in 0..d_h {
                out.row_mut(i)[g * d_h + c] = o[c] as f32;
            }
        }
    }
    out
}

/// Every query sees every key.
pub fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, p: &AttentionParams) -> Tensor {
    let all: Vec<usize> = (0..k.shape()[0]).collect();
    listed_attention(q, k, v, p, &vec![all; q.shape()[0]])
}

/// Key-side block structure rebuilt from token coordinates: block id to the
/// ascending list of its tokens. Image coordinates keep the view axis whole.
pub fn blocks_from_coords(coords: &[[u32; 3]], grid_res: [u32; 3], block: u32, image: bool) -> BTreeMap<u32, Vec<usize>> {
    let nb = |n: u32| n.div_ceil(block);
    let grid = if image {
        [grid_res[0], nb(grid_res[1]), nb(grid_res[2])]
    } else {
        [nb(grid_res[0]), nb(grid_res[1]), nb(grid_res[2])]
    };
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (t, c) in coords.iter().enumerate() {
        let a = if image { c[0] } else { c[0] / block };
        let id = (a * grid[1] + c[1] / block) * grid[2] + c[2] / block;
        out.entry(id).or_default().push(t);
    }
    out
}

/// Gated three-branch attention written out branch by branch. `selection`
/// lists slots (positions in `blocks`); `own` is each query's own slot, and
/// `None` drops the window branch.
#[allow(clippy::too_many_arguments)]
pub fn nsa_reference(
    x: &Tensor,
    y: &Tensor,
    blocks: &[Vec<usize>],
    selection: &Selection,
    own: Option<&[usize]>,
    w: &NsaWeights,
    p: &AttentionParams,
) -> Tensor {
    let nq = x.rows();
    let q = w.proj.wq.forward(x).unwrap().reshape(&[nq, p.h_q, p.d_h]).unwrap();
    let ny = y.rows();
    let k = w.proj.wk.forward(y).unwrap().reshape(&[ny, p.h_kv, p.d_h]).unwrap();
    let v = w.proj.wv.forward(y).unwrap().reshape(&[ny, p.h_kv, p.d_h]).unwrap();

    let flat = |t: &Tensor| t.clone().reshape(&[t.shape()[0], p.h_kv * p.d_h]).unwrap();
    let kr = w.compress.k.forward(&flat(&k)).unwrap();
    let vr = w.compress.v.forward(&flat(&v)).unwrap();
    let mean = |t: &Tensor| {
        let width = t.row_width();
        let mut m = Tensor::zeros(&[blocks.len(), p.h_kv, p.d_h]);
        for (b, rows) in blocks.iter().enumerate() {
            for c in 0..width {
                let s: f64 = rows.iter().map(|&r| t.row(r)[c] as f64).sum();
                m.data_mut()[b * width + c] = (s / rows.len() as f64) as f32;
            }
        }
        m
    };
    let (kc, vc) = (mean(&kr), mean(&vr));

    let every_block: Vec<usize> = (0..blocks.len()).collect();
    let cmp = listed_attention(&q, &kc, &vc, p, &vec![every_block; nq]);
    let sel_lists: Vec<Vec<usize>> = selection
        .lists
        .iter()
        .map(|l| {
            let mut l: Vec<usize> = l.iter().map(|&s| s as usize).collect();
            l.sort_unstable();
            l.iter().flat_map(|&s| blocks[s].iter().copied()).collect()
        })
        .collect();
    let sel = listed_attention(&q, &k, &v, p, &sel_lists);
    let win = own.map(|own| {
        let lists: Vec<Vec<usize>> = own.iter().map(|&s| blocks[s].clone()).collect();
        listed_attention(&q, &k, &v, p, &lists)
    });

    let gates = w.gate.forward(x).unwrap();
    let d = p.d;
    let mut mixed = Tensor::zeros(&[nq, d]);
    for i in 0..nq {
        for t in 0..d {
            let g = |b: usize| 1.0 / (1.0 + (-(gates.row(i)[b * d + t] as f64)).exp());
            let mut acc = g(0) * cmp.row(i)[t] as f64 + g(1) * sel.row(i)[t] as f64;
            if let Some(win) = &win {
                acc += g(2) * win.row(i)[t] as f64;
            }
            mixed.row_mut(i)[t] = acc as f32;
        }
    }
    w.proj.wo.forward(&mixed).unwrap()
}

fn sphere_sdf(p: [f64; 3], c: [f64; 3], r: f64) -> f64 {
    let d: f64 = (0..3).map(|a| (p[a] - c[a]) * (p[a] - c[a])).sum();
    d.sqrt() - r
}

fn box_sdf(p: [f64; 3], c: [f64; 3], h: [f64; 3]) -> f64 {
    let q: Vec<f64> = (0..3).map(|a| (p[a] - c[a]).abs() - h[a]).collect();
    let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    let inside = q.iter().cloned().fold(f64::MIN, f64::max).min(0.0);
    outside + inside
}

/// Analytic shapes for the mask oracle, evaluated without the library's SDF code.
#[derive(Clone, Debug)]
pub enum Shape {
    Sphere([f64; 3], f64),
    Box([f64; 3], [f64; 3]),
    Union(Vec<Shape>),
}

impl Shape {
    pub fn eval(&self, p: [f64; 3]) -> f64 {
        match self {
            Shape::Sphere(c, r) => sphere_sdf(p, *c, *r),
            Shape::Box(c, h) => box_sdf(p, *c, *h),
            Shape::Union(s) => s.iter().map(|s| s.eval(p)).fold(f64::INFINITY, f64::min),
        }
    }
}

/// Informative voxels by direct evaluation: `t^3` in-voxel samples, keep the
/// voxel when a sample is within `tau` of the surface or the samples change sign.
pub fn brute_force_mask(shape: &Shape, s: usize, tau: f64, t: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(s * s * s);
    for i in 0..s {
        for j in 0..s {
            for k in 0..s {
                let mut vals = Vec::with_capacity(t * t * t);
                for a in 0..t {
                    for b in 0..t {
                        for c in 0..t {
                            let at = |v: usize, u: usize| (v as f64 + (u as f64 + 0.5) / t as f64) / s as f64;
                            vals.push(shape.eval([at(i, a), at(j, b), at(k, c)]));
                        }
                    }
                }
                let near = vals.iter().any(|v| v.abs() <= tau);
                let neg = vals.iter().any(|&v| v <= 0.0);
                let pos = vals.iter().any(|&v| v >= 0.0);
                out.push(near || (neg && pos));
            }
        }
    }
    out
}

/// Voxels whose closed cell provably contains a surface point: the field
/// changes sign on a `(n+1)^3` lattice spanning the cell including its faces.
pub fn crossing_voxels(shape: &Shape, s: usize, n: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(s * s * s);
    for i in 0..s {
        for j in 0..s {
            for k in 0..s {
                let (mut neg, mut pos) = (false, false);
                for a in 0..=n {
                    for b in 0..=n {
                        for c in 0..=n {
                            let at = |v: usize, u: usize| (v as f64 + u as f64 / n as f64) / s as f64;
                            let f = shape.eval([at(i, a), at(j, b), at(k, c)]);
                            neg |= f < 0.0;
                            pos |= f > 0.0;
                        }
                    }
                }
                out.push(neg && pos);
            }
        }
    }
    out
}

fn key(d2: f64) -> u64 {
    (d2 * 1_099_511_627_776.0).round() as u64
}

/// Nearest `budget` volume blocks by centre distance, ties to the lower id.
/// Block centres are recomputed from the block grid.
pub fn route_volume(p: Point3, blocks: &BTreeMap<u32, Vec<usize>>, grid_res: [u32; 3], block: u32, budget: usize) -> Vec<u32> {
    let nb = [0, 1, 2].map(|a| grid_res[a].div_ceil(block));
    let mut all: Vec<(u64, u32)> = blocks
        .keys()
        .map(|&id| {
            let idx = [id / (nb[1] * nb[2]), (id / nb[2]) % nb[1], id % nb[2]];
            let mut d2 = 0.0;
            for a in 0..3 {
                let lo = idx[a] * block;
                let hi = ((idx[a] + 1) * block).min(grid_res[a]);
                let c = (lo + hi) as f64 / 2.0 / grid_res[a] as f64;
                d2 += (p[a] - c) * (p[a] - c);
            }
            (key(d2), id)
        })
        .collect();
    all.sort();
    all.into_iter().take(budget).map(|x| x.1).collect()
}

/// Pixel coordinates of `p`, or `None` behind the camera.
fn pixel_of(cam: &Camera, p: Point3) -> Option<(f64, f64)> {
    let rel = p - cam.translation;
    let mut pc = [0.0; 3];
    for (a, v) in pc.iter_mut().enumerate() {
        *v = (0..3).map(|r| cam.rotation[(r, a)] * rel[r]).sum();
    }
    if pc[2] <= 0.0 {
        return None;
    }
    let k = &cam.intrinsics;
    let row = |r: usize| k[(r, 0)] * pc[0] + k[(r, 1)] * pc[1] + k[(r, 2)] * pc[2];
    let w = row(2);
    Some((row(0) / w, row(1) / w))
}

/// Two-stage image routing by exhaustive enumeration. `blocks` maps image
/// block ids to token ids; `points` holds each image token's 3D point.
#[allow(clippy::too_many_arguments)]
pub fn route_image(
    p: Point3,
    cameras: &[Camera],
    blocks: &BTreeMap<u32, Vec<usize>>,
    grid_res: [u32; 3],
    block: u32,
    points: &[Point3],
    per_view: usize,
    budget: usize,
) -> Vec<u32> {
    let (nr, nc) = (grid_res[1].div_ceil(block), grid_res[2].div_ceil(block));
    let center = |b: u32, res: u32| {
        let lo = b * block;
        let hi = ((b + 1) * block).min(res);
        (lo + hi) as f64 / 2.0
    };
    let mut pooled = Vec::new();
    for (view, cam) in cameras.iter().enumerate() {
        let Some((u, v)) = pixel_of(cam, p) else {
            continue;
        };
        let tr = v * grid_res[1] as f64 / cam.height as f64;
        let tc = u * grid_res[2] as f64 / cam.width as f64;
        let mut cands: Vec<(u64, u32)> = blocks
            .keys()
            .filter(|&&id| id / (nr * nc) == view as u32)
            .map(|&id| {
                let (br, bc) = ((id / nc) % nr, id % nc);
                let dr = tr - center(br, grid_res[1]);
                let dc = tc - center(bc, grid_res[2]);
                (key(dr * dr + dc * dc), id)
            })
            .collect();
        cands.sort();
        pooled.extend(cands.into_iter().take(per_view).map(|x| x.1));
    }
    let mut scored: Vec<(u64, u32)> = pooled
        .into_iter()
        .map(|id| {
            let best = blocks[&id]
                .iter()
                .map(|&t| {
                    let q = points[t];
                    key((0..3).map(|a| (p[a] - q[a]) * (p[a] - q[a])).sum())
                })
                .min()
                .unwrap_or(u64::MAX);
            (best, id)
        })
        .collect();
    scored.sort();
    scored.into_iter().take(budget).map(|x| x.1).collect()
}

/// Smallest achievable maximum worker load, by exhaustive search.
pub fn optimal_makespan(loads: &[usize], workers: usize) -> usize {
    let mut sorted = loads.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut bins = vec![0usize; workers];
    let mut best = sorted.iter().sum::<usize>();
    fn go(i: usize, items: &[usize], bins: &mut [usize], best: &mut usize) {
        let cur = *bins.iter().max().unwrap();
        if cur >= *best {
            return;
        }
        if i == items.len() {
            *best = cur;
            return;
        }
        for w in 0..bins.len() {
            // identical bins are interchangeable
            if bins[..w].contains(&bins[w]) {
                continue;
            }
            bins[w] += items[i];
            go(i + 1, items, bins, best);
            bins[w] -= items[i];
        }
    }
    go(0, &sorted, &mut bins, &mut best);
    best.max(sorted.first().copied().unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn makespan_small() {
        assert_eq!(optimal_makespan(&[3, 3, 2, 2, 2], 2), 6);
        assert_eq!(optimal_makespan(&[5], 3), 5);
        assert_eq!(optimal_makespan(&[], 2), 0);
    }

    #[test]
    fn shapes() {
        assert!((Shape::Sphere([0.5; 3], 0.25).eval([0.5, 0.5, 0.75])).abs() < 1e-15);
        assert_eq!(Shape::Box([0.5; 3], [0.1; 3]).eval([0.5; 3]), -0.1);
    }
}
