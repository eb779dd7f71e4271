//! Trilinear interpolation over voxel-centred feature grids.
//!
//! A grid of resolution `S` stores sample `i` at `(i + 0.5) / S`. Points
//! between the outermost centres and the cube faces clamp to the edge sample.

use nalgebra::Vector3;

use crate::error::{LsrmError, Result};
use crate::tensor::Tensor;

pub type Point3 = Vector3<f64>;

pub fn in_unit_cube(p: &Point3) -> bool {
    p.iter().all(|&c| (0.0..=1.0).contains(&c))
}

pub(crate) fn out_of_domain(p: &Point3) -> LsrmError {
    LsrmError::OutOfDomain {
        point: [p.x, p.y, p.z],
    }
}

/// The 8 corner samples and blend weights for `p` on an `res` grid.
/// Corners are ordered with the z offset fastest.
pub fn trilinear_corners(res: [usize; 3], p: &Point3) -> [([usize; 3], f64); 8] {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let s = res[a];
        let u = (p[a] * s as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = (u.floor() as usize).min(s - 1);
        lo[a] = i0;
        hi[a] = (i0 + 1).min(s - 1);
        frac[a] = u - i0 as f64;
    }
    let mut out = [([0usize; 3], 0f64); 8];
    for (c, slot) in out.iter_mut().enumerate() {
        let (bx, by, bz) = ((c >> 2) & 1, (c >> 1) & 1, c & 1);
        let idx = [
            if bx == 1 { hi[0] } else { lo[0] },
            if by == 1 { hi[1] } else { lo[1] },
            if bz == 1 { hi[2] } else { lo[2] },
        ];
        let w = [bx, by, bz]
            .iter()
            .zip(&frac)
            .map(|(&b, &f)| if b == 1 { f } else { 1.0 - f })
            .product();
        *slot = (idx, w);
    }
    out
}

fn grid_dims(volume: &Tensor) -> Result<([usize; 3], usize)> {
    let s = volume.shape();
    if s.len() != 4 || s[..3].iter().any(|&n| n < 2) {
        return Err(LsrmError::config(format!(
            "trilinear volume must be [S,S,S,d_f] with S >= 2, got {s:?}"
        )));
    }
    Ok(([s[0], s[1], s[2]], s[3]))
}

/// Feature vector at `p` from a `[Sx, Sy, Sz, d_f]` grid.
pub fn trilinear_interpolate(volume: &Tensor, p: &Point3) -> Result<Vec<f32>> {
    let (res, d_f) = grid_dims(volume)?;
    if !in_unit_cube(p) {
        return Err(out_of_domain(p));
    }
    let mut acc = vec![0f64; d_f];
    let data = volume.data();
    for (idx, w) in trilinear_corners(res, p) {
        if w == 0.0 {
            continue;
        }
        let off = ((idx[0] * res[1] + idx[1]) * res[2] + idx[2]) * d_f;
        for (a, &f) in acc.iter_mut().zip(&data[off..off + d_f]) {
            *a += w * f as f64;
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_volume(s: usize) -> Tensor {
        Tensor::from_fn(&[s, s, s, 1], |n| {
            let i = n / (s * s);
            (i as f32 + 0.5) / s as f32
        })
    }

    #[test]
    fn reproduces_linear_field() {
        let v = linear_volume(8);
        let f = trilinear_interpolate(&v, &Point3::new(0.5, 0.2, 0.9)).unwrap();
        assert!((f[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn node_returns_node_feature() {
        let v = Tensor::from_fn(&[3, 3, 3, 2], |n| n as f32);
        let p = Point3::new(1.5 / 3.0, 0.5 / 3.0, 2.5 / 3.0);
        let f = trilinear_interpolate(&v, &p).unwrap();
        let off = ((1 * 3 + 0) * 3 + 2) * 2;
        assert_eq!(f, vec![off as f32, off as f32 + 1.0]);
    }

    #[test]
    fn outside_cube_is_rejected() {
        let v = linear_volume(4);
        let err = trilinear_interpolate(&v, &Point3::new(1.2, 0.5, 0.5)).unwrap_err();
        assert!(matches!(err, LsrmError::OutOfDomain { .. }));
    }

    #[test]
    fn corner_weights_sum_to_one() {
        let c = trilinear_corners([5, 6, 7], &Point3::new(0.31, 0.02, 0.77));
        let s: f64 = c.iter().map(|(_, w)| w).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
