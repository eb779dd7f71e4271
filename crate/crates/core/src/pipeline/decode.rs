use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{LsrmError, Result};
use crate::geometry::{s_bias, DecodedSdf, SdfField};
use crate::interp::{in_unit_cube, out_of_domain, trilinear_corners, trilinear_interpolate, Point3};
use crate::rng::SeedStream;
use crate::tensor::{sigmoid, Linear, Mlp, Tensor};
use crate::tokenizer::{Modality, TokenSet, VoxelMask};

/// Spatial upsampling of the token-to-volume decoder per axis.
pub const UPSAMPLE: usize = 4;

fn scatter_index(a: usize, b: usize, c: usize) -> usize {
    (a * UPSAMPLE + b) * UPSAMPLE + c
}

/// Dense decode of a full `s^3` token grid (lexicographic, `k` fastest) into
/// a `[4s, 4s, 4s, d_f]` volume. Token `(i, j, k)` writes fine voxel
/// `(4i+a, 4j+b, 4k+c)` from output slice `((a*4 + b)*4 + c) * d_f`.
pub fn decode_feature_volume(x_d: &Tensor, s: usize, decoder: &Linear) -> Result<Tensor> {
    if x_d.rows() != s * s * s {
        return Err(LsrmError::config(format!(
            "decoding a {s}^3 grid needs {} tokens, got {}",
            s * s * s,
            x_d.rows()
        )));
    }
    let per = UPSAMPLE.pow(3);
    if decoder.d_out() % per != 0 {
        return Err(LsrmError::config("decoder width is not a multiple of 64"));
    }
    let d_f = decoder.d_out() / per;
    let flat = decoder.forward(x_d)?;
    let sf = s * UPSAMPLE;
    let mut out = vec![0f32; sf * sf * sf * d_f];
    out.par_chunks_mut(sf * sf * d_f)
        .enumerate()
        .for_each(|(fx, plane)| {
            let (i, a) = (fx / UPSAMPLE, fx % UPSAMPLE);
            for fy in 0..sf {
                let (j, b) = (fy / UPSAMPLE, fy % UPSAMPLE);
                for fz in 0..sf {
                    let (k, c) = (fz / UPSAMPLE, fz % UPSAMPLE);
                    let src = flat.row((i * s + j) * s + k);
                    let off = scatter_index(a, b, c) * d_f;
                    let dst = (fy * sf + fz) * d_f;
                    plane[dst..dst + d_f].copy_from_slice(&src[off..off + d_f]);
                }
            }
        });
    Tensor::new(vec![sf, sf, sf, d_f], out)
}

/// Fine features that exist only under active volume tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVolume {
    /// Fine grid resolution per axis (`4 * S_vol`).
    pub res: usize,
    pub d_f: usize,
    index: HashMap<[u32; 3], u32>,
    data: Vec<f32>,
}

impl SparseVolume {
    pub fn get(&self, c: &[u32; 3]) -> Option<&[f32]> {
        self.index
            .get(c)
            .map(|&n| &self.data[n as usize * self.d_f..(n as usize + 1) * self.d_f])
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Stored coordinates in ascending order.
    pub fn coords(&self) -> Vec<[u32; 3]> {
        let mut c: Vec<_> = self.index.keys().copied().collect();
        c.sort_unstable();
        c
    }
}

/// Decode sparse volume tokens into their `4^3` fine voxels each.
pub fn decode_sparse_volume(tokens: &TokenSet, decoder: &Linear) -> Result<SparseVolume> {
    if tokens.modality != Modality::Volume {
        return Err(LsrmError::config("sparse decode needs volume tokens"));
    }
    let per = UPSAMPLE.pow(3);
    let d_f = decoder.d_out() / per;
    let flat = decoder.forward(&tokens.features)?;
    let mut index = HashMap::with_capacity(tokens.len() * per);
    let mut data = Vec::with_capacity(tokens.len() * per * d_f);
    let u = UPSAMPLE as u32;
    for (t, c) in tokens.coords.iter().enumerate() {
        let row = flat.row(t);
        for a in 0..UPSAMPLE {
            for b in 0..UPSAMPLE {
                for cc in 0..UPSAMPLE {
                    let fine = [c[0] * u + a as u32, c[1] * u + b as u32, c[2] * u + cc as u32];
                    index.insert(fine, index.len() as u32);
                    let off = scatter_index(a, b, cc) * d_f;
                    data.extend_from_slice(&row[off..off + d_f]);
                }
            }
        }
    }
    Ok(SparseVolume {
        res: tokens.grid_res[0] as usize * UPSAMPLE,
        d_f,
        index,
        data,
    })
}

#[derive(Clone, Debug)]
pub struct FeatureVolume {
    /// `[S_df, S_df, S_df, d_f]`
    pub dense: Tensor,
    pub sparse: SparseVolume,
    /// Informative-voxel mask at the sparse token resolution.
    pub mask: VoxelMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    /// Stage-1 field: trilinear lookup in the dense volume.
    Dense,
    /// Stage-2 field: sparse/dense blend of [`query_field`].
    Blend,
}

/// Blended Stage-2 feature lookup.
///
/// Let the 8 trilinear corners of `p` on the fine sparse grid be active when
/// their parent voxel is in the mask, and `lambda` the active fraction. The
/// result is `lambda * sparse' + (1 - lambda) * dense(p)`, where `sparse'`
/// interpolates sparse features at active corners and dense features sampled
/// at the positions of inactive corners.
pub fn query_field(fv: &FeatureVolume, p: &Point3) -> Result<Vec<f32>> {
    if !in_unit_cube(p) {
        return Err(out_of_domain(p));
    }
    let sf = fv.sparse.res;
    let up = sf / fv.mask.res.max(1);
    if fv.mask.res * up != sf || up == 0 {
        return Err(LsrmError::config(format!(
            "mask resolution {} does not divide sparse resolution {sf}",
            fv.mask.res
        )));
    }
    let corners = trilinear_corners([sf; 3], p);
    let active: Vec<bool> = corners
        .iter()
        .map(|(c, _)| fv.mask.get(c[0] / up, c[1] / up, c[2] / up))
        .collect();
    let n_active = active.iter().filter(|&&a| a).count();
    let dense_p = trilinear_interpolate(&fv.dense, p)?;
    if n_active == 0 {
        return Ok(dense_p);
    }
    let d_f = fv.sparse.d_f;
    let mut sparse = vec![0f64; d_f];
    for ((c, w), &on) in corners.iter().zip(&active) {
        let key = [c[0] as u32, c[1] as u32, c[2] as u32];
        let feat = if on {
            fv.sparse
                .get(&key)
                .ok_or_else(|| LsrmError::config(format!("mask-true fine voxel {key:?} has no sparse feature")))?
                .to_vec()
        } else {
            let q = Vector3::new(
                (c[0] as f64 + 0.5) / sf as f64,
                (c[1] as f64 + 0.5) / sf as f64,
                (c[2] as f64 + 0.5) / sf as f64,
            );
            trilinear_interpolate(&fv.dense, &q)?
        };
        for (a, f) in sparse.iter_mut().zip(&feat) {
            *a += w * *f as f64;
        }
    }
    let lambda = n_active as f64 / 8.0;
    Ok(sparse
        .iter()
        .zip(&dense_p)
        .map(|(s, d)| (lambda * s + (1.0 - lambda) * *d as f64) as f32)
        .collect())
}

/// Point decoders: appearance channels through a sigmoid, and SDF.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHeads {
    pub z: Mlp,
    pub s: Mlp,
}

impl DecoderHeads {
    pub fn random(d_f: usize, hidden: usize, channels: usize, stream: &SeedStream) -> Self {
        DecoderHeads {
            z: Mlp::random(d_f, hidden, channels, &stream.child("z")),
            s: Mlp::random(d_f, hidden, 1, &stream.child("s")),
        }
    }

    pub fn zeros(d_f: usize, hidden: usize, channels: usize) -> Self {
        DecoderHeads {
            z: Mlp::zeros(d_f, hidden, channels),
            s: Mlp::zeros(d_f, hidden, 1),
        }
    }

    /// The SDF implied by a dense feature volume and this SDF head.
    pub fn decoded_sdf(&self, dense: &Tensor) -> Result<SdfField> {
        let s = dense.shape();
        if s.len() != 4 || s[3] != self.s.d_in() || s[..3].iter().any(|&n| n < 2) {
            return Err(LsrmError::config(format!(
                "volume {s:?} does not fit an SDF head of width {}",
                self.s.d_in()
            )));
        }
        Ok(SdfField::Decoded(Arc::new(DecodedSdf {
            volume: dense.clone(),
            head: self.s.clone(),
        })))
    }
}

/// Appearance channels in `(0, 1)` and SDF (with the bounding-sphere prior).
pub fn decode_point(
    fv: &FeatureVolume,
    heads: &DecoderHeads,
    p: &Point3,
    mode: QueryMode,
) -> Result<(Vec<f32>, f64)> {
    if !in_unit_cube(p) {
        return Err(out_of_domain(p));
    }
    let f = match mode {
        QueryMode::Dense => trilinear_interpolate(&fv.dense, p)?,
        QueryMode::Blend => query_field(fv, p)?,
    };
    let z = heads
        .z
        .forward_vec(&f)?
        .into_iter()
        .map(|v| sigmoid(v as f64) as f32)
        .collect();
    let s = heads.s.forward_vec(&f)?[0] as f64 + s_bias(p);
    Ok((z, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_bias_volume() {
        let mut w = Linear::zeros(4, 64 * 2);
        w.bias = (0..128).map(|i| (i % 2) as f32).collect();
        let x = SeedStream::new(1).uniform(&[8, 4], 1.0);
        let v = decode_feature_volume(&x, 2, &w).unwrap();
        assert_eq!(v.shape(), &[8, 8, 8, 2]);
        for c in v.data().chunks(2) {
            assert_eq!(c, &[0.0, 1.0]);
        }
    }

    #[test]
    fn scatter_layout() {
        let w = Linear::random(3, 64, &SeedStream::new(2));
        let x = SeedStream::new(3).uniform(&[8, 3], 1.0);
        let v = decode_feature_volume(&x, 2, &w).unwrap();
        let flat = w.forward(&x).unwrap();
        // fine (5, 2, 7): token (1, 0, 1), offsets (1, 2, 3)
        let got = v.data()[(5 * 8 + 2) * 8 + 7];
        assert_eq!(got, flat.row(5)[(4 + 2) * 4 + 3]);
    }

    #[test]
    fn zero_heads() {
        let fv = FeatureVolume {
            dense: SeedStream::new(4).uniform(&[4, 4, 4, 3], 1.0),
            sparse: decode_sparse_volume(
                &TokenSet {
                    modality: Modality::Volume,
                    features: Tensor::zeros(&[0, 2]),
                    coords: vec![],
                    grid_res: [2; 3],
                },
                &Linear::zeros(2, 64 * 3),
            )
            .unwrap(),
            mask: VoxelMask {
                res: 2,
                bits: vec![false; 8],
            },
        };
        let heads = DecoderHeads::zeros(3, 5, 3);
        let p = Vector3::new(0.2, 0.7, 0.4);
        let (z, s) = decode_point(&fv, &heads, &p, QueryMode::Blend).unwrap();
        assert!(z.iter().all(|&v| v == 0.5));
        assert!((s - s_bias(&p)).abs() < 1e-12);
        assert!(decode_point(&fv, &heads, &Vector3::new(1.5, 0.0, 0.0), QueryMode::Dense).is_err());
    }
}
