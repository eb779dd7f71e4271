use crate::attention::{dense_cross_attention, AttentionParams};
use crate::error::{LsrmError, Result};
use crate::nsa::AttnProj;
use crate::rng::SeedStream;
use crate::tensor::{sigmoid, LayerNorm, Linear, Mlp, Tensor};

/// Parameters updating one token stream (volume or image) inside a block.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamWeights {
    pub norm_attn: LayerNorm,
    pub self_attn: AttnProj,
    pub cross_attn: AttnProj,
    /// `d -> 2d`: self gate then cross gate.
    pub gate: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl StreamWeights {
    pub fn random(p: &AttentionParams, stream: &SeedStream) -> Self {
        StreamWeights {
            norm_attn: LayerNorm::new(p.d),
            self_attn: AttnProj::random(p, &stream.child("self")),
            cross_attn: AttnProj::random(p, &stream.child("cross")),
            gate: Linear::random(p.d, 2 * p.d, &stream.child("gate")),
            norm_ffn: LayerNorm::new(p.d),
            ffn: Mlp::random(p.d, 4 * p.d, p.d, &stream.child("ffn")),
        }
    }

    pub fn zeros(p: &AttentionParams) -> Self {
        StreamWeights {
            norm_attn: LayerNorm::new(p.d),
            self_attn: AttnProj::zeros(p),
            cross_attn: AttnProj::zeros(p),
            gate: Linear::zeros(p.d, 2 * p.d),
            norm_ffn: LayerNorm::new(p.d),
            ffn: Mlp::zeros(p.d, 4 * p.d, p.d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlockWeights {
    pub x: StreamWeights,
    pub y: StreamWeights,
}

impl DenseBlockWeights {
    pub fn random(p: &AttentionParams, stream: &SeedStream) -> Self {
        DenseBlockWeights {
            x: StreamWeights::random(p, &stream.child("x")),
            y: StreamWeights::random(p, &stream.child("y")),
        }
    }

    pub fn zeros(p: &AttentionParams) -> Self {
        DenseBlockWeights {
            x: StreamWeights::zeros(p),
            y: StreamWeights::zeros(p),
        }
    }
}

/// `CrossAttn(a, b)` including its output projection.
fn projected_attention(a: &Tensor, b: &Tensor, proj: &AttnProj, p: &AttentionParams) -> Result<Tensor> {
    let q = proj.queries(a, p)?;
    let (k, v) = proj.keys_values(b, p)?;
    let o = dense_cross_attention(&q, &k, &v, p, None)?;
    proj.wo.forward(&o.reshape(&[a.rows(), p.d])?)
}

/// `x + g_self * self_out + g_cross * cross_out`, then the FFN residual.
pub(crate) fn gated_residual(
    x: &Tensor,
    xn: &Tensor,
    self_out: &Tensor,
    cross_out: &Tensor,
    gate: &Linear,
    norm_ffn: &LayerNorm,
    ffn: &Mlp,
) -> Result<Tensor> {
    let d = x.row_width();
    let gates = gate.forward(xn)?;
    let mut h = x.clone();
    for i in 0..x.rows() {
        let g = gates.row(i);
        let (s, c) = (self_out.row(i), cross_out.row(i));
        for (t, o) in h.row_mut(i).iter_mut().enumerate() {
            let mix = sigmoid(g[t] as f64) * s[t] as f64 + sigmoid(g[d + t] as f64) * c[t] as f64;
            *o = (*o as f64 + mix) as f32;
        }
    }
    let f = ffn.forward(&norm_ffn.forward(&h)?)?;
    h.add_assign(&f)?;
    Ok(h)
}

/// One dense block: pre-norm gated mixture of self and cross attention for
/// both streams, each followed by a feed-forward residual. The image stream
/// attends to the volume stream's pre-update activations.
pub fn dense_block_forward(
    x: &Tensor,
    y: &Tensor,
    w: &DenseBlockWeights,
    p: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    p.validate()?;
    if x.row_width() != p.d || y.row_width() != p.d {
        return Err(LsrmError::config(format!(
            "dense block of width {} got x{:?} y{:?}",
            p.d,
            x.shape(),
            y.shape()
        )));
    }
    if y.rows() == 0 || x.rows() == 0 {
        return Err(LsrmError::EmptyContext);
    }
    let xn = w.x.norm_attn.forward(x)?;
    let yn = w.y.norm_attn.forward(y)?;
    let x_self = projected_attention(&xn, &xn, &w.x.self_attn, p)?;
    let x_cross = projected_attention(&xn, &yn, &w.x.cross_attn, p)?;
    let y_self = projected_attention(&yn, &yn, &w.y.self_attn, p)?;
    let y_cross = projected_attention(&yn, &xn, &w.y.cross_attn, p)?;
    Ok((
        gated_residual(x, &xn, &x_self, &x_cross, &w.x.gate, &w.x.norm_ffn, &w.x.ffn)?,
        gated_residual(y, &yn, &y_self, &y_cross, &w.y.gate, &w.y.norm_ffn, &w.y.ffn)?,
    ))
}

pub fn dense_stage_forward(
    x0: &Tensor,
    y0: &Tensor,
    blocks: &[DenseBlockWeights],
    p: &AttentionParams,
) -> Result<(Tensor, Tensor)> {
    let (mut x, mut y) = (x0.clone(), y0.clone());
    for w in blocks {
        (x, y) = dense_block_forward(&x, &y, w, p)?;
    }
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_are_identity() {
        let p = AttentionParams::new(4, 2, 4);
        let s = SeedStream::new(1);
        let x = s.child("x").uniform(&[5, 16], 1.0);
        let y = s.child("y").uniform(&[7, 16], 1.0);
        let (x1, y1) = dense_block_forward(&x, &y, &DenseBlockWeights::zeros(&p), &p).unwrap();
        assert_eq!(x1, x);
        assert_eq!(y1, y);
    }

    #[test]
    fn empty_image_stream_is_an_error() {
        let p = AttentionParams::new(4, 2, 4);
        let x = Tensor::zeros(&[3, 16]);
        let y = Tensor::zeros(&[0, 16]);
        assert!(dense_block_forward(&x, &y, &DenseBlockWeights::zeros(&p), &p).is_err());
    }

    #[test]
    fn depth_composes() {
        let p = AttentionParams::new(4, 1, 4);
        let s = SeedStream::new(2);
        let x = s.child("x").uniform(&[4, 16], 1.0);
        let y = s.child("y").uniform(&[6, 16], 1.0);
        let ws: Vec<_> = (0..2).map(|m| DenseBlockWeights::random(&p, &s.index(m))).collect();
        let (a, b) = dense_stage_forward(&x, &y, &ws, &p).unwrap();
        let (x1, y1) = dense_block_forward(&x, &y, &ws[0], &p).unwrap();
        let (x2, y2) = dense_block_forward(&x1, &y1, &ws[1], &p).unwrap();
        assert_eq!((a, b), (x2, y2));
        assert_eq!(dense_stage_forward(&x, &y, &[], &p).unwrap(), (x, y));
    }
}
