//! Dense row-major `f32` tensors and the small set of layers built on them.
//!
//! Reductions (dot products, softmax sums, normalization moments) accumulate
//! in `f64` and every output row is computed independently of its neighbours,
//! so results do not depend on how rows are batched or split across workers.

use rayon::prelude::*;

use crate::error::{LsrmError, Result};
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(LsrmError::config(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension; 0 for a rank-0 tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Product of all trailing dimensions.
    pub fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.row_width();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// Rows `idx` stacked in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_width();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(0);
        }
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Concatenate along the leading dimension. All parts must share trailing dims.
    pub fn concat_rows(parts: &[&Tensor], trailing: &[usize]) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.numel() > 0 && p.shape[1..] != *trailing {
                return Err(LsrmError::config(format!(
                    "cannot concatenate {:?} onto rows of {:?}",
                    p.shape, trailing
                )));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        Tensor::new(shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(LsrmError::config(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(LsrmError::config(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Largest elementwise absolute difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        if self.shape != other.shape {
            return f32::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Gelu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

/// Affine map `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Vec<f32>) -> Result<Self> {
        if weight.shape().len() != 2 || weight.shape()[0] != bias.len() {
            return Err(LsrmError::config(format!(
                "linear weight {:?} does not match bias of length {}",
                weight.shape(),
                bias.len()
            )));
        }
        Ok(Linear { weight, bias })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_out, d_in]),
            bias: vec![0.0; d_out],
        }
    }

    /// Uniform init with scale `1/sqrt(d_in)`, zero bias.
    pub fn random(d_in: usize, d_out: usize, stream: &SeedStream) -> Self {
        let scale = 1.0 / (d_in as f32).sqrt();
        Linear {
            weight: stream.uniform(&[d_out, d_in], scale),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_act(x, Activation::Identity)
    }

    /// Applies the map to every row of `x` (row width must equal `d_in`).
    pub fn forward_act(&self, x: &Tensor, act: Activation) -> Result<Tensor> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if x.row_width() != d_in {
            return Err(LsrmError::config(format!(
                "linear expects rows of width {d_in}, got {:?}",
                x.shape()
            )));
        }
        let n = x.rows();
        let mut out = Tensor::zeros(&[n, d_out]);
        if n == 0 || d_out == 0 {
            return Ok(out);
        }
        let w = self.weight.data();
        out.data
            .par_chunks_mut(d_out)
            .enumerate()
            .with_min_len(16)
            .for_each(|(i, row)| {
                let xi = x.row(i);
                for (j, o) in row.iter_mut().enumerate() {
                    let wj = &w[j * d_in..(j + 1) * d_in];
                    let mut acc = self.bias[j] as f64;
                    for (a, b) in xi.iter().zip(wj) {
                        acc += *a as f64 * *b as f64;
                    }
                    *o = act.apply(acc) as f32;
                }
            });
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub linear: Linear,
    pub activation: Activation,
}

/// Sequential affine + activation layers.
pub fn mlp_forward(x: &Tensor, layers: &[DenseLayer]) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        if h.row_width() != layer.linear.d_in() {
            return Err(LsrmError::config(format!(
                "mlp layer {i} expects width {}, chain provides {}",
                layer.linear.d_in(),
                h.row_width()
            )));
        }
        h = layer.linear.forward_act(&h, layer.activation)?;
    }
    Ok(h)
}

/// Two-layer perceptron with gelu hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn random(d_in: usize, hidden: usize, d_out: usize, stream: &SeedStream) -> Self {
        Mlp {
            layers: vec![
                DenseLayer {
                    linear: Linear::random(d_in, hidden, &stream.child("fc1")),
                    activation: Activation::Gelu,
                },
                DenseLayer {
                    linear: Linear::random(hidden, d_out, &stream.child("fc2")),
                    activation: Activation::Identity,
                },
            ],
        }
    }

    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp {
            layers: vec![
                DenseLayer {
                    linear: Linear::zeros(d_in, hidden),
                    activation: Activation::Gelu,
                },
                DenseLayer {
                    linear: Linear::zeros(hidden, d_out),
                    activation: Activation::Identity,
                },
            ],
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.linear.d_in())
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.linear.d_out())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        mlp_forward(x, &self.layers)
    }

    /// Single-vector evaluation without allocating a batch.
    pub fn forward_vec(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        for layer in &self.layers {
            let (d_in, d_out) = (layer.linear.d_in(), layer.linear.d_out());
            if h.len() != d_in {
                return Err(LsrmError::config(format!(
                    "mlp expects width {d_in}, chain provides {}",
                    h.len()
                )));
            }
            let w = layer.linear.weight.data();
            h = (0..d_out)
                .map(|j| {
                    let mut acc = layer.linear.bias[j] as f64;
                    for (a, b) in h.iter().zip(&w[j * d_in..(j + 1) * d_in]) {
                        acc += a * *b as f64;
                    }
                    // round through f32 to agree with the batched path
                    (layer.activation.apply(acc) as f32) as f64
                })
                .collect();
        }
        Ok(h.into_iter().map(|v| v as f32).collect())
    }
}

/// `x + fc2(gelu(fc1(x)))`, width preserving.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ResBlock {
    pub fn random(width: usize, stream: &SeedStream) -> Self {
        ResBlock {
            fc1: Linear::random(width, width, &stream.child("fc1")),
            fc2: Linear::random(width, width, &stream.child("fc2")),
        }
    }

    /// Second affine zeroed: the block is the identity map.
    pub fn identity(width: usize, stream: &SeedStream) -> Self {
        ResBlock {
            fc1: Linear::random(width, width, &stream.child("fc1")),
            fc2: Linear::zeros(width, width),
        }
    }

    pub fn width(&self) -> usize {
        self.fc1.d_in()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward_act(x, Activation::Gelu)?;
        let mut y = self.fc2.forward(&h)?;
        for (o, a) in y.data.iter_mut().zip(x.data()) {
            *o += a;
        }
        Ok(y.reshape(x.shape())?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.gamma.len();
        if x.row_width() != d {
            return Err(LsrmError::config(format!(
                "layer norm of width {d} applied to {:?}",
                x.shape()
            )));
        }
        let mut out = Tensor::zeros(&[x.rows(), d]);
        if x.rows() == 0 {
            return Ok(out);
        }
        out.data
            .par_chunks_mut(d)
            .enumerate()
            .with_min_len(16)
            .for_each(|(i, row)| {
                let xi = x.row(i);
                let mean = xi.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = xi
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / d as f64;
                let inv = 1.0 / (var + self.eps).sqrt();
                for (j, o) in row.iter_mut().enumerate() {
                    *o = ((xi[j] as f64 - mean) * inv * self.gamma[j] as f64
                        + self.beta[j] as f64) as f32;
                }
            });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_bias() {
        let lin = Linear::new(Tensor::zeros(&[3, 4]), vec![1.0, -2.0, 0.5]).unwrap();
        let x = SeedStream::new(1).uniform(&[5, 4], 1.0);
        let y = mlp_forward(
            &x,
            &[DenseLayer {
                linear: lin,
                activation: Activation::Identity,
            }],
        )
        .unwrap();
        for i in 0..5 {
            assert_eq!(y.row(i), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let layer = DenseLayer {
            linear: Linear::zeros(6, 3),
            activation: Activation::Sigmoid,
        };
        let y = mlp_forward(&Tensor::zeros(&[2, 6]), &[layer]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn broken_chain_is_config_error() {
        let layers = vec![
            DenseLayer {
                linear: Linear::zeros(4, 5),
                activation: Activation::Gelu,
            },
            DenseLayer {
                linear: Linear::zeros(6, 2),
                activation: Activation::Identity,
            },
        ];
        let err = mlp_forward(&Tensor::zeros(&[1, 4]), &layers).unwrap_err();
        assert!(matches!(err, LsrmError::Config(_)));
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn forward_vec_matches_batch() {
        let s = SeedStream::new(4);
        let mlp = Mlp::random(7, 9, 3, &s);
        let x = s.child("x").uniform(&[4, 7], 1.0);
        let batch = mlp.forward(&x).unwrap();
        for i in 0..4 {
            assert_eq!(mlp.forward_vec(x.row(i)).unwrap(), batch.row(i));
        }
    }

    #[test]
    fn identity_resblock_passes_through() {
        let rb = ResBlock::identity(8, &SeedStream::new(3));
        let x = SeedStream::new(5).uniform(&[6, 8], 2.0);
        assert_eq!(rb.forward(&x).unwrap(), x);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = SeedStream::new(2).uniform(&[3, 16], 5.0);
        let y = LayerNorm::new(16).forward(&x).unwrap();
        for i in 0..3 {
            let r = y.row(i);
            let mean: f64 = r.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var: f64 = r.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
