use rand::Rng;

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        size: usize,
    },
    /// Nearest-neighbor 2x upsampling.
    Upsample2x,
    /// Flattens its input.
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
}

impl LayerKind {
    /// `same`-padded stride-1 convolution.
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn conv_strided(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn fc(inputs: usize, outputs: usize) -> Self {
        LayerKind::FullyConnected { inputs, outputs }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| Err(Error::Config(format!("{self:?} cannot take input {input:?}: {why}")));
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let [c, h, w] = input[..] else { return bad("rank") };
                if c != in_ch {
                    return bad("channel count");
                }
                if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return bad("kernel larger than padded input");
                }
                Ok(vec![out_ch, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1])
            }
            LayerKind::MaxPool2d { size } => {
                let [c, h, w] = input[..] else { return bad("rank") };
                if size == 0 || h < size || w < size {
                    return bad("pool window larger than input");
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerKind::Upsample2x => {
                let [c, h, w] = input[..] else { return bad("rank") };
                Ok(vec![c, 2 * h, 2 * w])
            }
            LayerKind::FullyConnected { inputs, outputs } => {
                if input.iter().product::<usize>() != inputs {
                    return bad("input size");
                }
                Ok(vec![outputs])
            }
            LayerKind::Relu | LayerKind::Sigmoid => Ok(input.to_vec()),
        }
    }

    pub(crate) fn code(&self) -> (u8, [u32; 5]) {
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => (1, [in_ch as u32, out_ch as u32, kernel as u32, stride as u32, pad as u32]),
            LayerKind::MaxPool2d { size } => (2, [size as u32, 0, 0, 0, 0]),
            LayerKind::Upsample2x => (3, [0; 5]),
            LayerKind::FullyConnected { inputs, outputs } => (4, [inputs as u32, outputs as u32, 0, 0, 0]),
            LayerKind::Relu => (5, [0; 5]),
            LayerKind::Sigmoid => (6, [0; 5]),
        }
    }

    pub(crate) fn from_code(code: u8, p: [u32; 5]) -> Result<Self> {
        let p = p.map(|v| v as usize);
        Ok(match code {
            1 => LayerKind::Conv2d {
                in_ch: p[0],
                out_ch: p[1],
                kernel: p[2],
                stride: p[3],
                pad: p[4],
            },
            2 => LayerKind::MaxPool2d { size: p[0] },
            3 => LayerKind::Upsample2x,
            4 => LayerKind::FullyConnected {
                inputs: p[0],
                outputs: p[1],
            },
            5 => LayerKind::Relu,
            6 => LayerKind::Sigmoid,
            other => return Err(Error::Data(format!("unknown layer code {other}"))),
        })
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            LayerKind::Conv2d {
                in_ch, out_ch, kernel, ..
            } => Some((vec![out_ch, in_ch * kernel * kernel], vec![out_ch], in_ch * kernel * kernel)),
            LayerKind::FullyConnected { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs], inputs)),
            _ => None,
        }
    }
}

/// A layer with its weights; parameter-free kinds carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Option<Param>,
    pub bias: Option<Param>,
}

/// Per-layer state saved by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Conv { cols: Vec<f64>, in_shape: Vec<usize> },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Upsample { in_shape: Vec<usize> },
    Fc { input: Vec<f64>, in_shape: Vec<usize> },
    Relu { active: Vec<bool> },
    Sigmoid { output: Vec<f64> },
}

impl Layer {
    /// Uniform He-style initialization, `U(-b, b)` with `b = sqrt(6 / fan_in)`;
    /// biases start at zero.
    pub fn new<R: Rng>(kind: LayerKind, rng: &mut R) -> Self {
        match kind.param_shapes() {
            Some((ws, bs, fan_in)) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let n: usize = ws.iter().product();
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Self {
                    kind,
                    weight: Some(Param::new(Tensor::from_vec(&ws, w).expect("shape"))),
                    bias: Some(Param::new(Tensor::zeros(&bs))),
                }
            }
            None => Self {
                kind,
                weight: None,
                bias: None,
            },
        }
    }

    /// Zero weights and biases.
    pub fn zeroed(kind: LayerKind) -> Self {
        match kind.param_shapes() {
            Some((ws, bs, _)) => Self {
                kind,
                weight: Some(Param::new(Tensor::zeros(&ws))),
                bias: Some(Param::new(Tensor::zeros(&bs))),
            },
            None => Self {
                kind,
                weight: None,
                bias: None,
            },
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<(Tensor, LayerCache)> {
        let out_shape = self.kind.output_shape(x.shape())?;
        match self.kind {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => {
                let (_, h, w) = x.dims3()?;
                let (ho, wo) = (out_shape[1], out_shape[2]);
                let cols = im2col(x.data(), in_ch, h, w, kernel, stride, pad, ho, wo);
                let n = ho * wo;
                let rows = in_ch * kernel * kernel;
                let mut out = vec![0.0; out_ch * n];
                let weight = self.weight.as_ref().expect("conv weight");
                gemm(out_ch, rows, n, weight.value.data(), false, &cols, false, &mut out, 0.0);
                let bias = self.bias.as_ref().expect("conv bias").value.data();
                for (o, chunk) in out.chunks_exact_mut(n).enumerate() {
                    let b = bias[o];
                    chunk.iter_mut().for_each(|v| *v += b);
                }
                Ok((
                    Tensor::from_vec(&out_shape, out)?,
                    LayerCache::Conv {
                        cols,
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerKind::MaxPool2d { size } => {
                let (c, h, w) = x.dims3()?;
                let (ho, wo) = (h / size, w / size);
                let mut out = vec![0.0; c * ho * wo];
                let mut argmax = vec![0usize; c * ho * wo];
                let xd = x.data();
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for dy in 0..size {
                                for dx in 0..size {
                                    let i = ch * h * w + (oy * size + dy) * w + ox * size + dx;
                                    if xd[i] > best || (dy == 0 && dx == 0) {
                                        best = xd[i];
                                        best_i = i;
                                    }
                                }
                            }
                            let o = ch * ho * wo + oy * wo + ox;
                            out[o] = best;
                            argmax[o] = best_i;
                        }
                    }
                }
                Ok((
                    Tensor::from_vec(&out_shape, out)?,
                    LayerCache::Pool {
                        argmax,
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerKind::Upsample2x => {
                let (c, h, w) = x.dims3()?;
                let (ho, wo) = (2 * h, 2 * w);
                let mut out = vec![0.0; c * ho * wo];
                let xd = x.data();
                for ch in 0..c {
                    for oy in 0..ho {
                        let src = &xd[ch * h * w + (oy / 2) * w..ch * h * w + (oy / 2) * w + w];
                        let dst = &mut out[ch * ho * wo + oy * wo..ch * ho * wo + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox / 2];
                        }
                    }
                }
                Ok((
                    Tensor::from_vec(&out_shape, out)?,
                    LayerCache::Upsample {
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerKind::FullyConnected { inputs, outputs } => {
                let w = self.weight.as_ref().expect("fc weight").value.data();
                let b = self.bias.as_ref().expect("fc bias").value.data();
                let xd = x.data();
                let out: Vec<f64> = (0..outputs)
                    .map(|o| b[o] + dot(&w[o * inputs..(o + 1) * inputs], xd))
                    .collect();
                Ok((
                    Tensor::from_vec(&out_shape, out)?,
                    LayerCache::Fc {
                        input: xd.to_vec(),
                        in_shape: x.shape().to_vec(),
                    },
                ))
            }
            LayerKind::Relu => {
                let active: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                Ok((Tensor::from_vec(&out_shape, out)?, LayerCache::Relu { active }))
            }
            LayerKind::Sigmoid => {
                let out: Vec<f64> = x.data().iter().map(|&v| crate::geometry::sigmoid(v)).collect();
                Ok((
                    Tensor::from_vec(&out_shape, out.clone())?,
                    LayerCache::Sigmoid { output: out },
                ))
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub(crate) fn backward(&mut self, cache: &LayerCache, g: &Tensor) -> Result<Tensor> {
        match (self.kind, cache) {
            (
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    pad,
                },
                LayerCache::Conv { cols, in_shape },
            ) => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let (ho, wo) = (g.shape()[1], g.shape()[2]);
                let n = ho * wo;
                let rows = in_ch * kernel * kernel;
                let gd = g.data();
                {
                    let weight = self.weight.as_mut().expect("conv weight");
                    gemm(out_ch, n, rows, gd, false, cols, true, weight.grad.data_mut(), 1.0);
                }
                {
                    let bias = self.bias.as_mut().expect("conv bias");
                    for (o, chunk) in gd.chunks_exact(n).enumerate() {
                        bias.grad.data_mut()[o] += chunk.iter().sum::<f64>();
                    }
                }
                let mut dcols = vec![0.0; rows * n];
                let weight = self.weight.as_ref().expect("conv weight");
                gemm(rows, out_ch, n, weight.value.data(), true, gd, false, &mut dcols, 0.0);
                let dx = col2im(&dcols, in_ch, h, w, kernel, stride, pad, ho, wo);
                Tensor::from_vec(in_shape, dx)
            }
            (LayerKind::MaxPool2d { .. }, LayerCache::Pool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape);
                let d = dx.data_mut();
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] += g.data()[o];
                }
                Ok(dx)
            }
            (LayerKind::Upsample2x, LayerCache::Upsample { in_shape }) => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = Tensor::zeros(in_shape);
                let d = dx.data_mut();
                let gd = g.data();
                for ch in 0..c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            d[ch * h * w + (oy / 2) * w + ox / 2] += gd[ch * ho * wo + oy * wo + ox];
                        }
                    }
                }
                Ok(dx)
            }
            (LayerKind::FullyConnected { inputs, outputs }, LayerCache::Fc { input, in_shape }) => {
                let gd = g.data();
                {
                    let wg = self.weight.as_mut().expect("fc weight").grad.data_mut();
                    for o in 0..outputs {
                        let go = gd[o];
                        if go != 0.0 {
                            for (a, &x) in wg[o * inputs..(o + 1) * inputs].iter_mut().zip(input) {
                                *a += go * x;
                            }
                        }
                    }
                }
                {
                    let bg = self.bias.as_mut().expect("fc bias").grad.data_mut();
                    for o in 0..outputs {
                        bg[o] += gd[o];
                    }
                }
                let w = self.weight.as_ref().expect("fc weight").value.data();
                let mut dx = vec![0.0; inputs];
                for o in 0..outputs {
                    let go = gd[o];
                    if go != 0.0 {
                        for (d, &wv) in dx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                            *d += go * wv;
                        }
                    }
                }
                Tensor::from_vec(in_shape, dx)
            }
            (LayerKind::Relu, LayerCache::Relu { active }) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(active)
                    .map(|(&gv, &a)| if a { gv } else { 0.0 })
                    .collect();
                Tensor::from_vec(g.shape(), dx)
            }
            (LayerKind::Sigmoid, LayerCache::Sigmoid { output }) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(output)
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                Tensor::from_vec(g.shape(), dx)
            }
            _ => Err(Error::State("layer cache does not match layer kind".into())),
        }
    }
}

/// Runs one layer without keeping backward state.
pub fn apply_layer(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    layer.forward(x).map(|(y, _)| y)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = a * b + beta * c` for logical `a: m x k`, `b: k x n`, row-major `c`.
/// A transposed operand is stored as its transpose in row-major order.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index reachable with these strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_1x1_conv_is_identity() {
        let mut layer = Layer::zeroed(LayerKind::conv(2, 2, 1));
        let w = layer.weight.as_mut().unwrap().value.data_mut();
        w[0] = 1.0;
        w[3] = 1.0;
        let x = t(&[2, 2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 0.5, 0.25, -1.0, 7.0, 8.0, 9.0]);
        assert_eq!(apply_layer(&layer, &x).unwrap(), x);
    }

    #[test]
    fn maxpool_takes_window_maximum() {
        let layer = Layer::zeroed(LayerKind::MaxPool2d { size: 2 });
        let y = apply_layer(&layer, &t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y, t(&[1, 1, 1], &[4.0]));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let relu = Layer::zeroed(LayerKind::Relu);
        let y = apply_layer(&relu, &t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let sig = Layer::zeroed(LayerKind::Sigmoid);
        assert_eq!(apply_layer(&sig, &t(&[1], &[0.0])).unwrap().data(), &[0.5]);
    }

    // Direct 7-loop convolution, independent of im2col + gemm.
    fn conv_oracle(x: &Tensor, layer: &Layer) -> Tensor {
        let LayerKind::Conv2d { in_ch, out_ch, kernel, stride, pad } = layer.kind else { unreachable!() };
        let (_, h, w) = x.dims3().unwrap();
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let wt = layer.weight.as_ref().unwrap().value.data();
        let b = layer.bias.as_ref().unwrap().value.data();
        let mut out = Tensor::zeros(&[out_ch, ho, wo]);
        for o in 0..out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..in_ch {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt[o * in_ch * kernel * kernel + (c * kernel + ky) * kernel + kx]
                                        * x.data()[c * h * w + iy as usize * w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data_mut()[o * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [
            LayerKind::conv(3, 4, 3),
            LayerKind::conv_strided(2, 5, 3, 2),
            LayerKind::Conv2d { in_ch: 2, out_ch: 3, kernel: 2, stride: 1, pad: 0 },
        ] {
            let mut layer = Layer::new(kind, &mut rng);
            for v in layer.bias.as_mut().unwrap().value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let c = match kind { LayerKind::Conv2d { in_ch, .. } => in_ch, _ => unreachable!() };
            let x = Tensor::from_vec(&[c, 7, 6], (0..c * 42).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let y = apply_layer(&layer, &x).unwrap();
            let oracle = conv_oracle(&x, &layer);
            assert_eq!(y.shape(), oracle.shape());
            for (a, b) in y.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fc_gradient_on_hand_computed_case() {
        // y = W x + b, L = 0.5 * |y - target|^2, so dL/dW = delta x^T.
        let mut layer = Layer::zeroed(LayerKind::fc(2, 2));
        layer.weight.as_mut().unwrap().value.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let x = t(&[2], &[0.5, -1.0]);
        let (y, cache) = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[-1.5, -2.5]);
        let target = [1.0, 0.0];
        let delta = t(&[2], &[y.data()[0] - target[0], y.data()[1] - target[1]]);
        let dx = layer.backward(&cache, &delta).unwrap();
        assert_eq!(layer.weight.as_ref().unwrap().grad.data(), &[-1.25, 2.5, -1.25, 2.5]);
        assert_eq!(layer.bias.as_ref().unwrap().grad.data(), &[-2.5, -2.5]);
        assert_eq!(dx.data(), &[-2.5 - 7.5, -5.0 - 10.0]);
    }

    #[test]
    fn shape_mismatch_is_a_configuration_error() {
        let layer = Layer::zeroed(LayerKind::conv(3, 4, 3));
        assert!(matches!(apply_layer(&layer, &Tensor::zeros(&[2, 5, 5])), Err(Error::Config(_))));
        let fc = Layer::zeroed(LayerKind::fc(10, 2));
        assert!(apply_layer(&fc, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn upsample_then_pool_is_identity_on_constant() {
        let up = Layer::zeroed(LayerKind::Upsample2x);
        let pool = Layer::zeroed(LayerKind::MaxPool2d { size: 2 });
        let x = Tensor::filled(&[2, 3, 4], 1.75);
        let y = apply_layer(&pool, &apply_layer(&up, &x).unwrap()).unwrap();
        assert_eq!(y, x);
    }
}
