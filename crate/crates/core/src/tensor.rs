//! Dense `f32` tensors and the forward kernels of the supported layer kinds.
//!
//! All kernels accumulate in a fixed order (input channel, then kernel row,
//! then kernel column) so results are bit-reproducible across runs and thread
//! counts.

use std::ops::{AddAssign, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major array of `f32` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape {
                op: "Tensor::new",
                dim: "data length",
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn full(shape: &[usize], value: f32) -> Self {
        check_shape(shape).expect("tensor dimensions must be positive");
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("vector tensor must be non-empty")
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Sum in `f64`, in storage order.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Flat index of the first maximum in storage order.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub(crate) fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape {
                op,
                dim: "rank",
                expected: 3,
                found: self.shape.len(),
            }),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument("tensor shape has no dimensions".into()));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "tensor dimension {pos} of {shape:?} is zero"
        )));
    }
    Ok(())
}

/// Connectivity of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    /// Square kernel, equal stride and padding in both directions.
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Output spatial size for an `h × w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: "kernel and stride must be positive".into(),
            });
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: "channel counts must be positive".into(),
            });
        }
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if self.kernel_h > ph || self.kernel_w > pw {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: format!(
                    "kernel {}x{} larger than padded input {ph}x{pw}",
                    self.kernel_h, self.kernel_w
                ),
            });
        }
        Ok((
            (ph - self.kernel_h) / self.stride_h + 1,
            (pw - self.kernel_w) / self.stride_w + 1,
        ))
    }
}

/// Dimensions of a padded feature map and the kernel sliding over it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PaddedConv {
    pub channels: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geom: ConvGeometry,
}

impl PaddedConv {
    pub fn new(geom: ConvGeometry, h: usize, w: usize) -> Result<Self> {
        let (out_h, out_w) = geom.output_size(h, w)?;
        Ok(Self {
            channels: geom.in_channels,
            padded_h: h + 2 * geom.pad_h,
            padded_w: w + 2 * geom.pad_w,
            out_h,
            out_w,
            geom,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.channels * self.padded_h * self.padded_w
    }

    pub fn out_len(&self) -> usize {
        self.geom.out_channels * self.out_h * self.out_w
    }

    /// Copy `[C,H,W]` data into a padded buffer whose border holds
    /// `border(c)` for channel `c`.
    pub fn pad<T: Copy>(&self, data: &[T], border: impl Fn(usize) -> T) -> Vec<T> {
        let (ph, pw) = (self.geom.pad_h, self.geom.pad_w);
        let h = self.padded_h - 2 * ph;
        let w = self.padded_w - 2 * pw;
        let mut out = Vec::with_capacity(self.padded_len());
        for c in 0..self.channels {
            let fill = border(c);
            for y in 0..self.padded_h {
                for x in 0..self.padded_w {
                    if y >= ph && y < ph + h && x >= pw && x < pw + w {
                        out.push(data[(c * h + y - ph) * w + x - pw]);
                    } else {
                        out.push(fill);
                    }
                }
            }
        }
        out
    }

    /// Split a padded buffer into its interior `[C,H,W]` values and the sum of
    /// the border ring.
    pub fn crop(&self, padded: &[f64]) -> (Vec<f64>, f64) {
        let (ph, pw) = (self.geom.pad_h, self.geom.pad_w);
        let h = self.padded_h - 2 * ph;
        let w = self.padded_w - 2 * pw;
        let mut inner = Vec::with_capacity(self.channels * h * w);
        let mut ring = 0.0;
        for c in 0..self.channels {
            for y in 0..self.padded_h {
                for x in 0..self.padded_w {
                    let v = padded[(c * self.padded_h + y) * self.padded_w + x];
                    if y >= ph && y < ph + h && x >= pw && x < pw + w {
                        inner.push(v);
                    } else {
                        ring += v;
                    }
                }
            }
        }
        (inner, ring)
    }

    /// Cross-correlation of a padded input with `[K,C,kh,kw]` weights, no bias.
    ///
    /// For each output element the terms are added in (c, ki, kj) order.
    pub fn correlate<T>(&self, padded: &[T], weights: &[T]) -> Vec<T>
    where
        T: Copy + Default + AddAssign + Mul<Output = T>,
    {
        let g = &self.geom;
        let plane = self.out_h * self.out_w;
        let mut out = vec![T::default(); self.out_len()];
        for k in 0..g.out_channels {
            let acc = &mut out[k * plane..(k + 1) * plane];
            for c in 0..self.channels {
                let src = &padded[c * self.padded_h * self.padded_w..];
                for ki in 0..g.kernel_h {
                    for kj in 0..g.kernel_w {
                        let wv = weights[((k * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                        for oy in 0..self.out_h {
                            let row = (oy * g.stride_h + ki) * self.padded_w + kj;
                            let dst = &mut acc[oy * self.out_w..(oy + 1) * self.out_w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d += src[row + ox * g.stride_w] * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`correlate`](Self::correlate): scatter `[K,H',W']` values
    /// back onto the padded input grid through the same weights.
    pub fn correlate_transpose<T>(&self, upstream: &[T], weights: &[T]) -> Vec<T>
    where
        T: Copy + Default + AddAssign + Mul<Output = T>,
    {
        let g = &self.geom;
        let plane = self.out_h * self.out_w;
        let mut out = vec![T::default(); self.padded_len()];
        for k in 0..g.out_channels {
            let up = &upstream[k * plane..(k + 1) * plane];
            for c in 0..self.channels {
                let dst = &mut out[c * self.padded_h * self.padded_w..(c + 1) * self.padded_h * self.padded_w];
                for ki in 0..g.kernel_h {
                    for kj in 0..g.kernel_w {
                        let wv = weights[((k * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                        for oy in 0..self.out_h {
                            let row = (oy * g.stride_h + ki) * self.padded_w + kj;
                            for ox in 0..self.out_w {
                                dst[row + ox * g.stride_w] += up[oy * self.out_w + ox] * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Zero-padded 2-D cross-correlation plus bias.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (c, h, w) = input.dims3("conv2d_forward")?;
    check_conv_params(weights, bias, geom)?;
    expect_dim("conv2d_forward", "input channels", geom.in_channels, c)?;
    let conv = PaddedConv::new(*geom, h, w)?;
    let padded = conv.pad(input.data(), |_| 0.0f32);
    let mut out = conv.correlate(&padded, weights.data());
    let plane = conv.out_h * conv.out_w;
    for (k, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias.data()[k];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(&[geom.out_channels, conv.out_h, conv.out_w], out)
}

pub(crate) fn check_conv_params(weights: &Tensor, bias: &Tensor, geom: &ConvGeometry) -> Result<()> {
    let ws = geom.weight_shape();
    if weights.ndim() != 4 {
        return Err(Error::Shape {
            op: "conv2d",
            dim: "weight rank",
            expected: 4,
            found: weights.ndim(),
        });
    }
    for (i, name) in ["out channels", "in channels", "kernel height", "kernel width"]
        .into_iter()
        .enumerate()
    {
        expect_dim("conv2d", name, ws[i], weights.shape()[i])?;
    }
    expect_dim("conv2d", "bias length", geom.out_channels, bias.len())
}

/// Dense layer: `out[j] = Σ_i input[i]·weights[j,i] + bias[j]`.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims(weights, "fc_forward")?;
    expect_dim("fc_forward", "input length", n, input.len())?;
    expect_dim("fc_forward", "bias length", m, bias.len())?;
    let x = input.data();
    let out = weights
        .data()
        .chunks(n)
        .zip(bias.data())
        .map(|(row, &b)| {
            let mut acc = 0.0f32;
            for (&xi, &wi) in x.iter().zip(row) {
                acc += xi * wi;
            }
            acc + b
        })
        .collect();
    Tensor::new(&[m], out)
}

pub(crate) fn matrix_dims(weights: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match weights.shape() {
        &[m, n] => Ok((m, n)),
        s => Err(Error::Shape {
            op,
            dim: "weight rank",
            expected: 2,
            found: s.len(),
        }),
    }
}

/// Rectifier; the mask is 1 exactly where the input is strictly positive.
pub fn relu_forward(input: &Tensor) -> (Tensor, Tensor) {
    let out = input.map(|v| if v > 0.0 { v } else { 0.0 });
    let mask = input.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (out, mask)
}

/// Square pooling window without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn new(window: usize, stride: usize) -> Self {
        Self { window, stride }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Geometry {
                op: "pool",
                detail: "window and stride must be positive".into(),
            });
        }
        if self.window > h || self.window > w {
            return Err(Error::Geometry {
                op: "pool",
                detail: format!("window {} larger than input {h}x{w}", self.window),
            });
        }
        Ok(((h - self.window) / self.stride + 1, (w - self.window) / self.stride + 1))
    }

    /// Flat `[C,H,W]` input indices covered by output cell `(c, oy, ox)`, in
    /// row-major scan order.
    pub(crate) fn window_indices(
        &self,
        (h, w): (usize, usize),
        c: usize,
        oy: usize,
        ox: usize,
    ) -> impl Iterator<Item = usize> + '_ {
        let y0 = oy * self.stride;
        let x0 = ox * self.stride;
        (0..self.window).flat_map(move |dy| (0..self.window).map(move |dx| (c * h + y0 + dy) * w + x0 + dx))
    }
}

/// Max pooling; `switches[o]` is the flat input index of the first maximum
/// of window `o` in scan order.
pub fn maxpool_forward(input: &Tensor, pool: PoolGeometry) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3("maxpool_forward")?;
    let (oh, ow) = pool.output_size(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut switches = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for idx in pool.window_indices((h, w), ch, oy, ox) {
                    if best == usize::MAX || x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                switches.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, switches))
}

pub fn avgpool_forward(input: &Tensor, pool: PoolGeometry) -> Result<Tensor> {
    let (c, h, w) = input.dims3("avgpool_forward")?;
    let (oh, ow) = pool.output_size(h, w)?;
    let x = input.data();
    let area = (pool.window * pool.window) as f32;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for idx in pool.window_indices((h, w), ch, oy, ox) {
                    acc += x[idx];
                }
                out.push(acc / area);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub(crate) fn expect_dim(op: &'static str, dim: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            dim,
            expected,
            found,
        })
    }
}
