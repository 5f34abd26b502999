//! Dense planar tensors and the reference convolution.
//!
//! Everything in the skip path is checked against [`conv2d`], a direct
//! nested-loop convolution with zero padding. [`im2col`] lowers the same
//! convolution to a matrix product; the sparse executor gathers a subset of
//! its columns.

use crate::error::{Error, Result};

/// Dense `channels x height x width` array, row-major within each plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::Geometry(format!(
                "tensor {channels}x{height}x{width} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
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

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(self.with_data(data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.with_data(data))
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.check_same_shape(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .fold(0.0f32, |m, (x, y)| m.max((x - y).abs())))
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| f64::from((x - y).abs()))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Max absolute deviation scaled by the reference's largest magnitude.
///
/// Elementwise relative error is meaningless near zero crossings, so the
/// scale is the reference tensor's infinity norm.
pub fn relative_deviation(actual: &Tensor, reference: &Tensor) -> Result<f32> {
    let diff = max_abs_diff(actual, reference)?;
    let scale = reference.max_abs();
    if scale == 0.0 {
        return Ok(diff);
    }
    Ok(diff / scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }

    #[inline]
    pub fn apply_scalar(self, v: f32) -> f32 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

pub fn apply_activation(z: &Tensor, activation: Activation) -> Tensor {
    match activation {
        Activation::Identity => z.clone(),
        Activation::Relu => z.map(|v| v.max(0.0)),
    }
}

/// Kernel extent plus stride, zero padding and dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            kernel: (kernel_h, kernel_w),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    /// Same-size output for odd kernels at stride 1.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: (kernel / 2, kernel / 2),
            ..Self::new(kernel, kernel)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ConvGeometry {
            kernel,
            stride,
            dilation,
            ..
        } = *self;
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::Geometry("kernel extent must be >= 1".into()));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Geometry("stride must be >= 1".into()));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::Geometry("dilation must be >= 1".into()));
        }
        Ok(())
    }

    fn output_dim(input: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = input + 2 * p;
        if padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let oh = Self::output_dim(
            height,
            self.kernel.0,
            self.stride.0,
            self.padding.0,
            self.dilation.0,
        );
        let ow = Self::output_dim(
            width,
            self.kernel.1,
            self.stride.1,
            self.padding.1,
            self.dilation.1,
        );
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 && height > 0 && width > 0 => Ok((oh, ow)),
            _ => Err(Error::Geometry(format!(
                "{}x{} input too small for kernel {:?} dilation {:?} padding {:?}",
                height, width, self.kernel, self.dilation, self.padding
            ))),
        }
    }

    /// Range of output indices whose tap `k` lands inside `0..n`.
    #[inline]
    pub(crate) fn valid_outputs(
        k: usize,
        s: usize,
        p: usize,
        d: usize,
        n: usize,
        out: usize,
    ) -> std::ops::Range<usize> {
        // o*s + k*d - p in [0, n)
        let off = (k * d) as isize - p as isize;
        let lo = if off >= 0 {
            0
        } else {
            ((-off) as usize).div_ceil(s)
        };
        let hi_excl = if (n as isize) - off <= 0 {
            0
        } else {
            (((n as isize - off) as usize) + s - 1) / s
        };
        let hi = hi_excl.min(out);
        lo.min(hi)..hi
    }
}

/// One convolution layer: weights `(c_out, c_in, k_h, k_w)`, optional bias,
/// geometry, and the activation applied after accumulation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub geometry: ConvGeometry,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        geometry: ConvGeometry,
        weights: Vec<f32>,
    ) -> Result<Self> {
        let layer = Self {
            out_channels,
            in_channels,
            geometry,
            weights,
            bias: None,
            activation: Activation::Identity,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Result<Self> {
        self.bias = Some(bias);
        self.validate()?;
        Ok(self)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.out_channels == 0 || self.in_channels == 0 {
            return Err(Error::Geometry(format!("{}: zero channels", self.describe())));
        }
        if self.weights.len() != self.out_channels * self.receptive_len() {
            return Err(Error::Geometry(format!(
                "{}: expected {} weights, got {}",
                self.describe(),
                self.out_channels * self.receptive_len(),
                self.weights.len()
            )));
        }
        if let Some(i) = self.weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        if let Some(bias) = &self.bias {
            if bias.len() != self.out_channels {
                return Err(Error::Geometry(format!(
                    "{}: bias length {} != {}",
                    self.describe(),
                    bias.len(),
                    self.out_channels
                )));
            }
            if let Some(i) = bias.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: i });
            }
        }
        Ok(())
    }

    /// `c_in * k_h * k_w`, the length of one im2col column.
    pub fn receptive_len(&self) -> usize {
        self.in_channels * self.geometry.kernel.0 * self.geometry.kernel.1
    }

    /// Multiply-accumulates per output position.
    pub fn macs_per_position(&self) -> u64 {
        (self.out_channels * self.receptive_len()) as u64
    }

    pub fn describe(&self) -> String {
        let g = &self.geometry;
        format!(
            "conv {}->{} k{}x{} s{}x{} p{}x{} d{}x{}",
            self.in_channels,
            self.out_channels,
            g.kernel.0,
            g.kernel.1,
            g.stride.0,
            g.stride.1,
            g.padding.0,
            g.padding.1,
            g.dilation.0,
            g.dilation.1
        )
    }

    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input;
        if c != self.in_channels {
            return Err(Error::ChannelMismatch {
                layer: self.describe(),
                expected: self.in_channels,
                actual: c,
            });
        }
        let (oh, ow) = self.geometry.output_size(h, w)?;
        Ok((self.out_channels, oh, ow))
    }

    /// Sum of absolute weights over all four kernel dimensions.
    pub fn weight_l1(&self) -> f32 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    #[inline]
    pub(crate) fn weight_index(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        let (kh, kw) = self.geometry.kernel;
        ((co * self.in_channels + ci) * kh + ky) * kw + kx
    }
}

/// Direct convolution. Returns the pre-activation output with bias added.
pub fn conv2d(input: &Tensor, layer: &ConvLayerSpec) -> Result<Tensor> {
    let (co_n, oh, ow) = layer.output_shape(input.shape())?;
    let mut out = Tensor::zeros(co_n, oh, ow);
    let g = layer.geometry;
    let (h, w) = (input.height, input.width);
    let plane = oh * ow;
    for co in 0..co_n {
        let o = &mut out.data[co * plane..(co + 1) * plane];
        if let Some(bias) = &layer.bias {
            o.fill(bias[co]);
        }
        for ci in 0..layer.in_channels {
            let src = input.plane(ci);
            for ky in 0..g.kernel.0 {
                let oy_range =
                    ConvGeometry::valid_outputs(ky, g.stride.0, g.padding.0, g.dilation.0, h, oh);
                for kx in 0..g.kernel.1 {
                    let wv = layer.weights[layer.weight_index(co, ci, ky, kx)];
                    let ox_range = ConvGeometry::valid_outputs(
                        kx,
                        g.stride.1,
                        g.padding.1,
                        g.dilation.1,
                        w,
                        ow,
                    );
                    for oy in oy_range.clone() {
                        let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                        let row = &src[iy * w..(iy + 1) * w];
                        let orow = &mut o[oy * ow..(oy + 1) * ow];
                        if g.stride.1 == 1 && !ox_range.is_empty() {
                            // contiguous slices let this vectorize
                            let ix0 = ox_range.start + kx * g.dilation.1 - g.padding.1;
                            let n = ox_range.len();
                            for (acc, x) in orow[ox_range.clone()].iter_mut().zip(&row[ix0..ix0 + n]) {
                                *acc += wv * x;
                            }
                            continue;
                        }
                        for ox in ox_range.clone() {
                            let ix = ox * g.stride.1 + kx * g.dilation.1 - g.padding.1;
                            orow[ox] += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// im2col lowering: `rows = c_in*k_h*k_w`, one column per output position.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMatrix {
    pub rows: usize,
    pub cols: usize,
    pub out_height: usize,
    pub out_width: usize,
    /// Row-major `rows x cols`.
    pub data: Vec<f32>,
}

impl ColumnMatrix {
    pub fn column(&self, col: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.data[r * self.cols + col]).collect()
    }
}

pub fn im2col(input: &Tensor, layer: &ConvLayerSpec) -> Result<ColumnMatrix> {
    let (_, oh, ow) = layer.output_shape(input.shape())?;
    let g = layer.geometry;
    let rows = layer.receptive_len();
    let cols = oh * ow;
    let mut data = vec![0.0f32; rows * cols];
    let (h, w) = (input.height, input.width);
    for ci in 0..layer.in_channels {
        let src = input.plane(ci);
        for ky in 0..g.kernel.0 {
            for kx in 0..g.kernel.1 {
                let r = (ci * g.kernel.0 + ky) * g.kernel.1 + kx;
                let dst = &mut data[r * cols..(r + 1) * cols];
                for oy in ConvGeometry::valid_outputs(ky, g.stride.0, g.padding.0, g.dilation.0, h, oh) {
                    let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                    for ox in
                        ConvGeometry::valid_outputs(kx, g.stride.1, g.padding.1, g.dilation.1, w, ow)
                    {
                        let ix = ox * g.stride.1 + kx * g.dilation.1 - g.padding.1;
                        dst[oy * ow + ox] = src[iy * w + ix];
                    }
                }
            }
        }
    }
    Ok(ColumnMatrix {
        rows,
        cols,
        out_height: oh,
        out_width: ow,
        data,
    })
}

/// `weights (c_out x rows) * columns`, plus bias. Dense GEMM over every column.
pub fn gemm_columns(layer: &ConvLayerSpec, cols: &ColumnMatrix) -> Result<Tensor> {
    if cols.rows != layer.receptive_len() {
        return Err(Error::Geometry(format!(
            "{}: column height {} != {}",
            layer.describe(),
            cols.rows,
            layer.receptive_len()
        )));
    }
    let n = cols.cols;
    let mut out = vec![0.0f32; layer.out_channels * n];
    for co in 0..layer.out_channels {
        let orow = &mut out[co * n..(co + 1) * n];
        if let Some(bias) = &layer.bias {
            orow.fill(bias[co]);
        }
        let wrow = &layer.weights[co * cols.rows..(co + 1) * cols.rows];
        for (k, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let crow = &cols.data[k * n..(k + 1) * n];
            for (o, c) in orow.iter_mut().zip(crow) {
                *o += wv * c;
            }
        }
    }
    Tensor::new(layer.out_channels, cols.out_height, cols.out_width, out)
}

/// Dense convolution through im2col + GEMM.
pub fn conv2d_im2col(input: &Tensor, layer: &ConvLayerSpec) -> Result<Tensor> {
    let cols = im2col(input, layer)?;
    gemm_columns(layer, &cols)
}

/// Per output position, the L1 norm of `r` over the layer's receptive field
/// across all input channels. Equivalent to convolving `|r|` with an
/// all-ones single-output kernel of the layer's geometry.
pub fn l1_norm_over_support(r: &Tensor, layer: &ConvLayerSpec) -> Result<Tensor> {
    let (_, oh, ow) = layer.output_shape(r.shape())?;
    Ok(support_sum(r, &layer.geometry, oh, ow))
}

pub(crate) fn support_sum(r: &Tensor, g: &ConvGeometry, oh: usize, ow: usize) -> Tensor {
    let (h, w) = (r.height, r.width);
    let mut abs_plane = vec![0.0f32; h * w];
    for c in 0..r.channels {
        for (a, v) in abs_plane.iter_mut().zip(r.plane(c)) {
            *a += v.abs();
        }
    }
    let mut out = Tensor::zeros(1, oh, ow);
    for ky in 0..g.kernel.0 {
        let oy_range = ConvGeometry::valid_outputs(ky, g.stride.0, g.padding.0, g.dilation.0, h, oh);
        for kx in 0..g.kernel.1 {
            let ox_range =
                ConvGeometry::valid_outputs(kx, g.stride.1, g.padding.1, g.dilation.1, w, ow);
            for oy in oy_range.clone() {
                let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                for ox in ox_range.clone() {
                    let ix = ox * g.stride.1 + kx * g.dilation.1 - g.padding.1;
                    out.data[oy * ow + ox] += abs_plane[iy * w + ix];
                }
            }
        }
    }
    out
}
