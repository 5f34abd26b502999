//! Column-sparse convolution: im2col restricted to fired output positions.

use crate::error::{Error, Result};
use crate::gates::GateMask;
use crate::tensor::{ConvGeometry, ConvLayerSpec, Tensor};

/// Convolution results at fired positions only, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOutput {
    /// Linear output positions, row-major order.
    pub positions: Vec<usize>,
    pub out_channels: usize,
    /// Channel-major: `values[co * positions.len() + j]`.
    pub values: Vec<f32>,
    pub macs: u64,
}

impl SparseOutput {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// The `c_out` vector for the `j`-th fired position.
    pub fn vector(&self, j: usize) -> Vec<f32> {
        let n = self.positions.len();
        (0..self.out_channels).map(|co| self.values[co * n + j]).collect()
    }

    /// Add the sparse values into `acc` (shape `c_out x h_out x w_out`).
    pub fn scatter_add(&self, acc: &mut Tensor) -> Result<()> {
        if acc.channels() != self.out_channels {
            return Err(Error::Geometry(format!(
                "scatter target has {} channels, expected {}",
                acc.channels(),
                self.out_channels
            )));
        }
        let plane = acc.plane_len();
        let n = self.positions.len();
        let data = acc.data_mut();
        for co in 0..self.out_channels {
            let dst = &mut data[co * plane..(co + 1) * plane];
            let src = &self.values[co * n..(co + 1) * n];
            for (&p, &v) in self.positions.iter().zip(src) {
                dst[p] += v;
            }
        }
        Ok(())
    }
}

/// Runs of horizontally adjacent fired positions: `(row, x_start, x_end)`.
fn fired_runs(mask: &GateMask) -> Vec<(usize, usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let v = mask.values();
    let mut runs = Vec::new();
    for y in 0..h {
        let row = &v[y * w..(y + 1) * w];
        let mut x = 0;
        while x < w {
            if row[x] {
                let start = x;
                while x < w && row[x] {
                    x += 1;
                }
                runs.push((y, start, x));
            } else {
                x += 1;
            }
        }
    }
    runs
}

/// Gather im2col columns at fired positions, multiply by the flattened
/// weights, and return the per-position outputs. Costs
/// `fired * c_out * c_in * k_h * k_w` multiply-accumulates.
pub fn sparse_conv(r: &Tensor, mask: &GateMask, layer: &ConvLayerSpec) -> Result<SparseOutput> {
    let (co_n, oh, ow) = layer.output_shape(r.shape())?;
    if (mask.height(), mask.width()) != (oh, ow) {
        return Err(Error::Geometry(format!(
            "{}: mask {}x{} does not match output grid {oh}x{ow}",
            layer.describe(),
            mask.height(),
            mask.width()
        )));
    }
    let runs = fired_runs(mask);
    let positions: Vec<usize> = runs
        .iter()
        .flat_map(|&(y, x0, x1)| (x0..x1).map(move |x| y * ow + x))
        .collect();
    let n = positions.len();
    let k_len = layer.receptive_len();
    let macs = n as u64 * layer.macs_per_position();
    if n == 0 {
        return Ok(SparseOutput {
            positions,
            out_channels: co_n,
            values: Vec::new(),
            macs,
        });
    }

    // k_len x n gathered columns, zero where the tap falls in padding
    let g = layer.geometry;
    let (h, w) = (r.height(), r.width());
    let mut cols = vec![0.0f32; k_len * n];
    for ci in 0..layer.in_channels {
        let src = r.plane(ci);
        for ky in 0..g.kernel.0 {
            for kx in 0..g.kernel.1 {
                let k = (ci * g.kernel.0 + ky) * g.kernel.1 + kx;
                let dst = &mut cols[k * n..(k + 1) * n];
                let xs = ConvGeometry::valid_outputs(kx, g.stride.1, g.padding.1, g.dilation.1, w, ow);
                let ys = ConvGeometry::valid_outputs(ky, g.stride.0, g.padding.0, g.dilation.0, h, oh);
                let mut j = 0;
                for &(oy, x0, x1) in &runs {
                    let len = x1 - x0;
                    if ys.contains(&oy) {
                        let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                        let row = &src[iy * w..(iy + 1) * w];
                        let lo = x0.max(xs.start);
                        let hi = x1.min(xs.end);
                        for ox in lo..hi.max(lo) {
                            let ix = ox * g.stride.1 + kx * g.dilation.1 - g.padding.1;
                            dst[j + ox - x0] = row[ix];
                        }
                    }
                    j += len;
                }
            }
        }
    }

    let mut values = vec![0.0f32; co_n * n];
    for co in 0..co_n {
        let out = &mut values[co * n..(co + 1) * n];
        let wrow = &layer.weights[co * k_len..(co + 1) * k_len];
        for (k, &wv) in wrow.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            for (o, c) in out.iter_mut().zip(&cols[k * n..(k + 1) * n]) {
                *o += wv * c;
            }
        }
    }
    Ok(SparseOutput {
        positions,
        out_channels: co_n,
        values,
        macs,
    })
}
