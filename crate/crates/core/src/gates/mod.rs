//! Spatial gates: residual tensor in, binary mask on the layer's output grid out.
//!
//! Each variant implements [`Gate`] and is constructed through a
//! [`GateRegistry`] keyed by variant name. A gate instance is bound to one
//! layer so per-layer constants (the kernel L1 norm for output-norm) are
//! computed once at build time.

mod gumbel;
mod norm;
mod registry;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{support_sum, ConvGeometry, ConvLayerSpec, Tensor};

pub use gumbel::{gumbel_logits, GumbelGate, GumbelParams};
pub use norm::{AllOnesGate, InputNormGate, OutputNormGate};
pub use registry::{GateFactory, GateRegistry};

/// Input-norm threshold used for the EfficientDet ablations.
pub const INPUT_NORM_EPSILON: f32 = 1e-2;
/// Output-norm threshold used for the EfficientDet ablations.
pub const OUTPUT_NORM_EPSILON: f32 = 15e-5;

pub const ALLOWED_BLOCKS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateVariant {
    AllOnes,
    InputNorm,
    OutputNorm,
    Gumbel,
}

impl GateVariant {
    pub const ALL: [GateVariant; 4] = [
        GateVariant::AllOnes,
        GateVariant::InputNorm,
        GateVariant::OutputNorm,
        GateVariant::Gumbel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::AllOnes => "all-ones",
            GateVariant::InputNorm => "input-norm",
            GateVariant::OutputNorm => "output-norm",
            GateVariant::Gumbel => "gumbel",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            GateVariant::AllOnes => 0,
            GateVariant::InputNorm => 1,
            GateVariant::OutputNorm => 2,
            GateVariant::Gumbel => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }
}

impl fmt::Display for GateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::UnknownGate(s.to_string()))
    }
}

/// Per-layer gate settings as stored in the model file.
#[derive(Clone, Debug, PartialEq)]
pub struct GateConfig {
    pub variant: GateVariant,
    /// Threshold shared by every layer of a network.
    pub epsilon: f32,
    /// Norm order; only the L1 norm is supported.
    pub norm_order: u32,
    /// Block edge for structured masks; 1 means unstructured.
    pub block: usize,
    /// Gate-conv parameters, present iff the variant is gumbel.
    pub phi: Option<GumbelParams>,
    /// Experimental per-layer threshold. Ignored unless set.
    pub epsilon_override: Option<f32>,
}

impl GateConfig {
    fn base(variant: GateVariant, epsilon: f32) -> Self {
        Self {
            variant,
            epsilon,
            norm_order: 1,
            block: 1,
            phi: None,
            epsilon_override: None,
        }
    }

    pub fn all_ones() -> Self {
        Self::base(GateVariant::AllOnes, 0.0)
    }

    pub fn input_norm(epsilon: f32) -> Self {
        Self::base(GateVariant::InputNorm, epsilon)
    }

    pub fn output_norm(epsilon: f32) -> Self {
        Self::base(GateVariant::OutputNorm, epsilon)
    }

    pub fn gumbel(phi: GumbelParams) -> Self {
        Self {
            phi: Some(phi),
            ..Self::base(GateVariant::Gumbel, 0.0)
        }
    }

    pub fn with_block(mut self, block: usize) -> Self {
        self.block = block;
        self
    }

    pub fn effective_epsilon(&self) -> f32 {
        self.epsilon_override.unwrap_or(self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        let eps = self.effective_epsilon();
        if !eps.is_finite() || eps < 0.0 {
            return Err(Error::GateConfig(format!("epsilon must be finite and >= 0, got {eps}")));
        }
        if self.norm_order != 1 {
            return Err(Error::GateConfig(format!(
                "only the L1 norm is supported, got p = {}",
                self.norm_order
            )));
        }
        if !ALLOWED_BLOCKS.contains(&self.block) {
            return Err(Error::GateConfig(format!(
                "block must be one of {ALLOWED_BLOCKS:?}, got {}",
                self.block
            )));
        }
        match (self.variant, &self.phi) {
            (GateVariant::Gumbel, None) => {
                Err(Error::GateConfig("gumbel gate requires phi parameters".into()))
            }
            (GateVariant::Gumbel, Some(_)) => Ok(()),
            (v, Some(_)) => Err(Error::GateConfig(format!("{v} gate must not carry phi"))),
            (_, None) => Ok(()),
        }
    }
}

/// Binary mask over a layer's output grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl GateMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Geometry(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![true; height * width],
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub(crate) fn from_fn(height: usize, width: usize, f: impl Fn(usize) -> bool) -> Self {
        Self {
            height,
            width,
            values: (0..height * width).map(f).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn fired(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn fire_rate(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.fired() as f64 / self.values.len() as f64
    }

    /// Linear indices of fired positions in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
    }

    /// Whether every aligned `b x b` cell (edge cells clipped) is uniform.
    pub fn is_block_constant(&self, b: usize) -> bool {
        if b <= 1 {
            return true;
        }
        for cy in (0..self.height).step_by(b) {
            for cx in (0..self.width).step_by(b) {
                let first = self.get(cy, cx);
                for y in cy..(cy + b).min(self.height) {
                    for x in cx..(cx + b).min(self.width) {
                        if self.get(y, x) != first {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(1, self.height, self.width, |_, y, x| {
            if self.get(y, x) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Max-pool with kernel and stride `b`, then nearest upsample by `b`.
///
/// Partial cells at the right and bottom edges pool over their actual extent.
pub fn structure_mask(mask: &GateMask, b: usize) -> GateMask {
    if b <= 1 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    let mut out = GateMask::empty(h, w);
    for cy in (0..h).step_by(b) {
        for cx in (0..w).step_by(b) {
            let ys = cy..(cy + b).min(h);
            let xs = cx..(cx + b).min(w);
            let any = ys
                .clone()
                .any(|y| xs.clone().any(|x| mask.values[y * w + x]));
            if any {
                for y in ys {
                    for x in xs.clone() {
                        out.values[y * w + x] = true;
                    }
                }
            }
        }
    }
    out
}

/// A gating strategy bound to one convolution layer.
pub trait Gate: Send + Sync {
    fn variant(&self) -> GateVariant;

    /// Block edge applied by [`Gate::mask`].
    fn block(&self) -> usize;

    /// Unstructured mask for `residual` on the layer's output grid.
    fn raw_mask(&self, residual: &Tensor) -> Result<GateMask>;

    fn mask(&self, residual: &Tensor) -> Result<GateMask> {
        Ok(structure_mask(&self.raw_mask(residual)?, self.block()))
    }
}

pub fn input_norm_gate(r: &Tensor, layer: &ConvLayerSpec, cfg: &GateConfig) -> Result<GateMask> {
    expect_variant(cfg, GateVariant::InputNorm)?;
    InputNormGate::new(cfg, layer)?.raw_mask(r)
}

pub fn output_norm_gate(r: &Tensor, layer: &ConvLayerSpec, cfg: &GateConfig) -> Result<GateMask> {
    expect_variant(cfg, GateVariant::OutputNorm)?;
    OutputNormGate::new(cfg, layer)?.raw_mask(r)
}

pub fn gumbel_gate_infer(r: &Tensor, layer: &ConvLayerSpec, cfg: &GateConfig) -> Result<GateMask> {
    expect_variant(cfg, GateVariant::Gumbel)?;
    GumbelGate::new(cfg, layer)?.raw_mask(r)
}

/// Build the configured gate from the built-in registry and apply it,
/// including block structuring.
pub fn gate(r: &Tensor, layer: &ConvLayerSpec, cfg: &GateConfig) -> Result<GateMask> {
    GateRegistry::with_builtins().build(cfg, layer)?.mask(r)
}

/// The parts of a layer a gate needs: channel count and geometry.
#[derive(Clone, Debug)]
pub(crate) struct GateSite {
    in_channels: usize,
    geometry: ConvGeometry,
    label: String,
}

impl GateSite {
    pub(crate) fn new(layer: &ConvLayerSpec) -> Self {
        Self {
            in_channels: layer.in_channels,
            geometry: layer.geometry,
            label: layer.describe(),
        }
    }

    /// Output grid for `r`, checking the channel count.
    pub(crate) fn out_grid(&self, r: &Tensor) -> Result<(usize, usize)> {
        if r.channels() != self.in_channels {
            return Err(Error::ChannelMismatch {
                layer: self.label.clone(),
                expected: self.in_channels,
                actual: r.channels(),
            });
        }
        self.geometry.output_size(r.height(), r.width())
    }

    pub(crate) fn support_norm(&self, r: &Tensor) -> Result<Tensor> {
        let (oh, ow) = self.out_grid(r)?;
        Ok(support_sum(r, &self.geometry, oh, ow))
    }
}

fn expect_variant(cfg: &GateConfig, want: GateVariant) -> Result<()> {
    if cfg.variant != want {
        return Err(Error::GateConfig(format!(
            "expected a {want} config, got {}",
            cfg.variant
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in GateVariant::ALL {
            assert_eq!(v.name().parse::<GateVariant>().unwrap(), v);
            assert_eq!(GateVariant::from_code(v.code()), Some(v));
        }
        assert_eq!("all_ones".parse::<GateVariant>().unwrap(), GateVariant::AllOnes);
        assert!("dense".parse::<GateVariant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::input_norm(0.1).validate().is_ok());
        assert!(GateConfig::input_norm(-0.1).validate().is_err());
        assert!(GateConfig::input_norm(0.1).with_block(3).validate().is_err());
        let mut cfg = GateConfig::output_norm(0.1);
        cfg.norm_order = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = GateConfig::input_norm(0.1);
        cfg.phi = Some(GumbelParams::new(vec![0.0; 9], 0.0));
        assert!(cfg.validate().is_err());
        let mut cfg = GateConfig::gumbel(GumbelParams::new(vec![0.0; 9], 0.0));
        cfg.phi = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn epsilon_override_wins() {
        let mut cfg = GateConfig::input_norm(0.1);
        cfg.epsilon_override = Some(0.5);
        assert_eq!(cfg.effective_epsilon(), 0.5);
    }

    #[test]
    fn structure_identity_for_unit_block() {
        let m = GateMask::new(2, 3, vec![true, false, false, false, true, false]).unwrap();
        assert_eq!(structure_mask(&m, 1), m);
    }

    #[test]
    fn structure_single_corner() {
        let mut values = vec![false; 16];
        values[0] = true;
        let m = GateMask::new(4, 4, values).unwrap();
        let s = structure_mask(&m, 2);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(s.get(y, x), y < 2 && x < 2, "({y},{x})");
            }
        }
    }

    #[test]
    fn structure_all_ones_and_partial_edges() {
        let full = GateMask::full(5, 7);
        for b in ALLOWED_BLOCKS {
            assert_eq!(structure_mask(&full, b), full);
        }
        // fired pixel inside a clipped bottom-right cell
        let mut m = GateMask::empty(5, 5);
        m.values[4 * 5 + 4] = true;
        let s = structure_mask(&m, 4);
        assert_eq!(s.fired(), 1);
        assert!(s.get(4, 4));
        let mut m = GateMask::empty(5, 5);
        m.values[4 * 5 + 1] = true;
        let s = structure_mask(&m, 4);
        assert_eq!(s.fired(), 4);
        assert!(s.is_block_constant(4));
    }

    #[test]
    fn block_constancy_detector() {
        let m = GateMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(!m.is_block_constant(2));
        assert!(m.is_block_constant(1));
    }
}
