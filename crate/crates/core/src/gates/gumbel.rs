use super::{Gate, GateConfig, GateMask, GateSite, GateVariant};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, ConvLayerSpec, Tensor};

/// Initial gate-conv bias: sigma(2) ~ 0.88, so training starts close to dense.
pub const INITIAL_GATE_BIAS: f32 = 2.0;

/// Single-output-channel gate convolution `1 x c_in x k_h x k_w` plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelParams {
    pub weights: Vec<f32>,
    pub bias: f32,
}

impl GumbelParams {
    pub fn new(weights: Vec<f32>, bias: f32) -> Self {
        Self { weights, bias }
    }

    /// Zero kernel with the default firing bias, sized for `layer`.
    pub fn initial(layer: &ConvLayerSpec) -> Self {
        Self::new(vec![0.0; layer.receptive_len()], INITIAL_GATE_BIAS)
    }

    pub fn len(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The gate conv as a layer sharing `layer`'s geometry.
    pub fn as_layer(&self, layer: &ConvLayerSpec) -> Result<ConvLayerSpec> {
        if self.weights.len() != layer.receptive_len() {
            return Err(Error::GateConfig(format!(
                "{}: gate kernel has {} weights, layer receptive field has {}",
                layer.describe(),
                self.weights.len(),
                layer.receptive_len()
            )));
        }
        ConvLayerSpec::new(1, layer.in_channels, layer.geometry, self.weights.clone())?
            .with_bias(vec![self.bias])
    }
}

/// Gate-conv logits `f(r; phi)` on the layer's output grid.
pub fn gumbel_logits(r: &Tensor, layer: &ConvLayerSpec, phi: &GumbelParams) -> Result<Tensor> {
    conv2d(r, &phi.as_layer(layer)?)
}

/// Learned gate: fires where `sigmoid(f(r; phi)) >= 0.5`, i.e. the logit is
/// non-negative, restricted to positions whose receptive-field residual is
/// not identically zero (the convolved residual is exactly zero there).
#[derive(Clone, Debug)]
pub struct GumbelGate {
    site: GateSite,
    gate_conv: ConvLayerSpec,
    block: usize,
}

impl GumbelGate {
    pub fn new(cfg: &GateConfig, layer: &ConvLayerSpec) -> Result<Self> {
        cfg.validate()?;
        let phi = cfg
            .phi
            .as_ref()
            .ok_or_else(|| Error::GateConfig("gumbel gate requires phi parameters".into()))?;
        Ok(Self {
            site: GateSite::new(layer),
            gate_conv: phi.as_layer(layer)?,
            block: cfg.block,
        })
    }

    pub fn logits(&self, residual: &Tensor) -> Result<Tensor> {
        self.site.out_grid(residual)?;
        conv2d(residual, &self.gate_conv)
    }
}

impl Gate for GumbelGate {
    fn variant(&self) -> GateVariant {
        GateVariant::Gumbel
    }

    fn block(&self) -> usize {
        self.block
    }

    fn raw_mask(&self, residual: &Tensor) -> Result<GateMask> {
        let logits = self.logits(residual)?;
        let support = self.site.support_norm(residual)?;
        let (l, s) = (logits.data(), support.data());
        Ok(GateMask::from_fn(logits.height(), logits.width(), |i| {
            s[i] > 0.0 && l[i] >= 0.0
        }))
    }
}
