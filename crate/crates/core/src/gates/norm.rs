use super::{Gate, GateConfig, GateMask, GateSite, GateVariant};
use crate::error::Result;
use crate::tensor::{ConvLayerSpec, Tensor};

/// Fires everywhere; recovers dense inference.
#[derive(Clone, Debug)]
pub struct AllOnesGate {
    site: GateSite,
    block: usize,
}

impl AllOnesGate {
    pub fn new(cfg: &GateConfig, layer: &ConvLayerSpec) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            site: GateSite::new(layer),
            block: cfg.block,
        })
    }
}

impl Gate for AllOnesGate {
    fn variant(&self) -> GateVariant {
        GateVariant::AllOnes
    }

    fn block(&self) -> usize {
        self.block
    }

    fn raw_mask(&self, residual: &Tensor) -> Result<GateMask> {
        let (oh, ow) = self.site.out_grid(residual)?;
        Ok(GateMask::full(oh, ow))
    }
}

/// Fires where the receptive-field L1 norm of the residual reaches epsilon.
#[derive(Clone, Debug)]
pub struct InputNormGate {
    site: GateSite,
    epsilon: f32,
    block: usize,
}

impl InputNormGate {
    pub fn new(cfg: &GateConfig, layer: &ConvLayerSpec) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            site: GateSite::new(layer),
            epsilon: cfg.effective_epsilon(),
            block: cfg.block,
        })
    }
}

impl Gate for InputNormGate {
    fn variant(&self) -> GateVariant {
        GateVariant::InputNorm
    }

    fn block(&self) -> usize {
        self.block
    }

    fn raw_mask(&self, residual: &Tensor) -> Result<GateMask> {
        let norm = self.site.support_norm(residual)?;
        let eps = self.epsilon;
        let d = norm.data();
        Ok(GateMask::from_fn(norm.height(), norm.width(), |i| d[i] >= eps))
    }
}

/// Input norm scaled by the kernel's L1 norm, an upper bound on the L1 norm
/// of the convolved residual at each position.
#[derive(Clone, Debug)]
pub struct OutputNormGate {
    site: GateSite,
    epsilon: f32,
    block: usize,
    weight_l1: f32,
}

impl OutputNormGate {
    pub fn new(cfg: &GateConfig, layer: &ConvLayerSpec) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            site: GateSite::new(layer),
            epsilon: cfg.effective_epsilon(),
            block: cfg.block,
            weight_l1: layer.weight_l1(),
        })
    }

    pub fn weight_l1(&self) -> f32 {
        self.weight_l1
    }
}

impl Gate for OutputNormGate {
    fn variant(&self) -> GateVariant {
        GateVariant::OutputNorm
    }

    fn block(&self) -> usize {
        self.block
    }

    fn raw_mask(&self, residual: &Tensor) -> Result<GateMask> {
        let norm = self.site.support_norm(residual)?;
        let (eps, wn) = (self.epsilon, self.weight_l1);
        let d = norm.data();
        Ok(GateMask::from_fn(norm.height(), norm.width(), |i| {
            wn * d[i] >= eps
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gate, input_norm_gate, output_norm_gate, structure_mask};
    use super::*;
    use crate::tensor::{l1_norm_over_support, ConvGeometry};

    fn layer3(weights: Vec<f32>) -> ConvLayerSpec {
        ConvLayerSpec::new(1, 1, ConvGeometry::same(3), weights).unwrap()
    }

    fn pseudo_random(c: usize, h: usize, w: usize, seed: u32) -> Tensor {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        Tensor::from_fn(c, h, w, |_, _, _| {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            (s % 2001) as f32 / 1000.0 - 1.0
        })
    }

    #[test]
    fn input_norm_examples() {
        let layer = layer3(vec![1.0; 9]);
        let zero = Tensor::zeros(1, 6, 6);
        assert_eq!(
            input_norm_gate(&zero, &layer, &GateConfig::input_norm(1e-2))
                .unwrap()
                .fired(),
            0
        );
        let r = pseudo_random(1, 6, 6, 3);
        let m = input_norm_gate(&r, &layer, &GateConfig::input_norm(0.0)).unwrap();
        assert_eq!(m.fired(), 36);
        assert_eq!(
            input_norm_gate(&zero, &layer, &GateConfig::input_norm(0.0))
                .unwrap()
                .fired(),
            36
        );

        let mut one = Tensor::zeros(1, 6, 6);
        one.set(0, 3, 2, 1.0);
        let m = input_norm_gate(&one, &layer, &GateConfig::input_norm(0.5)).unwrap();
        assert_eq!(m.fired(), 9);
        for y in 0..6 {
            for x in 0..6 {
                let near = (y as isize - 3).abs() <= 1 && (x as isize - 2).abs() <= 1;
                assert_eq!(m.get(y, x), near);
            }
        }
    }

    #[test]
    fn output_norm_examples() {
        let layer = layer3(vec![0.5, -0.25, 0.0, 0.25, 0.0, 0.5, 0.0, -0.25, 0.25]);
        assert_eq!(layer.weight_l1(), 2.0);
        let zero = Tensor::zeros(1, 5, 5);
        assert_eq!(
            output_norm_gate(&zero, &layer, &GateConfig::output_norm(1e-6))
                .unwrap()
                .fired(),
            0
        );
        let r = pseudo_random(1, 5, 5, 9);
        let dead = layer3(vec![0.0; 9]);
        assert_eq!(
            output_norm_gate(&r, &dead, &GateConfig::output_norm(1e-6))
                .unwrap()
                .fired(),
            0
        );

        // support norm 0.4 at the centre only
        let mut r = Tensor::zeros(1, 5, 5);
        r.set(0, 2, 2, 0.4);
        let fires = output_norm_gate(&r, &layer, &GateConfig::output_norm(0.5)).unwrap();
        assert!(fires.get(2, 2));
        let quiet = output_norm_gate(&r, &layer, &GateConfig::output_norm(1.0)).unwrap();
        assert!(!quiet.get(2, 2));
        assert_eq!(quiet.fired(), 0);
    }

    #[test]
    fn threshold_half_point_fires() {
        let layer = layer3(vec![1.0; 9]);
        let mut r = Tensor::zeros(1, 3, 3);
        r.set(0, 1, 1, 0.25);
        let m = input_norm_gate(&r, &layer, &GateConfig::input_norm(0.25)).unwrap();
        assert_eq!(m.fired(), 9);
    }

    #[test]
    fn dispatch_matches_sequential_composition() {
        let g = ConvGeometry::same(3);
        let w: Vec<f32> = pseudo_random(4, 3, 9, 1).into_data();
        let layer = ConvLayerSpec::new(4, 3, g, w.iter().map(|v| v * 1e-3).collect()).unwrap();
        let r = pseudo_random(3, 16, 16, 5).map(|v| v * 1e-2);
        for b in [1, 2, 4, 8] {
            let cfg = GateConfig::output_norm(15e-5).with_block(b);
            let direct = gate(&r, &layer, &cfg).unwrap();
            let seq = structure_mask(&output_norm_gate(&r, &layer, &cfg).unwrap(), b);
            assert_eq!(direct, seq);
        }
        let all = gate(&r, &layer, &GateConfig::all_ones()).unwrap();
        assert_eq!(all.fired(), 256);
        let zero = Tensor::zeros(3, 16, 16);
        assert_eq!(gate(&zero, &layer, &GateConfig::input_norm(1e-2)).unwrap().fired(), 0);
    }

    #[test]
    fn weight_norm_cached_at_build() {
        let layer = layer3(vec![-1.0; 9]);
        let g = OutputNormGate::new(&GateConfig::output_norm(0.1), &layer).unwrap();
        assert_eq!(g.weight_l1(), 9.0);
    }

    #[test]
    fn wrong_variant_rejected() {
        let layer = layer3(vec![1.0; 9]);
        let r = Tensor::zeros(1, 3, 3);
        assert!(input_norm_gate(&r, &layer, &GateConfig::output_norm(0.1)).is_err());
        assert!(output_norm_gate(&r, &layer, &GateConfig::input_norm(0.1)).is_err());
        assert!(input_norm_gate(&Tensor::zeros(2, 3, 3), &layer, &GateConfig::input_norm(0.1)).is_err());
    }

    #[test]
    fn mask_uses_layer_stride() {
        let mut g = ConvGeometry::same(3);
        g.stride = (2, 2);
        let layer = ConvLayerSpec::new(1, 1, g, vec![1.0; 9]).unwrap();
        let r = pseudo_random(1, 9, 9, 2);
        let m = input_norm_gate(&r, &layer, &GateConfig::input_norm(1.0)).unwrap();
        assert_eq!((m.height(), m.width()), (5, 5));
        let n = l1_norm_over_support(&r, &layer).unwrap();
        for (i, &v) in m.values().iter().enumerate() {
            assert_eq!(v, n.data()[i] >= 1.0);
        }
    }
}
