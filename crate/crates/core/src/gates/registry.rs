use std::collections::BTreeMap;
use std::fmt;

use super::{AllOnesGate, Gate, GateConfig, GateVariant, GumbelGate, InputNormGate, OutputNormGate};
use crate::error::{Error, Result};
use crate::tensor::ConvLayerSpec;

/// Builds a gate bound to one layer.
pub type GateFactory = fn(&GateConfig, &ConvLayerSpec) -> Result<Box<dyn Gate>>;

/// Gate strategies keyed by name.
///
/// [`GateRegistry::with_builtins`] registers one factory per [`GateVariant`]
/// under its canonical name. Registering under an existing name replaces it.
#[derive(Clone)]
pub struct GateRegistry {
    factories: BTreeMap<String, GateFactory>,
}

impl fmt::Debug for GateRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GateRegistry")
            .field("names", &self.names())
            .finish()
    }
}

impl Default for GateRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl GateRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(GateVariant::AllOnes.name(), |cfg, layer| {
            Ok(Box::new(AllOnesGate::new(cfg, layer)?))
        });
        reg.register(GateVariant::InputNorm.name(), |cfg, layer| {
            Ok(Box::new(InputNormGate::new(cfg, layer)?))
        });
        reg.register(GateVariant::OutputNorm.name(), |cfg, layer| {
            Ok(Box::new(OutputNormGate::new(cfg, layer)?))
        });
        reg.register(GateVariant::Gumbel.name(), |cfg, layer| {
            Ok(Box::new(GumbelGate::new(cfg, layer)?))
        });
        reg
    }

    pub fn register(&mut self, name: &str, factory: GateFactory) -> Option<GateFactory> {
        self.factories.insert(name.to_string(), factory)
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn build_named(
        &self,
        name: &str,
        cfg: &GateConfig,
        layer: &ConvLayerSpec,
    ) -> Result<Box<dyn Gate>> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::UnknownGate(name.to_string()))?;
        factory(cfg, layer)
    }

    /// Build the gate registered under `cfg.variant`'s name.
    pub fn build(&self, cfg: &GateConfig, layer: &ConvLayerSpec) -> Result<Box<dyn Gate>> {
        self.build_named(cfg.variant.name(), cfg, layer)
    }
}

#[cfg(test)]
mod tests {
    use super::super::GateMask;
    use super::*;
    use crate::tensor::{ConvGeometry, Tensor};

    struct Never;

    impl Gate for Never {
        fn variant(&self) -> GateVariant {
            GateVariant::AllOnes
        }
        fn block(&self) -> usize {
            1
        }
        fn raw_mask(&self, r: &Tensor) -> Result<GateMask> {
            Ok(GateMask::empty(r.height(), r.width()))
        }
    }

    fn layer() -> ConvLayerSpec {
        ConvLayerSpec::new(1, 1, ConvGeometry::new(1, 1), vec![1.0]).unwrap()
    }

    #[test]
    fn builtins_registered() {
        let reg = GateRegistry::with_builtins();
        for v in GateVariant::ALL {
            assert!(reg.contains(v.name()));
        }
        assert_eq!(reg.names().len(), 4);
        let g = reg.build(&GateConfig::input_norm(0.1), &layer()).unwrap();
        assert_eq!(g.variant(), GateVariant::InputNorm);
    }

    #[test]
    fn unknown_name() {
        let reg = GateRegistry::empty();
        assert!(matches!(
            reg.build(&GateConfig::all_ones(), &layer()),
            Err(Error::UnknownGate(_))
        ));
    }

    #[test]
    fn override_strategy() {
        let mut reg = GateRegistry::with_builtins();
        assert!(reg
            .register("all-ones", |_, _| Ok(Box::new(Never)))
            .is_some());
        let g = reg.build(&GateConfig::all_ones(), &layer()).unwrap();
        assert_eq!(g.mask(&Tensor::filled(1, 2, 2, 1.0)).unwrap().fired(), 0);
    }

    #[test]
    fn invalid_config_fails_build() {
        let reg = GateRegistry::with_builtins();
        assert!(reg
            .build(&GateConfig::output_norm(0.1).with_block(5), &layer())
            .is_err());
    }
}
