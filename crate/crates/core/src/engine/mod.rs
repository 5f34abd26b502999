//! Stateful per-stream executor.
//!
//! For each layer the engine keeps the previous (post-activation) input and
//! the accumulated pre-activation output. A non-reference frame convolves
//! only the gated residual and adds it into the accumulator; skipped
//! positions keep their previous values. Bias enters the accumulator on
//! reference frames only since it cancels in the residual.

mod report;
mod sparse;

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gates::{Gate, GateConfig, GateRegistry};
use crate::tensor::{apply_activation, conv2d, Activation, ConvGeometry, ConvLayerSpec, Tensor};

pub use report::{normalize_macs, FrameReport, LayerFrameStats, MacReport};
pub use sparse::{sparse_conv, SparseOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub conv: ConvLayerSpec,
    pub gate: GateConfig,
}

/// Sequential chain of gated convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Geometry("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            l.conv.validate()?;
            l.gate.validate()?;
            if i > 0 && layers[i - 1].conv.out_channels != l.conv.in_channels {
                return Err(Error::Geometry(format!(
                    "layer {i} ({}) takes {} channels but layer {} produces {}",
                    l.conv.describe(),
                    l.conv.in_channels,
                    i - 1,
                    layers[i - 1].conv.out_channels
                )));
            }
        }
        Ok(Self { layers })
    }

    /// He-uniform random weights. `widths[0]` is the input channel count;
    /// hidden layers use relu and the last layer is linear.
    pub fn random(widths: &[usize], geometry: ConvGeometry, gate: GateConfig, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Geometry("need at least input and output widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = widths.len() - 1;
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let (ci, co) = (widths[i], widths[i + 1]);
            let fan_in = (ci * geometry.kernel.0 * geometry.kernel.1) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let weights = (0..co * fan_in as usize)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let bias = (0..co).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let activation = if i + 1 < depth {
                Activation::Relu
            } else {
                Activation::Identity
            };
            let conv = ConvLayerSpec::new(co, ci, geometry, weights)?
                .with_bias(bias)?
                .with_activation(activation);
            layers.push(Layer {
                conv,
                gate: gate.clone(),
            });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].conv.in_channels
    }

    /// Replace every layer's gate with `gate`.
    pub fn with_gate(&self, gate: &GateConfig) -> Result<Self> {
        gate.validate()?;
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                conv: l.conv.clone(),
                gate: gate.clone(),
            })
            .collect();
        Self::new(layers)
    }

    /// Output shape of every layer for an input of `shape`.
    pub fn layer_shapes(&self, shape: (usize, usize, usize)) -> Result<Vec<(usize, usize, usize)>> {
        let mut cur = shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            cur = l.conv.output_shape(cur)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// Dense multiply-accumulates per layer for one frame of `shape`.
    pub fn dense_macs(&self, shape: (usize, usize, usize)) -> Result<Vec<u64>> {
        Ok(self
            .layer_shapes(shape)?
            .iter()
            .zip(&self.layers)
            .map(|(&(_, h, w), l)| (h * w) as u64 * l.conv.macs_per_position())
            .collect())
    }

    /// Plain per-frame inference: conv, bias, activation for every layer.
    pub fn dense_forward(&self, frame: &Tensor) -> Result<Tensor> {
        let mut x = frame.clone();
        for l in &self.layers {
            x = apply_activation(&conv2d(&x, &l.conv)?, l.conv.activation);
        }
        Ok(x)
    }
}

/// Per-layer memory carried between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipState {
    /// This layer's input at the previous step (post-activation).
    pub prev_input: Tensor,
    /// Accumulated pre-activation output, bias included.
    pub prev_preact: Tensor,
    /// Frames since the last reference frame.
    pub frame_index: usize,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub output: Tensor,
    pub states: Vec<SkipState>,
    pub report: FrameReport,
}

/// A network with its gates instantiated.
pub struct SkipEngine {
    net: Network,
    gates: Vec<Box<dyn Gate>>,
}

impl fmt::Debug for SkipEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SkipEngine")
            .field("layers", &self.net.len())
            .finish()
    }
}

impl SkipEngine {
    pub fn new(net: Network) -> Result<Self> {
        Self::with_registry(net, &GateRegistry::with_builtins())
    }

    pub fn with_registry(net: Network, registry: &GateRegistry) -> Result<Self> {
        let gates = net
            .layers
            .iter()
            .map(|l| registry.build(&l.gate, &l.conv))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { net, gates })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Dense pass that (re)initializes every layer's state.
    pub fn reset_reference(&self, frame: &Tensor) -> Result<StepOutput> {
        self.check_input(frame)?;
        let mut x = frame.clone();
        let mut states = Vec::with_capacity(self.net.len());
        let mut layers = Vec::with_capacity(self.net.len());
        for l in &self.net.layers {
            let z = conv2d(&x, &l.conv)?;
            let positions = z.plane_len();
            let dense = positions as u64 * l.conv.macs_per_position();
            layers.push(LayerFrameStats {
                positions,
                fired: positions,
                dense_macs: dense,
                effective_macs: dense,
            });
            let next = apply_activation(&z, l.conv.activation);
            states.push(SkipState {
                prev_input: x,
                prev_preact: z,
                frame_index: 0,
            });
            x = next;
        }
        Ok(StepOutput {
            output: x,
            states,
            report: FrameReport {
                reference: true,
                layers,
            },
        })
    }

    /// Gated residual update of every layer. `states` is not modified; the
    /// updated states are returned.
    pub fn skip_step(&self, frame: &Tensor, states: &[SkipState]) -> Result<StepOutput> {
        if states.is_empty() {
            return Err(Error::Uninitialized);
        }
        if states.len() != self.net.len() {
            return Err(Error::Invalid(format!(
                "{} states for a {}-layer network",
                states.len(),
                self.net.len()
            )));
        }
        let expected = states[0].prev_input.shape();
        if frame.shape() != expected {
            return Err(Error::GeometryDrift {
                expected,
                actual: frame.shape(),
            });
        }
        let mut x = frame.clone();
        let mut new_states = Vec::with_capacity(self.net.len());
        let mut layers = Vec::with_capacity(self.net.len());
        for ((l, gate), st) in self.net.layers.iter().zip(&self.gates).zip(states) {
            let r = x.sub(&st.prev_input)?;
            let mask = gate.mask(&r)?;
            let sparse = sparse_conv(&r, &mask, &l.conv)?;
            let mut z = st.prev_preact.clone();
            sparse.scatter_add(&mut z)?;
            let positions = mask.len();
            layers.push(LayerFrameStats {
                positions,
                fired: sparse.len(),
                dense_macs: positions as u64 * l.conv.macs_per_position(),
                effective_macs: sparse.macs,
            });
            let next = apply_activation(&z, l.conv.activation);
            new_states.push(SkipState {
                prev_input: x,
                prev_preact: z,
                frame_index: st.frame_index + 1,
            });
            x = next;
        }
        Ok(StepOutput {
            output: x,
            states: new_states,
            report: FrameReport {
                reference: false,
                layers,
            },
        })
    }

    fn check_input(&self, frame: &Tensor) -> Result<()> {
        self.net.layer_shapes(frame.shape()).map(|_| ())
    }

    pub fn stream(&self) -> Stream<'_> {
        Stream {
            engine: self,
            states: None,
        }
    }
}

/// One video stream: owns the per-layer state for a single engine.
pub struct Stream<'e> {
    engine: &'e SkipEngine,
    states: Option<Vec<SkipState>>,
}

impl Stream<'_> {
    pub fn states(&self) -> Option<&[SkipState]> {
        self.states.as_deref()
    }

    pub fn reference(&mut self, frame: &Tensor) -> Result<(Tensor, FrameReport)> {
        let out = self.engine.reset_reference(frame)?;
        self.states = Some(out.states);
        Ok((out.output, out.report))
    }

    pub fn step(&mut self, frame: &Tensor) -> Result<(Tensor, FrameReport)> {
        let states = self.states.as_deref().ok_or(Error::Uninitialized)?;
        let out = self.engine.skip_step(frame, states)?;
        self.states = Some(out.states);
        Ok((out.output, out.report))
    }
}

/// How often a dense reference frame re-initializes the stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResetPeriod {
    /// Reference on frame 0, T, 2T, ...
    Every(NonZeroUsize),
    /// Reference on the first frame only.
    Never,
}

impl ResetPeriod {
    pub fn every(t: usize) -> Result<Self> {
        NonZeroUsize::new(t)
            .map(Self::Every)
            .ok_or_else(|| Error::Invalid("reset period must be >= 1".into()))
    }

    pub fn is_reference(self, index: usize) -> bool {
        match self {
            ResetPeriod::Every(t) => index % t.get() == 0,
            ResetPeriod::Never => index == 0,
        }
    }
}

impl fmt::Display for ResetPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResetPeriod::Every(t) => write!(f, "{t}"),
            ResetPeriod::Never => f.write_str("inf"),
        }
    }
}

impl FromStr for ResetPeriod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "never" | "∞" => Ok(ResetPeriod::Never),
            other => other
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad reset period `{s}`")))
                .and_then(Self::every),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StreamResult {
    pub outputs: Vec<Tensor>,
    pub report: MacReport,
}

/// Process `frames` in order, densely on reference frames and with gated
/// residual updates otherwise.
pub fn run_stream(engine: &SkipEngine, frames: &[Tensor], reset: ResetPeriod) -> Result<StreamResult> {
    let first = frames.first().ok_or(Error::EmptySequence)?;
    let mut report = MacReport::new(engine.network().dense_macs(first.shape())?);
    let mut outputs = Vec::with_capacity(frames.len());
    let mut stream = engine.stream();
    for (i, frame) in frames.iter().enumerate() {
        let (out, fr) = if reset.is_reference(i) {
            stream.reference(frame)?
        } else {
            stream.step(frame)?
        };
        outputs.push(out);
        report.push(fr);
    }
    Ok(StreamResult { outputs, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, relative_deviation};

    fn frame(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn net(gate: GateConfig) -> Network {
        Network::random(&[2, 4, 3], ConvGeometry::same(3), gate, 7).unwrap()
    }

    #[test]
    fn reference_matches_dense() {
        let e = SkipEngine::new(net(GateConfig::input_norm(0.1))).unwrap();
        let f = frame(1, 2, 8, 9);
        let out = e.reset_reference(&f).unwrap();
        assert_eq!(out.output, e.network().dense_forward(&f).unwrap());
        assert!(out.states.iter().all(|s| s.frame_index == 0));
        let again = e.reset_reference(&f).unwrap();
        assert_eq!(again.states, out.states);
    }

    #[test]
    fn dense_macs_closed_form() {
        let n = net(GateConfig::all_ones());
        let e = SkipEngine::new(n).unwrap();
        let out = e.reset_reference(&frame(2, 2, 8, 9)).unwrap();
        let macs: Vec<u64> = out.report.layers.iter().map(|l| l.dense_macs).collect();
        assert_eq!(macs, vec![4 * 2 * 9 * 72, 3 * 4 * 9 * 72]);
    }

    #[test]
    fn static_frame_costs_nothing() {
        let e = SkipEngine::new(net(GateConfig::input_norm(1e-2))).unwrap();
        let f = frame(3, 2, 8, 8);
        let r = e.reset_reference(&f).unwrap();
        let s = e.skip_step(&f, &r.states).unwrap();
        assert_eq!(s.output, r.output);
        assert_eq!(s.report.fired(), 0);
        assert_eq!(s.report.effective_macs(), 0);
        assert!(s.states.iter().all(|st| st.frame_index == 1));
    }

    #[test]
    fn all_ones_step_matches_dense() {
        let e = SkipEngine::new(net(GateConfig::all_ones())).unwrap();
        let a = frame(4, 2, 8, 8);
        let b = frame(5, 2, 8, 8);
        let r = e.reset_reference(&a).unwrap();
        let s = e.skip_step(&b, &r.states).unwrap();
        let dense = e.network().dense_forward(&b).unwrap();
        assert!(relative_deviation(&s.output, &dense).unwrap() <= 1e-4);
        assert_eq!(s.report.effective_macs(), s.report.dense_macs());
    }

    #[test]
    fn moving_pixel_fires_neighbourhood() {
        let conv = ConvLayerSpec::new(2, 1, ConvGeometry::same(3), vec![0.5; 18]).unwrap();
        let net = Network::new(vec![Layer {
            conv,
            gate: GateConfig::input_norm(1e-3),
        }])
        .unwrap();
        let e = SkipEngine::new(net).unwrap();
        let mut a = Tensor::zeros(1, 10, 10);
        a.set(0, 4, 4, 1.0);
        let mut b = Tensor::zeros(1, 10, 10);
        b.set(0, 4, 4, 1.0);
        b.set(0, 1, 7, 1.0);
        let r = e.reset_reference(&a).unwrap();
        let s = e.skip_step(&b, &r.states).unwrap();
        assert_eq!(s.report.layers[0].fired, 9);
        let dense = e.network().dense_forward(&b).unwrap();
        assert_eq!(max_abs_diff(&s.output, &dense).unwrap(), 0.0);
    }

    #[test]
    fn step_errors() {
        let e = SkipEngine::new(net(GateConfig::all_ones())).unwrap();
        assert!(matches!(
            e.skip_step(&frame(1, 2, 8, 8), &[]),
            Err(Error::Uninitialized)
        ));
        let r = e.reset_reference(&frame(1, 2, 8, 8)).unwrap();
        let err = e.skip_step(&frame(1, 2, 9, 8), &r.states).unwrap_err();
        assert!(err.to_string().contains("reference"), "{err}");
        let mut s = e.stream();
        assert!(matches!(s.step(&frame(1, 2, 8, 8)), Err(Error::Uninitialized)));
        assert!(run_stream(&e, &[], ResetPeriod::Never).is_err());
    }

    #[test]
    fn reset_period_parsing() {
        assert_eq!("inf".parse::<ResetPeriod>().unwrap(), ResetPeriod::Never);
        assert_eq!("8".parse::<ResetPeriod>().unwrap(), ResetPeriod::every(8).unwrap());
        assert!("0".parse::<ResetPeriod>().is_err());
        let p = ResetPeriod::every(4).unwrap();
        let refs: Vec<usize> = (0..10).filter(|&i| p.is_reference(i)).collect();
        assert_eq!(refs, vec![0, 4, 8]);
    }

    #[test]
    fn network_rejects_channel_gap() {
        let a = ConvLayerSpec::new(3, 1, ConvGeometry::same(1), vec![1.0; 3]).unwrap();
        let b = ConvLayerSpec::new(1, 2, ConvGeometry::same(1), vec![1.0; 2]).unwrap();
        let g = GateConfig::all_ones();
        assert!(Network::new(vec![
            Layer { conv: a, gate: g.clone() },
            Layer { conv: b, gate: g },
        ])
        .is_err());
    }
}
