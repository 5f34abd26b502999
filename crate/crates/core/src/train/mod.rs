//! Learning Gumbel gate parameters.
//!
//! A training clip is unrolled exactly like the skip engine: a dense
//! reference frame, then gated residual updates. Gates are sampled with
//! binary Gumbel noise; the forward pass uses hard samples and gradients flow
//! through the relaxed sigmoid. The objective is
//! `task + beta * sum_l m_l E[g_l]`, with `m_l` the normalized dense MACs.

mod autodiff;
mod gumbel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{normalize_macs, MacReport, Network, SkipEngine};
use crate::error::{Error, Result};
use crate::gates::{gumbel_logits, GateConfig, GumbelParams};
use crate::io::{gen_synthetic, SceneSpec};
use crate::tensor::{l1_norm_over_support, Activation, Tensor};

pub use autodiff::{Gradients, StraightThroughMode, Tape, Value, Var};
pub use gumbel::{sample_gate_train, GumbelNoise, GumbelSample, TEMPERATURE};

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Frames with per-frame regression targets (e.g. heatmaps).
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub frames: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl TrainClip {
    pub fn new(frames: Vec<Tensor>, targets: Vec<Tensor>) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptySequence)?;
        if frames.len() != targets.len() {
            return Err(Error::Invalid(format!(
                "{} frames but {} targets",
                frames.len(),
                targets.len()
            )));
        }
        for f in &frames {
            if f.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    left: first.shape(),
                    right: f.shape(),
                });
            }
        }
        for t in &targets {
            if t.shape() != targets[0].shape() {
                return Err(Error::ShapeMismatch {
                    left: targets[0].shape(),
                    right: t.shape(),
                });
            }
        }
        Ok(Self { frames, targets })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn window(&self, start: usize, len: usize) -> TrainClip {
        TrainClip {
            frames: self.frames[start..start + len].to_vec(),
            targets: self.targets[start..start + len].to_vec(),
        }
    }
}

/// `count` synthetic clips with heatmap targets; clip `i` uses seed `seed + i`.
pub fn synthetic_clips(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<TrainClip>> {
    (0..count as u64)
        .map(|i| {
            let v = gen_synthetic(spec, seed.wrapping_add(i))?;
            TrainClip::new(v.frames.into_frames(), v.heatmaps)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the MAC-weighted gate loss.
    pub beta: f64,
    /// Frames per unrolled window; the first is the dense reference.
    pub clip_length: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Windows averaged per step.
    pub batch_clips: usize,
    pub seed: u64,
    /// Also update the convolution weights. Off by default.
    pub co_train_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            clip_length: 4,
            learning_rate: 0.5,
            momentum: 0.9,
            steps: 150,
            batch_clips: 2,
            seed: 0,
            co_train_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_length < 2 {
            return Err(Error::ClipTooShort(self.clip_length));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        check_optimizer(self.learning_rate, self.momentum, self.batch_clips)
    }
}

fn check_optimizer(lr: f64, momentum: f64, batch: usize) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Invalid(format!("learning rate must be > 0, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Invalid(format!("momentum must be in [0, 1), got {momentum}")));
    }
    if batch == 0 {
        return Err(Error::Invalid("batch must hold at least one clip".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTrainConfig {
    pub clip_length: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_clips: usize,
    pub seed: u64,
}

impl Default for DenseTrainConfig {
    fn default() -> Self {
        Self {
            clip_length: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 300,
            batch_clips: 2,
            seed: 0,
        }
    }
}

/// One optimizer step's averaged losses.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub task_loss: f64,
    /// Gate loss from hard samples.
    pub gate_loss: f64,
    /// Gate loss from `sigmoid(logit)` without noise.
    pub gate_loss_soft: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct GateTraining {
    /// Input network with trained gumbel gates installed on every layer.
    pub network: Network,
    pub phis: Vec<GumbelParams>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug)]
pub struct DenseTraining {
    pub network: Network,
    /// Task loss per step.
    pub curve: Vec<f64>,
}

/// Pre-drawn noise for every gated frame and layer of one window:
/// `diffs[t - 1][l]` holds `g1 - g2` per output position.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNoise {
    pub diffs: Vec<Vec<Vec<f64>>>,
}

impl FrozenNoise {
    pub fn draw(net: &Network, frame_shape: (usize, usize, usize), frames: usize, rng: &mut impl Rng) -> Result<Self> {
        let sizes = Self::sizes(net, frame_shape)?;
        let diffs = (1..frames.max(1))
            .map(|_| sizes.iter().map(|&n| GumbelNoise::draw(n, rng).difference()).collect())
            .collect();
        Ok(Self { diffs })
    }

    pub fn zeros(net: &Network, frame_shape: (usize, usize, usize), frames: usize) -> Result<Self> {
        let sizes = Self::sizes(net, frame_shape)?;
        let diffs = (1..frames.max(1))
            .map(|_| sizes.iter().map(|&n| vec![0.0; n]).collect())
            .collect();
        Ok(Self { diffs })
    }

    fn sizes(net: &Network, frame_shape: (usize, usize, usize)) -> Result<Vec<usize>> {
        Ok(net
            .layer_shapes(frame_shape)?
            .iter()
            .map(|&(_, h, w)| h * w)
            .collect())
    }
}

/// Trainable values in `f64`.
#[derive(Clone, Debug)]
struct Params {
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    pw: Vec<Vec<f64>>,
    pb: Vec<f64>,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Params {
    fn new(net: &Network, phis: &[GumbelParams]) -> Self {
        let layers = net.layers();
        Self {
            w: layers.iter().map(|l| to_f64(&l.conv.weights)).collect(),
            b: layers
                .iter()
                .map(|l| match &l.conv.bias {
                    Some(b) => to_f64(b),
                    None => vec![0.0; l.conv.out_channels],
                })
                .collect(),
            pw: phis.iter().map(|p| to_f64(&p.weights)).collect(),
            pb: phis.iter().map(|p| p.bias as f64).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: self.w.iter().map(|v| vec![0.0; v.len()]).collect(),
            b: self.b.iter().map(|v| vec![0.0; v.len()]).collect(),
            pw: self.pw.iter().map(|v| vec![0.0; v.len()]).collect(),
            pb: vec![0.0; self.pb.len()],
        }
    }

    fn phis(&self) -> Vec<GumbelParams> {
        self.pw
            .iter()
            .zip(&self.pb)
            .map(|(w, &b)| GumbelParams::new(to_f32(w), b as f32))
            .collect()
    }

    /// `net` with this set's conv weights and gumbel gates.
    fn apply(&self, net: &Network, weights: bool) -> Result<Network> {
        let mut out = net.clone();
        for (i, (l, phi)) in out.layers_mut().iter_mut().zip(self.phis()).enumerate() {
            if weights {
                l.conv.weights = to_f32(&self.w[i]);
                if l.conv.bias.is_some() {
                    l.conv.bias = Some(to_f32(&self.b[i]));
                }
            }
            l.gate = GateConfig::gumbel(phi);
        }
        Network::new(out.layers().to_vec())
    }
}

fn sgd(param: &mut [f64], vel: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn value_of(t: &Tensor) -> Value {
    Value::new(t.shape(), to_f64(t.data()))
}

struct ClipGraph {
    tape: Tape,
    w: Vec<Var>,
    b: Vec<Var>,
    pw: Vec<Var>,
    pb: Vec<Var>,
    task: Var,
    gate: Option<Var>,
    loss: Var,
    gate_soft: f64,
}

/// Unrolls `clip` on a tape. Without `noise` every frame is dense.
fn build_clip(
    net: &Network,
    p: &Params,
    clip: &TrainClip,
    noise: Option<&FrozenNoise>,
    beta: f64,
    mode: StraightThroughMode,
) -> Result<ClipGraph> {
    let shape = clip.frames[0].shape();
    let coeffs = normalize_macs(&net.dense_macs(shape)?);
    let mut tape = Tape::new();
    let layers = net.layers();
    let mut w = Vec::with_capacity(layers.len());
    let mut b = Vec::with_capacity(layers.len());
    let mut pw = Vec::with_capacity(layers.len());
    let mut pb = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let c = &l.conv;
        w.push(tape.leaf(Value::new((c.out_channels, c.receptive_len(), 1), p.w[i].clone())));
        b.push(tape.leaf(Value::new((c.out_channels, 1, 1), p.b[i].clone())));
        if noise.is_some() {
            pw.push(tape.leaf(Value::new((1, c.receptive_len(), 1), p.pw[i].clone())));
            pb.push(tape.leaf(Value::scalar(p.pb[i])));
        }
    }
    if let Some(n) = noise {
        if n.diffs.len() + 1 < clip.len() || n.diffs.iter().any(|d| d.len() != layers.len()) {
            return Err(Error::Invalid("frozen noise does not cover the clip".into()));
        }
    }

    let mut prev_in: Vec<Var> = Vec::new();
    let mut prev_z: Vec<Var> = Vec::new();
    let mut task_terms = Vec::with_capacity(clip.len());
    let mut gate_terms = Vec::new();
    let mut gate_soft = 0.0;
    for (t, (frame, target)) in clip.frames.iter().zip(&clip.targets).enumerate() {
        let mut x = tape.leaf(value_of(frame));
        let gated = noise.filter(|_| t > 0);
        let mut frame_gate = None;
        for (i, l) in layers.iter().enumerate() {
            let geom = l.conv.geometry;
            let z = match gated {
                None => tape.conv(x, w[i], Some(b[i]), geom),
                Some(n) => {
                    let r = tape.sub(x, prev_in[i]);
                    let logits = tape.conv(r, pw[i], Some(pb[i]), geom);
                    let support = support_indicator(tape.value(r), &geom);
                    let diffs = &n.diffs[t - 1][i];
                    if diffs.len() != support.len() {
                        return Err(Error::Invalid("frozen noise does not match layer grid".into()));
                    }
                    let g = tape.straight_through(logits, diffs, TEMPERATURE, mode);
                    let g = tape.mul_const(g, support.clone());
                    let lv = &tape.value(logits).data;
                    let soft: f64 = lv
                        .iter()
                        .zip(&support)
                        .map(|(&v, m)| m / (1.0 + (-v).exp()))
                        .sum::<f64>()
                        / lv.len() as f64;
                    gate_soft += coeffs[i] * soft;
                    let eg = tape.mean(g);
                    let eg = tape.scale(eg, coeffs[i]);
                    frame_gate = Some(match frame_gate {
                        None => eg,
                        Some(acc) => tape.add(acc, eg),
                    });
                    let d = tape.conv(r, w[i], None, geom);
                    let gd = tape.channel_broadcast_mul(d, g);
                    tape.add(prev_z[i], gd)
                }
            };
            let a = match l.conv.activation {
                Activation::Relu => tape.relu(z),
                Activation::Identity => z,
            };
            if t == 0 || gated.is_some() {
                if prev_in.len() <= i {
                    prev_in.push(x);
                    prev_z.push(z);
                } else {
                    prev_in[i] = x;
                    prev_z[i] = z;
                }
            }
            x = a;
        }
        if let Some(fg) = frame_gate {
            gate_terms.push(fg);
        }
        let y = tape.leaf(value_of(target));
        if tape.value(y).shape != tape.value(x).shape {
            return Err(Error::ShapeMismatch {
                left: tape.value(x).shape,
                right: tape.value(y).shape,
            });
        }
        let diff = tape.sub(x, y);
        let sq = tape.mul(diff, diff);
        task_terms.push(tape.mean(sq));
    }
    let task = mean_of(&mut tape, &task_terms);
    let gate = (!gate_terms.is_empty()).then(|| mean_of(&mut tape, &gate_terms));
    let loss = match gate {
        Some(g) if beta != 0.0 => {
            let bg = tape.scale(g, beta);
            tape.add(task, bg)
        }
        _ => task,
    };
    Ok(ClipGraph {
        tape,
        w,
        b,
        pw,
        pb,
        task,
        gate,
        loss,
        gate_soft: gate_soft / gate_terms.len().max(1) as f64,
    })
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// 1 where any residual value in the receptive field is non-zero.
fn support_indicator(r: &Value, geom: &crate::tensor::ConvGeometry) -> Vec<f64> {
    let (c, h, w) = r.shape;
    let abs = Value::new((c, h, w), r.data.iter().map(|v| v.abs()).collect());
    let ones = vec![1.0; c * geom.kernel.0 * geom.kernel.1];
    autodiff::conv_forward(&abs, &ones, None, 1, geom)
        .data
        .into_iter()
        .map(|s| if s > 0.0 { 1.0 } else { 0.0 })
        .collect()
}

/// Losses and parameter gradients of the gated objective on one clip.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub task_loss: f64,
    pub gate_loss: f64,
    /// Per layer, gate-kernel gradients followed by the gate-bias gradient.
    pub phi_grad: Vec<Vec<f64>>,
    pub task_phi_grad: Vec<Vec<f64>>,
    pub gate_phi_grad: Vec<Vec<f64>>,
}

fn phi_grads(g: &ClipGraph, grads: &Gradients, p: &Params) -> Vec<Vec<f64>> {
    g.pw.iter()
        .zip(&g.pb)
        .zip(&p.pw)
        .map(|((&w, &b), pw)| {
            let mut v = grads.get_or_zero(w, pw.len());
            v.extend(grads.get_or_zero(b, 1));
            v
        })
        .collect()
}

/// Evaluates `task + beta * gate` on `clip` with fixed noise and returns its
/// gradient w.r.t. the gate parameters, split into task and gate parts.
pub fn clip_objective(
    net: &Network,
    phis: &[GumbelParams],
    clip: &TrainClip,
    noise: &FrozenNoise,
    beta: f64,
    mode: StraightThroughMode,
) -> Result<ObjectiveEval> {
    check_phis(net, phis)?;
    if clip.len() < 2 {
        return Err(Error::ClipTooShort(clip.len()));
    }
    let p = Params::new(net, phis);
    let g = build_clip(net, &p, clip, Some(noise), beta, mode)?;
    let gate_var = g.gate.expect("gated clip has a gate term");
    let task_phi_grad = phi_grads(&g, &g.tape.backward(g.task), &p);
    let gate_phi_grad = phi_grads(&g, &g.tape.backward(gate_var), &p);
    let phi_grad = task_phi_grad
        .iter()
        .zip(&gate_phi_grad)
        .map(|(t, q)| t.iter().zip(q).map(|(a, b)| a + beta * b).collect())
        .collect();
    Ok(ObjectiveEval {
        loss: g.tape.value(g.loss).item(),
        task_loss: g.tape.value(g.task).item(),
        gate_loss: g.tape.value(gate_var).item(),
        phi_grad,
        task_phi_grad,
        gate_phi_grad,
    })
}

fn check_phis(net: &Network, phis: &[GumbelParams]) -> Result<()> {
    if phis.len() != net.len() {
        return Err(Error::GateConfig(format!(
            "{} gate parameter sets for {} layers",
            phis.len(),
            net.len()
        )));
    }
    for (l, phi) in net.layers().iter().zip(phis) {
        phi.as_layer(&l.conv)?;
    }
    Ok(())
}

fn check_clips(clips: &[TrainClip], clip_length: usize) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(short) = clips.iter().find(|c| c.len() < clip_length) {
        return Err(Error::ClipTooShort(short.len()));
    }
    Ok(())
}

fn pick_window(clips: &[TrainClip], len: usize, rng: &mut impl Rng) -> TrainClip {
    let clip = &clips[rng.gen_range(0..clips.len())];
    let start = rng.gen_range(0..=clip.len() - len);
    clip.window(start, len)
}

/// Trains every layer's gate from `GumbelParams::initial`.
pub fn train_gates(net: &Network, clips: &[TrainClip], cfg: &TrainConfig) -> Result<GateTraining> {
    let phis: Vec<GumbelParams> = net.layers().iter().map(|l| GumbelParams::initial(&l.conv)).collect();
    train_gates_from(net, &phis, clips, cfg)
}

pub fn train_gates_from(
    net: &Network,
    phis: &[GumbelParams],
    clips: &[TrainClip],
    cfg: &TrainConfig,
) -> Result<GateTraining> {
    cfg.validate()?;
    check_phis(net, phis)?;
    check_clips(clips, cfg.clip_length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = Params::new(net, phis);
    let mut vel = p.zeros_like();
    let mut curve = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_clips as f64;
    for step in 0..cfg.steps {
        let mut grad = p.zeros_like();
        let mut point = CurvePoint {
            step,
            task_loss: 0.0,
            gate_loss: 0.0,
            gate_loss_soft: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.batch_clips {
            let clip = pick_window(clips, cfg.clip_length, &mut rng);
            let noise = FrozenNoise::draw(net, clip.frames[0].shape(), clip.len(), &mut rng)?;
            let g = build_clip(net, &p, &clip, Some(&noise), cfg.beta, StraightThroughMode::Hard)?;
            let grads = g.tape.backward(g.loss);
            for i in 0..net.len() {
                add_scaled(&mut grad.pw[i], &grads.get_or_zero(g.pw[i], p.pw[i].len()), scale);
                grad.pb[i] += scale * grads.get_or_zero(g.pb[i], 1)[0];
                if cfg.co_train_weights {
                    add_scaled(&mut grad.w[i], &grads.get_or_zero(g.w[i], p.w[i].len()), scale);
                    add_scaled(&mut grad.b[i], &grads.get_or_zero(g.b[i], p.b[i].len()), scale);
                }
            }
            point.task_loss += scale * g.tape.value(g.task).item();
            point.gate_loss += scale * g.gate.map_or(0.0, |v| g.tape.value(v).item());
            point.gate_loss_soft += scale * g.gate_soft;
            point.total += scale * g.tape.value(g.loss).item();
        }
        if !point.total.is_finite() || point.total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                loss: point.total,
            });
        }
        for i in 0..net.len() {
            sgd(&mut p.pw[i], &mut vel.pw[i], &grad.pw[i], cfg.learning_rate, cfg.momentum);
            let (mut pb, mut vb) = ([p.pb[i]], [vel.pb[i]]);
            sgd(&mut pb, &mut vb, &[grad.pb[i]], cfg.learning_rate, cfg.momentum);
            (p.pb[i], vel.pb[i]) = (pb[0], vb[0]);
            if cfg.co_train_weights {
                sgd(&mut p.w[i], &mut vel.w[i], &grad.w[i], cfg.learning_rate, cfg.momentum);
                if net.layers()[i].conv.bias.is_some() {
                    sgd(&mut p.b[i], &mut vel.b[i], &grad.b[i], cfg.learning_rate, cfg.momentum);
                }
            }
        }
        curve.push(point);
    }
    if p.pw.iter().flatten().chain(&p.pb).any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: f64::NAN,
        });
    }
    Ok(GateTraining {
        network: p.apply(net, cfg.co_train_weights)?,
        phis: p.phis(),
        curve,
    })
}

/// Fits the convolution weights for per-frame dense inference.
pub fn train_dense(net: &Network, clips: &[TrainClip], cfg: &DenseTrainConfig) -> Result<DenseTraining> {
    if cfg.clip_length == 0 {
        return Err(Error::ClipTooShort(0));
    }
    check_optimizer(cfg.learning_rate, cfg.momentum, cfg.batch_clips)?;
    check_clips(clips, cfg.clip_length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = Params::new(net, &[]);
    let mut vel = p.zeros_like();
    let mut curve = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_clips as f64;
    for step in 0..cfg.steps {
        let mut grad = p.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_clips {
            let clip = pick_window(clips, cfg.clip_length, &mut rng);
            let g = build_clip(net, &p, &clip, None, 0.0, StraightThroughMode::Hard)?;
            let grads = g.tape.backward(g.loss);
            for i in 0..net.len() {
                add_scaled(&mut grad.w[i], &grads.get_or_zero(g.w[i], p.w[i].len()), scale);
                add_scaled(&mut grad.b[i], &grads.get_or_zero(g.b[i], p.b[i].len()), scale);
            }
            loss += scale * g.tape.value(g.loss).item();
        }
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss });
        }
        for i in 0..net.len() {
            sgd(&mut p.w[i], &mut vel.w[i], &grad.w[i], cfg.learning_rate, cfg.momentum);
            if net.layers()[i].conv.bias.is_some() {
                sgd(&mut p.b[i], &mut vel.b[i], &grad.b[i], cfg.learning_rate, cfg.momentum);
            }
        }
        curve.push(loss);
    }
    let mut out = net.clone();
    for (i, l) in out.layers_mut().iter_mut().enumerate() {
        l.conv.weights = to_f32(&p.w[i]);
        if l.conv.bias.is_some() {
            l.conv.bias = Some(to_f32(&p.b[i]));
        }
    }
    Ok(DenseTraining {
        network: Network::new(out.layers().to_vec())?,
        curve,
    })
}

/// MAC-weighted mean firing probability over the non-reference frames of
/// `report`.
pub fn gate_loss(report: &MacReport) -> Result<f64> {
    report.gate_loss()
}

/// Inference-time behaviour of a gated network on held-out clips.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Mean squared error of the skip engine's outputs.
    pub task_loss: f64,
    /// Same error for per-frame dense inference.
    pub dense_task_loss: f64,
    /// Every clip's frames; each clip starts with a reference frame.
    pub report: MacReport,
    /// Per layer, mean `sigmoid(logit)` over the positions of non-reference
    /// frames (zero where the residual support is empty). `None` for layers
    /// without a gumbel gate.
    pub expected_fire_rates: Vec<Option<f64>>,
}

impl EvalReport {
    /// Per-layer firing probability over non-reference frames.
    pub fn fire_rates(&self) -> Vec<f64> {
        self.report.firing_probability().unwrap_or_default()
    }

    pub fn mean_fire_rate(&self) -> f64 {
        let r = self.fire_rates();
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }

    /// Mean of the expected fire rates of the gumbel layers.
    pub fn mean_expected_fire_rate(&self) -> Option<f64> {
        let r: Vec<f64> = self.expected_fire_rates.iter().flatten().copied().collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64
}

fn expected_fire(r: &Tensor, layer: &crate::engine::Layer) -> Result<Option<f64>> {
    let Some(phi) = &layer.gate.phi else { return Ok(None) };
    let logits = gumbel_logits(r, &layer.conv, phi)?;
    let support = l1_norm_over_support(r, &layer.conv)?;
    let sum: f64 = logits
        .data()
        .iter()
        .zip(support.data())
        .filter(|(_, &s)| s > 0.0)
        .map(|(&l, _)| 1.0 / (1.0 + (-(l as f64)).exp()))
        .sum();
    Ok(Some(sum / logits.data().len() as f64))
}

pub fn evaluate(net: &Network, clips: &[TrainClip]) -> Result<EvalReport> {
    check_clips(clips, 1)?;
    let engine = SkipEngine::new(net.clone())?;
    let mut report = MacReport::new(net.dense_macs(clips[0].frames[0].shape())?);
    let (mut task, mut dense, mut n) = (0.0, 0.0, 0usize);
    let mut expected = vec![(0.0, 0usize); net.len()];
    for clip in clips {
        let mut stream = engine.stream();
        for (t, (frame, target)) in clip.frames.iter().zip(&clip.targets).enumerate() {
            let (out, fr) = if t == 0 {
                stream.reference(frame)?
            } else {
                let before: Vec<Tensor> = stream
                    .states()
                    .ok_or(Error::Uninitialized)?
                    .iter()
                    .map(|s| s.prev_input.clone())
                    .collect();
                let stepped = stream.step(frame)?;
                let after = stream.states().ok_or(Error::Uninitialized)?;
                for (i, (l, prev)) in net.layers().iter().zip(&before).enumerate() {
                    let r = after[i].prev_input.sub(prev)?;
                    if let Some(e) = expected_fire(&r, l)? {
                        expected[i].0 += e;
                        expected[i].1 += 1;
                    }
                }
                stepped
            };
            task += mse(&out, target);
            dense += mse(&net.dense_forward(frame)?, target);
            n += 1;
            report.push(fr);
        }
    }
    Ok(EvalReport {
        task_loss: task / n as f64,
        dense_task_loss: dense / n as f64,
        report,
        expected_fire_rates: expected
            .into_iter()
            .map(|(s, k)| (k > 0).then(|| s / k as f64))
            .collect(),
    })
}

/// One checked coordinate; `index == weights.len()` is the gate bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub layer: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

/// Relative error with an absolute floor, so two near-zero estimates agree.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `count` distinct `(layer, index)` gate-parameter coordinates.
pub fn sample_coordinates(phis: &[GumbelParams], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = phis
        .iter()
        .enumerate()
        .flat_map(|(l, p)| (0..p.len()).map(move |i| (l, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, all.len(), count.min(all.len()))
        .into_iter()
        .map(|i| all[i])
        .collect()
}

fn perturbed(phis: &[GumbelParams], layer: usize, index: usize, delta: f64) -> Vec<GumbelParams> {
    let mut out = phis.to_vec();
    let p = &mut out[layer];
    if index < p.weights.len() {
        p.weights[index] = (p.weights[index] as f64 + delta) as f32;
    } else {
        p.bias = (p.bias as f64 + delta) as f32;
    }
    out
}

/// Compares analytic gradients of the relaxed objective with central
/// differences of step `h` at the given coordinates.
///
/// Parameters are stored as `f32`, so the perturbation is applied to the
/// rounded value and the actual step is used in the quotient.
pub fn finite_difference_check(
    net: &Network,
    phis: &[GumbelParams],
    clip: &TrainClip,
    noise: &FrozenNoise,
    beta: f64,
    coords: &[(usize, usize)],
    h: f64,
) -> Result<GradCheck> {
    let mode = StraightThroughMode::Relaxed;
    let base = clip_objective(net, phis, clip, noise, beta, mode)?;
    let mut entries = Vec::with_capacity(coords.len());
    for &(layer, index) in coords {
        let len = phis.get(layer).map(GumbelParams::len).unwrap_or(0);
        if index >= len {
            return Err(Error::Invalid(format!("no gate parameter ({layer}, {index})")));
        }
        let plus = perturbed(phis, layer, index, h);
        let minus = perturbed(phis, layer, index, -h);
        let read = |p: &[GumbelParams]| {
            let q = &p[layer];
            if index < q.weights.len() {
                q.weights[index] as f64
            } else {
                q.bias as f64
            }
        };
        let step = read(&plus) - read(&minus);
        let lp = clip_objective(net, &plus, clip, noise, beta, mode)?.loss;
        let lm = clip_objective(net, &minus, clip, noise, beta, mode)?.loss;
        let numeric = (lp - lm) / step;
        let analytic = base.phi_grad[layer][index];
        entries.push(GradCheckEntry {
            layer,
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheck { entries, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvGeometry;

    fn scene() -> SceneSpec {
        SceneSpec {
            width: 16,
            height: 16,
            frames: 5,
            ..SceneSpec::default()
        }
    }

    fn net(widths: &[usize]) -> Network {
        Network::random(widths, ConvGeometry::same(3), GateConfig::all_ones(), 3).unwrap()
    }

    fn phis(net: &Network, bias: f32, seed: u64) -> Vec<GumbelParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        net.layers()
            .iter()
            .map(|l| {
                let w = (0..l.conv.receptive_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                GumbelParams::new(w, bias)
            })
            .collect()
    }

    #[test]
    fn straight_through_matches_relaxed_finite_differences() {
        let n = net(&[1, 1]);
        let clip = &synthetic_clips(&scene(), 1, 7).unwrap()[0];
        let p = phis(&n, 0.3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = FrozenNoise::draw(&n, clip.frames[0].shape(), clip.len(), &mut rng).unwrap();
        let coords = sample_coordinates(&p, 5, 11);
        assert_eq!(coords.len(), 5);
        let check = finite_difference_check(&n, &p, clip, &noise, 0.5, &coords, 1e-3).unwrap();
        assert!(check.max_rel_error <= 1e-2, "{:?}", check.entries);
        assert!(check.entries.iter().any(|e| e.analytic.abs() > 1e-4));
    }

    #[test]
    fn deep_net_gradient_check() {
        let n = net(&[1, 3, 1]);
        let clip = &synthetic_clips(&scene(), 1, 8).unwrap()[0];
        let p = phis(&n, 0.0, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = FrozenNoise::draw(&n, clip.frames[0].shape(), clip.len(), &mut rng).unwrap();
        let coords = sample_coordinates(&p, 8, 5);
        let check = finite_difference_check(&n, &p, clip, &noise, 1.0, &coords, 1e-3).unwrap();
        assert!(check.max_rel_error <= 1e-2, "{:?}", check.entries);
    }

    #[test]
    fn saturated_gate_has_vanishing_gradient() {
        let n = net(&[1, 1]);
        let clip = &synthetic_clips(&scene(), 1, 9).unwrap()[0];
        let mut p = phis(&n, 0.0, 1);
        p[0].weights.iter_mut().for_each(|w| *w = 0.0);
        p[0].bias = 40.0;
        let noise = FrozenNoise::zeros(&n, clip.frames[0].shape(), clip.len()).unwrap();
        let bias = p[0].weights.len();
        let check = finite_difference_check(&n, &p, clip, &noise, 1.0, &[(0, bias), (0, 4)], 1e-3).unwrap();
        for e in &check.entries {
            assert!(e.analytic.abs() < 1e-6 && e.numeric.abs() < 1e-6, "{e:?}");
        }
    }

    #[test]
    fn task_gradient_vanishes_when_output_ignores_gates() {
        let mut n = net(&[1, 1]);
        n.layers_mut()[0].conv.weights.iter_mut().for_each(|w| *w = 0.0);
        let clip = &synthetic_clips(&scene(), 1, 10).unwrap()[0];
        let p = phis(&n, 0.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = FrozenNoise::draw(&n, clip.frames[0].shape(), clip.len(), &mut rng).unwrap();
        let e = clip_objective(&n, &p, clip, &noise, 1.0, StraightThroughMode::Hard).unwrap();
        assert!(e.task_phi_grad.iter().flatten().all(|&g| g == 0.0));
        assert!(e.gate_phi_grad.iter().flatten().any(|&g| g.abs() > 1e-6));
        assert!((0.0..=1.0).contains(&e.gate_loss));
    }

    #[test]
    fn beta_zero_keeps_fire_rates() {
        let n = net(&[1, 4, 1]);
        let clips = synthetic_clips(&scene(), 3, 20).unwrap();
        let start: Vec<GumbelParams> = n.layers().iter().map(|l| GumbelParams::initial(&l.conv)).collect();
        let mut init = n.clone();
        for (l, p) in init.layers_mut().iter_mut().zip(&start) {
            l.gate = GateConfig::gumbel(p.clone());
        }
        let cfg = TrainConfig {
            beta: 0.0,
            steps: 30,
            ..TrainConfig::default()
        };
        let trained = train_gates(&n, &clips, &cfg).unwrap();
        let before = evaluate(&init, &clips).unwrap();
        let after = evaluate(&trained.network, &clips).unwrap();
        for (a, b) in before.fire_rates().iter().zip(after.fire_rates()) {
            assert!((a - b).abs() <= 0.1, "{a} vs {b}");
        }
        assert!(trained.curve.iter().all(|c| (0.0..=1.0).contains(&c.gate_loss)));
        assert!(trained.curve.iter().all(|c| c.total == c.task_loss));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let n = net(&[1, 2, 1]);
        let clips = synthetic_clips(&scene(), 2, 30).unwrap();
        let cfg = TrainConfig {
            beta: 1e-2,
            steps: 5,
            ..TrainConfig::default()
        };
        let a = train_gates(&n, &clips, &cfg).unwrap();
        let b = train_gates(&n, &clips, &cfg).unwrap();
        assert_eq!(a.phis, b.phis);
        assert_eq!(a.curve, b.curve);
        let c = train_gates(&n, &clips, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.curve, c.curve);
    }

    #[test]
    fn short_clips_and_bad_configs_rejected() {
        let n = net(&[1, 1]);
        let clips = synthetic_clips(&scene(), 1, 0).unwrap();
        let cfg = TrainConfig {
            clip_length: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train_gates(&n, &clips, &cfg), Err(Error::ClipTooShort(1))));
        let cfg = TrainConfig {
            clip_length: 6,
            ..TrainConfig::default()
        };
        assert!(matches!(train_gates(&n, &clips, &cfg), Err(Error::ClipTooShort(5))));
        let cfg = TrainConfig {
            beta: -1.0,
            ..TrainConfig::default()
        };
        assert!(train_gates(&n, &clips, &cfg).is_err());
        assert!(train_gates(&n, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let n = net(&[1, 4, 1]);
        let clips = synthetic_clips(&scene(), 1, 0).unwrap();
        let cfg = TrainConfig {
            co_train_weights: true,
            learning_rate: 1e4,
            steps: 50,
            ..TrainConfig::default()
        };
        assert!(matches!(train_gates(&n, &clips, &cfg), Err(Error::Diverged { .. })));
        let dcfg = DenseTrainConfig {
            learning_rate: 1e4,
            steps: 50,
            ..DenseTrainConfig::default()
        };
        assert!(matches!(train_dense(&n, &clips, &dcfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn dense_training_reduces_loss() {
        let n = net(&[1, 4, 1]);
        let clips = synthetic_clips(&scene(), 2, 40).unwrap();
        let cfg = DenseTrainConfig {
            steps: 60,
            ..DenseTrainConfig::default()
        };
        let t = train_dense(&n, &clips, &cfg).unwrap();
        assert!(t.curve.last().unwrap() < &(t.curve[0] * 0.5), "{:?}", t.curve);
        assert!(evaluate(&t.network, &clips).unwrap().dense_task_loss < evaluate(&n, &clips).unwrap().dense_task_loss);
    }

    #[test]
    fn all_ones_evaluation_matches_dense() {
        let n = net(&[1, 4, 1]);
        let clips = synthetic_clips(&scene(), 2, 50).unwrap();
        let e = evaluate(&n, &clips).unwrap();
        assert!((e.task_loss - e.dense_task_loss).abs() <= 1e-6 * e.dense_task_loss.max(1e-6));
        assert!(e.fire_rates().iter().all(|&r| r == 1.0));
        assert!(e.expected_fire_rates.iter().all(Option::is_none));
        assert_eq!(gate_loss(&e.report).unwrap(), 1.0);
    }
}
