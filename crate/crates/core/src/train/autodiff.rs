//! Minimal reverse-mode differentiation over the ops the trainer needs.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order. Values are `f64` so finite-difference
//! checks are not swamped by rounding.

use crate::tensor::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Planar `channels x height x width` values; scalars are `1x1x1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    pub shape: (usize, usize, usize),
    pub data: Vec<f64>,
}

impl Value {
    pub fn new(shape: (usize, usize, usize), data: Vec<f64>) -> Self {
        assert_eq!(shape.0 * shape.1 * shape.2, data.len(), "value shape/data mismatch");
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new((1, 1, 1), vec![v])
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self::new(shape, vec![0.0; shape.0 * shape.1 * shape.2])
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Forward value of the straight-through node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StraightThroughMode {
    /// Binary sample forward, relaxed gradient backward.
    Hard,
    /// Relaxed value forward and backward; used for gradient checks.
    Relaxed,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (c x h x w) * g (1 x h x w)` broadcast over channels.
    ChannelBroadcastMul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Mean(Var),
    /// Stores the relaxed value's derivative w.r.t. the logits.
    StraightThrough { logits: Var, dsoft: Vec<f64> },
}

struct Node {
    value: Value,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn conv_output_dims(
    input: (usize, usize, usize),
    geom: &ConvGeometry,
) -> (usize, usize) {
    geom.output_size(input.1, input.2)
        .expect("conv geometry validated before taping")
}

/// Direct convolution; `w` is `c_out x (c_in*k_h*k_w)`.
pub(crate) fn conv_forward(
    x: &Value,
    w: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
    geom: &ConvGeometry,
) -> Value {
    let (cin, h, wd) = x.shape;
    let (oh, ow) = conv_output_dims(x.shape, geom);
    let (kh, kw) = geom.kernel;
    assert_eq!(w.len(), cout * cin * kh * kw, "conv weight length");
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        for ci in 0..cin {
            let src = &x.data[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                let ys = ConvGeometry::valid_outputs(ky, geom.stride.0, geom.padding.0, geom.dilation.0, h, oh);
                for kx in 0..kw {
                    let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let xs =
                        ConvGeometry::valid_outputs(kx, geom.stride.1, geom.padding.1, geom.dilation.1, wd, ow);
                    for oy in ys.clone() {
                        let iy = oy * geom.stride.0 + ky * geom.dilation.0 - geom.padding.0;
                        for ox in xs.clone() {
                            let ix = ox * geom.stride.1 + kx * geom.dilation.1 - geom.padding.1;
                            o[oy * ow + ox] += wv * src[iy * wd + ix];
                        }
                    }
                }
            }
        }
    }
    Value::new((cout, oh, ow), out)
}

/// Accumulates input, weight and bias gradients of a convolution.
fn conv_backward(
    x: &Value,
    w: &[f64],
    cout: usize,
    geom: &ConvGeometry,
    dz: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (cin, h, wd) = x.shape;
    let (oh, ow) = conv_output_dims(x.shape, geom);
    let (kh, kw) = geom.kernel;
    let plane = oh * ow;
    if let Some(db) = db {
        for co in 0..cout {
            db[co] += dz[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    for co in 0..cout {
        let g = &dz[co * plane..(co + 1) * plane];
        for ci in 0..cin {
            let src = &x.data[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                let ys = ConvGeometry::valid_outputs(ky, geom.stride.0, geom.padding.0, geom.dilation.0, h, oh);
                for kx in 0..kw {
                    let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                    let wv = w[wi];
                    let xs =
                        ConvGeometry::valid_outputs(kx, geom.stride.1, geom.padding.1, geom.dilation.1, wd, ow);
                    let mut acc = 0.0;
                    for oy in ys.clone() {
                        let iy = oy * geom.stride.0 + ky * geom.dilation.0 - geom.padding.0;
                        for ox in xs.clone() {
                            let ix = ox * geom.stride.1 + kx * geom.dilation.1 - geom.padding.1;
                            let gv = g[oy * ow + ox];
                            acc += gv * src[iy * wd + ix];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[ci * h * wd + iy * wd + ix] += gv * wv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Value) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `w` holds `c_out x c_in*k_h*k_w` weights (its shape's first entry is `c_out`).
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Var {
        let cout = self.value(w).shape.0;
        let value = {
            let bias = b.map(|b| self.value(b).data.as_slice());
            conv_forward(self.value(x), &self.value(w).data, bias, cout, &geom)
        };
        self.push(value, Op::Conv { x, w, b, geom })
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Value {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        Value::new(
            va.shape,
            va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn channel_broadcast_mul(&mut self, a: Var, g: Var) -> Var {
        let (va, vg) = (self.value(a), self.value(g));
        assert_eq!(vg.shape, (1, va.shape.1, va.shape.2), "broadcast gate shape");
        let plane = va.shape.1 * va.shape.2;
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * vg.data[i % plane])
            .collect();
        let v = Value::new(va.shape, data);
        self.push(v, Op::ChannelBroadcastMul(a, g))
    }

    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.data.len(), c.len(), "constant mask length");
        let v = Value::new(va.shape, va.data.iter().zip(&c).map(|(x, m)| x * m).collect());
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let v = Value::new(va.shape, va.data.iter().map(|x| x * s).collect());
        self.push(v, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Value::new(va.shape, va.data.iter().map(|&x| sigmoid(x)).collect());
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let v = Value::new(va.shape, va.data.iter().map(|&x| x.max(0.0)).collect());
        self.push(v, Op::Relu(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.data.iter().sum::<f64>() / va.data.len() as f64;
        self.push(Value::scalar(m), Op::Mean(a))
    }

    /// Binary Gumbel straight-through node over `logits`.
    ///
    /// With `u = (logit + noise) / tau`, the relaxed value is `sigmoid(u)` and
    /// the hard value is `1[u >= 0]`. The backward pass always uses the
    /// relaxed derivative.
    pub fn straight_through(
        &mut self,
        logits: Var,
        noise: &[f64],
        tau: f64,
        mode: StraightThroughMode,
    ) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.data.len(), noise.len(), "noise length");
        let mut value = Vec::with_capacity(noise.len());
        let mut dsoft = Vec::with_capacity(noise.len());
        for (&l, &n) in vl.data.iter().zip(noise) {
            let u = (l + n) / tau;
            let s = sigmoid(u);
            dsoft.push(s * (1.0 - s) / tau);
            value.push(match mode {
                StraightThroughMode::Hard => {
                    if u >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                StraightThroughMode::Relaxed => s,
            });
        }
        let v = Value::new(vl.shape, value);
        self.push(v, Op::StraightThrough { logits, dsoft })
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.data.len()]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let wv = &self.value(*w).data;
                    let cout = self.value(*w).shape.0;
                    let mut dx = vec![0.0; xv.data.len()];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = b.map(|_| vec![0.0; cout]);
                    conv_backward(xv, wv, cout, geom, &g, Some(&mut dx), Some(&mut dw), db.as_deref_mut());
                    add_into(acc(&mut grads, *x, dx.len()), &dx);
                    add_into(acc(&mut grads, *w, dw.len()), &dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        add_into(acc(&mut grads, *b, db.len()), &db);
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let ga = acc(&mut grads, *b, g.len());
                    for (d, gv) in ga.iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    let da: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    add_into(acc(&mut grads, *a, da.len()), &da);
                    add_into(acc(&mut grads, *b, db.len()), &db);
                }
                Op::ChannelBroadcastMul(a, gate) => {
                    let va = self.value(*a);
                    let vg = &self.value(*gate).data;
                    let plane = vg.len();
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * vg[i % plane])
                        .collect();
                    let mut dg = vec![0.0; plane];
                    for (i, (x, av)) in g.iter().zip(&va.data).enumerate() {
                        dg[i % plane] += x * av;
                    }
                    add_into(acc(&mut grads, *a, da.len()), &da);
                    add_into(acc(&mut grads, *gate, plane), &dg);
                }
                Op::MulConst(a, c) => {
                    let da: Vec<f64> = g.iter().zip(c).map(|(x, m)| x * m).collect();
                    add_into(acc(&mut grads, *a, da.len()), &da);
                }
                Op::Scale(a, s) => {
                    let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                    add_into(acc(&mut grads, *a, da.len()), &da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    let da: Vec<f64> = g.iter().zip(y).map(|(x, s)| x * s * (1.0 - s)).collect();
                    add_into(acc(&mut grads, *a, da.len()), &da);
                }
                Op::Relu(a) => {
                    let xa = &self.value(*a).data;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(xa)
                        .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                        .collect();
                    add_into(acc(&mut grads, *a, da.len()), &da);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).data.len();
                    let share = g[0] / n as f64;
                    let ga = acc(&mut grads, *a, n);
                    for d in ga.iter_mut() {
                        *d += share;
                    }
                }
                Op::StraightThrough { logits, dsoft } => {
                    let da: Vec<f64> = g.iter().zip(dsoft).map(|(x, d)| x * d).collect();
                    add_into(acc(&mut grads, *logits, da.len()), &da);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
