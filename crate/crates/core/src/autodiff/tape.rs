//! Reverse-mode autodiff over a per-forward recorded tape.
//!
//! A [`Tape`] records every operation of one forward pass into an arena of
//! nodes; [`Tape::backward`] replays the arena in reverse, accumulating
//! gradients by the chain rule. Parameters are leased from a [`ParamStore`]
//! either trainable ([`Tape::param`]) or frozen ([`Tape::frozen`]); frozen
//! leases are plain constants, which is how the minimax alternation keeps
//! one side's parameters out of the other side's update.

use std::collections::HashMap;

use crate::autodiff::store::ParamStore;
use crate::autodiff::tensor::{dims4, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Input constant or detached value.
    Constant,
    /// Trainable parameter leased from a store.
    Param { store_uid: u64, name: String },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, padding: usize },
    AvgPool2 { x: TensorId },
    Linear { x: TensorId, w: TensorId, b: TensorId },
    Act { x: TensorId, kind: Activation },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// y = mul * x + add elementwise; only the slope matters in backward.
    Affine { x: TensorId, mul: f64 },
    Abs { x: TensorId },
    Ln { x: TensorId },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    /// Sum of all elements, a scalar.
    Sum { x: TensorId },
    /// Per-row scaling of a leading-batch tensor by a length-N vector.
    RowScale { x: TensorId, w: TensorId },
    /// (n,c,h,w) -> (n,c) spatial mean.
    GlobalAvgPool { x: TensorId },
    /// (n,c,h,w) -> (n,c) spatial max; argmax saved for backward.
    GlobalMaxPool { x: TensorId, argmax: Vec<usize> },
    /// (n,c,h,w) -> (n,1,h,w) mean over channels.
    ChannelMean { x: TensorId },
    /// (n,c,h,w) -> (n,1,h,w) max over channels; argmax saved.
    ChannelMax { x: TensorId, argmax: Vec<usize> },
    /// x * gate with gate (n,c) broadcast over space.
    MulChannelGate { x: TensorId, gate: TensorId },
    /// x * gate with gate (n,1,h,w) broadcast over channels.
    MulSpatialGate { x: TensorId, gate: TensorId },
    ConcatChannel { a: TensorId, b: TensorId },
    Reshape { x: TensorId },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<(u64, String), TensorId>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, op });
        id
    }

    fn push_checked(&mut self, value: Tensor, op: Op, ctx: &'static str) -> Result<TensorId> {
        value.assert_finite(ctx)?;
        Ok(self.push(value, op))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last backward pass w.r.t. this node, if reached.
    pub fn grad_of(&self, id: TensorId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: &Tensor) -> Result<TensorId> {
        t.assert_finite("constant input")?;
        Ok(self.push(t.clone(), Op::Constant))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<TensorId> {
        self.constant(&Tensor::scalar(v))
    }

    /// Lease a trainable parameter. Repeat leases of the same parameter on
    /// one tape return the same node, so shared modules accumulate into a
    /// single gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        let key = (store.uid(), name.to_string());
        if let Some(&id) = self.param_cache.get(&key) {
            return Ok(id);
        }
        let value = store.value(name)?.clone();
        value.assert_finite(&format!("param '{name}'"))?;
        let id = self.push(value, Op::Param { store_uid: store.uid(), name: name.to_string() });
        self.param_cache.insert(key, id);
        Ok(id)
    }

    /// Lease a parameter as a constant: its value enters the graph but no
    /// gradient is ever produced for it.
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<TensorId> {
        self.constant(store.value(name)?)
    }

    /// Cut the graph: a constant copy of an existing node's value.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let value = self.nodes[id.0].value.clone();
        self.push(value, Op::Constant)
    }

    // ── Operations ──────────────────────────────────────────────────────

    /// 2-D convolution, NCHW input against OIKK square kernels.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        if stride == 0 {
            return Err(Error::Shape { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let xd = dims4("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("weight must be 4-D (out,in,k,k), got {ws:?}"),
            });
        }
        let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel must be square, got {kh}x{kw}"),
            });
        }
        if c_in != xd.c {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input channel dim is {}, weight expects {c_in}", xd.c),
            });
        }
        let bs = self.shape(b).to_vec();
        if bs != [c_out] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("bias shape {bs:?} != [{c_out}]"),
            });
        }
        if xd.h + 2 * padding < kh || xd.w + 2 * padding < kw {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!(
                    "spatial {}x{} with padding {padding} smaller than kernel {kh}",
                    xd.h, xd.w
                ),
            });
        }
        let h_out = (xd.h + 2 * padding - kh) / stride + 1;
        let w_out = (xd.w + 2 * padding - kw) / stride + 1;

        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; xd.n * c_out * h_out * w_out];
        for n in 0..xd.n {
            for o in 0..c_out {
                let bias = bv[o];
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = bias;
                        for c in 0..c_in {
                            let x_base = ((n * xd.c + c) * xd.h) * xd.w;
                            let w_base = ((o * c_in + c) * kh) * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= xd.h as isize {
                                    continue;
                                }
                                let x_row = x_base + iy as usize * xd.w;
                                let w_row = w_base + ky * kw;
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= xd.w as isize {
                                        continue;
                                    }
                                    acc += xv[x_row + ix as usize] * wv[w_row + kx];
                                }
                            }
                        }
                        out[((n * c_out + o) * h_out + oy) * w_out + ox] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![xd.n, c_out, h_out, w_out], out)?;
        self.push_checked(value, Op::Conv2d { x, w, b, stride, padding }, "conv2d")
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns drop.
    pub fn avgpool2(&mut self, x: TensorId) -> Result<TensorId> {
        let d = dims4("avgpool2", self.shape(x))?;
        if d.h < 2 || d.w < 2 {
            return Err(Error::Shape {
                op: "avgpool2",
                detail: format!("spatial extent {}x{} below 2x2 window", d.h, d.w),
            });
        }
        let (ho, wo) = (d.h / 2, d.w / 2);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; d.n * d.c * ho * wo];
        for n in 0..d.n {
            for c in 0..d.c {
                let base = ((n * d.c + c) * d.h) * d.w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let i0 = base + (2 * oy) * d.w + 2 * ox;
                        let i1 = base + (2 * oy + 1) * d.w + 2 * ox;
                        out[((n * d.c + c) * ho + oy) * wo + ox] =
                            0.25 * (xv[i0] + xv[i0 + 1] + xv[i1] + xv[i1 + 1]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![d.n, d.c, ho, wo], out)?;
        self.push_checked(value, Op::AvgPool2 { x }, "avgpool2")
    }

    /// Affine map y = x W^T + b with x (n,d_in), w (d_out,d_in), b (d_out).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("need 2-D input and weight, got {xs:?} and {ws:?}"),
            });
        }
        let (n, d_in) = (xs[0], xs[1]);
        let (d_out, wd_in) = (ws[0], ws[1]);
        if d_in != wd_in {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("input feature dim {d_in} != weight inner dim {wd_in}"),
            });
        }
        if bs != [d_out] {
            return Err(Error::Shape { op: "linear", detail: format!("bias {bs:?} != [{d_out}]") });
        }
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            let x_row = &xv[i * d_in..(i + 1) * d_in];
            for o in 0..d_out {
                let w_row = &wv[o * d_in..(o + 1) * d_in];
                let mut acc = bv[o];
                for k in 0..d_in {
                    acc += x_row[k] * w_row[k];
                }
                out[i * d_out + o] = acc;
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        self.push_checked(value, Op::Linear { x, w, b }, "linear")
    }

    pub fn activation(&mut self, x: TensorId, kind: Activation) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = v.data().iter().map(|&a| kind.apply(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push_checked(value, Op::Act { x, kind }, "activation")
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.activation(x, Activation::Tanh)
    }

    fn elementwise_pair(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: op_name,
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.elementwise_pair(a, b, "add", |x, y| x + y)?;
        self.push_checked(value, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.elementwise_pair(a, b, "sub", |x, y| x - y)?;
        self.push_checked(value, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let value = self.elementwise_pair(a, b, "mul", |x, y| x * y)?;
        self.push_checked(value, Op::Mul { a, b }, "mul")
    }

    /// y = mul * x + add elementwise.
    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = v.data().iter().map(|&a| mul * a + add).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push_checked(value, Op::Affine { x, mul }, "affine")
    }

    pub fn scale(&mut self, x: TensorId, s: f64) -> Result<TensorId> {
        self.affine(x, s, 0.0)
    }

    pub fn abs(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = v.data().iter().map(|a| a.abs()).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push_checked(value, Op::Abs { x }, "abs")
    }

    pub fn ln(&mut self, x: TensorId) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = v.data().iter().map(|a| a.ln()).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push_checked(value, Op::Ln { x }, "ln")
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        let v = &self.nodes[x.0].value;
        let out: Vec<f64> = v.data().iter().map(|a| a.clamp(lo, hi)).collect();
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push_checked(value, Op::Clamp { x, lo, hi }, "clamp")
    }

    /// Sum of every element, producing a scalar node.
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push_checked(Tensor::scalar(total), Op::Sum { x }, "sum")
    }

    /// Mean of every element, producing a scalar node.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum(x)?;
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Multiply each batch row (leading index) by the matching entry of a
    /// length-n vector.
    pub fn row_scale(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let wn = self.nodes[w.0].value.numel();
        if xs.is_empty() || xs[0] != wn {
            return Err(Error::Shape {
                op: "row_scale",
                detail: format!("leading extent of {xs:?} != vector length {wn}"),
            });
        }
        let row = xs[1..].iter().product::<usize>().max(1);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![0.0; xv.len()];
        for n in 0..xs[0] {
            for j in 0..row {
                out[n * row + j] = xv[n * row + j] * wv[n];
            }
        }
        let value = Tensor::new(xs, out)?;
        self.push_checked(value, Op::RowScale { x, w }, "row_scale")
    }

    /// Spatial mean per (batch, channel): (n,c,h,w) -> (n,c).
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let d = dims4("global_avg_pool", self.shape(x))?;
        let xv = self.nodes[x.0].value.data();
        let inv = 1.0 / (d.h * d.w) as f64;
        let mut out = vec![0.0; d.n * d.c];
        for n in 0..d.n {
            for c in 0..d.c {
                let base = ((n * d.c + c) * d.h) * d.w;
                out[n * d.c + c] = xv[base..base + d.h * d.w].iter().sum::<f64>() * inv;
            }
        }
        let value = Tensor::new(vec![d.n, d.c], out)?;
        self.push_checked(value, Op::GlobalAvgPool { x }, "global_avg_pool")
    }

    /// Spatial max per (batch, channel): (n,c,h,w) -> (n,c). First maximum
    /// wins on ties.
    pub fn global_max_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let d = dims4("global_max_pool", self.shape(x))?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; d.n * d.c];
        let mut argmax = vec![0usize; d.n * d.c];
        for n in 0..d.n {
            for c in 0..d.c {
                let base = ((n * d.c + c) * d.h) * d.w;
                let (mut best, mut best_i) = (f64::NEG_INFINITY, base);
                for i in base..base + d.h * d.w {
                    if xv[i] > best {
                        best = xv[i];
                        best_i = i;
                    }
                }
                out[n * d.c + c] = best;
                argmax[n * d.c + c] = best_i;
            }
        }
        let value = Tensor::new(vec![d.n, d.c], out)?;
        self.push_checked(value, Op::GlobalMaxPool { x, argmax }, "global_max_pool")
    }

    /// Mean over channels: (n,c,h,w) -> (n,1,h,w).
    pub fn channel_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let d = dims4("channel_mean", self.shape(x))?;
        let xv = self.nodes[x.0].value.data();
        let inv = 1.0 / d.c as f64;
        let mut out = vec![0.0; d.n * d.h * d.w];
        for n in 0..d.n {
            for c in 0..d.c {
                let base = ((n * d.c + c) * d.h) * d.w;
                for i in 0..d.h * d.w {
                    out[n * d.h * d.w + i] += xv[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let value = Tensor::new(vec![d.n, 1, d.h, d.w], out)?;
        self.push_checked(value, Op::ChannelMean { x }, "channel_mean")
    }

    /// Max over channels: (n,c,h,w) -> (n,1,h,w). First maximum wins.
    pub fn channel_max(&mut self, x: TensorId) -> Result<TensorId> {
        let d = dims4("channel_max", self.shape(x))?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![f64::NEG_INFINITY; d.n * d.h * d.w];
        let mut argmax = vec![0usize; d.n * d.h * d.w];
        for n in 0..d.n {
            for c in 0..d.c {
                let base = ((n * d.c + c) * d.h) * d.w;
                for i in 0..d.h * d.w {
                    if xv[base + i] > out[n * d.h * d.w + i] {
                        out[n * d.h * d.w + i] = xv[base + i];
                        argmax[n * d.h * d.w + i] = base + i;
                    }
                }
            }
        }
        let value = Tensor::new(vec![d.n, 1, d.h, d.w], out)?;
        self.push_checked(value, Op::ChannelMax { x, argmax }, "channel_max")
    }

    /// Gate (n,c) applied across all spatial positions of x (n,c,h,w).
    pub fn mul_channel_gate(&mut self, x: TensorId, gate: TensorId) -> Result<TensorId> {
        let d = dims4("mul_channel_gate", self.shape(x))?;
        let gs = self.shape(gate).to_vec();
        if gs != [d.n, d.c] {
            return Err(Error::Shape {
                op: "mul_channel_gate",
                detail: format!("gate {gs:?} != [{}, {}]", d.n, d.c),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gate.0].value.data();
        let mut out = vec![0.0; xv.len()];
        for n in 0..d.n {
            for c in 0..d.c {
                let g = gv[n * d.c + c];
                let base = ((n * d.c + c) * d.h) * d.w;
                for i in base..base + d.h * d.w {
                    out[i] = xv[i] * g;
                }
            }
        }
        let value = Tensor::new(vec![d.n, d.c, d.h, d.w], out)?;
        self.push_checked(value, Op::MulChannelGate { x, gate }, "mul_channel_gate")
    }

    /// Gate (n,1,h,w) applied across all channels of x (n,c,h,w).
    pub fn mul_spatial_gate(&mut self, x: TensorId, gate: TensorId) -> Result<TensorId> {
        let d = dims4("mul_spatial_gate", self.shape(x))?;
        let gs = self.shape(gate).to_vec();
        if gs != [d.n, 1, d.h, d.w] {
            return Err(Error::Shape {
                op: "mul_spatial_gate",
                detail: format!("gate {gs:?} != [{}, 1, {}, {}]", d.n, d.h, d.w),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gate.0].value.data();
        let hw = d.h * d.w;
        let mut out = vec![0.0; xv.len()];
        for n in 0..d.n {
            for c in 0..d.c {
                let base = ((n * d.c + c) * d.h) * d.w;
                for i in 0..hw {
                    out[base + i] = xv[base + i] * gv[n * hw + i];
                }
            }
        }
        let value = Tensor::new(vec![d.n, d.c, d.h, d.w], out)?;
        self.push_checked(value, Op::MulSpatialGate { x, gate }, "mul_spatial_gate")
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channel(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let da = dims4("concat_channel", self.shape(a))?;
        let db = dims4("concat_channel", self.shape(b))?;
        if da.n != db.n || da.h != db.h || da.w != db.w {
            return Err(Error::Shape {
                op: "concat_channel",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let hw = da.h * da.w;
        let c_out = da.c + db.c;
        let mut out = vec![0.0; da.n * c_out * hw];
        for n in 0..da.n {
            let dst = n * c_out * hw;
            out[dst..dst + da.c * hw].copy_from_slice(&av[n * da.c * hw..(n + 1) * da.c * hw]);
            out[dst + da.c * hw..dst + c_out * hw]
                .copy_from_slice(&bv[n * db.c * hw..(n + 1) * db.c * hw]);
        }
        let value = Tensor::new(vec![da.n, c_out, da.h, da.w], out)?;
        self.push_checked(value, Op::ConcatChannel { a, b }, "concat_channel")
    }

    /// View under a new shape with the same element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let value = self.nodes[x.0].value.reshaped(shape)?;
        self.push_checked(value, Op::Reshape { x }, "reshape")
    }

    /// (n,c,h,w) -> (n, c*h*w).
    pub fn flatten(&mut self, x: TensorId) -> Result<TensorId> {
        let d = dims4("flatten", self.shape(x))?;
        self.reshape(x, &[d.n, d.c * d.h * d.w])
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss. Populates gradients on every
    /// node that the loss reaches; trainable parameter leaves additionally
    /// get an exact-zero gradient when unreached.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        lv.assert_finite("loss")?;
        self.backward_done = true;

        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let upstream = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &upstream)?;
            self.nodes[i].grad = Some(upstream);
        }
        // Leased-but-unreached parameters read as exactly zero.
        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Param { .. }) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        for node in self.nodes.iter() {
            if let Some(g) = &node.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { context: "backward gradient".into() });
                }
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, d: &[f64]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Constant | Op::Param { .. } => {}
            Op::Conv2d { x, w, b, stride, padding } => {
                let xd = dims4("conv2d", self.shape(x))?;
                let ws = self.shape(w).to_vec();
                let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let os = self.shape(TensorId(i)).to_vec();
                let (h_out, w_out) = (os[2], os[3]);
                let xv = self.nodes[x.0].value.data().to_vec();
                let wv = self.nodes[w.0].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; c_out];
                for n in 0..xd.n {
                    for o in 0..c_out {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let g = d[((n * c_out + o) * h_out + oy) * w_out + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                db[o] += g;
                                for c in 0..c_in {
                                    let x_base = ((n * xd.c + c) * xd.h) * xd.w;
                                    let w_base = ((o * c_in + c) * kh) * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= xd.h as isize {
                                            continue;
                                        }
                                        let x_row = x_base + iy as usize * xd.w;
                                        let w_row = w_base + ky * kw;
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= xd.w as isize {
                                                continue;
                                            }
                                            dx[x_row + ix as usize] += g * wv[w_row + kx];
                                            dw[w_row + kx] += g * xv[x_row + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
                self.add_grad(b, &db);
            }
            Op::AvgPool2 { x } => {
                let xd = dims4("avgpool2", self.shape(x))?;
                let (ho, wo) = (xd.h / 2, xd.w / 2);
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for n in 0..xd.n {
                    for c in 0..xd.c {
                        let base = ((n * xd.c + c) * xd.h) * xd.w;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = 0.25 * d[((n * xd.c + c) * ho + oy) * wo + ox];
                                let i0 = base + (2 * oy) * xd.w + 2 * ox;
                                let i1 = base + (2 * oy + 1) * xd.w + 2 * ox;
                                dx[i0] += g;
                                dx[i0 + 1] += g;
                                dx[i1] += g;
                                dx[i1 + 1] += g;
                            }
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(x).to_vec();
                let (n, d_in) = (xs[0], xs[1]);
                let d_out = self.shape(w)[0];
                let xv = self.nodes[x.0].value.data().to_vec();
                let wv = self.nodes[w.0].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; d_out];
                for i_row in 0..n {
                    for o in 0..d_out {
                        let g = d[i_row * d_out + o];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        for k in 0..d_in {
                            dx[i_row * d_in + k] += g * wv[o * d_in + k];
                            dw[o * d_in + k] += g * xv[i_row * d_in + k];
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
                self.add_grad(b, &db);
            }
            Op::Act { x, kind } => {
                let out = self.nodes[i].value.data().to_vec();
                let xin = self.nodes[x.0].value.data();
                let dx: Vec<f64> = match kind {
                    Activation::Relu => xin
                        .iter()
                        .zip(d)
                        .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => {
                        out.iter().zip(d).map(|(&y, &g)| g * y * (1.0 - y)).collect()
                    }
                    Activation::Tanh => {
                        out.iter().zip(d).map(|(&y, &g)| g * (1.0 - y * y)).collect()
                    }
                };
                self.add_grad(x, &dx);
            }
            Op::Add { a, b } => {
                self.add_grad(a, d);
                self.add_grad(b, d);
            }
            Op::Sub { a, b } => {
                self.add_grad(a, d);
                let neg: Vec<f64> = d.iter().map(|&g| -g).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let da: Vec<f64> = d.iter().zip(&bv).map(|(&g, &y)| g * y).collect();
                let dbv: Vec<f64> = d.iter().zip(&av).map(|(&g, &x_)| g * x_).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &dbv);
            }
            Op::Affine { x, mul } => {
                let dx: Vec<f64> = d.iter().map(|&g| g * mul).collect();
                self.add_grad(x, &dx);
            }
            Op::Abs { x } => {
                let xv = self.nodes[x.0].value.data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(d)
                    .map(|(&xi, &g)| if xi > 0.0 { g } else if xi < 0.0 { -g } else { 0.0 })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Ln { x } => {
                let xv = self.nodes[x.0].value.data();
                let dx: Vec<f64> = xv.iter().zip(d).map(|(&xi, &g)| g / xi).collect();
                self.add_grad(x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.nodes[x.0].value.data();
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(d)
                    .map(|(&xi, &g)| if xi >= lo && xi <= hi { g } else { 0.0 })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![d[0]; self.nodes[x.0].value.numel()];
                self.add_grad(x, &dx);
            }
            Op::RowScale { x, w } => {
                let xs = self.shape(x).to_vec();
                let row = xs[1..].iter().product::<usize>().max(1);
                let xv = self.nodes[x.0].value.data().to_vec();
                let wv = self.nodes[w.0].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for n in 0..xs[0] {
                    for j in 0..row {
                        dx[n * row + j] = d[n * row + j] * wv[n];
                        dw[n] += d[n * row + j] * xv[n * row + j];
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(w, &dw);
            }
            Op::GlobalAvgPool { x } => {
                let xd = dims4("global_avg_pool", self.shape(x))?;
                let inv = 1.0 / (xd.h * xd.w) as f64;
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for n in 0..xd.n {
                    for c in 0..xd.c {
                        let g = d[n * xd.c + c] * inv;
                        let base = ((n * xd.c + c) * xd.h) * xd.w;
                        for v in dx[base..base + xd.h * xd.w].iter_mut() {
                            *v += g;
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (j, &src) in argmax.iter().enumerate() {
                    dx[src] += d[j];
                }
                self.add_grad(x, &dx);
            }
            Op::ChannelMean { x } => {
                let xd = dims4("channel_mean", self.shape(x))?;
                let inv = 1.0 / xd.c as f64;
                let hw = xd.h * xd.w;
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for n in 0..xd.n {
                    for c in 0..xd.c {
                        let base = ((n * xd.c + c) * xd.h) * xd.w;
                        for i in 0..hw {
                            dx[base + i] += d[n * hw + i] * inv;
                        }
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::ChannelMax { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (j, &src) in argmax.iter().enumerate() {
                    dx[src] += d[j];
                }
                self.add_grad(x, &dx);
            }
            Op::MulChannelGate { x, gate } => {
                let xd = dims4("mul_channel_gate", self.shape(x))?;
                let hw = xd.h * xd.w;
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gate.0].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; gv.len()];
                for n in 0..xd.n {
                    for c in 0..xd.c {
                        let g = gv[n * xd.c + c];
                        let base = ((n * xd.c + c) * xd.h) * xd.w;
                        for i in 0..hw {
                            dx[base + i] = d[base + i] * g;
                            dg[n * xd.c + c] += d[base + i] * xv[base + i];
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gate, &dg);
            }
            Op::MulSpatialGate { x, gate } => {
                let xd = dims4("mul_spatial_gate", self.shape(x))?;
                let hw = xd.h * xd.w;
                let xv = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gate.0].value.data().to_vec();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; gv.len()];
                for n in 0..xd.n {
                    for c in 0..xd.c {
                        let base = ((n * xd.c + c) * xd.h) * xd.w;
                        for i in 0..hw {
                            dx[base + i] = d[base + i] * gv[n * hw + i];
                            dg[n * hw + i] += d[base + i] * xv[base + i];
                        }
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gate, &dg);
            }
            Op::ConcatChannel { a, b } => {
                let da4 = dims4("concat_channel", self.shape(a))?;
                let db4 = dims4("concat_channel", self.shape(b))?;
                let hw = da4.h * da4.w;
                let c_out = da4.c + db4.c;
                let mut dav = vec![0.0; self.nodes[a.0].value.numel()];
                let mut dbv = vec![0.0; self.nodes[b.0].value.numel()];
                for n in 0..da4.n {
                    let src = n * c_out * hw;
                    dav[n * da4.c * hw..(n + 1) * da4.c * hw]
                        .copy_from_slice(&d[src..src + da4.c * hw]);
                    dbv[n * db4.c * hw..(n + 1) * db4.c * hw]
                        .copy_from_slice(&d[src + da4.c * hw..src + c_out * hw]);
                }
                self.add_grad(a, &dav);
                self.add_grad(b, &dbv);
            }
            Op::Reshape { x } => {
                self.add_grad(x, d);
            }
        }
        Ok(())
    }

    /// Accumulated gradients for every trainable parameter leased from the
    /// given store. Empty until backward has run.
    pub fn param_grads(&self, store_uid: u64) -> Vec<(&str, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param { store_uid: uid, name } if *uid == store_uid => {
                    n.grad.as_deref().map(|g| (name.as_str(), g))
                }
                _ => None,
            })
            .collect()
    }

    pub fn backward_has_run(&self) -> bool {
        self.backward_done
    }
}
