//! Reverse-mode differentiation over an explicit operation record.
//!
//! Forward builders append one node per primitive; the record is replayed
//! in reverse by [`Tape::backward`], which pushes gradients into a
//! [`ParameterSet`]. Nodes are appended in execution order, so the record
//! is topologically sorted by construction.

use crate::error::{NnError, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul {
        ta: bool,
        tb: bool,
    },
    /// Adds a length-C vector along axis 1 of a rank>=2 tensor.
    BiasAdd,
    Relu,
    Sigmoid,
    Mul,
    Add,
    Sum,
    Reshape,
    /// out[b,j] = (x[b,j] + shift[j]) * scale[j], constants. Only the scale
    /// survives into the adjoint.
    AffineCols {
        scale: Vec<f64>,
    },
    Conv2d {
        padding: usize,
    },
    ConvTranspose2d {
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<ValueId>,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<ValueId>, value: Tensor, context: &str) -> Result<ValueId> {
        value.check_finite(context)?;
        self.nodes.push(Node { op, inputs, value });
        Ok(ValueId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<ValueId> {
        self.push(Op::Input, vec![], t, "input")
    }

    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<ValueId> {
        let t = params.get(name)?.clone();
        self.push(Op::Param(name.to_string()), vec![], t, "param")
    }

    /// General 2-D product with optional transposes: C = A^(ta) · B^(tb).
    pub fn matmul_general(&mut self, a: ValueId, ta: bool, b: ValueId, tb: bool) -> Result<ValueId> {
        let (ash, bsh) = (self.shape2(a, "matmul")?, self.shape2(b, "matmul")?);
        let (m, ka) = if ta { (ash.1, ash.0) } else { ash };
        let (kb, n) = if tb { (bsh.1, bsh.0) } else { bsh };
        if ka != kb {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = mm(
            self.value(a).values(),
            ash,
            ta,
            self.value(b).values(),
            bsh,
            tb,
        );
        let t = Tensor::with_shape_unchecked(vec![m, n], out);
        self.push(Op::MatMul { ta, tb }, vec![a, b], t, "matmul")
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.matmul_general(a, false, b, false)
    }

    pub fn bias_add(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() < 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(NnError::ShapeMismatch {
                op: "bias_add",
                lhs: xs,
                rhs: bs,
            });
        }
        let channels = xs[1];
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias).values().to_vec();
        let mut out = self.value(x).values().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        let t = Tensor::with_shape_unchecked(xs, out);
        self.push(Op::BiasAdd, vec![x, bias], t, "bias_add")
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let t = Tensor::with_shape_unchecked(
            self.value(x).shape().to_vec(),
            self.value(x).values().iter().map(|&v| v.max(0.0)).collect(),
        );
        self.push(Op::Relu, vec![x], t, "relu")
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let t = Tensor::with_shape_unchecked(
            self.value(x).shape().to_vec(),
            self.value(x).values().iter().map(|&v| sigmoid(v)).collect(),
        );
        self.push(Op::Sigmoid, vec![x], t, "sigmoid")
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::with_shape_unchecked(self.value(a).shape().to_vec(), out);
        self.push(Op::Mul, vec![a, b], t, "mul")
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::with_shape_unchecked(self.value(a).shape().to_vec(), out);
        self.push(Op::Add, vec![a, b], t, "add")
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let s: f64 = self.value(x).values().iter().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s), "sum")
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || n != self.value(x).len() {
            return Err(NnError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("incompatible with {} values", self.value(x).len()),
            });
        }
        let t = Tensor::with_shape_unchecked(shape, self.value(x).values().to_vec());
        self.push(Op::Reshape, vec![x], t, "reshape")
    }

    /// Column-wise affine map with constant shift and scale:
    /// out[b,j] = (x[b,j] + shift[j]) * scale[j].
    pub fn affine_cols(&mut self, x: ValueId, shift: &[f64], scale: &[f64]) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || shift.len() != xs[1] || scale.len() != xs[1] {
            return Err(NnError::ShapeMismatch {
                op: "affine_cols",
                lhs: xs,
                rhs: vec![shift.len(), scale.len()],
            });
        }
        let n = xs[1];
        let out: Vec<f64> = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v + shift[i % n]) * scale[i % n])
            .collect();
        let t = Tensor::with_shape_unchecked(xs, out);
        self.push(
            Op::AffineCols {
                scale: scale.to_vec(),
            },
            vec![x],
            t,
            "affine_cols",
        )
    }

    /// 2-D convolution, stride 1. Input [B,Cin,H,W], kernel [Cout,Cin,KH,KW].
    pub fn conv2d(&mut self, x: ValueId, kernel: ValueId, padding: usize) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (bsz, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = (
            (h + 2 * padding).checked_sub(kh - 1),
            (w + 2 * padding).checked_sub(kw - 1),
        );
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(NnError::InvalidShape {
                    op: "conv2d",
                    shape: xs,
                    reason: format!("kernel {}x{} too large for padded input", kh, kw),
                })
            }
        };
        let xv = self.value(x).values();
        let kv = self.value(kernel).values();
        let mut out = vec![0.0; bsz * cout * oh * ow];
        for b in 0..bsz {
            for co in 0..cout {
                for ci in 0..cin {
                    let xplane = &xv[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                    let kplane = &kv[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                    let oplane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..kh {
                                let iy = (oy + ky).wrapping_sub(padding);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx).wrapping_sub(padding);
                                    if ix >= w {
                                        continue;
                                    }
                                    acc += xplane[iy * w + ix] * kplane[ky * kw + kx];
                                }
                            }
                            oplane[oy * ow + ox] += acc;
                        }
                    }
                }
            }
        }
        let t = Tensor::with_shape_unchecked(vec![bsz, cout, oh, ow], out);
        self.push(Op::Conv2d { padding }, vec![x, kernel], t, "conv2d")
    }

    /// Transposed 2-D convolution. Input [B,Cin,H,W], kernel [Cin,Cout,KH,KW],
    /// output side (in-1)*stride - 2*padding + kernel.
    pub fn conv_transpose2d(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] {
            return Err(NnError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: xs,
                rhs: ks,
            });
        }
        let (bsz, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[1], ks[2], ks[3]);
        let oh = ((h - 1) * stride + kh).checked_sub(2 * padding);
        let ow = ((w - 1) * stride + kw).checked_sub(2 * padding);
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(NnError::InvalidShape {
                    op: "conv_transpose2d",
                    shape: xs,
                    reason: "padding swallows the whole output".into(),
                })
            }
        };
        let xv = self.value(x).values();
        let kv = self.value(kernel).values();
        let mut out = vec![0.0; bsz * cout * oh * ow];
        for b in 0..bsz {
            for ci in 0..cin {
                let xplane = &xv[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                for co in 0..cout {
                    let kplane = &kv[(ci * cout + co) * kh * kw..(ci * cout + co + 1) * kh * kw];
                    let oplane = &mut out[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                    for iy in 0..h {
                        for ky in 0..kh {
                            let oy = (iy * stride + ky).wrapping_sub(padding);
                            if oy >= oh {
                                continue;
                            }
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            for kx in 0..kw {
                                let kval = kplane[ky * kw + kx];
                                // ox = ix*stride + kx - padding must land in [0, ow)
                                let (ix_lo, ix_hi) = transpose_range(w, ow, stride, padding, kx);
                                for ix in ix_lo..ix_hi {
                                    orow[ix * stride + kx - padding] += kval * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::with_shape_unchecked(vec![bsz, cout, oh, ow], out);
        self.push(
            Op::ConvTranspose2d { stride, padding },
            vec![x, kernel],
            t,
            "conv_transpose2d",
        )
    }

    /// 2-D max pooling over square windows.
    pub fn max_pool2d(&mut self, x: ValueId, kernel: usize, stride: usize) -> Result<ValueId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(NnError::InvalidShape {
                op: "max_pool2d",
                shape: xs,
                reason: format!("window {} stride {} does not fit", kernel, stride),
            });
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xv = self.value(x).values();
        let mut out = vec![0.0; bsz * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..bsz * c {
            let plane = &xv[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (oy * stride + ky) * w + ox * stride + kx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[bc * oh * ow + oy * ow + ox] = best;
                    argmax[bc * oh * ow + oy * ow + ox] = bc * h * w + best_idx;
                }
            }
        }
        let t = Tensor::with_shape_unchecked(vec![bsz, c, oh, ow], out);
        self.push(Op::MaxPool2d { argmax }, vec![x], t, "max_pool2d")
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(NnError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: ls,
                rhs: vec![labels.len()],
            });
        }
        let (bsz, classes) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::InvalidShape {
                op: "softmax_cross_entropy",
                shape: ls,
                reason: format!("label {} out of range 0..{}", bad, classes),
            });
        }
        let lv = self.value(logits).values();
        let mut probs = vec![0.0; bsz * classes];
        let mut total = 0.0;
        for b in 0..bsz {
            let row = &lv[b * classes..(b + 1) * classes];
            let zmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sumexp = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - zmax).exp();
                probs[b * classes + j] = e;
                sumexp += e;
            }
            for p in &mut probs[b * classes..(b + 1) * classes] {
                *p /= sumexp;
            }
            total += sumexp.ln() - (row[labels[b]] - zmax);
        }
        let t = Tensor::scalar(total / bsz as f64);
        self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            t,
            "softmax_cross_entropy",
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, prediction: ValueId, target: ValueId) -> Result<ValueId> {
        self.same_shape(prediction, target, "mse")?;
        let n = self.value(prediction).len() as f64;
        let s: f64 = self
            .value(prediction)
            .values()
            .iter()
            .zip(self.value(target).values())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(Op::Mse, vec![prediction, target], Tensor::scalar(s / n), "mse")
    }

    /// Populate parameter gradients by replaying the record in reverse.
    /// Errors if gradients are already populated (use
    /// [`Tape::backward_accumulate`] to add on top explicitly).
    pub fn backward(&self, loss: ValueId, params: &mut ParameterSet) -> Result<()> {
        self.backward_inner(loss, params, false)
    }

    pub fn backward_accumulate(&self, loss: ValueId, params: &mut ParameterSet) -> Result<()> {
        self.backward_inner(loss, params, true)
    }

    fn backward_inner(&self, loss: ValueId, params: &mut ParameterSet, accumulate: bool) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(NnError::EmptyRecord);
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(NnError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        params.begin_backward(accumulate)?;

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param(name) => params.accumulate_grad(name, &gout)?,
                Op::MatMul { ta, tb } => {
                    let a = &self.nodes[node.inputs[0].0].value;
                    let b = &self.nodes[node.inputs[1].0].value;
                    let ash = (a.shape()[0], a.shape()[1]);
                    let bsh = (b.shape()[0], b.shape()[1]);
                    let csh = (node.value.shape()[0], node.value.shape()[1]);
                    // dA and dB in terms of raw (untransposed) storage.
                    let da = if !ta {
                        mm(&gout, csh, false, b.values(), bsh, !tb)
                    } else {
                        mm(b.values(), bsh, *tb, &gout, csh, true)
                    };
                    let db = if !tb {
                        mm(a.values(), ash, !ta, &gout, csh, false)
                    } else {
                        mm(&gout, csh, true, a.values(), ash, *ta)
                    };
                    add_into(grad_buf(&mut grads, node.inputs[0], a.len()), &da);
                    add_into(grad_buf(&mut grads, node.inputs[1], b.len()), &db);
                }
                Op::BiasAdd => {
                    let xs = node.value.shape();
                    let channels = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let gx = grad_buf(&mut grads, node.inputs[0], node.value.len());
                    add_into(gx, &gout);
                    let gb = grad_buf(&mut grads, node.inputs[1], channels);
                    for (i, &g) in gout.iter().enumerate() {
                        gb[(i / inner) % channels] += g;
                    }
                }
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let gx = grad_buf(&mut grads, node.inputs[0], x.len());
                    for (i, (&g, &v)) in gout.iter().zip(x.values()).enumerate() {
                        if v > 0.0 {
                            gx[i] += g;
                        }
                    }
                }
                Op::Sigmoid => {
                    let s = node.value.values();
                    let gx = grad_buf(&mut grads, node.inputs[0], s.len());
                    for (i, (&g, &sv)) in gout.iter().zip(s).enumerate() {
                        gx[i] += g * sv * (1.0 - sv);
                    }
                }
                Op::Mul => {
                    let a = self.nodes[node.inputs[0].0].value.values();
                    let b = self.nodes[node.inputs[1].0].value.values();
                    {
                        let ga = grad_buf(&mut grads, node.inputs[0], a.len());
                        for (i, &g) in gout.iter().enumerate() {
                            ga[i] += g * b[i];
                        }
                    }
                    let gb = grad_buf(&mut grads, node.inputs[1], b.len());
                    for (i, &g) in gout.iter().enumerate() {
                        gb[i] += g * a[i];
                    }
                }
                Op::Add => {
                    add_into(grad_buf(&mut grads, node.inputs[0], gout.len()), &gout);
                    add_into(grad_buf(&mut grads, node.inputs[1], gout.len()), &gout);
                }
                Op::Sum => {
                    let n = self.nodes[node.inputs[0].0].value.len();
                    let gx = grad_buf(&mut grads, node.inputs[0], n);
                    for g in gx.iter_mut() {
                        *g += gout[0];
                    }
                }
                Op::Reshape => {
                    add_into(grad_buf(&mut grads, node.inputs[0], gout.len()), &gout);
                }
                Op::AffineCols { scale, .. } => {
                    let n = scale.len();
                    let gx = grad_buf(&mut grads, node.inputs[0], gout.len());
                    for (i, &g) in gout.iter().enumerate() {
                        gx[i] += g * scale[i % n];
                    }
                }
                Op::Conv2d { padding } => {
                    self.backward_conv2d(node, &gout, *padding, &mut grads);
                }
                Op::ConvTranspose2d { stride, padding } => {
                    self.backward_conv_transpose2d(node, &gout, *stride, *padding, &mut grads);
                }
                Op::MaxPool2d { argmax, .. } => {
                    let n = self.nodes[node.inputs[0].0].value.len();
                    let gx = grad_buf(&mut grads, node.inputs[0], n);
                    for (&g, &idx) in gout.iter().zip(argmax) {
                        gx[idx] += g;
                    }
                }
                Op::SoftmaxCrossEntropy { labels, probs } => {
                    let classes = probs.len() / labels.len();
                    let scale = gout[0] / labels.len() as f64;
                    let gx = grad_buf(&mut grads, node.inputs[0], probs.len());
                    for b in 0..labels.len() {
                        for j in 0..classes {
                            let indicator = if j == labels[b] { 1.0 } else { 0.0 };
                            gx[b * classes + j] += scale * (probs[b * classes + j] - indicator);
                        }
                    }
                }
                Op::Mse => {
                    let a = self.nodes[node.inputs[0].0].value.values();
                    let b = self.nodes[node.inputs[1].0].value.values();
                    let scale = gout[0] * 2.0 / a.len() as f64;
                    {
                        let ga = grad_buf(&mut grads, node.inputs[0], a.len());
                        for i in 0..a.len() {
                            ga[i] += scale * (a[i] - b[i]);
                        }
                    }
                    let gb = grad_buf(&mut grads, node.inputs[1], b.len());
                    for i in 0..b.len() {
                        gb[i] -= scale * (a[i] - b[i]);
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_conv2d(&self, node: &Node, gout: &[f64], padding: usize, grads: &mut Vec<Option<Vec<f64>>>) {
        let x = &self.nodes[node.inputs[0].0].value;
        let k = &self.nodes[node.inputs[1].0].value;
        let (bsz, cin, h, w) = shape4(x.shape());
        let (cout, _, kh, kw) = shape4(k.shape());
        let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
        let xv = x.values();
        let kv = k.values();

        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; k.len()];
        for b in 0..bsz {
            for co in 0..cout {
                let gplane = &gout[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                for ci in 0..cin {
                    let xplane = &xv[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                    let dxplane_base = (b * cin + ci) * h * w;
                    let kbase = (co * cin + ci) * kh * kw;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gplane[oy * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy + ky).wrapping_sub(padding);
                                if iy >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox + kx).wrapping_sub(padding);
                                    if ix >= w {
                                        continue;
                                    }
                                    dx[dxplane_base + iy * w + ix] += g * kv[kbase + ky * kw + kx];
                                    dk[kbase + ky * kw + kx] += g * xplane[iy * w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        add_into(grad_buf(grads, node.inputs[0], x.len()), &dx);
        add_into(grad_buf(grads, node.inputs[1], k.len()), &dk);
    }

    fn backward_conv_transpose2d(
        &self,
        node: &Node,
        gout: &[f64],
        stride: usize,
        padding: usize,
        grads: &mut Vec<Option<Vec<f64>>>,
    ) {
        let x = &self.nodes[node.inputs[0].0].value;
        let k = &self.nodes[node.inputs[1].0].value;
        let (bsz, cin, h, w) = shape4(x.shape());
        let (_, cout, kh, kw) = shape4(k.shape());
        let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
        let xv = x.values();
        let kv = k.values();

        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; k.len()];
        for b in 0..bsz {
            for ci in 0..cin {
                let xplane = &xv[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let dxplane = &mut dx[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                for co in 0..cout {
                    let gplane = &gout[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                    let kbase = (ci * cout + co) * kh * kw;
                    for iy in 0..h {
                        for ky in 0..kh {
                            let oy = (iy * stride + ky).wrapping_sub(padding);
                            if oy >= oh {
                                continue;
                            }
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            let dxrow = &mut dxplane[iy * w..(iy + 1) * w];
                            for kx in 0..kw {
                                let kval = kv[kbase + ky * kw + kx];
                                let (ix_lo, ix_hi) = transpose_range(w, ow, stride, padding, kx);
                                let mut kacc = 0.0;
                                for ix in ix_lo..ix_hi {
                                    let g = grow[ix * stride + kx - padding];
                                    dxrow[ix] += kval * g;
                                    kacc += xrow[ix] * g;
                                }
                                dk[kbase + ky * kw + kx] += kacc;
                            }
                        }
                    }
                }
            }
        }
        add_into(grad_buf(grads, node.inputs[0], x.len()), &dx);
        add_into(grad_buf(grads, node.inputs[1], k.len()), &dk);
    }

    fn shape2(&self, id: ValueId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(NnError::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "rank-2 tensor required".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: ValueId, b: ValueId, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn shape4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

/// Valid input-column range so that ix*stride + kx - padding lands in [0, out_w).
fn transpose_range(in_w: usize, out_w: usize, stride: usize, padding: usize, kx: usize) -> (usize, usize) {
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx + stride - 1) / stride
    };
    let hi_excl = (out_w + padding).saturating_sub(kx).div_ceil(stride).min(in_w);
    (lo.min(hi_excl), hi_excl)
}

fn grad_buf<'a>(grads: &'a mut Vec<Option<Vec<f64>>>, id: ValueId, len: usize) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// C = A^(ta) · B^(tb) on raw row-major storage.
fn mm(a: &[f64], ash: (usize, usize), ta: bool, b: &[f64], bsh: (usize, usize), tb: bool) -> Vec<f64> {
    let (m, k) = if ta { (ash.1, ash.0) } else { ash };
    let n = if tb { bsh.0 } else { bsh.1 };
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (kk, &aik) in arow.iter().enumerate() {
                    let brow = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for kk in 0..k {
                let arow = &a[kk * m..(kk + 1) * m];
                let brow = &b[kk * n..(kk + 1) * n];
                for (i, &aik) in arow.iter().enumerate() {
                    if aik == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
        }
        (true, true) => {
            // C = (B·A)^T with raw operands.
            let e = mm(b, bsh, false, a, ash, false); // [n, m]
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = e[j * m + i];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.input(tensor(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_exactly_half() {
        let mut tape = Tape::new();
        let x = tape.input(tensor(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5]);
    }

    #[test]
    fn transposed_conv_output_size_matches_formula() {
        // out = (in-1)*stride - 2*pad + kernel = (7-1)*2 - 2 + 4 = 14
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(vec![1, 1, 7, 7], 0.3)).unwrap();
        let k = tape.input(Tensor::filled(vec![1, 1, 4, 4], 0.1)).unwrap();
        let y = tape.conv_transpose2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 14, 14]);
        let expected = (7 - 1) * 2 - 2 * 1 + 4;
        assert_eq!(tape.value(y).shape()[2], expected);
    }

    #[test]
    fn matmul_small_known_product() {
        let mut tape = Tape::new();
        let a = tape.input(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.input(tensor(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_plain() {
        let av = [1.0, -2.0, 0.5, 3.0, 1.5, -1.0];
        let bv = [2.0, 0.0, -1.0, 4.0, 0.5, 1.0];
        // a [2,3] times b [3,2]
        let plain = mm(&av, (2, 3), false, &bv, (3, 2), false);
        // a stored transposed as [3,2]
        let at = [1.0, 3.0, -2.0, 1.5, 0.5, -1.0];
        let via_ta = mm(&at, (3, 2), true, &bv, (3, 2), false);
        assert_eq!(plain, via_ta);
        // b stored transposed as [2,3]
        let bt = [2.0, -1.0, 0.5, 0.0, 4.0, 1.0];
        let via_tb = mm(&av, (2, 3), false, &bt, (2, 3), true);
        assert_eq!(plain, via_tb);
        let via_tt = mm(&at, (3, 2), true, &bt, (2, 3), true);
        for (x, y) in plain.iter().zip(&via_tt) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_of_identical_inputs_gives_zero_gradients() {
        let mut params = ParameterSet::new();
        params
            .define("x", tensor(&[4], &[0.3, -1.2, 0.0, 2.5]))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&params, "x").unwrap();
        let t = tape.input(tensor(&[4], &[0.3, -1.2, 0.0, 2.5])).unwrap();
        let loss = tape.mse(x, t).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("x").unwrap(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_sum_gradient_is_other_factor() {
        // loss = sum(w ⊙ y)  =>  ∂loss/∂w = y
        let mut params = ParameterSet::new();
        params.define("w", tensor(&[3], &[0.1, 0.2, 0.3])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let y = tape.input(tensor(&[3], &[4.0, -5.0, 6.0])).unwrap();
        let p = tape.mul(w, y).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("w").unwrap(), &[4.0, -5.0, 6.0]);
    }

    #[test]
    fn backward_twice_without_reset_errors() {
        let mut params = ParameterSet::new();
        params.define("w", tensor(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let loss = tape.sum(w).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert!(matches!(
            tape.backward(loss, &mut params),
            Err(NnError::GradientsAlreadyPopulated)
        ));
        // explicit accumulation is allowed and doubles the gradient
        tape.backward_accumulate(loss, &mut params).unwrap();
        assert_eq!(params.grad("w").unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unreachable_parameters_get_exact_zero() {
        let mut params = ParameterSet::new();
        params.define("used", tensor(&[2], &[1.0, 2.0])).unwrap();
        params.define("unused", tensor(&[2], &[3.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&params, "used").unwrap();
        let loss = tape.sum(w).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.grad("unused").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_diagnostic_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.input(Tensor::zeros(vec![2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{}", msg);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut params = ParameterSet::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![2, 2])).unwrap();
        assert!(matches!(
            tape.backward(x, &mut params),
            Err(NnError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn softmax_cross_entropy_uniform_case() {
        // zero logits over 10 classes: loss = ln 10, probs uniform
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(vec![2, 10])).unwrap();
        let loss = tape.softmax_cross_entropy(z, &[3, 7]).unwrap();
        assert!((tape.value(loss).item() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let mut tape = Tape::new();
        let x = tape
            .input(tensor(
                &[1, 1, 4, 4],
                &[
                    1.0, 2.0, 5.0, 0.0, //
                    3.0, 4.0, 1.0, 1.0, //
                    0.0, 0.0, 2.0, 8.0, //
                    0.0, 0.0, 7.0, 2.0,
                ],
            ))
            .unwrap();
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).values(), &[4.0, 5.0, 0.0, 8.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape
            .input(tensor(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let k = tape.input(tensor(&[1, 1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv2d(x, k, 0).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_transpose_known_value() {
        // single input pixel, stride 2, no padding: output is the kernel
        let mut tape = Tape::new();
        let x = tape.input(tensor(&[1, 1, 1, 1], &[2.0])).unwrap();
        let k = tape
            .input(tensor(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let y = tape.conv_transpose2d(x, k, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).values(), &[2.0, 4.0, 6.0, 8.0]);
    }
}
