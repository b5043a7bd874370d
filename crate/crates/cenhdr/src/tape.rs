//! Reverse-mode automatic differentiation over the forward kernels.
//!
//! A [`Tape`] records every primitive application together with the node
//! values needed for the backward pass. One training step owns one tape;
//! replaying it backward visits operators in exact reverse order of
//! recording and accumulates gradients for every registered parameter.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::ops::{self, valid_range};
use crate::tensor::{Element, Shape, TensorError, TensorOf};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize, dilation: usize },
    PixelShuffle { x: NodeId, r: usize },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ExpandChannels { x: NodeId },
    Concat { xs: Vec<NodeId> },
    L1Loss { a: NodeId, b: NodeId },
    MuLaw { x: NodeId, mu: f64 },
    Scale { x: NodeId, factor: f64 },
}

struct Node<T> {
    value: TensorOf<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradient tensors keyed by parameter name. Every parameter registered on
/// the tape has an entry; parameters unreachable from the loss map to zeros.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    map: BTreeMap<String, TensorOf<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&TensorOf<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorOf<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Recorded computation for one differentiation pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, value: TensorOf<T>, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a trainable parameter leaf.
    pub fn param(&mut self, name: impl Into<String>, value: TensorOf<T>) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), id));
        id
    }

    /// Registers a non-trainable input leaf.
    pub fn constant(&mut self, value: TensorOf<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &TensorOf<T> {
        &self.nodes[id.0].value
    }

    /// Number of recorded primitive applications (leaves excluded).
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<NodeId, TensorError> {
        let value = ops::conv2d(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            padding,
            dilation,
        )?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, padding, dilation }, rg))
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId, TensorError> {
        let value = ops::pixel_shuffle(self.value(x), r)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::PixelShuffle { x, r }, rg))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let value = ops::global_avg_pool(self.value(x))?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = ops::relu(self.value(x));
        let rg = self.requires(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = ops::sigmoid(self.value(x));
        let rg = self.requires(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn expand_channels(&mut self, x: NodeId, c: usize) -> Result<NodeId, TensorError> {
        let value = ops::expand_channels(self.value(x), c)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::ExpandChannels { x }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        let values: Vec<&TensorOf<T>> = xs.iter().map(|id| self.value(*id)).collect();
        let value = ops::concat_channels(&values)?;
        let rg = xs.iter().any(|id| self.requires(*id));
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value = ops::l1_loss(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(TensorOf::scalar(value), Op::L1Loss { a, b }, rg))
    }

    pub fn mu_law(&mut self, x: NodeId, mu: f64) -> Result<NodeId, TensorError> {
        let value = ops::mu_law(self.value(x), mu)?;
        let rg = self.requires(x);
        Ok(self.push(value, Op::MuLaw { x, mu }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = ops::scale(self.value(x), factor);
        let rg = self.requires(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Runs the backward pass from a scalar loss node and returns gradients
    /// for every registered parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, TensorError> {
        let loss_shape = self.value(loss).shape();
        if loss_shape != Shape::scalar() {
            return Err(TensorError::LossNotScalar { shape: loss_shape });
        }

        let mut grads: Vec<Option<TensorOf<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorOf::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = grads[i].take() else { continue };
            self.propagate(i, &grad, &mut grads)?;
            // Leaf gradients are needed after the sweep.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(grad);
            }
        }

        let mut map = BTreeMap::new();
        for (name, id) in &self.params {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| TensorOf::zeros(self.value(*id).shape()));
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }

    fn propagate(
        &self,
        idx: usize,
        grad: &TensorOf<T>,
        grads: &mut [Option<TensorOf<T>>],
    ) -> Result<(), TensorError> {
        let send = |id: NodeId, delta: TensorOf<T>, grads: &mut [Option<TensorOf<T>>]| {
            if self.requires(id) {
                accumulate(&mut grads[id.0], delta);
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, padding, dilation } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.requires(*x) {
                    let dx = conv2d_grad_input(wv, grad, xv.shape(), *stride, *padding, *dilation);
                    send(*x, dx, grads);
                }
                if self.requires(*w) {
                    let dw = conv2d_grad_weight(xv, grad, wv.shape(), *stride, *padding, *dilation);
                    send(*w, dw, grads);
                }
                if self.requires(*b) {
                    send(*b, sum_spatial_and_batch(grad), grads);
                }
            }
            Op::PixelShuffle { x, r } => {
                send(*x, ops::pixel_unshuffle(grad, *r)?, grads);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let inv = 1.0 / (xs.h * xs.w) as f64;
                let dx = TensorOf::from_fn(xs, |n, c, _, _| {
                    T::from_f64(grad.at(n, c, 0, 0).to_f64() * inv)
                });
                send(*x, dx, grads);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c_out) = (xv.shape().n, wv.shape().n);
                if self.requires(*x) {
                    let dx = TensorOf::from_fn(xv.shape(), |ni, ci, _, _| {
                        let mut acc = 0.0;
                        for co in 0..c_out {
                            acc += wv.at(co, ci, 0, 0).to_f64() * grad.at(ni, co, 0, 0).to_f64();
                        }
                        T::from_f64(acc)
                    });
                    send(*x, dx, grads);
                }
                if self.requires(*w) {
                    let dw = TensorOf::from_fn(wv.shape(), |co, ci, _, _| {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            acc += grad.at(ni, co, 0, 0).to_f64() * xv.at(ni, ci, 0, 0).to_f64();
                        }
                        T::from_f64(acc)
                    });
                    send(*w, dw, grads);
                }
                if self.requires(*b) {
                    let db = TensorOf::from_fn(Shape::new(1, c_out, 1, 1), |_, co, _, _| {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            acc += grad.at(ni, co, 0, 0).to_f64();
                        }
                        T::from_f64(acc)
                    });
                    send(*b, db, grads);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                send(*x, TensorOf::new(xv.shape(), data)?, grads);
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[idx].value;
                let data = yv
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&y, &g)| {
                        let y = y.to_f64();
                        T::from_f64(g.to_f64() * y * (1.0 - y))
                    })
                    .collect();
                send(*x, TensorOf::new(yv.shape(), data)?, grads);
            }
            Op::Add { a, b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                if self.requires(*a) {
                    send(*a, grad.clone(), grads);
                }
                if self.requires(*b) {
                    send(*b, reduce_to(grad, sa, sb)?, grads);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires(*a) {
                    // grad * b, broadcasting b the same way the forward did
                    send(*a, ops::mul(grad, bv)?, grads);
                }
                if self.requires(*b) {
                    let ga = ops::mul(grad, av)?;
                    send(*b, reduce_to(&ga, av.shape(), bv.shape())?, grads);
                }
            }
            Op::ExpandChannels { x } => {
                let xs = self.value(*x).shape();
                send(*x, reduce_to(grad, grad.shape(), xs)?, grads);
            }
            Op::Concat { xs } => {
                let gs = grad.shape();
                let hw = gs.h * gs.w;
                let mut c_off = 0;
                for id in xs {
                    let s = self.value(*id).shape();
                    if self.requires(*id) {
                        let mut part = TensorOf::zeros(s);
                        for n in 0..s.n {
                            let src_start = (n * gs.c + c_off) * hw;
                            let dst_start = n * s.c * hw;
                            part.data_mut()[dst_start..dst_start + s.c * hw]
                                .copy_from_slice(&grad.data()[src_start..src_start + s.c * hw]);
                        }
                        send(*id, part, grads);
                    }
                    c_off += s.c;
                }
            }
            Op::L1Loss { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let g = grad.data()[0].to_f64() / av.shape().len() as f64;
                // subgradient convention: sign(0) = 0
                let signs: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| {
                        let d = x.to_f64() - y.to_f64();
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.requires(*a) {
                    let da = TensorOf::new(
                        av.shape(),
                        signs.iter().map(|&s| T::from_f64(s * g)).collect(),
                    )?;
                    send(*a, da, grads);
                }
                if self.requires(*b) {
                    let db = TensorOf::new(
                        bv.shape(),
                        signs.iter().map(|&s| T::from_f64(-s * g)).collect(),
                    )?;
                    send(*b, db, grads);
                }
            }
            Op::MuLaw { x, mu } => {
                let xv = self.value(*x);
                let denom_log = (1.0 + mu).ln();
                let data = xv
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| {
                        let d = mu / ((1.0 + mu * x.to_f64()) * denom_log);
                        T::from_f64(g.to_f64() * d)
                    })
                    .collect();
                send(*x, TensorOf::new(xv.shape(), data)?, grads);
            }
            Op::Scale { x, factor } => {
                send(*x, ops::scale(grad, *factor), grads);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(slot: &mut Option<TensorOf<T>>, delta: TensorOf<T>) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + *b;
            }
        }
    }
}

/// Reduces a full-shape gradient back to the broadcast operand's shape by
/// summing over the replicated axes.
fn reduce_to<T: Element>(
    grad: &TensorOf<T>,
    full: Shape,
    target: Shape,
) -> Result<TensorOf<T>, TensorError> {
    match ops::classify_broadcast("reduce_to", full, target)? {
        ops::Broadcast::Exact => Ok(grad.clone()),
        ops::Broadcast::SpatialMap => {
            let mut out = TensorOf::zeros(target);
            for n in 0..full.n {
                for c in 0..full.c {
                    let plane = grad.plane(n, c);
                    let dst =
                        &mut out.data_mut()[n * full.h * full.w..(n + 1) * full.h * full.w];
                    for (d, g) in dst.iter_mut().zip(plane) {
                        *d = *d + *g;
                    }
                }
            }
            Ok(out)
        }
        ops::Broadcast::ChannelVector => {
            let mut out = TensorOf::zeros(target);
            for n in 0..full.n {
                for c in 0..full.c {
                    let sum: f64 = grad.plane(n, c).iter().map(|v| v.to_f64()).sum();
                    let i = n * full.c + c;
                    out.data_mut()[i] = T::from_f64(sum);
                }
            }
            Ok(out)
        }
    }
}

/// Gradient of a conv bias: sum of the output gradient over batch and space.
fn sum_spatial_and_batch<T: Element>(grad: &TensorOf<T>) -> TensorOf<T> {
    let s = grad.shape();
    TensorOf::from_fn(Shape::new(1, s.c, 1, 1), |_, c, _, _| {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += grad.plane(n, c).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        T::from_f64(acc)
    })
}

/// Gradient of conv2d with respect to its input (transposed convolution).
fn conv2d_grad_input<T: Element>(
    weight: &TensorOf<T>,
    grad: &TensorOf<T>,
    input_shape: Shape,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> TensorOf<T> {
    let ws = weight.shape();
    let gs = grad.shape();
    let k = ws.h;
    let (ih, iw) = (input_shape.h, input_shape.w);
    let plane_in = ih * iw;
    let mut out = vec![T::zero(); input_shape.len()];

    out.par_chunks_mut(plane_in).enumerate().for_each(|(plane_idx, out_plane)| {
        let n = plane_idx / input_shape.c;
        let ci = plane_idx % input_shape.c;
        let mut acc = vec![0.0f64; plane_in];
        for co in 0..gs.c {
            let g = grad.plane(n, co);
            for kh in 0..k {
                let h_off = (kh * dilation) as i64 - padding as i64;
                let Some((oh_lo, oh_hi)) = valid_range(gs.h, stride, h_off, ih) else {
                    continue;
                };
                for kw in 0..k {
                    let w_off = (kw * dilation) as i64 - padding as i64;
                    let Some((ow_lo, ow_hi)) = valid_range(gs.w, stride, w_off, iw) else {
                        continue;
                    };
                    let wv = weight.at(co, ci, kh, kw).to_f64();
                    for oh in oh_lo..=oh_hi {
                        let row_i = (oh as i64 * stride as i64 + h_off) as usize;
                        let g_row = &g[oh * gs.w..(oh + 1) * gs.w];
                        let acc_row = &mut acc[row_i * iw..(row_i + 1) * iw];
                        if stride == 1 {
                            let a_lo = (ow_lo as i64 + w_off) as usize;
                            let span = ow_hi - ow_lo + 1;
                            let accs = &mut acc_row[a_lo..a_lo + span];
                            let gvs = &g_row[ow_lo..ow_lo + span];
                            for (a, gv) in accs.iter_mut().zip(gvs) {
                                *a += wv * gv.to_f64();
                            }
                        } else {
                            for ow in ow_lo..=ow_hi {
                                let col_i = (ow as i64 * stride as i64 + w_off) as usize;
                                acc_row[col_i] += wv * g_row[ow].to_f64();
                            }
                        }
                    }
                }
            }
        }
        for (o, a) in out_plane.iter_mut().zip(&acc) {
            *o = T::from_f64(*a);
        }
    });

    TensorOf::new(input_shape, out).expect("shape consistent by construction")
}

/// Gradient of conv2d with respect to its weight.
fn conv2d_grad_weight<T: Element>(
    input: &TensorOf<T>,
    grad: &TensorOf<T>,
    weight_shape: Shape,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> TensorOf<T> {
    let is = input.shape();
    let gs = grad.shape();
    let k = weight_shape.h;
    let per_co = weight_shape.c * k * k;
    let mut out = vec![T::zero(); weight_shape.len()];

    out.par_chunks_mut(per_co).enumerate().for_each(|(co, w_chunk)| {
        for ci in 0..weight_shape.c {
            for kh in 0..k {
                let h_off = (kh * dilation) as i64 - padding as i64;
                let Some((oh_lo, oh_hi)) = valid_range(gs.h, stride, h_off, is.h) else {
                    continue;
                };
                for kw in 0..k {
                    let w_off = (kw * dilation) as i64 - padding as i64;
                    let Some((ow_lo, ow_hi)) = valid_range(gs.w, stride, w_off, is.w) else {
                        continue;
                    };
                    let mut acc = 0.0f64;
                    for n in 0..is.n {
                        let g = grad.plane(n, co);
                        let x = input.plane(n, ci);
                        for oh in oh_lo..=oh_hi {
                            let row_i = (oh as i64 * stride as i64 + h_off) as usize;
                            let g_row = &g[oh * gs.w..(oh + 1) * gs.w];
                            let x_row = &x[row_i * is.w..(row_i + 1) * is.w];
                            if stride == 1 {
                                let x_lo = (ow_lo as i64 + w_off) as usize;
                                let span = ow_hi - ow_lo + 1;
                                let gvs = &g_row[ow_lo..ow_lo + span];
                                let xvs = &x_row[x_lo..x_lo + span];
                                for (gv, xv) in gvs.iter().zip(xvs) {
                                    acc += gv.to_f64() * xv.to_f64();
                                }
                            } else {
                                for ow in ow_lo..=ow_hi {
                                    let col_i = (ow as i64 * stride as i64 + w_off) as usize;
                                    acc += g_row[ow].to_f64() * x_row[col_i].to_f64();
                                }
                            }
                        }
                    }
                    w_chunk[(ci * k + kh) * k + kw] = T::from_f64(acc);
                }
            }
        }
    });

    TensorOf::new(weight_shape, out).expect("shape consistent by construction")
}
