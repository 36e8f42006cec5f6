//! A small reverse-mode autodiff tape over `ndarray` tensors.
//!
//! Every training step builds a fresh [`Graph`]: leaves hold parameter or
//! input values, op methods compute eagerly and record the tape, and
//! [`Graph::backward`] walks it once in reverse. Nodes reachable only from
//! constants are skipped during the backward pass, which is what keeps the
//! frozen classifier cheap (and provably untouched) while a generator trains
//! against it.
//!
//! Tensor conventions: `[N, F]` for feature matrices, `[N, C, H, W]` for
//! images, 0-d for scalars. All values are `f64`.

mod conv;
mod warp;

pub use warp::WarpPlan;

use ndarray::{ArrayD, Axis, IxDyn};

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Exp(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// `[N,K] x [K,M] -> [N,M]`
    MatMul(NodeId, NodeId),
    /// `[N,F] + [F]`
    AddBias(NodeId, NodeId),
    /// Per-channel mean of `[N,C,...]` over every axis except 1.
    ChannelMean(NodeId),
    MulChannel(NodeId, NodeId),
    AddChannel(NodeId, NodeId),
    LogSoftmax(NodeId),
    Softmax(NodeId),
    /// `out[i] = x[i, idx[i]]`
    PickPerRow(NodeId, Vec<usize>),
    Sum(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        cols: ndarray::Array2<f64>,
    },
    ConvT2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(NodeId),
    Reshape(NodeId),
    ConcatCols(NodeId, NodeId),
    SelectRow(NodeId, usize),
    Warp {
        x: NodeId,
        plans: Vec<WarpPlan>,
    },
    TvLoss(NodeId),
}

struct Node {
    op: Op,
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    needs: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: ArrayD<f64>, needs: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs
    }

    /// A differentiable leaf (parameter or generated input).
    pub fn param(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.ndim(), 0);
        self.nodes[id].value[IxDyn(&[])]
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.nodes[id].grad.as_ref()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value + c;
        let needs = self.needs(a);
        self.push(Op::AddScalar(a), v, needs)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        let needs = self.needs(a);
        self.push(Op::MulScalar(a, c), v, needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        let needs = self.needs(a);
        self.push(Op::Exp(a), v, needs)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        let needs = self.needs(a);
        self.push(Op::Sqrt(a), v, needs)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::recip);
        let needs = self.needs(a);
        self.push(Op::Recip(a), v, needs)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::abs);
        let needs = self.needs(a);
        self.push(Op::Abs(a), v, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(Op::Relu(a), v, needs)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        let needs = self.needs(a);
        self.push(Op::LeakyRelu(a, slope), v, needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        let needs = self.needs(a);
        self.push(Op::Tanh(a), v, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), v, needs)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let bv = as2(&self.nodes[b].value);
        assert_eq!(av.ncols(), bv.nrows());
        let v = av.dot(&bv).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, needs)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let bv = &self.nodes[b].value;
        assert_eq!(xv.ncols(), bv.len());
        let v = (&xv + &bv.view().into_shape_with_order((1, bv.len())).unwrap()).into_dyn();
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::AddBias(x, b), v, needs)
    }

    // ---- channel ops (axis 1 is the channel axis) ----

    pub fn channel_mean(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let c = xv.shape()[1];
        let denom = (xv.len() / c) as f64;
        let mut out = vec![0.0; c];
        for (lane, xc) in out.iter_mut().zip(xv.axis_iter(Axis(1))) {
            *lane = xc.sum() / denom;
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap();
        let needs = self.needs(x);
        self.push(Op::ChannelMean(x), v, needs)
    }

    pub fn mul_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let vv = &self.nodes[v].value;
        assert_eq!(xv.shape()[1], vv.len());
        let mut out = xv.clone();
        for (mut lane, &s) in out.axis_iter_mut(Axis(1)).zip(vv.iter()) {
            lane.mapv_inplace(|e| e * s);
        }
        let needs = self.needs(x) || self.needs(v);
        self.push(Op::MulChannel(x, v), out, needs)
    }

    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let vv = &self.nodes[v].value;
        assert_eq!(xv.shape()[1], vv.len());
        let mut out = xv.clone();
        for (mut lane, &s) in out.axis_iter_mut(Axis(1)).zip(vv.iter()) {
            lane.mapv_inplace(|e| e + s);
        }
        let needs = self.needs(x) || self.needs(v);
        self.push(Op::AddChannel(x, v), out, needs)
    }

    // ---- rows / softmax ----

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.mapv_inplace(|v| v - lse);
        }
        let needs = self.needs(x);
        self.push(Op::LogSoftmax(x), out.into_dyn(), needs)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let needs = self.needs(x);
        self.push(Op::Softmax(x), out.into_dyn(), needs)
    }

    pub fn pick_per_row(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        assert_eq!(xv.nrows(), idx.len());
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xv[[i, j]]).collect();
        let v = ArrayD::from_shape_vec(IxDyn(&[idx.len()]), out).unwrap();
        let needs = self.needs(x);
        self.push(Op::PickPerRow(x, idx), v, needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = scalar(self.nodes[x].value.sum());
        let needs = self.needs(x);
        self.push(Op::Sum(x), v, needs)
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    // ---- structural ----

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.needs(x);
        self.push(Op::Reshape(x), v, needs)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a].value);
        let bv = as2(&self.nodes[b].value);
        assert_eq!(av.nrows(), bv.nrows());
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .unwrap()
            .into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), v, needs)
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let v = xv.row(row).to_owned().into_dyn();
        let needs = self.needs(x);
        self.push(Op::SelectRow(x, row), v, needs)
    }

    // ---- spatial ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let wv = as4(&self.nodes[w].value);
        let (y, cols) = conv::conv2d_fwd(&xv, &wv, stride, pad);
        let needs = self.needs(x) || self.needs(w);
        self.push(
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
            y.into_dyn(),
            needs,
        )
    }

    /// Transposed convolution; `w` is `[Ci, Co, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let wv = as4(&self.nodes[w].value);
        let (_, _, kh, kw) = wv.dim();
        let (_, _, h, wd) = xv.dim();
        let out_h = (h - 1) * stride + kh - 2 * pad;
        let out_w = (wd - 1) * stride + kw - 2 * pad;
        let y = conv::conv2d_bwd_input(&xv, &wv, stride, pad, out_h, out_w);
        let needs = self.needs(x) || self.needs(w);
        self.push(Op::ConvT2d { x, w, stride, pad }, y.into_dyn(), needs)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = ndarray::Array4::<f64>::zeros((n, c, ho, wo));
        let mut argmax = vec![0u32; n * c * ho * wo];
        let mut k = 0;
        for b in 0..n {
            for ch in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (ih, iw) = (2 * oh + di, 2 * ow + dj);
                                let v = xv[[b, ch, ih, iw]];
                                if v > best {
                                    best = v;
                                    best_idx = ((b * c + ch) * h + ih) * w + iw;
                                }
                            }
                        }
                        out[[b, ch, oh, ow]] = best;
                        argmax[k] = best_idx as u32;
                        k += 1;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::MaxPool2 { x, argmax }, out.into_dyn(), needs)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array2::<f64>::zeros((n, c));
        for b in 0..n {
            for ch in 0..c {
                let mut s = 0.0;
                for ih in 0..h {
                    for iw in 0..w {
                        s += xv[[b, ch, ih, iw]];
                    }
                }
                out[[b, ch]] = s / (h * w) as f64;
            }
        }
        let needs = self.needs(x);
        self.push(Op::GlobalAvgPool(x), out.into_dyn(), needs)
    }

    /// Apply one linear warp plan per image (rotation, crop shift, flip...).
    pub fn warp(&mut self, x: NodeId, plans: Vec<WarpPlan>) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (n, _, _, _) = xv.dim();
        assert_eq!(plans.len(), n);
        let y = warp::apply_warp(&xv, &plans);
        let needs = self.needs(x);
        self.push(Op::Warp { x, plans }, y.into_dyn(), needs)
    }

    /// Total variation: squared differences over unordered 4-neighbor pixel
    /// pairs, summed over batch and channels. Zero for non-spatial input.
    pub fn tv_loss(&mut self, x: NodeId) -> NodeId {
        let v = if self.nodes[x].value.ndim() == 4 {
            let xv = as4(&self.nodes[x].value);
            let (n, c, h, w) = xv.dim();
            let mut s = 0.0;
            for b in 0..n {
                for ch in 0..c {
                    for ih in 0..h {
                        for iw in 0..w {
                            let v0 = xv[[b, ch, ih, iw]];
                            if iw + 1 < w {
                                let d = v0 - xv[[b, ch, ih, iw + 1]];
                                s += d * d;
                            }
                            if ih + 1 < h {
                                let d = v0 - xv[[b, ch, ih + 1, iw]];
                                s += d * d;
                            }
                        }
                    }
                }
            }
            s
        } else {
            0.0
        };
        let needs = self.needs(x) && self.nodes[x].value.ndim() == 4;
        self.push(Op::TvLoss(x), scalar(v), needs)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Gradients accumulate on every node
    /// with `needs` set; constants and their pure fan-in are skipped.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.nodes[root].value.ndim(),
            0,
            "backward root must be scalar"
        );
        if !self.nodes[root].needs {
            return;
        }
        self.nodes[root].grad = Some(scalar(1.0));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs || self.nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(head, *a, g.clone());
                    acc(head, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(head, *a, g.clone());
                    acc(head, *b, -g);
                }
                Op::Mul(a, b) => {
                    let da = g * &head[*b].value;
                    let db = g * &head[*a].value;
                    acc(head, *a, da);
                    acc(head, *b, db);
                }
                Op::AddScalar(a) => acc(head, *a, g.clone()),
                Op::MulScalar(a, c) => acc(head, *a, g * *c),
                Op::Exp(a) => acc(head, *a, g * &node.value),
                Op::Sqrt(a) => {
                    let d = ndarray::Zip::from(g)
                        .and(&node.value)
                        .map_collect(|&gv, &ov| 0.5 * gv / ov);
                    acc(head, *a, d);
                }
                Op::Recip(a) => {
                    let d = ndarray::Zip::from(g)
                        .and(&node.value)
                        .map_collect(|&gv, &ov| -gv * ov * ov);
                    acc(head, *a, d);
                }
                Op::Abs(a) => {
                    let d = ndarray::Zip::from(g)
                        .and(&head[*a].value)
                        .map_collect(|&gv, &xv| gv * sign(xv));
                    acc(head, *a, d);
                }
                Op::Relu(a) => {
                    let d = ndarray::Zip::from(g)
                        .and(&head[*a].value)
                        .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(head, *a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let d = ndarray::Zip::from(g)
                        .and(&head[*a].value)
                        .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { s * gv });
                    acc(head, *a, d);
                }
                Op::Tanh(a) => {
                    let d = ndarray::Zip::from(g)
                        .and(&node.value)
                        .map_collect(|&gv, &ov| gv * (1.0 - ov * ov));
                    acc(head, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = ndarray::Zip::from(g)
                        .and(&node.value)
                        .map_collect(|&gv, &ov| gv * ov * (1.0 - ov));
                    acc(head, *a, d);
                }
                Op::MatMul(a, b) => {
                    let g2 = as2(g);
                    if head[*a].needs {
                        let da = g2.dot(&as2(&head[*b].value).t()).into_dyn();
                        acc(head, *a, da);
                    }
                    if head[*b].needs {
                        let db = as2(&head[*a].value).t().dot(&g2).into_dyn();
                        acc(head, *b, db);
                    }
                }
                Op::AddBias(x, b) => {
                    if head[*x].needs {
                        acc(head, *x, g.clone());
                    }
                    if head[*b].needs {
                        let db = as2(g).sum_axis(Axis(0)).into_dyn();
                        acc(head, *b, db);
                    }
                }
                Op::ChannelMean(x) => {
                    let xv = &head[*x].value;
                    let c = xv.shape()[1];
                    let denom = (xv.len() / c) as f64;
                    let mut d = ArrayD::zeros(xv.raw_dim());
                    for (mut lane, &gv) in d.axis_iter_mut(Axis(1)).zip(g.iter()) {
                        lane.fill(gv / denom);
                    }
                    acc(head, *x, d);
                }
                Op::MulChannel(x, v) => {
                    if head[*x].needs {
                        let mut d = g.clone();
                        for (mut lane, &s) in d.axis_iter_mut(Axis(1)).zip(head[*v].value.iter()) {
                            lane.mapv_inplace(|e| e * s);
                        }
                        acc(head, *x, d);
                    }
                    if head[*v].needs {
                        let xv = &head[*x].value;
                        let c = xv.shape()[1];
                        let mut dv = vec![0.0; c];
                        for ((dvc, gx), xc) in dv
                            .iter_mut()
                            .zip(g.axis_iter(Axis(1)))
                            .zip(xv.axis_iter(Axis(1)))
                        {
                            *dvc = ndarray::Zip::from(&gx).and(&xc).fold(0.0, |s, &a, &b| s + a * b);
                        }
                        acc(head, *v, ArrayD::from_shape_vec(IxDyn(&[c]), dv).unwrap());
                    }
                }
                Op::AddChannel(x, v) => {
                    if head[*x].needs {
                        acc(head, *x, g.clone());
                    }
                    if head[*v].needs {
                        let c = g.shape()[1];
                        let dv: Vec<f64> = g.axis_iter(Axis(1)).map(|lane| lane.sum()).collect();
                        acc(head, *v, ArrayD::from_shape_vec(IxDyn(&[c]), dv).unwrap());
                    }
                }
                Op::LogSoftmax(x) => {
                    let g2 = as2(g);
                    let out = as2(&node.value);
                    let mut d = g2.to_owned();
                    for (mut drow, orow) in d.rows_mut().into_iter().zip(out.rows()) {
                        let gsum: f64 = drow.sum();
                        ndarray::Zip::from(&mut drow)
                            .and(&orow)
                            .for_each(|dv, &ov| *dv -= ov.exp() * gsum);
                    }
                    acc(head, *x, d.into_dyn());
                }
                Op::Softmax(x) => {
                    let g2 = as2(g);
                    let out = as2(&node.value);
                    let mut d = g2.to_owned();
                    for (mut drow, orow) in d.rows_mut().into_iter().zip(out.rows()) {
                        let dot: f64 = drow
                            .iter()
                            .zip(orow.iter())
                            .map(|(&a, &b)| a * b)
                            .sum();
                        ndarray::Zip::from(&mut drow)
                            .and(&orow)
                            .for_each(|dv, &ov| *dv = ov * (*dv - dot));
                    }
                    acc(head, *x, d.into_dyn());
                }
                Op::PickPerRow(x, idx) => {
                    let xv = &head[*x].value;
                    let mut d = ndarray::Array2::<f64>::zeros((xv.shape()[0], xv.shape()[1]));
                    for (i, &j) in idx.iter().enumerate() {
                        d[[i, j]] += g[IxDyn(&[i])];
                    }
                    acc(head, *x, d.into_dyn());
                }
                Op::Sum(x) => {
                    let gv = g[IxDyn(&[])];
                    let d = ArrayD::from_elem(head[*x].value.raw_dim(), gv);
                    acc(head, *x, d);
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    pad,
                    cols,
                } => {
                    let g4 = as4(g);
                    if head[*x].needs {
                        let xs = head[*x].value.shape();
                        let wv = as4(&head[*w].value);
                        let dx = conv::conv2d_bwd_input(&g4, &wv, *stride, *pad, xs[2], xs[3]);
                        acc(head, *x, dx.into_dyn());
                    }
                    if head[*w].needs {
                        let ws = head[*w].value.shape();
                        let dw = conv::conv2d_bwd_weight(&g4, cols, ws[0], ws[1], ws[2], ws[3]);
                        acc(head, *w, dw.into_dyn());
                    }
                }
                Op::ConvT2d { x, w, stride, pad } => {
                    let g4 = as4(g);
                    let wv = as4(&head[*w].value);
                    if head[*x].needs {
                        // adjoint of the adjoint: a plain strided convolution
                        let (dx, _) = conv::conv2d_fwd(&g4, &wv, *stride, *pad);
                        acc(head, *x, dx.into_dyn());
                    }
                    if head[*w].needs {
                        let xv = as4(&head[*x].value);
                        let ws = head[*w].value.shape();
                        // roles swapped: x plays dy of the mirror conv, g its input
                        let cols = conv::im2col(&g4, ws[2], ws[3], *stride, *pad);
                        let dw = conv::conv2d_bwd_weight(&xv, &cols, ws[0], ws[1], ws[2], ws[3]);
                        acc(head, *w, dw.into_dyn());
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut d = ArrayD::zeros(head[*x].value.raw_dim());
                    let ds = d.as_slice_mut().unwrap();
                    for (&ai, &gv) in argmax.iter().zip(g.iter()) {
                        ds[ai as usize] += gv;
                    }
                    acc(head, *x, d);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = head[*x].value.shape().to_vec();
                    let (h, w) = (xs[2], xs[3]);
                    let scale = 1.0 / (h * w) as f64;
                    let g2 = as2(g);
                    let mut d = ndarray::Array4::<f64>::zeros((xs[0], xs[1], h, w));
                    for b in 0..xs[0] {
                        for c in 0..xs[1] {
                            let gv = g2[[b, c]] * scale;
                            for ih in 0..h {
                                for iw in 0..w {
                                    d[[b, c, ih, iw]] = gv;
                                }
                            }
                        }
                    }
                    acc(head, *x, d.into_dyn());
                }
                Op::Reshape(x) => {
                    let d = g
                        .clone()
                        .into_shape_with_order(head[*x].value.raw_dim())
                        .unwrap();
                    acc(head, *x, d);
                }
                Op::ConcatCols(a, b) => {
                    let g2 = as2(g);
                    let ca = head[*a].value.shape()[1];
                    if head[*a].needs {
                        let da = g2.slice(ndarray::s![.., ..ca]).to_owned().into_dyn();
                        acc(head, *a, da);
                    }
                    if head[*b].needs {
                        let db = g2.slice(ndarray::s![.., ca..]).to_owned().into_dyn();
                        acc(head, *b, db);
                    }
                }
                Op::SelectRow(x, row) => {
                    let xv = &head[*x].value;
                    let mut d = ndarray::Array2::<f64>::zeros((xv.shape()[0], xv.shape()[1]));
                    for (j, &gv) in g.iter().enumerate() {
                        d[[*row, j]] = gv;
                    }
                    acc(head, *x, d.into_dyn());
                }
                Op::Warp { x, plans } => {
                    let g4 = as4(g);
                    let xs = head[*x].value.shape();
                    let d = warp::warp_backward(&g4, plans, xs[2], xs[3]);
                    acc(head, *x, d.into_dyn());
                }
                Op::TvLoss(x) => {
                    if head[*x].value.ndim() == 4 {
                        let gv = g[IxDyn(&[])];
                        let xv = as4(&head[*x].value);
                        let (n, c, h, w) = xv.dim();
                        let mut d = ndarray::Array4::<f64>::zeros((n, c, h, w));
                        for b in 0..n {
                            for ch in 0..c {
                                for ih in 0..h {
                                    for iw in 0..w {
                                        let v0 = xv[[b, ch, ih, iw]];
                                        if iw + 1 < w {
                                            let diff = 2.0 * gv * (v0 - xv[[b, ch, ih, iw + 1]]);
                                            d[[b, ch, ih, iw]] += diff;
                                            d[[b, ch, ih, iw + 1]] -= diff;
                                        }
                                        if ih + 1 < h {
                                            let diff = 2.0 * gv * (v0 - xv[[b, ch, ih + 1, iw]]);
                                            d[[b, ch, ih, iw]] += diff;
                                            d[[b, ch, ih + 1, iw]] -= diff;
                                        }
                                    }
                                }
                            }
                        }
                        acc(head, *x, d.into_dyn());
                    }
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn acc(nodes: &mut [Node], id: NodeId, delta: ArrayD<f64>) {
    let n = &mut nodes[id];
    if !n.needs {
        return;
    }
    match &mut n.grad {
        Some(g) => *g += &delta,
        None => n.grad = Some(delta),
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality().expect("expected 2-d tensor")
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality().expect("expected 4-d tensor")
}

/// Apply warp plans to a plain batch (no graph involved).
pub fn apply_warp_value(
    x: &ndarray::ArrayView4<f64>,
    plans: &[WarpPlan],
) -> ndarray::Array4<f64> {
    warp::apply_warp(x, plans)
}

/// Central finite differences of a scalar-valued function of one leaf tensor.
/// Used by the gradient-check test suites as the independent oracle.
pub fn finite_difference<F>(mut f: F, x: &ArrayD<f64>, coord: &[usize], h: f64) -> f64
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut xp = x.clone();
    xp[IxDyn(coord)] += h;
    let fp = f(&xp);
    xp[IxDyn(coord)] = x[IxDyn(coord)] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::util::rng_from(seed);
        let mut a = ArrayD::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = crate::util::sample_normal(&mut rng);
        }
        a
    }

    /// Gradient check a scalar function built from a single leaf.
    fn check_unary<F>(build: F, x: ArrayD<f64>, tol: f64)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let out = build(&mut g, xid);
        g.backward(out);
        let analytic = g.grad(xid).expect("missing grad").clone();

        let mut rng = crate::util::rng_from(99);
        let ncheck = x.len().min(12);
        for _ in 0..ncheck {
            let flat = rng.gen_range(0..x.len());
            let coord = flat_to_coord(x.shape(), flat);
            let fd = finite_difference(
                |xv| {
                    let mut g = Graph::new();
                    let xid = g.param(xv.clone());
                    let out = build(&mut g, xid);
                    g.scalar_value(out)
                },
                &x,
                &coord,
                1e-5,
            );
            let a = analytic[IxDyn(&coord)];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!(
                (a - fd).abs() / denom < tol,
                "coord {coord:?}: analytic {a} vs fd {fd}"
            );
        }
    }

    fn flat_to_coord(shape: &[usize], mut flat: usize) -> Vec<usize> {
        let mut coord = vec![0; shape.len()];
        for i in (0..shape.len()).rev() {
            coord[i] = flat % shape[i];
            flat /= shape[i];
        }
        coord
    }

    use rand::Rng;

    #[test]
    fn elementwise_grads() {
        check_unary(
            |g, x| {
                let e = g.exp(x);
                let t = g.tanh(e);
                let s = g.sigmoid(t);
                g.sum(s)
            },
            randn(&[3, 4], 1),
            1e-6,
        );
        check_unary(
            |g, x| {
                let a = g.abs(x);
                let r = g.add_scalar(a, 1.0);
                let q = g.sqrt(r);
                let rc = g.recip(q);
                g.sum(rc)
            },
            randn(&[5], 2),
            1e-6,
        );
        check_unary(
            |g, x| {
                let r = g.leaky_relu(x, 0.2);
                let m = g.mul(r, r);
                g.sum(m)
            },
            randn(&[4, 3], 3),
            1e-6,
        );
    }

    #[test]
    fn matmul_and_bias_grads() {
        let w = randn(&[4, 3], 7);
        let b = randn(&[3], 8);
        check_unary(
            |g, x| {
                let wid = g.param(w.clone());
                let bid = g.param(b.clone());
                let y = g.matmul(x, wid);
                let y = g.add_bias(y, bid);
                let y = g.relu(y);
                g.sum(y)
            },
            randn(&[2, 4], 9),
            1e-6,
        );
    }

    #[test]
    fn softmax_grads() {
        check_unary(
            |g, x| {
                let ls = g.log_softmax(x);
                let p = g.pick_per_row(ls, vec![0, 2, 1]);
                let s = g.sum(p);
                g.mul_scalar(s, -1.0)
            },
            randn(&[3, 4], 10),
            1e-5,
        );
        check_unary(
            |g, x| {
                let sm = g.softmax(x);
                let m = g.mul(sm, sm);
                g.sum(m)
            },
            randn(&[3, 4], 11),
            1e-5,
        );
    }

    #[test]
    fn channel_op_grads() {
        let v = randn(&[3], 20);
        check_unary(
            |g, x| {
                let vid = g.param(v.clone());
                let m = g.mul_channel(x, vid);
                let a = g.add_channel(m, vid);
                let cm = g.channel_mean(a);
                let sq = g.mul(cm, cm);
                g.sum(sq)
            },
            randn(&[2, 3, 4, 4], 21),
            1e-6,
        );
    }

    #[test]
    fn conv_grads() {
        let w = randn(&[3, 2, 3, 3], 30) * 0.5;
        check_unary(
            |g, x| {
                let wid = g.param(w.clone());
                let y = g.conv2d(x, wid, 1, 1);
                let y = g.relu(y);
                g.sum(y)
            },
            randn(&[2, 2, 5, 5], 31),
            1e-5,
        );
        // weight gradient
        let x = randn(&[2, 2, 5, 5], 32);
        check_unary(
            |g, w| {
                let xid = g.param(x.clone());
                let y = g.conv2d(xid, w, 2, 1);
                let m = g.mul(y, y);
                g.sum(m)
            },
            randn(&[3, 2, 3, 3], 33),
            1e-5,
        );
    }

    #[test]
    fn conv_transpose_grads() {
        let w = randn(&[3, 2, 4, 4], 40) * 0.4;
        check_unary(
            |g, x| {
                let wid = g.param(w.clone());
                let y = g.conv_transpose2d(x, wid, 2, 1);
                let m = g.mul(y, y);
                g.sum(m)
            },
            randn(&[2, 3, 3, 3], 41),
            1e-5,
        );
        let x = randn(&[2, 3, 3, 3], 42);
        check_unary(
            |g, w| {
                let xid = g.param(x.clone());
                let y = g.conv_transpose2d(xid, w, 2, 1);
                let m = g.mul(y, y);
                g.sum(m)
            },
            randn(&[3, 2, 4, 4], 43),
            1e-5,
        );
    }

    #[test]
    fn conv_transpose_doubles_spatial_dims() {
        let mut g = Graph::new();
        let x = g.constant(randn(&[1, 3, 4, 4], 50));
        let w = g.constant(randn(&[3, 2, 4, 4], 51));
        let y = g.conv_transpose2d(x, w, 2, 1);
        assert_eq!(g.value(y).shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn pool_and_structural_grads() {
        check_unary(
            |g, x| {
                let p = g.maxpool2(x);
                let gp = g.global_avg_pool(p);
                let m = g.mul(gp, gp);
                g.sum(m)
            },
            randn(&[2, 3, 4, 4], 60),
            1e-5,
        );
        check_unary(
            |g, x| {
                let r = g.reshape(x, &[2, 8]);
                let row = g.select_row(r, 1);
                let m = g.mul(row, row);
                g.sum(m)
            },
            randn(&[2, 2, 2, 2], 61),
            1e-6,
        );
        let b = randn(&[2, 3], 62);
        check_unary(
            |g, x| {
                let bid = g.param(b.clone());
                let cat = g.concat_cols(x, bid);
                let sm = g.softmax(cat);
                let m = g.mul(sm, sm);
                g.sum(m)
            },
            randn(&[2, 4], 63),
            1e-5,
        );
    }

    #[test]
    fn tv_loss_grad_and_values() {
        // 1x2 image [0, 1] -> single pair, squared diff 1
        let mut g = Graph::new();
        let x = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![0.0, 1.0]).unwrap(),
        );
        let tv = g.tv_loss(x);
        assert_eq!(g.scalar_value(tv), 1.0);

        // 2x2 checkerboard -> 4 unordered adjacent pairs, each diff^2 = 1
        let mut g = Graph::new();
        let x = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        );
        let tv = g.tv_loss(x);
        assert_eq!(g.scalar_value(tv), 4.0);

        check_unary(|g, x| g.tv_loss(x), randn(&[2, 1, 3, 3], 70), 1e-6);

        // non-spatial input contributes zero
        let mut g = Graph::new();
        let x = g.param(randn(&[3, 2], 71));
        let tv = g.tv_loss(x);
        assert_eq!(g.scalar_value(tv), 0.0);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let x = g.param(randn(&[2, 2], 80));
        let c = g.constant(randn(&[2, 2], 81));
        let m = g.mul(x, c);
        let s = g.sum(m);
        g.backward(s);
        assert!(g.grad(x).is_some());
        assert!(g.grad(c).is_none());
    }
}
