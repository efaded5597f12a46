use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{col2im_add, conv_output_size, im2col, ConvGeometry};
use super::{check_same_shape, Real, Tensor};
use crate::error::{ensure_contract, ensure_dims, Error, Result};

/// Index of a node in a [`Graph`]. Ids increase strictly in creation order,
/// so every node's inputs have smaller ids than the node itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed bilinear sampling pattern for backward warping.
///
/// Output pixel `p` reads the source at `p + flow(p)`; each of the four
/// bilinear taps that falls outside the source grid contributes zero.
#[derive(Clone, Debug)]
pub struct WarpPlan<T> {
    height: usize,
    width: usize,
    taps: Vec<[(usize, T); 4]>,
}

impl<T: Real> WarpPlan<T> {
    /// `dx`/`dy` are row-major `height × width` displacements in grid cells.
    pub fn new(height: usize, width: usize, dx: &[f32], dy: &[f32]) -> Result<Self> {
        ensure_dims!(
            dx.len() == height * width && dy.len() == height * width,
            "flow of {}/{} values does not cover a {height}x{width} grid",
            dx.len(),
            dy.len()
        );
        let mut taps = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let sx = x as f64 + dx[i] as f64;
                let sy = y as f64 + dy[i] as f64;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let corner = |cx: f64, cy: f64, wgt: f64| -> (usize, T) {
                    let inside =
                        cx >= 0.0 && cy >= 0.0 && cx < width as f64 && cy < height as f64;
                    if inside && wgt != 0.0 {
                        (cy as usize * width + cx as usize, T::lit(wgt))
                    } else {
                        (0, T::zero())
                    }
                };
                taps.push([
                    corner(x0, y0, (1.0 - fx) * (1.0 - fy)),
                    corner(x0 + 1.0, y0, fx * (1.0 - fy)),
                    corner(x0, y0 + 1.0, (1.0 - fx) * fy),
                    corner(x0 + 1.0, y0 + 1.0, fx * fy),
                ]);
            }
        }
        Ok(WarpPlan {
            height,
            width,
            taps,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn apply(&self, src: &[T]) -> Vec<T> {
        self.taps
            .iter()
            .map(|taps| {
                taps.iter()
                    .fold(T::zero(), |acc, &(idx, w)| acc + w * src[idx])
            })
            .collect()
    }

    fn apply_adjoint(&self, grad_out: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.height * self.width];
        for (taps, &g) in self.taps.iter().zip(grad_out) {
            for &(idx, w) in taps {
                out[idx] = out[idx] + w * g;
            }
        }
        out
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
        out_channels: usize,
        cols: Vec<T>,
    },
    BiasAdd {
        input: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    GlobalAvgPool(NodeId),
    L1 {
        a: NodeId,
        b: NodeId,
    },
    Max {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: T,
    },
    Sum(NodeId),
    SelectChannel {
        input: NodeId,
        channel: usize,
    },
    MaxAll {
        input: NodeId,
        argmax: usize,
    },
    ClampMin {
        input: NodeId,
        min: T,
    },
    DivScalar {
        input: NodeId,
        divisor: NodeId,
    },
    Warp {
        input: NodeId,
        plan: Rc<WarpPlan<T>>,
    },
    MergeQuad {
        parts: [NodeId; 4],
    },
    SoftMargin {
        input: NodeId,
        target: Vec<T>,
        eps: T,
    },
    SoftMarginLogits {
        input: NodeId,
        target: Vec<T>,
    },
    Reshape(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd { .. } => "bias_add",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::L1 { .. } => "l1_distance",
            Op::Max { .. } => "elementwise_max",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Sum(_) => "sum",
            Op::SelectChannel { .. } => "select_channel",
            Op::MaxAll { .. } => "max_all",
            Op::ClampMin { .. } => "clamp_min",
            Op::DivScalar { .. } => "div_scalar",
            Op::Warp { .. } => "warp",
            Op::MergeQuad { .. } => "merge",
            Op::SoftMargin { .. } => "soft_margin_loss",
            Op::SoftMarginLogits { .. } => "soft_margin_loss_logits",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

/// Append-only computation graph.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real = f32> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.value().shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked (a parameter).
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf without gradient tracking (an input or a detached value).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, value, false)
    }

    fn push(&self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    /// Reverse-mode pass from a one-element `loss`.
    ///
    /// The graph itself is not mutated, so calling this twice yields the same
    /// gradients bit for bit.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        ensure_contract!(
            std::ptr::eq(loss.graph, self),
            "backward called with a variable from another graph"
        );
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id.0];
        ensure_contract!(
            root.value.len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            root.value.shape()
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id.0] = Some(vec![T::one()]);

        for idx in (0..=loss.id.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|data| Tensor {
                        shape: node.value.shape().to_vec(),
                        data,
                    })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, contribution: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let wants = |id: NodeId| nodes[id.0].requires_grad;
    let val = |id: NodeId| &nodes[id.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            geom,
            out_channels,
            cols,
        } => {
            let x = val(*input);
            let w = val(*kernel);
            let n = x.shape()[0];
            let rows = geom.col_rows();
            let ncols = geom.col_cols();
            let o = *out_channels;
            if wants(*kernel) {
                let mut gw = vec![T::zero(); o * rows];
                for b in 0..n {
                    let gout = &g[b * o * ncols..(b + 1) * o * ncols];
                    let col = &cols[b * rows * ncols..(b + 1) * rows * ncols];
                    T::gemm(o, ncols, rows, gout, false, col, true, T::one(), &mut gw);
                }
                accumulate(grads, *kernel, gw);
            }
            if wants(*input) {
                let plane = geom.channels * geom.height * geom.width;
                let mut gx = vec![T::zero(); n * plane];
                let mut gcols = vec![T::zero(); rows * ncols];
                for b in 0..n {
                    let gout = &g[b * o * ncols..(b + 1) * o * ncols];
                    T::gemm(rows, o, ncols, w.data(), true, gout, false, T::zero(), &mut gcols);
                    col2im_add(geom, &gcols, &mut gx[b * plane..(b + 1) * plane]);
                }
                accumulate(grads, *input, gx);
            }
        }
        Op::BiasAdd { input, bias } => {
            let (n, c, h, w) = val(*input).dims4()?;
            if wants(*bias) {
                let mut gb = vec![T::zero(); c];
                for b in 0..n {
                    for (ch, acc) in gb.iter_mut().enumerate() {
                        let start = (b * c + ch) * h * w;
                        *acc = *acc + g[start..start + h * w].iter().copied().sum::<T>();
                    }
                }
                accumulate(grads, *bias, gb);
            }
            if wants(*input) {
                accumulate(grads, *input, g.to_vec());
            }
        }
        Op::Relu(input) => {
            if wants(*input) {
                let x = val(*input);
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *input, gx);
            }
        }
        Op::Sigmoid(input) => {
            if wants(*input) {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gv)| gv * s * (T::one() - s))
                    .collect();
                accumulate(grads, *input, gx);
            }
        }
        Op::GlobalAvgPool(input) => {
            if wants(*input) {
                let (n, c, h, w) = val(*input).dims4()?;
                let inv = T::one() / T::lit((h * w) as f64);
                let mut gx = Vec::with_capacity(n * c * h * w);
                for &gv in g.iter().take(n * c) {
                    gx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                accumulate(grads, *input, gx);
            }
        }
        Op::L1 { a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let signs: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| {
                    let d = x - y;
                    if d > T::zero() {
                        g[0]
                    } else if d < T::zero() {
                        -g[0]
                    } else {
                        T::zero()
                    }
                })
                .collect();
            if wants(*b) {
                accumulate(grads, *b, signs.iter().map(|&s| -s).collect());
            }
            if wants(*a) {
                accumulate(grads, *a, signs);
            }
        }
        Op::Max { a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let to_a: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x >= y)
                .collect();
            if wants(*a) {
                let ga = to_a
                    .iter()
                    .zip(g)
                    .map(|(&sel, &gv)| if sel { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *a, ga);
            }
            if wants(*b) {
                let gb = to_a
                    .iter()
                    .zip(g)
                    .map(|(&sel, &gv)| if sel { T::zero() } else { gv })
                    .collect();
                accumulate(grads, *b, gb);
            }
        }
        Op::Add { a, b } => {
            if wants(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if wants(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Scale { input, factor } => {
            if wants(*input) {
                accumulate(grads, *input, g.iter().map(|&v| v * *factor).collect());
            }
        }
        Op::Sum(input) => {
            if wants(*input) {
                accumulate(grads, *input, vec![g[0]; val(*input).len()]);
            }
        }
        Op::SelectChannel { input, channel } => {
            if wants(*input) {
                let (n, c, h, w) = val(*input).dims4()?;
                let plane = h * w;
                let mut gx = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + channel) * plane;
                    gx[dst..dst + plane].copy_from_slice(&g[b * plane..(b + 1) * plane]);
                }
                accumulate(grads, *input, gx);
            }
        }
        Op::MaxAll { input, argmax } => {
            if wants(*input) {
                let mut gx = vec![T::zero(); val(*input).len()];
                gx[*argmax] = g[0];
                accumulate(grads, *input, gx);
            }
        }
        Op::ClampMin { input, min } => {
            if wants(*input) {
                let x = val(*input);
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > *min { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *input, gx);
            }
        }
        Op::DivScalar { input, divisor } => {
            let d = val(*divisor).data()[0];
            if wants(*divisor) {
                // d(x/d)/dd = -x/d² = -out/d
                let s: T = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&o, &gv)| gv * o)
                    .sum();
                accumulate(grads, *divisor, vec![-s / d]);
            }
            if wants(*input) {
                accumulate(grads, *input, g.iter().map(|&gv| gv / d).collect());
            }
        }
        Op::Warp { input, plan } => {
            if wants(*input) {
                accumulate(grads, *input, plan.apply_adjoint(g));
            }
        }
        Op::MergeQuad { parts } => {
            let (n, c, h, w) = val(parts[0]).dims4()?;
            let ow = 2 * w;
            for (q, part) in parts.iter().enumerate() {
                if !wants(*part) {
                    continue;
                }
                let (qy, qx) = (q / 2, q % 2);
                let mut gp = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..h {
                        let src = plane * 4 * h * w + (qy * h + y) * ow + qx * w;
                        let dst = plane * h * w + y * w;
                        gp[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                accumulate(grads, *part, gp);
            }
        }
        Op::SoftMargin { input, target, eps } => {
            if wants(*input) {
                let x = val(*input);
                let lo = *eps;
                let hi = T::one() - *eps;
                let gx = x
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &z)| {
                        if p <= lo || p >= hi {
                            T::zero()
                        } else if z > T::lit(0.5) {
                            -g[0] / p
                        } else {
                            g[0] / (T::one() - p)
                        }
                    })
                    .collect();
                accumulate(grads, *input, gx);
            }
        }
        Op::SoftMarginLogits { input, target } => {
            if wants(*input) {
                let x = val(*input);
                let gx = x
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&v, &z)| g[0] * (sigmoid(v) - z))
                    .collect();
                accumulate(grads, *input, gx);
            }
        }
        Op::Reshape(input) => {
            if wants(*input) {
                accumulate(grads, *input, g.to_vec());
            }
        }
    }
    Ok(())
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Name of the op that produced this node.
    pub fn op_name(&self) -> &'static str {
        self.graph.nodes.borrow()[self.id.0].op.name()
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        ensure_contract!(
            std::ptr::eq(self.graph, other.graph),
            "variables belong to different graphs"
        );
        Ok(())
    }

    fn unary(&self, op: Op<T>, value: Tensor<T>) -> Var<'g, T> {
        let rg = self.requires_grad();
        self.graph.push(op, value, rg)
    }

    fn binary(&self, other: &Var<'g, T>, op: Op<T>, value: Tensor<T>) -> Var<'g, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(op, value, rg)
    }

    /// Same node cut off from gradient flow.
    pub fn detach(&self) -> Var<'g, T> {
        let v = (*self.value()).clone();
        self.graph.constant(v)
    }

    /// 2-D convolution of an NCHW input with an OIKK kernel, zero padding.
    pub fn conv2d(&self, kernel: &Var<'g, T>, stride: usize, padding: usize) -> Result<Var<'g, T>> {
        self.same_graph(kernel)?;
        let x = self.value();
        let w = kernel.value();
        let (n, c, h, wd) = x.dims4()?;
        let (o, ci, kh, kw) = w.dims4()?;
        ensure_dims!(
            ci == c,
            "conv2d: input has {c} channels but kernel expects {ci}"
        );
        ensure_dims!(kh == kw, "conv2d: kernel must be square, got {kh}x{kw}");
        ensure_contract!(stride >= 1, "conv2d: stride must be >= 1");
        let (Some(out_h), Some(out_w)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(wd, kw, stride, padding),
        ) else {
            return Err(Error::Dimension(format!(
                "conv2d: {h}x{wd} input with padding {padding} is smaller than kernel {kh}"
            )));
        };
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        };
        let rows = geom.col_rows();
        let ncols = geom.col_cols();
        let plane = c * h * wd;
        let mut cols = vec![T::zero(); n * rows * ncols];
        let mut out = vec![T::zero(); n * o * ncols];
        for b in 0..n {
            let col = &mut cols[b * rows * ncols..(b + 1) * rows * ncols];
            im2col(&geom, &x.data()[b * plane..(b + 1) * plane], col);
            T::gemm(
                o,
                rows,
                ncols,
                w.data(),
                false,
                col,
                false,
                T::zero(),
                &mut out[b * o * ncols..(b + 1) * o * ncols],
            );
        }
        let value = Tensor::new(&[n, o, out_h, out_w], out)?;
        Ok(self.binary(
            kernel,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
                out_channels: o,
                cols,
            },
            value,
        ))
    }

    /// Adds a per-channel bias of length C to an NCHW tensor.
    pub fn bias_add(&self, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(bias)?;
        let x = self.value();
        let b = bias.value();
        let (n, c, h, w) = x.dims4()?;
        ensure_dims!(
            b.len() == c,
            "bias_add: bias has {} values for {c} channels",
            b.len()
        );
        let mut out = x.data().to_vec();
        for bi in 0..n {
            for ch in 0..c {
                let start = (bi * c + ch) * h * w;
                for v in &mut out[start..start + h * w] {
                    *v = *v + b.data()[ch];
                }
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.binary(
            bias,
            Op::BiasAdd {
                input: self.id,
                bias: bias.id,
            },
            value,
        ))
    }

    pub fn relu(&self) -> Var<'g, T> {
        let value = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(Op::Relu(self.id), value)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let value = self.value().map(sigmoid);
        self.unary(Op::Sigmoid(self.id), value)
    }

    /// Mean over H and W of an NCHW tensor, giving shape `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        ensure_dims!(h >= 1 && w >= 1, "global_avg_pool on empty spatial grid");
        let inv = T::one() / T::lit((h * w) as f64);
        let out: Vec<T> = x
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.unary(Op::GlobalAvgPool(self.id), value))
    }

    /// `Σ |a − b|` as a scalar.
    pub fn l1_distance(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        check_same_shape("l1_distance", &a, &b)?;
        let s: T = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        Ok(self.binary(
            other,
            Op::L1 {
                a: self.id,
                b: other.id,
            },
            Tensor::scalar(s),
        ))
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn elementwise_max(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        check_same_shape("elementwise_max", &a, &b)?;
        let out = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let value = Tensor::new(a.shape(), out)?;
        Ok(self.binary(
            other,
            Op::Max {
                a: self.id,
                b: other.id,
            },
            value,
        ))
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(other)?;
        let a = self.value();
        let b = other.value();
        check_same_shape("add", &a, &b)?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(a.shape(), out)?;
        Ok(self.binary(
            other,
            Op::Add {
                a: self.id,
                b: other.id,
            },
            value,
        ))
    }

    pub fn scale(&self, factor: T) -> Var<'g, T> {
        let value = self.value().map(|v| v * factor);
        self.unary(
            Op::Scale {
                input: self.id,
                factor,
            },
            value,
        )
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    /// Channel `channel` of an NCHW tensor, as `[N, 1, H, W]`.
    pub fn select_channel(&self, channel: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        ensure_dims!(channel < c, "channel {channel} out of range for {c} channels");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for b in 0..n {
            let start = (b * c + channel) * plane;
            out.extend_from_slice(&x.data()[start..start + plane]);
        }
        let value = Tensor::new(&[n, 1, h, w], out)?;
        Ok(self.unary(
            Op::SelectChannel {
                input: self.id,
                channel,
            },
            value,
        ))
    }

    /// Largest element as a scalar; the gradient goes to the first argmax.
    pub fn max_all(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        ensure_dims!(!x.is_empty(), "max_all of an empty tensor");
        let mut argmax = 0;
        for (i, &v) in x.data().iter().enumerate() {
            if v > x.data()[argmax] {
                argmax = i;
            }
        }
        let value = Tensor::scalar(x.data()[argmax]);
        Ok(self.unary(
            Op::MaxAll {
                input: self.id,
                argmax,
            },
            value,
        ))
    }

    /// `max(x, min)` elementwise; no gradient where the floor is active.
    pub fn clamp_min(&self, min: T) -> Var<'g, T> {
        let value = self.value().map(|v| if v > min { v } else { min });
        self.unary(Op::ClampMin { input: self.id, min }, value)
    }

    /// Divides every element by a one-element tensor.
    pub fn div_scalar(&self, divisor: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(divisor)?;
        let d = divisor.value().item()?;
        let value = self.value().map(|v| v / d);
        Ok(self.binary(
            divisor,
            Op::DivScalar {
                input: self.id,
                divisor: divisor.id,
            },
            value,
        ))
    }

    /// Backward warp of a single-channel map using a fixed sampling plan.
    pub fn warp(&self, plan: &Rc<WarpPlan<T>>) -> Result<Var<'g, T>> {
        let x = self.value();
        ensure_dims!(
            x.len() == plan.height * plan.width,
            "warp: map of shape {:?} does not match {}x{} flow",
            x.shape(),
            plan.height,
            plan.width
        );
        let value = Tensor::new(x.shape(), plan.apply(x.data()))?;
        Ok(self.unary(
            Op::Warp {
                input: self.id,
                plan: Rc::clone(plan),
            },
            value,
        ))
    }

    /// Stitches four equally shaped NCHW tensors into one of twice the height
    /// and width, in row-major quadrant order.
    pub fn merge_quad(parts: [&Var<'g, T>; 4]) -> Result<Var<'g, T>> {
        let graph = parts[0].graph;
        for p in &parts[1..] {
            parts[0].same_graph(p)?;
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, c, h, w) = values[0].dims4()?;
        for v in &values[1..] {
            check_same_shape("merge", &values[0], v)?;
        }
        let ow = 2 * w;
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for (q, v) in values.iter().enumerate() {
            let (qy, qx) = (q / 2, q % 2);
            for plane in 0..n * c {
                for y in 0..h {
                    let dst = plane * 4 * h * w + (qy * h + y) * ow + qx * w;
                    let src = plane * h * w + y * w;
                    out[dst..dst + w].copy_from_slice(&v.data()[src..src + w]);
                }
            }
        }
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(graph.push(
            Op::MergeQuad {
                parts: [parts[0].id, parts[1].id, parts[2].id, parts[3].id],
            },
            value,
            rg,
        ))
    }

    /// `Σ_k −log(z̄_k)` with `z̄_k = p_k` where the target is 1 and `1 − p_k`
    /// otherwise, after clamping `p` to `[eps, 1 − eps]`.
    pub fn soft_margin_loss(&self, target: &[T], eps: T) -> Result<Var<'g, T>> {
        let p = self.value();
        ensure_dims!(
            p.len() == target.len(),
            "soft_margin_loss: {} predictions for {} targets",
            p.len(),
            target.len()
        );
        let loss = soft_margin_value(p.data().iter().copied(), target, eps);
        Ok(self.unary(
            Op::SoftMargin {
                input: self.id,
                target: target.to_vec(),
                eps,
            },
            Tensor::scalar(loss),
        ))
    }

    /// `soft_margin_loss(sigmoid(x))` fused on logits. The value is identical
    /// (clamp included); the gradient is `σ(x) − z` everywhere, so saturated
    /// predictions on the wrong side still receive a signal.
    pub fn soft_margin_loss_logits(&self, target: &[T], eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        ensure_dims!(
            x.len() == target.len(),
            "soft_margin_loss_logits: {} logits for {} targets",
            x.len(),
            target.len()
        );
        let loss = soft_margin_value(x.data().iter().map(|&v| sigmoid(v)), target, eps);
        Ok(self.unary(
            Op::SoftMarginLogits {
                input: self.id,
                target: target.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), value))
    }
}

/// Numerically stable logistic function.
fn soft_margin_value<T: Real>(p: impl Iterator<Item = T>, target: &[T], eps: T) -> T {
    let (lo, hi) = (eps, T::one() - eps);
    p.zip(target)
        .map(|(pv, &z)| {
            let pc = pv.max(lo).min(hi);
            let zbar = if z > T::lit(0.5) { pc } else { T::one() - pc };
            -zbar.ln()
        })
        .sum()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id.0).and_then(|g| g.as_ref())
    }

    pub fn get_by_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}
