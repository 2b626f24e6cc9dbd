use super::kernels::{self, ConvGeom};
use super::{ensure_finite, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to probabilities before taking their logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A spatial location of one channel group: image `n`, group `g`, row `y`, column `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupCell {
    pub n: usize,
    pub g: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Deconv2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SoftmaxGroups {
        x: Var,
        group: usize,
    },
    CrossEntropy {
        probs: Var,
        picks: Vec<(usize, usize)>,
    },
    Dot {
        x: Var,
        weights: Vec<T>,
    },
    SmoothL1 {
        pred: Var,
        picks: Vec<(usize, [T; 4])>,
    },
    Scale {
        x: Var,
        factor: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed operations, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in execution order, so index order is a topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a trainable tensor.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn finish(&mut self, what: &str, shape: Shape, data: Vec<T>, op: Op<T>, needs: bool) -> Result<Var> {
        ensure_finite(what, &data)?;
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t, op, needs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let geom = ConvGeom::new(xs, ws, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b).numel() != geom.cout {
                return Err(Error::dim(format!(
                    "conv2d: bias has {} entries, expected {}",
                    self.shape(b).numel(),
                    geom.cout
                )));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            xs.n,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let shape = Shape::new(xs.n, geom.cout, geom.ho, geom.wo);
        self.finish("conv2d", shape, out, Op::Conv2d { x, w, b, geom }, needs)
    }

    /// Transposed convolution. Only the exact 2x upsampling form (kernel 2, stride 2) exists.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride != 2 || ws.h != 2 || ws.w != 2 {
            return Err(Error::Unsupported(format!(
                "deconv2d supports kernel 2 / stride 2 only, got kernel {}x{} / stride {stride}",
                ws.h, ws.w
            )));
        }
        if ws.n != xs.c {
            return Err(Error::dim(format!(
                "deconv2d: input has {} channels, weight expects {}",
                xs.c, ws.n
            )));
        }
        let cout = ws.c;
        if let Some(b) = b {
            if self.shape(b).numel() != cout {
                return Err(Error::dim("deconv2d: bias length mismatch"));
            }
        }
        let out = kernels::deconv2x2_forward(xs, cout, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let shape = Shape::new(xs.n, cout, 2 * xs.h, 2 * xs.w);
        self.finish("deconv2d", shape, out, Op::Deconv2x2 { x, w, b }, needs)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if !xs.h.is_multiple_of(2) || !xs.w.is_multiple_of(2) {
            return Err(Error::dim(format!("maxpool2: odd spatial extent in {xs}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(xs, self.data(x));
        let needs = self.needs(x);
        let shape = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        self.finish("maxpool2", shape, out, Op::MaxPool2 { x, argmax }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let (shape, needs) = (self.shape(x), self.needs(x));
        self.finish("relu", shape, out, Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "add: shapes {} and {} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a);
        self.finish("add", shape, out, Op::Add { a, b }, needs)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::dim(format!("concat: shapes {sa} and {sb} incompatible")));
        }
        let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut out = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n {
            out.extend_from_slice(&self.data(a)[n * pa..(n + 1) * pa]);
            out.extend_from_slice(&self.data(b)[n * pb..(n + 1) * pb]);
        }
        let needs = self.needs(a) || self.needs(b);
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        self.finish("concat", shape, out, Op::Concat { a, b }, needs)
    }

    /// Softmax over each contiguous group of `group` channels at every spatial location.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x);
        if group == 0 || !s.c.is_multiple_of(group) {
            return Err(Error::dim(format!(
                "softmax_groups: {} channels not divisible by group {group}",
                s.c
            )));
        }
        let plane = s.plane();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for n in 0..s.n {
            for g in 0..s.c / group {
                let base = (n * s.c + g * group) * plane;
                for p in 0..plane {
                    let idx = |c: usize| base + c * plane + p;
                    let m = (0..group).map(|c| src[idx(c)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for c in 0..group {
                        let e = (src[idx(c)] - m).exp();
                        out[idx(c)] = e;
                        z += e;
                    }
                    for c in 0..group {
                        out[idx(c)] /= z;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.finish("softmax_groups", s, out, Op::SoftmaxGroups { x, group }, needs)
    }

    fn resolve_cell(s: Shape, group: usize, cell: GroupCell) -> Result<usize> {
        if cell.n >= s.n || (cell.g + 1) * group > s.c || cell.y >= s.h || cell.x >= s.w {
            return Err(Error::dim(format!("cell {cell:?} outside {s} with group {group}")));
        }
        Ok(s.offset(cell.n, cell.g * group, cell.y, cell.x))
    }

    /// Sum over picks of `-ln(max(p_target, 1e-12))`, where `probs` holds grouped distributions.
    pub fn cross_entropy(&mut self, probs: Var, group: usize, picks: &[(GroupCell, usize)]) -> Result<Var> {
        let s = self.shape(probs);
        let plane = s.plane();
        let clamp = T::lit(LOG_CLAMP);
        let mut resolved = Vec::with_capacity(picks.len());
        let mut total = T::zero();
        for &(cell, target) in picks {
            if target >= group {
                return Err(Error::Input(format!(
                    "cross_entropy: target {target} outside group of {group}"
                )));
            }
            let base = Self::resolve_cell(s, group, cell)?;
            let p = self.data(probs)[base + target * plane];
            total += -p.max(clamp).ln();
            resolved.push((base, target));
        }
        let needs = self.needs(probs);
        self.finish(
            "cross_entropy",
            Shape::scalar(),
            vec![total],
            Op::CrossEntropy {
                probs,
                picks: resolved,
            },
            needs,
        )
    }

    /// Sum over picks of smooth-L1 between a 4-channel group of `pred` and the target offsets.
    pub fn smooth_l1(&mut self, pred: Var, picks: &[(GroupCell, [T; 4])]) -> Result<Var> {
        let s = self.shape(pred);
        let plane = s.plane();
        let mut resolved = Vec::with_capacity(picks.len());
        let mut total = T::zero();
        for &(cell, target) in picks {
            let base = Self::resolve_cell(s, 4, cell)?;
            for (j, &t) in target.iter().enumerate() {
                total += smooth_l1(self.data(pred)[base + j * plane] - t);
            }
            resolved.push((base, target));
        }
        let needs = self.needs(pred);
        self.finish(
            "smooth_l1",
            Shape::scalar(),
            vec![total],
            Op::SmoothL1 {
                pred,
                picks: resolved,
            },
            needs,
        )
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * factor).collect();
        let (shape, needs) = (self.shape(x), self.needs(x));
        self.finish("scale", shape, out, Op::Scale { x, factor }, needs)
    }

    /// Scalar `Σ xᵢ·wᵢ` against constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.shape(x).numel() {
            return Err(Error::dim("dot_const: weight length differs from tensor size"));
        }
        let total = self.data(x).iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let needs = self.needs(x);
        self.finish("dot", Shape::scalar(), vec![total], Op::Dot { x, weights }, needs)
    }

    fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.data().len();
        Some(node.value.grad.take().unwrap_or_else(|| vec![T::zero(); n]))
    }

    fn put_grad(&mut self, v: Var, g: Option<Vec<T>>) {
        if let Some(g) = g {
            self.nodes[v.0].value.grad = Some(g);
        }
    }

    /// Clears every gradient buffer.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into every reachable gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss).numel() != 1 {
            return Err(Error::dim(format!(
                "backward: loss must be scalar, got {}",
                self.shape(loss)
            )));
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.grad_mut_or_zero()[0] += T::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(&op, &gy, i);
            self.nodes[i].op = op;
            self.nodes[i].value.grad = Some(gy);
        }
        for n in &self.nodes {
            if let (Op::Leaf, Some(g)) = (&n.op, n.value.grad()) {
                ensure_finite("backward", g)?;
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<T>, gy: &[T], out_index: usize) {
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let mut gx = self.take_grad(x);
                let mut gw = self.take_grad(w);
                let mut gb = b.and_then(|b| self.take_grad(b));
                let n = self.shape(x).n;
                kernels::conv2d_backward(
                    &geom,
                    n,
                    self.data(x),
                    self.data(w),
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.put_grad(x, gx);
                self.put_grad(w, gw);
                if let Some(b) = b {
                    self.put_grad(b, gb);
                }
            }
            Op::Deconv2x2 { x, w, b } => {
                let mut gx = self.take_grad(x);
                let mut gw = self.take_grad(w);
                let mut gb = b.and_then(|b| self.take_grad(b));
                let xs = self.shape(x);
                let cout = self.shape(w).c;
                kernels::deconv2x2_backward(
                    xs,
                    cout,
                    self.data(x),
                    self.data(w),
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.put_grad(x, gx);
                self.put_grad(w, gw);
                if let Some(b) = b {
                    self.put_grad(b, gb);
                }
            }
            Op::MaxPool2 { x, ref argmax } => {
                if let Some(mut gx) = self.take_grad(x) {
                    for (&src, &g) in argmax.iter().zip(gy) {
                        gx[src] += g;
                    }
                    self.put_grad(x, Some(gx));
                }
            }
            Op::Relu { x } => {
                if let Some(mut gx) = self.take_grad(x) {
                    let out = self.nodes[out_index].value.data();
                    for ((d, &g), &o) in gx.iter_mut().zip(gy).zip(out) {
                        if o > T::zero() {
                            *d += g;
                        }
                    }
                    self.put_grad(x, Some(gx));
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(mut gv) = self.take_grad(v) {
                        gv.iter_mut().zip(gy).for_each(|(d, &g)| *d += g);
                        self.put_grad(v, Some(gv));
                    }
                }
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
                for (v, off, len) in [(a, 0, pa), (b, pa, pb)] {
                    if let Some(mut gv) = self.take_grad(v) {
                        for n in 0..sa.n {
                            let src = &gy[n * (pa + pb) + off..n * (pa + pb) + off + len];
                            gv[n * len..(n + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &g)| *d += g);
                        }
                        self.put_grad(v, Some(gv));
                    }
                }
            }
            Op::SoftmaxGroups { x, group } => {
                if let Some(mut gx) = self.take_grad(x) {
                    let s = self.shape(x);
                    let plane = s.plane();
                    let p = self.nodes[out_index].value.data();
                    for n in 0..s.n {
                        for g in 0..s.c / group {
                            let base = (n * s.c + g * group) * plane;
                            for q in 0..plane {
                                let idx = |c: usize| base + c * plane + q;
                                let dot: T = (0..group).map(|c| gy[idx(c)] * p[idx(c)]).sum();
                                for c in 0..group {
                                    gx[idx(c)] += p[idx(c)] * (gy[idx(c)] - dot);
                                }
                            }
                        }
                    }
                    self.put_grad(x, Some(gx));
                }
            }
            Op::CrossEntropy { probs, ref picks } => {
                if let Some(mut gp) = self.take_grad(probs) {
                    let plane = self.shape(probs).plane();
                    let clamp = T::lit(LOG_CLAMP);
                    let p = self.data(probs);
                    for &(base, target) in picks {
                        let i = base + target * plane;
                        if p[i] > clamp {
                            gp[i] -= gy[0] / p[i];
                        }
                    }
                    self.put_grad(probs, Some(gp));
                }
            }
            Op::SmoothL1 { pred, ref picks } => {
                if let Some(mut gp) = self.take_grad(pred) {
                    let plane = self.shape(pred).plane();
                    let p = self.data(pred);
                    for &(base, target) in picks {
                        for (j, &t) in target.iter().enumerate() {
                            let i = base + j * plane;
                            gp[i] += gy[0] * smooth_l1_grad(p[i] - t);
                        }
                    }
                    self.put_grad(pred, Some(gp));
                }
            }
            Op::Dot { x, ref weights } => {
                if let Some(mut gx) = self.take_grad(x) {
                    gx.iter_mut().zip(weights).for_each(|(d, &w)| *d += gy[0] * w);
                    self.put_grad(x, Some(gx));
                }
            }
            Op::Scale { x, factor } => {
                if let Some(mut gx) = self.take_grad(x) {
                    gx.iter_mut().zip(gy).for_each(|(d, &g)| *d += g * factor);
                    self.put_grad(x, Some(gx));
                }
            }
        }
    }
}

/// `0.5 x²` for `|x| < 1`, otherwise `|x| - 0.5`.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::lit(0.5) * x * x
    } else {
        a - T::lit(0.5)
    }
}

fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

/// `-ln(max(p, 1e-12))`.
pub fn cross_entropy<T: Scalar>(p: T) -> T {
    -p.max(T::lit(LOG_CLAMP)).ln()
}
