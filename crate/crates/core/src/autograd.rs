//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; values are immutable once
//! recorded. [`Tape::backward`] walks the nodes in exact reverse order and
//! accumulates gradients additively, so a value used twice receives the sum
//! of both contributions.
//!
//! All reductions run sequentially in a fixed index order, so a forward pass
//! is bit-for-bit reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GateShape {
    PerChannel,
    PerExampleChannel,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ChannelMul { x: Var, g: Var, kind: GateShape },
    ChannelAdd { x: Var, b: Var },
    SumAxes { x: Var, axes: Vec<usize> },
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalStd { x: Var },
    GlobalMax { x: Var, argmax: Vec<usize> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Cfc { t: Var, w: Var },
    StackLast(Vec<Var>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (&[n, c, h, w], &[o, i, kh, kw]) = (input, weight) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d (expects NCHW input and OxIxkxk weight)",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        };
        if c != i || kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (out_height, out_width) = conv_out_hw(h, w, kh, stride, padding).ok_or_else(|| {
            Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            }
        })?;
        Ok(Self {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
            out_height,
            out_width,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn columns(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }
}

/// `floor((h + 2p - k) / s) + 1` for both spatial axes, `None` if the
/// kernel does not fit.
pub fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    if k == 0 || stride == 0 || ph < k || pw < k {
        return None;
    }
    Some(((ph - k) / stride + 1, (pw - k) / stride + 1))
}

/// Output columns `ox` with `0 <= ox * stride + offset < width`.
fn valid_cols(offset: isize, stride: usize, width: usize, out_width: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let span = width as isize - offset;
    let hi = if span <= 0 { 0 } else { ((span + s - 1) / s).min(out_width as isize) };
    (lo as usize, (hi.max(lo)) as usize)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let cols = g.columns();
    let ohw = g.out_height * g.out_width;
    let mut out = vec![T::zero(); g.patch_len() * cols];
    for ci in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let off = kj as isize - p;
                let (lo, hi) = valid_cols(off, s, g.width, g.out_width);
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_channels + ci) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_height {
                        let iy = (oy * s) as isize - p + ki as isize;
                        if iy < 0 || iy >= g.height as isize || lo >= hi {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[b * ohw + oy * g.out_width..][..g.out_width];
                        let start = (lo * s) as isize + off;
                        if s == 1 {
                            dst_row[lo..hi].copy_from_slice(&src_row[start as usize..][..hi - lo]);
                        } else {
                            for (j, d) in dst_row[lo..hi].iter_mut().enumerate() {
                                *d = src_row[start as usize + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Element>(cols_data: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let cols = g.columns();
    let ohw = g.out_height * g.out_width;
    let mut out = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
    for ci in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                let off = kj as isize - p;
                let (lo, hi) = valid_cols(off, s, g.width, g.out_width);
                for b in 0..g.batch {
                    let plane = &mut out[(b * g.in_channels + ci) * g.height * g.width..][..g.height * g.width];
                    for oy in 0..g.out_height {
                        let iy = (oy * s) as isize - p + ki as isize;
                        if iy < 0 || iy >= g.height as isize || lo >= hi {
                            continue;
                        }
                        let src_row = &src[b * ohw + oy * g.out_width..][..g.out_width];
                        let dst_row = &mut plane[iy as usize * g.width..][..g.width];
                        let start = ((lo * s) as isize + off) as usize;
                        for (j, &v) in src_row[lo..hi].iter().enumerate() {
                            let d = &mut dst_row[start + j * s];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Length of the reduced block when sorted `axes` are a non-empty suffix of
/// the shape, so each output sums one contiguous run.
fn trailing_block(shape: &[usize], axes: &[usize]) -> Option<usize> {
    let r = shape.len();
    let suffix = !axes.is_empty() && axes.iter().enumerate().all(|(i, &a)| a == r - axes.len() + i);
    suffix.then(|| shape[r - axes.len()..].iter().product())
}

/// `[N, C, rest...]` split into `(N, C, prod(rest))`.
fn split_nc(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("{op} expects a tensor of rank >= 2"),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn sigmoid<T: Element>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Records operations and computes gradients in reverse.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an input value. Gradients are only tracked when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let needs = self.needs(&[x]);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        self.unary(x, |v| v * f, Op::Scale(x, f))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let c = T::of(offset);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Multiplies each `(n, c)` slice of `x` (shape `[N, C, ...]`) by a gate.
    /// `g` is either a per-channel vector `[C]` or per-example gates `[N, C]`.
    pub fn channel_mul(&mut self, x: Var, g: Var) -> Result<Var> {
        let (n, c, s) = split_nc(self.shape(x), "channel_mul")?;
        let kind = match self.shape(g) {
            [gc] if *gc == c => GateShape::PerChannel,
            [gn, gc] if *gn == n && *gc == c => GateShape::PerExampleChannel,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "channel_mul",
                    lhs: self.shape(x).to_vec(),
                    rhs: other.to_vec(),
                })
            }
        };
        let xv = self.value(x).data();
        let gv = self.value(g).data();
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..n {
            for ch in 0..c {
                let gate = match kind {
                    GateShape::PerChannel => gv[ch],
                    GateShape::PerExampleChannel => gv[b * c + ch],
                };
                out.extend(xv[(b * c + ch) * s..][..s].iter().map(|&v| v * gate));
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let needs = self.needs(&[x, g]);
        Ok(self.push(value, Op::ChannelMul { x, g, kind }, needs))
    }

    /// Adds a per-channel vector `[C]` to `x` of shape `[N, C, ...]`.
    pub fn channel_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, s) = split_nc(self.shape(x), "channel_add")?;
        if self.shape(b) != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_add",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n * c {
            let bias = bv[i % c];
            out.extend(xv[i * s..][..s].iter().map(|&v| v + bias));
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let needs = self.needs(&[x, b]);
        Ok(self.push(value, Op::ChannelAdd { x, b }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let rank = self.shape(x).len();
        self.sum_axes(x, &(0..rank).collect::<Vec<_>>())
            .expect("all axes are valid")
    }

    /// Sums over `axes`, removing them from the shape. Reducing every axis
    /// yields shape `[1]`.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::InvalidArgument(format!(
                "sum_axes: axes {axes:?} out of range for shape {shape:?}"
            )));
        }
        let (out_shape, map) = reduction_map(&shape, &axes);
        let out_len = out_shape.iter().product();
        let xv = self.value(x).data();
        let out = if let Some(inner) = trailing_block(&shape, &axes) {
            xv.chunks(inner).map(|c| c.iter().fold(T::zero(), |a, &v| a + v)).collect()
        } else {
            let mut out = vec![T::zero(); out_len];
            for (i, &v) in xv.iter().enumerate() {
                let j = map(i);
                out[j] = out[j] + v;
            }
            out
        };
        let value = Tensor::from_parts(out_shape, out);
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::SumAxes { x, axes }, needs))
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let count: usize = axes
            .iter()
            .filter(|&&a| a < shape.len())
            .map(|&a| shape[a])
            .product();
        let s = self.sum_axes(x, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(Error::ShapeMismatch {
                op: "matmul (expects rank-2 operands)",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let &[r, c] = self.shape(x) else {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "transpose expects rank 2".into(),
            });
        };
        let out = transpose_data(self.value(x).data(), r, c);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Square-kernel convolution without bias, lowered to one matrix
    /// multiply over the whole batch.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.columns();
        let mut mat = vec![T::zero(); geom.out_channels * ncols];
        T::gemm(
            geom.out_channels,
            geom.patch_len(),
            ncols,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut mat,
            false,
        );
        let out = cols_to_nchw(&mat, geom.batch, geom.out_channels, geom.out_height * geom.out_width);
        let shape = vec![geom.batch, geom.out_channels, geom.out_height, geom.out_width];
        let needs = self.needs(&[x, w]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, geom }, needs))
    }

    /// Windowed max pooling; padded positions never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if padding >= kernel {
            return Err(Error::InvalidArgument("max_pool2d padding must be < kernel".into()));
        }
        let (oh, ow) = conv_out_hw(h, w, kernel, stride, padding).ok_or_else(|| {
            Error::InvalidArgument(format!("max_pool2d window {kernel} does not fit {h}x{w}"))
        })?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_ix = base;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let flat = base + iy as usize * w + ix as usize;
                            if xv[flat] > best {
                                best = xv[flat];
                                best_ix = flat;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_ix);
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::MaxPool2d { x, argmax },
            needs,
        ))
    }

    /// Spatial average `[N, C, H, W] -> [N, C]`.
    pub fn global_avg(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims4()?;
        self.mean_axes(x, &[2, 3])
    }

    /// Spatial standard deviation with the biased `1/HW` estimator,
    /// `sqrt(var + eps)`.
    pub fn global_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let out = (0..n * c)
            .map(|i| {
                let plane = &xv[i * hw..][..hw];
                let mean = plane.iter().fold(T::zero(), |a, &v| a + v) * inv;
                let var = plane.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv;
                (var + eps).sqrt()
            })
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalStd { x }, needs))
    }

    /// Spatial maximum `[N, C, H, W] -> [N, C]`; the first maximal position
    /// receives the gradient.
    pub fn global_max(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let (mut best, mut at) = (xv[i * hw], i * hw);
            for (j, &v) in xv[i * hw..][..hw].iter().enumerate() {
                if v > best {
                    best = v;
                    at = i * hw + j;
                }
            }
            out.push(best);
            argmax.push(at);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalMax { x, argmax }, needs))
    }

    /// Batch normalization with biased batch statistics over every axis but
    /// the channel axis. Returns the output plus the per-channel batch mean
    /// and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, s) = split_nc(self.shape(x), "batch_norm")?;
        self.check_affine("batch_norm", x, gamma, beta, c)?;
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch_norm in train mode needs batch size >= 2, got {n}"
            )));
        }
        let m = T::of((n * s) as f64);
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                for &v in &xv[(b * c + ch) * s..][..s] {
                    acc = acc + v;
                }
            }
            let mean = acc / m;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xv[(b * c + ch) * s..][..s] {
                    sq = sq + (v - mean) * (v - mean);
                }
            }
            means[ch] = mean;
            vars[ch] = sq / m;
            inv_std[ch] = T::one() / (vars[ch] + eps).sqrt();
        }
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n * c {
            let ch = i % c;
            for j in i * s..(i + 1) * s {
                xhat[j] = (xv[j] - means[ch]) * inv_std[ch];
                out[j] = gv[ch] * xhat[j] + bv[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, gamma, beta]);
        let var = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        );
        Ok((var, means, vars))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, s) = split_nc(self.shape(x), "batch_norm")?;
        self.check_affine("batch_norm", x, gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm running statistics",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mean.len(), var.len()],
            });
        }
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n * c {
            let ch = i % c;
            out.extend(
                xv[i * s..][..s]
                    .iter()
                    .map(|&v| gv[ch] * (v - mean[ch]) * inv_std[ch] + bv[ch]),
            );
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            needs,
        ))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Channel-wise fully connected map: `z[n, c] = w[c] . t[n, c]` for
    /// `t: [N, C, d]` and `w: [C, d]`.
    pub fn cfc(&mut self, t: Var, w: Var) -> Result<Var> {
        let (&[n, c, d], &[wc, wd]) = (self.shape(t), self.shape(w)) else {
            return Err(Error::ShapeMismatch {
                op: "cfc (expects [N,C,d] and [C,d])",
                lhs: self.shape(t).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        };
        if c != wc || d != wd {
            return Err(Error::ShapeMismatch {
                op: "cfc",
                lhs: self.shape(t).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let tv = self.value(t).data();
        let wv = self.value(w).data();
        let out = (0..n * c)
            .map(|i| {
                let ch = i % c;
                (0..d).fold(T::zero(), |acc, k| acc + wv[ch * d + k] * tv[i * d + k])
            })
            .collect();
        let needs = self.needs(&[t, w]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::Cfc { t, w }, needs))
    }

    /// Stacks equally shaped tensors along a new trailing axis.
    pub fn stack_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("stack_last needs at least one input".into()));
        };
        for &p in parts {
            self.same_shape("stack_last", first, p)?;
        }
        let d = parts.len();
        let len = self.value(first).len();
        let mut out = vec![T::zero(); len * d];
        for (k, &p) in parts.iter().enumerate() {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                out[i * d + k] = v;
            }
        }
        let mut shape = self.shape(first).to_vec();
        shape.push(d);
        let needs = self.needs(parts);
        Ok(self.push(Tensor::from_parts(shape, out), Op::StackLast(parts.to_vec()), needs))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return Err(Error::InvalidShape {
                shape: self.shape(logits).to_vec(),
                reason: "cross_entropy expects [N, K] logits".into(),
            });
        };
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy labels",
                lhs: vec![n, k],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for b in 0..n {
            let row = &lv[b * k..][..k];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[b * k + j] = e;
                denom = denom + e;
            }
            for p in &mut probs[b * k..][..k] {
                *p = *p / denom;
            }
            loss = loss + (denom.ln() + max - row[labels[b]]);
        }
        loss = loss / T::of(n as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(output).to_vec(),
                reason: "backward needs a single-element output".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Tensor::from_parts(self.shape(output).to_vec(), vec![T::one()]));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dyv = dy.data();
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let g = zip(dyv, self.value(*b).data(), |d, y| d * y);
                    self.accumulate(grads, *a, like(*a, g));
                }
                if self.wants(*b) {
                    let g = zip(dyv, self.value(*a).data(), |d, x| d * x);
                    self.accumulate(grads, *b, like(*b, g));
                }
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, dy.map(|d| d * *f));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, dy.clone()),
            Op::Sqrt(x) => {
                let g = zip(dyv, node.value.data(), |d, y| d / (y + y));
                self.accumulate(grads, *x, like(*x, g));
            }
            Op::Relu(x) => {
                let g = zip(dyv, self.value(*x).data(), |d, v| if v > T::zero() { d } else { T::zero() });
                self.accumulate(grads, *x, like(*x, g));
            }
            Op::Sigmoid(x) => {
                let g = zip(dyv, node.value.data(), |d, y| d * y * (T::one() - y));
                self.accumulate(grads, *x, like(*x, g));
            }
            Op::ChannelMul { x, g, kind } => {
                let (n, c, s) = split_nc(self.shape(*x), "channel_mul").unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*g).data();
                let gate_ix = |b: usize, ch: usize| match kind {
                    GateShape::PerChannel => ch,
                    GateShape::PerExampleChannel => b * c + ch,
                };
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(xv.len());
                    for b in 0..n {
                        for ch in 0..c {
                            let gate = gv[gate_ix(b, ch)];
                            dx.extend(dyv[(b * c + ch) * s..][..s].iter().map(|&d| d * gate));
                        }
                    }
                    self.accumulate(grads, *x, like(*x, dx));
                }
                if self.wants(*g) {
                    let mut dg = vec![T::zero(); gv.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            let acc = dyv[off..off + s]
                                .iter()
                                .zip(&xv[off..off + s])
                                .fold(T::zero(), |a, (&d, &v)| a + d * v);
                            let j = gate_ix(b, ch);
                            dg[j] = dg[j] + acc;
                        }
                    }
                    self.accumulate(grads, *g, like(*g, dg));
                }
            }
            Op::ChannelAdd { x, b } => {
                self.accumulate(grads, *x, dy.clone());
                if self.wants(*b) {
                    let (n, c, s) = split_nc(self.shape(*x), "channel_add").unwrap();
                    let mut db = vec![T::zero(); c];
                    for i in 0..n * c {
                        db[i % c] = dyv[i * s..][..s].iter().fold(db[i % c], |a, &d| a + d);
                    }
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::SumAxes { x, axes } => {
                let shape = self.shape(*x).to_vec();
                let len: usize = shape.iter().product();
                let g = if let Some(inner) = trailing_block(&shape, axes) {
                    dyv.iter().flat_map(|&d| std::iter::repeat_n(d, inner)).collect()
                } else {
                    let (_, map) = reduction_map(&shape, axes);
                    (0..len).map(|i| dyv[map(i)]).collect()
                };
                self.accumulate(grads, *x, like(*x, g));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, dyv, false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), true, dyv, false, &mut db, false);
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.accumulate(grads, *x, like(*x, transpose_data(dyv, c, r)));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, like(*x, dyv.to_vec())),
            Op::Conv2d { x, w, geom } => {
                let ohw = geom.out_height * geom.out_width;
                let dmat = nchw_to_cols(dyv, geom.batch, geom.out_channels, ohw);
                let ncols = geom.columns();
                if self.wants(*w) {
                    let cols = im2col(self.value(*x).data(), geom);
                    let mut dw = vec![T::zero(); geom.out_channels * geom.patch_len()];
                    T::gemm(
                        geom.out_channels,
                        ncols,
                        geom.patch_len(),
                        &dmat,
                        false,
                        &cols,
                        true,
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, like(*w, dw));
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); geom.patch_len() * ncols];
                    T::gemm(
                        geom.patch_len(),
                        geom.out_channels,
                        ncols,
                        self.value(*w).data(),
                        true,
                        &dmat,
                        false,
                        &mut dcols,
                        false,
                    );
                    self.accumulate(grads, *x, like(*x, col2im(&dcols, geom)));
                }
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMax { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(dyv) {
                    dx[src] = dx[src] + d;
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::GlobalStd { x } => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                let hw = h * w;
                let inv = T::of(1.0 / hw as f64);
                let xv = self.value(*x).data();
                let sv = node.value.data();
                let mut dx = vec![T::zero(); xv.len()];
                for i in 0..n * c {
                    let plane = &xv[i * hw..][..hw];
                    let mean = plane.iter().fold(T::zero(), |a, &v| a + v) * inv;
                    let coef = dyv[i] * inv / sv[i];
                    for (d, &v) in dx[i * hw..][..hw].iter_mut().zip(plane) {
                        *d = coef * (v - mean);
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, s) = split_nc(self.shape(*x), "batch_norm").unwrap();
                let gv = self.value(*gamma).data();
                let m = T::of((n * s) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n * c {
                    let ch = i % c;
                    for j in i * s..(i + 1) * s {
                        sum_dy[ch] = sum_dy[ch] + dyv[j];
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + dyv[j] * xhat[j];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); dyv.len()];
                    for i in 0..n * c {
                        let ch = i % c;
                        let k = gv[ch] * inv_std[ch] / m;
                        for j in i * s..(i + 1) * s {
                            dx[j] = k * (m * dyv[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch]);
                        }
                    }
                    self.accumulate(grads, *x, like(*x, dx));
                }
                self.accumulate(grads, *gamma, like(*gamma, sum_dy_xhat));
                self.accumulate(grads, *beta, like(*beta, sum_dy));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, s) = split_nc(self.shape(*x), "batch_norm").unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                for i in 0..n * c {
                    let ch = i % c;
                    for j in i * s..(i + 1) * s {
                        dbeta[ch] = dbeta[ch] + dyv[j];
                        dgamma[ch] = dgamma[ch] + dyv[j] * (xv[j] - mean[ch]) * inv_std[ch];
                        dx[j] = dyv[j] * gv[ch] * inv_std[ch];
                    }
                }
                self.accumulate(grads, *x, like(*x, dx));
                self.accumulate(grads, *gamma, like(*gamma, dgamma));
                self.accumulate(grads, *beta, like(*beta, dbeta));
            }
            Op::Cfc { t, w } => {
                let (c, d) = (self.shape(*w)[0], self.shape(*w)[1]);
                let tv = self.value(*t).data();
                let wv = self.value(*w).data();
                if self.wants(*t) {
                    let dt = (0..tv.len())
                        .map(|i| {
                            let (row, k) = (i / d, i % d);
                            dyv[row] * wv[(row % c) * d + k]
                        })
                        .collect();
                    self.accumulate(grads, *t, like(*t, dt));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); c * d];
                    for (row, &g) in dyv.iter().enumerate() {
                        let ch = row % c;
                        for k in 0..d {
                            dw[ch * d + k] = dw[ch * d + k] + g * tv[row * d + k];
                        }
                    }
                    self.accumulate(grads, *w, like(*w, dw));
                }
            }
            Op::StackLast(parts) => {
                let d = parts.len();
                for (k, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        let g = dyv.iter().skip(k).step_by(d).copied().collect();
                        self.accumulate(grads, p, like(p, g));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = dyv[0] / T::of(labels.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    g[b * k + l] = g[b * k + l] - scale;
                }
                self.accumulate(grads, *logits, like(*logits, g));
            }
        }
    }
}

fn zip<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_data<T: Element>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `[O, N*P]` matrix to `[N, O, P]`.
fn cols_to_nchw<T: Element>(mat: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); mat.len()];
    for ch in 0..o {
        for b in 0..n {
            out[(b * o + ch) * p..][..p].copy_from_slice(&mat[ch * n * p + b * p..][..p]);
        }
    }
    out
}

/// `[N, O, P]` to `[O, N*P]`.
fn nchw_to_cols<T: Element>(data: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for ch in 0..o {
        for b in 0..n {
            out[ch * n * p + b * p..][..p].copy_from_slice(&data[(b * o + ch) * p..][..p]);
        }
    }
    out
}

/// Output shape of reducing `axes`, and a map from input flat index to
/// output flat index.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, impl Fn(usize) -> usize) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let mut out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    // input strides for every axis, and output strides for kept ones
    let mut in_strides = vec![1usize; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for &a in kept.iter().rev() {
        out_strides[a] = acc;
        acc *= shape[a];
    }
    let shape = shape.to_vec();
    let map = move |mut i: usize| {
        let mut j = 0;
        for a in 0..shape.len() {
            let coord = i / in_strides[a];
            i %= in_strides[a];
            j += coord * out_strides[a];
        }
        j
    };
    (out_shape, map)
}
