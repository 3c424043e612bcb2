//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor produced during one forward pass, in the
//! order the ops executed. Backward replays the record in reverse and
//! accumulates gradients into every tracked node. A tape and its tensors
//! form a single-owner graph; independent tapes may run concurrently
//! against read-only parameter data.

pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use kernels::{bcast_accumulate, bcast_binary, broadcast_shape, numel, pairwise_sum};

/// Handle to a tensor on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

/// Batch-normalization statistics source.
#[derive(Clone, Debug)]
pub enum BatchNormMode<S> {
    /// Normalize by the batch statistics (training).
    Batch,
    /// Normalize by externally supplied running statistics (eval).
    Running { mean: Vec<S>, var: Vec<S> },
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Neg { a: usize },
    Scale { a: usize, c: S },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    Narrow { a: usize, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Ln { a: usize },
    Sqrt { a: usize },
    Clamp { a: usize, lo: S, hi: S },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, shift: usize, eps: S },
    BatchNorm {
        x: usize,
        gain: usize,
        shift: usize,
        eps: S,
        saved_mean: Vec<S>,
        saved_var: Vec<S>,
        batch_stats: bool,
    },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    Conv2d { x: usize, kernel: usize, bias: Option<usize>, padding: usize },
    BilinearUp2x { x: usize },
}

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// The computation record: executed ops in topological order.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node { data, shape, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// New leaf tensor. `requires_grad` marks it for gradient accumulation.
    pub fn leaf(&mut self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "leaf",
                format!("{} values for shape {:?}", numel(shape), shape),
                format!("{} values", data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Untracked leaf.
    pub fn constant(&mut self, data: Vec<S>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar_const(&mut self, v: S) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn is_finite(&self, id: TensorId) -> bool {
        self.nodes[id.0].data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, id: TensorId, context: &str) -> Result<()> {
        if self.is_finite(id) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    // ---- elementwise / broadcast ----------------------------------------

    fn binary(&mut self, a: TensorId, b: TensorId, name: &str, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(name, format!("broadcastable with {:?}", sa), format!("{:?}", sb))
        })?;
        let data = bcast_binary(self.data(a), &sa, self.data(b), &sb, &out_shape, f);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, out_shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add", Op::Add { a: a.0, b: b.0 }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "sub", Op::Sub { a: a.0, b: b.0 }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul", Op::Mul { a: a.0, b: b.0 }, |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "div", Op::Div { a: a.0, b: b.0 }, |x, y| x / y)
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| -x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, shape, rg, Op::Neg { a: a.0 }))
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, shape, rg, Op::Scale { a: a.0, c }))
    }

    // ---- unary maps ------------------------------------------------------

    fn unary(&mut self, a: TensorId, op: Op<S>, f: impl Fn(S) -> S) -> TensorId {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(data, shape, rg, op)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(a, Op::Relu { a: a.0 }, |x| x.max(S::zero())))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(a, Op::Gelu { a: a.0 }, gelu_fwd))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(a, Op::Sigmoid { a: a.0 }, |x| S::one() / (S::one() + (-x).exp())))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(a, Op::Exp { a: a.0 }, |x| x.exp()))
    }

    pub fn ln(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(a, Op::Ln { a: a.0 }, |x| x.ln()))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(a, Op::Sqrt { a: a.0 }, |x| x.sqrt()))
    }

    pub fn clamp(&mut self, a: TensorId, lo: S, hi: S) -> Result<TensorId> {
        Ok(self.unary(a, Op::Clamp { a: a.0, lo, hi }, |x| x.max(lo).min(hi)))
    }

    // ---- shape ops -------------------------------------------------------

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.data(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.data(a).len()),
                format!("{:?} = {} elements", shape, numel(shape)),
            ));
        }
        let data = self.data(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape { a: a.0 }))
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("transpose2d", "rank 2", format!("{:?}", shape)));
        }
        let data = kernels::transpose2d(self.data(a), shape[0], shape[1]);
        let rg = self.requires(a);
        Ok(self.push(data, vec![shape[1], shape[0]], rg, Op::Transpose { a: a.0 }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} within {:?}", start + len, shape),
                "out of bounds".to_string(),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let asize = shape[axis];
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * asize + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.requires(a);
        Ok(self.push(data, out_shape, rg, Op::Narrow { a: a.0, axis, start, len }))
    }

    /// Concatenate along `axis`. All other dims must match.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis < {}", first.len()), format!("axis {axis}")));
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(Error::shape("concat", format!("{:?} up to axis {axis}", first), format!("{:?}", s)));
            }
            total_axis += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let mut data = vec![S::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        for &p in parts {
            let plen = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..outer {
                let dst_base = (o * total_axis + offset) * inner;
                let src_base = o * plen * inner;
                data[dst_base..dst_base + plen * inner]
                    .copy_from_slice(&src[src_base..src_base + plen * inner]);
            }
            offset += plen;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            data,
            out_shape,
            rg,
            Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis },
        ))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s = pairwise_sum(self.data(a), 0, 1, self.data(a).len());
        let rg = self.requires(a);
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll { a: a.0 }))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::Usage("mean of empty tensor".into()));
        }
        let s = pairwise_sum(self.data(a), 0, 1, n) / S::of_usize(n);
        let rg = self.requires(a);
        Ok(self.push(vec![s], vec![1], rg, Op::MeanAll { a: a.0 }))
    }

    fn axis_reduce(&mut self, a: TensorId, axis: usize, mean: bool) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("axis reduce", format!("axis < {}", shape.len()), format!("axis {axis}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let asize = shape[axis];
        let src = self.data(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut v = pairwise_sum(src, (o * asize) * inner + i, inner, asize);
                if mean {
                    v = v / S::of_usize(asize);
                }
                out[o * inner + i] = v;
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.requires(a);
        let op = if mean { Op::MeanAxis { a: a.0, axis } } else { Op::SumAxis { a: a.0, axis } };
        Ok(self.push(out, out_shape, rg, op))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.axis_reduce(a, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.axis_reduce(a, axis, true)
    }

    // ---- structured ops --------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", "two rank-2 tensors", format!("{:?} x {:?}", sa, sb)));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("inner dim {}", sa[1]), format!("{}", sb[0])));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![m, n], rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis < {}", shape.len()), format!("axis {axis}")));
        }
        let (outer, asize, inner) = split_at_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * asize + j) * inner + i;
                let mut mx = src[idx(0)];
                for j in 1..asize {
                    mx = mx.max(src[idx(j)]);
                }
                let mut denom = S::zero();
                for j in 0..asize {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    denom += e;
                }
                for j in 0..asize {
                    out[idx(j)] = out[idx(j)] / denom;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(out, shape, rg, Op::Softmax { a: a.0, axis }))
    }

    /// Normalize each last-dim slice to zero mean / unit variance, then affine.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, shift: TensorId, eps: S) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "rank >= 1", "rank 0"))?;
        if self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/shift of shape [{d}]"),
                format!("{:?} / {:?}", self.shape(gain), self.shape(shift)),
            ));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(shift);
        let rows = src.len() / d;
        let mut out = vec![S::zero(); src.len()];
        let dn = S::of_usize(d);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = pairwise_sum(row, 0, 1, d) / dn;
            let mut var = S::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var / dn;
            let inv = S::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(shift);
        Ok(self.push(out, shape, rg, Op::LayerNorm { x: x.0, gain: gain.0, shift: shift.0, eps }))
    }

    /// Per-channel normalization of a `[N, C, H, W]` tensor.
    /// Returns the output id plus the statistics that were used.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        shift: TensorId,
        eps: S,
        mode: BatchNormMode<S>,
    ) -> Result<(TensorId, Vec<S>, Vec<S>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batch_norm", "rank 4 [N,C,H,W]", format!("{:?}", shape)));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("gain/shift of shape [{c}]"),
                format!("{:?} / {:?}", self.shape(gain), self.shape(shift)),
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let src = self.data(x);
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Batch => {
                let cn = S::of_usize(count);
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ci in 0..c {
                    let mut acc = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        acc += pairwise_sum(src, base, 1, plane);
                    }
                    mean[ci] = acc / cn;
                }
                for ci in 0..c {
                    let mut acc = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &src[base..base + plane] {
                            let d = v - mean[ci];
                            acc += d * d;
                        }
                    }
                    var[ci] = acc / cn;
                }
                (mean, var, true)
            }
            BatchNormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", format!("running stats of len {c}"), format!("{} / {}", mean.len(), var.len())));
                }
                (mean, var, false)
            }
        };
        let g = self.data(gain);
        let b = self.data(shift);
        let mut out = vec![S::zero(); src.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let inv = S::one() / (var[ci] + eps).sqrt();
                for j in 0..plane {
                    out[base + j] = (src[base + j] - mean[ci]) * inv * g[ci] + b[ci];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(shift);
        let id = self.push(
            out,
            shape,
            rg,
            Op::BatchNorm {
                x: x.0,
                gain: gain.0,
                shift: shift.0,
                eps,
                saved_mean: mean.clone(),
                saved_var: var.clone(),
                batch_stats,
            },
        );
        Ok((id, mean, var))
    }

    /// 2D cross-correlation over `[C,H,W]` or `[N,C,H,W]` input.
    pub fn conv2d(&mut self, x: TensorId, kernel: TensorId, bias: Option<TensorId>, padding: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::shape("conv2d", "kernel [C_out,C_in,k,k]", format!("{:?}", ks)));
        }
        let rank3 = xs.len() == 3;
        let (n, cin, h, w) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(Error::shape("conv2d", "input rank 3 or 4", format!("{:?}", xs))),
        };
        if cin != ks[1] {
            return Err(Error::shape("conv2d", format!("{} input channels", ks[1]), format!("{cin}")));
        }
        let (cout, ksize) = (ks[0], ks[2]);
        if h + 2 * padding < ksize || w + 2 * padding < ksize {
            return Err(Error::shape("conv2d", "input at least kernel-sized", format!("{h}x{w} with k={ksize} pad={padding}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias [{cout}]"), format!("{:?}", self.shape(b))));
            }
        }
        let bias_data = bias.map(|b| self.data(b).to_vec());
        let data = kernels::conv2d_fwd(
            self.data(x), n, cin, h, w,
            self.data(kernel), cout, ksize, padding,
            bias_data.as_deref(),
        );
        let oh = h + 2 * padding - ksize + 1;
        let ow = w + 2 * padding - ksize + 1;
        let out_shape = if rank3 { vec![cout, oh, ow] } else { vec![n, cout, oh, ow] };
        let rg = self.requires(x)
            || self.requires(kernel)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(data, out_shape, rg, Op::Conv2d { x: x.0, kernel: kernel.0, bias: bias.map(|b| b.0), padding }))
    }

    /// Double both spatial dims of `[C,H,W]` or `[N,C,H,W]` by bilinear interpolation.
    pub fn bilinear_upsample_2x(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let (planes, h, w, out_shape) = match xs.len() {
            3 => (xs[0], xs[1], xs[2], vec![xs[0], 2 * xs[1], 2 * xs[2]]),
            4 => (xs[0] * xs[1], xs[2], xs[3], vec![xs[0], xs[1], 2 * xs[2], 2 * xs[3]]),
            _ => return Err(Error::shape("bilinear_upsample_2x", "rank 3 or 4", format!("{:?}", xs))),
        };
        let data = kernels::up2x_fwd(self.data(x), planes, h, w);
        let rg = self.requires(x);
        Ok(self.push(data, out_shape, rg, Op::BilinearUp2x { x: x.0 }))
    }

    // ---- backward --------------------------------------------------------

    /// Populate gradients of every tracked tensor reachable from `loss`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.requires(loss) {
            return Err(Error::Usage("loss does not depend on any tracked tensor".into()));
        }
        if !self.is_finite(loss) {
            return Err(Error::NonFinite { context: "loss".into() });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            self.backprop_node(i, &op, &grad);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, idx: usize) {
        if self.nodes[idx].grad.is_none() {
            let len = self.nodes[idx].data.len();
            self.nodes[idx].grad = Some(vec![S::zero(); len]);
        }
    }

    fn accumulate(&mut self, idx: usize, delta: &[S]) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        self.ensure_grad(idx);
        let g = self.nodes[idx].grad.as_mut().unwrap();
        for (a, b) in g.iter_mut().zip(delta.iter()) {
            *a += *b;
        }
    }

    fn backprop_node(&mut self, i: usize, op: &Op<S>, grad: &[S]) {
        match op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                let out_shape = self.nodes[i].shape.clone();
                self.bcast_grad(*a, *b, &out_shape, grad, |g, _av, _bv| g, |g, _av, _bv| g);
            }
            Op::Sub { a, b } => {
                let out_shape = self.nodes[i].shape.clone();
                self.bcast_grad(*a, *b, &out_shape, grad, |g, _av, _bv| g, |g, _av, _bv| -g);
            }
            Op::Mul { a, b } => {
                let out_shape = self.nodes[i].shape.clone();
                self.bcast_grad(*a, *b, &out_shape, grad, |g, _av, bv| g * bv, |g, av, _bv| g * av);
            }
            Op::Div { a, b } => {
                let out_shape = self.nodes[i].shape.clone();
                self.bcast_grad(
                    *a,
                    *b,
                    &out_shape,
                    grad,
                    |g, _av, bv| g / bv,
                    |g, av, bv| -g * av / (bv * bv),
                );
            }
            Op::Neg { a } => {
                let d: Vec<S> = grad.iter().map(|&g| -g).collect();
                self.accumulate(*a, &d);
            }
            Op::Scale { a, c } => {
                let d: Vec<S> = grad.iter().map(|&g| g * *c).collect();
                self.accumulate(*a, &d);
            }

            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.nodes[*a].requires_grad {
                    let bt = kernels::transpose2d(&self.nodes[*b].data, k, n);
                    let da = kernels::matmul(grad, &bt, m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let at = kernels::transpose2d(&self.nodes[*a].data, m, k);
                    let db = kernels::matmul(&at, grad, k, m, n);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { a } => {
                let out_shape = self.nodes[i].shape.clone();
                let d = kernels::transpose2d(grad, out_shape[0], out_shape[1]);
                self.accumulate(*a, &d);
            }
            Op::Reshape { a } => {
                self.accumulate(*a, grad);
            }
            Op::Narrow { a, axis, start, len } => {
                if !self.nodes[*a].requires_grad {
                    return;
                }
                let shape = self.nodes[*a].shape.clone();
                let (outer, asize, inner) = split_at_axis(&shape, *axis);
                self.ensure_grad(*a);
                let g = self.nodes[*a].grad.as_mut().unwrap();
                for o in 0..outer {
                    let dst_base = (o * asize + start) * inner;
                    let src_base = o * len * inner;
                    for j in 0..len * inner {
                        g[dst_base + j] += grad[src_base + j];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.nodes[i].shape.clone();
                let (outer, total_axis, inner) = split_at_axis(&out_shape, *axis);
                let mut offset = 0usize;
                for &p in parts {
                    let plen = self.nodes[p].shape[*axis];
                    if self.nodes[p].requires_grad {
                        let mut d = vec![S::zero(); outer * plen * inner];
                        for o in 0..outer {
                            let src_base = (o * total_axis + offset) * inner;
                            let dst_base = o * plen * inner;
                            d[dst_base..dst_base + plen * inner]
                                .copy_from_slice(&grad[src_base..src_base + plen * inner]);
                        }
                        self.accumulate(p, &d);
                    }
                    offset += plen;
                }
            }

            Op::Relu { a } => {
                let d: Vec<S> = grad
                    .iter()
                    .zip(self.nodes[*a].data.iter())
                    .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Gelu { a } => {
                let d: Vec<S> = grad
                    .iter()
                    .zip(self.nodes[*a].data.iter())
                    .map(|(&g, &x)| g * gelu_bwd(x))
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Sigmoid { a } => {
                let d: Vec<S> = grad
                    .iter()
                    .zip(self.nodes[i].data.iter())
                    .map(|(&g, &s)| g * s * (S::one() - s))
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Exp { a } => {
                let d: Vec<S> = grad
                    .iter()
                    .zip(self.nodes[i].data.iter())
                    .map(|(&g, &e)| g * e)
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Ln { a } => {
                let d: Vec<S> = grad
                    .iter()
                    .zip(self.nodes[*a].data.iter())
                    .map(|(&g, &x)| g / x)
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Sqrt { a } => {
                let two = S::of_f64(2.0);
                let d: Vec<S> = grad
                    .iter()
                    .zip(self.nodes[i].data.iter())
                    .map(|(&g, &s)| g / (two * s))
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::Clamp { a, lo, hi } => {
                let d: Vec<S> = grad
                    .iter()
                    .zip(self.nodes[*a].data.iter())
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { S::zero() })
                    .collect();
                self.accumulate(*a, &d);
            }

            Op::Softmax { a, axis } => {
                let shape = self.nodes[i].shape.clone();
                let (outer, asize, inner) = split_at_axis(&shape, *axis);
                let out = &self.nodes[i].data;
                let mut d = vec![S::zero(); out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * asize + j) * inner + ii;
                        let mut dot = S::zero();
                        for j in 0..asize {
                            dot += grad[idx(j)] * out[idx(j)];
                        }
                        for j in 0..asize {
                            d[idx(j)] = out[idx(j)] * (grad[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(*a, &d);
            }

            Op::LayerNorm { x, gain, shift, eps } => {
                let src = self.nodes[*x].data.clone();
                let g = self.nodes[*gain].data.clone();
                let shape = self.nodes[*x].shape.clone();
                let d = *shape.last().unwrap();
                let rows = src.len() / d;
                let dn = S::of_usize(d);
                let mut dx = vec![S::zero(); src.len()];
                let mut dgain = vec![S::zero(); d];
                let mut dshift = vec![S::zero(); d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let gr = &grad[r * d..(r + 1) * d];
                    let mean = pairwise_sum(row, 0, 1, d) / dn;
                    let mut var = S::zero();
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var = var / dn;
                    let inv = S::one() / (var + *eps).sqrt();
                    let xhat: Vec<S> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let mut dxhat = vec![S::zero(); d];
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..d {
                        dgain[j] += gr[j] * xhat[j];
                        dshift[j] += gr[j];
                        dxhat[j] = gr[j] * g[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    for j in 0..d {
                        dx[r * d + j] =
                            inv / dn * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*shift, &dshift);
            }

            Op::BatchNorm { x, gain, shift, eps, saved_mean, saved_var, batch_stats } => {
                let shape = self.nodes[*x].shape.clone();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let plane = h * w;
                let count = n * plane;
                let cn = S::of_usize(count);
                let src = self.nodes[*x].data.clone();
                let g = self.nodes[*gain].data.clone();
                let mut dx = vec![S::zero(); src.len()];
                let mut dgain = vec![S::zero(); c];
                let mut dshift = vec![S::zero(); c];
                for ci in 0..c {
                    let inv = S::one() / (saved_var[ci] + *eps).sqrt();
                    let mut sum_dy = S::zero();
                    let mut sum_dy_xhat = S::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for j in 0..plane {
                            let xhat = (src[base + j] - saved_mean[ci]) * inv;
                            let dy = grad[base + j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                            dgain[ci] += dy * xhat;
                            dshift[ci] += dy;
                        }
                    }
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for j in 0..plane {
                            let dy = grad[base + j];
                            dx[base + j] = if *batch_stats {
                                let xhat = (src[base + j] - saved_mean[ci]) * inv;
                                g[ci] * inv * (dy - sum_dy / cn - xhat * sum_dy_xhat / cn)
                            } else {
                                g[ci] * inv * dy
                            };
                        }
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*shift, &dshift);
            }

            Op::SumAll { a } => {
                let d = vec![grad[0]; self.nodes[*a].data.len()];
                self.accumulate(*a, &d);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[*a].data.len();
                let d = vec![grad[0] / S::of_usize(n); n];
                self.accumulate(*a, &d);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let mean = matches!(op, Op::MeanAxis { .. });
                let shape = self.nodes[*a].shape.clone();
                let (outer, asize, inner) = split_at_axis(&shape, *axis);
                let scale = if mean {
                    S::one() / S::of_usize(asize)
                } else {
                    S::one()
                };
                let mut d = vec![S::zero(); self.nodes[*a].data.len()];
                for o in 0..outer {
                    for j in 0..asize {
                        for ii in 0..inner {
                            d[(o * asize + j) * inner + ii] = grad[o * inner + ii] * scale;
                        }
                    }
                }
                self.accumulate(*a, &d);
            }

            Op::Conv2d { x, kernel, bias, padding } => {
                let xs = self.nodes[*x].shape.clone();
                let ks = self.nodes[*kernel].shape.clone();
                let (n, cin, h, w) = match xs.len() {
                    3 => (1, xs[0], xs[1], xs[2]),
                    _ => (xs[0], xs[1], xs[2], xs[3]),
                };
                let (cout, ksize) = (ks[0], ks[2]);
                let want_bias = bias
                    .map(|b| self.nodes[b].requires_grad)
                    .unwrap_or(false);
                let (dx, dk, db) = kernels::conv2d_bwd(
                    grad,
                    &self.nodes[*x].data,
                    n,
                    cin,
                    h,
                    w,
                    &self.nodes[*kernel].data,
                    cout,
                    ksize,
                    *padding,
                    want_bias,
                );
                self.accumulate(*x, &dx);
                self.accumulate(*kernel, &dk);
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(*b, &db);
                }
            }

            Op::BilinearUp2x { x } => {
                let xs = self.nodes[*x].shape.clone();
                let (planes, h, w) = match xs.len() {
                    3 => (xs[0], xs[1], xs[2]),
                    _ => (xs[0] * xs[1], xs[2], xs[3]),
                };
                let dx = kernels::up2x_bwd(grad, planes, h, w);
                self.accumulate(*x, &dx);
            }
        }
    }

    /// Shared broadcast-aware gradient accumulation for binary elementwise ops.
    fn bcast_grad(
        &mut self,
        a: usize,
        b: usize,
        out_shape: &[usize],
        grad: &[S],
        da: impl Fn(S, S, S) -> S,
        db: impl Fn(S, S, S) -> S,
    ) {
        let a_shape = self.nodes[a].shape.clone();
        let b_shape = self.nodes[b].shape.clone();
        if self.nodes[a].requires_grad {
            let b_data = self.nodes[b].data.clone();
            let a_data = self.nodes[a].data.clone();
            self.ensure_grad(a);
            let acc = self.nodes[a].grad.as_mut().unwrap();
            bcast_accumulate(out_shape, &a_shape, &b_shape, acc, |o, ai, bi| {
                da(grad[o], a_data[ai], b_data[bi])
            });
        }
        if self.nodes[b].requires_grad {
            let b_data = self.nodes[b].data.clone();
            let a_data = self.nodes[a].data.clone();
            self.ensure_grad(b);
            let acc = self.nodes[b].grad.as_mut().unwrap();
            bcast_accumulate(out_shape, &b_shape, &a_shape, acc, |o, bi, ai| {
                db(grad[o], a_data[ai], b_data[bi])
            });
        }
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of_f64(0.044715);
    let half = S::of_f64(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::of_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of_f64(0.044715);
    let half = S::of_f64(0.5);
    let three = S::of_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let dinner = c * (S::one() + three * k * x * x);
    half * (S::one() + t) + half * x * sech2 * dinner
}

#[cfg(test)]
mod tests;
