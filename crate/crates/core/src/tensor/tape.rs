use super::kernels::{self, GroupLayout, Plan, Window};
use super::{numel, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { x: Var, w: Var, window: Window },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sum { x: Var, kept: Vec<usize> },
    Mean { x: Var, kept: Vec<usize>, count: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    L2Normalize { x: Var, norms: Vec<T> },
    Standardize { x: Var, layout: GroupLayout, inv_std: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended in evaluation
/// order, which is a topological order of the graph; [`Tape::backward`]
/// walks it once in reverse.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    track_branches: bool,
    branch_hash: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
            track_branches: false,
            branch_hash: FNV_OFFSET,
        }
    }

    /// Tape that rejects non-finite intermediates and fingerprints every
    /// discrete branch taken (relu active sets, pooling winners). Used by the
    /// gradient checker.
    pub fn checked() -> Self {
        Self {
            check_finite: true,
            track_branches: true,
            ..Self::new()
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Fingerprint of the discrete branches taken so far. Two evaluations of
    /// the same graph with equal fingerprints are on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
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
        self.nodes[v.0].requires_grad
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn mix(&mut self, v: u64) {
        self.branch_hash = (self.branch_hash ^ v).wrapping_mul(FNV_PRIME);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise binary (broadcasting) ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| TensorError::Shape {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                *o = f(x, y);
            }
        } else {
            Plan::new(&out_shape, sa, sb).for_each(|o, ia, ib| out[o] = f(av[ia], bv[ib]));
        }
        Ok((Tensor::new(out_shape, out)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push("scale", value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push("add_scalar", value, Op::AddScalar(a), rg)
    }

    // ---- linear algebra ----

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, T::zero());
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let value = transpose2(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::new([c, r], value)?, Op::Transpose(a), rg)
    }

    /// 2-D convolution of `x` (N,C,H,W) with `w` (O,C,k,k), symmetric zero
    /// padding, stride 1 or 2, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let shape_err = || TensorError::Shape {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(shape_err());
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::Contract(format!("conv2d: unsupported stride {stride}")));
        }
        let window = Window::new(&sx, sw[2], stride, pad).ok_or_else(shape_err)?;
        let o = sw[0];
        let ckk = window.c * window.k * window.k;
        let np = window.n * window.out_plane();
        let cols = kernels::im2col(self.value(x).data(), &window);
        let mut tmp = vec![T::zero(); o * np];
        T::gemm(o, ckk, np, self.value(w).data(), false, &cols, false, &mut tmp, T::zero());
        let out = channels_to_batch(&tmp, window.n, o, window.out_plane());
        let rg = self.rg(&[x, w]);
        self.push(
            "conv2d",
            Tensor::new([window.n, o, window.ho, window.wo], out)?,
            Op::Conv2d { x, w, window },
            rg,
        )
    }

    // ---- elementwise unary ----

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        if self.track_branches {
            let mut h = FNV_OFFSET;
            for (i, &x) in self.value(a).data().iter().enumerate() {
                // Exactly zero sits on the kink; give it its own tag.
                let tag = if x > T::zero() { 1 } else if x == T::zero() { 2 } else { 0 };
                h = (h ^ ((i as u64) << 2 | tag)).wrapping_mul(FNV_PRIME);
            }
            self.mix(h);
        }
        let rg = self.rg(&[a]);
        self.push("relu", value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push("sigmoid", value, Op::Sigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.ln());
        let rg = self.rg(&[a]);
        self.push("log", value, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push("exp", value, Op::Exp(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.sqrt());
        let rg = self.rg(&[a]);
        self.push("sqrt", value, Op::Sqrt(a), rg)
    }

    // ---- reductions ----

    fn kept_shape(&self, name: &'static str, a: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let shape = self.shape(a);
        let mut kept = shape.to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(TensorError::Shape {
                    op: name,
                    lhs: shape.to_vec(),
                    rhs: axes.to_vec(),
                });
            }
            kept[ax] = 1;
        }
        Ok(kept)
    }

    fn reduce_sum(&self, a: Var, kept: &[usize]) -> Vec<T> {
        let shape = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); numel(kept)];
        Plan::new(shape, shape, kept).for_each(|i, _, o| out[o] += src[i]);
        out
    }

    fn out_shape(kept: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
        if keepdim {
            kept.to_vec()
        } else {
            kept.iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        }
    }

    /// Sum over `axes`; `keepdim` retains them with extent 1.
    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let kept = self.kept_shape("sum", a, axes)?;
        let data = self.reduce_sum(a, &kept);
        let value = Tensor::new(Self::out_shape(&kept, axes, keepdim), data)?;
        let rg = self.rg(&[a]);
        self.push("sum", value, Op::Sum { x: a, kept }, rg)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let kept = self.kept_shape("mean", a, axes)?;
        let count = numel(self.shape(a)) / numel(&kept).max(1);
        let inv = T::one() / T::from_usize(count.max(1)).unwrap();
        let data = self.reduce_sum(a, &kept).into_iter().map(|v| v * inv).collect();
        let value = Tensor::new(Self::out_shape(&kept, axes, keepdim), data)?;
        let rg = self.rg(&[a]);
        self.push("mean", value, Op::Mean { x: a, kept, count }, rg)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes, false)
    }

    /// Max pooling over (N,C,H,W) with a square `k x k` window.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let window = (s.len() == 4 && pad < k)
            .then(|| Window::new(&s, k, stride, pad))
            .flatten()
            .ok_or_else(|| TensorError::Shape {
                op: "max_pool2d",
                lhs: s.clone(),
                rhs: vec![k, stride, pad],
            })?;
        let (out, argmax, ties) = kernels::max_pool(self.value(x).data(), &window);
        if self.track_branches {
            let mut h = FNV_OFFSET;
            for &i in &argmax {
                h = (h ^ i as u64).wrapping_mul(FNV_PRIME);
            }
            // Ties are kinks as well.
            self.mix(h ^ ties as u64);
        }
        let rg = self.rg(&[x]);
        self.push(
            "max_pool2d",
            Tensor::new([window.n, window.c, window.ho, window.wo], out)?,
            Op::MaxPool { x, argmax },
            rg,
        )
    }

    // ---- structural ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for &p in parts {
                let span = self.shape(p)[axis] * tail;
                out.extend_from_slice(&self.value(p).data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Divides every slice along the last axis by `sqrt(sum(x^2) + 1e-12)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Shape {
            op: "l2_normalize",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let eps = T::of(1e-12);
        let src = self.value(a).data();
        let rows = src.len().checked_div(d).unwrap_or(0);
        let mut out = Vec::with_capacity(src.len());
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(&[a]);
        self.push("l2_normalize", Tensor::new(shape, out)?, Op::L2Normalize { x: a, norms }, rg)
    }

    /// Zero-mean, unit-variance standardization of each group described by
    /// `layout`: `(x - mean) / sqrt(var + eps)` with the population variance.
    /// Shared by batch/layer/group normalization and weight standardization.
    pub fn standardize(&mut self, a: Var, layout: GroupLayout, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if numel(&shape) != layout.numel() || layout.group_size() == 0 {
            return Err(TensorError::Shape {
                op: "standardize",
                lhs: shape,
                rhs: vec![layout.outer, layout.groups, layout.inner],
            });
        }
        let src = self.value(a).data();
        let (means, vars) = kernels::group_moments(src, &layout);
        let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); src.len()];
        for g in 0..layout.groups {
            let (m, s) = (means[g], inv_std[g]);
            layout.for_group(g, |i| out[i] = (src[i] - m) * s);
        }
        let rg = self.rg(&[a]);
        self.push(
            "standardize",
            Tensor::new(shape, out)?,
            Op::Standardize { x: a, layout, inv_std },
            rg,
        )
    }

    /// Identity in the forward pass; gradients stop here.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.push("stop_gradient", value, Op::StopGradient, false)
    }

    // ---- reverse pass ----

    /// Back-propagates from a single-element `loss`, consuming the tape.
    /// Every differentiable leaf receives a gradient (zero when unreachable).
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        leaf_grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(idx, g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[idx].is_none() {
                leaf_grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&self, idx: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if self.requires_grad(*a) {
                    let ga = kernels::reduce_to(&g, out_shape, self.shape(*a));
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = kernels::reduce_to(&g, out_shape, self.shape(*b));
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                Plan::new(out_shape, self.shape(*a), self.shape(*b)).for_each(|o, ia, ib| {
                    if is_div {
                        ga[ia] += g[o] / bv[ib];
                        gb[ib] -= g[o] * av[ia] / (bv[ib] * bv[ib]);
                    } else {
                        ga[ia] += g[o] * bv[ib];
                        gb[ib] += g[o] * av[ia];
                    }
                });
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.into_iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g, false, self.value(*b).data(), true, &mut ga, T::zero());
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), true, &g, false, &mut gb, T::zero());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                self.accumulate(grads, *a, transpose2(&g, r, c));
            }
            Op::Conv2d { x, w, window } => {
                let o = self.shape(*w)[0];
                let ckk = window.c * window.k * window.k;
                let np = window.n * window.out_plane();
                let g_cols = batch_to_channels(&g, window.n, o, window.out_plane());
                if self.requires_grad(*w) {
                    let cols = kernels::im2col(self.value(*x).data(), window);
                    let mut gw = vec![T::zero(); o * ckk];
                    T::gemm(o, np, ckk, &g_cols, false, &cols, true, &mut gw, T::zero());
                    self.accumulate(grads, *w, gw);
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); ckk * np];
                    T::gemm(ckk, o, np, self.value(*w).data(), true, &g_cols, false, &mut dcols, T::zero());
                    self.accumulate(grads, *x, kernels::col2im(&dcols, window));
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let xv = self.value(*a).data();
                let ga = g.iter().zip(xv).map(|(&gi, &xi)| gi / xi).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                let ga = g.iter().zip(y).map(|(&gi, &yi)| gi / (two * yi)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sum { x, kept } | Op::Mean { x, kept, .. } => {
                let scale = match &node.op {
                    Op::Mean { count, .. } => T::one() / T::from_usize((*count).max(1)).unwrap(),
                    _ => T::one(),
                };
                let shape = self.shape(*x);
                let mut gx = vec![T::zero(); numel(shape)];
                Plan::new(shape, shape, kept).for_each(|i, _, o| gx[i] = g[o] * scale);
                self.accumulate(grads, *x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&i, &gi) in argmax.iter().zip(&g) {
                    gx[i] += gi;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let tail: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let row = out_shape[*axis] * tail;
                let mut offset = 0;
                for &p in parts {
                    let span = self.shape(p)[*axis] * tail;
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * span);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + offset..o * row + offset + span]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += span;
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *out_shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (r, &n) in norms.iter().enumerate() {
                    let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| (gi - yi * dot) / n));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Standardize { x, layout, inv_std } => {
                let count = T::from_usize(layout.group_size()).unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for (grp, &s) in inv_std.iter().enumerate() {
                    let (mut mg, mut mgy) = (T::zero(), T::zero());
                    layout.for_group(grp, |i| {
                        mg += g[i];
                        mgy += g[i] * y[i];
                    });
                    mg = mg / count;
                    mgy = mgy / count;
                    layout.for_group(grp, |i| gx[i] = s * (g[i] - mg - y[i] * mgy));
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn transpose2<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}

/// (O, N*P) -> (N, O, P)
fn channels_to_batch<T: Copy>(src: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for ni in 0..n {
        for oi in 0..o {
            out.extend_from_slice(&src[oi * n * p + ni * p..oi * n * p + (ni + 1) * p]);
        }
    }
    out
}

/// (N, O, P) -> (O, N*P)
fn batch_to_channels<T: Copy>(src: &[T], n: usize, o: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for oi in 0..o {
        for ni in 0..n {
            out.extend_from_slice(&src[(ni * o + oi) * p..(ni * o + oi + 1) * p]);
        }
    }
    out
}

/// Gradients of the differentiable leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf registered with [`Tape::param`]; `None` for
    /// constants and intermediate nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
