use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvDims};
use super::{check_shape, Tensor};
use crate::{Error, Real, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter tensor in the slice a [`Tape`] was opened over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
}

enum Op<T> {
    Constant,
    Variable,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sum(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(usize),
    Concat(Vec<usize>),
    Conv2d {
        x: usize,
        kernel: usize,
        bias: usize,
        dims: ConvDims,
    },
    MaxPool {
        x: usize,
        argmax: Vec<u32>,
    },
    SoftmaxXent {
        logits: usize,
        label: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    // `None` for parameter leaves, whose data lives in the borrowed slice.
    value: Option<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Accumulated parameter gradients, one dense buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        ParamGrads {
            grads: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.grads.iter().map(Vec::as_slice)
    }

    /// `self += other`, element by element.
    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn into_vecs(self) -> Vec<Vec<T>> {
        self.grads
    }
}

/// Result of [`Tape::backward`]: gradients of the loss with respect to
/// every parameter and every variable leaf of the tape.
pub struct Gradients<T> {
    tape: u64,
    leaves: Vec<Option<Vec<T>>>,
    pub params: ParamGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a variable leaf, or `None` if it does not influence the
    /// loss or was not created with [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(v.idx).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> &[T] {
        self.params.get(id)
    }
}

/// ReLU on/off pattern and pooling argmax choices of one forward pass.
/// Two passes with equal patterns lie on the same linear piece of the
/// network, where finite differences are meaningful.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivationPattern(Vec<u64>);

/// A single-use record of a forward computation.
///
/// Parameters are borrowed, not copied; their gradients are routed
/// straight into a [`ParamGrads`] accumulator during the reverse sweep.
/// `backward` consumes the tape so its intermediates are freed with it.
pub struct Tape<'p, T> {
    id: u64,
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<'static, T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Real> Tape<'static, T> {
    /// A tape with no parameters; use [`Tape::variable`] for inputs that
    /// need gradients.
    pub fn new() -> Self {
        Tape::with_params(&[])
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn with_params(params: &'p [Tensor<T>]) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, shape: Vec<usize>, value: Option<Vec<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn val(&self, idx: usize) -> &[T] {
        let node = &self.nodes[idx];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params[p.0].data(),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(self.val(self.idx(v)?))
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.nodes[self.idx(v)?].shape)
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<T>> {
        let i = self.idx(v)?;
        Tensor::new(self.nodes[i].shape.clone(), self.val(i).to_vec())
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Some(t.into_data()), Op::Constant, false)
    }

    /// Input whose gradient is reported in [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Some(t.into_data()), Op::Variable, true)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let p = self
            .params
            .get(id.0)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {}", id.0)))?;
        let shape = p.shape().to_vec();
        Ok(self.push(shape, None, Op::Param(id), true))
    }

    fn binary_shapes(&self, op: &'static str, a: usize, b: usize) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    fn grad_of(&self, idxs: &[usize]) -> bool {
        idxs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Relu, None) => self.relu(a),
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (op, _) => Err(Error::invalid(format!("wrong operand count for {op:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let shape = self.binary_shapes("add", a, b)?;
        let v = zip_map(self.val(a), self.val(b), |x, y| x + y);
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(shape, Some(v), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let shape = self.binary_shapes("sub", a, b)?;
        let v = zip_map(self.val(a), self.val(b), |x, y| x - y);
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(shape, Some(v), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let shape = self.binary_shapes("mul", a, b)?;
        let v = zip_map(self.val(a), self.val(b), |x, y| x * y);
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(shape, Some(v), Op::Mul(a, b), ng))
    }

    /// Multiplication by a scalar constant (the one explicit broadcast).
    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.val(a).iter().map(|&x| x * s).collect();
        let (shape, ng) = (self.nodes[a].shape.clone(), self.nodes[a].needs_grad);
        Ok(self.push(shape, Some(v), Op::Scale(a, s), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self
            .val(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let (shape, ng) = (self.nodes[a].shape.clone(), self.nodes[a].needs_grad);
        Ok(self.push(shape, Some(v), Op::Relu(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let s: T = self.val(a).iter().copied().sum();
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(vec![1], Some(vec![s]), Op::Sum(a), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = kernels::matmul(self.val(a), self.val(b), m, k, n);
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(vec![m, n], Some(v), Op::MatMul { a, b, m, k, n }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let a = self.idx(a)?;
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.val(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let v = self.val(a).to_vec();
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(shape.to_vec(), Some(v), Op::Reshape(a), ng))
    }

    /// Row-major flattening to rank 1.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a)?.len();
        self.reshape(a, &[n])
    }

    /// Concatenates rank-1 vectors in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero vectors"));
        }
        let idxs = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let mut out = Vec::new();
        for &i in &idxs {
            if self.nodes[i].shape.len() != 1 {
                return Err(Error::InvalidShape {
                    shape: self.nodes[i].shape.clone(),
                    reason: "concat operands must be rank 1".into(),
                });
            }
            out.extend_from_slice(self.val(i));
        }
        let ng = self.grad_of(&idxs);
        Ok(self.push(vec![out.len()], Some(out), Op::Concat(idxs), ng))
    }

    /// Valid, stride-1 multi-channel cross-correlation plus bias.
    /// `x: [Cin, H, W]`, `kernel: [Cout, Cin, kh, kw]`, `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, kernel, bias) = (self.idx(x)?, self.idx(kernel)?, self.idx(bias)?);
        let (sx, sk, sb) = (
            &self.nodes[x].shape,
            &self.nodes[kernel].shape,
            &self.nodes[bias].shape,
        );
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sk.clone(),
            });
        }
        if sb.as_slice() != [sk[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: sb.clone(),
                rhs: vec![sk[0]],
            });
        }
        if sx[1] < sk[2] || sx[2] < sk[3] {
            return Err(Error::InvalidShape {
                shape: sx.clone(),
                reason: format!("smaller than the {}x{} kernel", sk[2], sk[3]),
            });
        }
        let dims = ConvDims {
            cin: sx[0],
            h: sx[1],
            w: sx[2],
            cout: sk[0],
            kh: sk[2],
            kw: sk[3],
        };
        let v = kernels::conv2d_forward(self.val(x), self.val(kernel), self.val(bias), dims);
        let ng = self.grad_of(&[x, kernel, bias]);
        let shape = vec![dims.cout, dims.oh(), dims.ow()];
        Ok(self.push(shape, Some(v), Op::Conv2d { x, kernel, bias, dims }, ng))
    }

    /// Non-overlapping max pooling of `[C, H, W]` with window `(rows, cols)`.
    pub fn max_pool(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.idx(x)?;
        let s = &self.nodes[x].shape;
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                shape: s.clone(),
                reason: "max pooling expects [C, H, W]".into(),
            });
        }
        if rows == 0 || cols == 0 || s[1] < rows || s[2] < cols {
            return Err(Error::InvalidShape {
                shape: s.clone(),
                reason: format!("cannot pool with a {rows}x{cols} window"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (v, argmax) = kernels::max_pool_forward(self.val(x), c, h, w, rows, cols);
        let ng = self.nodes[x].needs_grad;
        Ok(self.push(vec![c, h / rows, w / cols], Some(v), Op::MaxPool { x, argmax }, ng))
    }

    /// Softmax followed by the negative log-likelihood of `label`. Returns
    /// the scalar loss and the class probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<(Var, Vec<T>)> {
        let l = self.idx(logits)?;
        if self.nodes[l].shape.len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.nodes[l].shape.clone(),
                reason: "logits must be rank 1".into(),
            });
        }
        let z = self.val(l);
        if label >= z.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: z.len(),
            });
        }
        let (probs, log_norm) = softmax_with_log_norm(z);
        let loss = log_norm - z[label];
        let ng = self.nodes[l].needs_grad;
        let out = self.push(
            vec![1],
            Some(vec![loss]),
            Op::SoftmaxXent {
                logits: l,
                label,
                probs: probs.clone(),
            },
            ng,
        );
        Ok((out, probs))
    }

    /// ReLU masks and pooling argmaxes of every node recorded so far.
    pub fn activation_pattern(&self) -> ActivationPattern {
        let mut words = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    let mut word = 0u64;
                    for (i, &x) in self.val(*a).iter().enumerate() {
                        if x > T::zero() {
                            word |= 1 << (i % 64);
                        }
                        if i % 64 == 63 {
                            words.push(word);
                            word = 0;
                        }
                    }
                    words.push(word);
                }
                Op::MaxPool { argmax, .. } => words.extend(argmax.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        ActivationPattern(words)
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let mut params = ParamGrads::zeros_like(self.params);
        let leaves = self.sweep(loss, &mut params, T::one())?;
        Ok(Gradients {
            tape: self.id,
            leaves,
            params,
        })
    }

    /// Adds `weight · ∂loss/∂θ` into `acc` for every parameter.
    pub fn backward_into(self, loss: Var, acc: &mut ParamGrads<T>, weight: T) -> Result<()> {
        if acc.len() != self.params.len() {
            return Err(Error::invalid("gradient accumulator does not match the parameter set"));
        }
        self.sweep(loss, acc, weight)?;
        Ok(())
    }

    fn sweep(&self, loss: Var, acc: &mut ParamGrads<T>, seed: T) -> Result<Vec<Option<Vec<T>>>> {
        let root = self.idx(loss)?;
        if self.nodes[root].shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[root].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![seed]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: &mut grads,
                acc,
            };
            match &node.op {
                Op::Constant => {}
                Op::Variable => {
                    grads[i] = Some(g);
                }
                Op::Param(p) => {
                    // Only reached if the loss is the parameter itself.
                    for (x, &y) in acc.grads[p.0].iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::Add(a, b) => {
                    sink.add_scaled(*a, &g, T::one());
                    sink.add_scaled(*b, &g, T::one());
                }
                Op::Sub(a, b) => {
                    sink.add_scaled(*a, &g, T::one());
                    sink.add_scaled(*b, &g, -T::one());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    if let Some(t) = sink.target(*a) {
                        for ((t, &g), &y) in t.iter_mut().zip(&g).zip(vb) {
                            *t += g * y;
                        }
                    }
                    if let Some(t) = sink.target(*b) {
                        for ((t, &g), &x) in t.iter_mut().zip(&g).zip(va) {
                            *t += g * x;
                        }
                    }
                }
                Op::Scale(a, s) => sink.add_scaled(*a, &g, *s),
                Op::Relu(a) => {
                    let va = self.val(*a);
                    if let Some(t) = sink.target(*a) {
                        for ((t, &g), &x) in t.iter_mut().zip(&g).zip(va) {
                            if x > T::zero() {
                                *t += g;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(t) = sink.target(*a) {
                        t.iter_mut().for_each(|t| *t += g[0]);
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    if let Some(t) = sink.target(*a) {
                        kernels::matmul_grad_lhs(&g, vb, t, *m, *k, *n);
                    }
                    if let Some(t) = sink.target(*b) {
                        kernels::matmul_grad_rhs(va, &g, t, *m, *k, *n);
                    }
                }
                Op::Reshape(a) => sink.add_scaled(*a, &g, T::one()),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p].shape[0];
                        sink.add_scaled(p, &g[off..off + len], T::one());
                        off += len;
                    }
                }
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    dims,
                } => {
                    let (vx, vk) = (self.val(*x), self.val(*kernel));
                    if let Some(t) = sink.target(*kernel) {
                        kernels::conv2d_grad_kernel(vx, &g, t, *dims);
                    }
                    if let Some(t) = sink.target(*bias) {
                        kernels::conv2d_grad_bias(&g, t, dims.cout, dims.oh() * dims.ow());
                    }
                    if let Some(t) = sink.target(*x) {
                        kernels::conv2d_grad_input(vk, &g, t, *dims);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(t) = sink.target(*x) {
                        for (&src, &g) in argmax.iter().zip(&g) {
                            t[src as usize] += g;
                        }
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    label,
                    probs,
                } => {
                    if let Some(t) = sink.target(*logits) {
                        for (c, (t, &p)) in t.iter_mut().zip(probs).enumerate() {
                            let y = if c == *label { T::one() } else { T::zero() };
                            *t += g[0] * (p - y);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

/// Gradient destinations during the reverse sweep: parameter leaves write
/// into the accumulator, everything else into per-node buffers.
struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    acc: &'a mut ParamGrads<T>,
}

impl<T: Real> Sink<'_, T> {
    fn target(&mut self, idx: usize) -> Option<&mut [T]> {
        let node = &self.nodes[idx];
        if !node.needs_grad {
            return None;
        }
        match node.op {
            Op::Param(p) => Some(&mut self.acc.grads[p.0]),
            _ => {
                let len = node.shape.iter().product();
                Some(self.grads[idx].get_or_insert_with(|| vec![T::zero(); len]))
            }
        }
    }

    fn add_scaled(&mut self, idx: usize, g: &[T], s: T) {
        if let Some(t) = self.target(idx) {
            for (t, &g) in t.iter_mut().zip(g) {
                *t += s * g;
            }
        }
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Max-shifted softmax; also returns `log Σ exp(z)`.
pub(crate) fn softmax_with_log_norm<T: Real>(z: &[T]) -> (Vec<T>, T) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let probs = exps.into_iter().map(|e| e / total).collect();
    (probs, max + total.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn relu_add_scale_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        let r = tape.elementwise(ElementwiseOp::Relu, x, None).unwrap();
        assert_eq!(tape.value(r).unwrap(), &[0., 0., 2.]);

        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        let s = tape.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(s).unwrap(), &[4., 6.]);

        let c = tape.constant(t(&[2], &[2., 3.]));
        let z = tape.scale(c, 0.0).unwrap();
        assert_eq!(tape.value(z).unwrap(), &[0., 0.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[3], &[1., 2., 3.]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
        assert!(tape.elementwise(ElementwiseOp::Mul, a, None).is_err());
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).unwrap(), &[11.]);
        assert_eq!(tape.shape(c).unwrap(), &[1, 1]);

        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m = [1., 2., 3., 4., 5., 6.];
        let a = tape.constant(t(&[3, 2], &m));
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c).unwrap(), &m);

        assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[1], &[3.]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).unwrap(), &[1., 2., 3.]);
        let only = tape.concat(&[a]).unwrap();
        assert_eq!(tape.value(only).unwrap(), &[1., 2.]);
        let m = tape.constant(t(&[1, 2], &[1., 2.]));
        assert!(tape.concat(&[a, m]).is_err());
    }

    #[test]
    fn concat_routes_gradients() {
        let mut tape = Tape::new();
        let a = tape.variable(t(&[3], &[0.5, -1., 2.]));
        let b = tape.variable(t(&[2], &[7., 8.]));
        let c = tape.concat(&[a, b]).unwrap();
        let w = tape.constant(t(&[5], &[1., 1., 1., 2., 3.]));
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[1., 1., 1.]);
        assert_eq!(g.wrt(b).unwrap(), &[2., 3.]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2, 2], &[3., -1., 0., 5.]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1., 1., 1., 1.]);

        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));

        let mut other = Tape::<f64>::new();
        let y = other.variable(t(&[1], &[1.]));
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1], &[1.]));
        assert!(matches!(tape.add(x, y), Err(Error::DetachedVar)));
        assert!(matches!(tape.backward(y), Err(Error::DetachedVar)));
    }

    #[test]
    fn params_accumulate_into_buffer() {
        let params = vec![t(&[2], &[1., -2.])];
        let mut acc = ParamGrads::zeros_like(&params);
        for _ in 0..3 {
            let mut tape = Tape::with_params(&params);
            let p = tape.param(ParamId(0)).unwrap();
            let sq = tape.mul(p, p).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward_into(loss, &mut acc, 0.5).unwrap();
        }
        assert_eq!(acc.get(ParamId(0)), &[3., -6.]);
    }

    #[test]
    fn softmax_stable_for_large_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[2], &[1000., 0.]));
        let (loss, probs) = tape.softmax_cross_entropy(z, 0).unwrap();
        let l = tape.value(loss).unwrap()[0];
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!((probs[0] - 1.0).abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(z, 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
