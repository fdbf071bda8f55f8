use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::tensor::axis_extents;
use super::{NumericsError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only record of the operations applied to [`Var`]s, used to run the
/// reverse pass.
///
/// Nodes only reference earlier nodes, so the recorded graph is acyclic by
/// construction. A tape is single-owner; concurrent computations each build
/// their own.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<usize>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Square(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Matmul(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    LogSumExpAxis(usize, usize),
    Slice { src: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Repeat { src: usize, axis: usize, n: usize },
    Reshape(usize),
    ClampMin(usize, f64),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    /// Records a constant input; it receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf)
    }

    /// Records a trainable leaf. Parameters are reported by [`Tape::backward`]
    /// in registration order.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        let v = self.push(t, Op::Leaf);
        self.params.borrow_mut().push(v.idx);
        v
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn num_params(&self) -> usize {
        self.params.borrow().len()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    fn value(&self, idx: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, NumericsError> {
        let first = parts.first().ok_or(NumericsError::EmptyConcat)?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(NumericsError::Axis { op: "concat", axis, shape: base });
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::ShapeMismatch { op: "concat", left: base.clone(), right: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let seg = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * seg..(o + 1) * seg]);
            }
        }
        let out = Tensor::new(&shape, data).expect("concat shape");
        Ok(self.push(out, Op::Concat { parts: parts.iter().map(|p| p.idx).collect(), axis }))
    }

    /// Reverse pass from a one-element `root`. Returns one gradient per
    /// registered parameter, in registration order; parameters that do not
    /// influence `root` get zeros.
    pub fn backward(&self, root: Var<'_>) -> Result<Vec<Tensor>, NumericsError> {
        let grads = self.backward_nodes(root)?;
        let params = self.params.borrow();
        let nodes = self.nodes.borrow();
        Ok(params
            .iter()
            .map(|&p| grads[p].clone().unwrap_or_else(|| Tensor::zeros(nodes[p].value.shape())))
            .collect())
    }

    /// Gradient of `root` with respect to arbitrary recorded values.
    pub fn gradient_of(&self, root: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>, NumericsError> {
        let grads = self.backward_nodes(root)?;
        let nodes = self.nodes.borrow();
        Ok(wrt
            .iter()
            .map(|w| grads[w.idx].clone().unwrap_or_else(|| Tensor::zeros(nodes[w.idx].value.shape())))
            .collect())
    }

    fn backward_nodes(&self, root: Var<'_>) -> Result<Vec<Option<Tensor>>, NumericsError> {
        if root.tape.id != self.id {
            return Err(NumericsError::ForeignRoot);
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.idx].value;
        if !root_value.is_scalar() {
            return Err(NumericsError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.idx + 1];
        grads[root.idx] = Some(Tensor::filled(root_value.shape(), 1.0));

        for idx in (0..=root.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(&g, val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(&g, val(*a).shape()));
                    accumulate(&mut grads, *b, reduce_to(&g, val(*b).shape()).map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = broadcast_zip(&g, bv, |x, y| x * y);
                    let gb = broadcast_zip(&g, av, |x, y| x * y);
                    accumulate(&mut grads, *a, reduce_to(&ga, av.shape()));
                    accumulate(&mut grads, *b, reduce_to(&gb, bv.shape()));
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.map(|v| -v)),
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|v| v * c))
                }
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Square(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |g, x| 2.0 * g * x)),
                Op::Exp(a) => accumulate(&mut grads, *a, zip(&g, &node.value, |g, y| g * y)),
                Op::Log(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |g, x| g / x)),
                Op::Tanh(a) => accumulate(&mut grads, *a, zip(&g, &node.value, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => accumulate(&mut grads, *a, zip(&g, &node.value, |g, y| g * y * (1.0 - y))),
                Op::Softplus(a) => accumulate(&mut grads, *a, zip(&g, val(*a), |g, x| g * kernels::sigmoid(x))),
                Op::Matmul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    let ga = kernels::matmul_bt(g.data(), bv.data(), m, n, k);
                    let gb = kernels::matmul_at(av.data(), g.data(), m, k, n);
                    accumulate(&mut grads, *a, Tensor::new(&[m, k], ga).expect("matmul grad"));
                    accumulate(&mut grads, *b, Tensor::new(&[k, n], gb).expect("matmul grad"));
                }
                Op::SumAll(a) => {
                    let s = g.item();
                    accumulate(&mut grads, *a, Tensor::filled(val(*a).shape(), s))
                }
                Op::MeanAll(a) => {
                    let av = val(*a);
                    let s = g.item() / av.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(av.shape(), s))
                }
                Op::SumAxis(a, axis) => {
                    let shape = val(*a).shape().to_vec();
                    let (outer, n, inner) = axis_extents(&shape, *axis);
                    let gd = g.data();
                    let data = (0..outer * n * inner)
                        .map(|flat| {
                            let o = flat / (n * inner);
                            let i = flat % inner;
                            gd[o * inner + i]
                        })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(&shape, data).expect("sum_axis grad"))
                }
                Op::LogSumExpAxis(a, axis) => {
                    let av = val(*a);
                    let (outer, n, inner) = axis_extents(av.shape(), *axis);
                    let (gd, od, ad) = (g.data(), node.value.data(), av.data());
                    let data = (0..outer * n * inner)
                        .map(|flat| {
                            let o = flat / (n * inner);
                            let i = flat % inner;
                            gd[o * inner + i] * (ad[flat] - od[o * inner + i]).exp()
                        })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(av.shape(), data).expect("lse grad"))
                }
                Op::Slice { src, axis, start } => {
                    let sv = val(*src);
                    let (outer, n, inner) = axis_extents(sv.shape(), *axis);
                    let len = node.value.shape()[*axis];
                    let mut out = Tensor::zeros(sv.shape());
                    let od = out.data_mut();
                    for o in 0..outer {
                        let dst = o * n * inner + start * inner;
                        let src_off = o * len * inner;
                        od[dst..dst + len * inner].copy_from_slice(&g.data()[src_off..src_off + len * inner]);
                    }
                    accumulate(&mut grads, *src, out)
                }
                Op::Concat { parts, axis } => {
                    let shape = node.value.shape().to_vec();
                    let (outer, total, inner) = axis_extents(&shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let ps = val(p).shape().to_vec();
                        let len = ps[*axis];
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = o * total * inner + offset * inner;
                            data.extend_from_slice(&g.data()[from..from + len * inner]);
                        }
                        offset += len;
                        accumulate(&mut grads, p, Tensor::new(&ps, data).expect("concat grad"));
                    }
                }
                Op::Repeat { src, axis, n } => {
                    let sv = val(*src);
                    let outer: usize = sv.shape()[..*axis].iter().product();
                    let inner: usize = sv.shape()[*axis..].iter().product();
                    let mut data = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for r in 0..*n {
                            let from = (o * n + r) * inner;
                            for i in 0..inner {
                                data[o * inner + i] += g.data()[from + i];
                            }
                        }
                    }
                    accumulate(&mut grads, *src, Tensor::new(sv.shape(), data).expect("repeat grad"))
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshaped(&shape).expect("reshape grad"))
                }
                Op::ClampMin(a, floor) => {
                    let floor = *floor;
                    accumulate(&mut grads, *a, zip(&g, val(*a), |g, x| if x > floor { g } else { 0.0 }))
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip shape")
}

/// `f(big[i], small[i % small.len()])` with `small` broadcast over leading axes.
fn broadcast_zip(big: &Tensor, small: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let p = small.len();
    let sd = small.data();
    let data = big.data().iter().enumerate().map(|(i, &x)| f(x, sd[i % p])).collect();
    Tensor::new(big.shape(), data).expect("broadcast shape")
}

/// Sums a gradient over the leading axes that were broadcast to reach it.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let p: usize = shape.iter().product();
    let mut data = vec![0.0; p];
    for (i, v) in g.data().iter().enumerate() {
        data[i % p] += v;
    }
    Tensor::new(shape, data).expect("reduce shape")
}

/// Result shape for elementwise binary ops: equal shapes, or one shape is a
/// trailing suffix of the other (broadcast over leading axes).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, NumericsError> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(NumericsError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() })
}

// Fallible arithmetic (shape checks), so the operator traits don't fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.push(out, op)
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (pa, pb) = (a.len(), b.len());
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n).map(|i| f(ad[i % pa], bd[i % pb])).collect();
        let out = Tensor::new(&shape, data)?;
        let op = match name {
            "add" => Op::Add(self.idx, other.idx),
            "sub" => Op::Sub(self.idx, other.idx),
            _ => Op::Mul(self.idx, other.idx),
        };
        Ok(self.tape.push(out, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(other, "add", |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(other, "sub", |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(other, "mul", |x, y| x * y)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, c), |x| x * c)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.idx), |x| x + c)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.idx), |x| x * x)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), f64::exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(self) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(NumericsError::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        Ok(self.unary(Op::Log(self.idx), f64::ln))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), kernels::sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.idx), kernels::softplus)
    }

    /// Elementwise `max(x, floor)`; the gradient is zero where the floor binds.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.idx, floor), move |x| x.max(floor))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch { op: "matmul", left: sa.to_vec(), right: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        Ok(self.tape.push(out, Op::Matmul(self.idx, other.idx)))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let m = v.sum() / v.len() as f64;
        self.tape.push(Tensor::scalar(m), Op::MeanAll(self.idx))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(NumericsError::Axis { op: "sum_axis", axis, shape: shape.to_vec() });
        }
        let (outer, n, inner) = axis_extents(shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += v.data()[base + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape.push(out, Op::SumAxis(self.idx, axis)))
    }

    /// Numerically stable `log(sum(exp(x)))` over `axis`, removing it.
    pub fn logsumexp_axis(self, axis: usize) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(NumericsError::Axis { op: "logsumexp_axis", axis, shape: shape.to_vec() });
        }
        let (outer, n, inner) = axis_extents(shape, axis);
        let d = v.data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                let m = (0..n).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n).map(|j| (at(j) - m).exp()).sum();
                data.push(m + s.ln());
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape.push(out, Op::LogSumExpAxis(self.idx, axis)))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(NumericsError::Axis { op: "slice", axis, shape: shape.to_vec() });
        }
        let (outer, n, inner) = axis_extents(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = o * n * inner + start * inner;
            data.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape.push(out, Op::Slice { src: self.idx, axis, start }))
    }

    /// Inserts a new axis of extent `n` at position `axis`, copying values.
    pub fn repeat(self, axis: usize, n: usize) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        let shape = v.shape();
        if axis > shape.len() || n == 0 {
            return Err(NumericsError::Axis { op: "repeat", axis, shape: shape.to_vec() });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&v.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.insert(axis, n);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.tape.push(out, Op::Repeat { src: self.idx, axis, n }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, NumericsError> {
        let out = (*self.value()).clone().reshaped(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.idx)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.square();
        let g = tape.backward(y).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn untouched_param_gets_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        let y = x.exp();
        let g = tape.backward(y).unwrap();
        assert_eq!(g[1], Tensor::zeros(&[2]));
        let _ = p;
    }

    #[test]
    fn root_must_be_scalar_and_local() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x.exp()), Err(NumericsError::NonScalarRoot(_))));
        let other = Tape::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(NumericsError::ForeignRoot)));
    }

    #[test]
    fn catalog_values() {
        let tape = Tape::new();
        let z = tape.scalar(0.0);
        assert_eq!(z.sigmoid().item(), 0.5);
        assert!((z.softplus().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(z.log(), Err(NumericsError::Domain { .. })));
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let a = t(&[3, 3], &[1., -2., 3., 0.5, 4., -1., 7., 8., 9.]);
        let i = tape.constant(Tensor::identity(3));
        let av = tape.constant(a.clone());
        assert_eq!(*i.matmul(av).unwrap().value(), a);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        assert!(a.matmul(a).is_err());
    }

    #[test]
    fn broadcast_over_leading_axes() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.param(t(&[2], &[10., 20.]));
        let c = a.add(b).unwrap();
        assert_eq!(c.value().data(), &[11., 22., 13., 24.]);
        let g = tape.backward(c.sum()).unwrap();
        assert_eq!(g[1].data(), &[2.0, 2.0]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let left = a.slice(1, 0, 1).unwrap();
        let right = a.slice(1, 1, 2).unwrap();
        let back = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(*back.value(), *a.value());
        let w = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let g = tape.backward(back.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g[0].data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn logsumexp_matches_direct() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[0.0, 1.0, 2.0, -1.0]));
        let l = a.logsumexp_axis(0).unwrap();
        let d = l.value();
        assert!((d.data()[0] - (1.0f64 + 2f64.exp()).ln()).abs() < 1e-14);
        assert!((d.data()[1] - (1f64.exp() + (-1f64).exp()).ln()).abs() < 1e-14);
    }

    #[test]
    fn repeat_inserts_axis() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let r = a.repeat(1, 3).unwrap();
        assert_eq!(r.shape(), vec![2, 3, 2]);
        assert_eq!(&r.value().data()[..6], &[1., 2., 1., 2., 1., 2.]);
        let g = tape.backward(r.sum()).unwrap();
        assert_eq!(g[0].data(), &[3., 3., 3., 3.]);
    }
}
