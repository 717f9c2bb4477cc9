//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! Every primitive appends one record to the [`Tape`]; records are stored in
//! creation order, so the order is topological by construction and the
//! backward pass is a single reverse sweep.

use std::collections::BTreeMap;
use std::fmt;

use super::params::{Group, ParamGrads, ParamSet};
use super::tensor::{axis_extents, remove_axis, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used in records and error messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    Constant,
    MatMul,
    BiasAdd,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Mul,
    Add,
    Sub,
    ScalarMul,
    ReduceSum,
    ReduceMean,
    LogSoftmaxGrouped,
    GatherByOnehot,
    Broadcast,
    Reshape,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Primitive::Leaf => "leaf",
            Primitive::Constant => "constant",
            Primitive::MatMul => "matmul",
            Primitive::BiasAdd => "bias-add",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Mul => "elementwise-mul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::ScalarMul => "scalar-mul",
            Primitive::ReduceSum => "reduce-sum",
            Primitive::ReduceMean => "reduce-mean",
            Primitive::LogSoftmaxGrouped => "log-softmax-grouped",
            Primitive::GatherByOnehot => "gather-by-onehot",
            Primitive::Broadcast => "broadcast",
            Primitive::Reshape => "reshape",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    ScalarMul(Var, S),
    ReduceSum(Var, Option<usize>),
    ReduceMean(Var, Option<usize>),
    LogSoftmax(Var, usize),
    Gather(Var, Tensor<S>, usize),
    Broadcast(Var),
    Reshape(Var),
}

impl<S> Op<S> {
    fn kind(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Constant => Primitive::Constant,
            Op::MatMul(..) => Primitive::MatMul,
            Op::BiasAdd(..) => Primitive::BiasAdd,
            Op::Relu(_) => Primitive::Relu,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Exp(_) => Primitive::Exp,
            Op::Log(_) => Primitive::Log,
            Op::Mul(..) => Primitive::Mul,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::ScalarMul(..) => Primitive::ScalarMul,
            Op::ReduceSum(..) => Primitive::ReduceSum,
            Op::ReduceMean(..) => Primitive::ReduceMean,
            Op::LogSoftmax(..) => Primitive::LogSoftmaxGrouped,
            Op::Gather(..) => Primitive::GatherByOnehot,
            Op::Broadcast(_) => Primitive::Broadcast,
            Op::Reshape(_) => Primitive::Reshape,
        }
    }
}

#[derive(Clone, Debug)]
struct Record<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Parameter name to tape handle, produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, (Group, Var)>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Usage(format!("parameter `{name}` not bound on this tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Group, Var)> {
        self.vars.iter().map(|(k, (g, v))| (k.as_str(), *g, *v))
    }

    /// Current values of the bound parameters as a fresh [`ParamSet`].
    pub fn snapshot<S: Scalar>(&self, tape: &Tape<S>) -> Result<ParamSet<S>> {
        let mut set = ParamSet::new();
        for (name, group, v) in self.iter() {
            set.insert(name, group, tape.value(v).clone())?;
        }
        Ok(set)
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape<S = f64> {
    records: Vec<Record<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.records[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.records[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> Primitive {
        self.records[v.0].op.kind()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var {
        self.records.push(Record {
            op,
            value,
            requires_grad,
        });
        Var(self.records.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.records[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Registers every parameter as a leaf.
    pub fn bind(&mut self, params: &ParamSet<S>) -> Bindings {
        let vars = params
            .iter()
            .map(|(name, p)| (name.to_string(), (p.group, self.leaf(p.value.clone()))))
            .collect();
        Bindings { vars }
    }

    /// Registers parameters of `group` as leaves and the rest as constants.
    pub fn bind_group(&mut self, params: &ParamSet<S>, group: Group) -> Bindings {
        let vars = params
            .iter()
            .map(|(name, p)| {
                let v = if p.group == group {
                    self.leaf(p.value.clone())
                } else {
                    self.constant(p.value.clone())
                };
                (name.to_string(), (p.group, v))
            })
            .collect();
        Bindings { vars }
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen(&mut self, params: &ParamSet<S>) -> Bindings {
        let vars = params
            .iter()
            .map(|(name, p)| (name.to_string(), (p.group, self.constant(p.value.clone()))))
            .collect();
        Bindings { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape("bias-add", format!("{sa:?} + {sb:?}")));
        }
        let n = sa[1];
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::BiasAdd(a, bias), Tensor::from_parts(shape, out), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(S::zero()));
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(Op::Exp(a), v, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > S::zero())) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        Ok(self.push(Op::Log(a), v, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<S>, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(op, out, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise-mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn scalar_mul(&mut self, a: Var, c: S) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::ScalarMul(a, c), v, rg)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(a)),
            ));
        }
        Ok(())
    }

    fn reduce(&self, a: Var, axis: Option<usize>) -> Tensor<S> {
        let t = self.value(a);
        match axis {
            None => Tensor::scalar(t.sum()),
            Some(axis) => {
                let (outer, n, inner) = axis_extents(t.shape(), axis);
                let d = t.data();
                let mut out = vec![S::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc = *acc + v;
                        }
                    }
                }
                Tensor::from_parts(remove_axis(t.shape(), axis), out)
            }
        }
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn reduce_sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis("reduce-sum", a, ax)?;
        }
        let v = self.reduce(a, axis);
        let rg = self.rg(a);
        Ok(self.push(Op::ReduceSum(a, axis), v, rg))
    }

    pub fn reduce_mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        if let Some(ax) = axis {
            self.check_axis("reduce-mean", a, ax)?;
        }
        let count = match axis {
            None => self.value(a).len(),
            Some(ax) => self.shape(a)[ax],
        };
        let inv = S::one() / S::from_usize(count).unwrap();
        let v = self.reduce(a, axis).map(|x| x * inv);
        let rg = self.rg(a);
        Ok(self.push(Op::ReduceMean(a, axis), v, rg))
    }

    /// Log-softmax normalising independently over `axis` for every position
    /// of the remaining axes.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log-softmax-grouped", a, axis)?;
        let t = self.value(a);
        let (outer, n, inner) = axis_extents(t.shape(), axis);
        let d = t.data();
        let mut out = vec![S::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| d[idx(j)]).fold(S::neg_infinity(), S::max);
                let lse = m + (0..n).map(|j| (d[idx(j)] - m).exp()).sum::<S>().ln();
                for j in 0..n {
                    out[idx(j)] = d[idx(j)] - lse;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmax(a, axis), Tensor::from_parts(shape, out), rg))
    }

    /// Selects, along `axis`, the entry flagged by a one-hot mask of the same
    /// shape. The mask is data, not a differentiable input.
    pub fn gather_onehot(&mut self, a: Var, mask: &Tensor<S>, axis: usize) -> Result<Var> {
        self.check_axis("gather-by-onehot", a, axis)?;
        if mask.shape() != self.shape(a) {
            return Err(Error::shape(
                "gather-by-onehot",
                format!("mask {:?} vs input {:?}", mask.shape(), self.shape(a)),
            ));
        }
        let (outer, n, inner) = axis_extents(mask.shape(), axis);
        let md = mask.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut ones = 0;
                for j in 0..n {
                    let v = md[(o * n + j) * inner + i];
                    if v == S::one() {
                        ones += 1;
                    } else if v != S::zero() {
                        return Err(Error::domain("gather-by-onehot", "mask entries must be 0 or 1"));
                    }
                }
                if ones != 1 {
                    return Err(Error::domain(
                        "gather-by-onehot",
                        format!("group has {ones} hot entries"),
                    ));
                }
            }
        }
        let t = self.value(a);
        let prod: Vec<S> = t.data().iter().zip(md).map(|(&x, &m)| x * m).collect();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + prod[(o * n + j) * inner + i];
                }
            }
        }
        let shape = remove_axis(t.shape(), axis);
        let rg = self.rg(a);
        Ok(self.push(
            Op::Gather(a, mask.clone(), axis),
            Tensor::from_parts(shape, out),
            rg,
        ))
    }

    /// Numpy-style broadcast to `shape`: missing leading dims are prepended
    /// and size-1 dims expand.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let map = BroadcastMap::new(&src, shape)
            .ok_or_else(|| Error::shape("broadcast", format!("{src:?} -> {shape:?}")))?;
        let d = self.value(a).data();
        let out: Vec<S> = (0..map.len()).map(|i| d[map.source(i)]).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Broadcast(a), Tensor::from_parts(shape.to_vec(), out), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), v, rg))
    }

    /// Gradients of a scalar `output` with respect to every node. Entries
    /// are `None` for nodes that do not influence the output or do not
    /// require gradients.
    pub fn backward_all(&self, output: Var) -> Result<Vec<Option<Tensor<S>>>> {
        if output.0 >= self.records.len() {
            return Err(Error::Usage("output was not produced on this tape".into()));
        }
        if !self.value(output).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.shape(output), S::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let rec = &self.records[idx];
            if !rec.requires_grad {
                continue;
            }
            self.propagate(rec, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient of `output` for every bound parameter; parameters with no
    /// path to the output receive zeros.
    pub fn backward(&self, output: Var, bindings: &Bindings) -> Result<ParamGrads<S>> {
        let mut all = self.backward_all(output)?;
        let map = bindings
            .iter()
            .map(|(name, group, v)| {
                let g = all
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .filter(|_| self.records[v.0].requires_grad)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.to_string(), (group, g))
            })
            .collect();
        Ok(ParamGrads::from_map(map))
    }

    fn propagate(&self, rec: &Record<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        let mut send = |v: Var, t: Tensor<S>| {
            if !self.records[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |v: Var, f: &dyn Fn(usize, S) -> S| -> Tensor<S> {
            let shape = self.shape(v).to_vec();
            Tensor::from_parts(shape, gd.iter().enumerate().map(|(i, &x)| f(i, x)).collect())
        };
        match &rec.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    // dA = G B^T
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    send(*a, Tensor::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let mut db = vec![S::zero(); k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == S::zero() {
                                continue;
                            }
                            for (d, &x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d = *d + aip * x;
                            }
                        }
                    }
                    send(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::BiasAdd(a, b) => {
                send(*a, g.clone());
                let n = self.shape(*b)[0];
                let mut db = vec![S::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d = *d + x;
                    }
                }
                send(*b, Tensor::from_parts(vec![n], db));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let t = elementwise(*a, &|i, gi| if x[i] > S::zero() { gi } else { S::zero() });
                send(*a, t);
            }
            Op::Sigmoid(a) => {
                let y = rec.value.data();
                let t = elementwise(*a, &|i, gi| gi * y[i] * (S::one() - y[i]));
                send(*a, t);
            }
            Op::Exp(a) => {
                let y = rec.value.data();
                send(*a, elementwise(*a, &|i, gi| gi * y[i]));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                send(*a, elementwise(*a, &|i, gi| gi / x[i]));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    send(*a, elementwise(*a, &|i, gi| gi * bv[i]));
                }
                if self.rg(*b) {
                    send(*b, elementwise(*b, &|i, gi| gi * av[i]));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::ScalarMul(a, c) => send(*a, g.map(|x| x * *c)),
            Op::ReduceSum(a, axis) | Op::ReduceMean(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let scale = if matches!(rec.op, Op::ReduceMean(..)) {
                    let count = match axis {
                        None => self.value(*a).len(),
                        Some(ax) => shape[*ax],
                    };
                    S::one() / S::from_usize(count).unwrap()
                } else {
                    S::one()
                };
                let t = match axis {
                    None => Tensor::full(&shape, gd[0] * scale),
                    Some(ax) => {
                        let (outer, n, inner) = axis_extents(&shape, *ax);
                        let mut out = vec![S::zero(); outer * n * inner];
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    out[(o * n + j) * inner + i] = gd[o * inner + i] * scale;
                                }
                            }
                        }
                        Tensor::from_parts(shape, out)
                    }
                };
                send(*a, t);
            }
            Op::LogSoftmax(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_extents(&shape, *axis);
                let y = rec.value.data();
                let mut out = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let gsum: S = (0..n).map(|j| gd[idx(j)]).sum();
                        for j in 0..n {
                            out[idx(j)] = gd[idx(j)] - y[idx(j)].exp() * gsum;
                        }
                    }
                }
                send(*a, Tensor::from_parts(shape, out));
            }
            Op::Gather(a, mask, axis) => {
                let shape = self.shape(*a).to_vec();
                let (outer, n, inner) = axis_extents(&shape, *axis);
                let md = mask.data();
                let mut out = vec![S::zero(); md.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            let k = (o * n + j) * inner + i;
                            out[k] = md[k] * gd[o * inner + i];
                        }
                    }
                }
                send(*a, Tensor::from_parts(shape, out));
            }
            Op::Broadcast(a) => {
                let src = self.shape(*a).to_vec();
                let map = BroadcastMap::new(&src, rec.value.shape()).expect("validated in forward");
                let mut out = vec![S::zero(); self.value(*a).len()];
                for (i, &x) in gd.iter().enumerate() {
                    let s = map.source(i);
                    out[s] = out[s] + x;
                }
                send(*a, Tensor::from_parts(src, out));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                send(*a, Tensor::from_parts(shape, gd.to_vec()));
            }
        }
    }
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aip * bv;
            }
        }
    }
    out
}

/// Maps flat indices of a broadcast output back to the source tensor.
struct BroadcastMap {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(src: &[usize], out: &[usize]) -> Option<Self> {
        if src.len() > out.len() {
            return None;
        }
        let pad = out.len() - src.len();
        let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(src.iter().copied()).collect();
        let mut strides = vec![0; out.len()];
        let mut acc = 1;
        for i in (0..out.len()).rev() {
            if padded[i] == out[i] {
                strides[i] = if out[i] == 1 { 0 } else { acc };
            } else if padded[i] == 1 {
                strides[i] = 0;
            } else {
                return None;
            }
            acc *= padded[i];
        }
        Some(BroadcastMap {
            out_shape: out.to_vec(),
            src_strides: strides,
        })
    }

    fn len(&self) -> usize {
        self.out_shape.iter().product()
    }

    fn source(&self, mut flat: usize) -> usize {
        let mut s = 0;
        for i in (0..self.out_shape.len()).rev() {
            let d = self.out_shape[i];
            s += (flat % d) * self.src_strides[i];
            flat /= d;
        }
        s
    }
}
