//! Recording tape for one forward pass and its reverse sweep.

use super::kernels::{self, axpy, ConvDims};
use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OpTag {
    Conv,
    Pool,
    Dense,
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Mul,
    Concat,
    Slice,
    Reshape,
    Mse,
    Sum,
    Scale,
}

#[cfg(test)]
thread_local! {
    /// Mutation hook for gradient-check sensitivity tests: flips the sign of one rule.
    pub(crate) static FLIPPED_RULE: std::cell::Cell<Option<OpTag>> = const { std::cell::Cell::new(None) };
}

fn rule_sign<T: Scalar>(_tag: OpTag) -> T {
    #[cfg(test)]
    {
        if FLIPPED_RULE.with(|f| f.get()) == Some(_tag) {
            return -T::one();
        }
    }
    T::one()
}

enum Op {
    Leaf,
    Conv { x: NodeId, k: NodeId, b: NodeId, dims: ConvDims },
    Pool { x: NodeId, argmax: Vec<usize> },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Reshape(NodeId),
    Mse { pred: NodeId, target: NodeId },
    Sum(NodeId),
    Scale(NodeId, f64),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Operation graph of one forward pass. Nodes only reference earlier nodes.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients of a scalar loss with respect to every node that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn conv2d_same(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let dims = kernels::conv_dims(xv, kv, bv)?;
        let out = kernels::conv2d_same(xv, kv, bv)?;
        let rg = self.rg(&[x, k, b]);
        Ok(self.push(out, Op::Conv { x, k, b, dims }, rg))
    }

    pub fn maxpool_2x2(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (out, argmax) = kernels::maxpool_2x2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Pool { x, argmax }, rg))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let out = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Dense { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = kernels::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = kernels::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = kernels::tanh(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Flat concatenation of the inputs' data.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch("concat of nothing".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous flat range `[start, start + len)` of the input's data.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let src = self.value(x).data();
        if len == 0 || start + len > src.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "slice [{start}, {}) of {} values",
                start + len,
                src.len()
            )));
        }
        let out = Tensor::vector(src[start..start + len].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean over rows of squared euclidean row norms; `pred` and `target` are rows × cols.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, AutodiffError> {
        let v = kernels::mse_loss(self.value(pred), self.value(target))?;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(v), Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale(T::of(c));
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// One LSTM step built from primitive ops; see [`kernels::lstm_step`] for layout.
    pub fn lstm_step(
        &mut self,
        prev_c: NodeId,
        prev_h: NodeId,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<(NodeId, NodeId), AutodiffError> {
        let k = self.value(prev_c).len();
        if self.value(prev_h).len() != k || self.value(weight).shape() != [4 * k, self.value(x).len() + k] {
            return Err(AutodiffError::ShapeMismatch(format!(
                "lstm_step: state {k}, input {}, weight {:?}",
                self.value(x).len(),
                self.value(weight).shape()
            )));
        }
        let xh = self.concat(&[x, prev_h])?;
        let z = self.dense(xh, weight, bias)?;
        let zi = self.slice(z, 0, k)?;
        let zf = self.slice(z, k, k)?;
        let zg = self.slice(z, 2 * k, k)?;
        let zo = self.slice(z, 3 * k, k)?;
        let i = self.sigmoid(zi);
        let f = self.sigmoid(zf);
        let g = self.tanh(zg);
        let o = self.sigmoid(zo);
        let fc = self.mul(f, prev_c)?;
        let ig = self.mul(i, g)?;
        let c = self.add(fc, ig)?;
        let tc = self.tanh(c);
        let h = self.mul(o, tc)?;
        Ok((c, h))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NotScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv { x, k, b, dims } => {
                    let s = rule_sign::<T>(OpTag::Conv);
                    let mut gd = g.into_data();
                    if s != T::one() {
                        gd.iter_mut().for_each(|v| *v *= s);
                    }
                    let mut gx = self.want(x).then(|| Tensor::zeros(self.value(*x).shape()));
                    let mut gk = self.want(k).then(|| Tensor::zeros(self.value(*k).shape()));
                    let mut gb = self.want(b).then(|| Tensor::zeros(self.value(*b).shape()));
                    kernels::conv2d_same_backward(
                        self.value(*x),
                        self.value(*k),
                        dims,
                        &gd,
                        gx.as_mut().map(|t| t.data_mut()),
                        gk.as_mut().map(|t| t.data_mut()),
                        gb.as_mut().map(|t| t.data_mut()),
                    );
                    self.accumulate(&mut grads, *x, gx);
                    self.accumulate(&mut grads, *k, gk);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::Pool { x, argmax } => {
                    let s = rule_sign::<T>(OpTag::Pool);
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[src] += s * gv;
                    }
                    self.accumulate(&mut grads, *x, Some(gx));
                }
                Op::Dense { x, w, b } => {
                    let s = rule_sign::<T>(OpTag::Dense);
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let (m, n) = (wv.shape()[0], wv.shape()[1]);
                    let gd: Vec<T> = g.data().iter().map(|&v| v * s).collect();
                    if self.want(x) {
                        let mut gx = Tensor::zeros(xv.shape());
                        for (i, &gi) in gd.iter().enumerate() {
                            axpy(gx.data_mut(), gi, &wv.data()[i * n..(i + 1) * n]);
                        }
                        self.accumulate(&mut grads, *x, Some(gx));
                    }
                    if self.want(w) {
                        let mut gw = Tensor::zeros(&[m, n]);
                        for (i, &gi) in gd.iter().enumerate() {
                            axpy(&mut gw.data_mut()[i * n..(i + 1) * n], gi, xv.data());
                        }
                        self.accumulate(&mut grads, *w, Some(gw));
                    }
                    if self.want(b) {
                        self.accumulate(&mut grads, *b, Some(Tensor::vector(gd)));
                    }
                }
                Op::Relu(x) => {
                    let s = rule_sign::<T>(OpTag::Relu);
                    let gx = zip_map(&g, &node.value, |gv, y| if y > T::zero() { s * gv } else { T::zero() });
                    self.accumulate(&mut grads, *x, Some(gx));
                }
                Op::Sigmoid(x) => {
                    let s = rule_sign::<T>(OpTag::Sigmoid);
                    let gx = zip_map(&g, &node.value, |gv, y| s * gv * y * (T::one() - y));
                    self.accumulate(&mut grads, *x, Some(gx));
                }
                Op::Tanh(x) => {
                    let s = rule_sign::<T>(OpTag::Tanh);
                    let gx = zip_map(&g, &node.value, |gv, y| s * gv * (T::one() - y * y));
                    self.accumulate(&mut grads, *x, Some(gx));
                }
                Op::Add(a, b) => {
                    let s = rule_sign::<T>(OpTag::Add);
                    let mut ga = g.clone();
                    ga.scale(s);
                    if self.want(b) {
                        self.accumulate(&mut grads, *b, Some(ga.clone()));
                    }
                    self.accumulate(&mut grads, *a, Some(ga));
                }
                Op::Mul(a, b) => {
                    let s = rule_sign::<T>(OpTag::Mul);
                    if self.want(a) {
                        let ga = zip_map(&g, self.value(*b), |gv, bv| s * gv * bv);
                        self.accumulate(&mut grads, *a, Some(ga));
                    }
                    if self.want(b) {
                        let gb = zip_map(&g, self.value(*a), |gv, av| s * gv * av);
                        self.accumulate(&mut grads, *b, Some(gb));
                    }
                }
                Op::Concat(parts) => {
                    let s = rule_sign::<T>(OpTag::Concat);
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        if self.want(p) {
                            let data = g.data()[off..off + n].iter().map(|&v| s * v).collect();
                            self.accumulate(&mut grads, *p, Some(Tensor::new(pv.shape().to_vec(), data)?));
                        }
                        off += n;
                    }
                }
                Op::Slice { x, start } => {
                    let s = rule_sign::<T>(OpTag::Slice);
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (d, &v) in gx.data_mut()[*start..*start + g.len()].iter_mut().zip(g.data()) {
                        *d = s * v;
                    }
                    self.accumulate(&mut grads, *x, Some(gx));
                }
                Op::Reshape(x) => {
                    let mut gx = g.reshaped(self.value(*x).shape())?;
                    gx.scale(rule_sign(OpTag::Reshape));
                    self.accumulate(&mut grads, *x, Some(gx));
                }
                Op::Mse { pred, target } => {
                    let s = rule_sign::<T>(OpTag::Mse);
                    let (pv, tv) = (self.value(*pred), self.value(*target));
                    let rows = T::of(pv.shape()[0] as f64);
                    let c = s * g.data()[0] * T::of(2.0) / rows;
                    let diff = zip_map(pv, tv, |p, t| c * (p - t));
                    if self.want(target) {
                        let mut gt = diff.clone();
                        gt.scale(-T::one());
                        self.accumulate(&mut grads, *target, Some(gt));
                    }
                    self.accumulate(&mut grads, *pred, Some(diff));
                }
                Op::Sum(x) => {
                    let s = rule_sign::<T>(OpTag::Sum);
                    let gx = Tensor::full(self.value(*x).shape(), s * g.data()[0]);
                    self.accumulate(&mut grads, *x, Some(gx));
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.scale(T::of(*c) * rule_sign(OpTag::Scale));
                    self.accumulate(&mut grads, *x, Some(gx));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn want(&self, id: &NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("same shape")
}

impl<T: Scalar> Tape<T> {
    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Option<Tensor<T>>) {
        if !self.want(&id) {
            return;
        }
        let Some(g) = g else { return };
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![0.3, -1.0]));
        let s = tape.scale(p, 0.0);
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(AutodiffError::NotScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let l = tape.sum(m);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        // loss = sum(p * p) => grad 2p
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::vector(vec![1.5, -2.0]));
        let m = tape.mul(p, p).unwrap();
        let l = tape.sum(m);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn tape_lstm_matches_kernel() {
        use super::super::kernels::{lstm_step, LstmWeights};
        let w = Tensor::new(vec![8, 5], (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect()).unwrap();
        let b = Tensor::vector((0..8).map(|i| i as f64 / 20.0).collect());
        let pc = Tensor::vector(vec![0.1, -0.2]);
        let ph = Tensor::vector(vec![0.3, 0.05]);
        let x = Tensor::vector(vec![0.5, -0.5, 0.25]);
        let (c_ref, h_ref) = lstm_step(&pc, &ph, &x, &LstmWeights { weight: &w, bias: &b }).unwrap();
        let mut tape = Tape::new();
        let ids = [
            tape.constant(pc),
            tape.constant(ph),
            tape.constant(x),
            tape.param(w),
            tape.param(b),
        ];
        let (c, h) = tape.lstm_step(ids[0], ids[1], ids[2], ids[3], ids[4]).unwrap();
        assert_eq!(tape.value(c), &c_ref);
        assert_eq!(tape.value(h), &h_ref);
        assert!(tape.lstm_step(ids[0], ids[1], ids[0], ids[3], ids[4]).is_err());
    }
}
