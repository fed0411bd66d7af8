//! The tape.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use rand::Rng;

use crate::kernels::{self, ConvDims, LstmCache};
use crate::{NnError, Result, Scalar, Tensor};

const CE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv1d { x: NodeId, k: NodeId, b: NodeId },
    MaxPool { x: NodeId, arg: Vec<usize> },
    Relu { x: NodeId },
    Dropout { x: NodeId, mask: Vec<T> },
    Lstm { x: NodeId, w: NodeId, u: NodeId, b: NodeId, cache: LstmCache<T> },
    Softmax { x: NodeId },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    CrossEntropy { p: NodeId, target: usize },
    Huber { pred: NodeId, target: NodeId, delta: f64 },
}

#[derive(Debug)]
enum Value<T> {
    Owned(Tensor<T>),
    Param(usize),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Value<T>,
    requires_grad: bool,
}

/// A single forward pass recorded for differentiation.
///
/// Parameters are borrowed, never copied; their gradients come back through
/// [`NodeGrads::accumulate_params`].
pub struct Graph<'p, T: Scalar> {
    params: &'p [Tensor<T>],
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Self {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => &self.params[*i],
        }
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Input, t, false)
    }

    /// Input whose gradient should be tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Input, t, true)
    }

    /// Node for parameter `index`. Repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> Result<NodeId> {
        if index >= self.params.len() {
            return Err(NnError::IndexOutOfRange {
                op: "param",
                index,
                len: self.params.len(),
            });
        }
        if let Some(id) = self.param_nodes[index] {
            return Ok(id);
        }
        self.nodes.push(Node {
            op: Op::Param(index),
            value: Value::Param(index),
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[index] = Some(id);
        Ok(id)
    }

    /// `W·x + b` with `W` shaped `[out, in]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(NnError::ShapeMismatch {
                op: "dense",
                left: ws.to_vec(),
                right: xs.to_vec(),
            });
        }
        if bs != [ws[0]] {
            return Err(NnError::ShapeMismatch {
                op: "dense bias",
                left: ws.to_vec(),
                right: bs.to_vec(),
            });
        }
        let n_out = ws[0];
        let mut out = vec![T::zero(); n_out];
        kernels::matvec(
            self.value(w).data(),
            Some(self.value(b).data()),
            self.value(x).data(),
            &mut out,
        );
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(Op::Dense { x, w, b }, Tensor::new(vec![n_out], out)?, rg))
    }

    fn conv_dims(&self, x: NodeId, k: NodeId, b: NodeId) -> Result<ConvDims> {
        let (xs, ks, bs) = (self.value(x).shape(), self.value(k).shape(), self.value(b).shape());
        let (batch, len, ch_in) = match *xs {
            [len, ch] => (1, len, ch),
            [batch, len, ch] => (batch, len, ch),
            _ => {
                return Err(NnError::ShapeMismatch {
                    op: "conv1d",
                    left: xs.to_vec(),
                    right: ks.to_vec(),
                })
            }
        };
        if ks.len() != 3 || ks[1] != ch_in {
            return Err(NnError::ShapeMismatch {
                op: "conv1d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        if ks[0] % 2 == 0 {
            return Err(NnError::InvalidConfig {
                op: "conv1d",
                reason: format!("kernel size {} must be odd for same padding", ks[0]),
            });
        }
        if len == 0 {
            return Err(NnError::InvalidConfig {
                op: "conv1d",
                reason: "input length must be at least 1".into(),
            });
        }
        if bs != [ks[2]] {
            return Err(NnError::ShapeMismatch {
                op: "conv1d bias",
                left: ks.to_vec(),
                right: bs.to_vec(),
            });
        }
        Ok(ConvDims {
            batch,
            len,
            ch_in,
            ch_out: ks[2],
            k: ks[0],
        })
    }

    /// Same-padded 1-d convolution. `x` is `[len, ch_in]` or, applied
    /// independently per leading index, `[batch, len, ch_in]`; kernels are
    /// `[k, ch_in, ch_out]` with odd `k`.
    pub fn conv1d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.conv_dims(x, k, b)?;
        let mut shape = self.value(x).shape().to_vec();
        *shape.last_mut().expect("rank checked") = d.ch_out;
        let mut out = vec![T::zero(); d.batch * d.len * d.ch_out];
        kernels::conv1d(
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            &d,
            &mut out,
        );
        let rg = self.requires_grad(x) || self.requires_grad(k) || self.requires_grad(b);
        Ok(self.push(Op::Conv1d { x, k, b }, Tensor::new(shape, out)?, rg))
    }

    /// Non-overlapping max pool along the length axis of `[len, ch]` or
    /// `[batch, len, ch]`.
    pub fn maxpool1d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let (batch, len, ch) = match xs[..] {
            [len, ch] => (1, len, ch),
            [batch, len, ch] => (batch, len, ch),
            _ => {
                return Err(NnError::ShapeMismatch {
                    op: "maxpool1d",
                    left: xs,
                    right: vec![window],
                })
            }
        };
        if window == 0 || len < window {
            return Err(NnError::InvalidConfig {
                op: "maxpool1d",
                reason: format!("window {window} does not fit length {len}"),
            });
        }
        let out_len = len / window;
        let mut out = vec![T::zero(); batch * out_len * ch];
        let arg = kernels::maxpool1d(self.value(x).data(), batch, len, ch, window, &mut out);
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = out_len;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::MaxPool { x, arg }, Tensor::new(shape, out)?, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(T::zero())).collect(),
        )
        .expect("same shape");
        let rg = self.requires_grad(x);
        self.push(Op::Relu { x }, out, rg)
    }

    /// Inverted dropout. At inference, or with `rate == 0`, this returns `x`
    /// unchanged and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidConfig {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Dropout { x, mask }, out, rg))
    }

    /// LSTM over `x: [steps, in]` with stacked gate weights `w: [4H, in]`,
    /// `u: [4H, H]`, `b: [4H]` in i, f, g, o order. Returns the final hidden
    /// state `[H]`; the initial state is zero.
    pub fn lstm(&mut self, x: NodeId, w: NodeId, u: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, us, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(u).shape(),
            self.value(b).shape(),
        );
        if xs.len() != 2 || xs[0] == 0 {
            return Err(NnError::ShapeMismatch {
                op: "lstm input",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let (steps, n_in) = (xs[0], xs[1]);
        if ws.len() != 2 || ws[0] % 4 != 0 || ws[1] != n_in {
            return Err(NnError::ShapeMismatch {
                op: "lstm input weights",
                left: ws.to_vec(),
                right: xs.to_vec(),
            });
        }
        let hidden = ws[0] / 4;
        if us != [4 * hidden, hidden] {
            return Err(NnError::ShapeMismatch {
                op: "lstm recurrent weights",
                left: us.to_vec(),
                right: vec![4 * hidden, hidden],
            });
        }
        if bs != [4 * hidden] {
            return Err(NnError::ShapeMismatch {
                op: "lstm bias",
                left: bs.to_vec(),
                right: vec![4 * hidden],
            });
        }
        let cache = kernels::lstm(
            self.value(x).data(),
            steps,
            n_in,
            hidden,
            self.value(w).data(),
            self.value(u).data(),
            self.value(b).data(),
        );
        let h_last = cache.hidden[steps * hidden..].to_vec();
        let rg = [x, w, u, b].iter().any(|&n| self.requires_grad(n));
        Ok(self.push(
            Op::Lstm { x, w, u, b, cache },
            Tensor::new(vec![hidden], h_last)?,
            rg,
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mut out = v.clone();
        kernels::softmax_in_place(out.data_mut());
        let rg = self.requires_grad(x);
        self.push(Op::Softmax { x }, out, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Reshape { x }, out, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NnError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect(),
        )?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add { a, b }, out, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&p, &q)| p * q).collect(),
        )?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Mul { a, b }, out, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let rg = self.requires_grad(x);
        self.push(Op::Sum { x }, Tensor::scalar(T::of(s)), rg)
    }

    /// `-ln(p[target] + 1e-12)` for a probability vector `p`.
    pub fn cross_entropy(&mut self, p: NodeId, target: usize) -> Result<NodeId> {
        let v = self.value(p);
        if target >= v.len() {
            return Err(NnError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                len: v.len(),
            });
        }
        let loss = -(v.data()[target].f64() + CE_EPS).ln();
        let rg = self.requires_grad(p);
        Ok(self.push(Op::CrossEntropy { p, target }, Tensor::scalar(T::of(loss)), rg))
    }

    /// Mean Huber ("clipped error") loss with threshold `delta`.
    pub fn huber(&mut self, pred: NodeId, target: NodeId, delta: f64) -> Result<NodeId> {
        self.same_shape("huber", pred, target)?;
        let (vp, vt) = (self.value(pred), self.value(target));
        let n = vp.len().max(1) as f64;
        let total: f64 = vp
            .data()
            .iter()
            .zip(vt.data())
            .map(|(&p, &t)| {
                let e = (p.f64() - t.f64()).abs();
                if e <= delta {
                    0.5 * e * e
                } else {
                    delta * (e - 0.5 * delta)
                }
            })
            .sum();
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        Ok(self.push(
            Op::Huber { pred, target, delta },
            Tensor::scalar(T::of(total / n)),
            rg,
        ))
    }

    /// Reverse sweep from the scalar node `loss`, seeded with `seed`
    /// (`dL/dloss`).
    pub fn backward(&self, loss: NodeId, seed: T) -> NodeGrads<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return NodeGrads { grads };
        }
        grads[loss.0] = Some(vec![seed; self.value(loss).len()]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        NodeGrads { grads }
    }

    fn backward_node(&self, id: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dw = self.requires_grad(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = self.requires_grad(*b).then(|| vec![T::zero(); dy.len()]);
                let mut dx = self.requires_grad(*x).then(|| vec![0.0f64; xv.len()]);
                kernels::matvec_backward(
                    wv,
                    xv,
                    dy,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
                accumulate_f64(grads, *x, dx);
            }
            Op::Conv1d { x, k, b } => {
                let d = self.conv_dims(*x, *k, *b).expect("validated on construction");
                let (xv, kv) = (self.value(*x).data(), self.value(*k).data());
                let mut dk = self.requires_grad(*k).then(|| vec![0.0f64; kv.len()]);
                let mut db = self.requires_grad(*b).then(|| vec![0.0f64; d.ch_out]);
                let mut dx = self.requires_grad(*x).then(|| vec![0.0f64; xv.len()]);
                kernels::conv1d_backward(
                    xv,
                    kv,
                    dy,
                    &d,
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                accumulate_f64(grads, *k, dk);
                accumulate_f64(grads, *b, db);
                accumulate_f64(grads, *x, dx);
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (g, &src) in dy.iter().zip(arg) {
                    dx[src] += *g;
                }
                accumulate(grads, *x, Some(dx));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::Dropout { x, mask } => {
                let dx = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::Lstm { x, w, u, b, cache } => {
                let xs = self.value(*x).shape();
                let (steps, n_in) = (xs[0], xs[1]);
                let hidden = dy.len();
                let (wv, uv) = (self.value(*w).data(), self.value(*u).data());
                let mut dw = self.requires_grad(*w).then(|| vec![T::zero(); wv.len()]);
                let mut du = self.requires_grad(*u).then(|| vec![T::zero(); uv.len()]);
                let mut db = self.requires_grad(*b).then(|| vec![T::zero(); 4 * hidden]);
                let mut dx = self.requires_grad(*x).then(|| vec![0.0f64; steps * n_in]);
                kernels::lstm_backward(
                    self.value(*x).data(),
                    steps,
                    n_in,
                    hidden,
                    wv,
                    uv,
                    cache,
                    dy,
                    dw.as_deref_mut(),
                    du.as_deref_mut(),
                    db.as_deref_mut(),
                    dx.as_deref_mut(),
                );
                accumulate(grads, *w, dw);
                accumulate(grads, *u, du);
                accumulate(grads, *b, db);
                accumulate_f64(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let p = self.value(NodeId(id)).data();
                let inner: f64 = p.iter().zip(dy).map(|(a, g)| a.f64() * g.f64()).sum();
                let dx = p
                    .iter()
                    .zip(dy)
                    .map(|(a, g)| T::of(a.f64() * (g.f64() - inner)))
                    .collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::Reshape { x } => accumulate(grads, *x, Some(dy.to_vec())),
            Op::Add { a, b } => {
                accumulate(grads, *a, Some(dy.to_vec()));
                accumulate(grads, *b, Some(dy.to_vec()));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = dy.iter().zip(vb).map(|(&g, &v)| g * v).collect();
                let db = dy.iter().zip(va).map(|(&g, &v)| g * v).collect();
                accumulate(grads, *a, Some(da));
                accumulate(grads, *b, Some(db));
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                accumulate(grads, *x, Some(vec![dy[0]; n]));
            }
            Op::CrossEntropy { p, target } => {
                let pv = self.value(*p).data();
                let mut dp = vec![T::zero(); pv.len()];
                dp[*target] = T::of(-dy[0].f64() / (pv[*target].f64() + CE_EPS));
                accumulate(grads, *p, Some(dp));
            }
            Op::Huber { pred, target, delta } => {
                let (vp, vt) = (self.value(*pred).data(), self.value(*target).data());
                let scale = dy[0].f64() / vp.len().max(1) as f64;
                let dp: Vec<T> = vp
                    .iter()
                    .zip(vt)
                    .map(|(&p, &t)| T::of((p.f64() - t.f64()).clamp(-delta, *delta) * scale))
                    .collect();
                if self.requires_grad(*target) {
                    let dt = dp.iter().map(|&g| -g).collect();
                    accumulate(grads, *target, Some(dt));
                }
                accumulate(grads, *pred, Some(dp));
            }
        }
    }

    /// Parameter index behind `id`, if it is a parameter node.
    fn param_index(&self, id: usize) -> Option<usize> {
        match self.nodes[id].op {
            Op::Param(i) => Some(i),
            _ => None,
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
        slot => *slot = Some(g),
    }
}

fn accumulate_f64<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, g: Option<Vec<f64>>) {
    accumulate(grads, id, g.map(|v| v.into_iter().map(T::of).collect()));
}

/// Gradients of every node reached by a backward sweep.
#[derive(Debug)]
pub struct NodeGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> NodeGrads<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `out`, which is indexed like the
    /// graph's parameter slice.
    pub fn accumulate_params(&self, graph: &Graph<'_, T>, out: &mut [Tensor<T>]) {
        for (id, g) in self.grads.iter().enumerate() {
            let (Some(g), Some(pi)) = (g, graph.param_index(id)) else {
                continue;
            };
            for (a, &v) in out[pi].data_mut().iter_mut().zip(g) {
                *a += v;
            }
        }
    }
}
