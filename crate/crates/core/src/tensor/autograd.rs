//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] is created for one forward/backward pass and dropped after.
//! Every op on a tracked [`Var`] appends a node holding a closure that maps
//! the output gradient to input gradients; [`Tape::backward`] replays the
//! nodes in reverse insertion order, which is a valid topological order
//! because inputs are always recorded before the ops that consume them.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, axis_split};
use super::rearrange::{Pattern, Rearrange};
use super::{Scalar, Tensor};
use crate::error::{contract_err, shape_err, Result};
use crate::params::{ParamId, ParamStore};

type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
    param: Option<ParamId>,
}

/// Records differentiable operations for a single pass.
pub struct Tape<S: Scalar = f32> {
    nodes: RefCell<Vec<Node<S>>>,
    watched: RefCell<HashMap<ParamId, (Option<usize>, Arc<Tensor<S>>)>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), watched: RefCell::new(HashMap::new()), recording: true }
    }

    /// A tape that evaluates ops without recording them (inference).
    pub fn no_grad() -> Self {
        Self { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// An untracked value; gradients never flow into it.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        Var { tape: self, value: Arc::new(value), node: None }
    }

    /// A tracked leaf whose gradient can be read back from [`Gradients`].
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        let node = self.push(Node { parents: Vec::new(), backward: None, param: None });
        Var { tape: self, value: Arc::new(value), node }
    }

    /// The parameter `id` of `store` as a leaf. Watching the same parameter
    /// twice returns the same leaf, so its gradient accumulates once.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var<'_, S> {
        let p = store.get(id);
        if !p.requires_grad || !self.recording {
            return Var { tape: self, value: store.value_arc(id), node: None };
        }
        if let Some((node, value)) = self.watched.borrow().get(&id) {
            return Var { tape: self, value: Arc::clone(value), node: *node };
        }
        let node = self.push(Node { parents: Vec::new(), backward: None, param: Some(id) });
        let value = store.value_arc(id);
        self.watched.borrow_mut().insert(id, (node, Arc::clone(&value)));
        Var { tape: self, value, node }
    }

    fn push(&self, node: Node<S>) -> Option<usize> {
        if !self.recording {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Some(nodes.len() - 1)
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: &Var<'_, S>) -> Result<Gradients<S>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(contract_err!("loss was recorded on a different tape"));
        }
        if loss.value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            ));
        }
        let Some(root) = loss.node else {
            return Err(contract_err!("loss does not depend on any tracked value"));
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<S>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::ones(loss.value.shape().to_vec()));
        let mut leaves = HashMap::new();
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.backward {
                None => {
                    leaves.insert(i, (node.param, g));
                }
                Some(f) => {
                    let needs = vec![true; node.parents.len()];
                    let parent_grads = f(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg)?,
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }

    /// Run backward and add the parameter gradients into `store`.
    pub fn backward_into(&self, loss: &Var<'_, S>, store: &mut ParamStore<S>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    leaves: HashMap<usize, (Option<ParamId>, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: &Var<'_, S>) -> Option<&Tensor<S>> {
        var.node.and_then(|n| self.leaves.get(&n)).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.leaves.values().filter_map(|(p, g)| p.map(|p| (p, g)))
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<S>) -> Result<()> {
        let mut entries: Vec<_> = self.params().collect();
        entries.sort_by_key(|(p, _)| *p);
        for (id, g) in entries {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

/// A value on a tape.
#[derive(Clone)]
pub struct Var<'t, S: Scalar = f32> {
    tape: &'t Tape<S>,
    value: Arc<Tensor<S>>,
    node: Option<usize>,
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        (*self.value).clone()
    }

    fn record<F>(&self, value: Tensor<S>, parents: &[&Var<'t, S>], backward: F) -> Var<'t, S>
    where
        F: Fn(&Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>> + 'static,
    {
        let tracked: Vec<bool> = parents.iter().map(|p| p.node.is_some()).collect();
        if !self.tape.recording || !tracked.iter().any(|&t| t) {
            return Var { tape: self.tape, value: Arc::new(value), node: None };
        }
        let ids: Vec<usize> = parents.iter().filter_map(|p| p.node).collect();
        let wrapped = move |g: &Tensor<S>, _: &[bool]| -> Vec<Option<Tensor<S>>> {
            backward(g, &tracked)
                .into_iter()
                .zip(&tracked)
                .filter(|(_, &t)| t)
                .map(|(grad, _)| grad)
                .collect()
        };
        let node = self.tape.push(Node { parents: ids, backward: Some(Box::new(wrapped)), param: None });
        Var { tape: self.tape, value: Arc::new(value), node }
    }

    pub fn add(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value.add(&other.value)?;
        Ok(self.record(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value.sub(&other.value)?;
        Ok(self.record(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.scale(-S::one()))]))
    }

    pub fn mul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = self.value.mul(&other.value)?;
        let (a, b) = (Arc::clone(&self.value), Arc::clone(&other.value));
        Ok(self.record(v, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.mul(&b).expect("shape")),
                need[1].then(|| g.mul(&a).expect("shape")),
            ]
        }))
    }

    pub fn scale(&self, k: f64) -> Var<'t, S> {
        let k = S::of(k);
        self.record(self.value.scale(k), &[self], move |g, _| vec![Some(g.scale(k))])
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t, S> {
        let k = S::of(k);
        self.record(self.value.map(|v| v + k), &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn square(&self) -> Var<'t, S> {
        let x = Arc::clone(&self.value);
        let two = S::of(2.0);
        self.record(self.value.map(|v| v * v), &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, x| two * g * x).expect("shape"))]
        })
    }

    pub fn exp(&self) -> Var<'t, S> {
        let y = Arc::new(self.value.map(S::exp));
        let yc = Arc::clone(&y);
        self.record((*y).clone(), &[self], move |g, _| vec![Some(g.mul(&yc).expect("shape"))])
    }

    /// Square root; the gradient at zero is infinite.
    pub fn sqrt(&self) -> Var<'t, S> {
        let y = Arc::new(self.value.map(S::sqrt));
        let yc = Arc::clone(&y);
        let half = S::of(0.5);
        self.record((*y).clone(), &[self], move |g, _| {
            vec![Some(g.zip_map(&yc, |g, y| half * g / y).expect("shape"))]
        })
    }

    pub fn tanh(&self) -> Var<'t, S> {
        let y = Arc::new(self.value.map(S::tanh));
        let yc = Arc::clone(&y);
        self.record((*y).clone(), &[self], move |g, _| {
            vec![Some(g.zip_map(&yc, |g, y| g * (S::one() - y * y)).expect("shape"))]
        })
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Var<'t, S> {
        let x = Arc::clone(&self.value);
        let sig = |v: S| S::one() / (S::one() + (-v).exp());
        self.record(self.value.map(|v| v * sig(v)), &[self], move |g, _| {
            vec![Some(
                g.zip_map(&x, |g, x| {
                    let s = sig(x);
                    g * s * (S::one() + x * (S::one() - s))
                })
                .expect("shape"),
            )]
        })
    }

    pub fn sum(&self) -> Var<'t, S> {
        let shape = self.value.shape().to_vec();
        self.record(Tensor::scalar(self.value.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t, S> {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, S>> {
        let y = Arc::new(kernels::softmax_forward(&self.value, axis)?);
        let yc = Arc::clone(&y);
        Ok(self.record((*y).clone(), &[self], move |g, _| {
            vec![Some(kernels::softmax_backward(&yc, g, axis))]
        }))
    }

    /// Matrix product over the trailing two axes, broadcasting leading axes.
    pub fn matmul(&self, other: &Var<'t, S>) -> Result<Var<'t, S>> {
        let v = kernels::matmul_forward(&self.value, &other.value)?;
        let (a, b) = (Arc::clone(&self.value), Arc::clone(&other.value));
        Ok(self.record(v, &[self, other], move |g, _| {
            let (ga, gb) = kernels::matmul_backward(&a, &b, g);
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn rearrange(&self, pattern: &str, sizes: &[(&str, usize)]) -> Result<Var<'t, S>> {
        let plan = Rearrange::plan(&Pattern::parse(pattern)?, self.shape(), sizes)?;
        Ok(self.rearrange_with(&plan))
    }

    /// Apply a pre-resolved plan; the gradient flows through its inverse.
    pub fn rearrange_with(&self, plan: &Rearrange) -> Var<'t, S> {
        let v = plan.apply(&self.value);
        let inverse = plan.inverse();
        self.record(v, &[self], move |g, _| vec![Some(inverse.apply(g))])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, S>> {
        let v = self.value.reshape(shape.to_vec())?;
        let orig = self.shape().to_vec();
        Ok(self.record(v, &[self], move |g, _| {
            vec![Some(g.reshape(orig.clone()).expect("same length"))]
        }))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let rank = first.shape().len();
        for p in parts {
            let ok = p.shape().len() == rank
                && axis < rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(shape_err!(
                    "concat along axis {axis}: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                ));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis)?;
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.value.data()[o * l * inner..][..l * inner]);
            }
        }
        let v = Tensor::from_parts_unchecked(shape, data);
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(first.record(v, parts, move |g, need| {
            let mut offset = 0;
            lens.iter()
                .zip(&shapes)
                .zip(need)
                .map(|((&l, shape), &n)| {
                    let start = offset;
                    offset += l;
                    n.then(|| {
                        let mut d = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[(o * total + start) * inner..][..l * inner]);
                        }
                        Tensor::from_parts_unchecked(shape.clone(), d)
                    })
                })
                .collect()
        }))
    }

    /// 2D convolution of an `(N, C, H, W)` input with an `(O, C, kh, kw)` kernel.
    pub fn conv2d(
        &self,
        weight: &Var<'t, S>,
        bias: Option<&Var<'t, S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, S>> {
        let (y, saved) = kernels::conv2d_forward(
            &self.value,
            &weight.value,
            bias.map(|b| &*b.value),
            (stride, stride),
            (padding, padding),
        )?;
        let w = Arc::clone(&weight.value);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.record(y, &parents, move |g, need| {
            let (dx, dw, db) = kernels::conv2d_backward(&saved, &w, g);
            let mut out = vec![need[0].then_some(dx), Some(dw)];
            if need.len() == 3 {
                out.push(Some(db));
            }
            out
        }))
    }

    /// 1D convolution of an `(N, C, L)` input with an `(O, C, k)` kernel.
    pub fn conv1d(
        &self,
        weight: &Var<'t, S>,
        bias: Option<&Var<'t, S>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, S>> {
        let (y, saved) = kernels::conv1d_forward(
            &self.value,
            &weight.value,
            bias.map(|b| &*b.value),
            stride,
            padding,
        )?;
        let w = Arc::clone(&weight.value);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.record(y, &parents, move |g, need| {
            let (dx, dw, db) = kernels::conv1d_backward(&saved, &w, g);
            let mut out = vec![need[0].then_some(dx), Some(dw)];
            if need.len() == 3 {
                out.push(Some(db));
            }
            out
        }))
    }

    /// Group normalization over `(N, C, ...)` with per-channel affine.
    pub fn group_norm(
        &self,
        groups: usize,
        gamma: &Var<'t, S>,
        beta: &Var<'t, S>,
        eps: f64,
    ) -> Result<Var<'t, S>> {
        let (y, saved) =
            kernels::group_norm_forward(&self.value, groups, &gamma.value, &beta.value, eps)?;
        let (x, ga) = (Arc::clone(&self.value), Arc::clone(&gamma.value));
        Ok(self.record(y, &[self, gamma, beta], move |g, _| {
            let (dx, dg, db) = kernels::group_norm_backward(&x, &ga, &saved, g);
            vec![Some(dx), Some(dg), Some(db)]
        }))
    }

    /// `x · weightᵀ + bias` over the last axis; `weight` is `(out, in)`.
    pub fn linear(&self, weight: &Var<'t, S>, bias: Option<&Var<'t, S>>) -> Result<Var<'t, S>> {
        let [out_f, in_f] = *weight.shape() else {
            return Err(shape_err!("linear weight must be (out, in), got {:?}", weight.shape()));
        };
        let last = *self.shape().last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if last != in_f {
            return Err(shape_err!("linear expects {in_f} input features, got {last}"));
        }
        if let Some(b) = bias {
            if b.shape() != [out_f] {
                return Err(shape_err!("linear bias must be ({out_f}), got {:?}", b.shape()));
            }
        }
        let rows = self.value.len() / in_f;
        let mut out = vec![S::zero(); rows * out_f];
        if let Some(b) = bias {
            for r in out.chunks_mut(out_f) {
                r.copy_from_slice(b.value.data());
            }
        }
        S::gemm(
            rows,
            in_f,
            out_f,
            S::one(),
            self.value.data(),
            in_f as isize,
            1,
            weight.value.data(),
            1,
            in_f as isize,
            if bias.is_some() { S::one() } else { S::zero() },
            &mut out,
            out_f as isize,
            1,
        );
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let v = Tensor::from_parts_unchecked(shape, out);
        let (x, w) = (Arc::clone(&self.value), Arc::clone(&weight.value));
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.record(v, &parents, move |g, need| {
            let mut dx = None;
            if need[0] {
                let mut d = vec![S::zero(); rows * in_f];
                S::gemm(rows, out_f, in_f, S::one(), g.data(), out_f as isize, 1, w.data(), in_f as isize, 1, S::zero(), &mut d, in_f as isize, 1);
                dx = Some(Tensor::from_parts_unchecked(x.shape().to_vec(), d));
            }
            let mut dw = vec![S::zero(); out_f * in_f];
            S::gemm(out_f, rows, in_f, S::one(), g.data(), 1, out_f as isize, x.data(), in_f as isize, 1, S::zero(), &mut dw, in_f as isize, 1);
            let mut out = vec![dx, Some(Tensor::from_parts_unchecked(vec![out_f, in_f], dw))];
            if need.len() == 3 {
                let mut db = vec![S::zero(); out_f];
                for r in g.data().chunks(out_f) {
                    for (a, &b) in db.iter_mut().zip(r) {
                        *a += b;
                    }
                }
                out.push(Some(Tensor::from_parts_unchecked(vec![out_f], db)));
            }
            out
        }))
    }

    /// Add a per-(sample, channel) bias `(N, C)` to an `(N, C, ...)` tensor.
    pub fn add_channel_bias(&self, bias: &Var<'t, S>) -> Result<Var<'t, S>> {
        let s = self.shape();
        if s.len() < 2 || bias.shape() != [s[0], s[1]] {
            return Err(shape_err!("channel bias {:?} does not fit {:?}", bias.shape(), s));
        }
        let inner: usize = s[2..].iter().product();
        let mut v = (*self.value).clone();
        for (chunk, &b) in v.data_mut().chunks_mut(inner).zip(bias.value.data()) {
            for x in chunk {
                *x += b;
            }
        }
        let bshape = bias.shape().to_vec();
        Ok(self.record(v, &[self, bias], move |g, _| {
            let db: Vec<S> = g.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
            vec![Some(g.clone()), Some(Tensor::from_parts_unchecked(bshape.clone(), db))]
        }))
    }

    /// 2×2 average pooling over the trailing two axes.
    pub fn avg_pool2(&self) -> Result<Var<'t, S>> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 1] % 2 != 0 || s[s.len() - 2] % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even trailing axes, got {:?}", s));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = self.value.len() / (h * w);
        let quarter = S::of(0.25);
        let mut out = vec![S::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &self.value.data()[p * h * w..][..h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    out[(p * oh + y) * ow + x] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let in_shape = s.to_vec();
        Ok(self.record(Tensor::from_parts_unchecked(shape, out), &[self], move |g, _| {
            let mut dx = vec![S::zero(); planes * h * w];
            for p in 0..planes {
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = g.data()[(p * oh + y) * ow + x] * quarter;
                        let i = p * h * w + 2 * y * w + 2 * x;
                        dx[i] = gv;
                        dx[i + 1] = gv;
                        dx[i + w] = gv;
                        dx[i + w + 1] = gv;
                    }
                }
            }
            vec![Some(Tensor::from_parts_unchecked(in_shape.clone(), dx))]
        }))
    }

    /// Nearest-neighbour ×2 upsampling over the trailing two axes.
    pub fn upsample2(&self) -> Result<Var<'t, S>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(shape_err!("upsample2 needs rank >= 2, got {:?}", s));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (2 * h, 2 * w);
        let planes = self.value.len() / (h * w).max(1);
        let mut out = vec![S::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &self.value.data()[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let in_shape = s.to_vec();
        Ok(self.record(Tensor::from_parts_unchecked(shape, out), &[self], move |g, _| {
            let mut dx = vec![S::zero(); planes * h * w];
            for p in 0..planes {
                let src = &g.data()[p * oh * ow..][..oh * ow];
                for y in 0..oh {
                    for x in 0..ow {
                        dx[p * h * w + (y / 2) * w + x / 2] += src[y * ow + x];
                    }
                }
            }
            vec![Some(Tensor::from_parts_unchecked(in_shape.clone(), dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let loss = x.square().sum();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unreachable_parameter_has_no_grad() {
        let mut store = ParamStore::<f32>::new();
        let a = store.insert("a", Tensor::ones(vec![2])).unwrap();
        let b = store.insert("b", Tensor::ones(vec![2])).unwrap();
        let tape = Tape::new();
        let _unused = tape.param(&store, b);
        let loss = tape.param(&store, a).square().sum();
        tape.backward_into(&loss, &mut store).unwrap();
        assert!(store.grad(a).is_some());
        assert!(store.grad(b).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::<f32>::new();
        let a = store.insert("a", Tensor::from_vec(vec![1], vec![3.0]).unwrap()).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let loss = tape.param(&store, a).square().sum();
            tape.backward_into(&loss, &mut store).unwrap();
        }
        assert_eq!(store.grad(a).unwrap().data(), &[12.0]);
    }

    #[test]
    fn shared_parameter_accumulates_both_uses() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::from_vec(vec![1], vec![3.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let p1 = tape.param(&store, a);
        let p2 = tape.param(&store, a);
        let loss = p1.mul(&p2).unwrap().sum();
        tape.backward_into(&loss, &mut store).unwrap();
        assert_eq!(store.grad(a).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![2]));
        assert!(matches!(tape.backward(&x), Err(crate::Error::Contract(_))));
        let c = tape.constant(Tensor::ones(vec![1]));
        assert!(tape.backward(&c).is_err());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::ones(vec![4]));
        let y = x.exp().sum();
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(vec![2, 1, 3]));
        let b = tape.leaf(Tensor::ones(vec![2, 2, 3]));
        let c = Var::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        let w = tape.constant(Tensor::from_vec(vec![2, 3, 3], (0..18).map(f64::from).collect()).unwrap());
        let grads = tape.backward(&c.mul(&w).unwrap().sum()).unwrap();
        assert_eq!(grads.get(&a).unwrap().data(), &[0., 1., 2., 9., 10., 11.]);
        assert_eq!(grads.get(&b).unwrap().data()[..3], [3., 4., 5.]);
    }
}
