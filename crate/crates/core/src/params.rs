//! Named, trainable parameters and the scoped builders layers use to
//! declare them.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub value: Arc<Tensor<S>>,
    pub grad: Option<Tensor<S>>,
    pub requires_grad: bool,
}

/// Insertion-ordered collection of parameters, addressable by id or name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f32> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(contract_err!("parameter '{name}' declared twice"));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value: Arc::new(value), grad: None, requires_grad: true });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<S>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        p.value.expect_same_shape(&value, &p.name)?;
        p.value = Arc::new(value);
        Ok(())
    }

    /// Add `grad` into the parameter's gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<S>) -> Result<()> {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => {
                p.value.expect_same_shape(grad, &p.name)?;
                p.grad = Some(grad.clone());
                Ok(())
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Stop gradients from flowing into every parameter of this store.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.requires_grad = false;
            p.grad = None;
        }
    }

    /// Freeze just the parameters whose name satisfies `pred`.
    pub fn freeze_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut().filter(|p| pred(&p.name)) {
            p.requires_grad = false;
            p.grad = None;
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    requires_grad: p.requires_grad,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// How a freshly declared parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
    /// Identity map for an `(O, C, k...)` kernel with `O == C`: one at the
    /// centre tap of each diagonal entry, zero elsewhere.
    Identity,
}

impl Init {
    /// The usual `1/sqrt(fan_in)` uniform range for weights and biases.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

/// Receives parameter declarations from layer constructors.
pub trait ParamSink {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> ParamId;
}

/// Allocates and seeds parameters into a store.
pub struct Initializer<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl ParamSink for Initializer<'_> {
    fn declare(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Const(v) => Tensor::full(shape.to_vec(), v as f32),
            Init::Uniform(b) => Tensor::rand_uniform(shape.to_vec(), -b, b, &mut self.rng),
            Init::Identity => identity_kernel(shape),
            Init::Normal(std) => {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| (self.rng.sample::<f64, _>(StandardNormal) * std) as f32)
                    .collect();
                Tensor::from_parts_unchecked(shape.to_vec(), data)
            }
        };
        self.store
            .insert(name, value)
            .unwrap_or_else(|e| panic!("layer construction bug: {e}"))
    }
}

fn identity_kernel(shape: &[usize]) -> Tensor<f32> {
    let mut t = Tensor::zeros(shape.to_vec());
    let (o, c) = (shape[0], shape.get(1).copied().unwrap_or(1));
    let taps: usize = shape[2..].iter().product();
    // Centre tap of a row-major kernel window.
    let centre = taps / 2;
    for i in 0..o.min(c) {
        t.data_mut()[(i * c + i) * taps + centre] = 1.0;
    }
    t
}

/// Counts parameters without allocating them.
#[derive(Debug, Default)]
pub struct ShapeCounter {
    pub tensors: usize,
    pub elements: usize,
    pub shapes: Vec<(String, Vec<usize>)>,
}

impl ParamSink for ShapeCounter {
    fn declare(&mut self, name: String, shape: &[usize], _init: Init) -> ParamId {
        self.tensors += 1;
        self.elements += shape.iter().product::<usize>();
        self.shapes.push((name, shape.to_vec()));
        ParamId(self.tensors - 1)
    }
}

/// A name prefix over a sink; layers declare their parameters through this.
pub struct Scope<'a> {
    sink: &'a mut dyn ParamSink,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(sink: &'a mut dyn ParamSink) -> Self {
        Self { sink, prefix: String::new() }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = self.join(&name.to_string());
        Scope { sink: &mut *self.sink, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = self.join(name);
        self.sink.declare(full, shape, init)
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }
}
