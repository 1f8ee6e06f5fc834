//! Named parameters, parameter binding and the basic affine layers.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Flat, ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Build {
                rule: "unique parameter names",
                detail: name,
            });
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Sum of element counts of the parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Creates parameters under a hierarchical dotted name.
pub struct ParamBuilder<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, S: Scalar> ParamBuilder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder for the child scope `prefix.name`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, S> {
        ParamBuilder {
            prefix: self.qualify(name),
            store: self.store,
            rng: self.rng,
        }
    }

    fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        let full = self.qualify(name);
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| S::lit(rng.random_range(-bound..=bound)));
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::ones(shape))
    }
}

/// Forward-pass context: a tape plus the parameters bound onto it.
///
/// Each parameter is recorded at most once per tape, so every use site of
/// a shared parameter feeds the same leaf and gradients accumulate.
pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a Tape<S>,
    params: &'a ParamStore<S>,
    bound: RefCell<HashMap<ParamId, Var>>,
    track: bool,
    frozen: Option<&'a [bool]>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    /// Parameters are differentiable leaves.
    pub fn new(tape: &'a Tape<S>, params: &'a ParamStore<S>) -> Self {
        Self {
            tape,
            params,
            bound: RefCell::new(HashMap::new()),
            track: true,
            frozen: None,
        }
    }

    /// Parameters are constants; nothing is retained for a backward pass.
    pub fn inference(tape: &'a Tape<S>, params: &'a ParamStore<S>) -> Self {
        Self {
            track: false,
            ..Self::new(tape, params)
        }
    }

    /// Like [`Ctx::new`], but parameters flagged in `frozen` are constants.
    pub fn with_frozen(tape: &'a Tape<S>, params: &'a ParamStore<S>, frozen: &'a [bool]) -> Self {
        Self {
            frozen: Some(frozen),
            ..Self::new(tape, params)
        }
    }

    pub fn params(&self) -> &ParamStore<S> {
        self.params
    }

    pub fn training(&self) -> bool {
        self.tape.is_training()
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let frozen = self.frozen.is_some_and(|f| f[id.0]);
        let v = if self.track && !frozen {
            self.tape.tagged_leaf(value, id.0)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Number of distinct parameters recorded on the tape so far.
    pub fn bound_count(&self) -> usize {
        self.bound.borrow().len()
    }
}

/// Affine map `x·W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let mut s = pb.sub(name);
        let bound = (6.0 / (din + dout) as f64).sqrt();
        let w = s.uniform("w", &[din, dout], bound)?;
        let b = if bias { Some(s.zeros("b", &[dout])?) } else { None };
        Ok(Self { w, b, din, dout })
    }

    /// All-zero weights and bias.
    pub fn zeros<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, din: usize, dout: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        let w = s.zeros("w", &[din, dout])?;
        let b = Some(s.zeros("b", &[dout])?);
        Ok(Self { w, b, din, dout })
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var) -> Result<Var> {
        ctx.tape.linear(x, ctx.p(self.w), self.b.map(|b| ctx.p(b)))
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + if self.b.is_some() { self.dout } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(pb: &mut ParamBuilder<'_, S>, name: &str, dim: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            gain: s.ones("g", &[dim])?,
            bias: s.zeros("b", &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &Ctx<'_, S>, x: Var) -> Result<Var> {
        ctx.tape.layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), S::lit(self.eps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        Linear::new(&mut pb, "proj", 3, 4, true).unwrap();
        assert!(Linear::new(&mut pb, "proj", 3, 4, true).is_err());
        assert_eq!(store.count(), 16);
        assert!(store.id("proj.w").is_some());
    }

    #[test]
    fn shared_parameter_is_bound_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::ones(&[2])).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let a = ctx.p(id);
        let b = ctx.p(id);
        assert_eq!(a, b);
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap().by_tag(1);
        assert_eq!(grads[0].as_ref().unwrap().data(), &[2.0, 2.0]);
    }
}
