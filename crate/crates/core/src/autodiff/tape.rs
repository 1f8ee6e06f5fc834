//! Define-by-run gradient tape.

use std::cell::{Cell, Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Vector-Jacobian product of one recorded operation.
///
/// Arguments: upstream gradient, parent values, output value, and which
/// parents need a gradient. Returns one entry per parent.
pub(crate) type BackwardFn<S> =
    Box<dyn Fn(&Tensor<S>, &[&Tensor<S>], &Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) idx: usize,
    pub(crate) tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

struct Node<S> {
    parents: Vec<usize>,
    requires_grad: bool,
    tag: Option<usize>,
    backward: Option<BackwardFn<S>>,
}

struct Inner<S> {
    values: Vec<Tensor<S>>,
    nodes: Vec<Node<S>>,
}

/// Records primitive operations in execution order and replays them in
/// reverse to accumulate gradients.
///
/// A tape is confined to one thread. Parallel work uses one tape per shard.
pub struct Tape<S: Scalar> {
    id: u64,
    training: bool,
    inner: RefCell<Inner<S>>,
    rng: RefCell<ChaCha8Rng>,
    consumed: Cell<bool>,
}

impl<S: Scalar> Tape<S> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training-mode tape; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            training,
            inner: RefCell::new(Inner {
                values: Vec::new(),
                nodes: Vec::new(),
            }),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            consumed: Cell::new(false),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub(crate) fn rng(&self) -> std::cell::RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, Vec::new(), false, None, None)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, Vec::new(), true, None, None)
    }

    /// Records a differentiable leaf carrying an external tag (a parameter
    /// index), so its gradient can be collected by tag after backward.
    pub fn tagged_leaf(&self, value: Tensor<S>, tag: usize) -> Var {
        self.push(value, Vec::new(), true, Some(tag), None)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v);
        self.inner.borrow().nodes[v.idx].requires_grad
    }

    /// Borrow of the recorded value.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        self.check(v);
        Ref::map(self.inner.borrow(), |inner| &inner.values[v.idx])
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Copy of the recorded value, detached from the tape.
    pub fn detach(&self, v: Var) -> Tensor<S> {
        self.value(v).clone()
    }

    #[inline]
    pub(crate) fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "Var used with a different tape");
    }

    /// Records an operation. The backward closure is dropped when no
    /// parent requires a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<S>,
        parents: &[Var],
        backward: impl Fn(&Tensor<S>, &[&Tensor<S>], &Tensor<S>, &[bool]) -> Vec<Option<Tensor<S>>>
            + 'static,
    ) -> Var {
        let requires_grad = {
            let inner = self.inner.borrow();
            parents.iter().any(|p| {
                self.check(*p);
                inner.nodes[p.idx].requires_grad
            })
        };
        let parent_idx = parents.iter().map(|p| p.idx).collect();
        let bw: Option<BackwardFn<S>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(value, parent_idx, requires_grad, None, bw)
    }

    fn push(
        &self,
        value: Tensor<S>,
        parents: Vec<usize>,
        requires_grad: bool,
        tag: Option<usize>,
        backward: Option<BackwardFn<S>>,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.nodes.push(Node {
            parents,
            requires_grad,
            tag,
            backward,
        });
        Var {
            idx: inner.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Nodes are visited once each, in reverse recording order; gradients
    /// reaching a value along several paths are summed. A tape supports a
    /// single backward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        self.check(loss);
        if self.consumed.get() {
            return Err(Error::Backward("backward already ran on this tape"));
        }
        let inner = self.inner.borrow();
        if !inner.values[loss.idx].is_scalar() {
            return Err(Error::Backward("loss must be a scalar"));
        }
        if !inner.nodes[loss.idx].requires_grad {
            return Err(Error::Backward("loss is detached from every differentiable input"));
        }
        self.consumed.set(true);

        let n = loss.idx + 1;
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::full(inner.values[loss.idx].shape(), S::one()));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &inner.nodes[i];
            match &node.backward {
                None => grads[i] = Some(g),
                Some(bw) => {
                    let pvals: Vec<&Tensor<S>> =
                        node.parents.iter().map(|&p| &inner.values[p]).collect();
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|&p| inner.nodes[p].requires_grad)
                        .collect();
                    let pgrads = bw(&g, &pvals, &inner.values[i], &needs);
                    debug_assert_eq!(pgrads.len(), node.parents.len());
                    for ((&p, pg), &need) in node.parents.iter().zip(pgrads).zip(&needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), inner.values[p].shape(), "vjp shape");
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }

        let tags = inner
            .nodes
            .iter()
            .enumerate()
            .take(n)
            .filter_map(|(i, node)| node.tag.map(|t| (t, i)))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            tags,
        })
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
pub struct Gradients<S> {
    tape: u64,
    grads: Vec<Option<Tensor<S>>>,
    tags: Vec<(usize, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf, `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        assert_eq!(v.tape, self.tape, "Var from a different tape");
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradients of tagged leaves, indexed by tag.
    pub fn by_tag(&self, n_tags: usize) -> Vec<Option<Tensor<S>>> {
        let mut out: Vec<Option<Tensor<S>>> = (0..n_tags).map(|_| None).collect();
        for &(tag, node) in &self.tags {
            if let Some(g) = &self.grads[node] {
                match &mut out[tag] {
                    Some(acc) => acc.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
