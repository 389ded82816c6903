//! Dense f32 tensors with reverse-mode differentiation.
//!
//! A `Tensor` is a cheaply clonable handle (`Arc`) to an immutable-for-readers
//! buffer. Operations record their parents so `backward` on a scalar loss can
//! replay the chain rule; gradients accumulate into leaf buffers until
//! `zero_grad` clears them. Leaf data sits behind a lock so optimizers can
//! step parameters in place between passes.

mod bn;
mod conv;
mod gumbel;
mod ops;
mod svd;

pub use bn::{batch_norm, BatchStats, BnMode};
pub use conv::{avg_pool2d, conv2d, global_avg_pool, max_pool2d};
pub use gumbel::gumbel_softmax;
pub use ops::{softmax_slice, OpKind};
pub use svd::{svd, SvdResult};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Op {
    pub kind: OpKind,
    pub parents: Vec<Tensor>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f32>>,
    grad: Mutex<Option<Vec<f32>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Row-major f32 tensor, rank 1 to 4. Scalars are shape `[1]`.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Dimension(format!(
            "tensor rank must be 1..=4, got shape {shape:?}"
        )));
    }
    let expect: usize = shape.iter().product();
    if expect != len {
        return Err(Error::Dimension(format!(
            "shape {shape:?} expects {expect} elements, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn new_inner(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Option<Op>) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                op,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    /// Leaf that participates in gradient accumulation.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Self::new_inner(vec![1], vec![value], false, None)
    }

    /// Standard-normal fill from a seeded generator (Box-Muller).
    pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = 2.0 * std::f64::consts::PI * u2;
            data.push((r * th.cos()) as f32);
            if data.len() < n {
                data.push((r * th.sin()) as f32);
            }
        }
        Self::new_inner(shape.to_vec(), data, false, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, kind: OpKind, parents: Vec<Tensor>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        if requires {
            Self::new_inner(shape, data, true, Some(Op { kind, parents }))
        } else {
            // No gradient path upstream: drop the recording to keep graphs small.
            Self::new_inner(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f32>> {
        self.inner.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.data()[0]
    }

    /// Overwrite leaf data in place (optimizer steps, image synthesis).
    pub fn set_data(&self, data: &[f32]) {
        let mut guard = self.inner.data.write().expect("tensor data lock poisoned");
        assert_eq!(guard.len(), data.len(), "set_data length mismatch");
        guard.copy_from_slice(data);
    }

    /// Apply an in-place update to leaf data.
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        let mut guard = self.inner.data.write().expect("tensor data lock poisoned");
        f(&mut guard);
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, delta: &[f32]) {
        let mut guard = self.inner.grad.lock().expect("grad lock poisoned");
        match guard.as_mut() {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    /// Leaf copy of this tensor's values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::new_inner(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Reverse-mode differentiation from a scalar loss. Gradients accumulate
    /// into every reachable `requires_grad` leaf; repeated calls add up until
    /// `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Ok(()); // nothing reachable
        }

        // Iterative post-order topological sort over the op DAG.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child)) = stack.pop() {
            if child == 0 {
                if visited.contains_key(&node.inner.id) {
                    continue;
                }
                visited.insert(node.inner.id, ());
            }
            let parents: &[Tensor] = node.inner.op.as_ref().map(|o| o.parents.as_slice()).unwrap_or(&[]);
            if child < parents.len() {
                let next = parents[child].clone();
                stack.push((node, child + 1));
                if next.inner.requires_grad && !visited.contains_key(&next.inner.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut flow: HashMap<u64, Vec<f32>> = HashMap::new();
        flow.insert(self.inner.id, vec![1.0]);

        for node in order.iter().rev() {
            let Some(out_grad) = flow.remove(&node.inner.id) else {
                continue;
            };
            if let Some(op) = node.inner.op.as_ref() {
                let parent_grads = op.kind.backward(&out_grad, &node.inner.shape, &op.parents)?;
                debug_assert_eq!(parent_grads.len(), op.parents.len());
                for (parent, grad) in op.parents.iter().zip(parent_grads) {
                    if !parent.inner.requires_grad {
                        continue;
                    }
                    let Some(grad) = grad else { continue };
                    match flow.get_mut(&parent.inner.id) {
                        Some(buf) => {
                            for (b, g) in buf.iter_mut().zip(&grad) {
                                *b += g;
                            }
                        }
                        None => {
                            flow.insert(parent.inner.id, grad);
                        }
                    }
                }
            } else if node.inner.requires_grad {
                node.accumulate_grad(&out_grad);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let x = Tensor::param(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
        x.zero_grad();
        assert!(x.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // loss = sum(x*x + x) -> d/dx = 2x + 1
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let sq = x.mul(&x).unwrap();
        let loss = sq.add(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(
            Tensor::randn(&[8], &mut a).to_vec(),
            Tensor::randn(&[8], &mut b).to_vec()
        );
    }
}
