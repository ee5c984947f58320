//! Named, ordered parameter storage and gradient buffers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

static NEXT_STORE_KEY: AtomicU32 = AtomicU32::new(1);

/// Handle to one parameter inside a specific [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u32,
    pub(crate) index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub requires_grad: bool,
}

/// Insertion-ordered parameter collection. Model structs keep only
/// [`ParamId`]s, so the same architecture can be evaluated against stores of
/// different precision (see [`ParamStore::cast`]).
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    key: u32,
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            key: NEXT_STORE_KEY.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn key(&self) -> u32 {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        let index = self.params.len();
        self.by_name.insert(name.clone(), index);
        self.params.push(Param {
            name,
            tensor,
            requires_grad: true,
        });
        Ok(ParamId {
            store: self.key,
            index: index as u32,
        })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.key && (id.index as usize) < self.params.len()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        debug_assert_eq!(id.store, self.key, "parameter id from another store");
        &self.params[id.index()].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        debug_assert_eq!(id.store, self.key, "parameter id from another store");
        &mut self.params[id.index()].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.index()]
    }

    pub fn by_index(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&index| ParamId {
            store: self.key,
            index: index as u32,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(move |i| ParamId {
            store: self.key,
            index: i as u32,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.index()].requires_grad = flag;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_requires_grad_prefix(&mut self, prefix: &str, flag: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.requires_grad = flag;
        }
    }

    /// Copy with a different element type. The key is preserved so existing
    /// model handles stay valid against the copy.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            key: self.key,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    requires_grad: p.requires_grad,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites parameters present in `other` (matched by name). Returns the
    /// number copied; a shape disagreement is an error naming the parameter.
    pub fn copy_matching(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for src in other.iter().filter(|p| p.name.starts_with(prefix)) {
            if let Some(&i) = self.by_name.get(&src.name) {
                let dst = &mut self.params[i].tensor;
                if dst.shape() != src.tensor.shape() {
                    return Err(Error::ParamShape {
                        name: src.name.clone(),
                        expected: dst.shape().to_vec(),
                        found: src.tensor.shape().to_vec(),
                    });
                }
                dst.data_mut().copy_from_slice(src.tensor.data());
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }
}

/// Gradient buffers aligned with one store's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub(crate) store: u32,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        ParamGrads {
            store: store.key,
            grads: store
                .params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.index()]
    }

    pub fn by_index(&self, index: usize) -> &[T] {
        &self.grads[index]
    }

    pub(crate) fn slot_mut(&mut self, index: usize) -> &mut Vec<T> {
        &mut self.grads[index]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise accumulation; callers fix the order of accumulation to keep
    /// batch reductions bit-reproducible.
    pub fn add_assign(&mut self, other: &ParamGrads<T>) {
        debug_assert_eq!(self.store, other.store);
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Draws from a normal truncated to two standard deviations, by rejection.
pub fn trunc_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn constant<T: Scalar>(shape: &[usize], value: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![T::of(value); n]).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cast_preserves_handles() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", constant(&[2], 1.5)).unwrap();
        let d = s.cast::<f64>();
        assert_eq!(d.get(id).data(), &[1.5, 1.5]);
        assert_eq!(d.key(), s.key());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", constant(&[1], 0.0)).unwrap();
        assert!(s.add("w", constant(&[1], 0.0)).is_err());
    }

    #[test]
    fn copy_matching_reports_shape_errors() {
        let mut a = ParamStore::<f32>::new();
        a.add("enc.w", constant(&[2, 2], 0.0)).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.add("enc.w", constant(&[3, 2], 1.0)).unwrap();
        let err = a.copy_matching(&b, "enc.").unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }
}
