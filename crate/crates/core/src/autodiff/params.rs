//! Named trainable parameters and their gradient buffers.

use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::rng::RngStream;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    grad: Vec<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }

    pub fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    /// Splits into the value buffer and gradient buffer for in-place updates.
    pub fn value_and_grad_mut(&mut self) -> (&mut [T], &[T]) {
        (self.value.data_mut(), &self.grad)
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::Shape {
                op: "set-value",
                lhs: self.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }
}

/// An ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = vec![T::zero(); value.numel()];
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    /// Glorot-uniform initialisation, with fans taken from the last two axes.
    pub fn add_glorot(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut RngStream) -> Result<ParamId> {
        let (fan_in, fan_out) = match shape {
            [n] => (*n, *n),
            [.., a, b] => (*a, *b),
            [] => return Err(Error::contract("glorot init of an empty shape")),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * limit).collect();
        self.add(name, Tensor::from_f64(shape, &data)?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if g.len() != p.grad.len() {
            return Err(Error::Shape {
                op: "accumulate-grad",
                lhs: p.value.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// L2 norm over every gradient element.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: f64) {
        let c = T::lit(c);
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    /// Same parameters at another precision, with gradients reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }
}

/// Affine map `x W + b` over the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `<name>.weight` (Glorot) and `<name>.bias` (zeros).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let weight = store.add_glorot(format!("{name}.weight"), &[in_dim, out_dim], rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim])?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Applies the map to `[.., in_dim]`, returning `[.., out_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let x2 = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.in_dim])? };
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x2, w)?;
        let y = g.add(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().expect("nonempty shape") = self.out_dim;
            g.reshape(y, &out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("w", &[2, 2]).unwrap();
        assert!(s.add_zeros("w", &[3]).is_err());
        assert_eq!(s.id("w").map(|i| i.index()), Some(0));
    }

    #[test]
    fn glorot_respects_limit() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = RngStream::new(5);
        let id = s.add_glorot("w", &[10, 20], &mut rng).unwrap();
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(s.get(id).value().data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn grad_norm_and_zero() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_zeros("w", &[2]).unwrap();
        s.accumulate_grad(id, &[3.0, 4.0]).unwrap();
        assert_eq!(s.grad_norm(), 5.0);
        s.zero_grad();
        assert_eq!(s.grad_norm(), 0.0);
        assert!(s.accumulate_grad(id, &[1.0]).is_err());
    }
}
