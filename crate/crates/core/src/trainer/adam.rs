use crate::autodiff::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// Adam without weight decay; moments are kept at the parameter precision.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |s: &ParamStore<T>| s.iter().map(|(_, p)| vec![T::zero(); p.value().numel()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros(store),
            v: zeros(store),
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter_mut().enumerate() {
            if p.grad().len() != self.m[i].len() {
                return Err(Error::contract(format!("optimizer state does not match {}", p.name())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let (value, grad) = p.value_and_grad_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..value.len() {
                let g = grad[j].f64();
                let mj = b1 * m[j].f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].f64() + (1.0 - b2) * g * g;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                value[j] = T::lit(value[j].f64() - update);
            }
        }
        Ok(())
    }
}
