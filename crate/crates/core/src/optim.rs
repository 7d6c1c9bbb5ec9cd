//! Named parameters and the momentum SGD update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            momentum,
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        value.ensure_finite(&name)?;
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name(name).map(|p| &p.value)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[idx];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, idx: usize, g: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[idx];
        if p.grad.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{}` has shape {:?}, expected {:?}",
                p.name,
                g.shape(),
                p.grad.shape()
            )));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Clears gradients and momentum buffers.
    pub fn reset_state(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
            p.momentum.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

/// Hyperparameters of [`sgd_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum SGD step, then zeroes the gradients.
///
/// Per parameter: `g' = g + λ·w`, `buf = μ·buf + g'`, `w = w - lr·buf`.
/// Every gradient is checked before any value is touched.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, opt: Sgd) -> Result<()> {
    if !(opt.lr > 0.0) || !opt.lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            opt.lr
        )));
    }
    for p in params.iter() {
        p.grad.ensure_finite(&format!("gradient of `{}`", p.name))?;
    }
    let lr = T::of(opt.lr);
    let mu = T::of(opt.momentum);
    let wd = T::of(opt.weight_decay);
    for p in params.iter_mut() {
        let Parameter {
            value,
            grad,
            momentum,
            ..
        } = p;
        for ((w, g), buf) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(momentum.data_mut().iter_mut())
        {
            let g_total = *g + wd * *w;
            *buf = mu * *buf + g_total;
            *w -= lr * *buf;
            *g = T::zero();
        }
    }
    Ok(())
}
