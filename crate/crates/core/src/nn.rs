//! Named parameters and the two parameterised layers every block uses.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{conv2d, linear, Conv2dSpec, Element, Tensor};

/// A trainable tensor with a unique dotted name (its checkpoint identity).
#[derive(Clone, Debug)]
pub struct Param<E: Element> {
    pub name: String,
    pub tensor: Tensor<E>,
}

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, data: Vec<E>, shape: &[usize]) -> Self {
        Self { name: name.into(), tensor: Tensor::param(data, shape).expect("parameter shape") }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, vec![E::zero(); n], shape)
    }

    pub fn full(name: impl Into<String>, shape: &[usize], v: E) -> Self {
        let n = shape.iter().product();
        Self::new(name, vec![v; n], shape)
    }

    /// Kaiming-uniform with ReLU gain: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn kaiming(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        Self::uniform(name, shape, (6.0 / fan_in as f64).sqrt(), rng)
    }

    /// `U(-bound, bound)`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| E::from_f64_lossy(rng.random_range(-bound..bound))).collect();
        Self::new(name, data, shape)
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        if self.tensor.requires_grad() != trainable {
            self.tensor = self.tensor.with_requires_grad(trainable);
        }
    }

    /// Replaces the values (shape must match).
    pub fn assign(&mut self, data: &[E]) {
        assert_eq!(data.len(), self.numel(), "assign to {}", self.name);
        self.tensor.update_data(|d| d.copy_from_slice(data));
    }
}

/// Anything that owns named parameters.
pub trait Module<E: Element> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>));

    fn params(&self) -> Vec<&Param<E>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    /// Exact element count over every named parameter.
    fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.visit_mut(&mut |p| p.set_trainable(trainable));
    }
}

/// Convolution with bias, weight `Cout×Cin×k×k`.
#[derive(Clone, Debug)]
pub struct Conv2d<E: Element> {
    pub weight: Param<E>,
    pub bias: Param<E>,
    pub spec: Conv2dSpec,
}

impl<E: Element> Conv2d<E> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, spec: Conv2dSpec, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::kaiming(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, rng),
            bias: Param::zeros(format!("{name}.bias"), &[cout]),
            spec,
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(name, cin, cout, 3, Conv2dSpec { stride: 1, padding: 1 }, rng)
    }

    pub fn pointwise(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(name, cin, cout, 1, Conv2dSpec::default(), rng)
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, &self.weight.tensor, Some(&self.bias.tensor), self.spec)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<E: Element> Module<E> for Conv2d<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Fully connected layer, weight `In×Out`.
#[derive(Clone, Debug)]
pub struct Linear<E: Element> {
    pub weight: Param<E>,
    pub bias: Param<E>,
}

impl<E: Element> Linear<E> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::kaiming(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng),
            bias: Param::zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        linear(x, &self.weight.tensor, Some(&self.bias.tensor))
    }
}

impl<E: Element> Module<E> for Linear<E> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<E>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
