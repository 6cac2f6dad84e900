//! Minimal layer library with hand-written backward passes.
//!
//! Layers cache what they need during [`Layer::forward_train`] and consume it
//! in [`Layer::backward`]. [`Layer::forward`] is the side-effect-free
//! inference path. Parameter gradients are accumulated only for parameters
//! flagged `trainable`; frozen normalization layers always use their running
//! statistics.

mod basic;
mod blocks;
mod conv;
mod norm;
mod transformer;

pub use basic::{Activation, ActivationKind, Dropout, GlobalAvgPool, Linear, MaxPool2d};
pub use blocks::{BasicBlock, InvertedResidual, Sequential};
pub use conv::Conv2d;
pub use norm::{BatchNorm2d, LayerNorm};
pub use transformer::{Attention, PatchEmbed, TokenPool, TokenPoolMode, TransformerBlock};

use rand_distr::{Distribution, Normal, Uniform};

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Name of the leaf layer owning this parameter.
    pub fn unit(&self) -> &str {
        self.name.rsplit_once('.').map(|(u, _)| u).unwrap_or(&self.name)
    }
}

/// Persistent non-trainable state (running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Per-call training context.
pub struct Ctx<'a> {
    /// Training-mode behaviour (batch statistics, dropout) for trainable layers.
    pub training: bool,
    pub rng: &'a mut Rng,
}

pub trait Layer<T: Scalar>: LayerClone<T> + Send + Sync {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T>;

    /// Gradient w.r.t. the input of the last `forward_train` call.
    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T>;

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Vec::new()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        Vec::new()
    }

    /// Drop cached activations.
    fn clear_cache(&mut self) {}

    fn any_trainable(&self) -> bool {
        self.params().iter().any(|p| p.trainable)
    }
}

pub trait LayerClone<T> {
    fn box_clone(&self) -> Box<dyn Layer<T>>;
}

impl<T: Scalar, L: Layer<T> + Clone + 'static> LayerClone<T> for L {
    fn box_clone(&self) -> Box<dyn Layer<T>> {
        Box::new(self.clone())
    }
}

impl<T: Scalar> Clone for Box<dyn Layer<T>> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`).
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    normal(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(d.sample(rng))).collect())
}

/// Normal draws truncated to two standard deviations.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = d.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::lit(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Glorot-uniform weights.
pub fn glorot_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let d = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(d.sample(rng))).collect())
}

/// Flatten a list of layers' parameters.
pub fn collect_params<'a, T: Scalar>(layers: &'a [Box<dyn Layer<T>>]) -> Vec<&'a Param<T>> {
    layers.iter().flat_map(|l| l.params()).collect()
}
