use std::ops::Range;

use super::{Activation, ActivationKind, BatchNorm2d, Buffer, Conv2d, Ctx, Layer, Param};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered chain of layers.
pub struct Sequential<T: Scalar> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Clone for Sequential<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
        }
    }
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn with(mut self, layer: impl Layer<T> + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward_range(&self, x: &Tensor<T>, range: Range<usize>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers[range] {
            h = l.forward(&h);
        }
        h
    }

    pub fn forward_train_range(&mut self, x: &Tensor<T>, ctx: &mut Ctx, range: Range<usize>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &mut self.layers[range] {
            h = l.forward_train(&h, ctx);
        }
        h
    }

    pub fn backward_range(&mut self, grad: &Tensor<T>, range: Range<usize>) -> Tensor<T> {
        let mut g = grad.clone();
        for l in self.layers[range].iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.forward_range(x, 0..self.layers.len())
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        let n = self.layers.len();
        self.forward_train_range(x, ctx, 0..n)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let n = self.layers.len();
        self.backward_range(grad, 0..n)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }
}

/// Two 3x3 convolutions with an identity or projected shortcut.
#[derive(Clone)]
pub struct BasicBlock<T: Scalar> {
    body: Sequential<T>,
    shortcut: Option<Sequential<T>>,
    out_act: Activation<T>,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        let body = Sequential::new()
            .with(Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, rng))
            .with(BatchNorm2d::new(&format!("{name}.bn1"), out_ch))
            .with(Activation::new(ActivationKind::Relu))
            .with(Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng))
            .with(BatchNorm2d::new(&format!("{name}.bn2"), out_ch));
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            Sequential::new()
                .with(Conv2d::new(&format!("{name}.downsample.0"), in_ch, out_ch, 1, stride, 0, false, rng))
                .with(BatchNorm2d::new(&format!("{name}.downsample.1"), out_ch))
        });
        Self {
            body,
            shortcut,
            out_act: Activation::new(ActivationKind::Relu),
        }
    }
}

impl<T: Scalar> Layer<T> for BasicBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.body.forward(x);
        match &self.shortcut {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        self.out_act.forward(&y)
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        let mut y = self.body.forward_train(x, ctx);
        match &mut self.shortcut {
            Some(s) => y.add_assign(&s.forward_train(x, ctx)),
            None => y.add_assign(x),
        }
        self.out_act.forward_train(&y, ctx)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let g = self.out_act.backward(grad);
        let mut dx = self.body.backward(&g);
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&g)),
            None => dx.add_assign(&g),
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.body.params();
        if let Some(s) = &self.shortcut {
            v.extend(s.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.body.params_mut();
        if let Some(s) = &mut self.shortcut {
            v.extend(s.params_mut());
        }
        v
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = self.body.buffers();
        if let Some(s) = &self.shortcut {
            v.extend(s.buffers());
        }
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = self.body.buffers_mut();
        if let Some(s) = &mut self.shortcut {
            v.extend(s.buffers_mut());
        }
        v
    }

    fn clear_cache(&mut self) {
        self.body.clear_cache();
        if let Some(s) = &mut self.shortcut {
            s.clear_cache();
        }
        Layer::<T>::clear_cache(&mut self.out_act);
    }
}

/// Expand (1x1) -> depthwise (3x3) -> linear project (1x1), residual when
/// the shape is preserved.
#[derive(Clone)]
pub struct InvertedResidual<T: Scalar> {
    body: Sequential<T>,
    residual: bool,
}

impl<T: Scalar> InvertedResidual<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, expand: usize, rng: &mut Rng) -> Self {
        let hidden = in_ch * expand;
        let mut body = Sequential::new();
        let mut i = 0;
        if expand != 1 {
            body.push(Conv2d::new(&format!("{name}.conv.{i}.0"), in_ch, hidden, 1, 1, 0, false, rng));
            body.push(BatchNorm2d::new(&format!("{name}.conv.{i}.1"), hidden));
            body.push(Activation::new(ActivationKind::Relu6));
            i += 1;
        }
        body.push(Conv2d::depthwise(&format!("{name}.conv.{i}.0"), hidden, 3, stride, 1, rng));
        body.push(BatchNorm2d::new(&format!("{name}.conv.{i}.1"), hidden));
        body.push(Activation::new(ActivationKind::Relu6));
        body.push(Conv2d::new(&format!("{name}.conv.{}", i + 1), hidden, out_ch, 1, 1, 0, false, rng));
        body.push(BatchNorm2d::new(&format!("{name}.conv.{}", i + 2), out_ch));
        Self {
            body,
            residual: stride == 1 && in_ch == out_ch,
        }
    }
}

impl<T: Scalar> Layer<T> for InvertedResidual<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.body.forward(x);
        if self.residual {
            y.add_assign(x);
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        let mut y = self.body.forward_train(x, ctx);
        if self.residual {
            y.add_assign(x);
        }
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let mut dx = self.body.backward(grad);
        if self.residual {
            dx.add_assign(grad);
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.body.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.body.params_mut()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.body.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.body.buffers_mut()
    }

    fn clear_cache(&mut self) {
        self.body.clear_cache();
    }
}
