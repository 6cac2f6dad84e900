use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use super::{Ctx, Layer, Param};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

/// Affine map over the last axis. Weight is `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform `±1/sqrt(in)` initialisation for weight and bias.
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        let d = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let w = (0..in_features * out_features).map(|_| T::lit(d.sample(rng))).collect();
        let b = (0..out_features).map(|_| T::lit(d.sample(rng))).collect();
        Self::from_parts(
            name,
            Tensor::from_vec(&[out_features, in_features], w),
            Tensor::from_vec(&[out_features], b),
        )
    }

    /// Glorot-uniform weight, zero bias.
    pub fn xavier(name: &str, in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        let w = super::glorot_uniform(&[out_features, in_features], in_features, out_features, rng);
        Self::from_parts(name, w, Tensor::zeros(&[out_features]))
    }

    pub fn from_parts(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Self {
        assert_eq!(weight.ndim(), 2);
        assert_eq!(bias.len(), weight.dim(0));
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dim(0)
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (fi, fo) = (self.in_features(), self.out_features());
        assert_eq!(*x.shape().last().unwrap(), fi, "{}: input width", self.weight.name);
        let rows = x.len() / fi;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = fo;
        let mut out = Tensor::zeros(&shape);
        for r in out.data_mut().chunks_exact_mut(fo) {
            r.copy_from_slice(self.bias.value.data());
        }
        gemm(false, true, rows, fo, fi, T::one(), x.data(), self.weight.value.data(), T::one(), out.data_mut());
        out
    }

    fn forward_train(&mut self, x: &Tensor<T>, _ctx: &mut Ctx) -> Tensor<T> {
        self.input = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("linear backward without forward_train");
        let (fi, fo) = (self.in_features(), self.out_features());
        let rows = x.len() / fi;
        if self.weight.trainable {
            gemm(true, false, fo, fi, rows, T::one(), grad.data(), x.data(), T::one(), self.weight.grad.data_mut());
        }
        if self.bias.trainable {
            let bg = self.bias.grad.data_mut();
            for r in grad.data().chunks_exact(fo) {
                for (b, &g) in bg.iter_mut().zip(r) {
                    *b += g;
                }
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        gemm(false, false, rows, fi, fo, T::one(), grad.data(), self.weight.value.data(), T::zero(), dx.data_mut());
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Relu6,
    /// tanh approximation
    Gelu,
}

#[derive(Clone, Debug)]
pub struct Activation<T> {
    pub kind: ActivationKind,
    input: Option<Tensor<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, input: None }
    }

    fn apply(&self, v: T) -> T {
        match self.kind {
            ActivationKind::Relu => v.max(T::zero()),
            ActivationKind::Relu6 => v.max(T::zero()).min(T::lit(6.0)),
            ActivationKind::Gelu => {
                let u = T::lit(GELU_C) * (v + T::lit(0.044715) * v * v * v);
                T::lit(0.5) * v * (T::one() + u.tanh())
            }
        }
    }

    fn derivative(&self, v: T) -> T {
        match self.kind {
            ActivationKind::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::Relu6 => {
                if v > T::zero() && v < T::lit(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::Gelu => {
                let u = T::lit(GELU_C) * (v + T::lit(0.044715) * v * v * v);
                let t = u.tanh();
                let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * 0.044715) * v * v);
                T::lit(0.5) * (T::one() + t) + T::lit(0.5) * v * (T::one() - t * t) * du
            }
        }
    }
}

impl<T: Scalar> Layer<T> for Activation<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }

    fn forward_train(&mut self, x: &Tensor<T>, _ctx: &mut Ctx) -> Tensor<T> {
        self.input = Some(x.clone());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("activation backward without forward_train");
        let data = x.data().iter().zip(grad.data()).map(|(&v, &g)| g * self.derivative(v)).collect();
        Tensor::from_vec(x.shape(), data)
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Inverted dropout; identity at inference.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub p: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        Self { p, mask: None }
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        if !ctx.training || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if ctx.rng.random::<f64>() < self.p { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Tensor::from_vec(x.shape(), data)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        match &self.mask {
            None => grad.clone(),
            Some(m) => Tensor::from_vec(grad.shape(), grad.data().iter().zip(m).map(|(&g, &k)| g * k).collect()),
        }
    }

    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// `[N, C, H, W] -> [N, C]`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c) = (x.dim(0), x.dim(1));
        let hw = x.len() / (n * c).max(1);
        let inv = T::one() / T::from_usize_lossy(hw);
        let data = x.data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Tensor::from_vec(&[n, c], data)
    }

    fn forward_train(&mut self, x: &Tensor<T>, _ctx: &mut Ctx) -> Tensor<T> {
        self.input_shape = Some(x.shape().to_vec());
        self.forward(x)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.clone().expect("pool backward without forward_train");
        let hw: usize = shape[2..].iter().product();
        let inv = T::one() / T::from_usize_lossy(hw);
        let mut data = Vec::with_capacity(grad.len() * hw);
        for &g in grad.data() {
            data.extend(std::iter::repeat_n(g * inv, hw));
        }
        Tensor::from_vec(&shape, data)
    }
}

/// Square max pooling with implicit `-inf` padding.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            argmax: None,
        }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = self.out_size(h, w);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut idx = vec![0usize; n * c * ho * wo];
        let src = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut bi = base;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                bi = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    idx[o] = bi;
                }
            }
        }
        (out, idx)
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    fn forward_train(&mut self, x: &Tensor<T>, _ctx: &mut Ctx) -> Tensor<T> {
        let (out, idx) = self.run(x);
        self.argmax = Some((x.shape().to_vec(), idx));
        out
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (shape, idx) = self.argmax.as_ref().expect("maxpool backward without forward_train");
        let mut dx = Tensor::zeros(shape);
        for (&i, &g) in idx.iter().zip(grad.data()) {
            dx.data_mut()[i] += g;
        }
        dx
    }

    fn clear_cache(&mut self) {
        self.argmax = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use crate::nn::normal;
    use rand::SeedableRng;

    #[test]
    fn linear_gradients() {
        let mut rng = Rng::seed_from_u64(1);
        let x = normal::<f64>(&[3, 2, 5], 1.0, &mut rng);
        let mut l = Linear::new("fc", 5, 4, &mut rng);
        check_layer(&mut l, &x, 1e-6, false);
        assert_eq!(l.forward(&x).shape(), &[3, 2, 4]);
    }

    #[test]
    fn activation_gradients() {
        let mut rng = Rng::seed_from_u64(2);
        // keep clear of the ReLU kinks
        let x = normal::<f64>(&[4, 9], 3.0, &mut rng).map(|v| if v.abs() < 0.05 || (v - 6.0).abs() < 0.05 { v + 0.2 } else { v });
        for kind in [ActivationKind::Relu, ActivationKind::Relu6, ActivationKind::Gelu] {
            check_layer(&mut Activation::new(kind), &x, 1e-6, false);
        }
    }

    #[test]
    fn pooling_gradients() {
        let mut rng = Rng::seed_from_u64(3);
        let x = normal::<f64>(&[2, 3, 7, 6], 1.0, &mut rng);
        check_layer(&mut GlobalAvgPool::new(), &x, 1e-6, false);
        check_layer(&mut MaxPool2d::new(3, 2, 1), &x, 1e-6, false);
        let y = <MaxPool2d as Layer<f64>>::forward(&MaxPool2d::new(3, 2, 1), &x);
        assert_eq!(y.shape(), &[2, 3, 4, 3]);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = Rng::seed_from_u64(4);
        let x = Tensor::<f64>::full(&[1, 10_000], 1.0);
        let mut d = Dropout::new(0.3);
        let mut ctx = Ctx {
            training: true,
            rng: &mut rng,
        };
        let y = d.forward_train(&x, &mut ctx);
        let mean = y.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05);
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
        let g = d.backward(&Tensor::full(&[1, 10_000], 1.0));
        assert_eq!(g.data(), y.data());
        assert_eq!(d.forward(&x), x);
    }
}
