//! 2D convolution over NCHW tensors: dense (im2col + GEMM) or depthwise.

use super::{he_normal, Ctx, Layer, Param};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    depthwise: bool,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            ),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_channels]))),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            depthwise: false,
            input: None,
        }
    }

    /// One filter per channel (`groups == channels`).
    pub fn depthwise(name: &str, channels: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(&[channels, 1, kernel, kernel], kernel * kernel, rng),
            ),
            bias: None,
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            pad,
            depthwise: true,
            input: None,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (ho, wo) = self.out_size(h, w);
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize - p + ky as isize;
                        let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize - p + kx as isize;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (ho, wo) = self.out_size(h, w);
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &col[row + oy * wo..row + (oy + 1) * wo];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s) as isize - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward_dense(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (ho, wo) = self.out_size(h, w);
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * ho * wo] };
        for i in 0..n {
            let xi = x.row(i);
            let cols: &[T] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, &mut col);
                &col
            };
            let oi = out.row_mut(i);
            gemm(false, false, self.out_channels, ho * wo, kk, T::one(), self.weight.value.data(), cols, T::zero(), oi);
            if let Some(b) = &self.bias {
                for (o, &bv) in oi.chunks_exact_mut(ho * wo).zip(b.value.data()) {
                    o.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    fn forward_depthwise(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let wt = self.weight.value.data();
        for i in 0..n {
            let xi = x.row(i);
            let oi = out.row_mut(i);
            for ch in 0..c {
                let plane = &xi[ch * h * w..(ch + 1) * h * w];
                let kern = &wt[ch * k * k..(ch + 1) * k * k];
                let op = &mut oi[ch * ho * wo..(ch + 1) * ho * wo];
                for oy in 0..ho {
                    for ky in 0..k {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut op[oy * wo..(oy + 1) * wo];
                        for kx in 0..k {
                            let kv = kern[ky * k + kx];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * s) as isize - p + kx as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d += kv * src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_dense(&mut self, x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
        let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
        let (ho, wo) = self.out_size(h, w);
        let kk = self.in_channels * self.kernel * self.kernel;
        let pointwise = self.is_pointwise();
        let mut dx = Tensor::zeros(x.shape());
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * ho * wo] };
        let mut dcol = vec![T::zero(); kk * ho * wo];
        let train_w = self.weight.trainable;
        for i in 0..n {
            let gi = grad.row(i);
            if train_w {
                let cols: &[T] = if pointwise {
                    x.row(i)
                } else {
                    self.im2col(x.row(i), h, w, &mut col);
                    &col
                };
                // dW += dOut * col^T
                gemm(false, true, self.out_channels, kk, ho * wo, T::one(), gi, cols, T::one(), self.weight.grad.data_mut());
            }
            if let Some(b) = self.bias.as_mut().filter(|b| b.trainable) {
                for (g, o) in b.grad.data_mut().iter_mut().zip(gi.chunks_exact(ho * wo)) {
                    *g += o.iter().copied().sum();
                }
            }
            // dcol = W^T * dOut
            if pointwise {
                gemm(true, false, kk, ho * wo, self.out_channels, T::one(), self.weight.value.data(), gi, T::zero(), dx.row_mut(i));
            } else {
                gemm(true, false, kk, ho * wo, self.out_channels, T::one(), self.weight.value.data(), gi, T::zero(), &mut dcol);
                self.col2im(&dcol, h, w, dx.row_mut(i));
            }
        }
        dx
    }

    fn backward_depthwise(&mut self, x: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = self.out_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let mut dx = Tensor::zeros(x.shape());
        let train_w = self.weight.trainable;
        let wt = self.weight.value.data().to_vec();
        let wg = self.weight.grad.data_mut();
        for i in 0..n {
            let xi = x.row(i);
            let gi = grad.row(i);
            let dxi = dx.row_mut(i);
            for ch in 0..c {
                let plane = &xi[ch * h * w..(ch + 1) * h * w];
                let dplane = &mut dxi[ch * h * w..(ch + 1) * h * w];
                let gp = &gi[ch * ho * wo..(ch + 1) * ho * wo];
                for oy in 0..ho {
                    let grow = &gp[oy * wo..(oy + 1) * wo];
                    for ky in 0..k {
                        let iy = (oy * s) as isize - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for kx in 0..k {
                            let kidx = ch * k * k + ky * k + kx;
                            let kv = wt[kidx];
                            let mut acc = T::zero();
                            for (ox, &g) in grow.iter().enumerate() {
                                let ix = (ox * s) as isize - p + kx as isize;
                                if ix >= 0 && ix < w as isize {
                                    acc += g * plane[base + ix as usize];
                                    dplane[base + ix as usize] += g * kv;
                                }
                            }
                            if train_w {
                                wg[kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.ndim(), 4, "conv expects NCHW");
        assert_eq!(x.dim(1), self.in_channels, "{}: channel mismatch", self.weight.name);
        if self.depthwise {
            self.forward_depthwise(x)
        } else {
            self.forward_dense(x)
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>, _ctx: &mut Ctx) -> Tensor<T> {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("conv backward without forward_train");
        let dx = if self.depthwise {
            self.backward_depthwise(&x, grad)
        } else {
            self.backward_dense(&x, grad)
        };
        self.input = Some(x);
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use crate::nn::normal;
    use rand::SeedableRng;

    fn naive_conv(x: &Tensor<f64>, c: &Conv2d<f64>) -> Tensor<f64> {
        let (n, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (ho, wo) = c.out_size(h, w);
        let mut out = Tensor::zeros(&[n, c.out_channels, ho, wo]);
        let wt = c.weight.value.data();
        let k = c.kernel;
        for b in 0..n {
            for o in 0..c.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        let chans: Vec<usize> = if c.depthwise { vec![o] } else { (0..ci).collect() };
                        for (j, &ch) in chans.iter().enumerate() {
                            let wj = if c.depthwise { 0 } else { j };
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        let xv = x.data()[((b * ci + ch) * h + iy as usize) * w + ix as usize];
                                        let wci = if c.depthwise { 1 } else { ci };
                                        s += xv * wt[((o * wci + wj) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        if let Some(bias) = &c.bias {
                            s += bias.value.data()[o];
                        }
                        out.data_mut()[((b * c.out_channels + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dense_and_depthwise_match_direct_sum() {
        let mut rng = Rng::seed_from_u64(3);
        let x = normal::<f64>(&[2, 3, 7, 6], 1.0, &mut rng);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (1, 2, 0)] {
            let mut c = Conv2d::new("c", 3, 4, k, s, p, true, &mut rng);
            c.bias.as_mut().unwrap().value = normal(&[4], 1.0, &mut rng);
            let got = c.forward(&x);
            let want = naive_conv(&x, &c);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            let d = Conv2d::depthwise("d", 3, k, s, p, &mut rng);
            let got = d.forward(&x);
            let want = naive_conv(&x, &d);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(4);
        let x = normal::<f64>(&[2, 3, 6, 5], 1.0, &mut rng);
        let mut c = Conv2d::new("c", 3, 2, 3, 2, 1, true, &mut rng);
        check_layer(&mut c, &x, 1e-6, false);
        let mut p = Conv2d::new("p", 3, 4, 1, 1, 0, false, &mut rng);
        check_layer(&mut p, &x, 1e-6, false);
        let mut d = Conv2d::depthwise("d", 3, 3, 1, 1, &mut rng);
        check_layer(&mut d, &x, 1e-6, false);
        let mut d2 = Conv2d::depthwise("d2", 3, 3, 2, 1, &mut rng);
        check_layer(&mut d2, &x, 1e-6, false);
    }
}
