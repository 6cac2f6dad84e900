use super::{Buffer, Ctx, Layer, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over `[N, C, H, W]`.
///
/// Batch statistics are used only when the context is training and the
/// layer's scale is trainable; otherwise running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.weight"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros(&[channels]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::full(&[channels], T::one()),
            },
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let c = self.channels();
        let hw = x.len() / (x.dim(0) * c);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for (i, (src, (xh, out))) in x
            .data()
            .chunks_exact(hw)
            .zip(xhat.data_mut().chunks_exact_mut(hw).zip(y.data_mut().chunks_exact_mut(hw)))
            .enumerate()
        {
            let ch = i % c;
            for ((&v, h), o) in src.iter().zip(xh.iter_mut()).zip(out.iter_mut()) {
                *h = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *h + b[ch];
            }
        }
        (xhat, y)
    }

    fn running_inv_std(&self) -> Vec<T> {
        let eps = T::lit(self.eps);
        self.running_var.value.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
    }

    fn batch_moments(&self, x: &Tensor<T>) -> (Vec<T>, Vec<T>, usize) {
        let c = self.channels();
        let hw = x.len() / (x.dim(0) * c);
        let m = x.dim(0) * hw;
        let mut mean = vec![T::zero(); c];
        for (i, p) in x.data().chunks_exact(hw).enumerate() {
            mean[i % c] += p.iter().copied().sum::<T>();
        }
        let inv_m = T::one() / T::from_usize_lossy(m);
        mean.iter_mut().for_each(|v| *v *= inv_m);
        let mut var = vec![T::zero(); c];
        for (i, p) in x.data().chunks_exact(hw).enumerate() {
            let mu = mean[i % c];
            var[i % c] += p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v *= inv_m);
        (mean, var, m)
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.dim(1), self.channels(), "{}: channel mismatch", self.gamma.name);
        self.normalize(x, self.running_mean.value.data(), &self.running_inv_std()).1
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        let batch_stats = ctx.training && self.gamma.trainable;
        let (mean, inv_std) = if batch_stats {
            let (mean, var, m) = self.batch_moments(x);
            let mom = T::lit(self.momentum);
            let unbias = if m > 1 {
                T::from_usize_lossy(m) / T::from_usize_lossy(m - 1)
            } else {
                T::one()
            };
            for (r, &mu) in self.running_mean.value.data_mut().iter_mut().zip(&mean) {
                *r = (T::one() - mom) * *r + mom * mu;
            }
            for (r, &v) in self.running_var.value.data_mut().iter_mut().zip(&var) {
                *r = (T::one() - mom) * *r + mom * v * unbias;
            }
            let eps = T::lit(self.eps);
            let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv)
        } else {
            (self.running_mean.value.data().to_vec(), self.running_inv_std())
        };
        let (xhat, y) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            batch_stats,
        });
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("batchnorm backward without forward_train");
        let c = self.channels();
        let hw = grad.len() / (grad.dim(0) * c);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (i, (g, xh)) in grad.data().chunks_exact(hw).zip(cache.xhat.data().chunks_exact(hw)).enumerate() {
            let ch = i % c;
            for (&gv, &xv) in g.iter().zip(xh) {
                sum_g[ch] += gv;
                sum_gx[ch] += gv * xv;
            }
        }
        if self.gamma.trainable {
            for (d, &s) in self.gamma.grad.data_mut().iter_mut().zip(&sum_gx) {
                *d += s;
            }
        }
        if self.beta.trainable {
            for (d, &s) in self.beta.grad.data_mut().iter_mut().zip(&sum_g) {
                *d += s;
            }
        }
        let gamma = self.gamma.value.data();
        let m = T::from_usize_lossy(grad.dim(0) * hw);
        let mut dx = Tensor::zeros(grad.shape());
        for (i, (out, (g, xh))) in dx
            .data_mut()
            .chunks_exact_mut(hw)
            .zip(grad.data().chunks_exact(hw).zip(cache.xhat.data().chunks_exact(hw)))
            .enumerate()
        {
            let ch = i % c;
            let k = gamma[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                for ((o, &gv), &xv) in out.iter_mut().zip(g).zip(xh) {
                    *o = k * (gv - mg - xv * mgx);
                }
            } else {
                for (o, &gv) in out.iter_mut().zip(g) {
                    *o = k * gv;
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.weight"), Tensor::full(&[dim], T::one())),
            beta: Param::new(format!("{name}.bias"), Tensor::zeros(&[dim])),
            eps: 1e-6,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Vec<T>) {
        let d = self.gamma.value.len();
        assert_eq!(*x.shape().last().unwrap(), d, "{}: width mismatch", self.gamma.name);
        let inv_d = T::one() / T::from_usize_lossy(d);
        let eps = T::lit(self.eps);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_stds = Vec::with_capacity(x.len() / d);
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for ((src, xh), out) in x
            .data()
            .chunks_exact(d)
            .zip(xhat.data_mut().chunks_exact_mut(d))
            .zip(y.data_mut().chunks_exact_mut(d))
        {
            let mu = src.iter().copied().sum::<T>() * inv_d;
            let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let inv = T::one() / (var + eps).sqrt();
            inv_stds.push(inv);
            for j in 0..d {
                xh[j] = (src[j] - mu) * inv;
                out[j] = g[j] * xh[j] + b[j];
            }
        }
        (y, xhat, inv_stds)
    }
}

impl<T: Scalar> Layer<T> for LayerNorm<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    fn forward_train(&mut self, x: &Tensor<T>, _ctx: &mut Ctx) -> Tensor<T> {
        let (y, xhat, inv) = self.run(x);
        self.cache = Some((xhat, inv));
        y
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv) = self.cache.as_ref().expect("layernorm backward without forward_train");
        let d = self.gamma.value.len();
        let inv_d = T::one() / T::from_usize_lossy(d);
        let gamma = self.gamma.value.data().to_vec();
        let mut dx = Tensor::zeros(grad.shape());
        let (train_g, train_b) = (self.gamma.trainable, self.beta.trainable);
        for (((g, xh), out), &is) in grad
            .data()
            .chunks_exact(d)
            .zip(xhat.data().chunks_exact(d))
            .zip(dx.data_mut().chunks_exact_mut(d))
            .zip(inv)
        {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                let gh = g[j] * gamma[j];
                s1 += gh;
                s2 += gh * xh[j];
            }
            for j in 0..d {
                let gh = g[j] * gamma[j];
                out[j] = is * (gh - s1 * inv_d - xh[j] * s2 * inv_d);
            }
            if train_g {
                for (dg, (&gv, &xv)) in self.gamma.grad.data_mut().iter_mut().zip(g.iter().zip(xh)) {
                    *dg += gv * xv;
                }
            }
            if train_b {
                for (db, &gv) in self.beta.grad.data_mut().iter_mut().zip(g) {
                    *db += gv;
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use crate::nn::normal;
    use crate::rng::Rng;
    use rand::SeedableRng;

    fn randomized_bn(rng: &mut Rng) -> BatchNorm2d<f64> {
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.gamma.value = normal(&[3], 1.0, rng);
        bn.beta.value = normal(&[3], 1.0, rng);
        bn.running_mean.value = normal(&[3], 1.0, rng);
        bn.running_var.value = normal::<f64>(&[3], 1.0, rng).map(|v| v.abs() + 0.5);
        bn
    }

    #[test]
    fn batchnorm_gradients_in_both_modes() {
        let mut rng = Rng::seed_from_u64(7);
        let x = normal::<f64>(&[3, 3, 4, 5], 2.0, &mut rng);
        check_layer(&mut randomized_bn(&mut rng), &x, 1e-5, false);
        check_layer(&mut randomized_bn(&mut rng), &x, 1e-5, true);
    }

    #[test]
    fn batch_statistics_normalize_and_update_running() {
        let mut rng = Rng::seed_from_u64(8);
        let x = normal::<f64>(&[4, 2, 3, 3], 3.0, &mut rng).map(|v| v + 5.0);
        let mut bn = BatchNorm2d::new("bn", 2);
        let mut ctx = Ctx {
            training: true,
            rng: &mut rng,
        };
        let y = bn.forward_train(&x, &mut ctx);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.row(n)[ch * 9..(ch + 1) * 9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.data().iter().all(|&m| m > 0.3));

        // frozen scale keeps running statistics untouched
        let mut frozen = BatchNorm2d::<f64>::new("bn", 2);
        frozen.gamma.trainable = false;
        let before = frozen.running_mean.value.clone();
        let mut rng = Rng::seed_from_u64(1);
        let mut ctx = Ctx {
            training: true,
            rng: &mut rng,
        };
        frozen.forward_train(&x, &mut ctx);
        assert_eq!(frozen.running_mean.value, before);
    }

    #[test]
    fn layernorm_gradients() {
        let mut rng = Rng::seed_from_u64(9);
        let x = normal::<f64>(&[2, 3, 6], 2.0, &mut rng);
        let mut ln = LayerNorm::new("ln", 6);
        ln.gamma.value = normal(&[6], 1.0, &mut rng);
        ln.beta.value = normal(&[6], 1.0, &mut rng);
        check_layer(&mut ln, &x, 1e-5, false);
    }
}
