//! Vision-transformer pieces over token tensors `[N, T, D]`.

use super::{trunc_normal, Activation, ActivationKind, Conv2d, Ctx, Layer, LayerNorm, Linear, Param};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, Tensor};

/// Non-overlapping patch projection plus class token and position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T> {
    pub proj: Conv2d<T>,
    pub cls_token: Param<T>,
    pub pos_embed: Param<T>,
    pub patch: usize,
    pub grid: (usize, usize),
    batch: usize,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(in_ch: usize, dim: usize, patch: usize, input_size: usize, rng: &mut Rng) -> Self {
        let g = input_size / patch;
        assert!(g > 0, "input smaller than one patch");
        let mut proj = Conv2d::new("patch_embed.proj", in_ch, dim, patch, patch, 0, true, rng);
        proj.weight.value = super::glorot_uniform(proj.weight.value.shape(), in_ch * patch * patch, dim, rng);
        Self {
            proj,
            cls_token: Param::new("cls_token", trunc_normal(&[1, 1, dim], 0.02, rng)),
            pos_embed: Param::new("pos_embed", trunc_normal(&[1, 1 + g * g, dim], 0.02, rng)),
            patch,
            grid: (g, g),
            batch: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.cls_token.value.len()
    }

    fn tokens(&self, conv: &Tensor<T>) -> Tensor<T> {
        let (n, d) = (conv.dim(0), conv.dim(1));
        let l = conv.dim(2) * conv.dim(3);
        assert_eq!((conv.dim(2), conv.dim(3)), self.grid, "patch grid does not match the position embedding");
        let mut out = Tensor::zeros(&[n, 1 + l, d]);
        let pos = self.pos_embed.value.data();
        let cls = self.cls_token.value.data();
        for b in 0..n {
            let src = conv.row(b);
            let dst = out.row_mut(b);
            for j in 0..d {
                dst[j] = cls[j] + pos[j];
            }
            for t in 0..l {
                for j in 0..d {
                    dst[(1 + t) * d + j] = src[j * l + t] + pos[(1 + t) * d + j];
                }
            }
        }
        out
    }
}

impl<T: Scalar> Layer<T> for PatchEmbed<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.tokens(&self.proj.forward(x))
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        self.batch = x.dim(0);
        let conv = self.proj.forward_train(x, ctx);
        self.tokens(&conv)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let (n, t, d) = (grad.dim(0), grad.dim(1), grad.dim(2));
        let l = t - 1;
        if self.pos_embed.trainable {
            let pg = self.pos_embed.grad.data_mut();
            for b in 0..n {
                for (p, &g) in pg.iter_mut().zip(grad.row(b)) {
                    *p += g;
                }
            }
        }
        if self.cls_token.trainable {
            let cg = self.cls_token.grad.data_mut();
            for b in 0..n {
                for (c, &g) in cg.iter_mut().zip(&grad.row(b)[..d]) {
                    *c += g;
                }
            }
        }
        let mut dconv = Tensor::zeros(&[n, d, self.grid.0, self.grid.1]);
        for b in 0..n {
            let src = grad.row(b);
            let dst = dconv.row_mut(b);
            for tk in 0..l {
                for j in 0..d {
                    dst[j * l + tk] = src[(1 + tk) * d + j];
                }
            }
        }
        self.proj.backward(&dconv)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.cls_token, &self.pos_embed];
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.cls_token, &mut self.pos_embed];
        v.extend(self.proj.params_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.proj.clear_cache();
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> Attention<T> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        assert_eq!(dim % heads, 0, "width must divide into heads");
        Self {
            qkv: Linear::xavier(&format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::xavier(&format!("{name}.proj"), dim, dim, rng),
            heads,
            cache: None,
        }
    }

    fn head_slices(qkv: &[T], t: usize, d: usize, dh: usize, h: usize, which: usize, out: &mut [T]) {
        for tk in 0..t {
            let src = &qkv[tk * 3 * d + which * d + h * dh..][..dh];
            out[tk * dh..(tk + 1) * dh].copy_from_slice(src);
        }
    }

    /// Attention output before the output projection, plus the softmax maps.
    fn attend(&self, qkv: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let (n, t) = (qkv.dim(0), qkv.dim(1));
        let d = qkv.dim(2) / 3;
        let dh = d / self.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut out = Tensor::zeros(&[n, t, d]);
        let mut probs = vec![T::zero(); n * self.heads * t * t];
        let (mut q, mut k, mut v) = (vec![T::zero(); t * dh], vec![T::zero(); t * dh], vec![T::zero(); t * dh]);
        let mut o = vec![T::zero(); t * dh];
        for b in 0..n {
            let src = qkv.row(b);
            for h in 0..self.heads {
                Self::head_slices(src, t, d, dh, h, 0, &mut q);
                Self::head_slices(src, t, d, dh, h, 1, &mut k);
                Self::head_slices(src, t, d, dh, h, 2, &mut v);
                let p = &mut probs[(b * self.heads + h) * t * t..][..t * t];
                gemm(false, true, t, t, dh, scale, &q, &k, T::zero(), p);
                for row in p.chunks_exact_mut(t) {
                    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut s = T::zero();
                    for e in row.iter_mut() {
                        *e = (*e - m).exp();
                        s += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= s);
                }
                gemm(false, false, t, dh, t, T::one(), p, &v, T::zero(), &mut o);
                let dst = out.row_mut(b);
                for tk in 0..t {
                    dst[tk * d + h * dh..][..dh].copy_from_slice(&o[tk * dh..(tk + 1) * dh]);
                }
            }
        }
        (out, probs)
    }
}

impl<T: Scalar> Layer<T> for Attention<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.proj.forward(&self.attend(&self.qkv.forward(x)).0)
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        let qkv = self.qkv.forward_train(x, ctx);
        let (o, probs) = self.attend(&qkv);
        self.cache = Some((qkv, probs));
        self.proj.forward_train(&o, ctx)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let d_o = self.proj.backward(grad);
        let (qkv, probs) = self.cache.as_ref().expect("attention backward without forward_train");
        let (n, t) = (qkv.dim(0), qkv.dim(1));
        let d = qkv.dim(2) / 3;
        let dh = d / self.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut dqkv = Tensor::zeros(qkv.shape());
        let buf = || vec![T::zero(); t * dh];
        let (mut q, mut k, mut v, mut go) = (buf(), buf(), buf(), buf());
        let (mut dq, mut dk, mut dv) = (buf(), buf(), buf());
        let mut dp = vec![T::zero(); t * t];
        for b in 0..n {
            let src = qkv.row(b);
            for h in 0..self.heads {
                Self::head_slices(src, t, d, dh, h, 0, &mut q);
                Self::head_slices(src, t, d, dh, h, 1, &mut k);
                Self::head_slices(src, t, d, dh, h, 2, &mut v);
                let gsrc = d_o.row(b);
                for tk in 0..t {
                    go[tk * dh..(tk + 1) * dh].copy_from_slice(&gsrc[tk * d + h * dh..][..dh]);
                }
                let p = &probs[(b * self.heads + h) * t * t..][..t * t];
                gemm(false, true, t, t, dh, T::one(), &go, &v, T::zero(), &mut dp);
                gemm(true, false, t, dh, t, T::one(), p, &go, T::zero(), &mut dv);
                for (dr, pr) in dp.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                    let s: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (e, &pv) in dr.iter_mut().zip(pr) {
                        *e = pv * (*e - s);
                    }
                }
                gemm(false, false, t, dh, t, scale, &dp, &k, T::zero(), &mut dq);
                gemm(true, false, t, dh, t, scale, &dp, &q, T::zero(), &mut dk);
                let dst = dqkv.row_mut(b);
                for tk in 0..t {
                    let row = &mut dst[tk * 3 * d..(tk + 1) * 3 * d];
                    row[h * dh..][..dh].copy_from_slice(&dq[tk * dh..(tk + 1) * dh]);
                    row[d + h * dh..][..dh].copy_from_slice(&dk[tk * dh..(tk + 1) * dh]);
                    row[2 * d + h * dh..][..dh].copy_from_slice(&dv[tk * dh..(tk + 1) * dh]);
                }
            }
        }
        self.qkv.backward(&dqkv)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.qkv.params();
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.qkv.params_mut();
        v.extend(self.proj.params_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.cache = None;
        self.qkv.clear_cache();
        self.proj.clear_cache();
    }
}

/// Pre-norm encoder block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    act: Activation<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_dim: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim),
            attn: Attention::new(&format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim),
            fc1: Linear::xavier(&format!("{name}.mlp.fc1"), dim, mlp_dim, rng),
            act: Activation::new(ActivationKind::Gelu),
            fc2: Linear::xavier(&format!("{name}.mlp.fc2"), mlp_dim, dim, rng),
        }
    }
}

impl<T: Scalar> Layer<T> for TransformerBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        h.add_assign(&self.attn.forward(&self.norm1.forward(x)));
        let m = self.fc2.forward(&self.act.forward(&self.fc1.forward(&self.norm2.forward(&h))));
        h.add_assign(&m);
        h
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        let mut h = x.clone();
        let a = self.norm1.forward_train(x, ctx);
        h.add_assign(&self.attn.forward_train(&a, ctx));
        let m = self.norm2.forward_train(&h, ctx);
        let m = self.fc1.forward_train(&m, ctx);
        let m = self.act.forward_train(&m, ctx);
        h.add_assign(&self.fc2.forward_train(&m, ctx));
        h
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let g = self.fc2.backward(grad);
        let g = self.act.backward(&g);
        let g = self.fc1.backward(&g);
        let mut gh = self.norm2.backward(&g);
        gh.add_assign(grad);
        let g = self.attn.backward(&gh);
        let mut gx = self.norm1.backward(&g);
        gx.add_assign(&gh);
        gx
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.norm1.params();
        v.extend(self.attn.params());
        v.extend(self.norm2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.norm1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    fn clear_cache(&mut self) {
        self.norm1.clear_cache();
        self.attn.clear_cache();
        self.norm2.clear_cache();
        self.fc1.clear_cache();
        Layer::<T>::clear_cache(&mut self.act);
        self.fc2.clear_cache();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenPoolMode {
    /// Class token after the final norm.
    Cls,
    /// Mean of the patch tokens, then a norm.
    MeanPatches,
}

/// `[N, T, D] -> [N, D]` readout.
#[derive(Clone, Debug)]
pub struct TokenPool<T> {
    pub mode: TokenPoolMode,
    pub norm: LayerNorm<T>,
    tokens: usize,
}

impl<T: Scalar> TokenPool<T> {
    pub fn new(mode: TokenPoolMode, dim: usize) -> Self {
        let name = match mode {
            TokenPoolMode::Cls => "norm",
            TokenPoolMode::MeanPatches => "fc_norm",
        };
        Self {
            mode,
            norm: LayerNorm::new(name, dim),
            tokens: 0,
        }
    }

    fn pool(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut out = Tensor::zeros(&[n, d]);
        for b in 0..n {
            let src = x.row(b);
            let dst = out.row_mut(b);
            match self.mode {
                TokenPoolMode::Cls => dst.copy_from_slice(&src[..d]),
                TokenPoolMode::MeanPatches => {
                    let inv = T::one() / T::from_usize_lossy(t - 1);
                    for tk in 1..t {
                        for (o, &v) in dst.iter_mut().zip(&src[tk * d..(tk + 1) * d]) {
                            *o += v * inv;
                        }
                    }
                }
            }
        }
        out
    }
}

impl<T: Scalar> Layer<T> for TokenPool<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.norm.forward(&self.pool(x))
    }

    fn forward_train(&mut self, x: &Tensor<T>, ctx: &mut Ctx) -> Tensor<T> {
        self.tokens = x.dim(1);
        let p = self.pool(x);
        self.norm.forward_train(&p, ctx)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Tensor<T> {
        let g = self.norm.backward(grad);
        let (n, d, t) = (g.dim(0), g.dim(1), self.tokens);
        let mut dx = Tensor::zeros(&[n, t, d]);
        for b in 0..n {
            let src = g.row(b);
            let dst = dx.row_mut(b);
            match self.mode {
                TokenPoolMode::Cls => dst[..d].copy_from_slice(src),
                TokenPoolMode::MeanPatches => {
                    let inv = T::one() / T::from_usize_lossy(t - 1);
                    for tk in 1..t {
                        for (o, &v) in dst[tk * d..(tk + 1) * d].iter_mut().zip(src) {
                            *o = v * inv;
                        }
                    }
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.norm.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.norm.params_mut()
    }

    fn clear_cache(&mut self) {
        self.norm.clear_cache();
    }
}
