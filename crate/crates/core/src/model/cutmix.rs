//! CutMix: paste a box from a permuted partner and mix labels by pasted area.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pixel box `[x0, x0 + w) x [y0, y0 + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

#[derive(Clone, Debug)]
pub struct CutMixed<T> {
    pub images: Tensor<T>,
    pub labels: Tensor<T>,
    /// Sampled (or forced) mixing weight.
    pub lambda: f64,
    /// Own-image weight implied by the realized box.
    pub lambda_adjusted: f64,
    pub cut: CutBox,
    /// `partner[i]` is the source pasted into image `i`.
    pub partner: Vec<usize>,
}

/// Box of relative area `1 - lambda`, placed uniformly and kept inside the image.
pub fn sample_box(height: usize, width: usize, lambda: f64, rng: &mut Rng) -> CutBox {
    let r = (1.0 - lambda.clamp(0.0, 1.0)).sqrt();
    let w = ((width as f64 * r).round() as usize).min(width);
    let h = ((height as f64 * r).round() as usize).min(height);
    let x0 = rng.random_range(0..=width - w);
    let y0 = rng.random_range(0..=height - h);
    CutBox { x0, y0, w, h }
}

/// Apply a given box and partner assignment to `[N, C, H, W]` images and `[N, K]` labels.
pub fn cutmix_box<T: Scalar>(images: &Tensor<T>, labels: &Tensor<T>, cut: CutBox, partner: &[usize], lambda: f64) -> CutMixed<T> {
    let (n, c, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    assert_eq!(partner.len(), n);
    assert!(cut.x0 + cut.w <= w && cut.y0 + cut.h <= h, "box outside image");
    let mut out = images.clone();
    for (i, &j) in partner.iter().enumerate() {
        let src = images.row(j).to_vec();
        let dst = out.row_mut(i);
        for ch in 0..c {
            for y in cut.y0..cut.y0 + cut.h {
                let base = (ch * h + y) * w;
                dst[base + cut.x0..base + cut.x0 + cut.w].copy_from_slice(&src[base + cut.x0..base + cut.x0 + cut.w]);
            }
        }
    }
    let lam_adj = 1.0 - cut.area() as f64 / (h * w) as f64;
    let k = labels.dim(1);
    let mut mixed = Tensor::zeros(labels.shape());
    let (own, other) = (T::lit(lam_adj), T::lit(1.0 - lam_adj));
    for (i, &j) in partner.iter().enumerate() {
        for q in 0..k {
            mixed.data_mut()[i * k + q] = own * labels.data()[i * k + q] + other * labels.data()[j * k + q];
        }
    }
    CutMixed {
        images: out,
        labels: mixed,
        lambda,
        lambda_adjusted: lam_adj,
        cut,
        partner: partner.to_vec(),
    }
}

/// CutMix with a forced `lambda`; box position and partners are random.
pub fn cutmix_with_lambda<T: Scalar>(images: &Tensor<T>, labels: &Tensor<T>, lambda: f64, rng: &mut Rng) -> CutMixed<T> {
    let n = images.dim(0);
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    let cut = sample_box(images.dim(2), images.dim(3), lambda, rng);
    cutmix_box(images, labels, cut, &partner, lambda)
}

/// CutMix with `lambda ~ Beta(alpha, alpha)`.
pub fn cutmix<T: Scalar>(images: &Tensor<T>, labels: &Tensor<T>, alpha: f64, rng: &mut Rng) -> CutMixed<T> {
    assert!(images.dim(0) >= 2, "cutmix needs at least two images");
    assert!(alpha > 0.0, "cutmix alpha must be positive");
    let lambda = Beta::new(alpha, alpha).expect("positive alpha").sample(rng);
    cutmix_with_lambda(images, labels, lambda, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::loss::one_hot;
    use rand::SeedableRng;

    fn batch(n: usize, s: usize) -> Tensor<f64> {
        let data = (0..n * 3 * s * s).map(|i| (i / (3 * s * s)) as f64 + 1.0).collect();
        Tensor::from_vec(&[n, 3, s, s], data)
    }

    #[test]
    fn boundary_lambdas() {
        let mut rng = Rng::seed_from_u64(1);
        let x = batch(4, 8);
        let y = one_hot::<f64>(&[0, 1, 1, 0]);
        let same = cutmix_with_lambda(&x, &y, 1.0, &mut rng);
        assert_eq!(same.images, x);
        assert_eq!(same.labels, y);
        let swap = cutmix_with_lambda(&x, &y, 0.0, &mut rng);
        for (i, &j) in swap.partner.iter().enumerate() {
            assert_eq!(swap.images.row(i), x.row(j));
            assert_eq!(swap.labels.row(i), y.row(j));
        }
    }

    #[test]
    fn quarter_box_gives_three_quarter_weight() {
        let x = batch(2, 32);
        let y = one_hot::<f64>(&[0, 1]);
        let cut = CutBox { x0: 5, y0: 9, w: 16, h: 16 };
        let m = cutmix_box(&x, &y, cut, &[1, 0], 0.75);
        assert_eq!(m.lambda_adjusted, 0.75);
        assert_eq!(m.labels.row(0), &[0.75, 0.25]);
        let pasted = m.images.row(0).iter().filter(|&&v| v == 2.0).count();
        assert_eq!(pasted, 3 * 256);
    }
}
