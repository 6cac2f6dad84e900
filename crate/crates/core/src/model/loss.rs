use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard inside the logarithm.
pub const CE_EPS: f64 = 1e-7;

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Mean over the batch of `-sum(label * ln(prob + eps))`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> T {
    assert_eq!(probs.shape(), labels.shape());
    let n = probs.dim(0).max(1);
    let eps = T::lit(CE_EPS);
    let total: T = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| -y * (p + eps).ln())
        .sum();
    total / T::from_usize_lossy(n)
}

/// Gradient of [`cross_entropy`] of `softmax(logits)` with respect to the logits.
pub fn cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Tensor<T> {
    let (n, k) = (probs.dim(0), probs.dim(1));
    let eps = T::lit(CE_EPS);
    let inv_n = T::one() / T::from_usize_lossy(n.max(1));
    let mut out = Tensor::zeros(probs.shape());
    for ((p, y), o) in probs
        .data()
        .chunks_exact(k)
        .zip(labels.data().chunks_exact(k))
        .zip(out.data_mut().chunks_exact_mut(k))
    {
        // dL/dp_j = -y_j / (p_j + eps), then through the softmax Jacobian
        let g: Vec<T> = p.iter().zip(y).map(|(&pv, &yv)| -yv / (pv + eps)).collect();
        let dot: T = p.iter().zip(&g).map(|(&a, &b)| a * b).sum();
        for j in 0..k {
            o[j] = p[j] * (g[j] - dot) * inv_n;
        }
    }
    out
}

/// One-hot `[N, 2]` targets from binary labels.
pub fn one_hot<T: Scalar>(labels: &[u8]) -> Tensor<T> {
    let mut t = Tensor::zeros(&[labels.len(), 2]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * 2 + l as usize] = T::one();
    }
    t
}
