use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TV_EPS: f64 = 1e-8;

/// Smoothed isotropic total variation, the mean of `sqrt(p² + q² + eps)` over valid cells.
///
/// `p` and `q` are forward differences down and right; cells in the last row
/// or column have no forward neighbour and are excluded. Averaging over the
/// `N·C·(H−1)·(W−1)` valid cells keeps the term on the same scale as the other losses.
pub fn tv_loss<T: Scalar>(pred: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>)> {
    if !(eps >= 0.0) {
        return Err(Error::Param(format!("tv eps must be >= 0, got {eps}")));
    }
    let s = pred.shape();
    let (h, w) = (s.h, s.w);
    let cells = s.n * s.c * h.saturating_sub(1) * w.saturating_sub(1);
    let norm = if cells == 0 { 0.0 } else { 1.0 / cells as f64 };
    let mut total = 0.0;
    let mut grad = Tensor::zeros(s);
    let mut g = vec![0.0f64; s.plane()];
    for n in 0..s.n {
        for c in 0..s.c {
            let x = pred.plane(n, c);
            g.fill(0.0);
            for i in 0..h.saturating_sub(1) {
                for j in 0..w - 1 {
                    let here = x[i * w + j].as_f64();
                    let p = x[(i + 1) * w + j].as_f64() - here;
                    let q = x[i * w + j + 1].as_f64() - here;
                    let t = (p * p + q * q + eps).sqrt();
                    total += t;
                    if t > 0.0 {
                        g[i * w + j] -= (p + q) / t;
                        g[(i + 1) * w + j] += p / t;
                        g[i * w + j + 1] += q / t;
                    }
                }
            }
            for (dst, v) in grad.plane_mut(n, c).iter_mut().zip(&g) {
                *dst = T::of_f64(norm * v);
            }
        }
    }
    Ok((total * norm, grad))
}
