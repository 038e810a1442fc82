use super::edge::WeightMap;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weighted mean squared error `(1/(N·P)) Σ ω(x)·(S(x) − Ŝ(x))²` and its gradient w.r.t. the prediction.
///
/// `P` counts every element of one batch item; a weight map's single channel
/// applies to all channels of the prediction. No map means `ω ≡ 1`.
pub fn l2_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    weights: Option<&WeightMap>,
) -> Result<(f64, Tensor<T>)> {
    pred.expect_same_shape(target, "l2 loss")?;
    let s = pred.shape();
    if let Some(m) = weights {
        m.check_compatible(s)?;
    }
    let norm = 1.0 / s.len() as f64;
    let plane = s.plane();
    let mut grad = Tensor::zeros(s);
    let mut total = 0.0;
    for n in 0..s.n {
        let omega = weights.map(|m| m.plane(n));
        for c in 0..s.c {
            let (p, t) = (pred.plane(n, c), target.plane(n, c));
            let g = grad.plane_mut(n, c);
            for i in 0..plane {
                let w = omega.map_or(1.0, |o| o[i]);
                let d = p[i].as_f64() - t[i].as_f64();
                total += w * d * d;
                g[i] = T::of_f64(2.0 * norm * w * d);
            }
        }
    }
    Ok((total * norm, grad))
}
