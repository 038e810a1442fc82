use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

pub const DEFAULT_EDGE_BETA: f64 = 4.0;

/// Per-pixel loss weights ω(x) of shape (n, 1, h, w); finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    weights: Tensor<f64>,
}

impl WeightMap {
    pub fn new(weights: Tensor<f64>) -> Result<Self> {
        if weights.shape().c != 1 {
            return Err(shape_err!("weight map must have one channel, got {}", weights.shape()));
        }
        if let Some(bad) = weights.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Param(format!("weight map entries must be finite and >= 0, found {bad}")));
        }
        Ok(WeightMap { weights })
    }

    /// `ω ≡ 1` for images of shape `s`.
    pub fn ones(s: Shape4) -> Result<Self> {
        Self::new(Tensor::new(Shape4::new(s.n, 1, s.h, s.w)?, 1.0))
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.weights
    }

    pub fn plane(&self, n: usize) -> &[f64] {
        self.weights.plane(n, 0)
    }

    /// Σ ω over one image.
    pub fn mass(&self, n: usize) -> f64 {
        self.plane(n).iter().sum()
    }

    pub(crate) fn check_compatible(&self, s: Shape4) -> Result<()> {
        let m = self.weights.shape();
        if m.n != s.n || m.h != s.h || m.w != s.w {
            return Err(shape_err!("weight map {m} does not cover images of shape {s}"));
        }
        Ok(())
    }
}

/// Sobel gradient magnitude of one plane with replicated borders.
pub fn sobel_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        plane[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Edge emphasis `ω(x) = 1 + beta·E(x)`, where `E` is the Sobel magnitude of the
/// target (averaged over channels) scaled so its per-image maximum is 1.
/// A constant image has `E ≡ 0`.
pub fn edge_weight_map<T: Scalar>(target: &Tensor<T>, beta: f64) -> Result<WeightMap> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Param(format!("edge beta must be finite and >= 0, got {beta}")));
    }
    let s = target.shape();
    let mut out = Tensor::new(Shape4::new(s.n, 1, s.h, s.w)?, 1.0);
    for n in 0..s.n {
        let mut e = vec![0.0; s.plane()];
        for c in 0..s.c {
            let plane: Vec<f64> = target.plane(n, c).iter().map(|v| v.as_f64()).collect();
            for (acc, v) in e.iter_mut().zip(sobel_magnitude(&plane, s.h, s.w)) {
                *acc += v / s.c as f64;
            }
        }
        let max = e.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            for (o, v) in out.plane_mut(n, 0).iter_mut().zip(&e) {
                *o = 1.0 + beta * (v / max);
            }
        }
    }
    WeightMap::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_or_zero_beta_gives_unit_weights() {
        let c = Tensor::<f64>::new(Shape4::new(2, 1, 5, 5).unwrap(), 0.7);
        assert!(edge_weight_map(&c, 4.0).unwrap().tensor().data().iter().all(|&v| v == 1.0));
        let mut step = Tensor::<f64>::zeros(Shape4::new(1, 1, 4, 4).unwrap());
        step.set(0, 0, 1, 1, 1.0);
        assert!(edge_weight_map(&step, 0.0).unwrap().tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn step_edge_peaks_at_one_plus_beta_on_the_edge() {
        let (h, w) = (6, 8);
        let mut step = Tensor::<f64>::zeros(Shape4::new(1, 1, h, w).unwrap());
        for y in 0..h {
            for x in 4..w {
                step.set(0, 0, y, x, 1.0);
            }
        }
        let m = edge_weight_map(&step, 4.0).unwrap();
        let max = m.tensor().max_abs_f64();
        assert_eq!(max, 5.0);
        // Sobel of an ideal vertical step responds equally on both sides of it
        for y in 0..h {
            assert_eq!(m.tensor().at(0, 0, y, 3), 5.0);
            assert_eq!(m.tensor().at(0, 0, y, 4), 5.0);
            assert_eq!(m.tensor().at(0, 0, y, 0), 1.0);
            assert_eq!(m.tensor().at(0, 0, y, 7), 1.0);
        }
    }

    #[test]
    fn negative_weights_are_rejected() {
        let t = Tensor::from_vec(Shape4::new(1, 1, 1, 2).unwrap(), vec![1.0, -0.5]).unwrap();
        assert!(matches!(WeightMap::new(t), Err(Error::Param(_))));
        let c = Tensor::<f64>::new(Shape4::new(1, 1, 3, 3).unwrap(), 0.0);
        assert!(edge_weight_map(&c, -1.0).is_err());
    }
}
