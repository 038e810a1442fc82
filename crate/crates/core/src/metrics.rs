//! Evaluation metrics: PSNR and the standard three-factor SSIM.
//!
//! The SSIM here is the textbook Gaussian-window one with the luminance term,
//! not the two-factor variant used by the training loss.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `10·log10(max² / MSE)`. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, max_value: f64) -> Result<f64> {
    pred.expect_same_shape(target, "psnr")?;
    if !(max_value > 0.0) {
        return Err(Error::Param(format!("psnr peak must be positive, got {max_value}")));
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    let mse = sse / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Mean squared error, for reports.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(target, "mse")?;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sse / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardSsim {
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
}

impl Default for StandardSsim {
    fn default() -> Self {
        StandardSsim { window: 11, sigma: 1.5, dynamic_range: 1.0 }
    }
}

fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let raw: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of one plane: rows first, then columns.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, c)| c * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, c)| c * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean three-factor SSIM over every plane and every valid window position.
pub fn ssim_standard<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &StandardSsim) -> Result<f64> {
    pred.expect_same_shape(target, "ssim")?;
    let s = pred.shape();
    if cfg.window == 0 || cfg.window > s.h.min(s.w) {
        return Err(Error::Param(format!(
            "ssim window {} does not fit a {}x{} image",
            cfg.window, s.h, s.w
        )));
    }
    if !(cfg.sigma > 0.0 && cfg.dynamic_range > 0.0) {
        return Err(Error::Param("ssim sigma and dynamic range must be positive".into()));
    }
    let taps = gaussian_taps(cfg.window, cfg.sigma);
    let c1 = (0.01 * cfg.dynamic_range).powi(2);
    let c2 = (0.03 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let a: Vec<f64> = pred.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = target.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(&b).map(|(&u, &v)| f(u, v)).collect() };
            let mx = filter_valid(&a, s.h, s.w, &taps);
            let my = filter_valid(&b, s.h, s.w, &taps);
            let xx = filter_valid(&prod(|u, _| u * u), s.h, s.w, &taps);
            let yy = filter_valid(&prod(|_, v| v * v), s.h, s.w, &taps);
            let xy = filter_valid(&prod(|u, v| u * v), s.h, s.w, &taps);
            for i in 0..mx.len() {
                let vx = xx[i] - mx[i] * mx[i];
                let vy = yy[i] - my[i] * my[i];
                let cov = xy[i] - mx[i] * my[i];
                total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                    / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
            }
            count += mx.len();
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::Shape4;
    use crate::verify::ssim_window_oracle;
    use proptest::prelude::*;

    fn img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        Tensor::random(Shape4::new(2, 1, h, w).unwrap(), &mut RngStream::new(seed), 0.5)
            .unwrap()
            .map(|v| v + 0.5)
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = Tensor::<f64>::filled(1, 1, 4, 4, 0.3).unwrap();
        let b = Tensor::<f64>::filled(1, 1, 4, 4, 0.4).unwrap();
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_drops_with_noise() {
        let x = img(1, 16, 16);
        let noise = Tensor::<f64>::random(x.shape(), &mut RngStream::new(9), 1.0).unwrap();
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.02, 0.05, 0.1] {
            let noisy = x.zip_map(&noise, |v, e| v + sigma * e).unwrap();
            let p = psnr(&noisy, &x, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_matches_window_oracle() {
        let a = img(3, 17, 14);
        let b = img(4, 17, 14);
        let fast = ssim_standard(&a, &b, &StandardSsim::default()).unwrap();
        let slow = ssim_window_oracle(&a, &b, 11, 1.5, 1.0);
        assert!((fast - slow).abs() <= 1e-10, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = img(5, 16, 16);
        assert_eq!(ssim_standard(&a, &a, &StandardSsim::default()).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim_standard(&a, &inv, &StandardSsim::default()).unwrap() < 1.0);
        let small = img(5, 8, 8);
        assert!(ssim_standard(&small, &small, &StandardSsim::default()).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = img(s1, 12, 13);
            let b = img(s2 + 1000, 12, 13);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            let cfg = StandardSsim::default();
            let d = ssim_standard(&a, &b, &cfg).unwrap() - ssim_standard(&b, &a, &cfg).unwrap();
            prop_assert!(d.abs() <= 1e-12);
            prop_assert_eq!(ssim_standard(&a, &a, &cfg).unwrap(), 1.0);
        }
    }
}
