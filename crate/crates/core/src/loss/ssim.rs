use std::fmt;
use std::str::FromStr;

use super::edge::WeightMap;
use super::window::BoxFilter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimMode {
    /// One mean/deviation pair per image plane.
    Global,
    /// Uniform sliding windows, reflection-padded at the borders.
    Local,
}

impl fmt::Display for SsimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SsimMode::Global => "global",
            SsimMode::Local => "local",
        })
    }
}

impl FromStr for SsimMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(SsimMode::Global),
            "local" => Ok(SsimMode::Local),
            other => Err(format!("unknown ssim mode '{other}' (expected global or local)")),
        }
    }
}

/// Settings of the two-factor (luminance × contrast) similarity used as a training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub mode: SsimMode,
    /// Odd window side for local mode.
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
    /// Added to each variance before the square root so σ stays differentiable at 0.
    pub sigma_eps: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig::for_range(SsimMode::Local, 7, 1.0)
    }
}

impl SsimConfig {
    pub const DEFAULT_SIGMA_EPS: f64 = 1e-8;

    /// `C1 = (0.01·L)²`, `C2 = (0.03·L)²`.
    pub fn for_range(mode: SsimMode, window: usize, dynamic_range: f64) -> Self {
        SsimConfig {
            mode,
            window,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            dynamic_range,
            sigma_eps: Self::DEFAULT_SIGMA_EPS,
        }
    }

    pub fn validate(&self, s: Shape4) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Param(format!("ssim constants must be positive, got C1={} C2={}", self.c1, self.c2)));
        }
        if !(self.sigma_eps >= 0.0) {
            return Err(Error::Param("ssim sigma_eps must be >= 0".into()));
        }
        if self.mode == SsimMode::Local {
            if self.window % 2 == 0 || self.window == 0 {
                return Err(Error::Param(format!("ssim window must be odd, got {}", self.window)));
            }
            if self.window > s.h.min(s.w) {
                return Err(Error::Param(format!(
                    "ssim window {} larger than image {}x{}",
                    self.window, s.h, s.w
                )));
            }
        }
        Ok(())
    }
}

/// Similarity and its partial derivatives w.r.t. the prediction's window mean
/// and window mean of squares.
#[derive(Debug, Clone, Copy)]
struct Local {
    q: f64,
    dq_dmean: f64,
    dq_dsq: f64,
}

fn similarity(cfg: &SsimConfig, mx: f64, my: f64, exx: f64, eyy: f64) -> Local {
    let d1 = mx * mx + my * my + cfg.c1;
    let n1 = 2.0 * mx * my + cfg.c1;
    let l = n1 / d1;
    let dl_dmx = (2.0 * my * d1 - n1 * 2.0 * mx) / (d1 * d1);

    let vx_raw = exx - mx * mx;
    let vx = vx_raw.max(0.0);
    let vy = (eyy - my * my).max(0.0);
    let sx = (vx + cfg.sigma_eps).sqrt();
    let sy = (vy + cfg.sigma_eps).sqrt();
    let d2 = sx * sx + sy * sy + cfg.c2;
    let n2 = 2.0 * sx * sy + cfg.c2;
    let c = n2 / d2;
    let dc_dvx = if vx_raw < 0.0 || sx == 0.0 {
        0.0
    } else {
        let dc_dsx = (2.0 * sy * d2 - n2 * 2.0 * sx) / (d2 * d2);
        dc_dsx / (2.0 * sx)
    };
    Local {
        q: l * c,
        dq_dmean: c * dl_dmx + l * dc_dvx * (-2.0 * mx),
        dq_dsq: l * dc_dvx,
    }
}

struct PlaneResult {
    /// Similarity per pixel (global mode repeats one value).
    map: Vec<f64>,
    partials: Vec<Local>,
}

fn plane_similarity(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> PlaneResult {
    match cfg.mode {
        SsimMode::Global => {
            let p = (h * w) as f64;
            let mx = x.iter().sum::<f64>() / p;
            let my = y.iter().sum::<f64>() / p;
            let exx = x.iter().map(|v| v * v).sum::<f64>() / p;
            let eyy = y.iter().map(|v| v * v).sum::<f64>() / p;
            let s = similarity(cfg, mx, my, exx, eyy);
            PlaneResult {
                map: vec![s.q; h * w],
                partials: vec![s],
            }
        }
        SsimMode::Local => {
            let f = BoxFilter { h, w, size: cfg.window };
            let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
            let mx = f.apply(x);
            let my = f.apply(y);
            let exx = f.apply(&sq(x));
            let eyy = f.apply(&sq(y));
            let partials: Vec<Local> = (0..h * w)
                .map(|i| similarity(cfg, mx[i], my[i], exx[i], eyy[i]))
                .collect();
            PlaneResult {
                map: partials.iter().map(|s| s.q).collect(),
                partials,
            }
        }
    }
}

fn planes_f64<T: Scalar>(t: &Tensor<T>, n: usize, c: usize) -> Vec<f64> {
    t.plane(n, c).iter().map(|v| v.as_f64()).collect()
}

/// Two-factor similarity map `l·c` (no covariance term), one value per pixel.
pub fn ssim_map<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    pred.expect_same_shape(target, "ssim map")?;
    let s = pred.shape();
    cfg.validate(s)?;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let r = plane_similarity(&planes_f64(pred, n, c), &planes_f64(target, n, c), s.h, s.w, cfg);
            for (o, q) in out.plane_mut(n, c).iter_mut().zip(&r.map) {
                *o = T::of_f64(*q);
            }
        }
    }
    Ok(out)
}

/// `(1/(N·P)) Σ ω(x)·(1 − Q(x))` and its gradient w.r.t. the prediction.
///
/// The gradient applies the product rule to `Q = l·c` and chains through the
/// window statistics of the prediction.
pub fn ssim_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &SsimConfig,
    weights: Option<&WeightMap>,
) -> Result<(f64, Tensor<T>)> {
    pred.expect_same_shape(target, "ssim loss")?;
    let s = pred.shape();
    cfg.validate(s)?;
    if let Some(m) = weights {
        m.check_compatible(s)?;
    }
    let (h, w) = (s.h, s.w);
    let plane = s.plane();
    let norm = 1.0 / s.len() as f64;
    let ones = vec![1.0; plane];
    let mut total = 0.0;
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        let omega: &[f64] = weights.map_or(&ones[..], |m| m.plane(n));
        for c in 0..s.c {
            let x = planes_f64(pred, n, c);
            let y = planes_f64(target, n, c);
            let r = plane_similarity(&x, &y, h, w, cfg);
            total += r.map.iter().zip(omega).map(|(q, o)| o * (1.0 - q)).sum::<f64>();
            let g = grad.plane_mut(n, c);
            match cfg.mode {
                SsimMode::Global => {
                    let st = r.partials[0];
                    let mass: f64 = omega.iter().sum();
                    let a = -mass * norm * st.dq_dmean / plane as f64;
                    let b = -mass * norm * st.dq_dsq / plane as f64;
                    for (gi, xi) in g.iter_mut().zip(&x) {
                        *gi = T::of_f64(a + 2.0 * xi * b);
                    }
                }
                SsimMode::Local => {
                    let f = BoxFilter { h, w, size: cfg.window };
                    let a: Vec<f64> = r.partials.iter().zip(omega).map(|(p, o)| -o * norm * p.dq_dmean).collect();
                    let b: Vec<f64> = r.partials.iter().zip(omega).map(|(p, o)| -o * norm * p.dq_dsq).collect();
                    let ga = f.adjoint(&a);
                    let gb = f.adjoint(&b);
                    for i in 0..plane {
                        g[i] = T::of_f64(ga[i] + 2.0 * x[i] * gb[i]);
                    }
                }
            }
        }
    }
    Ok((total * norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn noise(s: Shape4, seed: u64) -> Tensor<f64> {
        Tensor::random(s, &mut RngStream::new(seed), 0.5).unwrap().map(|v| v + 0.5)
    }

    #[test]
    fn identical_inputs_give_unit_map_and_zero_loss() {
        let s = Shape4::new(2, 1, 9, 9).unwrap();
        let x = noise(s, 1);
        for mode in [SsimMode::Global, SsimMode::Local] {
            let cfg = SsimConfig::for_range(mode, 7, 1.0);
            let m = ssim_map(&x, &x, &cfg).unwrap();
            assert!(m.data().iter().all(|&v| v == 1.0), "{mode}");
            let (l, _) = ssim_loss(&x, &x, &cfg, None).unwrap();
            assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn global_constant_images_follow_closed_form() {
        let s = Shape4::new(1, 1, 4, 4).unwrap();
        let a = Tensor::<f64>::new(s, 0.0);
        let b = Tensor::<f64>::new(s, 1.0);
        let mut cfg = SsimConfig::for_range(SsimMode::Global, 7, 1.0);
        cfg.c1 = 1e-4;
        cfg.c2 = 9e-4;
        let m = ssim_map(&a, &b, &cfg).unwrap();
        let want = 1e-4 / (1.0 + 1e-4);
        assert!((m.data()[0] - want).abs() < 1e-15);
        assert!((m.data()[0] - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn map_stays_in_range_for_random_pairs() {
        let s = Shape4::new(3, 2, 10, 12).unwrap();
        let (a, b) = (noise(s, 4), noise(s, 5));
        for mode in [SsimMode::Global, SsimMode::Local] {
            let m = ssim_map(&a, &b, &SsimConfig::for_range(mode, 5, 1.0)).unwrap();
            assert!(m.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn oversized_or_even_window_is_rejected() {
        let s = Shape4::new(1, 1, 5, 5).unwrap();
        let x = noise(s, 1);
        assert!(matches!(
            ssim_map(&x, &x, &SsimConfig::for_range(SsimMode::Local, 7, 1.0)),
            Err(Error::Param(_))
        ));
        assert!(ssim_map(&x, &x, &SsimConfig::for_range(SsimMode::Local, 4, 1.0)).is_err());
        // global mode ignores the window
        assert!(ssim_map(&x, &x, &SsimConfig::for_range(SsimMode::Global, 7, 1.0)).is_ok());
    }

    #[test]
    fn weight_on_corrupted_region_raises_loss() {
        let s = Shape4::new(1, 1, 16, 16).unwrap();
        let target = noise(s, 8);
        let mut pred = target.clone();
        for y in 0..6 {
            for x in 0..6 {
                pred.set(0, 0, y, x, 0.5);
            }
        }
        let cfg = SsimConfig::default();
        let uniform = WeightMap::ones(s).unwrap();
        let mut focused = Tensor::new(s, 0.0);
        let mass = 256.0 / 36.0;
        for y in 0..6 {
            for x in 0..6 {
                focused.set(0, 0, y, x, mass);
            }
        }
        let focused = WeightMap::new(focused).unwrap();
        assert!((focused.mass(0) - uniform.mass(0)).abs() < 1e-9);
        let (lu, _) = ssim_loss(&pred, &target, &cfg, Some(&uniform)).unwrap();
        let (lf, _) = ssim_loss(&pred, &target, &cfg, Some(&focused)).unwrap();
        assert!(lf > lu, "focused {lf} <= uniform {lu}");
    }

    #[test]
    fn unit_weights_match_unweighted_bitwise() {
        let s = Shape4::new(1, 1, 8, 8).unwrap();
        let (a, b) = (noise(s, 2), noise(s, 3));
        let cfg = SsimConfig::for_range(SsimMode::Local, 3, 1.0);
        let (l0, g0) = ssim_loss(&a, &b, &cfg, None).unwrap();
        let (l1, g1) = ssim_loss(&a, &b, &cfg, Some(&WeightMap::ones(s).unwrap())).unwrap();
        assert_eq!(l0.to_bits(), l1.to_bits());
        assert!(g0.bit_eq(&g1));
    }
}
