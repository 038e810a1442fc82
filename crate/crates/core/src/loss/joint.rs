use std::fmt;
use std::str::FromStr;

use super::edge::WeightMap;
use super::l2::l2_loss;
use super::ssim::{ssim_loss, SsimConfig};
use super::tv::tv_loss;
use crate::error::{Error, Result};
use crate::model::{ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative weights of the four cost terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weighted L2.
    pub l2: f64,
    /// Weighted SSIM loss.
    pub ssim: f64,
    /// Total variation.
    pub tv: f64,
    /// Weight decay.
    pub wd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l2: 10.0,
            ssim: 5.0,
            tv: 0.5,
            wd: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.l2), ("lambda2", self.ssim), ("lambda3", self.tv), ("lambda4", self.wd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Weights actually applied for a training objective: `l2` and
    /// `weighted-l2` drop the SSIM and TV terms and keep weight decay.
    pub fn effective(&self, kind: LossKind) -> LossWeights {
        match kind {
            LossKind::Joint => *self,
            LossKind::L2 | LossKind::WeightedL2 => LossWeights {
                ssim: 0.0,
                tv: 0.0,
                ..*self
            },
        }
    }
}

/// Training objective selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Unweighted L2 plus weight decay.
    L2,
    /// Edge-weighted L2 plus weight decay.
    WeightedL2,
    /// Edge-weighted L2 and SSIM, TV and weight decay.
    Joint,
}

impl LossKind {
    pub fn uses_edge_weights(self) -> bool {
        !matches!(self, LossKind::L2)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::WeightedL2 => "weighted_l2",
            LossKind::Joint => "joint",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "l2" => Ok(LossKind::L2),
            "weighted_l2" => Ok(LossKind::WeightedL2),
            "joint" => Ok(LossKind::Joint),
            other => Err(format!("unknown loss '{other}' (expected l2, weighted_l2 or joint)")),
        }
    }
}

/// Term values and gradients for one batch.
#[derive(Debug, Clone)]
pub struct LossReport<T: Scalar> {
    pub l2: f64,
    pub ssim: f64,
    pub tv: f64,
    pub wd: f64,
    /// `λ1·l2 + λ2·ssim + λ3·tv + λ4·wd`.
    pub total: f64,
    /// Gradient of the image terms w.r.t. each head's prediction.
    pub grads: Vec<Tensor<T>>,
    /// Unscaled gradient of the weight-decay term w.r.t. the parameters.
    pub wd_grad: ParamSet<T>,
}

/// `½·Σ w²` over convolution weights only, with gradient `w` on those entries.
///
/// The gradient set covers every learnable entry; biases and batchnorm
/// parameters get zeros.
pub fn weight_decay<T: Scalar>(params: &ParamSet<T>) -> (f64, ParamSet<T>) {
    let mut grads = params.zeros_like_learnable();
    let mut total = 0.0;
    for (name, p) in params.iter() {
        if p.kind == ParamKind::ConvWeight {
            total += 0.5 * p.tensor.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            grads
                .replace(name, p.tensor.clone())
                .expect("learnable entry exists in zeros_like_learnable");
        }
    }
    (total, grads)
}

/// λ-weighted objective over all heads; per-head image terms are averaged.
///
/// All terms are evaluated and reported whatever their λ, so a zero weight only
/// removes a term from `total` and from the gradients.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Scalar>(
    preds: &[Tensor<T>],
    targets: &[Tensor<T>],
    params: &ParamSet<T>,
    lambda: &LossWeights,
    ssim_cfg: &SsimConfig,
    tv_eps: f64,
    maps: Option<&[WeightMap]>,
) -> Result<LossReport<T>> {
    lambda.validate()?;
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Usage(format!(
            "joint loss needs matching prediction/target lists, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    if let Some(m) = maps {
        if m.len() != preds.len() {
            return Err(Error::Usage(format!("{} weight maps for {} heads", m.len(), preds.len())));
        }
    }
    let heads = preds.len() as f64;
    let (mut l2, mut ssim, mut tv) = (0.0, 0.0, 0.0);
    let mut grads = Vec::with_capacity(preds.len());
    for (k, (p, t)) in preds.iter().zip(targets).enumerate() {
        let omega = maps.map(|m| &m[k]);
        let (a, ga) = l2_loss(p, t, omega)?;
        let (b, gb) = ssim_loss(p, t, ssim_cfg, omega)?;
        let (c, gc) = tv_loss(p, tv_eps)?;
        l2 += a / heads;
        ssim += b / heads;
        tv += c / heads;
        let mut g = Tensor::zeros(p.shape());
        g.axpy(T::of_f64(lambda.l2 / heads), &ga)?;
        g.axpy(T::of_f64(lambda.ssim / heads), &gb)?;
        g.axpy(T::of_f64(lambda.tv / heads), &gc)?;
        grads.push(g);
    }
    let (wd, wd_grad) = weight_decay(params);
    let total = lambda.l2 * l2 + lambda.ssim * ssim + lambda.tv * tv + lambda.wd * wd;
    Ok(LossReport {
        l2,
        ssim,
        tv,
        wd,
        total,
        grads,
        wd_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Topology};
    use crate::rng::RngStream;
    use crate::tensor::Shape4;

    fn pair(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let s = Shape4::new(2, 1, 8, 8).unwrap();
        let mut r = RngStream::new(seed);
        (
            Tensor::random(s, &mut r, 0.5).unwrap().map(|v| v + 0.5),
            Tensor::random(s, &mut r, 0.5).unwrap().map(|v| v + 0.5),
        )
    }

    #[test]
    fn weight_decay_examples() {
        let mut p = ParamSet::<f64>::new();
        let s = Shape4::new(1, 1, 1, 1).unwrap();
        p.insert("a.conv.weight", ParamKind::ConvWeight, Tensor::new(s, 2.0)).unwrap();
        p.insert("a.conv.bias", ParamKind::ConvBias, Tensor::new(s, 3.0)).unwrap();
        let (r, g) = weight_decay(&p);
        assert_eq!(r, 2.0);
        assert_eq!(g.get("a.conv.weight").unwrap().data(), &[2.0]);
        assert_eq!(g.get("a.conv.bias").unwrap().data(), &[0.0]);
        *p.get_mut("a.conv.bias").unwrap() = Tensor::new(s, -9.0);
        assert_eq!(weight_decay(&p).0, 2.0);
        assert_eq!(weight_decay(&ParamSet::<f64>::new()).0, 0.0);
    }

    #[test]
    fn zero_lambdas_give_zero_total_and_grads() {
        let (p, t) = pair(1);
        let (_, params) = build_model::<f64>(Topology::default().with_widths(&[2], 2), &mut RngStream::new(1)).unwrap();
        let lam = LossWeights { l2: 0.0, ssim: 0.0, tv: 0.0, wd: 0.0 };
        let r = joint_loss(&[p], &[t], &params, &lam, &SsimConfig::default(), 1e-8, None).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.grads[0].max_abs_f64(), 0.0);
    }

    #[test]
    fn perfect_prediction_with_zero_params_costs_nothing() {
        let (p, _) = pair(2);
        let c = Tensor::new(p.shape(), 0.4);
        let r = joint_loss(&[c.clone()], &[c], &ParamSet::new(), &LossWeights::default(), &SsimConfig::default(), 0.0, None).unwrap();
        assert_eq!(r.total, 0.0);
        let _ = p;
    }

    #[test]
    fn total_recomposes_from_terms() {
        let (p, t) = pair(3);
        let (_, params) = build_model::<f64>(Topology::default().with_widths(&[2], 2), &mut RngStream::new(4)).unwrap();
        let lam = LossWeights::default();
        let maps = [super::super::edge_weight_map(&t, 4.0).unwrap()];
        let r = joint_loss(&[p], &[t], &params, &lam, &SsimConfig::default(), 1e-8, Some(&maps)).unwrap();
        let recomposed = 10.0 * r.l2 + 5.0 * r.ssim + 0.5 * r.tv + 1e-4 * r.wd;
        assert!((r.total - recomposed).abs() <= 1e-12);
        assert!(r.l2 > 0.0 && r.ssim > 0.0 && r.tv > 0.0 && r.wd > 0.0);
    }

    #[test]
    fn kinds_parse_and_mask_terms() {
        assert_eq!("weighted-l2".parse::<LossKind>().unwrap(), LossKind::WeightedL2);
        assert!("huber".parse::<LossKind>().is_err());
        let e = LossWeights::default().effective(LossKind::L2);
        assert_eq!((e.l2, e.ssim, e.tv, e.wd), (10.0, 0.0, 0.0, 1e-4));
    }
}
