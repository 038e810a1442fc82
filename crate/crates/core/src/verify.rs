//! Independent oracles and the finite-difference gradient-check harness.
//!
//! Nothing here shares a core loop with the fast paths it checks.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, linear_activation,
    linear_backward, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward,
    unpool2x2_backward, unpool2x2_forward, BatchNormParams, ConvGrads, ConvParams, ConvTape, Mode,
};
use crate::loss::{edge_weight_map, l2_loss, ssim_loss, tv_loss, weight_decay, SsimConfig, SsimMode};
use crate::model::{build_model, ParamSet, Topology, TopologyKind};
use crate::rng::RngStream;
use crate::tensor::{Shape4, Tensor};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(1e-12, ‖a‖ + ‖b‖)` over whole gradient vectors.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_error operands differ in length");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Direct five-loop cross-correlation with explicit zero padding.
pub fn conv_oracle(x: &Tensor<f64>, p: ConvParams<'_, f64>) -> Result<Tensor<f64>> {
    let s = x.shape();
    let ws = p.weight.shape();
    if s.c != ws.c {
        return Err(Error::Shape(format!("conv oracle: {} input channels vs kernel {}", s.c, ws.c)));
    }
    let k = ws.h as isize;
    let pad = k / 2;
    let mut out = Tensor::zeros(s.with_c(ws.n));
    for n in 0..s.n {
        for o in 0..ws.n {
            for y in 0..s.h as isize {
                for xx in 0..s.w as isize {
                    let mut acc = p.bias.data()[o];
                    for i in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
                                    continue;
                                }
                                acc += x.at(n, i, sy as usize, sx as usize)
                                    * p.weight.at(o, i, ky as usize, kx as usize);
                            }
                        }
                    }
                    out.set(n, o, y as usize, xx as usize, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Exhaustive 2×2 window scan: (window maxima, first-max offsets).
pub fn maxpool_oracle(x: &Tensor<f64>) -> (Tensor<f64>, Vec<u8>) {
    let s = x.shape();
    let ps = s.with_hw(s.h / 2, s.w / 2);
    let mut vals = Tensor::zeros(ps);
    let mut offs = Vec::with_capacity(ps.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..ps.h {
                for xx in 0..ps.w {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0u8;
                    for off in 0..4u8 {
                        let v = x.at(n, c, 2 * y + off as usize / 2, 2 * xx + off as usize % 2);
                        if v > best {
                            best = v;
                            arg = off;
                        }
                    }
                    vals.set(n, c, y, xx, best);
                    offs.push(arg);
                }
            }
        }
    }
    (vals, offs)
}

/// Standard three-factor SSIM by brute force: every valid window position,
/// Gaussian weights evaluated in a 2-D double loop. Mean over all planes and positions.
pub fn ssim_window_oracle(a: &Tensor<f64>, b: &Tensor<f64>, window: usize, sigma: f64, range: f64) -> f64 {
    let s = a.shape();
    let r = (window / 2) as f64;
    let mut kernel = vec![vec![0.0; window]; window];
    let mut ksum = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            ksum += *v;
        }
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            for y0 in 0..=s.h - window {
                for x0 in 0..=s.w - window {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..window {
                        for j in 0..window {
                            let wgt = kernel[i][j] / ksum;
                            let u = a.at(n, c, y0 + i, x0 + j);
                            let v = b.at(n, c, y0 + i, x0 + j);
                            mx += wgt * u;
                            my += wgt * v;
                            xx += wgt * u * u;
                            yy += wgt * v * v;
                            xy += wgt * u * v;
                        }
                    }
                    let vx = xx - mx * mx;
                    let vy = yy - my * my;
                    let cov = xy - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

/// Central differences `(f(x + h·e) − f(x − h·e)) / 2h` for every element of `x`.
pub fn finite_diff<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Param(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!("non-finite objective while differencing element {i}")));
        }
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: Option<String>,
}

impl CheckEntry {
    fn new(name: &str, rel_error: f64, tolerance: f64) -> Self {
        CheckEntry {
            name: name.to_string(),
            rel_error,
            tolerance,
            passed: rel_error.is_finite() && rel_error <= tolerance,
            detail: None,
        }
    }

    fn failed(name: &str, tolerance: f64, err: Error) -> Self {
        CheckEntry {
            name: name.to_string(),
            rel_error: f64::NAN,
            tolerance,
            passed: false,
            detail: Some(err.to_string()),
        }
    }

    fn from_result(name: &str, tolerance: f64, r: Result<f64>) -> Self {
        match r {
            Ok(e) => CheckEntry::new(name, e, tolerance),
            Err(err) => CheckEntry::failed(name, tolerance, err),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            write!(
                f,
                "{:<4} {:<24} rel_err={:.3e} tol={:.0e}",
                if e.passed { "PASS" } else { "FAIL" },
                e.name,
                e.rel_error,
                e.tolerance
            )?;
            if let Some(d) = &e.detail {
                write!(f, " ({d})")?;
            }
            writeln!(f)?;
        }
        let n_pass = self.entries.iter().filter(|e| e.passed).count();
        write!(f, "{n_pass}/{} checks passed", self.entries.len())
    }
}

pub const LAYER_TOL: f64 = 1e-6;
pub const RELU_TOL: f64 = 1e-7;
pub const UNPOOL_TOL: f64 = 1e-7;
pub const L2_TOL: f64 = 1e-7;
pub const SSIM_TOL: f64 = 1e-5;
pub const TV_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-5;

/// Signature of a convolution backward pass, so the harness can be pointed at a faulty one.
pub type ConvBackwardFn = dyn Fn(&ConvTape<f64>, &Tensor<f64>) -> Result<(Tensor<f64>, ConvGrads<f64>)>;

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).expect("static check shapes are valid")
}

fn flat(parts: &[&Tensor<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn positive_image(s: Shape4, rng: &mut RngStream) -> Result<Tensor<f64>> {
    Ok(Tensor::random(s, rng, 0.45)?.map(|v| v + 0.5))
}

/// Rejection-samples until every element is at least `margin` away from 0.
fn away_from_zero(s: Shape4, rng: &mut RngStream, margin: f64) -> Result<Tensor<f64>> {
    let data = (0..s.len())
        .map(|_| loop {
            let v = rng.uniform(-1.0, 1.0);
            if v.abs() > margin {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(s, data)
}

/// Conv backward check for a 3×3 or 1×1 kernel against an arbitrary backward implementation.
pub fn check_conv_backward(name: &str, seed: u64, kernel: usize, backward: &ConvBackwardFn) -> CheckEntry {
    let run = || -> Result<f64> {
        let mut rng = RngStream::new(seed);
        let x = Tensor::random(shape(2, 3, 5, 6), &mut rng, 1.0)?;
        let w = Tensor::random(shape(4, 3, kernel, kernel), &mut rng, 1.0)?;
        let b = Tensor::random(shape(1, 4, 1, 1), &mut rng, 1.0)?;
        let cot = Tensor::random(shape(2, 4, 5, 6), &mut rng, 1.0)?;
        let probe = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
            let (y, _) = conv2d_forward(x, ConvParams::new(w, b)?)?;
            y.dot_f64(&cot)
        };
        let (_, tape) = conv2d_forward(&x, ConvParams::new(&w, &b)?)?;
        let (gx, g) = backward(&tape, &cot)?;
        let fx = finite_diff(|x| probe(x, &w, &b), &x, DEFAULT_FD_STEP)?;
        let fw = finite_diff(|w| probe(&x, w, &b), &w, DEFAULT_FD_STEP)?;
        let fb = finite_diff(|b| probe(&x, &w, b), &b, DEFAULT_FD_STEP)?;
        Ok(rel_error(&flat(&[&gx, &g.weight, &g.bias]), &flat(&[&fx, &fw, &fb])))
    };
    CheckEntry::from_result(name, LAYER_TOL, run())
}

fn check_batchnorm(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let s = shape(3, 2, 3, 4);
    let x = Tensor::random(s, &mut rng, 1.0)?;
    let cs = shape(1, 2, 1, 1);
    let gamma = Tensor::random(cs, &mut rng, 1.0)?.map(|v| v + 1.5);
    let beta = Tensor::random(cs, &mut rng, 1.0)?;
    let (rm, rv) = (Tensor::zeros(cs), Tensor::new(cs, 1.0));
    let cot = Tensor::random(s, &mut rng, 1.0)?;
    let probe = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| -> Result<f64> {
        let p = BatchNormParams {
            gamma: g,
            beta: b,
            running_mean: &rm,
            running_var: &rv,
            eps: 1e-5,
            stat_momentum: 0.9,
        };
        batchnorm_forward(x, p, Mode::Train)?.0.dot_f64(&cot)
    };
    let p = BatchNormParams {
        gamma: &gamma,
        beta: &beta,
        running_mean: &rm,
        running_var: &rv,
        eps: 1e-5,
        stat_momentum: 0.9,
    };
    let (_, tape) = batchnorm_forward(&x, p, Mode::Train)?;
    let (gx, g) = batchnorm_backward(&tape, &cot)?;
    let fx = finite_diff(|x| probe(x, &gamma, &beta), &x, DEFAULT_FD_STEP)?;
    let fg = finite_diff(|g| probe(&x, g, &beta), &gamma, DEFAULT_FD_STEP)?;
    let fb = finite_diff(|b| probe(&x, &gamma, b), &beta, DEFAULT_FD_STEP)?;
    Ok(rel_error(&flat(&[&gx, &g.gamma, &g.beta]), &flat(&[&fx, &fg, &fb])))
}

fn check_relu(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let s = shape(2, 2, 4, 4);
    let x = away_from_zero(s, &mut rng, 0.1)?;
    let cot = Tensor::random(s, &mut rng, 1.0)?;
    let (_, tape) = relu_forward(&x);
    let g = relu_backward(&tape, &cot)?;
    let fd = finite_diff(|x| relu_forward(x).0.dot_f64(&cot), &x, DEFAULT_FD_STEP)?;
    Ok(rel_error(g.data(), fd.data()))
}

fn check_maxpool(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let s = shape(2, 2, 4, 6);
    // distinct values on a coarse grid keep every window's top two well apart
    let perm = rng.permutation(s.len());
    let x = Tensor::from_vec(s, perm.iter().map(|&i| i as f64 * 0.01 - 0.2).collect())?;
    let (v, _, tape) = maxpool2x2_forward(&x)?;
    let cot = Tensor::random(v.shape(), &mut rng, 1.0)?;
    let g = maxpool2x2_backward(&tape, &cot)?;
    let fd = finite_diff(|x| maxpool2x2_forward(x)?.0.dot_f64(&cot), &x, DEFAULT_FD_STEP)?;
    Ok(rel_error(g.data(), fd.data()))
}

fn check_unpool(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let x = Tensor::random(shape(2, 2, 4, 4), &mut rng, 1.0)?;
    let (v, idx, _) = maxpool2x2_forward(&x)?;
    let (u, tape) = unpool2x2_forward(&v, &idx)?;
    let cot = Tensor::random(u.shape(), &mut rng, 1.0)?;
    let g = unpool2x2_backward(&tape, &cot)?;
    let fd = finite_diff(|v| unpool2x2_forward(v, &idx)?.0.dot_f64(&cot), &v, DEFAULT_FD_STEP)?;
    Ok(rel_error(g.data(), fd.data()))
}

fn check_linear(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let x = Tensor::random(shape(1, 2, 3, 3), &mut rng, 1.0)?;
    let cot = Tensor::random(x.shape(), &mut rng, 1.0)?;
    let g = linear_backward(cot.clone());
    let fd = finite_diff(|x| linear_activation(x.clone()).dot_f64(&cot), &x, DEFAULT_FD_STEP)?;
    Ok(rel_error(g.data(), fd.data()))
}

fn check_l2(seed: u64, weighted: bool) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let s = shape(2, 1, 6, 6);
    let pred = positive_image(s, &mut rng)?;
    let target = positive_image(s, &mut rng)?;
    let map = if weighted { Some(edge_weight_map(&target, 4.0)?) } else { None };
    let (_, g) = l2_loss(&pred, &target, map.as_ref())?;
    let fd = finite_diff(|p| Ok(l2_loss(p, &target, map.as_ref())?.0), &pred, DEFAULT_FD_STEP)?;
    Ok(rel_error(g.data(), fd.data()))
}

fn check_ssim(seed: u64, mode: SsimMode, weighted: bool) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let s = shape(2, 1, 9, 10);
    let pred = positive_image(s, &mut rng)?;
    let target = positive_image(s, &mut rng)?;
    let cfg = SsimConfig::for_range(mode, 5, 1.0);
    let map = if weighted { Some(edge_weight_map(&target, 4.0)?) } else { None };
    let (_, g) = ssim_loss(&pred, &target, &cfg, map.as_ref())?;
    let fd = finite_diff(|p| Ok(ssim_loss(p, &target, &cfg, map.as_ref())?.0), &pred, DEFAULT_FD_STEP)?;
    Ok(rel_error(g.data(), fd.data()))
}

fn check_tv(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let s = shape(2, 1, 6, 7);
    // resample until every forward difference is at least 0.05 in magnitude
    let pred = loop {
        let cand = positive_image(s, &mut rng)?;
        let ok = (0..s.n).all(|n| {
            let x = cand.plane(n, 0);
            (0..s.h - 1).all(|i| {
                (0..s.w - 1).all(|j| {
                    let here = x[i * s.w + j];
                    (x[(i + 1) * s.w + j] - here).abs() > 0.05 && (x[i * s.w + j + 1] - here).abs() > 0.05
                })
            })
        });
        if ok {
            break cand;
        }
    };
    let (_, g) = tv_loss(&pred, 1e-8)?;
    let fd = finite_diff(|p| Ok(tv_loss(p, 1e-8)?.0), &pred, DEFAULT_FD_STEP)?;
    Ok(rel_error(g.data(), fd.data()))
}

fn check_weight_decay(seed: u64) -> Result<f64> {
    let t = Topology::default().with_widths(&[2], 2);
    let (_, params) = build_model::<f64>(t, &mut RngStream::new(seed))?;
    let (_, g) = weight_decay(&params);
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for (name, p) in params.iter() {
        if !p.kind.is_learnable() {
            continue;
        }
        an.extend_from_slice(g.get(name)?.data());
        let d = finite_diff(
            |v| {
                let mut q = params.clone();
                q.replace(name, v.clone())?;
                Ok(weight_decay(&q).0)
            },
            &p.tensor,
            DEFAULT_FD_STEP,
        )?;
        fd.extend_from_slice(d.data());
    }
    Ok(rel_error(&an, &fd))
}

/// Whole-graph check: analytic parameter gradients of `Σ <pred_k, cot_k>`
/// against central differences over every learnable scalar.
pub fn check_model(kind: TopologyKind, seed: u64) -> Result<f64> {
    let widths: &[usize] = if kind == TopologyKind::Siso { &[4] } else { &[3] };
    let topo = Topology::new(kind).with_widths(widths, widths[0]);
    let mut rng = RngStream::new(seed);
    let (model, params) = build_model::<f64>(topo.clone(), &mut rng)?;
    let inputs: Vec<Tensor<f64>> = (0..topo.in_arms())
        .map(|_| Tensor::random(shape(2, 1, 8, 8), &mut rng, 1.0))
        .collect::<Result<_>>()?;
    let cots: Vec<Tensor<f64>> = (0..topo.out_arms())
        .map(|_| Tensor::random(shape(2, 1, 8, 8), &mut rng, 1.0))
        .collect::<Result<_>>()?;
    let probe = |p: &ParamSet<f64>| -> Result<f64> {
        let (preds, _) = model.forward(p, &inputs, Mode::Train)?;
        let mut s = 0.0;
        for (y, c) in preds.iter().zip(&cots) {
            s += y.dot_f64(c)?;
        }
        Ok(s)
    };
    let (_, mut trace) = model.forward(&params, &inputs, Mode::Train)?;
    let grads = model.backward(&params, &mut trace, &cots)?;
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for (name, p) in params.iter() {
        if !p.kind.is_learnable() {
            continue;
        }
        an.extend_from_slice(grads.get(name)?.data());
        let mut q = params.clone();
        let d = finite_diff(
            |v| {
                *q.get_mut(name)? = v.clone();
                probe(&q)
            },
            &p.tensor,
            DEFAULT_FD_STEP,
        )?;
        fd.extend_from_slice(d.data());
    }
    Ok(rel_error(&an, &fd))
}

/// Runs every layer, loss and whole-model check with the given conv backward.
pub fn gradcheck_suite_with(seed: u64, conv_backward: &ConvBackwardFn) -> GradcheckReport {
    let mut entries = vec![
        check_conv_backward("conv3x3", seed, 3, conv_backward),
        check_conv_backward("conv1x1", seed.wrapping_add(1), 1, conv_backward),
        CheckEntry::from_result("batchnorm", LAYER_TOL, check_batchnorm(seed.wrapping_add(2))),
        CheckEntry::from_result("relu", RELU_TOL, check_relu(seed.wrapping_add(3))),
        CheckEntry::from_result("maxpool2x2", LAYER_TOL, check_maxpool(seed.wrapping_add(4))),
        CheckEntry::from_result("unpool2x2", UNPOOL_TOL, check_unpool(seed.wrapping_add(5))),
        CheckEntry::from_result("linear", LAYER_TOL, check_linear(seed.wrapping_add(6))),
        CheckEntry::from_result("l2", L2_TOL, check_l2(seed.wrapping_add(7), false)),
        CheckEntry::from_result("weighted_l2", L2_TOL, check_l2(seed.wrapping_add(8), true)),
        CheckEntry::from_result("ssim_local", SSIM_TOL, check_ssim(seed.wrapping_add(9), SsimMode::Local, false)),
        CheckEntry::from_result("ssim_global", SSIM_TOL, check_ssim(seed.wrapping_add(10), SsimMode::Global, false)),
        CheckEntry::from_result(
            "weighted_ssim_local",
            SSIM_TOL,
            check_ssim(seed.wrapping_add(11), SsimMode::Local, true),
        ),
        CheckEntry::from_result(
            "weighted_ssim_global",
            SSIM_TOL,
            check_ssim(seed.wrapping_add(12), SsimMode::Global, true),
        ),
        CheckEntry::from_result("tv", TV_TOL, check_tv(seed.wrapping_add(13))),
        CheckEntry::from_result("weight_decay", L2_TOL, check_weight_decay(seed.wrapping_add(14))),
    ];
    for (i, kind) in [TopologyKind::Siso, TopologyKind::Miso, TopologyKind::Mimo].into_iter().enumerate() {
        entries.push(CheckEntry::from_result(
            &format!("model_{kind}"),
            MODEL_TOL,
            check_model(kind, seed.wrapping_add(15 + i as u64)),
        ));
    }
    GradcheckReport { entries }
}

/// The full suite against the real layer implementations.
pub fn gradcheck_suite(seed: u64) -> GradcheckReport {
    gradcheck_suite_with(seed, &|tape, g| conv2d_backward(tape, g))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_sum_and_half_square() {
        let x = Tensor::random(shape(1, 2, 3, 3), &mut RngStream::new(1), 1.0).unwrap();
        let g = finite_diff(|t| Ok(t.sum_f64()), &x, DEFAULT_FD_STEP).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let g = finite_diff(|t| Ok(0.5 * t.dot_f64(t)?), &x, DEFAULT_FD_STEP).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(finite_diff(|_| Ok(f64::NAN), &x, 1e-5).is_err());
        assert!(finite_diff(|t| Ok(t.sum_f64()), &x, 0.0).is_err());
    }

    #[test]
    fn oracle_matches_hand_counts() {
        let x = Tensor::new(shape(1, 1, 3, 3), 1.0);
        let w = Tensor::new(shape(1, 1, 3, 3), 1.0);
        let b = Tensor::new(shape(1, 1, 1, 1), 0.0);
        let y = conv_oracle(&x, ConvParams::new(&w, &b).unwrap()).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        let id = Tensor::new(shape(1, 1, 1, 1), 1.0);
        let xr = Tensor::random(shape(1, 1, 4, 4), &mut RngStream::new(3), 1.0).unwrap();
        assert!(conv_oracle(&xr, ConvParams::new(&id, &b).unwrap()).unwrap().bit_eq(&xr));
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        assert!(check_l2(5, false).unwrap() <= 1e-7);
    }

    #[test]
    fn rel_error_is_scale_free() {
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e1 = rel_error(&[1.0, 2.0], &[1.1, 2.0]);
        let e2 = rel_error(&[10.0, 20.0], &[11.0, 20.0]);
        assert!((e1 - e2).abs() < 1e-15);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn full_suite_passes() {
        let r = gradcheck_suite(7);
        println!("{r}");
        assert!(r.entries.len() >= 12);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn suite_catches_a_faulty_conv_backward() {
        let bad = |tape: &ConvTape<f64>, g: &Tensor<f64>| {
            let (gx, mut gr) = conv2d_backward(tape, g)?;
            gr.weight.data_mut()[0] += 1e-2;
            Ok((gx, gr))
        };
        let r = gradcheck_suite_with(7, &bad);
        assert!(!r.entry("conv3x3").unwrap().passed);
        assert!(!r.passed());
    }
}
