use super::Mode;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

/// Borrowed per-channel batch-norm state; every tensor is (1, c, 1, 1).
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams<'a, T: Scalar> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    pub eps: f64,
    /// Weight kept on the old running value at each update.
    pub stat_momentum: f64,
}

impl<T: Scalar> BatchNormParams<'_, T> {
    fn validate(&self, c: usize) -> Result<()> {
        for (name, t) in [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ] {
            let s = t.shape();
            if s.n != 1 || s.c != c || s.h != 1 || s.w != 1 {
                return Err(shape_err!("batchnorm {name} has shape {s}, expected (1, {c}, 1, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Param(format!("batchnorm eps must be positive, got {}", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.stat_momentum) {
            return Err(Error::Param(format!(
                "batchnorm momentum must lie in [0, 1], got {}",
                self.stat_momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormTape<T: Scalar> {
    shape: Shape4,
    train: Option<TrainStats<T>>,
}

#[derive(Debug, Clone)]
struct TrainStats<T: Scalar> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormTape<T> {
    /// Updated `(running_mean, running_var)` produced by a train-mode forward.
    pub fn running_update(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.train
            .as_ref()
            .map(|s| (&s.running_mean, &s.running_var))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Per-channel normalization over (n, h, w).
///
/// Train mode uses the biased batch variance and reports the updated running
/// statistics through the tape; the passed-in parameters are never mutated.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    p: BatchNormParams<'_, T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormTape<T>)> {
    let s = x.shape();
    p.validate(s.c)?;
    let plane = s.plane();
    let gamma: Vec<f64> = p.gamma.to_f64_vec();
    let beta: Vec<f64> = p.beta.to_f64_vec();
    let mut y = Tensor::zeros(s);

    match mode {
        Mode::Infer => {
            let mean = p.running_mean.to_f64_vec();
            let var = p.running_var.to_f64_vec();
            for c in 0..s.c {
                let inv = 1.0 / (var[c].max(0.0) + p.eps).sqrt();
                let (scale, shift) = (gamma[c] * inv, beta[c] - gamma[c] * inv * mean[c]);
                for n in 0..s.n {
                    let src = x.plane(n, c);
                    for (d, &v) in y.plane_mut(n, c).iter_mut().zip(src) {
                        *d = T::of_f64(scale * v.as_f64() + shift);
                    }
                }
            }
            Ok((y, BatchNormTape { shape: s, train: None }))
        }
        Mode::Train => {
            let m = s.n * plane;
            if m < 2 {
                return Err(Error::DegenerateStats(format!(
                    "train-mode batchnorm needs at least 2 values per channel, shape {s}"
                )));
            }
            let mut xhat = Tensor::zeros(s);
            let mut inv_std = vec![0.0; s.c];
            let mut batch_mean = vec![0.0; s.c];
            let mut batch_var = vec![0.0; s.c];
            for c in 0..s.c {
                let mut sum = 0.0;
                for n in 0..s.n {
                    sum += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for n in 0..s.n {
                    sq += x
                        .plane(n, c)
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / m as f64;
                let inv = 1.0 / (var + p.eps).sqrt();
                for n in 0..s.n {
                    let src = x.plane(n, c);
                    let dst_hat = xhat.plane_mut(n, c);
                    for (h, &v) in dst_hat.iter_mut().zip(src) {
                        *h = T::of_f64((v.as_f64() - mean) * inv);
                    }
                    let dst_hat = xhat.plane(n, c);
                    for (d, &h) in y.plane_mut(n, c).iter_mut().zip(dst_hat) {
                        *d = T::of_f64(gamma[c] * h.as_f64() + beta[c]);
                    }
                }
                inv_std[c] = inv;
                batch_mean[c] = mean;
                batch_var[c] = var;
            }
            let mom = p.stat_momentum;
            let blend = |old: &Tensor<T>, batch: &[f64]| -> Result<Tensor<T>> {
                Tensor::from_vec(
                    old.shape(),
                    old.data()
                        .iter()
                        .zip(batch)
                        .map(|(o, b)| T::of_f64(mom * o.as_f64() + (1.0 - mom) * b))
                        .collect(),
                )
            };
            let running_mean = blend(p.running_mean, &batch_mean)?;
            let running_var = blend(p.running_var, &batch_var)?;
            let tape = BatchNormTape {
                shape: s,
                train: Some(TrainStats {
                    xhat,
                    inv_std,
                    gamma,
                    running_mean,
                    running_var,
                }),
            };
            Ok((y, tape))
        }
    }
}

/// Full batch-norm backward, including the paths through the batch mean and variance.
pub fn batchnorm_backward<T: Scalar>(
    tape: &BatchNormTape<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormGrads<T>)> {
    let st = tape.train.as_ref().ok_or_else(|| {
        Error::Usage("batchnorm backward requires a train-mode tape".into())
    })?;
    let s = tape.shape;
    if grad_out.shape() != s {
        return Err(shape_err!(
            "batchnorm backward: grad shape {} does not match {s}",
            grad_out.shape()
        ));
    }
    let m = (s.n * s.plane()) as f64;
    let mut grad_in = Tensor::zeros(s);
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for c in 0..s.c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for n in 0..s.n {
            for (g, h) in grad_out.plane(n, c).iter().zip(st.xhat.plane(n, c)) {
                let g = g.as_f64();
                sum_dy += g;
                sum_dy_xhat += g * h.as_f64();
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = st.gamma[c] * st.inv_std[c] / m;
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let h = st.xhat.plane(n, c);
            let dst = grad_in.plane_mut(n, c);
            for i in 0..dst.len() {
                let v = k * (m * g[i].as_f64() - sum_dy - h[i].as_f64() * sum_dy_xhat);
                dst[i] = T::of_f64(v);
            }
        }
    }
    let cs = Shape4::new(1, s.c, 1, 1)?;
    let to_t = |v: Vec<f64>| Tensor::from_vec(cs, v.into_iter().map(T::of_f64).collect());
    Ok((
        grad_in,
        BatchNormGrads {
            gamma: to_t(dgamma)?,
            beta: to_t(dbeta)?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    struct Owned {
        gamma: Tensor<f64>,
        beta: Tensor<f64>,
        mean: Tensor<f64>,
        var: Tensor<f64>,
    }

    impl Owned {
        fn new(c: usize, gamma: f64, beta: f64) -> Self {
            let s = Shape4::new(1, c, 1, 1).unwrap();
            Owned {
                gamma: Tensor::new(s, gamma),
                beta: Tensor::new(s, beta),
                mean: Tensor::new(s, 0.0),
                var: Tensor::new(s, 1.0),
            }
        }

        fn params(&self) -> BatchNormParams<'_, f64> {
            BatchNormParams {
                gamma: &self.gamma,
                beta: &self.beta,
                running_mean: &self.mean,
                running_var: &self.var,
                eps: DEFAULT_BN_EPS,
                stat_momentum: DEFAULT_BN_MOMENTUM,
            }
        }
    }

    #[test]
    fn two_values_normalize_to_plus_minus_one() {
        let p = Owned::new(1, 1.0, 0.0);
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 2).unwrap(), vec![1.0, 3.0]).unwrap();
        let (y, tape) = batchnorm_forward(&x, p.params(), Mode::Train).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15);
        assert!((y.data()[1] - expect).abs() < 1e-15);
        let (rm, rv) = tape.running_update().unwrap();
        // 0.9 * 0 + 0.1 * 2, 0.9 * 1 + 0.1 * 1
        assert!((rm.data()[0] - 0.2).abs() < 1e-15);
        assert!((rv.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gamma_outputs_beta_and_constant_input_centers() {
        let x = Tensor::<f64>::random(Shape4::new(2, 2, 3, 3).unwrap(), &mut RngStream::new(5), 1.0)
            .unwrap();
        let p = Owned::new(2, 0.0, 0.75);
        let (y, _) = batchnorm_forward(&x, p.params(), Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));

        let c = Tensor::new(Shape4::new(2, 1, 3, 3).unwrap(), 4.2);
        let p = Owned::new(1, 1.0, 0.0);
        let (y, _) = batchnorm_forward(&c, p.params(), Mode::Train).unwrap();
        assert!(y.max_abs_f64() < 1e-9);
    }

    #[test]
    fn single_value_per_channel_is_degenerate() {
        let x = Tensor::new(Shape4::new(1, 1, 1, 1).unwrap(), 1.0);
        let p = Owned::new(1, 1.0, 0.0);
        assert!(matches!(
            batchnorm_forward(&x, p.params(), Mode::Train),
            Err(Error::DegenerateStats(_))
        ));
        // infer mode has no such restriction
        assert!(batchnorm_forward(&x, p.params(), Mode::Infer).is_ok());
    }

    #[test]
    fn infer_tape_cannot_be_backpropagated() {
        let x = Tensor::new(Shape4::new(1, 1, 2, 2).unwrap(), 1.0);
        let p = Owned::new(1, 1.0, 0.0);
        let (y, tape) = batchnorm_forward(&x, p.params(), Mode::Infer).unwrap();
        assert!(tape.running_update().is_none());
        assert!(matches!(batchnorm_backward(&tape, &y), Err(Error::Usage(_))));
    }

    #[test]
    fn beta_grad_is_channel_sum_and_uniform_grad_vanishes() {
        let s = Shape4::new(2, 3, 2, 2).unwrap();
        let mut rng = RngStream::new(8);
        let x = Tensor::<f64>::random(s, &mut rng, 1.0).unwrap();
        let p = Owned::new(3, 1.5, 0.1);
        let (_, tape) = batchnorm_forward(&x, p.params(), Mode::Train).unwrap();
        let g = Tensor::<f64>::random(s, &mut rng, 1.0).unwrap();
        let (_, grads) = batchnorm_backward(&tape, &g).unwrap();
        for c in 0..3 {
            let want: f64 = (0..2).map(|n| g.plane(n, c).iter().sum::<f64>()).sum();
            assert!((grads.beta.data()[c] - want).abs() < 1e-12);
        }
        // A constant upstream gradient only shifts the mean, which normalization removes.
        let (gi, _) = batchnorm_backward(&tape, &Tensor::new(s, 0.3)).unwrap();
        assert!(gi.max_abs_f64() < 1e-12);
    }

    #[test]
    fn infer_mode_is_independent_of_batch_composition() {
        let s = Shape4::new(3, 2, 2, 2).unwrap();
        let x = Tensor::<f64>::random(s, &mut RngStream::new(12), 1.0).unwrap();
        let mut p = Owned::new(2, 1.3, -0.2);
        p.mean = Tensor::from_vec(Shape4::new(1, 2, 1, 1).unwrap(), vec![0.1, -0.3]).unwrap();
        p.var = Tensor::from_vec(Shape4::new(1, 2, 1, 1).unwrap(), vec![0.5, 2.0]).unwrap();
        let (full, _) = batchnorm_forward(&x, p.params(), Mode::Infer).unwrap();
        for n in 0..3 {
            let one = x.slice_batch(n..n + 1).unwrap();
            let (y, _) = batchnorm_forward(&one, p.params(), Mode::Infer).unwrap();
            assert!(y.bit_eq(&full.slice_batch(n..n + 1).unwrap()));
        }
    }
}
