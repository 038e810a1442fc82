//! Momentum SGD and the training loop, plus padded inference and evaluation.

use crate::data::{batches, crop_back, pad_to_multiple, BatchOptions, Modality, PhantomSample};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{edge_weight_map, joint_loss, LossKind, LossWeights, SsimConfig, WeightMap, DEFAULT_EDGE_BETA, DEFAULT_TV_EPS};
use crate::metrics::{psnr, ssim_standard, StandardSsim};
use crate::model::{ParamSet, SynNetModel};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Velocity per learnable parameter plus the step and epoch counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub velocity: ParamSet<T>,
    /// Completed SGD steps.
    pub iteration: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub lr: f64,
    pub momentum: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Param(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Param(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(OptimState { velocity: params.zeros_like_learnable(), iteration: 0, epoch: 0, lr, momentum })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.velocity.bit_eq(&other.velocity)
            && self.iteration == other.iteration
            && self.epoch == other.epoch
            && self.lr.to_bits() == other.lr.to_bits()
            && self.momentum.to_bits() == other.momentum.to_bits()
    }
}

/// `η ← ρ·η + γ·g`, then `Θ ← Θ − η`, for every learnable entry.
///
/// `grads` must have exactly the velocity's layout and already contain any
/// weight-decay contribution.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, grads: &ParamSet<T>, state: &mut OptimState<T>) -> Result<()> {
    if !grads.same_layout(&state.velocity) {
        return Err(Error::Usage("gradient set does not match the optimizer's parameter layout".into()));
    }
    let rho = T::of_f64(state.momentum);
    let gamma = T::of_f64(state.lr);
    for ((name, v), (_, g)) in state.velocity.iter_mut().zip(grads.iter()) {
        v.tensor.scale(rho);
        v.tensor.axpy(gamma, &g.tensor)?;
        params.get_mut(name)?.axpy(-T::one(), &v.tensor)?;
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub inputs: Vec<Modality>,
    pub targets: Vec<Modality>,
    pub batch_size: usize,
    /// Total epochs; a resumed run continues up to this count.
    pub epochs: u64,
    pub seed: u64,
    pub loss: LossKind,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub edge_beta: f64,
    pub tv_eps: f64,
    pub lr: f64,
    pub momentum: f64,
    pub shuffle: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inputs: vec![Modality::T1],
            targets: vec![Modality::T2],
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 10,
            seed: 42,
            loss: LossKind::Joint,
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            edge_beta: DEFAULT_EDGE_BETA,
            tv_eps: DEFAULT_TV_EPS,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            shuffle: true,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be >= 1".into()));
        }
        if self.inputs.is_empty() || self.targets.is_empty() {
            return Err(Error::Param("input and output modality lists must be nonempty".into()));
        }
        if !(self.edge_beta >= 0.0 && self.tv_eps >= 0.0) {
            return Err(Error::Param("edge_beta and tv_eps must be >= 0".into()));
        }
        self.weights.validate()
    }

    /// Seed of the batch order and augmentation draws for one epoch.
    pub fn epoch_seed(&self, epoch: u64) -> u64 {
        RngStream::derive(self.seed, &[0x4550_4f43, epoch]).next_u64()
    }

    fn check_model(&self, model: &SynNetModel) -> Result<()> {
        let t = model.topology();
        if self.inputs.len() != t.in_arms() || self.targets.len() != t.out_arms() {
            return Err(Error::Usage(format!(
                "{} topology needs {} input and {} output modalities, config has {} and {}",
                t.kind,
                t.in_arms(),
                t.out_arms(),
                self.inputs.len(),
                self.targets.len()
            )));
        }
        Ok(())
    }
}

/// One history row per SGD step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    /// 1-based step number.
    pub iteration: u64,
    /// 0-based epoch.
    pub epoch: u64,
    pub l2: f64,
    pub ssim: f64,
    pub tv: f64,
    pub wd: f64,
    pub total: f64,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str = "iter,epoch,l2,ssim,tv,wd,total";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.iteration, self.epoch, self.l2, self.ssim, self.tv, self.wd, self.total
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HistoryRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

fn pad_all<T: Scalar>(ts: &[Tensor<T>], factor: usize) -> Result<(Vec<Tensor<T>>, crate::data::CropRecord)> {
    let mut rec = None;
    let mut out = Vec::with_capacity(ts.len());
    for t in ts {
        let (p, r) = pad_to_multiple(t, factor)?;
        rec = Some(r);
        out.push(p);
    }
    Ok((out, rec.ok_or_else(|| Error::Usage("no tensors to pad".into()))?))
}

/// One forward/backward/update step on a prepared batch. Returns the loss terms.
pub fn train_step<T: Scalar>(
    model: &SynNetModel,
    params: &mut ParamSet<T>,
    state: &mut OptimState<T>,
    inputs: &[Tensor<T>],
    targets: &[Tensor<T>],
    cfg: &TrainConfig,
) -> Result<HistoryRow> {
    let factor = model.topology().spatial_factor();
    let (padded, rec) = pad_all(inputs, factor)?;
    let (preds, mut trace) = model.forward(params, &padded, Mode::Train)?;
    let preds: Vec<Tensor<T>> = preds.iter().map(|p| crop_back(p, &rec)).collect::<Result<_>>()?;
    let maps: Option<Vec<WeightMap>> = if cfg.loss.uses_edge_weights() {
        Some(targets.iter().map(|t| edge_weight_map(t, cfg.edge_beta)).collect::<Result<_>>()?)
    } else {
        None
    };
    let lambda = cfg.weights.effective(cfg.loss);
    let report = joint_loss(&preds, targets, params, &lambda, &cfg.ssim, cfg.tv_eps, maps.as_deref())?;
    let row = HistoryRow {
        iteration: state.iteration + 1,
        epoch: state.epoch,
        l2: report.l2,
        ssim: report.ssim,
        tv: report.tv,
        wd: report.wd,
        total: report.total,
    };
    if !row.total.is_finite() {
        return Err(Error::Divergence { iteration: row.iteration, msg: format!("loss became {}", row.total) });
    }
    let grads_padded: Vec<Tensor<T>> =
        report.grads.iter().map(|g| Ok(pad_to_multiple(g, factor)?.0)).collect::<Result<_>>()?;
    let mut grads = model.backward(params, &mut trace, &grads_padded)?;
    if lambda.wd > 0.0 {
        for (name, g) in report.wd_grad.iter() {
            grads.get_mut(name)?.axpy(T::of_f64(lambda.wd), &g.tensor)?;
        }
    }
    sgd_step(params, &grads, state)?;
    params.commit_running_stats(&trace)?;
    if !params.is_finite() {
        return Err(Error::Divergence { iteration: row.iteration, msg: "parameters became non-finite".into() });
    }
    Ok(row)
}

/// Trains from `state.epoch` up to `cfg.epochs` total epochs.
///
/// Batch order and augmentation depend only on (seed, epoch), so a run split
/// at an epoch boundary and resumed from the saved state matches an
/// uninterrupted one bit for bit.
pub fn train<T: Scalar>(
    model: &SynNetModel,
    params: &mut ParamSet<T>,
    state: &mut OptimState<T>,
    samples: &[PhantomSample],
    cfg: &TrainConfig,
) -> Result<Vec<HistoryRow>> {
    train_with(model, params, state, samples, cfg, |_, _| {})
}

/// As `train`, calling `on_step` after every step.
pub fn train_with<T: Scalar, F>(
    model: &SynNetModel,
    params: &mut ParamSet<T>,
    state: &mut OptimState<T>,
    samples: &[PhantomSample],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<HistoryRow>>
where
    F: FnMut(&HistoryRow, &ParamSet<T>),
{
    cfg.validate()?;
    cfg.check_model(model)?;
    if samples.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let opts = BatchOptions { batch_size: cfg.batch_size, shuffle: cfg.shuffle, augment: cfg.augment };
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        for b in batches(samples, &cfg.inputs, &cfg.targets, &opts, cfg.epoch_seed(state.epoch))? {
            let x: Vec<Tensor<T>> = b.inputs.iter().map(Tensor::cast).collect();
            let y: Vec<Tensor<T>> = b.targets.iter().map(Tensor::cast).collect();
            let row = train_step(model, params, state, &x, &y, cfg)?;
            on_step(&row, params);
            history.push(row);
        }
        state.epoch += 1;
    }
    Ok(history)
}

/// Infer-mode prediction for inputs of any size: pad, run, crop.
pub fn predict<T: Scalar>(model: &SynNetModel, params: &ParamSet<T>, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let cast: Vec<Tensor<T>> = inputs.iter().map(Tensor::cast).collect();
    let (padded, rec) = pad_all(&cast, model.topology().spatial_factor())?;
    let (preds, _) = model.forward(params, &padded, Mode::Infer)?;
    preds.iter().map(|p| Ok(crop_back(p, &rec)?.cast())).collect()
}

/// Quality of one head on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: String,
    pub head: Modality,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// PSNR (peak 1) and standard SSIM for every sample and head.
pub fn evaluate<T: Scalar>(
    model: &SynNetModel,
    params: &ParamSet<T>,
    samples: &[PhantomSample],
    inputs: &[Modality],
    targets: &[Modality],
    metric: &StandardSsim,
) -> Result<Vec<EvalRow>> {
    let t = model.topology();
    if inputs.len() != t.in_arms() || targets.len() != t.out_arms() {
        return Err(Error::Usage(format!(
            "{} checkpoint needs {} input and {} output modalities, got {} and {}",
            t.kind,
            t.in_arms(),
            t.out_arms(),
            inputs.len(),
            targets.len()
        )));
    }
    let mut rows = Vec::with_capacity(samples.len() * targets.len());
    for s in samples {
        let x: Vec<Tensor<f64>> = inputs.iter().map(|&m| s.get(m).clone()).collect();
        let preds = predict(model, params, &x)?;
        for (p, &m) in preds.iter().zip(targets) {
            rows.push(EvalRow {
                sample_id: s.id.clone(),
                head: m,
                psnr_db: psnr(p, s.get(m), 1.0)?,
                ssim: ssim_standard(p, s.get(m), metric)?,
            });
        }
    }
    Ok(rows)
}

/// Column means (PSNR, SSIM). Infinite PSNR rows make the mean infinite.
pub fn eval_means(rows: &[EvalRow]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    (rows.iter().map(|r| r.psnr_db).sum::<f64>() / n, rows.iter().map(|r| r.ssim).sum::<f64>() / n)
}
