//! SynNet graph assembly: encoder arms, decoder arms with index unpooling and
//! skip concatenation, and 1×1 synthesis heads.
//!
//! Encoder block: conv3×3 → batchnorm → ReLU → maxpool2×2 (indices kept).
//! Decoder block: unpool (matched indices) → concat(skips) → conv3×3 → batchnorm → ReLU.
//! Synthesis head: conv1×1 → linear.

mod params;
mod topology;

pub use params::{Param, ParamKind, ParamSet};
pub use topology::{SkipWiring, Topology, TopologyKind};

use crate::error::{shape_err, Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, linear_activation,
    linear_backward, maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward,
    unpool2x2_backward, unpool2x2_forward, BatchNormParams, BatchNormTape, ConvParams, ConvTape,
    Mode, PoolIndices, PoolTape, ReluTape, UnpoolTape, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, slice_channels, Shape4, Tensor};

/// A built graph. Parameters live separately in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynNetModel {
    topology: Topology,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

fn enc_prefix(arm: usize, level: usize) -> String {
    format!("enc.arm{arm}.block{level}")
}

fn dec_prefix(arm: usize, level: usize) -> String {
    format!("dec.arm{arm}.block{level}")
}

fn fuse_prefix(arm: usize) -> String {
    format!("dec.arm{arm}.fuse")
}

fn head_prefix(arm: usize) -> String {
    format!("head.arm{arm}")
}

/// Builds the graph and draws initial parameters.
///
/// Convolution weights are uniform in `[-s, s]` with `s = sqrt(1 / (in_c·k·k))`;
/// biases and batchnorm shifts start at 0, scales and running variances at 1.
pub fn build_model<T: Scalar>(topology: Topology, rng: &mut RngStream) -> Result<(SynNetModel, ParamSet<T>)> {
    topology.validate()?;
    let t = &topology;
    let mut params = ParamSet::new();
    let mut conv = |params: &mut ParamSet<T>, prefix: &str, in_c: usize, out_c: usize, k: usize| -> Result<()> {
        let scale = (1.0 / (in_c * k * k) as f64).sqrt();
        let w = Tensor::random(Shape4::new(out_c, in_c, k, k)?, rng, scale)?;
        params.insert(format!("{prefix}.conv.weight"), ParamKind::ConvWeight, w)?;
        params.insert(
            format!("{prefix}.conv.bias"),
            ParamKind::ConvBias,
            Tensor::zeros(Shape4::new(1, out_c, 1, 1)?),
        )
    };
    let bn = |params: &mut ParamSet<T>, prefix: &str, c: usize| -> Result<()> {
        let s = Shape4::new(1, c, 1, 1)?;
        params.insert(format!("{prefix}.bn.gamma"), ParamKind::BnGamma, Tensor::new(s, T::one()))?;
        params.insert(format!("{prefix}.bn.beta"), ParamKind::BnBeta, Tensor::zeros(s))?;
        params.insert(format!("{prefix}.bn.running_mean"), ParamKind::BnRunningMean, Tensor::zeros(s))?;
        params.insert(format!("{prefix}.bn.running_var"), ParamKind::BnRunningVar, Tensor::new(s, T::one()))
    };

    for arm in 0..t.in_arms() {
        for level in 0..t.depth {
            let in_c = if level == 0 { t.in_channels } else { t.channels[level - 1] };
            let p = enc_prefix(arm, level);
            conv(&mut params, &p, in_c, t.channels[level], 3)?;
            bn(&mut params, &p, t.channels[level])?;
        }
    }
    let bottom = t.channels[t.depth - 1];
    for arm in 0..t.out_arms() {
        if t.kind != TopologyKind::Siso {
            conv(&mut params, &fuse_prefix(arm), 2 * bottom, bottom, 1)?;
        }
        for level in (0..t.depth).rev() {
            let p = dec_prefix(arm, level);
            conv(&mut params, &p, t.decoder_in_width(level, arm), t.decoder_width(level), 3)?;
            bn(&mut params, &p, t.decoder_width(level))?;
        }
        conv(&mut params, &head_prefix(arm), t.head_width, t.out_channels, 1)?;
    }
    let model = SynNetModel {
        topology,
        bn_eps: DEFAULT_BN_EPS,
        bn_momentum: DEFAULT_BN_MOMENTUM,
    };
    Ok((model, params))
}

#[derive(Debug)]
struct BlockTape<T: Scalar> {
    conv: ConvTape<T>,
    bn: BatchNormTape<T>,
    relu: ReluTape,
}

#[derive(Debug)]
struct EncoderTape<T: Scalar> {
    blocks: Vec<BlockTape<T>>,
    pools: Vec<PoolTape>,
}

#[derive(Debug)]
struct DecoderTape<T: Scalar> {
    fuse: Option<ConvTape<T>>,
    /// Indexed by level; each entry holds (unpool tape, unpooled width, block tape).
    levels: Vec<(UnpoolTape, usize, BlockTape<T>)>,
    head: ConvTape<T>,
}

#[derive(Debug)]
struct Tapes<T: Scalar> {
    encoders: Vec<EncoderTape<T>>,
    decoders: Vec<DecoderTape<T>>,
}

/// Everything a backward pass needs from one forward pass, plus the batch
/// statistics a train-mode pass wants committed to the running averages.
#[derive(Debug)]
pub struct ForwardTrace<T: Scalar> {
    tapes: Option<Tapes<T>>,
    mode: Mode,
    pool_indices: Vec<Vec<PoolIndices>>,
    running_updates: Vec<(String, Tensor<T>)>,
    prediction_shapes: Vec<Shape4>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Pooling indices per encoder arm, shallow to deep.
    pub fn pool_indices(&self) -> &[Vec<PoolIndices>] {
        &self.pool_indices
    }

    /// New running mean/variance tensors, keyed by parameter name (train mode only).
    pub fn running_updates(&self) -> &[(String, Tensor<T>)] {
        &self.running_updates
    }

    pub fn is_consumed(&self) -> bool {
        self.mode == Mode::Train && self.tapes.is_none()
    }
}

fn conv_params<'a, T: Scalar>(params: &'a ParamSet<T>, prefix: &str) -> Result<ConvParams<'a, T>> {
    ConvParams::new(
        params.get(&format!("{prefix}.conv.weight"))?,
        params.get(&format!("{prefix}.conv.bias"))?,
    )
}

impl SynNetModel {
    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn new(topology: Topology) -> Result<Self> {
        topology.validate()?;
        Ok(SynNetModel {
            topology,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        })
    }

    fn block_forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        prefix: &str,
        x: &Tensor<T>,
        mode: Mode,
        updates: &mut Vec<(String, Tensor<T>)>,
    ) -> Result<(Tensor<T>, Option<BlockTape<T>>)> {
        let (y, conv) = conv2d_forward(x, conv_params(params, prefix)?)?;
        let mean_name = format!("{prefix}.bn.running_mean");
        let var_name = format!("{prefix}.bn.running_var");
        let bnp = BatchNormParams {
            gamma: params.get(&format!("{prefix}.bn.gamma"))?,
            beta: params.get(&format!("{prefix}.bn.beta"))?,
            running_mean: params.get(&mean_name)?,
            running_var: params.get(&var_name)?,
            eps: self.bn_eps,
            stat_momentum: self.bn_momentum,
        };
        let (y, bn) = batchnorm_forward(&y, bnp, mode)?;
        if let Some((m, v)) = bn.running_update() {
            updates.push((mean_name, m.clone()));
            updates.push((var_name, v.clone()));
        }
        let (y, relu) = relu_forward(&y);
        let tape = (mode == Mode::Train).then_some(BlockTape { conv, bn, relu });
        Ok((y, tape))
    }

    fn block_backward<T: Scalar>(
        tape: &BlockTape<T>,
        prefix: &str,
        grad: &Tensor<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<Tensor<T>> {
        let g = relu_backward(&tape.relu, grad)?;
        let (g, bng) = batchnorm_backward(&tape.bn, &g)?;
        grads.accumulate(&format!("{prefix}.bn.gamma"), &bng.gamma)?;
        grads.accumulate(&format!("{prefix}.bn.beta"), &bng.beta)?;
        let (g, cg) = conv2d_backward(&tape.conv, &g)?;
        grads.accumulate(&format!("{prefix}.conv.weight"), &cg.weight)?;
        grads.accumulate(&format!("{prefix}.conv.bias"), &cg.bias)?;
        Ok(g)
    }

    fn check_inputs<T: Scalar>(&self, inputs: &[Tensor<T>]) -> Result<()> {
        let t = &self.topology;
        if inputs.len() != t.in_arms() {
            return Err(Error::Usage(format!(
                "{} topology takes {} input image(s), got {}",
                t.kind,
                t.in_arms(),
                inputs.len()
            )));
        }
        let s0 = inputs[0].shape();
        let f = t.spatial_factor();
        for x in inputs {
            let s = x.shape();
            if s != s0 {
                return Err(shape_err!("input arms disagree in shape: {s} vs {s0}"));
            }
            if s.c != t.in_channels {
                return Err(shape_err!("input has {} channels, topology expects {}", s.c, t.in_channels));
            }
            if s.h % f != 0 || s.w % f != 0 {
                return Err(shape_err!(
                    "input {}x{} is not divisible by 2^depth = {f}; pad it first",
                    s.h,
                    s.w
                ));
            }
        }
        Ok(())
    }

    /// Runs the whole graph. Infer mode reads running batchnorm statistics and keeps no tapes.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        inputs: &[Tensor<T>],
        mode: Mode,
    ) -> Result<(Vec<Tensor<T>>, ForwardTrace<T>)> {
        self.check_inputs(inputs)?;
        let t = &self.topology;
        let mut updates = Vec::new();
        let mut skips: Vec<Vec<Tensor<T>>> = Vec::with_capacity(t.in_arms());
        let mut indices: Vec<Vec<PoolIndices>> = Vec::with_capacity(t.in_arms());
        let mut bottoms = Vec::with_capacity(t.in_arms());
        let mut enc_tapes = Vec::new();

        for (arm, input) in inputs.iter().enumerate() {
            let mut h = input.clone();
            let mut arm_skips = Vec::with_capacity(t.depth);
            let mut arm_idx = Vec::with_capacity(t.depth);
            let mut tape = EncoderTape {
                blocks: Vec::new(),
                pools: Vec::new(),
            };
            for level in 0..t.depth {
                let (f, bt) = self.block_forward(params, &enc_prefix(arm, level), &h, mode, &mut updates)?;
                let (p, idx, pt) = maxpool2x2_forward(&f)?;
                arm_skips.push(f);
                arm_idx.push(idx);
                if let Some(bt) = bt {
                    tape.blocks.push(bt);
                    tape.pools.push(pt);
                }
                h = p;
            }
            skips.push(arm_skips);
            indices.push(arm_idx);
            bottoms.push(h);
            enc_tapes.push(tape);
        }

        let mut predictions = Vec::with_capacity(t.out_arms());
        let mut dec_tapes = Vec::new();
        for arm in 0..t.out_arms() {
            let (mut x, fuse) = if t.kind == TopologyKind::Siso {
                (bottoms[0].clone(), None)
            } else {
                let cat = concat_channels(&bottoms[0], &bottoms[1])?;
                let (y, ft) = conv2d_forward(&cat, conv_params(params, &fuse_prefix(arm))?)?;
                (y, Some(ft))
            };
            let idx_arm = t.index_arm(arm);
            let skip_arms = t.skip_arms(arm);
            let mut levels = Vec::new();
            for level in (0..t.depth).rev() {
                let (u, ut) = unpool2x2_forward(&x, &indices[idx_arm][level])?;
                let unpooled_c = u.shape().c;
                let mut cat = u;
                for &a in &skip_arms {
                    cat = concat_channels(&cat, &skips[a][level])?;
                }
                let (y, bt) = self.block_forward(params, &dec_prefix(arm, level), &cat, mode, &mut updates)?;
                if let Some(bt) = bt {
                    levels.push((ut, unpooled_c, bt));
                }
                x = y;
            }
            let (y, head) = conv2d_forward(&x, conv_params(params, &head_prefix(arm))?)?;
            predictions.push(linear_activation(y));
            // stored shallow-first so backward can walk levels in index order
            levels.reverse();
            dec_tapes.push(DecoderTape { fuse, levels, head });
        }

        let tapes = (mode == Mode::Train).then_some(Tapes {
            encoders: enc_tapes,
            decoders: dec_tapes,
        });
        let trace = ForwardTrace {
            tapes,
            mode,
            pool_indices: indices,
            running_updates: updates,
            prediction_shapes: predictions.iter().map(Tensor::shape).collect(),
        };
        Ok((predictions, trace))
    }

    /// Gradients of `Σ_k <grad_predictions[k], predictions[k]>` w.r.t. every learnable parameter.
    ///
    /// The trace's tapes are consumed; a second call on the same trace is a usage error.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        trace: &mut ForwardTrace<T>,
        grad_predictions: &[Tensor<T>],
    ) -> Result<ParamSet<T>> {
        if trace.mode != Mode::Train {
            return Err(Error::Usage("backward needs a train-mode forward trace".into()));
        }
        if grad_predictions.len() != trace.prediction_shapes.len() {
            return Err(Error::Usage(format!(
                "expected {} prediction gradients, got {}",
                trace.prediction_shapes.len(),
                grad_predictions.len()
            )));
        }
        for (g, s) in grad_predictions.iter().zip(&trace.prediction_shapes) {
            if g.shape() != *s {
                return Err(shape_err!("prediction gradient shape {} differs from {s}", g.shape()));
            }
        }
        let tapes = trace
            .tapes
            .take()
            .ok_or_else(|| Error::Usage("forward trace was already consumed by backward".into()))?;
        let t = &self.topology;
        let mut grads = params.zeros_like_learnable();

        let mut grad_skips: Vec<Vec<Option<Tensor<T>>>> = vec![vec![None; t.depth]; t.in_arms()];
        let mut grad_bottoms: Vec<Option<Tensor<T>>> = vec![None; t.in_arms()];
        let add_into = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };

        for (arm, dec) in tapes.decoders.iter().enumerate() {
            let g = linear_backward(grad_predictions[arm].clone());
            let hp = head_prefix(arm);
            let (mut g, hg) = conv2d_backward(&dec.head, &g)?;
            grads.accumulate(&format!("{hp}.conv.weight"), &hg.weight)?;
            grads.accumulate(&format!("{hp}.conv.bias"), &hg.bias)?;

            let skip_arms = t.skip_arms(arm);
            for (level, (ut, unpooled_c, bt)) in dec.levels.iter().enumerate() {
                let gcat = Self::block_backward(bt, &dec_prefix(arm, level), &g, &mut grads)?;
                let mut start = *unpooled_c;
                for &a in &skip_arms {
                    let width = t.channels[level];
                    let gs = slice_channels(&gcat, start..start + width)?;
                    add_into(&mut grad_skips[a][level], gs)?;
                    start += width;
                }
                let gu = slice_channels(&gcat, 0..*unpooled_c)?;
                g = unpool2x2_backward(ut, &gu)?;
            }

            match &dec.fuse {
                None => add_into(&mut grad_bottoms[0], g)?,
                Some(ft) => {
                    let fp = fuse_prefix(arm);
                    let (gcat, fg) = conv2d_backward(ft, &g)?;
                    grads.accumulate(&format!("{fp}.conv.weight"), &fg.weight)?;
                    grads.accumulate(&format!("{fp}.conv.bias"), &fg.bias)?;
                    let half = gcat.shape().c / 2;
                    add_into(&mut grad_bottoms[0], slice_channels(&gcat, 0..half)?)?;
                    add_into(&mut grad_bottoms[1], slice_channels(&gcat, half..2 * half)?)?;
                }
            }
        }

        for (arm, enc) in tapes.encoders.iter().enumerate() {
            let mut g = grad_bottoms[arm].take();
            for level in (0..t.depth).rev() {
                let mut gf = match g.take() {
                    Some(gp) => maxpool2x2_backward(&enc.pools[level], &gp)?,
                    // no decoder consumed this arm's pooled output
                    None => Tensor::zeros(trace.pool_indices[arm][level].unpooled_shape()),
                };
                if let Some(gs) = grad_skips[arm][level].take() {
                    gf.add_assign(&gs)?;
                }
                g = Some(Self::block_backward(&enc.blocks[level], &enc_prefix(arm, level), &gf, &mut grads)?);
            }
        }
        Ok(grads)
    }
}

impl<T: Scalar> ParamSet<T> {
    /// Writes the running statistics recorded by a train-mode forward pass.
    pub fn commit_running_stats(&mut self, trace: &ForwardTrace<T>) -> Result<()> {
        for (name, t) in &trace.running_updates {
            self.replace(name, t.clone())?;
        }
        Ok(())
    }
}

/// Closed-form learnable-parameter count for a topology.
pub fn parameter_count(t: &Topology) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let bn = |c: usize| 2 * c;
    let mut total = 0;
    for _ in 0..t.in_arms() {
        for level in 0..t.depth {
            let i = if level == 0 { t.in_channels } else { t.channels[level - 1] };
            total += conv(i, t.channels[level], 3) + bn(t.channels[level]);
        }
    }
    let bottom = t.channels[t.depth - 1];
    for arm in 0..t.out_arms() {
        if t.kind != TopologyKind::Siso {
            total += conv(2 * bottom, bottom, 1);
        }
        for level in 0..t.depth {
            total += conv(t.decoder_in_width(level, arm), t.decoder_width(level), 3) + bn(t.decoder_width(level));
        }
        total += conv(t.head_width, t.out_channels, 1);
    }
    total
}
