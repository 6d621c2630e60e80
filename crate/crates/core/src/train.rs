//! Toy-scale quantization-aware training of a spiking conv net.
//!
//! Network: `conv -> batch norm -> LIF` per layer, then a real-valued linear
//! readout averaged over timesteps. Sub-bit layers replace each kernel by its
//! assigned codeword scaled by the channel's mean absolute weight; the
//! assignment is recomputed from the dense weights every step.
//!
//! Backpropagation through time treats the reset as detached, so
//! `du[t] / du_pre[t] = 1 - s[t]`. Spikes are differentiated with the
//! rectangular surrogate under [`GradMode::Surrogate`] and not at all under
//! [`GradMode::Exact`]. In the exact mode kernel signs are constants and every
//! remaining path is the true derivative, which is what finite differences see
//! between spike and assignment flips.
//!
//! Batch norm always uses batch statistics. Running statistics are tracked
//! only so the exported model can fold them into a per-channel affine.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarize::{channel_scales, ConvShape, DenseConvWeights};
use crate::codebook::{sample_codebook, CompactCodebook};
use crate::distill::{mpfd_loss_and_grad, GramPolicy, LayerPairing};
use crate::engine::ChannelAffine;
use crate::error::{shape_err, Error, Result};
use crate::io::rate_encode;
use crate::neuron::LifConfig;
use crate::osquant::{
    osquant_backward, outlier_occurrence, quantize_layer, ste_backward, KernelShape,
    LayerAssignment, OmegaPolicy, Quantizer,
};
use crate::pack::{pack, QuantizedLayer};
use crate::tensor::{Shape4, SpikeTensor, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_LR: f64 = 5e-4;
pub const METRICS_HEADER: &str = "epoch,loss,ce,mpfd,acc,outlier_frac";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub eta: u32,
}

impl ConvSpec {
    pub fn shape(&self) -> ConvShape {
        ConvShape::new(self.c_out, self.c_in, self.k, self.k)
    }
}

/// Architecture: conv layers on a `(c, h, w)` input, then a linear readout
/// to `classes` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNetSpec {
    pub input: (usize, usize, usize),
    pub convs: Vec<ConvSpec>,
    pub classes: usize,
    pub timesteps: usize,
    /// One per conv layer.
    pub lif: Vec<LifConfig>,
}

impl ToyNetSpec {
    /// Default neurons in every layer.
    pub fn new(
        input: (usize, usize, usize),
        convs: Vec<ConvSpec>,
        classes: usize,
        timesteps: usize,
    ) -> Self {
        let lif = vec![LifConfig::default(); convs.len()];
        ToyNetSpec {
            input,
            convs,
            classes,
            timesteps,
            lif,
        }
    }

    /// Two 3x3 conv layers on 1x8x8 input with `eta = 4` and two classes.
    pub fn two_conv(timesteps: usize) -> Self {
        ToyNetSpec::new(
            (1, 8, 8),
            vec![
                ConvSpec {
                    c_in: 1,
                    c_out: 4,
                    k: 3,
                    eta: 4,
                },
                ConvSpec {
                    c_in: 4,
                    c_out: 4,
                    k: 3,
                    eta: 4,
                },
            ],
            2,
            timesteps,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one conv layer is required".into(),
            ));
        }
        if self.timesteps == 0 {
            return Err(Error::NoTimesteps);
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.lif.len() != self.convs.len() {
            return Err(shape_err(self.convs.len(), self.lif.len()));
        }
        let mut c = self.input.0;
        for (l, conv) in self.convs.iter().enumerate() {
            if conv.c_in != c {
                return Err(Error::InvalidConfig(format!(
                    "conv {l} expects {} input channels, previous layer gives {c}",
                    conv.c_in
                )));
            }
            if conv.c_out == 0 {
                return Err(Error::InvalidConfig(format!(
                    "conv {l} has no output channels"
                )));
            }
            conv.shape().check_compressible()?;
            c = conv.c_out;
        }
        for cfg in &self.lif {
            cfg.validate()?;
        }
        Ok(())
    }

    fn features(&self) -> usize {
        let last = self.convs.last().expect("validated");
        last.c_out * self.input.1 * self.input.2
    }
}

/// How conv weights enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMode {
    /// Codeword per kernel, scaled per output channel.
    SubBit,
    /// Real weights as they are. Used for teachers.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradMode {
    #[default]
    Surrogate,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weights: DenseConvWeights,
    /// Present for sub-bit layers.
    pub codebook: Option<CompactCodebook>,
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyNet {
    pub spec: ToyNetSpec,
    pub mode: WeightMode,
    pub convs: Vec<ConvLayer>,
    /// `classes x features`, row-major.
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

impl ToyNet {
    /// Uniform fan-in scaled initialization; every draw comes from `seed`.
    pub fn init(spec: &ToyNetSpec, mode: WeightMode, seed: u64) -> Result<ToyNet> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(spec.convs.len());
        for c in &spec.convs {
            let shape = c.shape();
            let bound = (3.0 / (c.c_in * c.k * c.k) as f64).sqrt();
            let values = (0..shape.len())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let codebook = match mode {
                WeightMode::SubBit => Some(sample_codebook(c.k, c.k, c.eta, rng.gen())?),
                WeightMode::Dense => None,
            };
            convs.push(ConvLayer {
                weights: DenseConvWeights::new(shape, values)?,
                codebook,
                bn_gamma: vec![1.0; c.c_out],
                bn_beta: vec![0.0; c.c_out],
                running_mean: vec![0.0; c.c_out],
                running_var: vec![1.0; c.c_out],
            });
        }
        let features = spec.features();
        let bound = 1.0 / (features as f64).sqrt();
        let fc_w = (0..spec.classes * features)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Ok(ToyNet {
            spec: spec.clone(),
            mode,
            convs,
            fc_w,
            fc_b: vec![0.0; spec.classes],
        })
    }

    /// Packed sub-bit layers plus the folded batch-norm affine per layer.
    pub fn export(
        &self,
        quantizer: Quantizer,
    ) -> Result<(Vec<QuantizedLayer>, Vec<ChannelAffine>)> {
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut affine = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let cb = layer
                .codebook
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("dense layers cannot be packed".into()))?;
            let a = quantize_layer(&layer.weights, cb, quantizer, OmegaPolicy::SkipDegenerate)?;
            let alpha = channel_scales(&layer.weights)
                .iter()
                .map(|&v| v as f32)
                .collect();
            layers.push(QuantizedLayer::new(
                cb,
                layer.weights.shape,
                a.indices,
                alpha,
            )?);
            let scale: Vec<f64> = layer
                .bn_gamma
                .iter()
                .zip(&layer.running_var)
                .map(|(g, v)| g / (v + BN_EPS).sqrt())
                .collect();
            let shift = layer
                .bn_beta
                .iter()
                .zip(&layer.running_mean)
                .zip(&scale)
                .map(|((b, m), s)| b - s * m)
                .collect();
            affine.push(ChannelAffine { scale, shift });
        }
        Ok((layers, affine))
    }

    /// Fraction of kernels holding an outlier, over all sub-bit layers.
    pub fn outlier_fraction(&self, gamma: f64) -> Result<f64> {
        let (mut with, mut total) = (0.0, 0usize);
        for layer in self.convs.iter().filter(|l| l.codebook.is_some()) {
            let k = layer.weights.shape.kernels();
            with += outlier_occurrence(&layer.weights, gamma)? * k as f64;
            total += k;
        }
        Ok(if total == 0 { 0.0 } else { with / total as f64 })
    }
}

/// One rate-coded example: `T` spike frames of shape `(1, c, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub spikes: Vec<SpikeTensor>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input: (usize, usize, usize),
    pub timesteps: usize,
    pub classes: usize,
}

/// Two classes of 8x8 stripes: class 0 lights alternate columns, class 1
/// alternate rows. Bright pixels fire with probability near 0.8, dark ones
/// near 0.05, both jittered per sample.
pub fn synthetic_dataset(n: usize, timesteps: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let mut x = Tensor4::zeros((1, 1, 8, 8));
            for y in 0..8 {
                for c in 0..8 {
                    let lit = if label == 0 { c % 2 == 0 } else { y % 2 == 0 };
                    let base = if lit { 0.8 } else { 0.05 };
                    let p: f64 = base + rng.gen_range(-0.05..0.05);
                    x.set(0, 0, y, c, p.clamp(0.0, 1.0));
                }
            }
            Sample {
                spikes: rate_encode(&x, timesteps, rng.gen()),
                label,
            }
        })
        .collect();
    Dataset {
        samples,
        input: (1, 8, 8),
        timesteps,
        classes: 2,
    }
}

/// A batch as dense `{0, 1}` frames `(b, c, h, w)`, one per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub frames: Vec<Tensor4>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
        let t_len = first.spikes.len();
        let shape = first.spikes.first().ok_or(Error::NoTimesteps)?.shape();
        let per = shape.per_sample();
        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut data = Vec::with_capacity(per * samples.len());
            for s in samples {
                let frame = s.spikes.get(t).ok_or(Error::NoTimesteps)?;
                if frame.shape() != shape {
                    return Err(shape_err(shape, frame.shape()));
                }
                data.extend(frame.to_bits().into_iter().map(f64::from));
            }
            frames.push(Tensor4::from_vec(
                (samples.len(), shape.c, shape.h, shape.w),
                data,
            )?);
        }
        Ok(Batch {
            frames,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}

/// Weights used in the forward pass of one layer.
#[derive(Debug, Clone)]
struct Effective {
    values: Vec<f64>,
    /// Sub-bit layers: kernel signs, channel scales and the assignment.
    binary: Option<(Vec<i8>, Vec<f64>, LayerAssignment)>,
}

fn effective(layer: &ConvLayer, quantizer: Quantizer) -> Result<Effective> {
    let Some(cb) = &layer.codebook else {
        return Ok(Effective {
            values: layer.weights.values.clone(),
            binary: None,
        });
    };
    let shape = layer.weights.shape;
    let a = quantize_layer(&layer.weights, cb, quantizer, OmegaPolicy::SkipDegenerate)?;
    let alpha = channel_scales(&layer.weights);
    let n = shape.kernel_len();
    let mut signs = Vec::with_capacity(shape.len());
    for &idx in &a.indices {
        signs.extend(cb.codeword(idx as usize).decode(n));
    }
    let per_out = shape.c_in * n;
    let values = signs
        .iter()
        .enumerate()
        .map(|(e, &s)| alpha[e / per_out] * s as f64)
        .collect();
    Ok(Effective {
        values,
        binary: Some((signs, alpha, a)),
    })
}

/// Same-padded stride-1 cross-correlation.
fn conv_forward(x: &Tensor4, w: &[f64], s: ConvShape) -> Tensor4 {
    let xs = x.shape();
    let (h, wd) = (xs.h, xs.w);
    let (ph, pw) = ((s.k_h - 1) / 2, (s.k_w - 1) / 2);
    let per_in = xs.per_sample();
    let per_out = s.c_out * h * wd;
    let out: Vec<Vec<f64>> = (0..xs.b)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * per_in..(b + 1) * per_in];
            let mut out = vec![0.0; per_out];
            for i in 0..s.c_in {
                for yy in 0..h {
                    for xx in 0..wd {
                        let v = xb[(i * h + yy) * wd + xx];
                        if v == 0.0 {
                            continue;
                        }
                        for r in 0..s.k_h {
                            let Some(y) = (yy + ph).checked_sub(r).filter(|&y| y < h) else {
                                continue;
                            };
                            for c in 0..s.k_w {
                                let Some(xo) = (xx + pw).checked_sub(c).filter(|&x| x < wd) else {
                                    continue;
                                };
                                for o in 0..s.c_out {
                                    let wv = w[((o * s.c_in + i) * s.k_h + r) * s.k_w + c];
                                    out[(o * h + y) * wd + xo] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    Tensor4::from_vec((xs.b, s.c_out, h, wd), out.concat()).expect("shape by construction")
}

/// Gradients of [`conv_forward`] with respect to the weights and, if asked,
/// the input.
fn conv_backward(
    x: &Tensor4,
    w: &[f64],
    s: ConvShape,
    dz: &Tensor4,
    want_dx: bool,
) -> (Vec<f64>, Option<Tensor4>) {
    let xs = x.shape();
    let (h, wd) = (xs.h, xs.w);
    let (ph, pw) = ((s.k_h - 1) / 2, (s.k_w - 1) / 2);
    let per_in = xs.per_sample();
    let per_out = s.c_out * h * wd;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..xs.b)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * per_in..(b + 1) * per_in];
            let gb = &dz.data()[b * per_out..(b + 1) * per_out];
            let mut dw = vec![0.0; s.len()];
            let mut dx = if want_dx {
                vec![0.0; per_in]
            } else {
                Vec::new()
            };
            for i in 0..s.c_in {
                for yy in 0..h {
                    for xx in 0..wd {
                        let v = xb[(i * h + yy) * wd + xx];
                        let mut acc = 0.0;
                        for r in 0..s.k_h {
                            let Some(y) = (yy + ph).checked_sub(r).filter(|&y| y < h) else {
                                continue;
                            };
                            for c in 0..s.k_w {
                                let Some(xo) = (xx + pw).checked_sub(c).filter(|&x| x < wd) else {
                                    continue;
                                };
                                for o in 0..s.c_out {
                                    let g = gb[(o * h + y) * wd + xo];
                                    let k = ((o * s.c_in + i) * s.k_h + r) * s.k_w + c;
                                    dw[k] += g * v;
                                    acc += g * w[k];
                                }
                            }
                        }
                        if want_dx {
                            dx[(i * h + yy) * wd + xx] = acc;
                        }
                    }
                }
            }
            (dw, dx)
        })
        .collect();
    let mut dw = vec![0.0; s.len()];
    let mut dx = Vec::with_capacity(if want_dx { xs.len() } else { 0 });
    for (pw_, px) in parts {
        for (a, b) in dw.iter_mut().zip(&pw_) {
            *a += b;
        }
        dx.extend(px);
    }
    let dx = want_dx.then(|| Tensor4::from_vec(xs, dx).expect("shape by construction"));
    (dw, dx)
}

/// Standardized values and inverse standard deviation of a batch-norm input,
/// with statistics over `(b, h, w)` per channel.
fn bn_forward(z: &Tensor4, gamma: &[f64], beta: &[f64]) -> (Tensor4, Tensor4, Vec<f64>, Vec<f64>) {
    let s = z.shape();
    let plane = s.h * s.w;
    let count = (s.b * plane) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for b in 0..s.b {
        for c in 0..s.c {
            let off = (b * s.c + c) * plane;
            mean[c] += z.data()[off..off + plane].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..s.b {
        for c in 0..s.c {
            let off = (b * s.c + c) * plane;
            var[c] += z.data()[off..off + plane]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = z.clone();
    let mut y = z.clone();
    for (n, (xh, yv)) in xhat.data_mut().iter_mut().zip(y.data_mut()).enumerate() {
        let c = (n / plane) % s.c;
        *xh = (*xh - mean[c]) * inv_std[c];
        *yv = gamma[c] * *xh + beta[c];
    }
    (y, xhat, mean, var)
}

/// Returns `(dz, dgamma, dbeta)` for `y = gamma * xhat + beta`.
fn bn_backward(
    dy: &Tensor4,
    xhat: &Tensor4,
    gamma: &[f64],
    inv_std: &[f64],
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let s = dy.shape();
    let plane = s.h * s.w;
    let count = (s.b * plane) as f64;
    let mut dgamma = vec![0.0; s.c];
    let mut dbeta = vec![0.0; s.c];
    for (n, (&g, &xh)) in dy.data().iter().zip(xhat.data()).enumerate() {
        let c = (n / plane) % s.c;
        dgamma[c] += g * xh;
        dbeta[c] += g;
    }
    // dxhat = dy * gamma; dz = inv_std / N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
    let mut dz = dy.clone();
    for (n, (v, &xh)) in dz.data_mut().iter_mut().zip(xhat.data()).enumerate() {
        let c = (n / plane) % s.c;
        let sum_dxhat = gamma[c] * dbeta[c];
        let sum_dxhat_xhat = gamma[c] * dgamma[c];
        *v = inv_std[c] / count * (count * gamma[c] * *v - sum_dxhat - xh * sum_dxhat_xhat);
    }
    (dz, dgamma, dbeta)
}

#[derive(Debug, Clone)]
struct StepCache {
    input: Tensor4,
    xhat: Tensor4,
    inv_std: Vec<f64>,
    u_pre: Tensor4,
    spikes: Tensor4,
}

/// Everything recorded by one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[batch][class]`, averaged over timesteps.
    pub logits: Vec<Vec<f64>>,
    /// Pre-reset potentials, `[layer][timestep]`.
    pub potentials: Vec<Vec<Tensor4>>,
    /// Codeword index per kernel for each sub-bit layer, empty for dense ones.
    pub assignments: Vec<Vec<u32>>,
    /// Batch mean and variance per layer and timestep.
    batch_stats: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    cache: Vec<Vec<StepCache>>,
    effective: Vec<Effective>,
}

impl Forward {
    /// Spike frames `[layer][timestep]`, for detecting flips between passes.
    pub fn spikes(&self) -> Vec<Vec<&Tensor4>> {
        let layers = self.cache.first().map_or(0, Vec::len);
        (0..layers)
            .map(|l| self.cache.iter().map(|t| &t[l].spikes).collect())
            .collect()
    }
}

/// Runs the net over a batch. Sub-bit layers are quantized once up front.
pub fn forward(net: &ToyNet, batch: &Batch, quantizer: Quantizer) -> Result<Forward> {
    let spec = &net.spec;
    if batch.frames.len() != spec.timesteps {
        return Err(shape_err(spec.timesteps, batch.frames.len()));
    }
    let b = batch.labels.len();
    let (c0, h, w) = spec.input;
    let effective = net
        .convs
        .iter()
        .map(|l| effective(l, quantizer))
        .collect::<Result<Vec<_>>>()?;
    let features = spec.features();
    let mut logits = vec![vec![0.0; spec.classes]; b];
    let mut u: Vec<Tensor4> = spec
        .convs
        .iter()
        .map(|c| Tensor4::zeros((b, c.c_out, h, w)))
        .collect();
    let mut cache = Vec::with_capacity(spec.timesteps);
    let mut batch_stats = Vec::with_capacity(spec.timesteps);
    for frame in &batch.frames {
        if frame.shape() != Shape4::new(b, c0, h, w) {
            return Err(shape_err(Shape4::new(b, c0, h, w), frame.shape()));
        }
        let mut x = frame.clone();
        let mut steps = Vec::with_capacity(spec.convs.len());
        let mut stats = Vec::with_capacity(spec.convs.len());
        for (l, layer) in net.convs.iter().enumerate() {
            let cfg = &spec.lif[l];
            let z = conv_forward(&x, &effective[l].values, layer.weights.shape);
            let (y, xhat, mean, var) = bn_forward(&z, &layer.bn_gamma, &layer.bn_beta);
            let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut u_pre = y;
            let mut spikes = Tensor4::zeros(u_pre.shape());
            for ((up, s), un) in u_pre
                .data_mut()
                .iter_mut()
                .zip(spikes.data_mut())
                .zip(u[l].data_mut())
            {
                *up += cfg.tau * *un;
                if *up - cfg.theta >= 0.0 {
                    *s = 1.0;
                    *un = 0.0;
                } else {
                    *un = *up;
                }
            }
            steps.push(StepCache {
                input: std::mem::replace(&mut x, spikes.clone()),
                xhat,
                inv_std,
                u_pre,
                spikes,
            });
            stats.push((mean, var));
        }
        let per = x.shape().per_sample();
        for (bi, row) in logits.iter_mut().enumerate() {
            let s = &x.data()[bi * per..(bi + 1) * per];
            for (k, out) in row.iter_mut().enumerate() {
                let wk = &net.fc_w[k * features..(k + 1) * features];
                *out += wk.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() + net.fc_b[k];
            }
        }
        cache.push(steps);
        batch_stats.push(stats);
    }
    let t = spec.timesteps as f64;
    logits.iter_mut().flatten().for_each(|v| *v /= t);
    let potentials = (0..spec.convs.len())
        .map(|l| {
            cache
                .iter()
                .map(|s: &Vec<StepCache>| s[l].u_pre.clone())
                .collect()
        })
        .collect();
    let assignments = effective
        .iter()
        .map(|e| {
            e.binary
                .as_ref()
                .map_or_else(Vec::new, |(_, _, a)| a.indices.clone())
        })
        .collect();
    Ok(Forward {
        logits,
        potentials,
        assignments,
        batch_stats,
        cache,
        effective,
    })
}

/// Mean cross-entropy and `dL/dlogits`.
fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>, usize) {
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            loss += -(exp[y] / z).ln();
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (k, v)| if *v > row[best] { k } else { best });
            correct += (pred == y) as usize;
            exp.iter()
                .enumerate()
                .map(|(k, e)| (e / z - (k == y) as u8 as f64) / b)
                .collect()
        })
        .collect();
    (loss / b, grad, correct)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Measured whenever a teacher is present, weighted by `lambda` in `total`.
    pub mpfd: f64,
    pub correct: usize,
}

/// Settings shared by every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub quantizer: Quantizer,
    pub lambda: f64,
    pub grad_mode: GradMode,
}

/// Teacher potentials recorded on the same batch, with the layer pairing.
pub struct TeacherRecord<'a> {
    pub potentials: &'a [Vec<Tensor4>],
    pub pairing: &'a LayerPairing,
}

/// `CE + lambda * MPFD`.
pub fn loss(
    fwd: &Forward,
    labels: &[usize],
    teacher: Option<&TeacherRecord<'_>>,
    lambda: f64,
    timesteps: usize,
) -> Result<LossParts> {
    let (ce, _, correct) = cross_entropy(&fwd.logits, labels);
    let mpfd = match teacher {
        Some(t) => {
            mpfd_loss_and_grad(
                t.potentials,
                &fwd.potentials,
                t.pairing,
                timesteps,
                GramPolicy::SkipDegenerate,
            )?
            .0
        }
        None => 0.0,
    };
    Ok(LossParts {
        total: ce + lambda * mpfd,
        ce,
        mpfd,
        correct,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    /// Dense weights per conv layer.
    pub conv: Vec<Vec<f64>>,
    /// Per codeword, for sub-bit layers.
    pub codebook: Vec<Option<Vec<Vec<f64>>>>,
    pub bn_gamma: Vec<Vec<f64>>,
    pub bn_beta: Vec<Vec<f64>>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

/// Forward, loss and backward on one batch.
pub fn loss_and_grads(
    net: &ToyNet,
    batch: &Batch,
    teacher: Option<&TeacherRecord<'_>>,
    cfg: &StepConfig,
) -> Result<(LossParts, Grads, Forward)> {
    let spec = &net.spec;
    let fwd = forward(net, batch, cfg.quantizer)?;
    let t_len = spec.timesteps;
    let n_layers = spec.convs.len();
    let (ce, dlogits, correct) = cross_entropy(&fwd.logits, &batch.labels);
    let (mpfd, mut dpot) = match teacher {
        Some(t) => {
            let (m, g) = mpfd_loss_and_grad(
                t.potentials,
                &fwd.potentials,
                t.pairing,
                t_len,
                GramPolicy::SkipDegenerate,
            )?;
            (m, Some(g))
        }
        None => (0.0, None),
    };
    let parts = LossParts {
        total: ce + cfg.lambda * mpfd,
        ce,
        mpfd,
        correct,
    };

    let features = spec.features();
    let b = batch.labels.len();
    let inv_t = 1.0 / t_len as f64;
    let mut fc_w = vec![0.0; net.fc_w.len()];
    let mut fc_b = vec![0.0; net.fc_b.len()];
    for (k, db) in fc_b.iter_mut().enumerate() {
        *db = dlogits.iter().map(|row| row[k]).sum();
    }
    let mut dweff: Vec<Vec<f64>> = net
        .convs
        .iter()
        .map(|l| vec![0.0; l.weights.values.len()])
        .collect();
    let mut bn_gamma: Vec<Vec<f64>> = net
        .convs
        .iter()
        .map(|l| vec![0.0; l.bn_gamma.len()])
        .collect();
    let mut bn_beta = bn_gamma.clone();
    // dL/du[t] carried back from t + 1, per layer
    let mut du_next: Vec<Vec<f64>> = fwd.cache[0]
        .iter()
        .map(|c| vec![0.0; c.u_pre.data().len()])
        .collect();

    for t in (0..t_len).rev() {
        let steps = &fwd.cache[t];
        // readout: logits += W s_L[t] / T
        let last = &steps[n_layers - 1].spikes;
        let mut ds = vec![0.0; last.data().len()];
        for bi in 0..b {
            let s = &last.data()[bi * features..(bi + 1) * features];
            for (k, &g) in dlogits[bi].iter().enumerate() {
                let g = g * inv_t;
                let row = k * features;
                for f in 0..features {
                    fc_w[row + f] += g * s[f];
                    ds[bi * features + f] += g * net.fc_w[row + f];
                }
            }
        }
        for l in (0..n_layers).rev() {
            let st = &steps[l];
            let lif = &spec.lif[l];
            let mut dup = match dpot.as_mut() {
                Some(g) => {
                    std::mem::replace(&mut g[l][t], Tensor4::zeros((0, 0, 0, 0))).scaled(cfg.lambda)
                }
                None => Tensor4::zeros(st.u_pre.shape()),
            };
            for (n, v) in dup.data_mut().iter_mut().enumerate() {
                let s = st.spikes.data()[n];
                *v += du_next[l][n] * (1.0 - s);
                if cfg.grad_mode == GradMode::Surrogate {
                    *v += ds[n] * lif.surrogate(st.u_pre.data()[n]);
                }
            }
            for (d, v) in du_next[l].iter_mut().zip(dup.data()) {
                *d = lif.tau * v;
            }
            let layer = &net.convs[l];
            let (dz, dg, dbeta) = bn_backward(&dup, &st.xhat, &layer.bn_gamma, &st.inv_std);
            for (a, v) in bn_gamma[l].iter_mut().zip(&dg) {
                *a += v;
            }
            for (a, v) in bn_beta[l].iter_mut().zip(&dbeta) {
                *a += v;
            }
            let (dw, dx) = conv_backward(
                &st.input,
                &fwd.effective[l].values,
                layer.weights.shape,
                &dz,
                l > 0,
            );
            for (a, v) in dweff[l].iter_mut().zip(&dw) {
                *a += v;
            }
            if let Some(dx) = dx {
                ds = dx.into_vec();
            }
        }
    }

    let mut conv = Vec::with_capacity(n_layers);
    let mut codebook = Vec::with_capacity(n_layers);
    for (l, layer) in net.convs.iter().enumerate() {
        let (dw, dcb) = weight_grads(layer, &fwd.effective[l], &dweff[l], cfg)?;
        conv.push(dw);
        codebook.push(dcb);
    }
    Ok((
        parts,
        Grads {
            conv,
            codebook,
            bn_gamma,
            bn_beta,
            fc_w,
            fc_b,
        },
        fwd,
    ))
}

/// Maps `dL/dW_eff` onto the dense weights and the codewords.
///
/// `W_eff[o, i, e] = alpha[o] * b[o, i, e]` with `alpha[o] = mean |w[o, ..]|`.
/// The alpha path is exact; the straight-through path through `b` (with the
/// outlier divisor) is added only under [`GradMode::Surrogate`].
fn weight_grads(
    layer: &ConvLayer,
    eff: &Effective,
    dweff: &[f64],
    cfg: &StepConfig,
) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
    let Some((signs, alpha, assignment)) = &eff.binary else {
        return Ok((dweff.to_vec(), None));
    };
    let cb = layer
        .codebook
        .as_ref()
        .expect("sub-bit layers carry a codebook");
    let shape = layer.weights.shape;
    let n = shape.kernel_len();
    let per_out = shape.c_in * n;
    let kshape = KernelShape::try_from(shape)?;
    let mut dw = vec![0.0; shape.len()];
    let mut dcb = vec![vec![0.0; n]; cb.len()];
    for o in 0..shape.c_out {
        let range = o * per_out..(o + 1) * per_out;
        let dalpha: f64 = dweff[range.clone()]
            .iter()
            .zip(&signs[range.clone()])
            .map(|(g, &s)| g * s as f64)
            .sum();
        for (d, &w) in dw[range].iter_mut().zip(layer.weights.output_channel(o)) {
            let sgn = if w > 0.0 {
                1.0
            } else if w < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d = dalpha * sgn / per_out as f64;
        }
        for i in 0..shape.c_in {
            let k = shape.kernel_index(o, i);
            let gk: Vec<f64> = dweff[k * n..(k + 1) * n]
                .iter()
                .map(|g| alpha[o] * g)
                .collect();
            for (c, g) in dcb[assignment.indices[k] as usize].iter_mut().zip(&gk) {
                *c += g;
            }
            if cfg.grad_mode == GradMode::Surrogate {
                let kb = &signs[k * n..(k + 1) * n];
                let ste = match assignment.reports.get(k) {
                    Some(report) => osquant_backward(&gk, kb, kshape, report)?,
                    None => ste_backward(&gk, kb)?,
                };
                for (d, g) in dw[k * n..(k + 1) * n].iter_mut().zip(ste) {
                    *d += g;
                }
            }
        }
    }
    Ok((dw, Some(dcb)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    slots: Vec<AdamSlot>,
    step: u64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn begin(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, AdamSlot::default);
        }
        let s = &mut self.slots[slot];
        if s.m.len() != params.len() {
            s.m = vec![0.0; params.len()];
            s.v = vec![0.0; params.len()];
        }
        let c1 = 1.0 - Self::B1.powi(self.step as i32);
        let c2 = 1.0 - Self::B2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut s.m).zip(&mut s.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fence coefficient; `inf` disables outlier detection.
    pub gamma: f64,
    /// Plain nearest-codeword assignment instead of outlier-aware.
    pub baseline: bool,
    pub lambda: f64,
    pub lr: f64,
    /// Step size for the codebook latents.
    pub codebook_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Stop after the first epoch whose accuracy reaches this.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: crate::osquant::DEFAULT_GAMMA,
            baseline: false,
            lambda: 0.0,
            lr: DEFAULT_LR,
            codebook_lr: 0.05,
            epochs: 200,
            seed: 0,
            batch_size: 20,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn quantizer(&self) -> Quantizer {
        if self.baseline {
            Quantizer::Baseline
        } else {
            Quantizer::OsQuant { gamma: self.gamma }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("lr", self.lr)?;
        positive("codebook_lr", self.codebook_lr)?;
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Means over the epoch's training batches, before each update.
    pub loss: f64,
    pub ce: f64,
    pub mpfd: f64,
    /// Accuracy of a full pass over the data after the epoch.
    pub acc: f64,
    pub outlier_frac: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.6},{:.6}",
            m.epoch, m.loss, m.ce, m.mpfd, m.acc, m.outlier_frac
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ToyNet,
    pub metrics: Vec<EpochMetrics>,
}

fn check_dataset(spec: &ToyNetSpec, data: &Dataset) -> Result<()> {
    if data.samples.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if data.input != spec.input || data.timesteps != spec.timesteps {
        return Err(shape_err(
            (spec.input, spec.timesteps),
            (data.input, data.timesteps),
        ));
    }
    if let Some(s) = data.samples.iter().find(|s| s.label >= spec.classes) {
        return Err(Error::InvalidConfig(format!(
            "label {} outside {} classes",
            s.label, spec.classes
        )));
    }
    Ok(())
}

fn batches<'a>(data: &'a Dataset, order: &[usize], size: usize) -> Result<Vec<Batch>> {
    order
        .chunks(size)
        .map(|chunk| {
            let samples: Vec<&'a Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            Batch::from_samples(&samples)
        })
        .collect()
}

/// Accuracy of `net` on `data` in fixed batches.
pub fn evaluate(
    net: &ToyNet,
    data: &Dataset,
    batch_size: usize,
    quantizer: Quantizer,
) -> Result<f64> {
    let order: Vec<usize> = (0..data.samples.len()).collect();
    let mut correct = 0;
    for batch in batches(data, &order, batch_size)? {
        let fwd = forward(net, &batch, quantizer)?;
        correct += cross_entropy(&fwd.logits, &batch.labels).2;
    }
    Ok(correct as f64 / data.samples.len() as f64)
}

/// Initializes a net from `cfg.seed` and trains it.
pub fn train_toy(
    spec: &ToyNetSpec,
    cfg: &TrainConfig,
    data: &Dataset,
    teacher: Option<&ToyNet>,
) -> Result<TrainOutcome> {
    let net = ToyNet::init(spec, WeightMode::SubBit, cfg.seed)?;
    train_net(net, cfg, data, teacher)
}

/// Trains `net` in place of a fresh initialization. Teachers run on every
/// batch with their own weight mode; conv layers are paired one to one.
pub fn train_net(
    mut net: ToyNet,
    cfg: &TrainConfig,
    data: &Dataset,
    teacher: Option<&ToyNet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.spec.validate()?;
    check_dataset(&net.spec, data)?;
    let pairing = LayerPairing::identity(net.convs.len());
    if let Some(t) = teacher {
        pairing.validate(t.convs.len(), net.convs.len())?;
        if t.spec.timesteps != net.spec.timesteps || t.spec.input != net.spec.input {
            return Err(Error::InvalidConfig(
                "teacher input or timesteps differ from the student".into(),
            ));
        }
    }
    let quantizer = cfg.quantizer();
    let step_cfg = StepConfig {
        quantizer,
        lambda: cfg.lambda,
        grad_mode: GradMode::Surrogate,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let all = batches(data, &order, cfg.batch_size)?;
        for (step, batch) in all.iter().enumerate() {
            let teacher_pot = match teacher {
                Some(t) => Some(forward(t, batch, quantizer)?.potentials),
                None => None,
            };
            let record = teacher_pot.as_ref().map(|p| TeacherRecord {
                potentials: p,
                pairing: &pairing,
            });
            let (parts, grads, fwd) = loss_and_grads(&net, batch, record.as_ref(), &step_cfg)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "loss {} (ce {}, mpfd {})",
                        parts.total, parts.ce, parts.mpfd
                    ),
                });
            }
            sums.0 += parts.total;
            sums.1 += parts.ce;
            sums.2 += parts.mpfd;
            apply(&mut net, &grads, &fwd, &mut adam, cfg)?;
        }
        let n = all.len() as f64;
        let acc = evaluate(&net, data, cfg.batch_size, quantizer)?;
        metrics.push(EpochMetrics {
            epoch,
            loss: sums.0 / n,
            ce: sums.1 / n,
            mpfd: sums.2 / n,
            acc,
            outlier_frac: net.outlier_fraction(cfg.gamma)?,
        });
        if cfg.target_accuracy.is_some_and(|target| acc >= target) {
            break;
        }
    }
    Ok(TrainOutcome { net, metrics })
}

fn apply(
    net: &mut ToyNet,
    grads: &Grads,
    fwd: &Forward,
    adam: &mut Adam,
    cfg: &TrainConfig,
) -> Result<()> {
    adam.begin();
    let mut slot = 0;
    for (l, layer) in net.convs.iter_mut().enumerate() {
        adam.update(slot, &mut layer.weights.values, &grads.conv[l], cfg.lr);
        adam.update(slot + 1, &mut layer.bn_gamma, &grads.bn_gamma[l], cfg.lr);
        adam.update(slot + 2, &mut layer.bn_beta, &grads.bn_beta[l], cfg.lr);
        slot += 3;
        if let (Some(cb), Some(g)) = (layer.codebook.as_mut(), &grads.codebook[l]) {
            cb.update_latents(g, cfg.codebook_lr)?;
        }
        let steps = fwd.batch_stats.len() as f64;
        for c in 0..layer.running_mean.len() {
            let mean = fwd.batch_stats.iter().map(|s| s[l].0[c]).sum::<f64>() / steps;
            let var = fwd.batch_stats.iter().map(|s| s[l].1[c]).sum::<f64>() / steps;
            layer.running_mean[c] =
                (1.0 - BN_MOMENTUM) * layer.running_mean[c] + BN_MOMENTUM * mean;
            layer.running_var[c] = (1.0 - BN_MOMENTUM) * layer.running_var[c] + BN_MOMENTUM * var;
        }
    }
    adam.update(slot, &mut net.fc_w, &grads.fc_w, cfg.lr);
    adam.update(slot + 1, &mut net.fc_b, &grads.fc_b, cfg.lr);
    Ok(())
}

/// Paths written by [`save_checkpoint`].
pub fn checkpoint_paths(stem: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let stem = stem.as_ref();
    (stem.with_extension("s2nn"), stem.with_extension("json"))
}

/// Writes the packed conv stack and a JSON sidecar with the full net.
pub fn save_checkpoint(
    stem: impl AsRef<Path>,
    net: &ToyNet,
    quantizer: Quantizer,
) -> Result<(PathBuf, PathBuf)> {
    let (model, sidecar) = checkpoint_paths(stem);
    let (layers, _) = net.export(quantizer)?;
    std::fs::write(&model, pack(&layers)?)?;
    let json = serde_json::to_vec_pretty(net).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(&sidecar, json)?;
    Ok((model, sidecar))
}

pub fn load_net(sidecar: impl AsRef<Path>) -> Result<ToyNet> {
    let path = sidecar.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let net: ToyNet = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    net.spec.validate()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ToyNetSpec {
        ToyNetSpec::new(
            (1, 6, 6),
            vec![
                ConvSpec {
                    c_in: 1,
                    c_out: 3,
                    k: 3,
                    eta: 3,
                },
                ConvSpec {
                    c_in: 3,
                    c_out: 2,
                    k: 3,
                    eta: 3,
                },
            ],
            2,
            3,
        )
    }

    fn random_batch(spec: &ToyNetSpec, b: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w) = spec.input;
        let frames = (0..spec.timesteps)
            .map(|_| {
                let data = (0..b * c * h * w)
                    .map(|_| rng.gen_bool(0.4) as u8 as f64)
                    .collect();
                Tensor4::from_vec((b, c, h, w), data).unwrap()
            })
            .collect();
        Batch {
            frames,
            labels: (0..b).map(|i| i % 2).collect(),
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ConvShape::new(2, 3, 3, 3);
        let x = Tensor4::from_vec(
            (2, 3, 4, 5),
            (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = Tensor4::from_vec(
            (2, 2, 4, 5),
            (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // L = <r, conv(x, w)>
        let l = |x: &Tensor4, w: &[f64]| -> f64 {
            conv_forward(x, w, s)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (dw, dx) = conv_backward(&x, &w, s, &r, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        for k in [0, 7, 20, 53] {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[k] += h;
            m[k] -= h;
            assert!(rel_err((l(&x, &p) - l(&x, &m)) / (2.0 * h), dw[k]) < 1e-6);
        }
        for n in [0, 13, 59, 119] {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[n] += h;
            m.data_mut()[n] -= h;
            assert!(rel_err((l(&p, &w) - l(&m, &w)) / (2.0 * h), dx.data()[n]) < 1e-6);
        }
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor4::from_vec(
            (3, 2, 2, 2),
            (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let r: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = vec![0.7, 1.3];
        let beta = vec![0.1, -0.2];
        let l = |z: &Tensor4, g: &[f64], b: &[f64]| -> f64 {
            bn_forward(z, g, b)
                .0
                .data()
                .iter()
                .zip(&r)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, xhat, _, var) = bn_forward(&z, &gamma, &beta);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let dy = Tensor4::from_vec(z.shape(), r.clone()).unwrap();
        let (dz, dg, db) = bn_backward(&dy, &xhat, &gamma, &inv);
        let h = 1e-6;
        for n in 0..24 {
            let (mut p, mut m) = (z.clone(), z.clone());
            p.data_mut()[n] += h;
            m.data_mut()[n] -= h;
            let fd = (l(&p, &gamma, &beta) - l(&m, &gamma, &beta)) / (2.0 * h);
            assert!(
                (fd - dz.data()[n]).abs() < 1e-6,
                "{n}: {fd} vs {}",
                dz.data()[n]
            );
        }
        for c in 0..2 {
            let (mut p, mut m) = (gamma.clone(), gamma.clone());
            p[c] += h;
            m[c] -= h;
            assert!(rel_err((l(&z, &p, &beta) - l(&z, &m, &beta)) / (2.0 * h), dg[c]) < 1e-6);
            let (mut p, mut m) = (beta.clone(), beta.clone());
            p[c] += h;
            m[c] -= h;
            assert!(rel_err((l(&z, &gamma, &p) - l(&z, &gamma, &m)) / (2.0 * h), db[c]) < 1e-6);
        }
    }

    #[test]
    fn no_teacher_means_cross_entropy_only() {
        let spec = small_spec();
        let net = ToyNet::init(&spec, WeightMode::SubBit, 3).unwrap();
        let batch = random_batch(&spec, 4, 4);
        let cfg = StepConfig {
            quantizer: Quantizer::default(),
            lambda: 1.0,
            grad_mode: GradMode::Surrogate,
        };
        let (parts, _, _) = loss_and_grads(&net, &batch, None, &cfg).unwrap();
        assert_eq!(parts.mpfd, 0.0);
        assert_eq!(parts.total, parts.ce);
    }

    #[test]
    fn copied_student_has_zero_distillation_loss() {
        let spec = small_spec();
        let net = ToyNet::init(&spec, WeightMode::SubBit, 5).unwrap();
        let teacher = net.clone();
        let batch = random_batch(&spec, 4, 6);
        let q = Quantizer::default();
        let pot = forward(&teacher, &batch, q).unwrap().potentials;
        let pairing = LayerPairing::identity(2);
        let rec = TeacherRecord {
            potentials: &pot,
            pairing: &pairing,
        };
        let fwd = forward(&net, &batch, q).unwrap();
        let parts = loss(&fwd, &batch.labels, Some(&rec), 1.0, spec.timesteps).unwrap();
        assert_eq!(parts.mpfd, 0.0);
    }

    /// Central differences of the full loss with respect to individual
    /// parameters, skipping probes that flip a spike or an assignment.
    #[test]
    fn exact_gradients_match_finite_differences() {
        let spec = small_spec();
        let net = ToyNet::init(&spec, WeightMode::SubBit, 7).unwrap();
        let teacher = ToyNet::init(&spec, WeightMode::Dense, 8).unwrap();
        let batch = random_batch(&spec, 5, 9);
        let q = Quantizer::default();
        let pot = forward(&teacher, &batch, q).unwrap().potentials;
        let pairing = LayerPairing::identity(2);
        let rec = TeacherRecord {
            potentials: &pot,
            pairing: &pairing,
        };
        let cfg = StepConfig {
            quantizer: q,
            lambda: 1.0,
            grad_mode: GradMode::Exact,
        };
        let (parts, grads, base) = loss_and_grads(&net, &batch, Some(&rec), &cfg).unwrap();
        assert!(parts.mpfd > 0.0);
        let eval = |n: &ToyNet| -> Option<f64> {
            let f = forward(n, &batch, q).unwrap();
            if f.assignments != base.assignments || f.spikes() != base.spikes() {
                return None;
            }
            Some(
                loss(&f, &batch.labels, Some(&rec), 1.0, spec.timesteps)
                    .unwrap()
                    .total,
            )
        };
        let h = 1e-6;
        let mut checked = 0;
        for l in 0..2 {
            for idx in (0..net.convs[l].weights.values.len()).step_by(5) {
                let (mut p, mut m) = (net.clone(), net.clone());
                p.convs[l].weights.values[idx] += h;
                m.convs[l].weights.values[idx] -= h;
                let (Some(lp), Some(lm)) = (eval(&p), eval(&m)) else {
                    continue;
                };
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.conv[l][idx];
                if fd.abs().max(an.abs()) < 1e-7 {
                    continue;
                }
                assert!(
                    rel_err(fd, an) < 1e-3,
                    "layer {l} weight {idx}: fd {fd} analytic {an}"
                );
                checked += 1;
            }
            for c in 0..net.convs[l].bn_gamma.len() {
                let (mut p, mut m) = (net.clone(), net.clone());
                p.convs[l].bn_gamma[c] += h;
                m.convs[l].bn_gamma[c] -= h;
                if let (Some(lp), Some(lm)) = (eval(&p), eval(&m)) {
                    assert!(rel_err((lp - lm) / (2.0 * h), grads.bn_gamma[l][c]) < 1e-3);
                }
            }
        }
        for idx in (0..net.fc_w.len()).step_by(7) {
            let (mut p, mut m) = (net.clone(), net.clone());
            p.fc_w[idx] += h;
            m.fc_w[idx] -= h;
            let fd = (eval(&p).unwrap() - eval(&m).unwrap()) / (2.0 * h);
            if fd.abs().max(grads.fc_w[idx].abs()) > 1e-9 {
                assert!(rel_err(fd, grads.fc_w[idx]) < 1e-3);
            }
        }
        assert!(checked >= 8, "only {checked} weights probed");
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            epochs: 3,
            seed,
            batch_size: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn reruns_are_identical() {
        let spec = ToyNetSpec::two_conv(4);
        let data = synthetic_dataset(40, 4, 11);
        let a = train_toy(&spec, &quick_config(3), &data, None).unwrap();
        let b = train_toy(&spec, &quick_config(3), &data, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.net, b.net);
        let c = train_toy(&spec, &quick_config(4), &data, None).unwrap();
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn disabled_fences_match_baseline() {
        let spec = ToyNetSpec::two_conv(4);
        let data = synthetic_dataset(40, 4, 12);
        let os = TrainConfig {
            gamma: f64::INFINITY,
            ..quick_config(5)
        };
        let base = TrainConfig {
            baseline: true,
            ..os.clone()
        };
        let a = train_toy(&spec, &os, &data, None).unwrap();
        let b = train_toy(&spec, &base, &data, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.net, b.net);
        let pa = pack(&a.net.export(os.quantizer()).unwrap().0).unwrap();
        let pb = pack(&b.net.export(base.quantizer()).unwrap().0).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn dataset_is_seeded() {
        let a = synthetic_dataset(10, 4, 1);
        assert_eq!(a, synthetic_dataset(10, 4, 1));
        assert_ne!(a, synthetic_dataset(10, 4, 2));
        assert_eq!(a.samples.iter().filter(|s| s.label == 1).count(), 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = small_spec();
        let net = ToyNet::init(&spec, WeightMode::SubBit, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (model, sidecar) =
            save_checkpoint(dir.path().join("ckpt"), &net, Quantizer::default()).unwrap();
        assert_eq!(load_net(&sidecar).unwrap(), net);
        let layers = crate::pack::read_model(&model).unwrap();
        assert_eq!(layers, net.export(Quantizer::default()).unwrap().0);
        assert!(
            matches!(load_net(dir.path().join("missing.json")), Err(Error::Io(m)) if m.contains("missing.json"))
        );
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            gamma: f64::NAN,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let mut spec = small_spec();
        spec.convs[1].c_in = 5;
        assert!(spec.validate().is_err());
    }
}
