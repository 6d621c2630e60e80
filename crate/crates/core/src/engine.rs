//! Inference over binary and packed sub-bit convolution layers.
//!
//! Convolutions are stride 1 with zero same-padding and compute
//! cross-correlation. The receptive field of one input channel is packed into
//! a `u64` using the bit order of [`CodewordId`], so the dot product of a
//! `+1/-1` kernel with a `{0,1}` patch is
//! `2 * popcount(plus & patch) - popcount(patch)`.
//!
//! The packed path consumes only codeword indices, the codebook and channel
//! scales. Nothing here measures distances or inspects real-valued weights.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarize::{BinaryConvWeights, ConvShape};
use crate::codebook::{CodewordId, MAX_KERNEL_ELEMENTS};
use crate::error::{shape_err, Error, Result};
use crate::neuron::{lif_step, LifConfig, LifState};
use crate::pack::QuantizedLayer;
use crate::tensor::{firing_rate, Shape4, SpikeTensor, Tensor4};

/// Exact operation counts. Counters from different layers or calls add up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpCounters {
    /// Kernel/patch bitwise dot products actually evaluated.
    pub multiplies: u64,
    /// Accumulations of a dot product into an output element.
    pub adds: u64,
    /// Dot products served from the per-position lookup bank.
    pub lut_hits: u64,
}

impl Add for OpCounters {
    type Output = OpCounters;

    fn add(self, rhs: OpCounters) -> OpCounters {
        OpCounters {
            multiplies: self.multiplies + rhs.multiplies,
            adds: self.adds + rhs.adds,
            lut_hits: self.lut_hits + rhs.lut_hits,
        }
    }
}

impl AddAssign for OpCounters {
    fn add_assign(&mut self, rhs: OpCounters) {
        *self = *self + rhs;
    }
}

impl Sum for OpCounters {
    fn sum<I: Iterator<Item = OpCounters>>(iter: I) -> OpCounters {
        iter.fold(OpCounters::default(), Add::add)
    }
}

/// Packed receptive fields, indexed `((b * c + i) * h + y) * w + x`.
struct Patches {
    shape: Shape4,
    masks: Vec<u64>,
}

impl Patches {
    fn build(s: &SpikeTensor, k_h: usize, k_w: usize) -> Patches {
        let shape = s.shape();
        let (h, w) = (shape.h, shape.w);
        let (ph, pw) = ((k_h - 1) / 2, (k_w - 1) / 2);
        let mut masks = vec![0u64; shape.len()];
        masks
            .par_chunks_mut((h * w).max(1))
            .enumerate()
            .for_each(|(plane, out)| {
                let (bi, i) = (plane / shape.c, plane % shape.c);
                for y in 0..h {
                    for x in 0..w {
                        let mut m = 0u64;
                        for r in 0..k_h {
                            let Some(yy) = (y + r).checked_sub(ph).filter(|&v| v < h) else {
                                continue;
                            };
                            for c in 0..k_w {
                                let Some(xx) = (x + c).checked_sub(pw).filter(|&v| v < w) else {
                                    continue;
                                };
                                if s.get(bi, i, yy, xx) {
                                    m |= 1 << (r * k_w + c);
                                }
                            }
                        }
                        out[y * w + x] = m;
                    }
                }
            });
        Patches { shape, masks }
    }

    #[inline]
    fn at(&self, b: usize, i: usize, y: usize, x: usize) -> u64 {
        self.masks[self.shape.offset(b, i, y, x)]
    }
}

#[inline]
fn dot(plus: u64, patch: u64) -> i64 {
    2 * (plus & patch).count_ones() as i64 - patch.count_ones() as i64
}

fn check_input(s: Shape4, conv: ConvShape) -> Result<()> {
    if s.c != conv.c_in {
        return Err(shape_err(
            format!("input with {} channels", conv.c_in),
            format!("{} channels", s.c),
        ));
    }
    let n = conv.kernel_len();
    if n == 0 || n > MAX_KERNEL_ELEMENTS {
        return Err(Error::InvalidConfig(format!(
            "kernel {}x{} outside 1..={MAX_KERNEL_ELEMENTS} elements",
            conv.k_h, conv.k_w
        )));
    }
    Ok(())
}

/// Scatters per-`(batch, output row)` integer accumulators, laid out
/// `o * w + x`, into an alpha-scaled `(b, c_out, h, w)` tensor.
fn scatter(
    s: Shape4,
    conv: ConvShape,
    alpha: &[f64],
    rows: Vec<(Vec<i64>, OpCounters)>,
) -> (Tensor4, OpCounters) {
    let (h, w) = (s.h, s.w);
    let mut out = Tensor4::zeros((s.b, conv.c_out, h, w));
    let mut counters = OpCounters::default();
    for (n, (acc, ctr)) in rows.into_iter().enumerate() {
        let (bi, y) = (n / h, n % h);
        counters += ctr;
        for o in 0..conv.c_out {
            for x in 0..w {
                out.set(bi, o, y, x, alpha[o] * acc[o * w + x] as f64);
            }
        }
    }
    (out, counters)
}

/// Reference binary convolution: integer `+1/-1` accumulation over `{0,1}`
/// spikes, then a per-output-channel multiply by `alpha`.
pub fn binary_conv(s: &SpikeTensor, w: &BinaryConvWeights) -> Result<Tensor4> {
    Ok(binary_conv_counted(s, w)?.0)
}

/// [`binary_conv`] plus its operation counts. Every kernel is evaluated at
/// every position, so `multiplies == adds` and `lut_hits == 0`.
pub fn binary_conv_counted(
    s: &SpikeTensor,
    w: &BinaryConvWeights,
) -> Result<(Tensor4, OpCounters)> {
    let conv = w.shape;
    check_input(s.shape(), conv)?;
    if w.signs.len() != conv.len() || w.alpha.len() != conv.c_out {
        return Err(shape_err(conv, (w.signs.len(), w.alpha.len())));
    }
    let patches = Patches::build(s, conv.k_h, conv.k_w);
    let plus: Vec<u64> = w
        .kernels()
        .map(|k| CodewordId::encode(k).plus_mask())
        .collect();
    let shape = s.shape();
    let (h, width) = (shape.h, shape.w);
    let rows = (0..shape.b * h)
        .into_par_iter()
        .map(|n| {
            let (bi, y) = (n / h, n % h);
            let mut acc = vec![0i64; conv.c_out * width];
            for o in 0..conv.c_out {
                for i in 0..conv.c_in {
                    let k = plus[conv.kernel_index(o, i)];
                    for x in 0..width {
                        acc[o * width + x] += dot(k, patches.at(bi, i, y, x));
                    }
                }
            }
            let n = (conv.c_out * conv.c_in * width) as u64;
            let ctr = OpCounters {
                multiplies: n,
                adds: n,
                lut_hits: 0,
            };
            (acc, ctr)
        })
        .collect();
    Ok(scatter(shape, conv, &w.alpha, rows))
}

/// Scratch lookup bank keyed by codeword index. A slot is valid only while its
/// stamp equals the current generation, which makes clearing O(1).
struct Bank {
    stamp: Vec<u64>,
    value: Vec<i64>,
    generation: u64,
}

impl Bank {
    fn new(len: usize) -> Bank {
        Bank {
            stamp: vec![0; len],
            value: vec![0; len],
            generation: 0,
        }
    }

    fn clear(&mut self) {
        self.generation += 1;
    }
}

/// Sub-bit convolution over a packed layer. For each `(input channel,
/// position)` every distinct codeword in that channel's index column is
/// evaluated once and reused across output channels.
///
/// The output equals [`binary_conv`] on [`QuantizedLayer::reconstruct`].
pub fn subbit_conv(s: &SpikeTensor, q: &QuantizedLayer) -> Result<(Tensor4, OpCounters)> {
    q.validate(0)?;
    let conv = q.shape;
    check_input(s.shape(), conv)?;
    let patches = Patches::build(s, conv.k_h, conv.k_w);
    let plus: Vec<u64> = q.codewords.iter().map(|c| c.plus_mask()).collect();
    let alpha: Vec<f64> = q.alpha.iter().map(|&a| a as f64).collect();
    let width = s.shape().w;
    let bank_len = plus.len();
    let shape = s.shape();
    let h = shape.h;

    let rows: Vec<(Vec<i64>, OpCounters)> = (0..shape.b * h)
        .into_par_iter()
        .map_init(
            || Bank::new(bank_len),
            |bank, n| {
                let (bi, y) = (n / h, n % h);
                let mut acc = vec![0i64; conv.c_out * width];
                let mut ctr = OpCounters::default();
                for x in 0..width {
                    for i in 0..conv.c_in {
                        bank.clear();
                        let patch = patches.at(bi, i, y, x);
                        for o in 0..conv.c_out {
                            let idx = q.indices[conv.kernel_index(o, i)] as usize;
                            let v = if bank.stamp[idx] == bank.generation {
                                ctr.lut_hits += 1;
                                bank.value[idx]
                            } else {
                                ctr.multiplies += 1;
                                let v = dot(plus[idx], patch);
                                bank.stamp[idx] = bank.generation;
                                bank.value[idx] = v;
                                v
                            };
                            acc[o * width + x] += v;
                            ctr.adds += 1;
                        }
                    }
                }
                (acc, ctr)
            },
        )
        .collect();

    Ok(scatter(shape, conv, &alpha, rows))
}

/// Per-channel affine on the synaptic drive, `scale * x + shift`. This is
/// where inference-time batch norm folds in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAffine {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ChannelAffine {
    pub fn identity(channels: usize) -> Self {
        ChannelAffine {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
        }
    }

    fn apply(&self, drive: &mut Tensor4) -> Result<()> {
        let s = drive.shape();
        if self.scale.len() != s.c || self.shift.len() != s.c {
            return Err(shape_err(s.c, (self.scale.len(), self.shift.len())));
        }
        let plane = s.h * s.w;
        for (n, chunk) in drive.data_mut().chunks_mut(plane.max(1)).enumerate() {
            let c = n % s.c;
            for v in chunk {
                *v = self.scale[c] * *v + self.shift[c];
            }
        }
        Ok(())
    }
}

/// Result of running a spiking conv stack over `T` timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    /// `[batch][class]`: spike count of each last-layer channel averaged over
    /// time and space.
    pub logits: Vec<Vec<f64>>,
    pub counters: OpCounters,
    /// Per-layer firing rate over all timesteps.
    pub firing_rates: Vec<f64>,
}

fn run_stack<F>(
    n_layers: usize,
    affine: &[ChannelAffine],
    lif: &LifConfig,
    inputs: &[SpikeTensor],
    conv: F,
) -> Result<InferenceOutput>
where
    F: Fn(usize, &SpikeTensor) -> Result<(Tensor4, OpCounters)>,
{
    lif.validate()?;
    if inputs.is_empty() {
        return Err(Error::NoTimesteps);
    }
    if n_layers == 0 {
        return Err(Error::InvalidConfig("model has no layers".into()));
    }
    if !affine.is_empty() && affine.len() != n_layers {
        return Err(shape_err(n_layers, affine.len()));
    }
    let mut states: Vec<Option<LifState>> = vec![None; n_layers];
    let mut spikes: Vec<Vec<SpikeTensor>> = vec![Vec::with_capacity(inputs.len()); n_layers];
    let mut counters = OpCounters::default();
    for x in inputs {
        let mut s = x.clone();
        for l in 0..n_layers {
            let (mut drive, ctr) = conv(l, &s)?;
            counters += ctr;
            if let Some(a) = affine.get(l) {
                a.apply(&mut drive)?;
            }
            let state = states[l]
                .take()
                .unwrap_or_else(|| LifState::zeros(drive.shape()));
            let (out, next) = lif_step(&state, &drive, lif)?;
            states[l] = Some(next);
            spikes[l].push(out.clone());
            s = out;
        }
    }
    let last = &spikes[n_layers - 1];
    let shape = last[0].shape();
    let denom = (inputs.len() * shape.h * shape.w) as f64;
    let logits = (0..shape.b)
        .map(|b| {
            (0..shape.c)
                .map(|c| {
                    let mut n = 0u64;
                    for t in last {
                        for y in 0..shape.h {
                            for x in 0..shape.w {
                                n += t.get(b, c, y, x) as u64;
                            }
                        }
                    }
                    n as f64 / denom
                })
                .collect()
        })
        .collect();
    let firing_rates = spikes
        .iter()
        .map(|s| firing_rate(s))
        .collect::<Result<_>>()?;
    Ok(InferenceOutput {
        logits,
        counters,
        firing_rates,
    })
}

/// Runs packed layers as a conv, affine, LIF stack. `affine` is either empty
/// (identity) or one entry per layer.
pub fn run_packed(
    layers: &[QuantizedLayer],
    affine: &[ChannelAffine],
    lif: &LifConfig,
    inputs: &[SpikeTensor],
) -> Result<InferenceOutput> {
    run_stack(layers.len(), affine, lif, inputs, |l, s| {
        subbit_conv(s, &layers[l])
    })
}

/// [`run_packed`] with the reference binary convolution.
pub fn run_binary(
    layers: &[BinaryConvWeights],
    affine: &[ChannelAffine],
    lif: &LifConfig,
    inputs: &[SpikeTensor],
) -> Result<InferenceOutput> {
    run_stack(layers.len(), affine, lif, inputs, |l, s| {
        binary_conv_counted(s, &layers[l])
    })
}

/// Dense and spike-driven operation counts of one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub flops: u64,
    pub sops: f64,
}

/// Per-sample counts for a chain of same-padded convs on an `h x w` input.
/// Each MAC counts as 2 ops, and `sops = fr * t * flops`.
pub fn count_ops(
    layers: &[ConvShape],
    h: usize,
    w: usize,
    t: usize,
    fr: f64,
) -> Result<Vec<LayerOps>> {
    if t == 0 {
        return Err(Error::NoTimesteps);
    }
    if !(0.0..=1.0).contains(&fr) {
        return Err(Error::InvalidConfig(format!(
            "firing rate {fr} outside [0, 1]"
        )));
    }
    Ok(layers
        .iter()
        .map(|c| {
            let flops = 2 * (c.kernel_len() * c.c_in * c.c_out * h * w) as u64;
            LayerOps {
                flops,
                sops: fr * t as f64 * flops as f64,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::sample_codebook;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct real-valued cross-correlation with zero padding.
    fn naive_conv(s: &SpikeTensor, w: &BinaryConvWeights) -> Tensor4 {
        let sh = s.shape();
        let c = w.shape;
        let (ph, pw) = ((c.k_h - 1) as isize / 2, (c.k_w - 1) as isize / 2);
        let mut out = Tensor4::zeros((sh.b, c.c_out, sh.h, sh.w));
        for b in 0..sh.b {
            for o in 0..c.c_out {
                for y in 0..sh.h {
                    for x in 0..sh.w {
                        let mut sum = 0.0;
                        for i in 0..c.c_in {
                            let k = w.kernel(o, i);
                            for r in 0..c.k_h {
                                for q in 0..c.k_w {
                                    let yy = y as isize + r as isize - ph;
                                    let xx = x as isize + q as isize - pw;
                                    if yy < 0
                                        || xx < 0
                                        || yy >= sh.h as isize
                                        || xx >= sh.w as isize
                                    {
                                        continue;
                                    }
                                    if s.get(b, i, yy as usize, xx as usize) {
                                        sum += k[r * c.k_w + q] as f64;
                                    }
                                }
                            }
                        }
                        out.set(b, o, y, x, w.alpha[o] * sum);
                    }
                }
            }
        }
        out
    }

    fn random_spikes(rng: &mut impl Rng, shape: Shape4, p: f64) -> SpikeTensor {
        let bits: Vec<u8> = (0..shape.len()).map(|_| rng.gen_bool(p) as u8).collect();
        SpikeTensor::from_bits(shape, &bits).unwrap()
    }

    fn random_layer(
        rng: &mut ChaCha8Rng,
        c_out: usize,
        c_in: usize,
        k: usize,
        eta: u32,
    ) -> QuantizedLayer {
        let cb = sample_codebook(k, k, eta, rng.gen()).unwrap();
        let shape = ConvShape::new(c_out, c_in, k, k);
        let indices = (0..shape.kernels())
            .map(|_| rng.gen_range(0..cb.len() as u32))
            .collect();
        let alpha = (0..c_out).map(|_| rng.gen_range(0.01f32..2.0)).collect();
        QuantizedLayer::new(&cb, shape, indices, alpha).unwrap()
    }

    #[test]
    fn zero_spikes_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_layer(&mut rng, 3, 2, 3, 4);
        let out = binary_conv(&SpikeTensor::zeros((1, 2, 5, 5)), &q.reconstruct()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_patch() {
        let w = BinaryConvWeights::new(ConvShape::new(1, 1, 3, 3), vec![1; 9], vec![0.5]).unwrap();
        let out = binary_conv(&SpikeTensor::ones((1, 1, 3, 3)), &w).unwrap();
        assert_eq!(out.get(0, 0, 1, 1), 9.0 * 0.5);
        assert_eq!(out.get(0, 0, 0, 0), 4.0 * 0.5);
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [2, 3, 5] {
            for _ in 0..10 {
                let q = random_layer(&mut rng, 4, 3, k, 3);
                let w = q.reconstruct();
                let s = random_spikes(&mut rng, Shape4::new(2, 3, 6, 7), 0.4);
                assert_eq!(binary_conv(&s, &w).unwrap(), naive_conv(&s, &w));
            }
        }
    }

    #[test]
    fn identical_indices_share_one_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = random_layer(&mut rng, 8, 3, 3, 4);
        q.indices.iter_mut().for_each(|i| *i = 5);
        let s = random_spikes(&mut rng, Shape4::new(2, 3, 4, 4), 0.5);
        let (_, ctr) = subbit_conv(&s, &q).unwrap();
        let sites = (2 * 3 * 4 * 4) as u64;
        assert_eq!(ctr.multiplies, sites);
        assert_eq!(ctr.lut_hits, sites * 7);
        assert_eq!(ctr.adds, sites * 8);
    }

    #[test]
    fn reuse_bound_and_add_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_layer(&mut rng, 256, 2, 3, 4);
        let s = random_spikes(&mut rng, Shape4::new(1, 2, 5, 5), 0.3);
        let (a, sub) = subbit_conv(&s, &q).unwrap();
        let (b, full) = binary_conv_counted(&s, &q.reconstruct()).unwrap();
        assert_eq!(a, b);
        assert_eq!(sub.adds, full.adds);
        assert!(sub.multiplies * 256 <= full.multiplies * 16);
        assert_eq!(sub.multiplies + sub.lut_hits, full.multiplies);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_layer(&mut rng, 2, 3, 3, 2);
        assert!(matches!(
            subbit_conv(&SpikeTensor::zeros((1, 2, 4, 4)), &q),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn op_counts() {
        let one = [ConvShape::new(1, 1, 3, 3)];
        assert_eq!(count_ops(&one, 4, 4, 1, 1.0).unwrap()[0].flops, 2 * 9 * 16);
        assert_eq!(count_ops(&one, 4, 4, 4, 0.0).unwrap()[0].sops, 0.0);
        let a = count_ops(&one, 4, 4, 2, 0.3).unwrap()[0].sops;
        let b = count_ops(&one, 4, 4, 4, 0.3).unwrap()[0].sops;
        assert_eq!(b, 2.0 * a);
        assert!(count_ops(&one, 4, 4, 0, 0.3).is_err());
        assert!(count_ops(&one, 4, 4, 1, 1.5).is_err());
    }

    #[test]
    fn packed_and_binary_stacks_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layers = vec![
            random_layer(&mut rng, 4, 2, 3, 4),
            random_layer(&mut rng, 3, 4, 3, 5),
        ];
        let binary: Vec<_> = layers.iter().map(|q| q.reconstruct()).collect();
        let affine = vec![
            ChannelAffine {
                scale: vec![1.5; 4],
                shift: vec![0.2; 4],
            },
            ChannelAffine::identity(3),
        ];
        let inputs: Vec<_> = (0..4)
            .map(|_| random_spikes(&mut rng, Shape4::new(2, 2, 6, 6), 0.5))
            .collect();
        let lif = LifConfig::default();
        let p = run_packed(&layers, &affine, &lif, &inputs).unwrap();
        let r = run_binary(&binary, &affine, &lif, &inputs).unwrap();
        assert_eq!(p.logits, r.logits);
        assert_eq!(p.firing_rates, r.firing_rates);
        assert_eq!(p.counters.adds, r.counters.adds);
        assert!(p.counters.multiplies < r.counters.multiplies);
        assert_eq!(p.logits.len(), 2);
        assert_eq!(p.logits[0].len(), 3);
        assert!(p.firing_rates.iter().any(|&f| f > 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn subbit_equals_reconstructed(seed in any::<u64>(), k in prop::sample::select(vec![2usize, 3, 5]), eta in 1u32..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c_out = rng.gen_range(1..12);
            let c_in = rng.gen_range(1..4);
            let q = random_layer(&mut rng, c_out, c_in, k, eta);
            let shape = Shape4::new(rng.gen_range(1..3), c_in, rng.gen_range(1..7), rng.gen_range(1..7));
            let s = random_spikes(&mut rng, shape, 0.5);
            let (a, sub) = subbit_conv(&s, &q).unwrap();
            let (b, full) = binary_conv_counted(&s, &q.reconstruct()).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(sub.multiplies <= full.multiplies);
            prop_assert_eq!(sub.adds, full.adds);
        }
    }
}
