//! Binary codewords, compact codebooks and codeword clustering statistics.
//!
//! A `k_h x k_w` binary kernel maps to an integer id whose bit `e` is set
//! when flattened element `e` (row-major) is `+1`. A compact codebook holds
//! `2^eta` distinct codewords sampled from the full set of `2^(k_h*k_w)`
//! kernels, together with real-valued latents that training updates and
//! re-signs.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binarize::{sign, BinaryConvWeights};
use crate::error::{shape_err, Error, Result};

/// Codewords are stored in a `u64`, so kernels are limited to 64 elements.
pub const MAX_KERNEL_ELEMENTS: usize = 64;
/// Largest supported `eta`; beyond this the codebook no longer fits in memory.
pub const MAX_ETA: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CodewordId(pub u64);

impl CodewordId {
    /// Encodes a `+1/-1` kernel. Any non-negative value is read as `+1`.
    pub fn encode(kernel: &[i8]) -> Self {
        assert!(kernel.len() <= MAX_KERNEL_ELEMENTS);
        let mut id = 0u64;
        for (e, &v) in kernel.iter().enumerate() {
            if v >= 0 {
                id |= 1 << e;
            }
        }
        CodewordId(id)
    }

    pub fn from_real(kernel: &[f64]) -> Self {
        assert!(kernel.len() <= MAX_KERNEL_ELEMENTS);
        let mut id = 0u64;
        for (e, &v) in kernel.iter().enumerate() {
            if sign(v) > 0 {
                id |= 1 << e;
            }
        }
        CodewordId(id)
    }

    pub fn decode(self, len: usize) -> Vec<i8> {
        (0..len).map(|e| self.sign_at(e)).collect()
    }

    /// `+1` or `-1` at flattened position `e`.
    #[inline]
    pub fn sign_at(self, e: usize) -> i8 {
        if (self.0 >> e) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Bit mask of the `+1` positions.
    #[inline]
    pub fn plus_mask(self) -> u64 {
        self.0
    }
}

fn check_sub_bit(k_h: usize, k_w: usize, eta: u32) -> Result<()> {
    let elements = k_h * k_w;
    if eta == 0 || eta as usize >= elements {
        return Err(Error::NotSubBit {
            eta,
            k_h,
            k_w,
            elements,
        });
    }
    if elements > MAX_KERNEL_ELEMENTS {
        return Err(Error::InvalidConfig(format!(
            "kernels with more than {MAX_KERNEL_ELEMENTS} elements are not supported"
        )));
    }
    if eta > MAX_ETA {
        return Err(Error::InvalidConfig(format!(
            "eta={eta} exceeds the supported maximum {MAX_ETA}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactCodebook {
    k_h: usize,
    k_w: usize,
    eta: u32,
    codewords: Vec<CodewordId>,
    latents: Vec<Vec<f64>>,
    seed: u64,
}

impl CompactCodebook {
    /// Builds a codebook from explicit codewords; latents start at `+-1`.
    pub fn from_codewords(
        k_h: usize,
        k_w: usize,
        eta: u32,
        codewords: Vec<CodewordId>,
    ) -> Result<Self> {
        check_sub_bit(k_h, k_w, eta)?;
        if codewords.len() != 1usize << eta {
            return Err(shape_err(1usize << eta, codewords.len()));
        }
        let n = k_h * k_w;
        let valid = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
        let mut seen = BTreeMap::new();
        for (pos, id) in codewords.iter().enumerate() {
            if id.0 & !valid != 0 {
                return Err(Error::InvalidConfig(format!(
                    "codeword {} has bits beyond {n} elements",
                    id.0
                )));
            }
            if let Some(first) = seen.insert(*id, pos) {
                return Err(Error::DuplicateCodeword { first, second: pos });
            }
        }
        let latents = codewords
            .iter()
            .map(|id| id.decode(n).into_iter().map(f64::from).collect())
            .collect();
        Ok(CompactCodebook {
            k_h,
            k_w,
            eta,
            codewords,
            latents,
            seed: 0,
        })
    }

    pub fn k_h(&self) -> usize {
        self.k_h
    }

    pub fn k_w(&self) -> usize {
        self.k_w
    }

    pub fn kernel_len(&self) -> usize {
        self.k_h * self.k_w
    }

    pub fn eta(&self) -> u32 {
        self.eta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codewords.is_empty()
    }

    pub fn codewords(&self) -> &[CodewordId] {
        &self.codewords
    }

    pub fn codeword(&self, i: usize) -> CodewordId {
        self.codewords[i]
    }

    pub fn latents(&self) -> &[Vec<f64>] {
        &self.latents
    }

    /// Bits per weight contributed by the index alone.
    pub fn bits_per_weight(&self) -> f64 {
        self.eta as f64 / self.kernel_len() as f64
    }

    /// Gradient step on the latents followed by re-signing. Codewords that
    /// collide with an earlier one after re-signing get their
    /// smallest-magnitude latent flipped until they are distinct again.
    pub fn update_latents(&mut self, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.latents.len() {
            return Err(shape_err(self.latents.len(), grads.len()));
        }
        let n = self.kernel_len();
        for (latent, grad) in self.latents.iter_mut().zip(grads) {
            if grad.len() != n {
                return Err(shape_err(n, grad.len()));
            }
            for (l, g) in latent.iter_mut().zip(grad) {
                *l -= lr * g;
            }
        }
        for i in 0..self.latents.len() {
            self.codewords[i] = CodewordId::from_real(&self.latents[i]);
        }
        self.repair_collisions();
        Ok(())
    }

    fn repair_collisions(&mut self) {
        let mut taken: HashSet<CodewordId> = HashSet::with_capacity(self.codewords.len());
        for i in 0..self.codewords.len() {
            if taken.insert(self.codewords[i]) {
                continue;
            }
            let flips = cheapest_distinct_flip(&self.latents[i], &taken);
            for e in flips {
                let l = &mut self.latents[i][e];
                *l = if *l == 0.0 { -f64::EPSILON } else { -*l };
            }
            self.codewords[i] = CodewordId::from_real(&self.latents[i]);
            let fresh = taken.insert(self.codewords[i]);
            debug_assert!(fresh);
        }
    }
}

/// Smallest set of element flips (tried by increasing size, elements in
/// increasing latent magnitude) that makes `latent`'s sign pattern unused.
fn cheapest_distinct_flip(latent: &[f64], taken: &HashSet<CodewordId>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..latent.len()).collect();
    order.sort_by(|&a, &b| latent[a].abs().total_cmp(&latent[b].abs()).then(a.cmp(&b)));
    let base = CodewordId::from_real(latent).0;
    for size in 1..=order.len() {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let mask = combo.iter().fold(0u64, |m, &c| m | (1 << order[c]));
            if !taken.contains(&CodewordId(base ^ mask)) {
                return combo.iter().map(|&c| order[c]).collect();
            }
            // next combination in lexicographic order
            let mut pos = size;
            while pos > 0 && combo[pos - 1] == order.len() - size + pos - 1 {
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
            combo[pos - 1] += 1;
            for q in pos..size {
                combo[q] = combo[q - 1] + 1;
            }
        }
    }
    unreachable!("a compact codebook is strictly smaller than the full codebook")
}

/// Samples `2^eta` distinct codewords uniformly without replacement using
/// ChaCha8 seeded with `seed`.
pub fn sample_codebook(k_w: usize, k_h: usize, eta: u32, seed: u64) -> Result<CompactCodebook> {
    check_sub_bit(k_h, k_w, eta)?;
    let n = k_h * k_w;
    let full = 1usize
        .checked_shl(n as u32)
        .filter(|_| n < usize::BITS as usize)
        .ok_or_else(|| {
            Error::InvalidConfig(format!("{n}-element kernels are too large to sample"))
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = rand::seq::index::sample(&mut rng, full, 1usize << eta)
        .into_iter()
        .map(|v| CodewordId(v as u64))
        .collect();
    let mut cb = CompactCodebook::from_codewords(k_h, k_w, eta, ids)?;
    cb.seed = seed;
    Ok(cb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub histogram: BTreeMap<CodewordId, usize>,
    pub total: usize,
    sorted_counts: Vec<usize>,
}

impl ClusterStats {
    pub fn from_histogram(histogram: BTreeMap<CodewordId, usize>) -> Self {
        let total = histogram.values().sum();
        let mut sorted_counts: Vec<usize> = histogram.values().copied().collect();
        sorted_counts.sort_unstable_by(|a, b| b.cmp(a));
        ClusterStats {
            histogram,
            total,
            sorted_counts,
        }
    }

    /// Fraction of kernels covered by the `k` most frequent codewords.
    pub fn topk(&self, k: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let covered: usize = self.sorted_counts.iter().take(k).sum();
        covered as f64 / self.total as f64
    }

    pub fn distinct(&self) -> usize {
        self.histogram.len()
    }
}

pub fn cluster_stats(w: &BinaryConvWeights) -> Result<ClusterStats> {
    w.shape.check_compressible()?;
    if w.shape.kernel_len() > MAX_KERNEL_ELEMENTS {
        return Err(Error::InvalidConfig("kernel too large".into()));
    }
    let mut histogram = BTreeMap::new();
    for kernel in w.kernels() {
        *histogram.entry(CodewordId::encode(kernel)).or_insert(0) += 1;
    }
    Ok(ClusterStats::from_histogram(histogram))
}

/// `k` values reported in the summary block: powers of two up to the full codebook.
pub fn topk_ladder(kernel_len: usize) -> Vec<usize> {
    let full = 1usize << kernel_len.min(20);
    std::iter::successors(Some(1usize), |k| Some(k * 2))
        .take_while(|&k| k <= full)
        .collect()
}

/// Comma-separated histogram `layer,codeword_id,count` followed by a blank
/// line and a `layer,k,topk` summary block.
pub fn cluster_table(layers: &[(usize, &ClusterStats, usize)]) -> String {
    let mut out = String::from("layer,codeword_id,count\n");
    for (layer, stats, _) in layers {
        for (id, count) in &stats.histogram {
            let _ = writeln!(out, "{layer},{},{count}", id.0);
        }
    }
    out.push_str("\nlayer,k,topk\n");
    for (layer, stats, kernel_len) in layers {
        for k in topk_ladder(*kernel_len) {
            let _ = writeln!(out, "{layer},{k},{:.6}", stats.topk(k));
        }
    }
    out
}
