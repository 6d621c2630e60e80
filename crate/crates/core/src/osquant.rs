//! Nearest-codeword assignment with outlier-aware kernel scaling.
//!
//! Plain assignment picks the codeword with the smallest squared L2 distance
//! to the real kernel. A single large weight can dominate that distance and
//! pull the choice away from the codeword that matches the kernel's sign
//! pattern. The outlier-aware variant first finds weights outside Tukey's
//! fences `[Q1 - gamma*IQR, Q3 + gamma*IQR]` and divides each one by `Omega`,
//! the mean absolute difference to its in-bounds 4-neighbors, before taking
//! the argmin.
//!
//! Coordinates are zero-based `(row, column)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarize::{ConvShape, DenseConvWeights};
use crate::codebook::CompactCodebook;
use crate::error::{shape_err, Error, Result};

/// Tukey's conventional fence coefficient.
pub const DEFAULT_GAMMA: f64 = 1.5;

/// Fence coefficients worth sweeping when tuning detection sensitivity.
pub const GAMMA_SWEEP: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelShape {
    pub k_h: usize,
    pub k_w: usize,
}

impl KernelShape {
    pub fn new(k_h: usize, k_w: usize) -> Result<Self> {
        if k_h <= 1 || k_w <= 1 {
            return Err(Error::KernelTooSmall { k_h, k_w });
        }
        Ok(KernelShape { k_h, k_w })
    }

    pub fn len(&self) -> usize {
        self.k_h * self.k_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, kernel: &[f64]) -> Result<()> {
        if kernel.len() != self.len() {
            return Err(shape_err(self.len(), kernel.len()));
        }
        Ok(())
    }
}

impl TryFrom<ConvShape> for KernelShape {
    type Error = Error;

    fn try_from(s: ConvShape) -> Result<Self> {
        KernelShape::new(s.k_h, s.k_w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierBounds {
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub lo: f64,
    pub hi: f64,
    pub gamma: f64,
}

impl OutlierBounds {
    /// Values strictly outside `[lo, hi]` are outliers.
    #[inline]
    pub fn is_outlier(&self, v: f64) -> bool {
        v < self.lo || v > self.hi
    }
}

/// Linear interpolation at position `p * (n - 1)` of a sorted sample.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let below = pos.floor() as usize;
    let frac = pos - below as f64;
    if below + 1 >= sorted.len() || frac == 0.0 {
        sorted[below]
    } else {
        sorted[below] + frac * (sorted[below + 1] - sorted[below])
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    Ok(())
}

/// Quartiles and fences of one kernel. An infinite `gamma` disables detection.
pub fn outlier_bounds(kernel: &[f64], gamma: f64) -> Result<OutlierBounds> {
    check_gamma(gamma)?;
    if kernel.len() < 4 {
        return Err(Error::InvalidConfig(format!(
            "quartiles need at least 4 values, got {}",
            kernel.len()
        )));
    }
    let mut sorted = kernel.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = if gamma.is_infinite() {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        (q1 - gamma * iqr, q3 + gamma * iqr)
    };
    Ok(OutlierBounds {
        q1,
        q3,
        iqr,
        lo,
        hi,
        gamma,
    })
}

pub fn detect_outliers(
    kernel: &[f64],
    shape: KernelShape,
    bounds: &OutlierBounds,
) -> Result<Vec<(usize, usize)>> {
    shape.check(kernel)?;
    Ok(kernel
        .iter()
        .enumerate()
        .filter(|(_, &v)| bounds.is_outlier(v))
        .map(|(e, _)| (e / shape.k_w, e % shape.k_w))
        .collect())
}

/// In-bounds 4-neighbors of `(i, j)`.
fn neighbors(shape: KernelShape, (i, j): (usize, usize)) -> impl Iterator<Item = (usize, usize)> {
    let up = i.checked_sub(1).map(|r| (r, j));
    let down = (i + 1 < shape.k_h).then_some((i + 1, j));
    let left = j.checked_sub(1).map(|c| (i, c));
    let right = (j + 1 < shape.k_w).then_some((i, j + 1));
    [up, down, left, right].into_iter().flatten()
}

/// Mean absolute difference between `kernel[coord]` and its 4-neighbors.
pub fn omega(kernel: &[f64], shape: KernelShape, coord: (usize, usize)) -> Result<f64> {
    shape.check(kernel)?;
    let (i, j) = coord;
    if i >= shape.k_h || j >= shape.k_w {
        return Err(Error::InvalidConfig(format!(
            "coordinate ({i}, {j}) outside a {}x{} kernel",
            shape.k_h, shape.k_w
        )));
    }
    let center = kernel[i * shape.k_w + j];
    let (sum, count) = neighbors(shape, coord).fold((0.0, 0usize), |(s, n), (p, q)| {
        (s + (center - kernel[p * shape.k_w + q]).abs(), n + 1)
    });
    let om = sum / count as f64;
    if om > 0.0 {
        Ok(om)
    } else {
        Err(Error::DegenerateOmega { i, j })
    }
}

/// How to treat an outlier whose `Omega` is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OmegaPolicy {
    /// Return [`Error::DegenerateOmega`].
    #[default]
    Strict,
    /// Leave that value unscaled.
    SkipDegenerate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    /// Detected outlier coordinates in row-major order.
    pub coords: Vec<(usize, usize)>,
    /// Scaling divisor per outlier. Under [`OmegaPolicy::SkipDegenerate`]
    /// outliers with a zero divisor are absent.
    pub omega: BTreeMap<(usize, usize), f64>,
}

impl OutlierReport {
    pub fn build(
        kernel: &[f64],
        shape: KernelShape,
        gamma: f64,
        policy: OmegaPolicy,
    ) -> Result<Self> {
        let bounds = outlier_bounds(kernel, gamma)?;
        let coords = detect_outliers(kernel, shape, &bounds)?;
        let mut om = BTreeMap::new();
        for &c in &coords {
            match omega(kernel, shape, c) {
                Ok(v) => {
                    om.insert(c, v);
                }
                Err(Error::DegenerateOmega { .. }) if policy == OmegaPolicy::SkipDegenerate => {}
                Err(e) => return Err(e),
            }
        }
        Ok(OutlierReport { coords, omega: om })
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Multiplier applied at flattened position `e` by the scaling step.
    #[inline]
    pub fn factor(&self, shape: KernelShape, e: usize) -> f64 {
        if self.omega.is_empty() {
            return 1.0;
        }
        self.omega
            .get(&(e / shape.k_w, e % shape.k_w))
            .map_or(1.0, |om| 1.0 / om)
    }
}

/// Divides every scaled outlier by its `Omega`; all other values are copied.
pub fn scale_outliers(
    kernel: &[f64],
    shape: KernelShape,
    report: &OutlierReport,
) -> Result<Vec<f64>> {
    shape.check(kernel)?;
    let mut out = kernel.to_vec();
    for (&(i, j), &om) in &report.omega {
        if !(om > 0.0) {
            return Err(Error::DegenerateOmega { i, j });
        }
        out[i * shape.k_w + j] = kernel[i * shape.k_w + j] / om;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantAssignment {
    pub index: usize,
    /// Squared L2 distance to the chosen codeword.
    pub distance: f64,
}

fn check_codebook(kernel: &[f64], cb: &CompactCodebook) -> Result<KernelShape> {
    let shape = KernelShape::new(cb.k_h(), cb.k_w())?;
    shape.check(kernel)?;
    Ok(shape)
}

/// Exhaustive argmin; the first (lowest-index) minimum wins ties.
fn nearest(kernel: &[f64], cb: &CompactCodebook) -> QuantAssignment {
    let mut best = QuantAssignment {
        index: 0,
        distance: f64::INFINITY,
    };
    for (index, id) in cb.codewords().iter().enumerate() {
        let mut distance = 0.0;
        for (e, &w) in kernel.iter().enumerate() {
            let d = id.sign_at(e) as f64 - w;
            distance += d * d;
        }
        if distance < best.distance {
            best = QuantAssignment { index, distance };
        }
    }
    best
}

pub fn assign_baseline(kernel: &[f64], cb: &CompactCodebook) -> Result<QuantAssignment> {
    check_codebook(kernel, cb)?;
    Ok(nearest(kernel, cb))
}

/// Assignment on the outlier-scaled kernel. The reported distance is measured
/// against the scaled kernel.
pub fn assign_osquant(kernel: &[f64], cb: &CompactCodebook, gamma: f64) -> Result<QuantAssignment> {
    let shape = check_codebook(kernel, cb)?;
    let report = OutlierReport::build(kernel, shape, gamma, OmegaPolicy::Strict)?;
    let scaled = scale_outliers(kernel, shape, &report)?;
    Ok(nearest(&scaled, cb))
}

/// Straight-through gradient: pass-through masked by `|w_b| <= 1`.
pub fn ste_backward(grad_out: &[f64], w_b: &[i8]) -> Result<Vec<f64>> {
    if grad_out.len() != w_b.len() {
        return Err(shape_err(w_b.len(), grad_out.len()));
    }
    let grad: Vec<f64> = grad_out
        .iter()
        .zip(w_b)
        .map(|(&g, &b)| if b.unsigned_abs() <= 1 { g } else { 0.0 })
        .collect();
    debug_assert!(w_b.iter().all(|b| b.unsigned_abs() <= 1));
    Ok(grad)
}

/// Straight-through gradient composed with the scaling step, which is linear
/// with slope `1/Omega` at scaled outliers and `1` elsewhere. `Omega` is held
/// fixed at its forward value.
pub fn osquant_backward(
    grad_out: &[f64],
    w_b: &[i8],
    shape: KernelShape,
    report: &OutlierReport,
) -> Result<Vec<f64>> {
    let mut g = ste_backward(grad_out, w_b)?;
    for (e, v) in g.iter_mut().enumerate() {
        *v *= report.factor(shape, e);
    }
    Ok(g)
}

/// Fraction of kernels in a layer with at least one outlier.
pub fn outlier_occurrence(layer: &DenseConvWeights, gamma: f64) -> Result<f64> {
    KernelShape::try_from(layer.shape)?;
    if layer.shape.kernels() == 0 {
        return Ok(0.0);
    }
    let mut with = 0usize;
    for kernel in layer.kernels() {
        let bounds = outlier_bounds(kernel, gamma)?;
        if kernel.iter().any(|&v| bounds.is_outlier(v)) {
            with += 1;
        }
    }
    Ok(with as f64 / layer.shape.kernels() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Quantizer {
    /// Plain nearest codeword.
    Baseline,
    /// Nearest codeword after outlier scaling with fence coefficient `gamma`.
    OsQuant { gamma: f64 },
}

impl Default for Quantizer {
    fn default() -> Self {
        Quantizer::OsQuant {
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAssignment {
    pub indices: Vec<u32>,
    pub distances: Vec<f64>,
    /// One report per kernel; empty for the baseline quantizer.
    pub reports: Vec<OutlierReport>,
}

impl LayerAssignment {
    pub fn kernels_with_outliers(&self) -> usize {
        self.reports.iter().filter(|r| !r.is_empty()).count()
    }
}

/// Assigns every kernel of a layer. Kernels are processed in parallel; the
/// result does not depend on the schedule.
pub fn quantize_layer(
    w: &DenseConvWeights,
    cb: &CompactCodebook,
    quantizer: Quantizer,
    policy: OmegaPolicy,
) -> Result<LayerAssignment> {
    let shape = KernelShape::try_from(w.shape)?;
    if shape.k_h != cb.k_h() || shape.k_w != cb.k_w() {
        return Err(shape_err((cb.k_h(), cb.k_w()), (shape.k_h, shape.k_w)));
    }
    let per_kernel: Vec<(QuantAssignment, OutlierReport)> = w
        .values
        .par_chunks_exact(shape.len())
        .map(|kernel| match quantizer {
            Quantizer::Baseline => Ok((nearest(kernel, cb), OutlierReport::default())),
            Quantizer::OsQuant { gamma } => {
                let report = OutlierReport::build(kernel, shape, gamma, policy)?;
                let scaled = scale_outliers(kernel, shape, &report)?;
                Ok((nearest(&scaled, cb), report))
            }
        })
        .collect::<Result<_>>()?;
    let mut out = LayerAssignment {
        indices: Vec::with_capacity(per_kernel.len()),
        distances: Vec::with_capacity(per_kernel.len()),
        reports: Vec::with_capacity(per_kernel.len()),
    };
    for (a, r) in per_kernel {
        out.indices.push(a.index as u32);
        out.distances.push(a.distance);
        out.reports.push(r);
    }
    Ok(out)
}

/// Comma-separated `layer,kernel_index,i,j,value,omega` rows (no header).
/// Outliers without a usable `Omega` are written with an empty omega field.
pub fn outlier_rows(layer: usize, w: &DenseConvWeights, gamma: f64) -> Result<String> {
    let shape = KernelShape::try_from(w.shape)?;
    let mut out = String::new();
    for (k, kernel) in w.kernels().enumerate() {
        let report = OutlierReport::build(kernel, shape, gamma, OmegaPolicy::SkipDegenerate)?;
        for &(i, j) in &report.coords {
            let value = kernel[i * shape.k_w + j];
            match report.omega.get(&(i, j)) {
                Some(om) => writeln!(out, "{layer},{k},{i},{j},{value},{om}"),
                None => writeln!(out, "{layer},{k},{i},{j},{value},"),
            }
            .expect("writing to a String cannot fail");
        }
    }
    Ok(out)
}

pub const OUTLIER_HEADER: &str = "layer,kernel_index,i,j,value,omega";
