//! Dense real and bit-packed spike tensors in `[batch, channel, height, width]`
//! row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { b, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch entry.
    pub const fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        debug_assert!(i < self.b && j < self.c && k < self.h && l < self.w);
        ((i * self.c + j) * self.h + k) * self.w + l
    }
}

impl From<(usize, usize, usize, usize)> for Shape4 {
    fn from((b, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape4 { b, c, h, w }
    }
}

/// Dense 4-D tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: impl Into<Shape4>, value: f64) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(shape_err(shape.len(), data.len()));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.shape.offset(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let o = self.shape.offset(i, j, k, l);
        self.data[o] = v;
    }

    /// Row `i` of the batch as a flat slice of `c*h*w` values.
    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.shape.per_sample();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn scaled(&self, c: f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Bit-packed `{0,1}` tensor. Bit `n` of the flat row-major index lives in
/// word `n / 64` at bit `n % 64`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpikeTensor {
    shape: Shape4,
    words: Vec<u64>,
}

impl SpikeTensor {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        SpikeTensor {
            shape,
            words: vec![0; shape.len().div_ceil(64)],
        }
    }

    pub fn ones(shape: impl Into<Shape4>) -> Self {
        let mut s = SpikeTensor::zeros(shape);
        for n in 0..s.shape.len() {
            s.set_flat(n, true);
        }
        s
    }

    /// Packs a slice of `0`/`1` values. Anything else is rejected.
    pub fn from_bits(shape: impl Into<Shape4>, bits: &[u8]) -> Result<Self> {
        let shape = shape.into();
        if bits.len() != shape.len() {
            return Err(shape_err(shape.len(), bits.len()));
        }
        let mut s = SpikeTensor::zeros(shape);
        for (n, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => s.set_flat(n, true),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "spike value {other} at {n} is not 0 or 1"
                    )))
                }
            }
        }
        Ok(s)
    }

    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.shape.len())
            .map(|n| self.get_flat(n) as u8)
            .collect()
    }

    /// Dense copy with spikes as `0.0` / `1.0`.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: (0..self.shape.len())
                .map(|n| if self.get_flat(n) { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn get_flat(&self, n: usize) -> bool {
        (self.words[n / 64] >> (n % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_flat(&mut self, n: usize, v: bool) {
        let mask = 1u64 << (n % 64);
        if v {
            self.words[n / 64] |= mask;
        } else {
            self.words[n / 64] &= !mask;
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> bool {
        self.get_flat(self.shape.offset(i, j, k, l))
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: bool) {
        let n = self.shape.offset(i, j, k, l);
        self.set_flat(n, v);
    }

    /// Number of spikes.
    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Fraction of neurons that fired, averaged over all timesteps.
pub fn firing_rate(steps: &[SpikeTensor]) -> Result<f64> {
    let first = steps.first().ok_or(Error::NoTimesteps)?;
    let shape = first.shape();
    let mut spikes = 0u64;
    for s in steps {
        if s.shape() != shape {
            return Err(shape_err(shape, s.shape()));
        }
        spikes += s.count_ones();
    }
    let denom = steps.len() * shape.len();
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(spikes as f64 / denom as f64)
}
