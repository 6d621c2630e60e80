//! Sign binarization of convolution weights with per-output-channel scales.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// `(c_out, c_in, k_h, k_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl ConvShape {
    pub const fn new(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Self {
        ConvShape {
            c_out,
            c_in,
            k_h,
            k_w,
        }
    }

    pub const fn kernel_len(&self) -> usize {
        self.k_h * self.k_w
    }

    pub const fn kernels(&self) -> usize {
        self.c_out * self.c_in
    }

    pub const fn len(&self) -> usize {
        self.kernels() * self.kernel_len()
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of kernel `(o, i)`; kernels are stored output-major.
    #[inline]
    pub const fn kernel_index(&self, o: usize, i: usize) -> usize {
        o * self.c_in + i
    }

    /// Sub-bit compression needs square kernels with side > 1.
    pub fn check_compressible(&self) -> Result<()> {
        if self.k_h <= 1 || self.k_w <= 1 {
            return Err(Error::KernelTooSmall {
                k_h: self.k_h,
                k_w: self.k_w,
            });
        }
        if self.k_h != self.k_w {
            return Err(Error::InvalidConfig(format!(
                "kernels must be square, got {}x{}",
                self.k_h, self.k_w
            )));
        }
        Ok(())
    }
}

/// Real-valued convolution weights, kernel-major: `values[((o*c_in + i)*k_h + r)*k_w + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseConvWeights {
    pub shape: ConvShape,
    pub values: Vec<f64>,
}

impl DenseConvWeights {
    pub fn new(shape: ConvShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(shape_err(shape.len(), values.len()));
        }
        Ok(DenseConvWeights { shape, values })
    }

    pub fn kernel(&self, o: usize, i: usize) -> &[f64] {
        let n = self.shape.kernel_len();
        let k = self.shape.kernel_index(o, i);
        &self.values[k * n..(k + 1) * n]
    }

    pub fn kernels(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.values.chunks_exact(self.shape.kernel_len().max(1))
    }

    /// Values belonging to output channel `o`.
    pub fn output_channel(&self, o: usize) -> &[f64] {
        let n = self.shape.c_in * self.shape.kernel_len();
        &self.values[o * n..(o + 1) * n]
    }
}

/// `+1/-1` weights plus the per-output-channel scale applied after accumulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryConvWeights {
    pub shape: ConvShape,
    pub signs: Vec<i8>,
    pub alpha: Vec<f64>,
}

impl BinaryConvWeights {
    pub fn new(shape: ConvShape, signs: Vec<i8>, alpha: Vec<f64>) -> Result<Self> {
        if signs.len() != shape.len() {
            return Err(shape_err(shape.len(), signs.len()));
        }
        if alpha.len() != shape.c_out {
            return Err(shape_err(shape.c_out, alpha.len()));
        }
        if let Some(bad) = signs.iter().find(|&&s| s != 1 && s != -1) {
            return Err(Error::InvalidConfig(format!(
                "binary weight {bad} is not +-1"
            )));
        }
        Ok(BinaryConvWeights {
            shape,
            signs,
            alpha,
        })
    }

    pub fn kernel(&self, o: usize, i: usize) -> &[i8] {
        let n = self.shape.kernel_len();
        let k = self.shape.kernel_index(o, i);
        &self.signs[k * n..(k + 1) * n]
    }

    pub fn kernels(&self) -> impl ExactSizeIterator<Item = &[i8]> {
        self.signs.chunks_exact(self.shape.kernel_len().max(1))
    }
}

/// `-1` for negative values, `+1` otherwise (zero included).
#[inline]
pub fn sign(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

/// Mean absolute value of each output channel.
pub fn channel_scales(w: &DenseConvWeights) -> Vec<f64> {
    (0..w.shape.c_out)
        .map(|o| {
            let ch = w.output_channel(o);
            if ch.is_empty() {
                0.0
            } else {
                ch.iter().map(|v| v.abs()).sum::<f64>() / ch.len() as f64
            }
        })
        .collect()
}

pub fn sign_binarize(w: &DenseConvWeights) -> BinaryConvWeights {
    BinaryConvWeights {
        shape: w.shape,
        signs: w.values.iter().map(|&v| sign(v)).collect(),
        alpha: channel_scales(w),
    }
}
