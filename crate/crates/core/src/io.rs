//! Headered binary containers for dense weights and input intensities.
//!
//! ```text
//! weights: "S2NW" u16 version u16 layer_count
//!          per layer: u32 c_out u32 c_in u8 k_h u8 k_w, then c_out*c_in*k_h*k_w f64
//! input:   "S2NT" u16 version u32 b u32 c u32 h u32 w, then b*c*h*w f64 in [0, 1]
//! ```
//!
//! Integers and floats are little-endian. Parsers reject short or long files.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarize::{ConvShape, DenseConvWeights};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, SpikeTensor, Tensor4};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"S2NW";
pub const INPUT_MAGIC: [u8; 4] = *b"S2NT";
pub const IO_VERSION: u16 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::InvalidConfig("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic {
                expected: magic,
                found,
            });
        }
        let version = self.u16()?;
        if version != IO_VERSION {
            return Err(Error::VersionMismatch {
                expected: IO_VERSION,
                found: version,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(Error::TrailingBytes(n)),
        }
    }
}

pub fn encode_weights(layers: &[DenseConvWeights]) -> Result<Vec<u8>> {
    let count =
        u16::try_from(layers.len()).map_err(|_| Error::InvalidConfig("too many layers".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&IO_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for w in layers {
        let s = w.shape;
        let dims = (
            u32::try_from(s.c_out),
            u32::try_from(s.c_in),
            u8::try_from(s.k_h),
            u8::try_from(s.k_w),
        );
        let (Ok(c_out), Ok(c_in), Ok(k_h), Ok(k_w)) = dims else {
            return Err(Error::InvalidConfig(format!(
                "layer shape {s:?} does not fit the header"
            )));
        };
        out.extend_from_slice(&c_out.to_le_bytes());
        out.extend_from_slice(&c_in.to_le_bytes());
        out.push(k_h);
        out.push(k_w);
        for v in &w.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<DenseConvWeights>> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(WEIGHTS_MAGIC)?;
    let count = r.u16()?;
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let c_out = r.u32()? as usize;
        let c_in = r.u32()? as usize;
        let k_h = r.u8()? as usize;
        let k_w = r.u8()? as usize;
        let shape = ConvShape::new(c_out, c_in, k_h, k_w);
        layers.push(DenseConvWeights::new(shape, r.f64s(shape.len())?)?);
    }
    r.finish()?;
    Ok(layers)
}

pub fn write_weights(path: impl AsRef<Path>, layers: &[DenseConvWeights]) -> Result<()> {
    std::fs::write(path, encode_weights(layers)?)?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Vec<DenseConvWeights>> {
    decode_weights(&std::fs::read(path)?)
}

pub fn encode_input(x: &Tensor4) -> Result<Vec<u8>> {
    let s = x.shape();
    let mut out = Vec::with_capacity(22 + 8 * s.len());
    out.extend_from_slice(&INPUT_MAGIC);
    out.extend_from_slice(&IO_VERSION.to_le_bytes());
    for d in [s.b, s.c, s.h, s.w] {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidConfig(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses an input container; every intensity must lie in `[0, 1]`.
pub fn decode_input(bytes: &[u8]) -> Result<Tensor4> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(INPUT_MAGIC)?;
    let shape = Shape4::new(
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    let data = r.f64s(shape.len())?;
    r.finish()?;
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidConfig(format!(
            "intensity {v} outside [0, 1]"
        )));
    }
    Tensor4::from_vec(shape, data)
}

pub fn write_input(path: impl AsRef<Path>, x: &Tensor4) -> Result<()> {
    std::fs::write(path, encode_input(x)?)?;
    Ok(())
}

pub fn read_input(path: impl AsRef<Path>) -> Result<Tensor4> {
    decode_input(&std::fs::read(path)?)
}

/// Bernoulli rate coding: each element spikes with probability equal to its
/// intensity, independently per timestep.
pub fn rate_encode(x: &Tensor4, timesteps: usize, seed: u64) -> Vec<SpikeTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..timesteps)
        .map(|_| {
            let mut s = SpikeTensor::zeros(x.shape());
            for (n, &p) in x.data().iter().enumerate() {
                if rng.gen::<f64>() < p {
                    s.set_flat(n, true);
                }
            }
            s
        })
        .collect()
}
