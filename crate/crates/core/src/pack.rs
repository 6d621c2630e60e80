//! The `.s2nn` packed model format and its storage accounting.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "S2NN"  u16 version  u16 layer_count
//! per layer:
//!   u32 c_out  u32 c_in  u8 k_h  u8 k_w  u8 eta
//!   codebook  ceil(2^eta * k_h*k_w / 8) bytes   codeword bits in codebook order,
//!                                               kernel elements row-major, +1 -> 1
//!   indices   ceil(c_out*c_in*eta / 8) bytes    eta-bit fields
//!   alpha     c_out x f32
//! ```
//!
//! Bit streams are packed LSB-first and padded with zeros to a byte boundary.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarize::{BinaryConvWeights, ConvShape};
use crate::codebook::{CodewordId, CompactCodebook, MAX_ETA};
use crate::error::{shape_err, Error, Result};

pub const MAGIC: [u8; 4] = *b"S2NN";
pub const VERSION: u16 = 1;
pub const FILE_HEADER_BYTES: usize = 8;
pub const LAYER_HEADER_BYTES: usize = 11;

/// Per-kernel codeword indices plus everything needed to rebuild the
/// binary weights of one convolution layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayer {
    pub shape: ConvShape,
    pub eta: u32,
    /// `2^eta` binary codewords.
    pub codewords: Vec<CodewordId>,
    /// One index per kernel, output-major (`o * c_in + i`).
    pub indices: Vec<u32>,
    /// Per-output-channel scale applied after accumulation.
    pub alpha: Vec<f32>,
}

impl QuantizedLayer {
    pub fn new(
        codebook: &CompactCodebook,
        shape: ConvShape,
        indices: Vec<u32>,
        alpha: Vec<f32>,
    ) -> Result<Self> {
        let layer = QuantizedLayer {
            shape,
            eta: codebook.eta(),
            codewords: codebook.codewords().to_vec(),
            indices,
            alpha,
        };
        layer.validate(0)?;
        Ok(layer)
    }

    /// Checks every structural invariant; `layer` only labels errors.
    pub fn validate(&self, layer: usize) -> Result<()> {
        self.shape.check_compressible()?;
        CompactCodebook::from_codewords(
            self.shape.k_h,
            self.shape.k_w,
            self.eta,
            self.codewords.clone(),
        )?;
        if self.indices.len() != self.shape.kernels() {
            return Err(shape_err(self.shape.kernels(), self.indices.len()));
        }
        if self.alpha.len() != self.shape.c_out {
            return Err(shape_err(self.shape.c_out, self.alpha.len()));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| (i as u64) >> self.eta != 0) {
            return Err(Error::IndexOutOfRange {
                layer,
                index: bad as u64,
                eta: self.eta,
            });
        }
        Ok(())
    }

    pub fn codeword_of(&self, o: usize, i: usize) -> CodewordId {
        self.codewords[self.indices[self.shape.kernel_index(o, i)] as usize]
    }

    /// Expands indices through the codebook into `+1/-1` weights.
    pub fn reconstruct(&self) -> BinaryConvWeights {
        let n = self.shape.kernel_len();
        let signs = self
            .indices
            .iter()
            .flat_map(|&idx| self.codewords[idx as usize].decode(n))
            .collect();
        BinaryConvWeights {
            shape: self.shape,
            signs,
            alpha: self.alpha.iter().map(|&a| a as f64).collect(),
        }
    }

    pub fn codebook_bits(&self) -> usize {
        self.codewords.len() * self.shape.kernel_len()
    }

    pub fn index_bits(&self) -> usize {
        self.shape.kernels() * self.eta as usize
    }

    /// Bytes this layer occupies in the packed stream.
    pub fn packed_bytes(&self) -> usize {
        LAYER_HEADER_BYTES
            + self.codebook_bits().div_ceil(8)
            + self.index_bits().div_ceil(8)
            + 4 * self.shape.c_out
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            bit: 0,
        }
    }

    fn push(&mut self, value: u64, width: usize) {
        for b in 0..width {
            if self.bit % 8 == 0 {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl BitReader<'_> {
    fn pull(&mut self, width: usize) -> u64 {
        let mut v = 0u64;
        for b in 0..width {
            let byte = self.bytes[self.bit / 8];
            if (byte >> (self.bit % 8)) & 1 == 1 {
                v |= 1 << b;
            }
            self.bit += 1;
        }
        v
    }
}

pub fn pack(layers: &[QuantizedLayer]) -> Result<Vec<u8>> {
    let count = u16::try_from(layers.len()).map_err(|_| {
        Error::InvalidConfig(format!("{} layers exceed the u16 count", layers.len()))
    })?;
    let mut out = Vec::with_capacity(
        FILE_HEADER_BYTES
            + layers
                .iter()
                .map(QuantizedLayer::packed_bytes)
                .sum::<usize>(),
    );
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (l, layer) in layers.iter().enumerate() {
        layer.validate(l)?;
        let s = layer.shape;
        let c_out =
            u32::try_from(s.c_out).map_err(|_| Error::InvalidConfig("c_out exceeds u32".into()))?;
        let c_in =
            u32::try_from(s.c_in).map_err(|_| Error::InvalidConfig("c_in exceeds u32".into()))?;
        let k_h = u8::try_from(s.k_h).map_err(|_| Error::InvalidConfig("k_h exceeds u8".into()))?;
        let k_w = u8::try_from(s.k_w).map_err(|_| Error::InvalidConfig("k_w exceeds u8".into()))?;
        out.extend_from_slice(&c_out.to_le_bytes());
        out.extend_from_slice(&c_in.to_le_bytes());
        out.extend_from_slice(&[k_h, k_w, layer.eta as u8]);

        let n = s.kernel_len();
        let mut cb = BitWriter::new();
        for id in &layer.codewords {
            cb.push(id.0, n);
        }
        out.extend(cb.finish());

        let mut idx = BitWriter::new();
        for &i in &layer.indices {
            idx.push(i as u64, layer.eta as usize);
        }
        out.extend(idx.finish());

        for a in &layer.alpha {
            out.extend_from_slice(&a.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
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

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerHeader {
    pub shape: ConvShape,
    pub eta: u32,
}

fn read_file_header(c: &mut Cursor<'_>) -> Result<u16> {
    let magic: [u8; 4] = c.array()?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    c.u16()
}

fn read_layer_header(c: &mut Cursor<'_>) -> Result<LayerHeader> {
    let c_out = c.u32()? as usize;
    let c_in = c.u32()? as usize;
    let [k_h, k_w, eta] = c.array()?;
    let shape = ConvShape::new(c_out, c_in, k_h as usize, k_w as usize);
    shape.check_compressible()?;
    let eta = eta as u32;
    if eta == 0 || eta as usize >= shape.kernel_len() {
        return Err(Error::NotSubBit {
            eta,
            k_h: shape.k_h,
            k_w: shape.k_w,
            elements: shape.kernel_len(),
        });
    }
    if eta > MAX_ETA {
        return Err(Error::InvalidConfig(format!("eta={eta} exceeds {MAX_ETA}")));
    }
    Ok(LayerHeader { shape, eta })
}

/// Decodes a whole stream. Any defect fails the entire decode.
pub fn unpack(bytes: &[u8]) -> Result<Vec<QuantizedLayer>> {
    let mut c = Cursor { bytes, pos: 0 };
    let count = read_file_header(&mut c)?;
    let mut layers = Vec::with_capacity(count as usize);
    for l in 0..count as usize {
        let LayerHeader { shape, eta } = read_layer_header(&mut c)?;
        let n = shape.kernel_len();
        let words = 1usize << eta;

        let cb_bytes = c.take((words * n).div_ceil(8))?;
        let mut r = BitReader {
            bytes: cb_bytes,
            bit: 0,
        };
        let codewords: Vec<CodewordId> = (0..words).map(|_| CodewordId(r.pull(n))).collect();

        let idx_bytes = c.take((shape.kernels() * eta as usize).div_ceil(8))?;
        let mut r = BitReader {
            bytes: idx_bytes,
            bit: 0,
        };
        let indices: Vec<u32> = (0..shape.kernels())
            .map(|_| r.pull(eta as usize) as u32)
            .collect();

        let alpha_bytes = c.take(4 * shape.c_out)?;
        let alpha = alpha_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("chunk of 4")))
            .collect();

        let layer = QuantizedLayer {
            shape,
            eta,
            codewords,
            indices,
            alpha,
        };
        layer.validate(l)?;
        layers.push(layer);
    }
    if c.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(layers)
}

pub fn write_model(path: impl AsRef<Path>, layers: &[QuantizedLayer]) -> Result<()> {
    let bytes = pack(layers)?;
    std::fs::write(path.as_ref(), bytes)
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<Vec<QuantizedLayer>> {
    let bytes = std::fs::read(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    unpack(&bytes)
}

/// Human-readable listing of the file and layer headers. Only the headers
/// and section lengths are inspected; payload bits are skipped.
pub fn dump_header(bytes: &[u8]) -> Result<String> {
    let mut c = Cursor { bytes, pos: 0 };
    let count = read_file_header(&mut c)?;
    let mut out = String::new();
    let _ = writeln!(out, "magic S2NN");
    let _ = writeln!(out, "version {VERSION}");
    let _ = writeln!(out, "layers {count}");
    for l in 0..count as usize {
        let offset = c.pos;
        let LayerHeader { shape, eta } = read_layer_header(&mut c)?;
        let cb = ((1usize << eta) * shape.kernel_len()).div_ceil(8);
        let idx = (shape.kernels() * eta as usize).div_ceil(8);
        let alpha = 4 * shape.c_out;
        c.take(cb + idx + alpha)?;
        let _ = writeln!(
            out,
            "layer {l} offset={offset} c_out={} c_in={} k_h={} k_w={} eta={eta} codebook_bytes={cb} index_bytes={idx} alpha_bytes={alpha}",
            shape.c_out, shape.c_in, shape.k_h, shape.k_w
        );
    }
    if c.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(out)
}

/// Bits per weight relative to one bit per binary weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionRatio {
    /// `(eta*c_in*c_out + 2^eta*k_h*k_w) / (k_h*k_w*c_in*c_out)`.
    pub exact: f64,
    /// Also counts the f32 scales and the layer header.
    pub inclusive: f64,
    /// The large-layer limit `eta / (k_h*k_w)`.
    pub asymptotic: f64,
}

pub fn compression_ratio(shape: ConvShape, eta: u32) -> Result<CompressionRatio> {
    shape.check_compressible()?;
    let n = shape.kernel_len();
    if eta == 0 || eta as usize >= n {
        return Err(Error::NotSubBit {
            eta,
            k_h: shape.k_h,
            k_w: shape.k_w,
            elements: n,
        });
    }
    let kernels = shape.kernels() as f64;
    let binary_bits = kernels * n as f64;
    let payload = eta as f64 * kernels + 2f64.powi(eta as i32) * n as f64;
    let extra = 32.0 * shape.c_out as f64 + 8.0 * LAYER_HEADER_BYTES as f64;
    Ok(CompressionRatio {
        exact: payload / binary_bits,
        inclusive: (payload + extra) / binary_bits,
        asymptotic: eta as f64 / n as f64,
    })
}

impl QuantizedLayer {
    pub fn compression_ratio(&self) -> CompressionRatio {
        compression_ratio(self.shape, self.eta).expect("validated layer is sub-bit")
    }
}

/// Fraction of on-chip weight storage saved against one bit per weight:
/// `1 - eta / (k_w*k_h)`.
pub fn onchip_saving(eta: u32, k_w: usize, k_h: usize) -> Result<f64> {
    let n = k_w * k_h;
    if eta == 0 || eta as usize >= n {
        return Err(Error::NotSubBit {
            eta,
            k_h,
            k_w,
            elements: n,
        });
    }
    Ok(1.0 - eta as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::sample_codebook;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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
            .map(|_| rng.gen_range(0..1u32 << eta))
            .collect();
        let alpha = (0..c_out).map(|_| rng.gen_range(0.01f32..2.0)).collect();
        QuantizedLayer::new(&cb, shape, indices, alpha).unwrap()
    }

    #[test]
    fn tiny_layer_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = random_layer(&mut rng, 1, 1, 3, 4);
        let bytes = pack(std::slice::from_ref(&layer)).unwrap();
        // 8 file + 11 header + 18 codebook (16*9 bits) + 1 index + 4 alpha
        assert_eq!(bytes.len(), 8 + 11 + 18 + 1 + 4);
        let index_byte = bytes[8 + 11 + 18];
        assert_eq!(index_byte as u32, layer.indices[0]);
        assert_eq!(&bytes[..4], b"S2NN");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 0]);
        assert_eq!(&bytes[8..19], &[1, 0, 0, 0, 1, 0, 0, 0, 3, 3, 4]);
    }

    #[test]
    fn codeword_bits_are_lsb_first() {
        let cb =
            CompactCodebook::from_codewords(2, 2, 1, vec![CodewordId(0b0001), CodewordId(0b1000)])
                .unwrap();
        let layer =
            QuantizedLayer::new(&cb, ConvShape::new(1, 3, 2, 2), vec![1, 0, 1], vec![1.0]).unwrap();
        let bytes = pack(&[layer]).unwrap();
        // codebook: 8 bits -> 0b1000_0001
        assert_eq!(bytes[19], 0b1000_0001);
        // indices 1,0,1 -> 0b101
        assert_eq!(bytes[20], 0b101);
    }

    #[test]
    fn round_trip_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = vec![
            random_layer(&mut rng, 5, 3, 3, 4),
            random_layer(&mut rng, 7, 5, 5, 6),
        ];
        let a = pack(&model).unwrap();
        assert_eq!(a, pack(&model.clone()).unwrap());
        let back = unpack(&a).unwrap();
        assert_eq!(back, model);
        for (x, y) in back.iter().zip(&model) {
            assert_eq!(x.reconstruct(), y.reconstruct());
        }
    }

    #[test]
    fn corrupted_streams_fail_closed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = vec![random_layer(&mut rng, 2, 2, 3, 4)];
        let good = pack(&model).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(unpack(&bad), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            unpack(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        assert!(matches!(
            unpack(&good[..good.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(unpack(&good[..3]), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(unpack(&bad), Err(Error::TrailingBytes(1))));

        let mut bad = good.clone();
        bad[18] = 9; // eta = 9 on a 3x3 kernel
        assert!(matches!(unpack(&bad), Err(Error::NotSubBit { .. })));
    }

    #[test]
    fn out_of_range_index_rejected_on_pack() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = random_layer(&mut rng, 2, 2, 3, 4);
        layer.indices[3] = 16;
        assert_eq!(
            pack(&[layer]),
            Err(Error::IndexOutOfRange {
                layer: 0,
                index: 16,
                eta: 4
            })
        );
    }

    #[test]
    fn duplicate_codewords_rejected_on_unpack() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 1, 1, 2, 1);
        let mut bytes = pack(&[layer]).unwrap();
        // 2x2, eta=1: the two 4-bit codewords share byte 19
        bytes[19] = 0x33;
        assert!(matches!(
            unpack(&bytes),
            Err(Error::DuplicateCodeword { .. })
        ));
    }

    #[test]
    fn ratios() {
        let big = ConvShape::new(256, 256, 3, 3);
        let r4 = compression_ratio(big, 4).unwrap();
        assert!((r4.exact - (4.0 / 9.0 + 16.0 / 65536.0)).abs() < 1e-15);
        assert!((r4.exact - 0.44).abs() < 0.01);
        assert!((compression_ratio(big, 5).unwrap().exact - 0.56).abs() < 0.01);
        let r6 = compression_ratio(big, 6).unwrap().exact;
        assert!((r6 - (6.0 / 9.0 + 64.0 / 65536.0)).abs() < 1e-15);
        assert!((r6 - 0.67).abs() < 0.01);
        assert!(r4.inclusive > r4.exact);

        let tiny = compression_ratio(ConvShape::new(1, 1, 3, 3), 4).unwrap();
        // one kernel: (4 + 16*9) / 9
        assert!((tiny.exact - 148.0 / 9.0).abs() < 1e-12);

        assert!(compression_ratio(big, 9).is_err());
        assert!(compression_ratio(ConvShape::new(4, 4, 1, 1), 1).is_err());
    }

    #[test]
    fn saving() {
        assert_eq!(onchip_saving(4, 3, 3).unwrap(), 5.0 / 9.0);
        assert!((onchip_saving(6, 3, 3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(onchip_saving(9, 3, 3).is_err());
    }

    #[test]
    fn ratio_converges_for_wide_layers() {
        // The exact ratio exceeds eta/9 by 2^eta / (c_in*c_out); from 4096
        // kernels on that stays under 0.01 for eta <= 5.
        for eta in 1..=5 {
            for (c_out, c_in) in [(64, 64), (128, 64), (256, 256)] {
                let r = compression_ratio(ConvShape::new(c_out, c_in, 3, 3), eta).unwrap();
                assert!(
                    (r.exact - r.asymptotic).abs() < 0.01,
                    "eta={eta} {c_out}x{c_in}"
                );
                let gap = 2f64.powi(eta as i32) / (c_out * c_in) as f64;
                assert!((r.exact - r.asymptotic - gap).abs() < 1e-12);
            }
        }
        // eta = 6 needs 6400 kernels
        let r = compression_ratio(ConvShape::new(64, 64, 3, 3), 6).unwrap();
        assert!((r.exact - r.asymptotic) > 0.015);
        let r = compression_ratio(ConvShape::new(81, 80, 3, 3), 6).unwrap();
        assert!((r.exact - r.asymptotic) <= 0.01);
    }

    #[test]
    fn header_dump() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bytes = pack(&[random_layer(&mut rng, 4, 2, 3, 5)]).unwrap();
        let text = dump_header(&bytes).unwrap();
        assert!(text.contains("layers 1"));
        assert!(text.contains("layer 0 offset=8 c_out=4 c_in=2 k_h=3 k_w=3 eta=5 codebook_bytes=36 index_bytes=5 alpha_bytes=16"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn pack_unpack_round_trip(seed in any::<u64>(), eta in 1u32..8, c_out in 1usize..9, c_in in 1usize..9, k in 2usize..4) {
            prop_assume!((eta as usize) < k * k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = vec![random_layer(&mut rng, c_out, c_in, k, eta), random_layer(&mut rng, c_in, c_out, 3, 4)];
            let bytes = pack(&model).unwrap();
            prop_assert_eq!(bytes.len(), FILE_HEADER_BYTES + model.iter().map(|l| l.packed_bytes()).sum::<usize>());
            prop_assert_eq!(unpack(&bytes).unwrap(), model);
        }
    }
}
