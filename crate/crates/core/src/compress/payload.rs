//! Binary payload codec and bit accounting.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   : "CFP1" | version u16 | scheme u8 | tensor count u16
//! tensor   : name len u16 | name (UTF-8) | rows u32 | cols u32 | body
//! Dense    : rows·cols f64
//! Quantized: r u8 | norm f64 | sign bits | level bits
//!            (bits packed LSB-first, each run padded to a whole byte)
//! LowRank  : retained rank u16 | Quantized(u, rows×k) | Quantized(v, cols×k)
//!            | k × σ f64
//! ```
//!
//! The `r` byte of a Quantized segment is `0xFF` for an all-zero tensor (the
//! rest of the segment is then absent). Bit 7 of `r` is set when the
//! saturated coordinate (code: sign bit 1, level field 0) is negative.
//! A LowRank tensor that truncates to zero has retained rank 0 and no
//! segments.

use super::quantize::{dequantize, quantize_with, QuantizedVector, RoundingMode, MAX_BITS};
use super::{CodecError, Result};
use crate::linalg::{svd, Matrix, ThresholdMode};

pub const MAGIC: &[u8; 4] = b"CFP1";
pub const FORMAT_VERSION: u16 = 1;
/// magic + version + scheme + tensor count
pub const HEADER_BITS: u64 = (4 + 2 + 1 + 2) * 8;

const ZERO_MARKER: u8 = 0xFF;
const NEG_SATURATED_FLAG: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Dense,
    #[default]
    Quantized,
    LowRankQuantized,
}

impl Scheme {
    fn tag(self) -> u8 {
        match self {
            Scheme::Dense => 0,
            Scheme::Quantized => 1,
            Scheme::LowRankQuantized => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Scheme::Dense),
            1 => Ok(Scheme::Quantized),
            2 => Ok(Scheme::LowRankQuantized),
            other => Err(CodecError::Malformed(format!("unknown scheme {other}"))),
        }
    }
}

/// Quantized segment, possibly the all-zero marker.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantSegment {
    Zero { len: usize },
    Values(QuantizedVector),
}

impl QuantSegment {
    fn encode<R: rand::Rng + ?Sized>(
        x: &[f64],
        bits: u8,
        mode: RoundingMode,
        rng: &mut R,
    ) -> Result<Self> {
        match quantize_with(x, bits, mode, rng) {
            Ok(q) => Ok(QuantSegment::Values(q)),
            Err(CodecError::ZeroVector) => Ok(QuantSegment::Zero { len: x.len() }),
            Err(e) => Err(e),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            QuantSegment::Zero { len } => *len,
            QuantSegment::Values(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            QuantSegment::Zero { len } => vec![0.0; *len],
            QuantSegment::Values(q) => dequantize(q),
        }
    }

    fn bits(&self) -> u64 {
        match self {
            QuantSegment::Zero { .. } => 8,
            QuantSegment::Values(q) => {
                let n = q.len() as u64;
                8 + 64 + 8 * n.div_ceil(8) + 8 * (n * u64::from(q.bits())).div_ceil(8)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorBody {
    Dense(Vec<f64>),
    Quantized(QuantSegment),
    LowRank {
        u: QuantSegment,
        v: QuantSegment,
        sigma: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSegment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub body: TensorBody,
}

impl TensorSegment {
    pub fn retained_rank(&self) -> Option<usize> {
        match &self.body {
            TensorBody::LowRank { sigma, .. } => Some(sigma.len()),
            _ => None,
        }
    }

    /// Decoded values of this tensor.
    pub fn reconstruct(&self) -> Matrix {
        match &self.body {
            TensorBody::Dense(v) => Matrix::from_vec(self.rows, self.cols, v.clone()),
            TensorBody::Quantized(q) => Matrix::from_vec(self.rows, self.cols, q.values()),
            TensorBody::LowRank { u, v, sigma } => {
                let k = sigma.len();
                let mut out = Matrix::zeros(self.rows, self.cols);
                if k == 0 {
                    return out;
                }
                let uu = u.values();
                let vv = v.values();
                for j in 0..k {
                    let s = sigma[j];
                    for r in 0..self.rows {
                        let us = uu[r * k + j] * s;
                        if us == 0.0 {
                            continue;
                        }
                        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                            *o += us * vv[c * k + j];
                        }
                    }
                }
                out
            }
        }
    }

    fn bits(&self) -> u64 {
        let head = 8 * (2 + self.name.len() as u64 + 4 + 4);
        let body = match &self.body {
            TensorBody::Dense(v) => 64 * v.len() as u64,
            TensorBody::Quantized(q) => q.bits(),
            TensorBody::LowRank { u, v, sigma } => {
                if sigma.is_empty() {
                    16
                } else {
                    16 + u.bits() + v.bits() + 64 * sigma.len() as u64
                }
            }
        };
        head + body
    }
}

/// Encoding knobs for one payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub scheme: Scheme,
    pub bits: u8,
    pub tau_lowrank: f64,
    pub threshold_mode: ThresholdMode,
    pub rounding: RoundingMode,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Quantized,
            bits: 4,
            tau_lowrank: 0.0,
            threshold_mode: ThresholdMode::Relative,
            rounding: RoundingMode::Deterministic,
        }
    }
}

impl CodecConfig {
    pub fn dense() -> Self {
        Self {
            scheme: Scheme::Dense,
            ..Self::default()
        }
    }

    pub fn quantized(bits: u8) -> Self {
        Self {
            scheme: Scheme::Quantized,
            bits,
            ..Self::default()
        }
    }

    pub fn low_rank(bits: u8, tau: f64) -> Self {
        Self {
            scheme: Scheme::LowRankQuantized,
            bits,
            tau_lowrank: tau,
            ..Self::default()
        }
    }
}

/// A set of named tensors in transmissible form.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedPayload {
    pub scheme: Scheme,
    pub tensors: Vec<TensorSegment>,
}

/// Encodes named tensors. Stochastic rounding needs [`encode_payload_with_rng`].
pub fn encode_payload<'a, I>(tensors: I, cfg: &CodecConfig) -> Result<CompressedPayload>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    if cfg.rounding == RoundingMode::Stochastic {
        return Err(CodecError::Malformed(
            "stochastic rounding requires an explicit rng stream".into(),
        ));
    }
    // Never drawn from in deterministic mode.
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    encode_payload_with_rng(tensors, cfg, &mut unused)
}

pub fn encode_payload_with_rng<'a, I, R>(
    tensors: I,
    cfg: &CodecConfig,
    rng: &mut R,
) -> Result<CompressedPayload>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
    R: rand::Rng + ?Sized,
{
    if cfg.scheme != Scheme::Dense && !(1..=MAX_BITS).contains(&cfg.bits) {
        return Err(CodecError::BadBits(cfg.bits));
    }
    let mut out = Vec::new();
    for (name, m) in tensors {
        if !m.is_finite() {
            return Err(CodecError::NonFinite);
        }
        if name.len() > u16::MAX as usize {
            return Err(CodecError::Malformed(format!("tensor name too long: {name}")));
        }
        let body = match cfg.scheme {
            Scheme::Dense => TensorBody::Dense(m.data().to_vec()),
            Scheme::Quantized => {
                TensorBody::Quantized(QuantSegment::encode(m.data(), cfg.bits, cfg.rounding, rng)?)
            }
            Scheme::LowRankQuantized => encode_low_rank(m, cfg, rng)?,
        };
        out.push(TensorSegment {
            name: name.to_owned(),
            rows: m.rows(),
            cols: m.cols(),
            body,
        });
    }
    if out.len() > u16::MAX as usize {
        return Err(CodecError::Malformed("too many tensors".into()));
    }
    Ok(CompressedPayload {
        scheme: cfg.scheme,
        tensors: out,
    })
}

fn encode_low_rank<R: rand::Rng + ?Sized>(
    m: &Matrix,
    cfg: &CodecConfig,
    rng: &mut R,
) -> Result<TensorBody> {
    let empty = || TensorBody::LowRank {
        u: QuantSegment::Zero { len: 0 },
        v: QuantSegment::Zero { len: 0 },
        sigma: Vec::new(),
    };
    if m.is_zero() || m.is_empty() {
        return Ok(empty());
    }
    let s = svd(m)?;
    // Vectors are never rank-truncated.
    let k = if m.rows().min(m.cols()) == 1 {
        1
    } else {
        crate::linalg::retained_rank(&s.sigma, cfg.threshold_mode, cfg.tau_lowrank)
    };
    if k == 0 {
        return Ok(empty());
    }
    if k > u16::MAX as usize {
        return Err(CodecError::Malformed("retained rank exceeds u16".into()));
    }
    let take = |q: &Matrix| -> Vec<f64> {
        let mut flat = Vec::with_capacity(q.rows() * k);
        for r in 0..q.rows() {
            flat.extend_from_slice(&q.row(r)[..k]);
        }
        flat
    };
    let u = QuantSegment::encode(&take(&s.u), cfg.bits, cfg.rounding, rng)?;
    let v = QuantSegment::encode(&take(&s.v), cfg.bits, cfg.rounding, rng)?;
    Ok(TensorBody::LowRank {
        u,
        v,
        sigma: s.sigma[..k].to_vec(),
    })
}

/// Exact serialized size in bits.
pub fn payload_bits(p: &CompressedPayload) -> u64 {
    HEADER_BITS + p.tensors.iter().map(TensorSegment::bits).sum::<u64>()
}

/// Bits of the same tensors sent as raw 64-bit values.
pub fn dense_bits<'a, I>(tensors: I) -> u64
where
    I: IntoIterator<Item = (&'a str, &'a Matrix)>,
{
    HEADER_BITS
        + tensors
            .into_iter()
            .map(|(name, m)| 8 * (2 + name.len() as u64 + 8) + 64 * m.len() as u64)
            .sum::<u64>()
}

impl CompressedPayload {
    pub fn bits(&self) -> u64 {
        payload_bits(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity((self.bits() / 8) as usize);
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.push(self.scheme.tag());
        w.extend_from_slice(&(self.tensors.len() as u16).to_le_bytes());
        for t in &self.tensors {
            w.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            w.extend_from_slice(t.name.as_bytes());
            w.extend_from_slice(&(t.rows as u32).to_le_bytes());
            w.extend_from_slice(&(t.cols as u32).to_le_bytes());
            match &t.body {
                TensorBody::Dense(v) => {
                    for x in v {
                        w.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorBody::Quantized(q) => write_quant(&mut w, q),
                TensorBody::LowRank { u, v, sigma } => {
                    w.extend_from_slice(&(sigma.len() as u16).to_le_bytes());
                    if !sigma.is_empty() {
                        write_quant(&mut w, u);
                        write_quant(&mut w, v);
                        for s in sigma {
                            w.extend_from_slice(&s.to_le_bytes());
                        }
                    }
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CodecError::Malformed("bad magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(CodecError::Malformed(format!(
                "unsupported format version {version}"
            )));
        }
        let scheme = Scheme::from_tag(r.u8()?)?;
        let count = r.u16()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CodecError::Malformed("tensor name is not UTF-8".into()))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| CodecError::Malformed("tensor too large".into()))?;
            let body = match scheme {
                Scheme::Dense => {
                    let mut v = Vec::with_capacity(n.min(bytes.len() / 8));
                    for _ in 0..n {
                        v.push(r.f64()?);
                    }
                    TensorBody::Dense(v)
                }
                Scheme::Quantized => TensorBody::Quantized(read_quant(&mut r, n)?),
                Scheme::LowRankQuantized => {
                    let k = r.u16()? as usize;
                    if k == 0 {
                        TensorBody::LowRank {
                            u: QuantSegment::Zero { len: 0 },
                            v: QuantSegment::Zero { len: 0 },
                            sigma: Vec::new(),
                        }
                    } else {
                        if k > rows.min(cols) {
                            return Err(CodecError::Malformed(format!(
                                "retained rank {k} exceeds {rows}x{cols}"
                            )));
                        }
                        let u = read_quant(&mut r, rows * k)?;
                        let v = read_quant(&mut r, cols * k)?;
                        let mut sigma = Vec::with_capacity(k);
                        for _ in 0..k {
                            sigma.push(r.f64()?);
                        }
                        TensorBody::LowRank { u, v, sigma }
                    }
                }
            };
            tensors.push(TensorSegment {
                name,
                rows,
                cols,
                body,
            });
        }
        if r.pos != bytes.len() {
            return Err(CodecError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { scheme, tensors })
    }

    /// Named, decoded tensors in payload order.
    pub fn reconstruct(&self) -> Vec<(String, Matrix)> {
        self.tensors
            .iter()
            .map(|t| (t.name.clone(), t.reconstruct()))
            .collect()
    }
}

/// Parses and reconstructs a serialized payload.
pub fn decode_payload(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    Ok(CompressedPayload::from_bytes(bytes)?.reconstruct())
}

fn write_quant(w: &mut Vec<u8>, seg: &QuantSegment) {
    let q = match seg {
        QuantSegment::Zero { .. } => {
            w.push(ZERO_MARKER);
            return;
        }
        QuantSegment::Values(q) => q,
    };
    let bits = q.bits();
    let top = 1u64 << bits;
    let flag = if q.saturated_sign() == Some(true) {
        NEG_SATURATED_FLAG
    } else {
        0
    };
    w.push(bits | flag);
    w.extend_from_slice(&q.norm().to_le_bytes());

    let mut signs = BitWriter::default();
    for (&neg, &level) in q.signs().iter().zip(q.levels()) {
        signs.push(u64::from(neg || level == top), 1);
    }
    w.extend_from_slice(&signs.finish());

    let mut levels = BitWriter::default();
    for &level in q.levels() {
        levels.push(if level == top { 0 } else { level }, bits);
    }
    w.extend_from_slice(&levels.finish());
}

fn read_quant(r: &mut Reader<'_>, n: usize) -> Result<QuantSegment> {
    let head = r.u8()?;
    if head == ZERO_MARKER {
        return Ok(QuantSegment::Zero { len: n });
    }
    let negative_saturated = head & NEG_SATURATED_FLAG != 0;
    let bits = head & !NEG_SATURATED_FLAG;
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(CodecError::Malformed(format!("bad bit width {bits}")));
    }
    let norm = r.f64()?;
    let sign_bytes = r.take(n.div_ceil(8))?;
    let level_bytes = r.take((n * bits as usize).div_ceil(8))?;
    let mut sr = BitReader::new(sign_bytes);
    let mut lr = BitReader::new(level_bytes);
    let top = 1u64 << bits;
    let mut signs = Vec::with_capacity(n);
    let mut levels = Vec::with_capacity(n);
    let mut saw_saturated = false;
    for _ in 0..n {
        let s = sr.read(1) == 1;
        let field = lr.read(bits);
        if s && field == 0 {
            saw_saturated = true;
            signs.push(negative_saturated);
            levels.push(top);
        } else {
            signs.push(s);
            levels.push(field);
        }
    }
    if !sr.padding_is_zero() || !lr.padding_is_zero() {
        return Err(CodecError::Malformed("non-zero padding bits".into()));
    }
    if negative_saturated && !saw_saturated {
        return Err(CodecError::Malformed("saturation flag without saturated level".into()));
    }
    Ok(QuantSegment::Values(QuantizedVector::from_parts(
        bits, norm, signs, levels,
    )?))
}

#[derive(Default)]
struct BitWriter {
    out: Vec<u8>,
    acc: u128,
    filled: u32,
}

impl BitWriter {
    fn push(&mut self, value: u64, width: u8) {
        self.acc |= u128::from(value) << self.filled;
        self.filled += u32::from(width);
        while self.filled >= 8 {
            self.out.push((self.acc & 0xFF) as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push((self.acc & 0xFF) as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    buf: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, bit: 0 }
    }

    fn read(&mut self, width: u8) -> u64 {
        let mut v = 0u64;
        for i in 0..usize::from(width) {
            let b = self.bit + i;
            let byte = self.buf[b / 8];
            v |= u64::from((byte >> (b % 8)) & 1) << i;
        }
        self.bit += usize::from(width);
        v
    }

    fn padding_is_zero(&self) -> bool {
        let total = self.buf.len() * 8;
        (self.bit..total).all(|b| (self.buf[b / 8] >> (b % 8)) & 1 == 0)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CodecError::Malformed("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CodecError::Malformed("non-finite real".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn named(m: &Matrix) -> [(&str, &Matrix); 1] {
        [("t", m)]
    }

    #[test]
    fn empty_payload_is_header_only() {
        let p = encode_payload(std::iter::empty(), &CodecConfig::dense()).unwrap();
        assert_eq!(payload_bits(&p), HEADER_BITS);
        assert_eq!(p.to_bytes().len() as u64 * 8, HEADER_BITS);
    }

    #[test]
    fn dense_bit_counts() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = encode_payload(named(&m), &CodecConfig::dense()).unwrap();
        let tensor_head = 8 * (2 + 1 + 4 + 4);
        assert_eq!(payload_bits(&p), HEADER_BITS + tensor_head + 4 * 64);
        assert_eq!(payload_bits(&p), dense_bits(named(&m)));

        let big = Matrix::from_vec(1, 1024, (0..1024).map(|i| i as f64).collect());
        let p = encode_payload(named(&big), &CodecConfig::dense()).unwrap();
        assert_eq!(payload_bits(&p), HEADER_BITS + tensor_head + 1024 * 64);
    }

    #[test]
    fn quantized_bit_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let big = Matrix::from_vec(1, 1024, (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = encode_payload(named(&big), &CodecConfig::quantized(4)).unwrap();
        let tensor_head = 8 * (2 + 1 + 4 + 4);
        // r byte + norm + 1024 × (1 sign + 4 level)
        assert_eq!(payload_bits(&p), HEADER_BITS + tensor_head + 8 + 64 + 1024 * 5);
        assert_eq!(p.to_bytes().len() as u64 * 8, payload_bits(&p));
    }

    #[test]
    fn quantized_decode_example() {
        let m = Matrix::from_rows(&[&[3.0, 4.0]]);
        let bytes = encode_payload(named(&m), &CodecConfig::quantized(2))
            .unwrap()
            .to_bytes();
        let out = decode_payload(&bytes).unwrap();
        assert_eq!(out[0].1.data(), &[2.5, 3.75]);
    }

    #[test]
    fn dense_roundtrip_is_exact() {
        let m = Matrix::from_rows(&[&[0.1, -7.25e-300], &[1e300, 3.0]]);
        let bytes = encode_payload(named(&m), &CodecConfig::dense()).unwrap().to_bytes();
        assert_eq!(decode_payload(&bytes).unwrap()[0].1, m);
    }

    #[test]
    fn zero_tensor_uses_marker() {
        let z = Matrix::zeros(3, 3);
        let p = encode_payload(named(&z), &CodecConfig::quantized(4)).unwrap();
        let tensor_head = 8 * (2 + 1 + 4 + 4);
        assert_eq!(payload_bits(&p), HEADER_BITS + tensor_head + 8);
        let bytes = p.to_bytes();
        assert_eq!(*bytes.last().unwrap(), 0xFF);
        assert_eq!(decode_payload(&bytes).unwrap()[0].1, z);

        let p = encode_payload(named(&z), &CodecConfig::low_rank(4, 0.1)).unwrap();
        assert_eq!(decode_payload(&p.to_bytes()).unwrap()[0].1, z);
    }

    #[test]
    fn negative_saturated_coordinate_roundtrips() {
        let m = Matrix::from_rows(&[&[0.0, -9.0, 0.1]]);
        let p = encode_payload(named(&m), &CodecConfig::quantized(3)).unwrap();
        let bytes = p.to_bytes();
        let back = CompressedPayload::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        let vals = back.reconstruct()[0].1.clone();
        assert_eq!(vals.get(0, 1), -p.tensors[0].reconstruct().get(0, 1).abs());
    }

    #[test]
    fn low_rank_truncates_and_reconstructs() {
        // rank-2 matrix plus a tiny rank-1 perturbation
        let a = Matrix::from_rows(&[
            &[4.0, 0.0, 0.0],
            &[0.0, 2.0, 0.0],
            &[0.0, 0.0, 1e-6],
            &[0.0, 0.0, 0.0],
        ]);
        let p = encode_payload(named(&a), &CodecConfig::low_rank(32, 0.01)).unwrap();
        assert_eq!(p.tensors[0].retained_rank(), Some(2));
        let back = decode_payload(&p.to_bytes()).unwrap();
        let err = back[0].1.sub(&a).unwrap().frobenius_norm();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn low_rank_vectors_are_not_truncated() {
        let b = Matrix::from_rows(&[&[0.5, -0.25, 0.125]]);
        let p = encode_payload(named(&b), &CodecConfig::low_rank(32, 10.0)).unwrap();
        assert_eq!(p.tensors[0].retained_rank(), Some(1));
        let back = decode_payload(&p.to_bytes()).unwrap();
        assert!(back[0].1.sub(&b).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let m = Matrix::from_rows(&[&[3.0, 4.0]]);
        let bytes = encode_payload(named(&m), &CodecConfig::quantized(4)).unwrap().to_bytes();
        for cut in 0..bytes.len() {
            assert!(matches!(
                CompressedPayload::from_bytes(&bytes[..cut]),
                Err(CodecError::Malformed(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CompressedPayload::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(CompressedPayload::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(CompressedPayload::from_bytes(&bad).is_err());
    }

    #[test]
    fn stochastic_requires_rng_entry_point() {
        let m = Matrix::from_rows(&[&[1.0]]);
        let cfg = CodecConfig {
            rounding: RoundingMode::Stochastic,
            ..CodecConfig::quantized(4)
        };
        assert!(encode_payload(named(&m), &cfg).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(encode_payload_with_rng(named(&m), &cfg, &mut rng).is_ok());
    }

    #[test]
    fn bad_bits_rejected() {
        let m = Matrix::from_rows(&[&[1.0]]);
        assert_eq!(
            encode_payload(named(&m), &CodecConfig::quantized(0)),
            Err(CodecError::BadBits(0))
        );
    }
}
