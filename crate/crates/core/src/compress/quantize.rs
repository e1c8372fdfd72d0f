//! Norm-scaled sign/level quantization.
//!
//! A vector `x` is sent as its ℓ2 norm plus, per coordinate, a sign bit and
//! an integer level in `[0, 2^r]`, decoding to `‖x‖ · sign · level / 2^r`.
//! Deterministic mode rounds `2^r·|x_i|/‖x‖` to the nearest integer;
//! stochastic mode rounds up or down with probabilities that make the
//! decoded value unbiased.
//!
//! Level `2^r` ("saturated") is reachable only by a coordinate holding almost
//! all of the vector's energy. It does not fit an `r`-bit field, so the wire
//! encoding uses the otherwise unused code "sign bit set, field 0" for it and
//! carries the sign of saturated coordinates in one flag bit of the segment
//! header (see `payload`). This keeps levels exact without widening fields.

use rand::Rng;

use super::{CodecError, Result};

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoundingMode {
    #[default]
    Deterministic,
    Stochastic,
}

/// Quantized form of a non-zero real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    bits: u8,
    norm: f64,
    /// `true` = negative.
    signs: Vec<bool>,
    levels: Vec<u64>,
}

impl QuantizedVector {
    /// Validating constructor, used by the payload decoder.
    pub fn from_parts(bits: u8, norm: f64, signs: Vec<bool>, levels: Vec<u64>) -> Result<Self> {
        check_bits(bits)?;
        if signs.len() != levels.len() {
            return Err(CodecError::Malformed("sign/level length mismatch".into()));
        }
        if !(norm.is_finite() && norm > 0.0) {
            return Err(CodecError::Malformed(format!("invalid norm {norm}")));
        }
        let top = 1u64 << bits;
        let mut saturated_sign = None;
        for (&s, &l) in signs.iter().zip(&levels) {
            if l > top {
                return Err(CodecError::Malformed(format!("level {l} exceeds 2^{bits}")));
            }
            if l == 0 && s {
                return Err(CodecError::Malformed("negative zero level".into()));
            }
            if l == top {
                match saturated_sign {
                    None => saturated_sign = Some(s),
                    Some(prev) if prev != s => {
                        return Err(CodecError::Malformed(
                            "saturated levels with mixed signs".into(),
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            bits,
            norm,
            signs,
            levels,
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    pub fn levels(&self) -> &[u64] {
        &self.levels
    }

    /// Sign shared by all saturated coordinates, if any.
    pub fn saturated_sign(&self) -> Option<bool> {
        let top = 1u64 << self.bits;
        self.levels
            .iter()
            .position(|&l| l == top)
            .map(|i| self.signs[i])
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(CodecError::BadBits(bits))
    }
}

fn l2_norm(x: &[f64]) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite);
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(CodecError::NonFinite);
    }
    if norm == 0.0 {
        return Err(CodecError::ZeroVector);
    }
    Ok(norm)
}

/// Deterministic quantization (round to nearest level).
pub fn quantize(x: &[f64], bits: u8) -> Result<QuantizedVector> {
    quantize_impl(x, bits, None::<&mut rand_chacha::ChaCha8Rng>)
}

/// Unbiased stochastic quantization driven by the caller's stream.
pub fn quantize_stochastic<R: Rng + ?Sized>(
    x: &[f64],
    bits: u8,
    rng: &mut R,
) -> Result<QuantizedVector> {
    quantize_impl(x, bits, Some(rng))
}

/// Dispatches on `mode`; `rng` is only touched in stochastic mode.
pub fn quantize_with<R: Rng + ?Sized>(
    x: &[f64],
    bits: u8,
    mode: RoundingMode,
    rng: &mut R,
) -> Result<QuantizedVector> {
    match mode {
        RoundingMode::Deterministic => quantize(x, bits),
        RoundingMode::Stochastic => quantize_stochastic(x, bits, rng),
    }
}

fn quantize_impl<R: Rng + ?Sized>(
    x: &[f64],
    bits: u8,
    mut rng: Option<&mut R>,
) -> Result<QuantizedVector> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(CodecError::ZeroVector);
    }
    let norm = l2_norm(x)?;
    let scale = (1u64 << bits) as f64;
    let top = 1u64 << bits;

    let mut signs = Vec::with_capacity(x.len());
    let mut levels = Vec::with_capacity(x.len());
    let mut saturated_sign: Option<bool> = None;
    for &xi in x {
        let y = (scale * xi.abs() / norm).min(scale);
        let mut level = match rng.as_deref_mut() {
            None => y.round() as u64,
            Some(r) => {
                let floor = y.floor();
                let frac = y - floor;
                let up = frac > 0.0 && r.random::<f64>() < frac;
                floor as u64 + u64::from(up)
            }
        };
        let negative = xi < 0.0 && level > 0;
        if level == top {
            // Only stochastic rounding at r = 1 can saturate two coordinates;
            // the wire format carries a single saturated sign, so a
            // conflicting one is pulled down one level.
            match saturated_sign {
                None => saturated_sign = Some(negative),
                Some(s) if s != negative => level = top - 1,
                _ => {}
            }
        }
        signs.push(negative);
        levels.push(level);
    }
    Ok(QuantizedVector {
        bits,
        norm,
        signs,
        levels,
    })
}

pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    let scale = (1u64 << q.bits) as f64;
    q.signs
        .iter()
        .zip(&q.levels)
        .map(|(&neg, &level)| {
            let mag = q.norm * (level as f64) / scale;
            if neg {
                -mag
            } else {
                mag
            }
        })
        .collect()
}
