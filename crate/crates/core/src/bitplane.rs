//! Initial fixed-point quantization and bit-plane codebooks.
//!
//! Bit `j = 1` is the least significant. Coefficients are expressed in real
//! activation units, so the natural coefficient of bit `j` is
//! `2^(j-1) * scale` and a reconstruction is `clip_lo + sum_j alpha_j * plane_j`.

use crate::tensor_store::{ActivationTensor, Shape};
use crate::{Error, Result};

pub const MAX_BITS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantizerKind {
    /// Fixed-point rounding with a power-of-two step, `clip_lo = 0`.
    Rounding,
    /// Clip to `[clip_lo, clip_hi]` and split the range into `2^D - 1` steps.
    ClipScale,
}

impl QuantizerKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::Rounding => "rounding",
            QuantizerKind::ClipScale => "clip_scale",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "rounding" => Some(QuantizerKind::Rounding),
            "clip_scale" => Some(QuantizerKind::ClipScale),
            _ => None,
        }
    }
}

/// How the upper clipping bound is derived from calibration data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipRule {
    /// Percentile (in `(0, 100]`) of `|x|`, linearly interpolated between
    /// order statistics.
    Percentile(f64),
    ExactMax,
}

impl Default for ClipRule {
    fn default() -> Self {
        ClipRule::Percentile(99.9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitQuantizerSpec {
    kind: QuantizerKind,
    bits: u32,
    clip_lo: f64,
    clip_hi: f64,
    scale: f64,
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidSpec(format!(
            "bit depth {bits} outside 1..={MAX_BITS}"
        )));
    }
    Ok(())
}

impl InitQuantizerSpec {
    pub fn clip_scale(bits: u32, clip_lo: f64, clip_hi: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(clip_lo.is_finite() && clip_hi.is_finite() && clip_lo < clip_hi) {
            return Err(Error::InvalidSpec(format!(
                "clip range [{clip_lo}, {clip_hi}] is empty or not finite"
            )));
        }
        let steps = ((1u32 << bits) - 1) as f64;
        Ok(InitQuantizerSpec {
            kind: QuantizerKind::ClipScale,
            bits,
            clip_lo,
            clip_hi,
            scale: (clip_hi - clip_lo) / steps,
        })
    }

    pub fn rounding(bits: u32, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidSpec(format!("scale {scale} must be positive")));
        }
        let steps = ((1u32 << bits) - 1) as f64;
        Ok(InitQuantizerSpec {
            kind: QuantizerKind::Rounding,
            bits,
            clip_lo: 0.0,
            clip_hi: scale * steps,
            scale,
        })
    }

    /// Rebuilds a spec read from a file, checking that the stored fields are
    /// mutually consistent.
    pub fn from_parts(
        kind: QuantizerKind,
        bits: u32,
        clip_lo: f64,
        clip_hi: f64,
        scale: f64,
    ) -> Result<Self> {
        let rebuilt = match kind {
            QuantizerKind::ClipScale => Self::clip_scale(bits, clip_lo, clip_hi)?,
            QuantizerKind::Rounding => Self::rounding(bits, scale)?,
        };
        if rebuilt.clip_lo != clip_lo || rebuilt.clip_hi != clip_hi || rebuilt.scale != scale {
            return Err(Error::InvalidSpec(format!(
                "{} spec fields are inconsistent: clip [{clip_lo}, {clip_hi}], scale {scale}",
                kind.name()
            )));
        }
        Ok(rebuilt)
    }

    /// Derives a spec from calibration samples of one layer.
    ///
    /// For `ClipScale` the range is `[0, c]` where `c` comes from `rule`. For
    /// `Rounding` the step is the smallest power of two whose `2^D - 1`
    /// multiples cover `c`. A layer that is identically zero gets `c = 1`.
    pub fn calibrate(
        kind: QuantizerKind,
        bits: u32,
        rule: ClipRule,
        samples: &[ActivationTensor],
    ) -> Result<Self> {
        check_bits(bits)?;
        if samples.is_empty() {
            return Err(Error::Empty("calibration needs at least one sample"));
        }
        let mut magnitudes: Vec<f64> = samples
            .iter()
            .flat_map(|t| t.values().iter().map(|v| (*v as f64).abs()))
            .collect();
        let mut hi = match rule {
            ClipRule::ExactMax => magnitudes.iter().copied().fold(0.0, f64::max),
            ClipRule::Percentile(pct) => {
                if !(pct > 0.0 && pct <= 100.0) {
                    return Err(Error::InvalidSpec(format!(
                        "percentile {pct} outside (0, 100]"
                    )));
                }
                percentile(&mut magnitudes, pct)
            }
        };
        if hi <= 0.0 {
            hi = 1.0;
        }
        match kind {
            QuantizerKind::ClipScale => Self::clip_scale(bits, 0.0, hi),
            QuantizerKind::Rounding => {
                let steps = ((1u32 << bits) - 1) as f64;
                let scale = 2f64.powi((hi / steps).log2().ceil() as i32);
                Self::rounding(bits, scale)
            }
        }
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn clip_lo(&self) -> f64 {
        self.clip_lo
    }

    pub fn clip_hi(&self) -> f64 {
        self.clip_hi
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Integer code for one real value. Ties round half away from zero.
    pub fn quantize(&self, x: f64) -> u32 {
        let max = self.max_code() as f64;
        let code = match self.kind {
            QuantizerKind::ClipScale => {
                ((x.clamp(self.clip_lo, self.clip_hi) - self.clip_lo) / self.scale).round()
            }
            QuantizerKind::Rounding => (x / self.scale).round().clamp(0.0, max),
        };
        // Division can land a hair outside the range at the clip bounds.
        code.clamp(0.0, max) as u32
    }

    pub fn dequantize(&self, code: u32) -> f64 {
        self.clip_lo + self.scale * code as f64
    }

    /// `alpha_j = 2^(j-1) * scale`, the coefficients that reproduce plain
    /// fixed-point dequantization.
    pub fn natural_coefficients(&self) -> Vec<f64> {
        (0..self.bits)
            .map(|j| (1u64 << j) as f64 * self.scale)
            .collect()
    }

    /// Natural coefficients on the top `d` bits, zero below: the plain
    /// truncation of the codes to `d` most significant bits.
    pub fn truncated_coefficients(&self, d: usize) -> Vec<f64> {
        let keep_from = (self.bits as usize).saturating_sub(d);
        self.natural_coefficients()
            .into_iter()
            .enumerate()
            .map(|(j, a)| if j >= keep_from { a } else { 0.0 })
            .collect()
    }
}

/// Linear-interpolation percentile; reorders `values`.
fn percentile(values: &mut [f64], pct: f64) -> f64 {
    let n = values.len();
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut lo_value, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return lo_value;
    }
    let hi_value = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_value + frac * (hi_value - lo_value)
}

/// The `D` binary planes of one quantized activation block. Codes are held
/// directly; plane `j` is bit `j - 1` of every code.
#[derive(Debug, Clone, PartialEq)]
pub struct BitplaneCodebook {
    pub spec: InitQuantizerSpec,
    pub layer_id: usize,
    pub sample_id: usize,
    pub shape: Shape,
    codes: Vec<u16>,
}

pub fn init_quantize(x: &ActivationTensor, spec: &InitQuantizerSpec) -> BitplaneCodebook {
    let codes = x
        .values()
        .iter()
        .map(|&v| spec.quantize(v as f64) as u16)
        .collect();
    BitplaneCodebook {
        spec: *spec,
        layer_id: x.layer_id,
        sample_id: x.sample_id,
        shape: x.shape,
        codes,
    }
}

/// Splits codes into `bits` planes, least significant first.
pub fn decompose_bits(codes: &[u32], bits: u32) -> Result<Vec<Vec<u8>>> {
    check_bits(bits)?;
    let max = (1u32 << bits) - 1;
    if let Some((index, &code)) = codes.iter().enumerate().find(|(_, &c)| c > max) {
        return Err(Error::CodeOutOfRange { index, code, bits });
    }
    Ok((0..bits)
        .map(|j| codes.iter().map(|c| ((c >> j) & 1) as u8).collect())
        .collect())
}

/// Inverse of [`decompose_bits`]: `sum_j 2^(j-1) * plane_j`.
pub fn compose_bits(planes: &[Vec<u8>]) -> Result<Vec<u32>> {
    let Some(first) = planes.first() else {
        return Ok(Vec::new());
    };
    let mut codes = vec![0u32; first.len()];
    for (j, plane) in planes.iter().enumerate() {
        if plane.len() != codes.len() {
            return Err(Error::LengthMismatch {
                expected: codes.len(),
                actual: plane.len(),
            });
        }
        for (c, &b) in codes.iter_mut().zip(plane) {
            *c += (b as u32 & 1) << j;
        }
    }
    Ok(codes)
}

impl BitplaneCodebook {
    pub fn from_codes(
        spec: InitQuantizerSpec,
        layer_id: usize,
        sample_id: usize,
        shape: Shape,
        codes: &[u32],
    ) -> Result<Self> {
        if codes.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: codes.len(),
            });
        }
        let max = spec.max_code();
        if let Some((index, &code)) = codes.iter().enumerate().find(|(_, &c)| c > max) {
            return Err(Error::CodeOutOfRange {
                index,
                code,
                bits: spec.bits(),
            });
        }
        Ok(BitplaneCodebook {
            spec,
            layer_id,
            sample_id,
            shape,
            codes: codes.iter().map(|&c| c as u16).collect(),
        })
    }

    pub fn bits(&self) -> usize {
        self.spec.bits() as usize
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> impl ExactSizeIterator<Item = u32> + '_ {
        self.codes.iter().map(|&c| c as u32)
    }

    /// Plane `j` (1-based) as one byte per element.
    pub fn plane(&self, j: usize) -> Vec<u8> {
        assert!((1..=self.bits()).contains(&j), "bit {j} out of range");
        self.codes.iter().map(|&c| ((c >> (j - 1)) & 1) as u8).collect()
    }

    /// Plane `j` (1-based) packed 64 elements per word, element `e` in bit
    /// `e % 64` of word `e / 64`.
    pub fn packed_plane(&self, j: usize) -> Vec<u64> {
        assert!((1..=self.bits()).contains(&j), "bit {j} out of range");
        let mut words = vec![0u64; self.codes.len().div_ceil(64)];
        for (e, &c) in self.codes.iter().enumerate() {
            words[e / 64] |= (((c >> (j - 1)) & 1) as u64) << (e % 64);
        }
        words
    }

    /// `clip_lo + scale * code` for every element.
    pub fn dequantize_natural(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| self.spec.dequantize(c as u32))
            .collect()
    }

    /// `clip_lo + sum_j alpha_j * plane_j` for every element, in f64.
    pub fn reconstruct_values(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let table = self.level_table(alpha)?;
        Ok(self.codes.iter().map(|&c| table[c as usize]).collect())
    }

    /// The reconstruction level of every possible code under `alpha`.
    pub fn level_table(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        level_table(&self.spec, alpha)
    }
}

pub fn level_table(spec: &InitQuantizerSpec, alpha: &[f64]) -> Result<Vec<f64>> {
    let bits = spec.bits() as usize;
    if alpha.len() != bits {
        return Err(Error::LengthMismatch {
            expected: bits,
            actual: alpha.len(),
        });
    }
    Ok((0..1usize << bits)
        .map(|code| {
            let mut v = spec.clip_lo();
            for (j, a) in alpha.iter().enumerate() {
                if code >> j & 1 == 1 {
                    v += a;
                }
            }
            v
        })
        .collect())
}

/// Applies per-bit coefficients to a codebook and returns the result as an
/// `f32` activation block.
pub fn reconstruct(codebook: &BitplaneCodebook, alpha: &[f64]) -> Result<ActivationTensor> {
    let values = codebook
        .reconstruct_values(alpha)?
        .into_iter()
        .map(|v| v as f32)
        .collect();
    ActivationTensor::new(codebook.layer_id, codebook.sample_id, codebook.shape, values)
}
