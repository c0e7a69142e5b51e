//! Distortion, rate and efficiency measurements.

use crate::bitplane::BitplaneCodebook;
use crate::bottleneck::QuantScheme;
use crate::tensor_store::ActivationTensor;
use crate::{Error, Result};

/// Operation count of the 32-bit baseline network, in billions.
pub const BASELINE_OPS_BILLIONS: f64 = 285.0;
/// Activation memory of the 32-bit baseline network, in megabytes.
pub const BASELINE_MEM_MEGABYTES: f64 = 34.0;

/// Sum of squared differences between an original block and a reconstruction.
pub fn squared_error(original: &[f32], recon: &[f64]) -> Result<f64> {
    if original.len() != recon.len() {
        return Err(Error::LengthMismatch {
            expected: original.len(),
            actual: recon.len(),
        });
    }
    Ok(original
        .iter()
        .zip(recon)
        .map(|(&x, &r)| {
            let e = x as f64 - r;
            e * e
        })
        .sum())
}

/// Mean squared error over all elements of all aligned tensor pairs.
pub fn mse(originals: &[ActivationTensor], recons: &[ActivationTensor]) -> Result<f64> {
    if originals.len() != recons.len() {
        return Err(Error::LengthMismatch {
            expected: originals.len(),
            actual: recons.len(),
        });
    }
    if originals.is_empty() {
        return Err(Error::Empty("mse of no tensors"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, r) in originals.iter().zip(recons) {
        if x.shape != r.shape {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: {} vs {}",
                x.sample_id, x.shape, r.shape
            )));
        }
        let recon: Vec<f64> = r.values().iter().map(|&v| v as f64).collect();
        sum += squared_error(x.values(), &recon)?;
        count += x.len();
    }
    Ok(sum / count as f64)
}

/// `10 log10((2^D - 1)^2 / mse)`. Zero error gives `+inf`.
pub fn psnr(mse: f64, bits: u32) -> Result<f64> {
    if mse < 0.0 || mse.is_nan() {
        return Err(Error::NegativeMse(mse));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = ((1u64 << bits) - 1) as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR lost going from `reference_mse` to `mse`, in dB:
/// `psnr(reference) - psnr(mse)`. Two exact reconstructions lose nothing.
pub fn psnr_loss(reference_mse: f64, mse: f64, bits: u32) -> Result<f64> {
    let (a, b) = (psnr(reference_mse, bits)?, psnr(mse, bits)?);
    if a.is_infinite() && b.is_infinite() {
        return Ok(0.0);
    }
    Ok(a - b)
}

/// One-decimal rounding with ties away from zero, as printed in reports.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EfficiencyReport {
    pub bits: f64,
    pub ops: f64,
    pub mem: f64,
    pub baseline_ops: f64,
    pub baseline_mem: f64,
}

impl EfficiencyReport {
    /// `32 / bits`.
    pub fn improvement(&self) -> f64 {
        32.0 / self.bits
    }

    pub fn ops_display(&self) -> f64 {
        round1(self.ops)
    }

    pub fn mem_display(&self) -> f64 {
        round1(self.mem)
    }

    /// Improvement as the ratio of the one-decimal memory figures, the
    /// convention of the published efficiency table (34.0 / 1.1 = 30.9).
    pub fn improvement_display(&self) -> f64 {
        round1(round1(self.baseline_mem) / self.mem_display())
    }
}

pub fn efficiency(bits: f64, baseline_ops: f64, baseline_mem: f64) -> Result<EfficiencyReport> {
    if !(bits > 0.0 && bits <= 32.0) {
        return Err(Error::BitsOutOfRange(bits));
    }
    if !(baseline_ops > 0.0 && baseline_mem > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "baselines must be positive, got {baseline_ops} ops and {baseline_mem} memory"
        )));
    }
    Ok(EfficiencyReport {
        bits,
        ops: baseline_ops * bits / 32.0,
        mem: baseline_mem * bits / 32.0,
        baseline_ops,
        baseline_mem,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitStatistics {
    /// Fraction of ones in each plane, bit 1 first.
    pub rate_of_one: Vec<f64>,
    /// `alpha_j / (2^(j-1) * scale)`; 1 for every bit under plain
    /// fixed-point dequantization.
    pub coefficient_ratio: Vec<f64>,
}

/// Fraction of ones per plane over every element of every codebook.
pub fn rate_of_one(codebooks: &[BitplaneCodebook]) -> Vec<f64> {
    let Some(first) = codebooks.first() else {
        return Vec::new();
    };
    let bits = first.bits();
    let mut ones = vec![0u64; bits];
    let mut total = 0u64;
    for cb in codebooks {
        for code in cb.codes() {
            for (j, n) in ones.iter_mut().enumerate() {
                *n += (code >> j & 1) as u64;
            }
        }
        total += cb.len() as u64;
    }
    ones.into_iter()
        .map(|n| if total == 0 { 0.0 } else { n as f64 / total as f64 })
        .collect()
}

pub fn bit_statistics(codebooks: &[BitplaneCodebook], scheme: &QuantScheme) -> BitStatistics {
    let natural = scheme.spec.natural_coefficients();
    BitStatistics {
        rate_of_one: rate_of_one(codebooks),
        coefficient_ratio: scheme
            .coefficients
            .alpha
            .iter()
            .zip(&natural)
            .map(|(a, n)| a / n)
            .collect(),
    }
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into the
/// end bins.
pub fn histogram(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins.max(1)];
    let width = (hi - lo) / counts.len() as f64;
    for v in values {
        let b = if width > 0.0 {
            ((v - lo) / width).floor().clamp(0.0, (counts.len() - 1) as f64) as usize
        } else {
            0
        };
        counts[b] += 1;
    }
    counts
}
