//! Per-layer rate selection by a PSNR-loss-thresholded penalty sweep.
//!
//! For each layer the penalty grows along an ascending grid. At every step the
//! coefficients are refitted jointly over all fitting samples, the PSNR loss
//! `t_i` of every sample is measured, and the sweep stops at the first penalty
//! whose worst loss `max_i t_i` exceeds the threshold. The last penalty that
//! stayed within the threshold defines the layer's scheme.

use std::fmt::Write;

use rayon::prelude::*;

use crate::bitplane::{init_quantize, BitplaneCodebook, ClipRule, InitQuantizerSpec, QuantizerKind};
use crate::metrics;
use crate::solver::{build_design, solve_lasso_from, CoefficientVector, DesignSystem, LambdaGrid, SolverOptions};
use crate::tensor_store::{read_samples, ActivationTensor, DatasetManifest};
use crate::{Error, Result};

/// What the per-sample PSNR loss is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossReference {
    /// `t_i = PSNR(natural D-bit dequantization) - PSNR(reconstruction)`.
    #[default]
    InitialQuantization,
    /// `t_i = 20 log10(2^D - 1) - PSNR(reconstruction)`, the shortfall from
    /// the peak term alone.
    Peak,
}

impl LossReference {
    pub fn name(self) -> &'static str {
        match self {
            LossReference::InitialQuantization => "initial",
            LossReference::Peak => "peak",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "initial" => Some(LossReference::InitialQuantization),
            "peak" => Some(LossReference::Peak),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottleneckOptions {
    /// PSNR-loss threshold `T` in dB.
    pub threshold_db: f64,
    pub grid: LambdaGrid,
    pub solver: SolverOptions,
    pub reference: LossReference,
}

impl BottleneckOptions {
    pub fn with_threshold(threshold_db: f64) -> Self {
        BottleneckOptions {
            threshold_db,
            grid: LambdaGrid::default(),
            solver: SolverOptions::default(),
            reference: LossReference::default(),
        }
    }
}

/// Per-layer quantization result.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantScheme {
    pub layer_id: usize,
    pub spec: InitQuantizerSpec,
    pub coefficients: CoefficientVector,
    /// PSNR of the reconstruction over all fitting samples jointly.
    pub psnr_db: f64,
    /// `max_i t_i`.
    pub psnr_loss_db: f64,
    pub t_per_sample: Vec<f64>,
    pub threshold_db: f64,
    /// Set when even the smallest penalty on the grid exceeded the threshold.
    pub threshold_unmet: bool,
    pub loss_reference: LossReference,
}

impl QuantScheme {
    /// Number of bits with a nonzero coefficient, `d`.
    pub fn effective_rate(&self) -> usize {
        self.coefficients.support.len()
    }

    pub fn lambda(&self) -> f64 {
        self.coefficients.lambda
    }

    pub fn validate(&self) -> Result<()> {
        let bits = self.spec.bits() as usize;
        let invalid = |m: String| Err(Error::InvalidArgument(format!("scheme for layer {}: {m}", self.layer_id)));
        if self.coefficients.alpha.len() != bits {
            return invalid(format!("{} coefficients for D = {bits}", self.coefficients.alpha.len()));
        }
        if self.t_per_sample.is_empty() {
            return invalid("no per-sample losses".into());
        }
        let worst = self.t_per_sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if worst.to_bits() != self.psnr_loss_db.to_bits() {
            return invalid(format!("psnr_loss_db {} is not max_i t_i = {worst}", self.psnr_loss_db));
        }
        if !self.threshold_unmet && !(self.psnr_loss_db <= self.threshold_db) {
            return invalid(format!(
                "accepted loss {} exceeds threshold {}",
                self.psnr_loss_db, self.threshold_db
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub effective_rate: usize,
    pub psnr_db: f64,
    pub psnr_loss_db: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTrace {
    pub layer_id: usize,
    pub points: Vec<SweepPoint>,
}

impl SweepTrace {
    /// `lambda,d,psnr_db,psnr_loss_db`, one row per evaluated penalty, reals
    /// printed with round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,d,psnr_db,psnr_loss_db\n");
        for p in &self.points {
            let _ = writeln!(out, "{:e},{},{},{}", p.lambda, p.effective_rate, p.psnr_db, p.psnr_loss_db);
        }
        out
    }
}

/// One layer's fitting data, quantized once and reused for every penalty.
#[derive(Debug)]
pub struct LayerFit {
    pub layer_id: usize,
    pub spec: InitQuantizerSpec,
    pub originals: Vec<ActivationTensor>,
    pub codebooks: Vec<BitplaneCodebook>,
    pub design: DesignSystem,
    natural_mse: Vec<f64>,
}

impl LayerFit {
    pub fn new(layer_id: usize, originals: Vec<ActivationTensor>, spec: &InitQuantizerSpec) -> Result<Self> {
        if originals.is_empty() {
            return Err(Error::Empty("layer has no fitting samples"));
        }
        let codebooks: Vec<BitplaneCodebook> = originals.iter().map(|x| init_quantize(x, spec)).collect();
        let design = build_design(&codebooks, &originals)?;
        let natural = spec.natural_coefficients();
        let mut fit = LayerFit {
            layer_id,
            spec: *spec,
            originals,
            codebooks,
            design,
            natural_mse: Vec::new(),
        };
        fit.natural_mse = fit.per_sample_mse(&natural)?.0;
        Ok(fit)
    }

    /// Per-sample MSE and the joint MSE, both in code units (squared error
    /// divided by `scale^2`) so the `(2^D - 1)^2` peak applies.
    pub fn per_sample_mse(&self, alpha: &[f64]) -> Result<(Vec<f64>, f64)> {
        let scale2 = self.spec.scale() * self.spec.scale();
        let mut per_sample = Vec::with_capacity(self.originals.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, cb) in self.originals.iter().zip(&self.codebooks) {
            let recon = cb.reconstruct_values(alpha)?;
            let sse = metrics::squared_error(x.values(), &recon)?;
            per_sample.push(sse / x.len() as f64 / scale2);
            total += sse;
            count += x.len();
        }
        Ok((per_sample, total / count as f64 / scale2))
    }

    /// Per-sample losses `t_i` and the joint PSNR for coefficients `alpha`.
    pub fn evaluate(&self, alpha: &[f64], reference: LossReference) -> Result<(Vec<f64>, f64)> {
        let bits = self.spec.bits();
        let (per_sample, joint) = self.per_sample_mse(alpha)?;
        let losses = per_sample
            .iter()
            .zip(&self.natural_mse)
            .map(|(&mse, &natural)| match reference {
                LossReference::InitialQuantization => metrics::psnr_loss(natural, mse, bits),
                LossReference::Peak => metrics::psnr_loss(1.0, mse, bits),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((losses, metrics::psnr(joint, bits)?))
    }

    /// Joint PSNR of plain fixed-point dequantization.
    pub fn natural_psnr(&self) -> Result<f64> {
        let (_, joint) = self.per_sample_mse(&self.spec.natural_coefficients())?;
        metrics::psnr(joint, self.spec.bits())
    }

    pub fn sweep(&self, opts: &BottleneckOptions) -> Result<(QuantScheme, SweepTrace)> {
        if !(opts.threshold_db >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must be non-negative, got {}",
                opts.threshold_db
            )));
        }
        opts.grid.validate()?;
        let lambdas = opts.grid.values(self.design.lambda_max());
        let mut trace = SweepTrace {
            layer_id: self.layer_id,
            points: Vec::with_capacity(lambdas.len()),
        };
        let mut warm = vec![0.0; self.design.bits()];
        let mut accepted: Option<QuantScheme> = None;
        for lambda in lambdas {
            let coefficients = solve_lasso_from(&self.design, lambda, &opts.solver, &warm).map_err(|e| Error::AtLambda {
                lambda,
                source: Box::new(e),
            })?;
            warm.clone_from(&coefficients.alpha);
            let (t_per_sample, psnr_db) = self.evaluate(&coefficients.alpha, opts.reference)?;
            let worst = t_per_sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            trace.points.push(SweepPoint {
                lambda,
                effective_rate: coefficients.effective_rate(),
                psnr_db,
                psnr_loss_db: worst,
            });
            let within = worst <= opts.threshold_db;
            let scheme = QuantScheme {
                layer_id: self.layer_id,
                spec: self.spec,
                coefficients,
                psnr_db,
                psnr_loss_db: worst,
                t_per_sample,
                threshold_db: opts.threshold_db,
                threshold_unmet: !within,
                loss_reference: opts.reference,
            };
            if !within {
                return Ok((accepted.unwrap_or(scheme), trace));
            }
            accepted = Some(scheme);
        }
        Ok((accepted.expect("grid has at least one point"), trace))
    }
}

/// Runs the sweep on one layer's fitting samples.
pub fn run_bottleneck(
    layer_id: usize,
    originals: Vec<ActivationTensor>,
    spec: &InitQuantizerSpec,
    opts: &BottleneckOptions,
) -> Result<(QuantScheme, SweepTrace)> {
    LayerFit::new(layer_id, originals, spec)?.sweep(opts)
}

/// How each layer's initial quantizer is derived from its fitting samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerSettings {
    pub kind: QuantizerKind,
    pub bits: u32,
    pub clip: ClipRule,
}

impl Default for QuantizerSettings {
    fn default() -> Self {
        QuantizerSettings {
            kind: QuantizerKind::ClipScale,
            bits: 8,
            clip: ClipRule::default(),
        }
    }
}

impl QuantizerSettings {
    pub fn calibrate(&self, samples: &[ActivationTensor]) -> Result<InitQuantizerSpec> {
        InitQuantizerSpec::calibrate(self.kind, self.bits, self.clip, samples)
    }
}

#[derive(Debug)]
pub struct LayerOutcome {
    pub layer_id: usize,
    pub result: Result<(QuantScheme, SweepTrace)>,
}

/// Loads the first `n_fit` samples of `layer_id` and builds its fit.
pub fn load_layer_fit(
    manifest: &DatasetManifest,
    layer_id: usize,
    settings: &QuantizerSettings,
    n_fit: usize,
) -> Result<LayerFit> {
    let count = n_fit.min(manifest.num_samples);
    if count == 0 {
        return Err(Error::Empty("n_fit must be at least 1"));
    }
    let originals = read_samples(manifest, layer_id, 1, count)?;
    let spec = settings.calibrate(&originals)?;
    LayerFit::new(layer_id, originals, &spec)
}

/// Independent sweeps over every layer, returned in layer order. Failures are
/// kept per layer so the remaining layers still report.
pub fn run_all_layers(
    manifest: &DatasetManifest,
    settings: &QuantizerSettings,
    opts: &BottleneckOptions,
    n_fit: usize,
) -> Vec<LayerOutcome> {
    (1..=manifest.num_layers)
        .into_par_iter()
        .map(|layer_id| LayerOutcome {
            layer_id,
            result: load_layer_fit(manifest, layer_id, settings, n_fit).and_then(|fit| fit.sweep(opts)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{SyntheticConfig, SyntheticLayer};
    use crate::tensor_store::Shape;

    fn layer(seed: u64, samples: usize) -> Vec<ActivationTensor> {
        let cfg = SyntheticConfig {
            num_samples: samples,
            layers: vec![SyntheticLayer::rectified(Shape::new(6, 6, 8).unwrap(), 0.6)],
            seed,
        };
        cfg.generate().remove(0)
    }

    fn spec_for(samples: &[ActivationTensor]) -> InitQuantizerSpec {
        QuantizerSettings::default().calibrate(samples).unwrap()
    }

    #[test]
    fn huge_threshold_runs_to_all_zero() {
        let data = layer(1, 4);
        let spec = spec_for(&data);
        let (scheme, trace) = run_bottleneck(1, data, &spec, &BottleneckOptions::with_threshold(1e3)).unwrap();
        assert_eq!(scheme.effective_rate(), 0);
        assert_eq!(trace.points.len(), 32);
        assert!(!scheme.threshold_unmet);
        assert_eq!(scheme.lambda(), trace.points.last().unwrap().lambda);
    }

    #[test]
    fn zero_threshold_accepts_only_non_positive_losses() {
        let data = layer(2, 4);
        let spec = spec_for(&data);
        let (scheme, trace) = run_bottleneck(1, data, &spec, &BottleneckOptions::with_threshold(0.0)).unwrap();
        if scheme.threshold_unmet {
            assert_eq!(scheme.lambda(), trace.points[0].lambda);
            assert!(scheme.psnr_loss_db > 0.0);
        } else {
            assert!(scheme.psnr_loss_db <= 0.0);
        }
        scheme.validate().unwrap();
    }

    #[test]
    fn accepted_scheme_respects_threshold_and_trace_stops_after_violation() {
        let data = layer(3, 6);
        let spec = spec_for(&data);
        let (scheme, trace) = run_bottleneck(1, data, &spec, &BottleneckOptions::with_threshold(12.0)).unwrap();
        assert!(scheme.psnr_loss_db <= 12.0);
        let last = trace.points.last().unwrap();
        if trace.points.len() < 32 {
            assert!(last.psnr_loss_db > 12.0);
            assert!(trace.points[..trace.points.len() - 1].iter().all(|p| p.psnr_loss_db <= 12.0));
        }
        for w in trace.points.windows(2) {
            assert!(w[1].lambda > w[0].lambda);
            assert!(w[1].psnr_db <= w[0].psnr_db + 1e-9);
        }
        let worst = scheme.t_per_sample.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(worst, scheme.psnr_loss_db);
    }

    #[test]
    fn least_squares_beats_natural_dequantization() {
        let data = layer(4, 3);
        let spec = spec_for(&data);
        let fit = LayerFit::new(1, data, &spec).unwrap();
        let ls = crate::solver::solve_lasso(&fit.design, 0.0, &SolverOptions::default()).unwrap();
        let (_, psnr_ls) = fit.evaluate(&ls.alpha, LossReference::InitialQuantization).unwrap();
        assert!(psnr_ls >= fit.natural_psnr().unwrap() - 1e-9);
    }

    #[test]
    fn natural_coefficients_lose_nothing() {
        let data = layer(5, 2);
        let spec = spec_for(&data);
        let fit = LayerFit::new(1, data, &spec).unwrap();
        let (t, _) = fit.evaluate(&spec.natural_coefficients(), LossReference::InitialQuantization).unwrap();
        assert!(t.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn empty_layer_is_an_error() {
        let spec = InitQuantizerSpec::clip_scale(8, 0.0, 1.0).unwrap();
        assert!(matches!(
            run_bottleneck(1, Vec::new(), &spec, &BottleneckOptions::with_threshold(8.0)),
            Err(Error::Empty(_))
        ));
        let data = layer(6, 1);
        assert!(run_bottleneck(1, data, &spec, &BottleneckOptions::with_threshold(-1.0)).is_err());
    }
}
