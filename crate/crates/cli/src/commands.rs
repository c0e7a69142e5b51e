//! The subcommands. Each writes its files atomically under the configured
//! output directory and prints a short human-readable report to `out`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use bibq_core::bitplane::{init_quantize, reconstruct};
use bibq_core::bottleneck::{load_layer_fit, LayerFit};
use bibq_core::metrics::{bit_statistics, efficiency, histogram, rate_of_one, BASELINE_MEM_MEGABYTES, BASELINE_OPS_BILLIONS};
use bibq_core::solver::{compare_supports, lasso_path, SupportComparison, ORACLE_MAX_BITS};
use bibq_core::synthetic::SyntheticConfig;
use bibq_core::tensor_store::{load_dataset, read_samples, read_scheme, write_atomic, write_scheme};
use bibq_core::{DatasetManifest, DatasetWriter, EfficiencyReport, QuantScheme, SweepTrace};
use rayon::prelude::*;

use crate::config::{clip_to_string, RunConfig};
use crate::error::{CliError, Result};

/// Bins in the activation histogram written by `stats`.
pub const HISTOGRAM_BINS: usize = 64;

/// Bit widths listed by `efficiency` when none are given.
pub const TABLE_BITS: [f64; 9] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 32.0];

pub fn scheme_file(layer_id: usize) -> String {
    format!("scheme_layer_{layer_id}.txt")
}

pub fn trace_file(layer_id: usize) -> String {
    format!("trace_layer_{layer_id}.csv")
}

pub fn bits_file(layer_id: usize) -> String {
    format!("bits_layer_{layer_id}.csv")
}

pub fn stats_file(layer_id: usize) -> String {
    format!("stats_layer_{layer_id}.txt")
}

pub const SUMMARY_FILE: &str = "summary.txt";

fn checked(config: &RunConfig) -> Result<DatasetManifest> {
    config.validate().map_err(CliError::Usage)?;
    Ok(load_dataset(&config.dataset)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Input(bibq_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn report(out: &mut dyn Write, text: &str) {
    // A closed stdout is not worth failing a run that already wrote its files.
    let _ = out.write_all(text.as_bytes());
}

/// Per-layer activation histograms and rate-of-one tables.
pub fn cmd_stats(config: &RunConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let manifest = checked(config)?;
    create_dir(&config.output)?;
    let settings = config.quantizer_settings();
    let results: Vec<(usize, Result<(String, Vec<f64>)>)> = (1..=manifest.num_layers)
        .into_par_iter()
        .map(|l| (l, layer_stats(&manifest, l, config, &settings)))
        .collect();

    let mut written = Vec::new();
    let mut failures = Vec::new();
    let mut summary = String::from("layer,rate_of_one_by_bit\n");
    for (l, result) in results {
        match result {
            Ok((text, rates)) => {
                let path = config.output.join(stats_file(l));
                write_text(&path, &text)?;
                let rates: Vec<String> = rates.iter().map(|r| format!("{r:.4}")).collect();
                let _ = writeln!(summary, "{l},{}", rates.join(" "));
                written.push(path);
            }
            Err(e) => failures.push(format!("layer {l}: {e}")),
        }
    }
    report(out, &summary);
    if !failures.is_empty() {
        return Err(CliError::Partial {
            failures,
            total: manifest.num_layers,
        });
    }
    Ok(written)
}

fn layer_stats(
    manifest: &DatasetManifest,
    layer_id: usize,
    config: &RunConfig,
    settings: &bibq_core::bottleneck::QuantizerSettings,
) -> Result<(String, Vec<f64>)> {
    let count = config.n_fit.min(manifest.num_samples);
    let samples = read_samples(manifest, layer_id, 1, count)?;
    let spec = settings.calibrate(&samples)?;
    let codebooks: Vec<_> = samples.iter().map(|x| init_quantize(x, &spec)).collect();
    let rates = rate_of_one(&codebooks);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut zeros = 0u64;
    let mut total = 0u64;
    for v in samples.iter().flat_map(|t| t.values()) {
        let v = *v as f64;
        lo = lo.min(v);
        hi = hi.max(v);
        zeros += (v == 0.0) as u64;
        total += 1;
    }
    let values = samples.iter().flat_map(|t| t.values().iter().map(|v| *v as f64));
    let counts = histogram(values, lo, hi, HISTOGRAM_BINS);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;

    let mut s = String::new();
    let _ = writeln!(s, "# layer {layer_id}, shape {}, {count} samples", manifest.shape(layer_id)?);
    let _ = writeln!(
        s,
        "# init quantizer {} D={} clip=[{}, {}] scale={} (clip rule {})",
        spec.kind().name(),
        spec.bits(),
        spec.clip_lo(),
        spec.clip_hi(),
        spec.scale(),
        clip_to_string(config.clip)
    );
    let _ = writeln!(s, "# elements {total}, exact zeros {zeros}, min {lo}, max {hi}");
    let _ = writeln!(s, "bit,rate_of_one");
    for (j, r) in rates.iter().enumerate() {
        let _ = writeln!(s, "{},{r}", j + 1);
    }
    let _ = writeln!(s, "\n# activation histogram");
    let _ = writeln!(s, "bin_lo,bin_hi,count");
    for (b, c) in counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{c}", lo + width * b as f64, lo + width * (b + 1) as f64);
    }
    Ok((s, rates))
}

#[derive(Debug)]
pub struct SweepSummary {
    pub schemes: Vec<QuantScheme>,
    pub failures: Vec<String>,
}

impl SweepSummary {
    pub fn average_rate(&self) -> Option<f64> {
        if self.schemes.is_empty() {
            return None;
        }
        let total: usize = self.schemes.iter().map(QuantScheme::effective_rate).sum();
        Some(total as f64 / self.schemes.len() as f64)
    }
}

/// Runs the threshold sweep on every layer and writes scheme, trace, bit
/// statistics and a summary.
pub fn cmd_sweep(config: &RunConfig, out: &mut dyn Write) -> Result<SweepSummary> {
    let manifest = checked(config)?;
    create_dir(&config.output)?;
    let settings = config.quantizer_settings();
    let opts = config.bottleneck_options();
    let results: Vec<(usize, Result<(LayerFit, QuantScheme, SweepTrace)>)> = (1..=manifest.num_layers)
        .into_par_iter()
        .map(|l| {
            let run = || -> Result<_> {
                let fit = load_layer_fit(&manifest, l, &settings, config.n_fit)?;
                let (scheme, trace) = fit.sweep(&opts)?;
                Ok((fit, scheme, trace))
            };
            (l, run())
        })
        .collect();

    let mut summary = SweepSummary {
        schemes: Vec::new(),
        failures: Vec::new(),
    };
    for (l, result) in results {
        match result {
            Ok((fit, scheme, trace)) => {
                write_scheme(&scheme, &config.output.join(scheme_file(l)))?;
                write_text(&config.output.join(trace_file(l)), &trace.to_csv())?;
                write_text(&config.output.join(bits_file(l)), &bits_csv(&fit, &scheme))?;
                summary.schemes.push(scheme);
            }
            Err(e) => summary.failures.push(format!("layer {l}: {e}")),
        }
    }
    let text = summary_text(config, &summary);
    write_text(&config.output.join(SUMMARY_FILE), &text)?;
    report(out, &text);
    if !summary.failures.is_empty() {
        return Err(CliError::Partial {
            failures: summary.failures,
            total: manifest.num_layers,
        });
    }
    Ok(summary)
}

fn bits_csv(fit: &LayerFit, scheme: &QuantScheme) -> String {
    let stats = bit_statistics(&fit.codebooks, scheme);
    let natural = scheme.spec.natural_coefficients();
    let mut s = String::from("bit,rate_of_one,alpha,natural_alpha,alpha_ratio\n");
    for j in 0..natural.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            j + 1,
            stats.rate_of_one[j],
            scheme.coefficients.alpha[j],
            natural[j],
            stats.coefficient_ratio[j]
        );
    }
    s
}

fn summary_text(config: &RunConfig, summary: &SweepSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "threshold_db = {}", config.threshold_db);
    let _ = writeln!(s, "loss_reference = {}", config.loss_reference.name());
    let _ = writeln!(s, "layers_ok = {}", summary.schemes.len());
    let _ = writeln!(s, "layers_failed = {}", summary.failures.len());
    match summary.average_rate() {
        Some(avg) => {
            let _ = writeln!(s, "average_d = {avg}");
        }
        None => {
            let _ = writeln!(s, "average_d = none");
        }
    }
    for scheme in &summary.schemes {
        let l = scheme.layer_id;
        let support: Vec<String> = scheme.coefficients.support.iter().map(|j| j.to_string()).collect();
        let _ = writeln!(s, "layer_{l}_d = {}", scheme.effective_rate());
        let _ = writeln!(s, "layer_{l}_support = {}", support.join(","));
        let _ = writeln!(s, "layer_{l}_lambda = {:e}", scheme.lambda());
        let _ = writeln!(s, "layer_{l}_psnr_db = {}", scheme.psnr_db);
        let _ = writeln!(s, "layer_{l}_psnr_loss_db = {}", scheme.psnr_loss_db);
        let _ = writeln!(s, "layer_{l}_threshold_unmet = {}", scheme.threshold_unmet);
    }
    for failure in &summary.failures {
        let _ = writeln!(s, "# failed {failure}");
    }
    s
}

/// One layer's oracle comparison.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub layer_id: usize,
    pub rows: Vec<SupportComparison>,
}

/// Compares the exact best-subset distortion with the LASSO path and plain
/// truncation at every support size up to `eta` (all of `D` when `None`).
pub fn cmd_oracle(config: &RunConfig, eta: Option<usize>, out: &mut dyn Write) -> Result<Vec<OracleReport>> {
    if config.bits > ORACLE_MAX_BITS as u32 {
        return Err(CliError::Usage(format!(
            "the oracle enumerates subsets and supports D <= {ORACLE_MAX_BITS}, got {}",
            config.bits
        )));
    }
    let eta = eta.unwrap_or(config.bits as usize);
    if eta > config.bits as usize {
        return Err(CliError::Usage(format!("eta {eta} exceeds D = {}", config.bits)));
    }
    let manifest = checked(config)?;
    create_dir(&config.output)?;
    let settings = config.quantizer_settings();
    let opts = config.bottleneck_options();
    let results: Vec<(usize, Result<OracleReport>)> = (1..=manifest.num_layers)
        .into_par_iter()
        .map(|l| {
            let run = || -> Result<OracleReport> {
                let fit = load_layer_fit(&manifest, l, &settings, config.n_fit)?;
                let sys = &fit.design;
                let mut lambdas = opts.grid.values(sys.lambda_max());
                lambdas.insert(0, 0.0);
                let path = lasso_path(sys, &lambdas, &opts.solver)?;
                let rows = compare_supports(sys, &path, eta, |d| Some(fit.spec.truncated_coefficients(d)))?;
                Ok(OracleReport { layer_id: l, rows })
            };
            (l, run())
        })
        .collect();

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (l, result) in results {
        match result {
            Ok(rep) => {
                let csv = oracle_csv(&rep);
                write_text(&config.output.join(format!("oracle_layer_{l}.csv")), &csv)?;
                report(out, &format!("# layer {l}\n{csv}"));
                reports.push(rep);
            }
            Err(e) => failures.push(format!("layer {l}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Partial {
            failures,
            total: manifest.num_layers,
        });
    }
    Ok(reports)
}

fn oracle_csv(rep: &OracleReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut s = String::from("d,oracle_sse,path_sse,path_refit_sse,truncation_sse\n");
    for r in &rep.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.d,
            r.oracle_sse,
            opt(r.path_sse),
            opt(r.path_refit_sse),
            opt(r.truncation_sse)
        );
    }
    s
}

/// What the efficiency table is computed for.
#[derive(Debug, Clone)]
pub enum EfficiencyInput {
    /// The standard widths 1..8 and 32.
    Table,
    Bits(Vec<f64>),
    /// Realized schemes; their effective rates are averaged into one row.
    Schemes(Vec<PathBuf>),
}

pub fn efficiency_rows(input: &EfficiencyInput, baseline_ops: f64, baseline_mem: f64) -> Result<Vec<EfficiencyReport>> {
    let bits: Vec<f64> = match input {
        EfficiencyInput::Table => TABLE_BITS.to_vec(),
        EfficiencyInput::Bits(b) => b.clone(),
        EfficiencyInput::Schemes(paths) => {
            if paths.is_empty() {
                return Err(CliError::Usage("no scheme files given".into()));
            }
            let mut total = 0usize;
            for p in paths {
                total += read_scheme(p)?.effective_rate();
            }
            vec![total as f64 / paths.len() as f64]
        }
    };
    let rows = bits
        .iter()
        .map(|&b| efficiency(b, baseline_ops, baseline_mem))
        .collect::<bibq_core::Result<Vec<_>>>()?;
    Ok(rows)
}

pub fn efficiency_table(rows: &[EfficiencyReport]) -> String {
    let mut s = String::from("bits,operations_billion,memory_mb,improvement\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.1},{:.1},{:.1}",
            r.bits,
            r.ops_display(),
            r.mem_display(),
            r.improvement_display()
        );
    }
    s
}

/// Operation and memory estimates against the 32-bit baseline.
pub fn cmd_efficiency(input: &EfficiencyInput, out: &mut dyn Write) -> Result<Vec<EfficiencyReport>> {
    let rows = efficiency_rows(input, BASELINE_OPS_BILLIONS, BASELINE_MEM_MEGABYTES)?;
    report(out, &efficiency_table(&rows));
    Ok(rows)
}

/// Applies one scheme file per layer (read from `schemes`) to every sample of
/// the dataset and writes the reconstructions as a new container.
pub fn cmd_reconstruct(config: &RunConfig, schemes: &Path, out: &mut dyn Write) -> Result<DatasetManifest> {
    let manifest = checked(config)?;
    let mut loaded = Vec::with_capacity(manifest.num_layers);
    for l in 1..=manifest.num_layers {
        let scheme = read_scheme(&schemes.join(scheme_file(l)))?;
        if scheme.layer_id != l {
            return Err(CliError::Usage(format!(
                "{} describes layer {}",
                schemes.join(scheme_file(l)).display(),
                scheme.layer_id
            )));
        }
        loaded.push(scheme);
    }
    let shapes: Vec<_> = manifest.layers.iter().map(|e| e.shape).collect();
    let mut writer = DatasetWriter::create(&config.output, manifest.num_samples, &shapes)?;
    writer.note(format!("reconstructed from {}", manifest.root.display()));
    for scheme in &loaded {
        let l = scheme.layer_id;
        let recons: Vec<_> = (1..=manifest.num_samples)
            .into_par_iter()
            .map(|n| {
                let x = read_samples(&manifest, l, n, 1)?.remove(0);
                reconstruct(&init_quantize(&x, &scheme.spec), &scheme.coefficients.alpha)
            })
            .collect::<bibq_core::Result<_>>()?;
        for t in &recons {
            writer.write_tensor(t)?;
        }
        report(out, &format!("layer {l}: {} samples, d = {}\n", manifest.num_samples, scheme.effective_rate()));
    }
    Ok(writer.finish()?)
}

/// Writes the four-layer synthetic rectified-sparse dataset.
pub fn cmd_synth(dir: &Path, num_samples: usize, seed: u64, out: &mut dyn Write) -> Result<DatasetManifest> {
    if num_samples == 0 {
        return Err(CliError::Usage("need at least one sample".into()));
    }
    let manifest = SyntheticConfig::four_layer(num_samples, seed).write(dir)?;
    report(
        out,
        &format!("wrote {} layers x {} samples to {}\n", manifest.num_layers, manifest.num_samples, dir.display()),
    );
    Ok(manifest)
}
