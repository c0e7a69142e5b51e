//! Run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bibq_core::bitplane::MAX_BITS;
use bibq_core::kvtext::KvDocument;
use bibq_core::tensor_store::write_atomic;
use bibq_core::{BottleneckOptions, ClipRule, LambdaGrid, LossReference, QuantizerKind, SolverOptions};
use bibq_core::bottleneck::QuantizerSettings;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Samples used for fitting unless the config says otherwise.
pub const DEFAULT_N_FIT: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub quantizer: QuantizerKind,
    pub bits: u32,
    pub clip: ClipRule,
    pub threshold_db: f64,
    pub grid: LambdaGrid,
    /// Upper bound on fitting samples; the first `min(N, n_fit)` are used.
    pub n_fit: usize,
    pub nonnegative: bool,
    pub output: PathBuf,
    pub seed: u64,
    pub loss_reference: LossReference,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            quantizer: QuantizerKind::ClipScale,
            bits: 8,
            clip: ClipRule::default(),
            threshold_db: 24.0,
            grid: LambdaGrid::default(),
            n_fit: DEFAULT_N_FIT,
            nonnegative: false,
            output: PathBuf::from("out"),
            seed: 0,
            loss_reference: LossReference::default(),
        }
    }
}

pub fn clip_to_string(clip: ClipRule) -> String {
    match clip {
        ClipRule::ExactMax => "exact-max".to_string(),
        ClipRule::Percentile(p) => p.to_string(),
    }
}

pub fn parse_clip(text: &str) -> std::result::Result<ClipRule, String> {
    if text == "exact-max" {
        return Ok(ClipRule::ExactMax);
    }
    text.parse::<f64>()
        .map(ClipRule::Percentile)
        .map_err(|_| format!("clip must be a percentile or `exact-max`, got `{text}`"))
}

impl RunConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=MAX_BITS).contains(&self.bits) {
            return Err(format!("D must be in [1, {MAX_BITS}], got {}", self.bits));
        }
        if let ClipRule::Percentile(p) = self.clip {
            if !(p > 0.0 && p <= 100.0) {
                return Err(format!("clip percentile must be in (0, 100], got {p}"));
            }
        }
        if !self.threshold_db.is_finite() {
            return Err(format!("threshold_db must be finite, got {}", self.threshold_db));
        }
        self.grid.validate().map_err(|e| e.to_string())?;
        if self.n_fit == 0 {
            return Err("n_fit must be at least 1".to_string());
        }
        Ok(())
    }

    pub fn quantizer_settings(&self) -> QuantizerSettings {
        QuantizerSettings {
            kind: self.quantizer,
            bits: self.bits,
            clip: self.clip,
        }
    }

    pub fn bottleneck_options(&self) -> BottleneckOptions {
        BottleneckOptions {
            threshold_db: self.threshold_db,
            grid: self.grid,
            solver: SolverOptions {
                nonnegative: self.nonnegative,
                ..SolverOptions::default()
            },
            reference: self.loss_reference,
        }
    }

    /// Reals use the shortest decimal that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# bibq run configuration");
        let _ = writeln!(s, "config_version = {CONFIG_VERSION}");
        let _ = writeln!(s, "dataset = {}", self.dataset.display());
        let _ = writeln!(s, "init_quantizer = {}", self.quantizer.name());
        let _ = writeln!(s, "D = {}", self.bits);
        let _ = writeln!(s, "clip = {}", clip_to_string(self.clip));
        let _ = writeln!(s, "threshold_db = {}", self.threshold_db);
        let _ = writeln!(s, "lambda_min_factor = {}", self.grid.min_factor);
        let _ = writeln!(s, "lambda_max_factor = {}", self.grid.max_factor);
        let _ = writeln!(s, "lambda_points = {}", self.grid.points);
        let _ = writeln!(s, "n_fit = {}", self.n_fit);
        let _ = writeln!(s, "nonnegative = {}", self.nonnegative);
        let _ = writeln!(s, "output = {}", self.output.display());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "loss_reference = {}", self.loss_reference.name());
        s
    }

    /// Parses a config file. Keys that are absent keep their defaults.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let doc = KvDocument::parse(text, origin)?;
        let bad = |message: String| CliError::Config {
            path: origin.to_path_buf(),
            message,
        };
        let version: u32 = doc.parse_value("config_version")?;
        if version != CONFIG_VERSION {
            return Err(bad(format!(
                "config_version {version} is not supported (expected {CONFIG_VERSION})"
            )));
        }
        const KNOWN: [&str; 14] = [
            "config_version", "dataset", "init_quantizer", "D", "clip", "threshold_db",
            "lambda_min_factor", "lambda_max_factor", "lambda_points", "n_fit", "nonnegative",
            "output", "seed", "loss_reference",
        ];
        if let Some(key) = doc.keys().find(|k| !KNOWN.contains(k)) {
            return Err(bad(format!("unknown key `{key}` on line {}", doc.line_of(key))));
        }

        let mut cfg = RunConfig::default();
        if let Some(v) = doc.get("dataset") {
            cfg.dataset = resolve(origin, v);
        }
        if let Some(v) = doc.get("output") {
            cfg.output = resolve(origin, v);
        }
        if let Some(v) = doc.get("init_quantizer") {
            cfg.quantizer = QuantizerKind::from_name(v)
                .ok_or_else(|| bad(format!("unknown init_quantizer `{v}`")))?;
        }
        if let Some(v) = doc.parse_opt("D")? {
            cfg.bits = v;
        }
        if let Some(v) = doc.get("clip") {
            cfg.clip = parse_clip(v).map_err(bad)?;
        }
        if let Some(v) = doc.real_opt("threshold_db")? {
            cfg.threshold_db = v;
        }
        if let Some(v) = doc.real_opt("lambda_min_factor")? {
            cfg.grid.min_factor = v;
        }
        if let Some(v) = doc.real_opt("lambda_max_factor")? {
            cfg.grid.max_factor = v;
        }
        if let Some(v) = doc.parse_opt("lambda_points")? {
            cfg.grid.points = v;
        }
        if let Some(v) = doc.parse_opt("n_fit")? {
            cfg.n_fit = v;
        }
        if doc.contains("nonnegative") {
            cfg.nonnegative = doc.bool("nonnegative")?;
        }
        if let Some(v) = doc.parse_opt("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = doc.get("loss_reference") {
            cfg.loss_reference = LossReference::from_name(v)
                .ok_or_else(|| bad(format!("unknown loss_reference `{v}`")))?;
        }
        cfg.validate().map_err(bad)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Input(bibq_core::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        Self::from_text(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())?;
        Ok(())
    }
}

/// Relative paths in a config file are taken relative to the file itself.
fn resolve(origin: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    match origin.parent() {
        Some(dir) if p.is_relative() && !dir.as_os_str().is_empty() => dir.join(p),
        _ => p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_text(&cfg.to_text(), Path::new("run.txt")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn awkward_values_round_trip() {
        let cfg = RunConfig {
            dataset: PathBuf::from("/data/acts"),
            quantizer: QuantizerKind::Rounding,
            bits: 5,
            clip: ClipRule::Percentile(99.99),
            threshold_db: 0.1 + 0.2,
            grid: LambdaGrid {
                min_factor: 1.0 / 3.0,
                max_factor: 0.9,
                points: 7,
            },
            n_fit: 3,
            nonnegative: true,
            output: PathBuf::from("/tmp/o"),
            seed: u64::MAX,
            loss_reference: LossReference::Peak,
        };
        let back = RunConfig::from_text(&cfg.to_text(), Path::new("/x/run.txt")).unwrap();
        assert_eq!(back, cfg);
        let exact = RunConfig { clip: ClipRule::ExactMax, ..cfg };
        assert_eq!(RunConfig::from_text(&exact.to_text(), Path::new("run.txt")).unwrap(), exact);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let cfg = RunConfig::from_text("config_version = 1\ndataset = acts\n", Path::new("/etc/bibq/run.txt")).unwrap();
        assert_eq!(cfg.dataset, PathBuf::from("/etc/bibq/acts"));
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            "config_version = 2\n",
            "dataset = x\n",
            "config_version = 1\nD = 17\n",
            "config_version = 1\nclip = 0\n",
            "config_version = 1\nlambda_points = 0\n",
            "config_version = 1\nthreshold = 3\n",
            "config_version = 1\nloss_reference = mean\n",
        ];
        for text in cases {
            assert!(RunConfig::from_text(text, Path::new("c.txt")).is_err(), "{text}");
        }
    }
}
