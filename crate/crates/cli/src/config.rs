//! Run configuration: one JSON document with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varconet::encoder::HyperParams;
use varconet::evalsuite::FingerprintConfig;
use varconet::synth::SynthConfig;
use varconet::tpe::{SearchSpace, TpeConfig};
use varconet::train::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: HyperParams,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub tune: TuneConfig,
    pub paths: PathsConfig,
}

/// Subject split by order of appearance; the test set is the remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.5,
            val: 0.125,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Fingerprinting when the validation subjects have two sessions,
    /// otherwise a linear probe when the cohort is labeled, otherwise none.
    #[default]
    Auto,
    Fingerprint,
    Probe,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: SplitConfig,
    /// Test-set fingerprinting protocol.
    pub fingerprint: FingerprintConfig,
    /// Per-epoch validation protocol while training and tuning.
    pub validation: FingerprintConfig,
    pub selection: Selection,
    /// Crop lengths in minutes for prediction stability.
    pub stability_windows: Vec<f64>,
    /// Independent encoder + probe runs for `classify`.
    pub repetitions: usize,
    /// Rows written to the importance summary.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: SplitConfig::default(),
            fingerprint: FingerprintConfig::default(),
            validation: FingerprintConfig::validation(),
            selection: Selection::Auto,
            stability_windows: vec![3.0, 4.0],
            repetitions: 5,
            top_k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub trials: usize,
    pub seed: u64,
    pub tpe: TpeConfig,
    pub ff_dims: Vec<f64>,
    pub batch_sizes: Vec<f64>,
    /// Replaces the whole encoder search space when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub space: Option<SearchSpace>,
    /// Continue from an existing history file in the output directory.
    pub resume: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            trials: 125,
            seed: 0,
            tpe: TpeConfig::default(),
            ff_dims: vec![512.0, 1024.0, 2048.0],
            batch_sizes: vec![32.0, 64.0, 128.0],
            space: None,
            resume: true,
        }
    }
}

impl TuneConfig {
    pub fn search_space(&self, regions: usize) -> SearchSpace {
        self.space
            .clone()
            .unwrap_or_else(|| SearchSpace::encoder_with(regions, &self.ff_dims, &self.batch_sizes))
    }
}

/// Input locations default to files inside `out`, so `synth`, `train` and
/// the evaluation commands chain without extra configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out: PathBuf::from("out"),
            cohort: None,
            checkpoint: None,
        }
    }
}

impl PathsConfig {
    pub fn cohort_dir(&self) -> PathBuf {
        self.cohort.clone().unwrap_or_else(|| self.out.join("cohort"))
    }

    pub fn checkpoint_file(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("best.ckpt"))
    }
}

fn invalid(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn check_fingerprint(key: &str, cfg: &FingerprintConfig, kernel_width: usize) -> CliResult<()> {
    if cfg.draws == 0 {
        return Err(invalid(&format!("{key}.draws"), "must be at least 1"));
    }
    if let Some(&w) = cfg.lengths.iter().find(|&&w| w < kernel_width) {
        return Err(invalid(
            &format!("{key}.lengths"),
            format!("length {w} is below the kernel width {kernel_width}"),
        ));
    }
    Ok(())
}

impl RunConfig {
    /// Sets every seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.tune.seed = seed;
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.synth.validate().map_err(|e| from_core("synth", &e))?;
        self.model.validate(None).map_err(|e| from_core("model", &e))?;
        self.train.validate().map_err(|e| from_core("train", &e))?;
        let split = &self.eval.split;
        if !(split.train > 0.0 && split.train < 1.0) {
            return Err(invalid("eval.split.train", "must lie in (0, 1)"));
        }
        if !(split.val >= 0.0 && split.train + split.val <= 1.0) {
            return Err(invalid("eval.split.val", "train + val must not exceed 1"));
        }
        check_fingerprint("eval.fingerprint", &self.eval.fingerprint, self.model.kernel_width)?;
        check_fingerprint("eval.validation", &self.eval.validation, self.model.kernel_width)?;
        if self.eval.stability_windows.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(invalid("eval.stability_windows", "windows must be positive"));
        }
        if self.eval.repetitions == 0 {
            return Err(invalid("eval.repetitions", "must be at least 1"));
        }
        if self.tune.trials == 0 {
            return Err(invalid("tune.trials", "must be at least 1"));
        }
        let tpe = &self.tune.tpe;
        if !(tpe.gamma > 0.0 && tpe.gamma < 1.0) {
            return Err(invalid("tune.tpe.gamma", "must lie in (0, 1)"));
        }
        if tpe.n_candidates == 0 {
            return Err(invalid("tune.tpe.n_candidates", "must be at least 1"));
        }
        if self.tune.ff_dims.is_empty() {
            return Err(invalid("tune.ff_dims", "needs at least one choice"));
        }
        if self.tune.batch_sizes.is_empty() {
            return Err(invalid("tune.batch_sizes", "needs at least one choice"));
        }
        self.tune
            .search_space(self.synth.n_regions)
            .validate()
            .map_err(|e| from_core("tune", &e))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Maps a validation error from the library onto a key path. Messages of
/// the form `section.key: detail` keep their key.
pub(crate) fn from_core(section: &str, e: &varconet::Error) -> CliError {
    let msg = match e {
        varconet::Error::Invariant(m) | varconet::Error::InvalidArgument(m) => m.clone(),
        other => other.to_string(),
    };
    match msg.split_once(": ") {
        Some((key, detail)) if key.starts_with(section) && !key.contains(' ') => invalid(key, detail),
        _ => invalid(section, msg),
    }
}

/// Parses and validates a config document. Missing keys take defaults.
pub fn parse_config_str(text: &str) -> CliResult<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        invalid(if key == "." { "<root>" } else { &key }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(err: CliError) -> String {
        match err {
            CliError::Config { key, .. } => key,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = parse_config_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.tau, 0.054);
        assert_eq!(cfg.model.lr, 2.375e-4);
        assert_eq!((cfg.model.n_layers, cfg.model.n_heads, cfg.model.ff_dim), (1, 1, 2048));
        assert_eq!(cfg.model.batch_size, 64);
        assert_eq!((cfg.model.l_min, cfg.model.l_max), (80, 320));
        assert_eq!((cfg.model.kernels, cfg.model.kernel_width, cfg.model.stride), (16, 8, 4));
        assert_eq!(cfg.eval.selection, Selection::Auto);
        assert_eq!(cfg.tune.trials, 125);
    }

    #[test]
    fn errors_name_the_key_path() {
        let cases = [
            (r#"{"model": {"l_min": 4}}"#, "model.l_min"),
            (r#"{"model": {"l_minn": 90}}"#, "model.l_minn"),
            (r#"{"train": {"epochs": "ten"}}"#, "train.epochs"),
            (r#"{"eval": {"split": {"train": 1.5}}}"#, "eval.split.train"),
            (r#"{"eval": {"validation": {"draws": 0}}}"#, "eval.validation.draws"),
            (r#"{"tune": {"tpe": {"gamma": 1.0}}}"#, "tune.tpe.gamma"),
        ];
        for (text, key) in cases {
            assert_eq!(key_of(parse_config_str(text).unwrap_err()), key, "{text}");
        }
        let err = parse_config_str(r#"{"extra": 1}"#).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(parse_config_str(&cfg.to_json()).unwrap(), cfg);
        let mut custom = RunConfig::default().with_seed(7);
        custom.paths.cohort = Some(PathBuf::from("elsewhere"));
        custom.tune.space = Some(SearchSpace::encoder(16));
        assert_eq!(parse_config_str(&custom.to_json()).unwrap(), custom);
        assert_eq!(custom.paths.cohort_dir(), PathBuf::from("elsewhere"));
        assert_eq!(custom.paths.checkpoint_file(), PathBuf::from("out/best.ckpt"));
        assert_eq!((custom.synth.seed, custom.train.seed, custom.tune.seed), (7, 7, 7));
    }
}
