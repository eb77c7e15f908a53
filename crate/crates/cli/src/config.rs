//! Run configuration. Every field has a default; the effective config is
//! written into the run directory as `configs/<command>.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use apemkit::apem::SearchConfig;
use apemkit::data::SyntheticConfig;
use apemkit::explain::{Method, MethodParams, Stage};
use apemkit::filter::FilterConfig;
use apemkit::net::TrainConfig;
use apemkit::seed::derive_seed;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SEED_ENV: &str = "APEMKIT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// IDX image and label files (`kind = "idx"`).
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Synthetic: samples generated per split. IDX: the last `test_count`
    /// samples form the test split and the rest the training split.
    pub train_count: usize,
    pub test_count: usize,
    /// Evaluate only the first `limit` test images (0 = all).
    pub limit: usize,
    pub classes: usize,
    pub size: usize,
    pub strokes: usize,
    pub jitter: f64,
    pub shift: f64,
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            kind: DatasetKind::Synthetic,
            images: None,
            labels: None,
            train_count: 8000,
            test_count: 2000,
            limit: 0,
            classes: s.classes,
            size: s.size,
            strokes: s.strokes,
            jitter: s.jitter,
            shift: s.shift,
            noise: s.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub methods: Vec<Method>,
    pub stages: Vec<Stage>,
    pub smooth_n: usize,
    pub smooth_sigma: f64,
    pub lrp_epsilon: f64,
}

impl Default for ExplainSection {
    fn default() -> Self {
        let p = MethodParams::default();
        Self {
            methods: Method::ALL.to_vec(),
            stages: vec![Stage::Multiplied],
            smooth_n: p.smooth_n,
            smooth_sigma: p.smooth_sigma,
            lrp_epsilon: p.lrp_epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Shuffled maps per image and stage in `shuffle-test`.
    pub shuffles: u32,
    pub permutations: usize,
    /// Bin width of the eps_plus difference histograms.
    pub bin_width: i64,
    pub bootstrap_resamples: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            shuffles: 10,
            permutations: 10_000,
            bin_width: 10,
            bootstrap_resamples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Model file; defaults to `<out>/model/model.apemnet`.
    pub model: Option<PathBuf>,
    /// Worker threads (0 = number of processors).
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    pub explain: ExplainSection,
    pub search: SearchConfig,
    pub filter: FilterConfig,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("run"),
            model: None,
            workers: 0,
            dataset: DatasetConfig::default(),
            train: TrainSection::default(),
            explain: ExplainSection::default(),
            search: SearchConfig::default(),
            filter: FilterConfig::default(),
            report: ReportSection::default(),
        }
    }
}

/// Independent seed streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Glyphs = 1,
    Init = 2,
    TrainOrder = 3,
    Smoothing = 4,
    Shuffle = 5,
    Permutation = 6,
    Bootstrap = 7,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `APEMKIT_SEED` if set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                CliError::config(format!("{SEED_ENV}: `{v}` is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: &str| Err(CliError::config(format!("{field}: {why}")));
        if self.explain.methods.is_empty() {
            return bad("explain.methods", "at least one method is required");
        }
        if self.explain.stages.is_empty() {
            return bad("explain.stages", "at least one stage is required");
        }
        if self.explain.smooth_n == 0 {
            return bad("explain.smooth_n", "must be >= 1");
        }
        if !(self.explain.smooth_sigma >= 0.0 && self.explain.smooth_sigma.is_finite()) {
            return bad("explain.smooth_sigma", "must be finite and >= 0");
        }
        if !(self.explain.lrp_epsilon >= 0.0 && self.explain.lrp_epsilon.is_finite()) {
            return bad("explain.lrp_epsilon", "must be finite and >= 0");
        }
        if !(self.search.step > 0.0 && self.search.step.is_finite()) {
            return bad("search.step", "must be finite and > 0");
        }
        if self.search.cap == 0 {
            return bad("search.cap", "must be >= 1");
        }
        if !(self.filter.batch_fraction > 0.0 && self.filter.batch_fraction <= 1.0) {
            return bad("filter.batch_fraction", "must be in (0, 1]");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size", "must be >= 1");
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return bad("train.learning_rate", "must be finite and > 0");
        }
        if self.report.permutations == 0 || self.report.bootstrap_resamples == 0 {
            return bad(
                "report",
                "permutations and bootstrap_resamples must be >= 1",
            );
        }
        if self.report.bin_width <= 0 {
            return bad("report.bin_width", "must be > 0");
        }
        let d = &self.dataset;
        if d.test_count == 0 {
            return bad("dataset.test_count", "must be >= 1");
        }
        match d.kind {
            DatasetKind::Synthetic => {
                if d.classes < 2 || d.size < 4 || d.strokes == 0 {
                    return bad(
                        "dataset",
                        "synthetic data needs classes >= 2, size >= 4, strokes >= 1",
                    );
                }
                if d.size % 4 != 0 {
                    return bad(
                        "dataset.size",
                        "must be a multiple of 4 for the desk network",
                    );
                }
            }
            DatasetKind::Idx => {
                if d.images.is_none() || d.labels.is_none() {
                    return bad("dataset", "kind = \"idx\" needs both `images` and `labels`");
                }
            }
        }
        Ok(())
    }

    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        derive_seed(self.seed, &[stream as u64])
    }

    pub fn model_path(&self) -> PathBuf {
        self.model
            .clone()
            .unwrap_or_else(|| self.out.join("model").join("model.apemnet"))
    }

    pub fn method_params(&self) -> MethodParams {
        MethodParams {
            smooth_n: self.explain.smooth_n,
            smooth_sigma: self.explain.smooth_sigma,
            lrp_epsilon: self.explain.lrp_epsilon,
            seed: self.seed_for(SeedStream::Smoothing),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed: self.seed_for(SeedStream::TrainOrder),
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let d = &self.dataset;
        SyntheticConfig {
            classes: d.classes,
            size: d.size,
            strokes: d.strokes,
            jitter: d.jitter,
            shift: d.shift,
            noise: d.noise,
            seed: self.seed_for(SeedStream::Glyphs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml(
            "seed = 9\n[explain]\nmethods = [\"lrp\", \"smoothgrad\"]\nstages = [\"summed\"]\n",
            Path::new("mem"),
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.explain.methods, vec![Method::Lrp, Method::SmoothGrad]);
        assert_eq!(c.search, SearchConfig::default());
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let err =
            RunConfig::from_toml("[search]\nstpe = 2.0\n", Path::new("cfg.toml")).unwrap_err();
        assert_eq!(err.code(), 2);
        assert!(err.to_string().contains("cfg.toml"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.filter.batch_fraction = 0.0;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("filter.batch_fraction"));
    }

    #[test]
    fn seed_streams_differ() {
        let c = RunConfig::default();
        assert_ne!(
            c.seed_for(SeedStream::Init),
            c.seed_for(SeedStream::TrainOrder)
        );
    }
}
