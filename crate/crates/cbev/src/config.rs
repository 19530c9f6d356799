//! TOML run configuration. Every section has defaults, so an empty file is
//! a valid configuration; command-line flags override file values.

use std::path::{Path, PathBuf};

use cbev_core::encoder::EncoderConfig;
use cbev_core::geometry::GridSpec;
use cbev_core::matcher::Backend;
use cbev_core::pipeline::PipelineConfig;
use cbev_core::retrieval::FusionWeights;
use cbev_core::synth::{DatasetConfig, PanoramaSpec, Split, SplitMode};
use cbev_core::train::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the dataset, initialization and training.
    pub seed: u64,
    /// Panoramas share a known heading. When false, headings are random.
    pub orientation_known: bool,
    pub paths: PathsConfig,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub grid: GridSection,
    pub stage_one: TrainSection,
    pub stage_two: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub index: PathBuf,
    pub results: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoints: "checkpoints".into(),
            index: "index".into(),
            results: "results".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitModeName {
    SameArea,
    CrossArea,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_worlds: usize,
    pub samples_per_world: usize,
    /// Aerial field side in cells; also the aerial map side of the matcher.
    pub world_size: usize,
    pub c_in: usize,
    pub pano_height: usize,
    pub pano_width: usize,
    pub max_range: f64,
    pub search_extent: f64,
    pub pixel_size: f64,
    pub noise_std: f64,
    pub split_mode: SplitModeName,
    pub test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::desk_default();
        Self {
            n_worlds: d.n_worlds,
            samples_per_world: d.samples_per_world,
            world_size: d.world_size,
            c_in: d.c_in,
            pano_height: d.pano.height,
            pano_width: d.pano.width,
            max_range: d.pano.max_range,
            search_extent: d.search_extent,
            pixel_size: d.pixel_size,
            noise_std: d.noise_std,
            split_mode: SplitModeName::SameArea,
            test_fraction: d.test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden: usize,
    pub pano_channels: usize,
    /// Channels of the matched feature maps.
    pub channels: usize,
    pub depth_bins: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub bev_side: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden: 16,
            pano_channels: 16,
            channels: 8,
            depth_bins: 19,
            embed_dim: 64,
            kernel: 1,
            bev_side: 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n_t: usize,
    /// Headings searched at evaluation.
    pub n_theta: usize,
    /// Headings searched while training stage two.
    pub train_n_theta: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            n_t: 28,
            n_theta: 32,
            train_n_theta: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub label_smoothing: f64,
    pub mining_refresh_epochs: usize,
    pub min_negative_distance: f64,
    pub dihedral_augmentation: bool,
}

impl TrainSection {
    pub fn stage_one() -> Self {
        Self {
            batch_size: 8,
            epochs: 40,
            learning_rate: 5e-3,
            weight_decay: 0.01,
            temperature: 0.01,
            label_smoothing: 0.1,
            mining_refresh_epochs: 2,
            min_negative_distance: 0.0,
            dihedral_augmentation: false,
        }
    }

    pub fn stage_two() -> Self {
        Self {
            epochs: 35,
            learning_rate: 1e-2,
            dihedral_augmentation: true,
            ..Self::stage_one()
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::stage_one()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendName {
    Fft,
    Bruteforce,
}

impl BackendName {
    pub fn backend(self) -> Backend {
        match self {
            BackendName::Fft => Backend::Fft,
            BackendName::Bruteforce => Backend::BruteForce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn split(self) -> Split {
        match self {
            SplitName::Train => Split::Train,
            SplitName::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub backend: BackendName,
    pub prior_enabled: bool,
    pub prior_weight: f64,
    pub bev_weight: f64,
    pub prior_temperature: f64,
    pub match_temperature: f64,
    pub split: SplitName,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 100,
            backend: BackendName::Fft,
            prior_enabled: true,
            prior_weight: 1.0,
            bev_weight: 1.0,
            prior_temperature: 0.01,
            match_temperature: 0.01,
            split: SplitName::Test,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            orientation_known: false,
            paths: PathsConfig::default(),
            dataset: DatasetSection::default(),
            encoder: EncoderSection::default(),
            grid: GridSection::default(),
            stage_one: TrainSection::stage_one(),
            stage_two: TrainSection::stage_two(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|d| CliError::format(path, d))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            n_worlds: d.n_worlds,
            samples_per_world: d.samples_per_world,
            world_size: d.world_size,
            c_in: d.c_in,
            pano: PanoramaSpec {
                height: d.pano_height,
                width: d.pano_width,
                max_range: d.max_range,
            },
            search_extent: d.search_extent,
            pixel_size: d.pixel_size,
            noise_std: d.noise_std,
            random_heading: !self.orientation_known,
            split_mode: match d.split_mode {
                SplitModeName::SameArea => SplitMode::SameArea,
                SplitModeName::CrossArea => SplitMode::CrossArea,
            },
            test_fraction: d.test_fraction,
            seed: self.seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            c_in: self.dataset.c_in,
            hidden: e.hidden,
            pano_channels: e.pano_channels,
            channels: e.channels,
            depth_bins: e.depth_bins,
            pano_height: self.dataset.pano_height,
            pano_width: self.dataset.pano_width,
            embed_dim: e.embed_dim,
            kernel: e.kernel,
            bev_side: e.bev_side,
            pixel_size: self.dataset.pixel_size,
            search_extent: self.dataset.search_extent,
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            n_t: self.grid.n_t,
            n_theta: self.grid.n_theta,
            search_extent: self.dataset.search_extent,
            pixel_size: self.dataset.pixel_size,
            l_a: self.dataset.world_size,
            l_b: self.encoder.bev_side,
        }
    }

    pub fn train_grid_spec(&self) -> GridSpec {
        GridSpec {
            n_theta: self.grid.train_n_theta,
            ..self.grid_spec()
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let t = match stage {
            Stage::One => &self.stage_one,
            Stage::Two => &self.stage_two,
        };
        TrainConfig {
            stage,
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            temperature: t.temperature,
            label_smoothing: t.label_smoothing,
            mining_refresh_epochs: t.mining_refresh_epochs,
            min_negative_distance: t.min_negative_distance,
            orientation_known: self.orientation_known,
            dihedral_augmentation: t.dihedral_augmentation,
            grid: self.train_grid_spec(),
            encoder: self.encoder_config(),
            seed: self.seed,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let e = &self.eval;
        PipelineConfig {
            k: e.k,
            prior_temperature: e.prior_temperature,
            match_temperature: e.match_temperature,
            fusion: if e.prior_enabled {
                FusionWeights {
                    prior: e.prior_weight,
                    bev: e.bev_weight,
                }
            } else {
                FusionWeights {
                    prior: 0.0,
                    bev: e.bev_weight,
                }
            },
            backend: e.backend.backend(),
            grid: self.grid_spec(),
        }
    }

    /// Checks everything that can be checked without touching the disk,
    /// including the fit constraint of the pose grid.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> CliResult<()> {
        if self.eval.k == 0 {
            return Err(CliError::Config("eval.k must be at least 1".into()));
        }
        for (name, v) in [
            ("eval.prior_temperature", self.eval.prior_temperature),
            ("eval.match_temperature", self.eval.match_temperature),
        ] {
            if !(v > 0.0) {
                return Err(CliError::Config(format!("{name} must be positive")));
            }
        }
        self.train_config(Stage::One).validate()?;
        self.train_config(Stage::Two).validate()?;
        if self.grid.n_theta == 0 || self.grid.train_n_theta == 0 {
            return Err(CliError::Config("grid heading counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.eval.backend = BackendName::Bruteforce;
        c.dataset.split_mode = SplitModeName::CrossArea;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_toml("[grid]\nn_tt = 3\n").is_err());
    }

    #[test]
    fn fit_constraint_is_checked() {
        let mut c = RunConfig::default();
        c.grid.n_t = c.dataset.world_size - c.encoder.bev_side + 2;
        assert!(matches!(c.validate(), Err(CliError::Core(cbev_core::Error::FitConstraint { .. }))));
        c.grid.n_t -= 1;
        c.validate().unwrap();
    }

    #[test]
    fn disabling_the_prior_zeroes_its_weight() {
        let mut c = RunConfig::default();
        c.eval.prior_enabled = false;
        assert_eq!(c.pipeline_config().fusion, FusionWeights::without_prior());
    }
}
