//! Dataset directories: `manifest.toml` at the root, aerial fields under
//! `worlds/<id>.tnsr` and panoramas under `samples/<id>.tnsr`.
//!
//! Any producer writing this layout can feed the pipeline, so externally
//! computed feature maps load the same way as generated ones.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use cbev_core::geometry::Pose2;
use cbev_core::synth::{Dataset, DatasetConfig, PanoramaSpec, Split, SplitMode, SyntheticSample, World};
use serde::{Deserialize, Serialize};

use crate::config::{SplitModeName, SplitName};
use crate::error::{CliError, CliResult};
use crate::tensor_io::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "cbev-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDoc {
    pub n_worlds: usize,
    pub samples_per_world: usize,
    pub world_size: usize,
    pub c_in: usize,
    pub pano_height: usize,
    pub pano_width: usize,
    pub max_range: f64,
    pub search_extent: f64,
    pub pixel_size: f64,
    pub noise_std: f64,
    pub random_heading: bool,
    pub split_mode: SplitModeName,
    pub test_fraction: f64,
    pub seed: u64,
}

impl From<DatasetConfig> for DatasetDoc {
    fn from(c: DatasetConfig) -> Self {
        Self {
            n_worlds: c.n_worlds,
            samples_per_world: c.samples_per_world,
            world_size: c.world_size,
            c_in: c.c_in,
            pano_height: c.pano.height,
            pano_width: c.pano.width,
            max_range: c.pano.max_range,
            search_extent: c.search_extent,
            pixel_size: c.pixel_size,
            noise_std: c.noise_std,
            random_heading: c.random_heading,
            split_mode: match c.split_mode {
                SplitMode::SameArea => SplitModeName::SameArea,
                SplitMode::CrossArea => SplitModeName::CrossArea,
            },
            test_fraction: c.test_fraction,
            seed: c.seed,
        }
    }
}

impl From<DatasetDoc> for DatasetConfig {
    fn from(d: DatasetDoc) -> Self {
        Self {
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
            random_heading: d.random_heading,
            split_mode: match d.split_mode {
                SplitModeName::SameArea => SplitMode::SameArea,
                SplitModeName::CrossArea => SplitMode::CrossArea,
            },
            test_fraction: d.test_fraction,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldEntry {
    pub id: u32,
    pub file: String,
    pub origin: [f64; 2],
    pub pixel_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: u32,
    pub world_id: u32,
    pub file: String,
    /// Metres east of the world centre.
    pub x: f64,
    /// Metres north of the world centre.
    pub y: f64,
    /// Heading in radians, clockwise from north.
    pub theta: f64,
    pub split: SplitName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetDoc,
    pub worlds: Vec<WorldEntry>,
    pub samples: Vec<SampleEntry>,
}

fn split_name(s: Split) -> SplitName {
    match s {
        Split::Train => SplitName::Train,
        Split::Test => SplitName::Test,
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes `dataset` under `root`.
pub fn save(root: &Path, dataset: &Dataset) -> CliResult<DatasetManifest> {
    create_dir(&root.join("worlds"))?;
    create_dir(&root.join("samples"))?;
    let mut worlds = Vec::with_capacity(dataset.worlds.len());
    for w in &dataset.worlds {
        let file = format!("worlds/{}.tnsr", w.id);
        write_tensor(&root.join(&file), &w.field)?;
        worlds.push(WorldEntry {
            id: w.id,
            file,
            origin: [w.origin.0, w.origin.1],
            pixel_size: w.pixel_size,
        });
    }
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let file = format!("samples/{}.tnsr", s.id);
        write_tensor(&root.join(&file), &s.pano)?;
        samples.push(SampleEntry {
            id: s.id,
            world_id: s.world_id,
            file,
            x: s.pose.x,
            y: s.pose.y,
            theta: s.pose.theta,
            split: split_name(s.split),
        });
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: 1,
        config: dataset.config.into(),
        worlds,
        samples,
    };
    let path = root.join(MANIFEST);
    let text = toml::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> CliResult<DatasetManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
    if m.format != FORMAT || m.version != 1 {
        return Err(CliError::format(&path, format!("not a version 1 {FORMAT} manifest")));
    }
    Ok(m)
}

/// Loads and validates a dataset: every file must parse with the declared
/// geometry, ids must be unique, every sample must reference a known world
/// and lie inside that world's search region.
pub fn load(root: &Path) -> CliResult<Dataset> {
    let m = read_manifest(root)?;
    let manifest_path = root.join(MANIFEST);
    let bad = |detail: String| CliError::format(&manifest_path, detail);
    let config: DatasetConfig = m.config.into();
    let mut world_ids = BTreeSet::new();
    let mut worlds = Vec::with_capacity(m.worlds.len());
    for w in &m.worlds {
        if !world_ids.insert(w.id) {
            return Err(bad(format!("duplicate world id {}", w.id)));
        }
        let path = root.join(&w.file);
        let field = read_tensor(&path)?;
        let want = [config.world_size, config.world_size, config.c_in];
        if field.shape() != want {
            return Err(CliError::format(&path, format!("shape {:?}, expected {want:?}", field.shape())));
        }
        worlds.push(World {
            id: w.id,
            field,
            pixel_size: w.pixel_size,
            origin: (w.origin[0], w.origin[1]),
        });
    }
    let half = config.search_extent / 2.0;
    let mut sample_ids = BTreeSet::new();
    let mut samples = Vec::with_capacity(m.samples.len());
    for s in &m.samples {
        if !sample_ids.insert(s.id) {
            return Err(bad(format!("duplicate sample id {}", s.id)));
        }
        if !world_ids.contains(&s.world_id) {
            return Err(bad(format!("sample {} references unknown world {}", s.id, s.world_id)));
        }
        if !(s.x.abs() <= half && s.y.abs() <= half && s.theta.is_finite()) {
            return Err(bad(format!(
                "sample {} pose ({}, {}) lies outside the {} m search region",
                s.id, s.x, s.y, config.search_extent
            )));
        }
        let path = root.join(&s.file);
        let pano = read_tensor(&path)?;
        let want = [config.pano.height, config.pano.width, config.c_in];
        if pano.shape() != want {
            return Err(CliError::format(&path, format!("shape {:?}, expected {want:?}", pano.shape())));
        }
        samples.push(SyntheticSample {
            id: s.id,
            world_id: s.world_id,
            pose: Pose2::new(s.x, s.y, s.theta),
            pano,
            split: s.split.split(),
        });
    }
    Ok(Dataset {
        config,
        worlds,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbev_core::synth::build_dataset;

    fn small() -> Dataset {
        let mut c = DatasetConfig::desk_default();
        c.n_worlds = 4;
        build_dataset(&c).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        save(dir.path(), &ds).unwrap();
        assert!(dir.path().join("worlds/0.tnsr").is_file());
        assert!(dir.path().join("samples/0.tnsr").is_file());
        assert_eq!(load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn detects_missing_files_and_bad_poses() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        save(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join("samples/1.tnsr")).unwrap();
        assert!(load(dir.path()).unwrap_err().to_string().contains("samples/1.tnsr"));

        let dir = tempfile::tempdir().unwrap();
        let mut ds = small();
        ds.samples[0].pose.x = 100.0;
        save(dir.path(), &ds).unwrap();
        assert!(load(dir.path()).unwrap_err().to_string().contains("outside"));
    }
}
