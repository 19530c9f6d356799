//! Parameter checkpoints: one tensor file per named parameter plus a
//! `manifest.toml` mapping names to files and shapes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cbev_core::encoder::{EncoderConfig, EncoderParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::tensor_io::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "cbev-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDoc {
    pub c_in: usize,
    pub hidden: usize,
    pub pano_channels: usize,
    pub channels: usize,
    pub depth_bins: usize,
    pub pano_height: usize,
    pub pano_width: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub bev_side: usize,
    pub pixel_size: f64,
    pub search_extent: f64,
}

impl From<EncoderConfig> for EncoderDoc {
    fn from(c: EncoderConfig) -> Self {
        Self {
            c_in: c.c_in,
            hidden: c.hidden,
            pano_channels: c.pano_channels,
            channels: c.channels,
            depth_bins: c.depth_bins,
            pano_height: c.pano_height,
            pano_width: c.pano_width,
            embed_dim: c.embed_dim,
            kernel: c.kernel,
            bev_side: c.bev_side,
            pixel_size: c.pixel_size,
            search_extent: c.search_extent,
        }
    }
}

impl From<EncoderDoc> for EncoderConfig {
    fn from(d: EncoderDoc) -> Self {
        Self {
            c_in: d.c_in,
            hidden: d.hidden,
            pano_channels: d.pano_channels,
            channels: d.channels,
            depth_bins: d.depth_bins,
            pano_height: d.pano_height,
            pano_width: d.pano_width,
            embed_dim: d.embed_dim,
            kernel: d.kernel,
            bev_side: d.bev_side,
            pixel_size: d.pixel_size,
            search_extent: d.search_extent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    /// Stage that produced the checkpoint.
    pub stage: String,
    pub seed: u64,
    pub encoder: EncoderDoc,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `params` into `dir`, creating it if needed.
pub fn save(dir: &Path, params: &EncoderParams, stage: &str, seed: u64) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in params.iter() {
        let file = format!("{name}.tnsr");
        write_tensor(&dir.join(&file), t)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        stage: stage.into(),
        seed,
        encoder: (*params.config()).into(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = toml::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> CliResult<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
    if m.format != FORMAT || m.version != 1 {
        return Err(CliError::format(&path, format!("not a version 1 {FORMAT} manifest")));
    }
    Ok(m)
}

/// Loads a checkpoint, checking every declared shape against its file.
pub fn load(dir: &Path) -> CliResult<(CheckpointManifest, EncoderParams)> {
    let m = read_manifest(dir)?;
    let mut tensors = BTreeMap::new();
    for entry in &m.tensors {
        let path = dir.join(&entry.file);
        let t = read_tensor(&path)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(CliError::format(
                &path,
                format!("shape {:?} differs from manifest {:?}", t.shape(), entry.shape),
            ));
        }
        tensors.insert(entry.name.clone(), t);
    }
    let params = EncoderParams::from_tensors(m.encoder.into(), tensors)?;
    Ok((m, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = EncoderConfig::desk_default();
        cfg.channels = 4;
        cfg.pixel_size = 0.1 + 0.2;
        let p = EncoderParams::init(cfg, 3).unwrap();
        save(dir.path(), &p, "one", 3).unwrap();
        let (m, q) = load(dir.path()).unwrap();
        assert_eq!(m.stage, "one");
        assert_eq!(q.config(), p.config());
        for ((na, a), (nb, b)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &cbev_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{na}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = EncoderParams::init(EncoderConfig::desk_default(), 0).unwrap();
        save(dir.path(), &p, "one", 0).unwrap();
        write_tensor(&dir.path().join("attn.value.b.tnsr"), &cbev_core::Tensor::zeros([3])).unwrap();
        let err = load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("attn.value.b"), "{err}");
    }
}
