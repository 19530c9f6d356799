//! Desk-scale encoders.
//!
//! * Aerial: a small fully-convolutional stack producing `F_A`.
//! * Panorama: a convolutional stack producing `F_P`, depth attention that
//!   pools each column into `d` depth bins, polar→cartesian resampling, the
//!   circular mask and global L2 normalization, producing `F_B`.
//! * Vector stage: separate trunks for queries and references, mean pooled,
//!   projected and L2-normalized.
//!
//! Every encoder is written against a [`Tape`] so training and inference
//! share one code path; the free functions bind parameters as constants.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Padding, Tape, Var};
use crate::geometry::{circular_mask, polar_coords, ResampleMap, ValidityMask};
use crate::math;
use crate::{Error, Result, Tensor};

/// Panorama feature map `F_P` of shape `[h, w, c_p]`; columns wrap.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaFeatures {
    pub tensor: Tensor,
    /// Heading of column 0 in radians, when known.
    pub heading_of_column_0: f64,
}

/// Camera-local bird's-eye-view map `[l_B, l_B, c]`; "up" is the camera's
/// forward direction.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub tensor: Tensor,
    pub mask: ValidityMask,
    pub pixel_size: f64,
}

/// Aerial feature map `[l_A, l_A, c]`, north up.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialMap {
    pub tensor: Tensor,
    pub pixel_size: f64,
    pub search_extent: f64,
}

/// Architecture and geometry of the encoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Channels of the raw aerial and panorama inputs.
    pub c_in: usize,
    /// Width of the hidden convolution layer.
    pub hidden: usize,
    /// Channels of `F_P`.
    pub pano_channels: usize,
    /// Channels `c` of `F_A` and `F_B`.
    pub channels: usize,
    /// Depth bins `d` of the polar BEV.
    pub depth_bins: usize,
    pub pano_height: usize,
    pub pano_width: usize,
    /// Vector-embedding width `e`.
    pub embed_dim: usize,
    /// Odd spatial kernel size of the first convolution.
    pub kernel: usize,
    /// `l_B`.
    pub bev_side: usize,
    /// Metres per map cell.
    pub pixel_size: f64,
    /// Side of the aerial search region in metres.
    pub search_extent: f64,
}

impl EncoderConfig {
    pub fn desk_default() -> Self {
        Self {
            c_in: 4,
            hidden: 16,
            pano_channels: 16,
            channels: 32,
            depth_bins: 19,
            pano_height: 19,
            pano_width: 64,
            embed_dim: 64,
            kernel: 3,
            bev_side: 19,
            pixel_size: 1.0,
            search_extent: 28.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("c_in", self.c_in),
            ("hidden", self.hidden),
            ("pano_channels", self.pano_channels),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("bev_side", self.bev_side),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.depth_bins < 2 || self.pano_height < 2 {
            return Err(Error::InvalidConfig("depth_bins and pano_height must be at least 2".into()));
        }
        if self.pano_width < 4 {
            return Err(Error::InvalidConfig("pano_width must be at least 4".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("kernel {} must be odd", self.kernel)));
        }
        if !(self.pixel_size > 0.0) || !(self.search_extent > 0.0) {
            return Err(Error::InvalidConfig("pixel_size and search_extent must be positive".into()));
        }
        Ok(())
    }

    /// Expected shape of every named parameter.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (k, ci, h, cp, c, d, e) = (
            self.kernel,
            self.c_in,
            self.hidden,
            self.pano_channels,
            self.channels,
            self.depth_bins,
            self.embed_dim,
        );
        let mut m = BTreeMap::new();
        let mut put = |name: &str, shape: Vec<usize>| {
            m.insert(name.to_string(), shape);
        };
        for trunk in ["aerial", "pano"] {
            put(&format!("{trunk}.conv1.w"), alloc::vec![k, k, ci, h]);
            put(&format!("{trunk}.conv1.b"), alloc::vec![h]);
            put(&format!("{trunk}.conv2.w"), alloc::vec![1, 1, h, cp]);
            put(&format!("{trunk}.conv2.b"), alloc::vec![cp]);
        }
        put("aerial.head.w", alloc::vec![1, 1, cp, c]);
        put("aerial.head.b", alloc::vec![c]);
        put("attn.logits.w", alloc::vec![1, 1, cp, d]);
        put("attn.logits.b", alloc::vec![d]);
        put("attn.row_bias", alloc::vec![self.pano_height, d]);
        put("attn.value.w", alloc::vec![1, 1, cp, c]);
        put("attn.value.b", alloc::vec![c]);
        for trunk in ["embed.query", "embed.ref"] {
            put(&format!("{trunk}.conv1.w"), alloc::vec![k, k, ci, h]);
            put(&format!("{trunk}.conv1.b"), alloc::vec![h]);
            put(&format!("{trunk}.conv2.w"), alloc::vec![1, 1, h, h]);
            put(&format!("{trunk}.conv2.b"), alloc::vec![h]);
            put(&format!("{trunk}.proj"), alloc::vec![e, 2 * h]);
        }
        m
    }
}

/// Which parameters a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Vector-embedding trunks.
    Embedding,
    /// Aerial encoder, panorama encoder and depth attention.
    Bev,
}

impl ParamGroup {
    pub fn contains(self, name: &str) -> bool {
        match self {
            ParamGroup::Embedding => name.starts_with("embed."),
            ParamGroup::Bev => !name.starts_with("embed."),
        }
    }
}

/// Named learnable tensors of every encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl EncoderParams {
    /// Random initialization, deterministic in `seed`.
    ///
    /// Convolutions use fan-in scaled normals and zero biases. The aerial
    /// trunk starts as a copy of the panorama trunk so both sides begin in
    /// a shared feature space; the attention starts uniform.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let numel: usize = shape.iter().product();
            let t = if name.ends_with(".b") || name == "attn.row_bias" || name == "attn.logits.w" {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = if name.ends_with(".proj") {
                    shape[1]
                } else {
                    shape[..3].iter().product()
                };
                let std = math::sqrt(2.0 / fan_in as f64);
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..numel).map(|_| normal.sample(&mut rng) as f32).collect();
                Tensor::new(shape, data)?
            };
            tensors.insert(name, t);
        }
        for part in ["conv1.w", "conv1.b", "conv2.w", "conv2.b"] {
            let t = tensors[&format!("pano.{part}")].clone();
            tensors.insert(format!("aerial.{part}"), t);
        }
        let value = tensors["attn.value.w"].clone();
        tensors.insert("aerial.head.w".into(), value);
        Ok(Self { config, tensors })
    }

    /// Builds parameters from named tensors, checking names and shapes.
    pub fn from_tensors(config: EncoderConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        for name in tensors.keys() {
            if !shapes.contains_key(name) {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        for (name, shape) in &shapes {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(format!("{name} (missing)")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "encoder_params",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            t.ensure_finite("encoder_params")?;
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    /// Puts every parameter on `tape`; those for which `trainable` is true
    /// become gradient-tracking leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone().with_requires_grad(true))
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Binds everything as constants (inference).
    pub fn bind_constant(&self, tape: &mut Tape) -> BoundParams {
        self.bind(tape, |_| false)
    }
}

/// Parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wraps already-placed variables, e.g. leaves created by a gradient
    /// check.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Fixed geometry of the panorama → BEV lift: the polar resampling map
/// and the circular validity mask.
#[derive(Debug, Clone)]
pub struct BevGeometry {
    polar: Arc<ResampleMap>,
    mask: ValidityMask,
    mask_cells: Arc<Vec<bool>>,
    pixel_size: f64,
}

impl BevGeometry {
    pub fn new(depth_bins: usize, angle_bins: usize, side: usize, pixel_size: f64) -> Result<Self> {
        let coords = polar_coords(depth_bins, angle_bins, side)?;
        let polar = ResampleMap::from_coords(&coords, depth_bins, angle_bins, true)?;
        let mask = circular_mask(side);
        let mask_cells = Arc::new(mask.values().to_vec());
        Ok(Self {
            polar: Arc::new(polar),
            mask,
            mask_cells,
            pixel_size,
        })
    }

    pub fn from_config(config: &EncoderConfig) -> Result<Self> {
        Self::new(config.depth_bins, config.pano_width, config.bev_side, config.pixel_size)
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    pub fn mask_cells(&self) -> &Arc<Vec<bool>> {
        &self.mask_cells
    }

    pub fn polar_map(&self) -> &Arc<ResampleMap> {
        &self.polar
    }

    pub fn side(&self) -> usize {
        self.mask.side()
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }
}

fn conv_block(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    input: Var,
    padding: Padding,
) -> Result<Var> {
    let w1 = p.get(&format!("{prefix}.conv1.w"))?;
    let b1 = p.get(&format!("{prefix}.conv1.b"))?;
    let w2 = p.get(&format!("{prefix}.conv2.w"))?;
    let b2 = p.get(&format!("{prefix}.conv2.b"))?;
    let h = tape.conv2d(input, w1, b1, padding)?;
    let h = tape.gelu(h)?;
    tape.conv2d(h, w2, b2, Padding::Zero)
}

fn check_input(t: &Tensor, c_in: usize, op: &'static str) -> Result<(usize, usize)> {
    let (h, w, c) = t.hwc(op)?;
    if c != c_in {
        return Err(Error::dim(op, format!("expected {c_in} input channels, got {c}")));
    }
    Ok((h, w))
}

/// Aerial encoder on the tape: conv stack, then global L2 normalization.
pub fn aerial_forward(tape: &mut Tape, p: &BoundParams, input: Var) -> Result<Var> {
    let (h, w, _) = tape.value(input).hwc("encode_aerial")?;
    if h != w {
        return Err(Error::dim("encode_aerial", format!("aerial input must be square, got {h}x{w}")));
    }
    let f = conv_block(tape, p, "aerial", input, Padding::Zero)?;
    let (hw, hb) = (p.get("aerial.head.w")?, p.get("aerial.head.b")?);
    let f = tape.conv2d(f, hw, hb, Padding::Zero)?;
    tape.l2_normalize_global(f, None)
}

/// Panorama trunk on the tape, producing `F_P`. Columns wrap around.
pub fn panorama_features_forward(tape: &mut Tape, p: &BoundParams, input: Var) -> Result<Var> {
    conv_block(tape, p, "pano", input, Padding::WrapColumns)
}

/// Depth attention on the tape. Returns the polar BEV `[d, w, c]` and the
/// attention weights `[h, w, d]`, which sum to one over rows for every
/// (column, depth bin).
pub fn depth_attention_forward(tape: &mut Tape, p: &BoundParams, features: Var) -> Result<(Var, Var)> {
    let logits = tape.conv2d(
        features,
        p.get("attn.logits.w")?,
        p.get("attn.logits.b")?,
        Padding::Zero,
    )?;
    let logits = tape.add_row_bias(logits, p.get("attn.row_bias")?)?;
    let weights = tape.softmax_axis(logits, 0)?;
    let values = tape.conv2d(
        features,
        p.get("attn.value.w")?,
        p.get("attn.value.b")?,
        Padding::Zero,
    )?;
    let polar = tape.column_attention(weights, values)?;
    Ok((polar, weights))
}

/// Polar → cartesian resampling followed by the mask; not normalized.
pub fn polar_to_bev_forward(tape: &mut Tape, geom: &BevGeometry, polar: Var) -> Result<Var> {
    // Cells outside the polar field or the disc come out as zero.
    tape.resample(polar, geom.polar.clone())
}

/// Full panorama encoder on the tape: trunk, depth attention, polar → BEV,
/// mask and global L2 normalization over valid cells.
pub fn panorama_forward(tape: &mut Tape, p: &BoundParams, geom: &BevGeometry, input: Var) -> Result<Var> {
    let f = panorama_features_forward(tape, p, input)?;
    let (polar, _) = depth_attention_forward(tape, p, f)?;
    let bev = polar_to_bev_forward(tape, geom, polar)?;
    tape.l2_normalize_global(bev, Some(geom.mask_cells.clone()))
}

/// Vector-stage embedding on the tape: conv trunk, mean pooling of the
/// features and of their GELU, linear projection, L2 normalization.
/// Returns `[1, e]`.
///
/// `prefix` is `"embed.query"` or `"embed.ref"`.
pub fn embed_forward(tape: &mut Tape, p: &BoundParams, prefix: &str, input: Var, padding: Padding) -> Result<Var> {
    let f = conv_block(tape, p, prefix, input, padding)?;
    let mean = tape.mean_pool(f)?;
    let g = tape.gelu(f)?;
    let gmean = tape.mean_pool(g)?;
    let pooled = tape.concat_cols(&[mean, gmean])?;
    let proj = tape.matmul_t(pooled, p.get(&format!("{prefix}.proj"))?)?;
    tape.l2_normalize_global(proj, None)
}

/// Encodes an aerial input `[l_A, l_A, c_in]` into a match-ready `F_A`.
pub fn encode_aerial(input: &Tensor, params: &EncoderParams) -> Result<AerialMap> {
    let cfg = params.config();
    check_input(input, cfg.c_in, "encode_aerial")?;
    let mut tape = Tape::new();
    let p = params.bind_constant(&mut tape);
    let x = tape.constant(input.clone());
    let out = aerial_forward(&mut tape, &p, x)?;
    Ok(AerialMap {
        tensor: tape.value(out).clone(),
        pixel_size: cfg.pixel_size,
        search_extent: cfg.search_extent,
    })
}

/// Runs the panorama trunk, producing `F_P`.
pub fn panorama_features(input: &Tensor, params: &EncoderParams) -> Result<PanoramaFeatures> {
    let cfg = params.config();
    check_panorama(input, cfg)?;
    let mut tape = Tape::new();
    let p = params.bind_constant(&mut tape);
    let x = tape.constant(input.clone());
    let f = panorama_features_forward(&mut tape, &p, x)?;
    Ok(PanoramaFeatures {
        tensor: tape.value(f).clone(),
        heading_of_column_0: 0.0,
    })
}

fn check_panorama(input: &Tensor, cfg: &EncoderConfig) -> Result<()> {
    let (h, w) = check_input(input, cfg.c_in, "encode_panorama")?;
    if (h, w) != (cfg.pano_height, cfg.pano_width) {
        return Err(Error::dim(
            "encode_panorama",
            format!(
                "panorama is {h}x{w}, encoder expects {}x{}",
                cfg.pano_height, cfg.pano_width
            ),
        ));
    }
    Ok(())
}

/// Depth attention: pools each column of `F_P` into `d` depth bins.
pub fn depth_attention(features: &PanoramaFeatures, params: &EncoderParams) -> Result<Tensor> {
    let cfg = params.config();
    let (h, w, c) = features.tensor.hwc("depth_attention")?;
    if h != cfg.pano_height || w < 4 || c != cfg.pano_channels {
        return Err(Error::dim(
            "depth_attention",
            format!("F_P {:?} does not match the attention head", features.tensor.shape()),
        ));
    }
    let mut tape = Tape::new();
    let p = params.bind_constant(&mut tape);
    let f = tape.constant(features.tensor.clone());
    let (polar, _) = depth_attention_forward(&mut tape, &p, f)?;
    Ok(tape.value(polar).clone())
}

/// Resamples a polar BEV `[d, w, c]` onto the cartesian grid and applies
/// the mask. The result is not normalized.
pub fn polar_to_bev(polar: &Tensor, geom: &BevGeometry) -> Result<BevMap> {
    let mut tape = Tape::new();
    let x = tape.constant(polar.clone());
    let out = polar_to_bev_forward(&mut tape, geom, x)?;
    Ok(BevMap {
        tensor: tape.value(out).clone(),
        mask: geom.mask.clone(),
        pixel_size: geom.pixel_size,
    })
}

/// Encodes a panorama input `[h, w, c_in]` into a match-ready `F_B`.
pub fn encode_panorama(input: &Tensor, params: &EncoderParams, geom: &BevGeometry) -> Result<BevMap> {
    check_panorama(input, params.config())?;
    let mut tape = Tape::new();
    let p = params.bind_constant(&mut tape);
    let x = tape.constant(input.clone());
    let out = panorama_forward(&mut tape, &p, geom, x)?;
    Ok(BevMap {
        tensor: tape.value(out).clone(),
        mask: geom.mask.clone(),
        pixel_size: geom.pixel_size,
    })
}

/// Unit-norm query embedding of a panorama input.
pub fn embed_query(input: &Tensor, params: &EncoderParams) -> Result<Vec<f32>> {
    check_input(input, params.config().c_in, "embed_query")?;
    embed(input, params, "embed.query", Padding::WrapColumns)
}

/// Unit-norm reference embedding of an aerial input.
pub fn embed_reference(input: &Tensor, params: &EncoderParams) -> Result<Vec<f32>> {
    check_input(input, params.config().c_in, "embed_reference")?;
    embed(input, params, "embed.ref", Padding::Zero)
}

fn embed(input: &Tensor, params: &EncoderParams, prefix: &str, padding: Padding) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let p = params.bind_constant(&mut tape);
    let x = tape.constant(input.clone());
    let out = embed_forward(&mut tape, &p, prefix, x, padding)?;
    Ok(tape.value(out).data().to_vec())
}

/// Normalizes a vector to unit length.
pub fn l2_normalize_vector(v: &[f32]) -> Result<Vec<f32>> {
    let n = math::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum());
    if !(n > 1e-12) {
        return Err(Error::DegenerateNorm { op: "l2_normalize" });
    }
    Ok(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{roll_columns, rotate_quarter_turns};
    use rand::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            c_in: 2,
            hidden: 4,
            pano_channels: 4,
            channels: 3,
            depth_bins: 4,
            pano_height: 4,
            pano_width: 8,
            embed_dim: 5,
            kernel: 3,
            bev_side: 7,
            pixel_size: 1.0,
            search_extent: 4.0,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn aerial_shape_and_norm() {
        let cfg = EncoderConfig::desk_default();
        let params = EncoderParams::init(cfg, 1).unwrap();
        let x = random(&[48, 48, 4], 2);
        let a = encode_aerial(&x, &params).unwrap();
        assert_eq!(a.tensor.shape(), &[48, 48, 32]);
        assert!((a.tensor.norm() - 1.0).abs() < 1e-5);
        assert_eq!(a, encode_aerial(&x, &params).unwrap());
        assert!(encode_aerial(&random(&[48, 47, 4], 2), &params).is_err());
        assert!(encode_aerial(&random(&[48, 48, 3], 2), &params).is_err());
    }

    #[test]
    fn panorama_norm_and_mask() {
        let cfg = small_config();
        let mut params = EncoderParams::init(cfg, 3).unwrap();
        params.get_mut("attn.row_bias").unwrap().data_mut()[5] = 0.7;
        let geom = BevGeometry::from_config(&cfg).unwrap();
        let b = encode_panorama(&random(&[4, 8, 2], 4), &params, &geom).unwrap();
        assert!((b.tensor.norm() - 1.0).abs() < 1e-5);
        for r in 0..7 {
            for c in 0..7 {
                if !b.mask.is_valid(r, c) {
                    assert!(b.tensor.data()[(r * 7 + c) * 3..][..3].iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(encode_panorama(&random(&[5, 8, 2], 4), &params, &geom).is_err());
    }

    fn attention_params(cfg: EncoderConfig, logits_bias: &[f32]) -> EncoderParams {
        let mut params = EncoderParams::init(cfg, 5).unwrap();
        params
            .get_mut("attn.row_bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(logits_bias);
        params
    }

    #[test]
    fn uniform_attention_is_column_mean() {
        let cfg = small_config();
        let params = attention_params(cfg, &[0.0; 16]);
        let f = PanoramaFeatures {
            tensor: random(&[4, 8, 4], 6),
            heading_of_column_0: 0.0,
        };
        let polar = depth_attention(&f, &params).unwrap();
        let mut tape = Tape::new();
        let p = params.bind_constant(&mut tape);
        let x = tape.constant(f.tensor.clone());
        let v = tape
            .conv2d(x, p.get("attn.value.w").unwrap(), p.get("attn.value.b").unwrap(), Padding::Zero)
            .unwrap();
        let v = tape.value(v).data();
        for k in 0..4 {
            for j in 0..8 {
                for ch in 0..3 {
                    let mean: f32 = (0..4).map(|i| v[(i * 8 + j) * 3 + ch]).sum::<f32>() / 4.0;
                    assert!((polar.data()[(k * 8 + j) * 3 + ch] - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn saturated_attention_selects_row() {
        let cfg = small_config();
        // Depth bin k looks at row 3 - k.
        let mut bias = [-20.0f32; 16];
        for k in 0..4 {
            bias[(3 - k) * 4 + k] = 20.0;
        }
        let params = attention_params(cfg, &bias);
        let f = PanoramaFeatures {
            tensor: random(&[4, 8, 4], 7),
            heading_of_column_0: 0.0,
        };
        let polar = depth_attention(&f, &params).unwrap();
        let mut tape = Tape::new();
        let p = params.bind_constant(&mut tape);
        let x = tape.constant(f.tensor.clone());
        let v = tape
            .conv2d(x, p.get("attn.value.w").unwrap(), p.get("attn.value.b").unwrap(), Padding::Zero)
            .unwrap();
        let v = tape.value(v).data();
        for k in 0..4 {
            for j in 0..8 {
                for ch in 0..3 {
                    let want = v[((3 - k) * 8 + j) * 3 + ch];
                    assert!((polar.data()[(k * 8 + j) * 3 + ch] - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let cfg = small_config();
        let mut params = EncoderParams::init(cfg, 8).unwrap();
        *params.get_mut("attn.logits.w").unwrap() = random(&[1, 1, 4, 4], 9);
        *params.get_mut("attn.row_bias").unwrap() = random(&[4, 4], 10);
        let mut tape = Tape::new();
        let p = params.bind_constant(&mut tape);
        let x = tape.constant(random(&[4, 8, 4], 11));
        let (_, w) = depth_attention_forward(&mut tape, &p, x).unwrap();
        let w = tape.value(w).data();
        for j in 0..8 {
            for k in 0..4 {
                let s: f32 = (0..4).map(|i| w[(i * 8 + j) * 4 + k]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_polar_field_fills_disc() {
        let geom = BevGeometry::new(9, 32, 19, 1.0).unwrap();
        let b = polar_to_bev(&Tensor::filled([9, 32, 2], 0.5), &geom).unwrap();
        let first_bin = crate::geometry::polar_bin_depth(0, 9, 19);
        for r in 0..19 {
            for c in 0..19 {
                let cell = &b.tensor.data()[(r * 19 + c) * 2..][..2];
                let dist = math::sqrt((r as f64 - 9.0).powi(2) + (c as f64 - 9.0).powi(2));
                if dist < first_bin || !b.mask.is_valid(r, c) {
                    assert_eq!(cell, &[0.0, 0.0]);
                } else {
                    assert!(cell.iter().all(|&v| (v - 0.5).abs() < 1e-6), "{r},{c}");
                }
            }
        }
    }

    #[test]
    fn polar_angle_index_follows_bearing() {
        let (d, w, side) = (9, 32, 19);
        let geom = BevGeometry::new(d, w, side, 1.0).unwrap();
        // Smooth bearing proxy: sin and cos of the column angle.
        let polar = Tensor::from_fn([d, w, 2], |i| {
            let j = (i / 2) % w;
            let a = j as f64 * math::TAU / w as f64;
            (if i % 2 == 0 { math::sin(a) } else { math::cos(a) }) as f32
        });
        let b = polar_to_bev(&polar, &geom).unwrap();
        let centre = (side as f64 - 1.0) / 2.0;
        for r in 0..side {
            for c in 0..side {
                let (e, n) = (c as f64 - centre, centre - r as f64);
                let dist = math::sqrt(e * e + n * n);
                if !(2.0..=9.0).contains(&dist) {
                    continue;
                }
                let cell = &b.tensor.data()[(r * side + c) * 2..][..2];
                let got = math::atan2(cell[0] as f64, cell[1] as f64);
                let want = math::atan2(e, n);
                let diff = math::wrap_angle(got - want);
                let diff = diff.min(math::TAU - diff);
                assert!(diff < 0.05, "cell {r},{c}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn cartesian_polar_cartesian_round_trip() {
        let (d, w, side) = (19, 64, 19);
        let geom = BevGeometry::new(d, w, side, 1.0).unwrap();
        let centre = (side as f64 - 1.0) / 2.0;
        let field = |e: f64, n: f64| math::sin(0.3 * e) + math::cos(0.25 * n);
        // Sample the field on the polar grid analytically, then resample.
        let polar = Tensor::from_fn([d, w, 1], |i| {
            let (k, j) = (i / w, i % w);
            let depth = crate::geometry::polar_bin_depth(k, d, side);
            let a = j as f64 * math::TAU / w as f64;
            field(depth * math::sin(a), depth * math::cos(a)) as f32
        });
        let b = polar_to_bev(&polar, &geom).unwrap();
        for r in 0..side {
            for c in 0..side {
                let (e, n) = (c as f64 - centre, centre - r as f64);
                let dist = math::sqrt(e * e + n * n);
                if !(1.0..=8.5).contains(&dist) {
                    continue;
                }
                let got = b.tensor.data()[r * side + c] as f64;
                assert!((got - field(e, n)).abs() < 0.05, "{r},{c}");
            }
        }
    }

    #[test]
    fn roll_by_quarter_rotates_bev() {
        let cfg = EncoderConfig {
            pano_width: 64,
            bev_side: 19,
            depth_bins: 19,
            pano_height: 19,
            ..small_config()
        };
        let mut params = EncoderParams::init(cfg, 12).unwrap();
        *params.get_mut("attn.row_bias").unwrap() = random(&[19, 19], 13);
        *params.get_mut("attn.logits.w").unwrap() = random(&[1, 1, 4, 19], 14);
        let geom = BevGeometry::from_config(&cfg).unwrap();
        // Smooth in the column direction so resampling error stays small.
        let pano = Tensor::from_fn([19, 64, 2], |i| {
            let (r, j, ch) = (i / 128, (i / 2) % 64, i % 2);
            let a = j as f64 * math::TAU / 64.0;
            (math::sin(a + ch as f64 + 0.2 * r as f64) + 0.5 * math::cos(2.0 * a)) as f32
        });
        let bev_of = |p: &Tensor| {
            let f = panorama_features(p, &params).unwrap();
            polar_to_bev(&depth_attention(&f, &params).unwrap(), &geom).unwrap().tensor
        };
        let base = bev_of(&pano);
        // Column 0 of the rolled panorama looks 90° clockwise of the
        // original heading, so the map rotates 90° counter-clockwise.
        let rolled = bev_of(&roll_columns(&pano, 16).unwrap());
        let want = rotate_quarter_turns(&base, 3).unwrap();
        let centre = 9.0;
        for r in 0..19 {
            for c in 0..19 {
                let dist = math::sqrt((r as f64 - centre).powi(2) + (c as f64 - centre).powi(2));
                if dist > 8.5 {
                    continue;
                }
                for ch in 0..3 {
                    let i = (r * 19 + c) * 3 + ch;
                    assert!((rolled.data()[i] - want.data()[i]).abs() < 0.05, "{r},{c}");
                }
            }
        }
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let cfg = small_config();
        let params = EncoderParams::init(cfg, 15).unwrap();
        let q = embed_query(&random(&[4, 8, 2], 16), &params).unwrap();
        let n: f32 = q.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-6);
        let x = random(&[6, 6, 2], 17);
        let a = embed_reference(&x, &params).unwrap();
        let b = embed_reference(&x, &params).unwrap();
        let cos: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((cos - 1.0).abs() < 1e-6);
        assert!(l2_normalize_vector(&[0.0, 0.0]).is_err());
        let c = l2_normalize_vector(&[2.0, 2.0]).unwrap();
        assert!((c[0] - c[1]).abs() < 1e-7 && (c[0] - 0.5f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn params_round_trip_through_named_tensors() {
        let cfg = small_config();
        let params = EncoderParams::init(cfg, 18).unwrap();
        let again = EncoderParams::from_tensors(cfg, params.tensors().clone()).unwrap();
        assert_eq!(params, again);
        let mut bad = params.tensors().clone();
        bad.insert("nope".into(), Tensor::zeros([1]));
        assert!(matches!(
            EncoderParams::from_tensors(cfg, bad),
            Err(Error::UnknownParameter(_))
        ));
    }
}
