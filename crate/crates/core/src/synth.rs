//! Synthetic worlds and panorama observations with exact groundtruth.
//!
//! A world is a structured random field (localized blobs and short oriented
//! ridges) standing in for an aerial image. A panorama seen from a pose has
//! one column per bearing, clockwise from the heading, and one row per
//! distance, far at the top, so every pixel samples the world at a known
//! ground point.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{footprint_coords, Pose2, ResampleMap};
use crate::math::{self, TAU};
use crate::{Error, Result, Tensor};

/// One synthetic area: an aerial field centred on `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub id: u32,
    /// `[size, size, c_in]`, north up.
    pub field: Tensor,
    pub pixel_size: f64,
    /// Metric position of the field centre.
    pub origin: (f64, f64),
}

impl World {
    pub fn size(&self) -> usize {
        self.field.shape()[0]
    }

    /// Metric half-width usable around the centre.
    pub fn half_extent(&self) -> f64 {
        (self.size() as f64 - 1.0) / 2.0 * self.pixel_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A street-level observation of one world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: u32,
    pub world_id: u32,
    /// Groundtruth pose relative to the world centre.
    pub pose: Pose2,
    /// `[h_p, w_p, c_in]`.
    pub pano: Tensor,
    pub split: Split,
}

fn item_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const WORLD_STREAM: u64 = 1 << 40;
const POSE_STREAM: u64 = 2 << 40;
const NOISE_STREAM: u64 = 3 << 40;

/// Deterministic random field for `(seed, id)`.
///
/// Each channel mixes signed Gaussian blobs and short ridges, is
/// standardized to zero mean and unit RMS, then scaled by a per-world gain
/// in `[0.6, 1.6]` so worlds also differ in their global statistics.
pub fn generate_world(seed: u64, id: u32, size: usize, c_in: usize) -> Result<World> {
    if size == 0 || c_in == 0 {
        return Err(Error::InvalidConfig("world size and channels must be positive".into()));
    }
    let mut rng = item_rng(seed, WORLD_STREAM + id as u64);
    let cells = size * size;
    let mut data = alloc::vec![0.0f32; cells * c_in];
    for ch in 0..c_in {
        let mut plane = alloc::vec![0.0f64; cells];
        let blobs = cells / 10;
        for _ in 0..blobs {
            let (br, bc) = (rng.random_range(-3.0..size as f64 + 3.0), rng.random_range(-3.0..size as f64 + 3.0));
            let sigma: f64 = rng.random_range(0.7..1.6);
            let amp = rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let reach = math::floor(3.0 * sigma) as isize + 1;
            let (r0, c0) = (math::round(br) as isize, math::round(bc) as isize);
            for r in (r0 - reach).max(0)..(r0 + reach + 1).min(size as isize) {
                for c in (c0 - reach).max(0)..(c0 + reach + 1).min(size as isize) {
                    let (dr, dc) = (r as f64 - br, c as f64 - bc);
                    let d2 = dr * dr + dc * dc;
                    plane[r as usize * size + c as usize] += amp * math::exp(-d2 / (2.0 * sigma * sigma));
                }
            }
        }
        // Short oriented ridges.
        for _ in 0..cells / 200 {
            let a = rng.random_range(0.0..TAU);
            let (dr, dc) = (math::sin(a), math::cos(a));
            let (cr, cc) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
            let half_len: f64 = rng.random_range(2.0..6.0);
            let width: f64 = rng.random_range(0.5..0.9);
            let amp = rng.random_range(0.5..1.2) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let reach = math::floor(half_len + 3.0 * width) as isize + 1;
            let (r0, c0) = (math::round(cr) as isize, math::round(cc) as isize);
            for r in (r0 - reach).max(0)..(r0 + reach + 1).min(size as isize) {
                for c in (c0 - reach).max(0)..(c0 + reach + 1).min(size as isize) {
                    let (pr, pc) = (r as f64 - cr, c as f64 - cc);
                    let along = pr * dr + pc * dc;
                    let across = -pr * dc + pc * dr;
                    let beyond = (math::abs(along) - half_len).max(0.0);
                    let d2 = across * across + beyond * beyond;
                    plane[r as usize * size + c as usize] += amp * math::exp(-d2 / (2.0 * width * width));
                }
            }
        }
        let mean = plane.iter().sum::<f64>() / cells as f64;
        let rms = math::sqrt(plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cells as f64).max(1e-12);
        let gain = rng.random_range(0.6..1.6);
        for (i, v) in plane.iter().enumerate() {
            data[i * c_in + ch] = ((v - mean) / rms * gain) as f32;
        }
    }
    Ok(World {
        id,
        field: Tensor::new([size, size, c_in], data)?,
        pixel_size: 1.0,
        origin: (0.0, 0.0),
    })
}

/// Geometry of a rendered panorama.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanoramaSpec {
    pub height: usize,
    pub width: usize,
    /// Distance seen by the top row, in metres. Row `i` sees
    /// `(height − i) / height · max_range`.
    pub max_range: f64,
}

impl PanoramaSpec {
    pub fn row_range(&self, row: usize) -> f64 {
        (self.height - row) as f64 / self.height as f64 * self.max_range
    }
}

/// Renders the panorama of `world` from `pose` plus Gaussian noise.
///
/// Column `j` looks along bearing `θ + j · 360° / w`; row `i` samples the
/// ground point at [`PanoramaSpec::row_range`]. Noise is drawn from
/// `noise_seed` so renders are reproducible.
pub fn render_observation(
    world: &World,
    pose: &Pose2,
    spec: PanoramaSpec,
    noise_std: f64,
    noise_seed: u64,
) -> Result<Tensor> {
    let (size, _, c) = world.field.hwc("render_observation")?;
    let reach = pose.x.abs().max(pose.y.abs()) + spec.max_range;
    if !(reach <= world.half_extent()) {
        return Err(Error::PoseOutOfBounds { x: pose.x, y: pose.y });
    }
    let m = (size as f64 - 1.0) / 2.0;
    let mut coords = Vec::with_capacity(spec.height * spec.width * 2);
    for i in 0..spec.height {
        let range = spec.row_range(i) / world.pixel_size;
        for j in 0..spec.width {
            let b = pose.theta + j as f64 * TAU / spec.width as f64;
            let (e, n) = (pose.x / world.pixel_size + range * math::sin(b), pose.y / world.pixel_size + range * math::cos(b));
            coords.push((m - n) as f32);
            coords.push((m + e) as f32);
        }
    }
    let coords = Tensor::new([spec.height, spec.width, 2], coords)?;
    let map = ResampleMap::from_coords(&coords, size, size, false)?;
    let mut pano = map.apply(world.field.data(), c);
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|_| Error::InvalidConfig("noise_std must be finite".into()))?;
        let mut rng = item_rng(noise_seed, NOISE_STREAM);
        pano.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
    }
    Tensor::new([spec.height, spec.width, c], pano)
}

/// Camera-local crop of a world field at `pose`: what a perfect panorama
/// encoder would produce (before masking and normalization).
pub fn oracle_bev(field: &Tensor, pose: &Pose2, l_b: usize, pixel_size: f64) -> Result<Tensor> {
    let (size, _, c) = field.hwc("oracle_bev")?;
    let coords = footprint_coords(pose, l_b, size, pixel_size);
    let map = ResampleMap::from_coords(&coords, size, size, false)?;
    Tensor::new([l_b, l_b, c], map.apply(field.data(), c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Every world contributes train and test samples.
    SameArea,
    /// Train and test use disjoint worlds.
    CrossArea,
}

/// Parameters of [`build_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n_worlds: usize,
    pub samples_per_world: usize,
    pub world_size: usize,
    pub c_in: usize,
    pub pano: PanoramaSpec,
    /// Side of the square search region in metres.
    pub search_extent: f64,
    pub pixel_size: f64,
    pub noise_std: f64,
    /// Random headings; otherwise every panorama starts due north.
    pub random_heading: bool,
    pub split_mode: SplitMode,
    /// Cross-area: share of worlds held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn desk_default() -> Self {
        Self {
            n_worlds: 64,
            samples_per_world: 2,
            world_size: 48,
            c_in: 4,
            pano: PanoramaSpec {
                height: 19,
                width: 64,
                max_range: 9.5,
            },
            search_extent: 28.0,
            pixel_size: 1.0,
            noise_std: 0.05,
            random_heading: true,
            split_mode: SplitMode::SameArea,
            test_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Worlds and samples of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub worlds: Vec<World>,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn world(&self, id: u32) -> Option<&World> {
        self.worlds.iter().find(|w| w.id == id)
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &SyntheticSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Metric location of a sample in the shared synthetic area.
    pub fn sample_location(&self, s: &SyntheticSample) -> (f64, f64) {
        let o = self.world(s.world_id).map_or((0.0, 0.0), |w| w.origin);
        (o.0 + s.pose.x, o.1 + s.pose.y)
    }
}

/// Side length of the square world tiling for `n` worlds.
fn tiling_columns(n: usize) -> usize {
    let mut c = 1;
    while c * c < n {
        c += 1;
    }
    c
}

/// Generates worlds tiled on a grid whose spacing equals the search
/// extent, so search regions are disjoint and tile the area, plus
/// observations at uniformly random poses inside each region.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.n_worlds == 0 || config.samples_per_world == 0 {
        return Err(Error::InvalidConfig("need at least one world and one sample per world".into()));
    }
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::InvalidConfig("test_fraction must lie in [0, 1)".into()));
    }
    let cols = tiling_columns(config.n_worlds);
    let worlds: Vec<World> = (0..config.n_worlds)
        .map(|w| {
            let mut world = generate_world(config.seed, w as u32, config.world_size, config.c_in)?;
            world.pixel_size = config.pixel_size;
            world.origin = (
                (w % cols) as f64 * config.search_extent,
                -((w / cols) as f64) * config.search_extent,
            );
            Ok(world)
        })
        .collect::<Result<_>>()?;
    let n_train_worlds = config.n_worlds - math::round(config.n_worlds as f64 * config.test_fraction) as usize;
    let n_test_per_world = config.samples_per_world / 2;
    let half = config.search_extent / 2.0;
    let mut samples = Vec::with_capacity(config.n_worlds * config.samples_per_world);
    for world in &worlds {
        for s in 0..config.samples_per_world {
            let id = (world.id as usize * config.samples_per_world + s) as u32;
            let mut rng = item_rng(config.seed, POSE_STREAM + id as u64);
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            let theta = if config.random_heading {
                rng.random_range(0.0..TAU)
            } else {
                0.0
            };
            let pose = Pose2::new(x, y, theta);
            let pano = render_observation(world, &pose, config.pano, config.noise_std, config.seed ^ ((id as u64) << 20))?;
            let split = match config.split_mode {
                SplitMode::SameArea if s >= config.samples_per_world - n_test_per_world => Split::Test,
                SplitMode::SameArea => Split::Train,
                SplitMode::CrossArea if (world.id as usize) < n_train_worlds => Split::Train,
                SplitMode::CrossArea => Split::Test,
            };
            samples.push(SyntheticSample {
                id,
                world_id: world.id,
                pose,
                pano,
                split,
            });
        }
    }
    Ok(Dataset {
        config: *config,
        worlds,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_pose_grid, GridSpec};
    use crate::matcher::{volume_raw, Backend, MatchContext};
    use crate::tensor::roll_columns;
    use alloc::collections::BTreeSet;

    #[test]
    fn worlds_are_reproducible_and_distinct() {
        let a = generate_world(7, 3, 48, 4).unwrap();
        let b = generate_world(7, 3, 48, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.field.shape(), &[48, 48, 4]);
        let c = generate_world(7, 4, 48, 4).unwrap();
        assert!(a.field.max_abs_diff(&c.field) > 0.1);
        for ch in 0..4 {
            let mean_abs: f64 = a.field.data().iter().skip(ch).step_by(4).map(|v| v.abs() as f64).sum::<f64>() / 2304.0;
            assert!((0.1..=10.0).contains(&mean_abs));
        }
    }

    fn spec() -> PanoramaSpec {
        PanoramaSpec {
            height: 19,
            width: 64,
            max_range: 9.5,
        }
    }

    #[test]
    fn quarter_turn_heading_is_column_roll() {
        let w = generate_world(1, 0, 48, 4).unwrap();
        let p = Pose2::new(3.2, -5.1, 0.4);
        let a = render_observation(&w, &p, spec(), 0.0, 0).unwrap();
        assert_eq!(a, render_observation(&w, &p, spec(), 0.0, 9).unwrap());
        let turned = Pose2::new(p.x, p.y, p.theta + TAU / 4.0);
        let b = render_observation(&w, &turned, spec(), 0.0, 0).unwrap();
        assert!(b.max_abs_diff(&roll_columns(&a, 16).unwrap()) < 1e-5);
    }

    #[test]
    fn noise_has_requested_spread() {
        let w = generate_world(1, 0, 48, 4).unwrap();
        let p = Pose2::new(0.0, 0.0, 0.0);
        let clean = render_observation(&w, &p, spec(), 0.0, 0).unwrap();
        let noisy = render_observation(&w, &p, spec(), 0.1, 5).unwrap();
        let d: Vec<f64> = clean.data().iter().zip(noisy.data()).map(|(a, b)| (b - a) as f64).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!((std - 0.1).abs() < 0.01, "{std}");
    }

    #[test]
    fn border_poses_rejected() {
        let w = generate_world(1, 0, 48, 4).unwrap();
        assert!(matches!(
            render_observation(&w, &Pose2::new(20.0, 0.0, 0.0), spec(), 0.0, 0),
            Err(Error::PoseOutOfBounds { .. })
        ));
    }

    #[test]
    fn dataset_contract() {
        let mut cfg = DatasetConfig::desk_default();
        cfg.n_worlds = 8;
        let d = build_dataset(&cfg).unwrap();
        assert_eq!(d.worlds.len(), 8);
        assert_eq!(d.samples.len(), 16);
        for s in &d.samples {
            assert!(s.pose.x.abs() <= 14.0 && s.pose.y.abs() <= 14.0);
        }
        assert_eq!(d.samples_in(Split::Test).count(), 8);
        assert_eq!(d, build_dataset(&cfg).unwrap());
        cfg.split_mode = SplitMode::CrossArea;
        let d = build_dataset(&cfg).unwrap();
        let train: BTreeSet<u32> = d.samples_in(Split::Train).map(|s| s.world_id).collect();
        let test: BTreeSet<u32> = d.samples_in(Split::Test).map(|s| s.world_id).collect();
        assert!(train.is_disjoint(&test) && !train.is_empty() && !test.is_empty());
    }

    #[test]
    fn oracle_features_localize() {
        let mut cfg = DatasetConfig::desk_default();
        cfg.n_worlds = 6;
        let d = build_dataset(&cfg).unwrap();
        let grid = build_pose_grid(GridSpec {
            n_theta: 16,
            ..GridSpec::desk_default()
        })
        .unwrap();
        let ctx = MatchContext::new(grid).unwrap();
        let g = ctx.grid().clone();
        for s in &d.samples {
            let world = d.world(s.world_id).unwrap();
            // On a grid node the argmax is exact.
            let node = g.pose_to_index(&s.pose);
            let snapped = g.poses()[node];
            let bev = oracle_bev(&world.field, &snapped, 19, 1.0).unwrap();
            let vol = volume_raw(bev.data(), world.field.data(), 4, &ctx, Backend::Fft);
            let best = (0..vol.len()).fold(0, |b, i| if vol[i] > vol[b] { i } else { b });
            assert_eq!(best, node, "sample {}", s.id);
            // Off the grid it lands in a neighbouring hypothesis.
            let bev = oracle_bev(&world.field, &s.pose, 19, 1.0).unwrap();
            let vol = volume_raw(bev.data(), world.field.data(), 4, &ctx, Backend::Fft);
            let best = g.poses()[(0..vol.len()).fold(0, |b, i| if vol[i] > vol[b] { i } else { b })];
            assert!((best.x - s.pose.x).abs() <= 1.5 && (best.y - s.pose.y).abs() <= 1.5);
            assert!(crate::retrieval::angle_error_deg(best.theta, s.pose.theta) <= 22.5 + 1e-9);
        }
    }
}
