//! Numerical self-checks shared by the command-line `selftest` and the
//! acceptance suite.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{build_pose_grid, circular_mask, footprint_coords, GridSpec, ResampleMap};
use crate::math;
use crate::matcher::{volume_raw, Backend, MatchContext, ScoreVolume};
use crate::retrieval::{angle_error_deg, estimate_pose, pose_posterior, retrieval_score};
use crate::{Result, Tensor};

/// Outcome of the Fourier-versus-direct comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub configurations: usize,
    /// Largest element-wise relative error seen.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Element-wise relative error of `fast` against `reference`. The
/// denominator is floored at `1e-9 · max |reference|` so exact zeros of the
/// reference do not divide by zero.
pub fn max_relative_error(fast: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-9).max(f64::MIN_POSITIVE);
    fast.iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
        .fold(0.0, f64::max)
}

fn random_map(side: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..side * side * channels).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Compares both matcher backends on `configurations` random map pairs,
/// cycling `n_θ` through `thetas`, with everything else from `base`.
pub fn fft_equivalence(
    base: GridSpec,
    thetas: &[usize],
    channels: usize,
    configurations: usize,
    tolerance: f64,
    seed: u64,
) -> Result<EquivalenceReport> {
    let contexts = thetas
        .iter()
        .map(|&n_theta| MatchContext::new(build_pose_grid(GridSpec { n_theta, ..base })?))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..configurations {
        let ctx = &contexts[i % contexts.len()];
        let bev = random_map(base.l_b, channels, &mut rng);
        let aerial = random_map(base.l_a, channels, &mut rng);
        let fast = volume_raw(&bev, &aerial, channels, ctx, Backend::Fft);
        let slow = volume_raw(&bev, &aerial, channels, ctx, Backend::BruteForce);
        worst = worst.max(max_relative_error(&fast, &slow));
    }
    Ok(EquivalenceReport {
        configurations,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

/// Outcome of planted-pose recovery.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedReport {
    pub trials: usize,
    /// Trials whose score-volume argmax is the planted hypothesis.
    pub argmax_hits: usize,
    /// Trials whose posterior estimate is within one cell and one heading
    /// step of the planted pose.
    pub estimate_hits: usize,
    pub max_translation_error_cells: f64,
    pub max_rotation_error_deg: f64,
}

/// Plants BEV maps cut from random aerial maps at random grid poses and
/// checks that matching recovers them. Maps are normalized as the
/// encoders do, and the posterior uses `temperature`.
pub fn planted_pose_recovery(grid: GridSpec, channels: usize, trials: usize, temperature: f64, seed: u64) -> Result<PlantedReport> {
    let ctx = MatchContext::new(build_pose_grid(grid)?)?;
    let pg = ctx.grid().clone();
    let mask = circular_mask(grid.l_b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PlantedReport {
        trials,
        argmax_hits: 0,
        estimate_hits: 0,
        max_translation_error_cells: 0.0,
        max_rotation_error_deg: 0.0,
    };
    let step_deg = 360.0 / grid.n_theta as f64;
    for _ in 0..trials {
        let mut aerial = random_map(grid.l_a, channels, &mut rng);
        normalize(&mut aerial, None, channels);
        let planted = rng.random_range(0..pg.len());
        let pose = pg.index_to_pose(planted);
        let coords = footprint_coords(&pose, grid.l_b, grid.l_a, grid.pixel_size);
        let map = ResampleMap::from_coords(&coords, grid.l_a, grid.l_a, false)?;
        let mut bev = map.apply(&aerial, channels);
        normalize(&mut bev, Some(mask.values()), channels);
        let raw = volume_raw(&bev, &aerial, channels, &ctx, Backend::Fft);
        let t = Tensor::new([grid.n_t, grid.n_t, grid.n_theta], raw.into_iter().map(|v| v as f32).collect())?;
        let volume = ScoreVolume::new(t, pg.clone())?.scaled(1.0 / temperature);
        if volume.argmax() == planted {
            report.argmax_hits += 1;
        }
        let est = estimate_pose(&pose_posterior(&volume), &pg)?;
        let dt = math::sqrt((est.x - pose.x) * (est.x - pose.x) + (est.y - pose.y) * (est.y - pose.y)) / grid.spacing();
        let dr = angle_error_deg(est.theta, pose.theta);
        report.max_translation_error_cells = report.max_translation_error_cells.max(dt);
        report.max_rotation_error_deg = report.max_rotation_error_deg.max(dr);
        if dt <= 1.0 && dr <= step_deg {
            report.estimate_hits += 1;
        }
    }
    Ok(report)
}

fn normalize(v: &mut [f32], mask: Option<&[bool]>, channels: usize) {
    if let Some(m) = mask {
        for (i, x) in v.iter_mut().enumerate() {
            if !m[i / channels] {
                *x = 0.0;
            }
        }
    }
    let n = math::sqrt(v.iter().map(|&x| x as f64 * x as f64).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

/// Largest deviations seen in the score and posterior identities.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    /// `|lse([x]) − x|` over singleton volumes.
    pub singleton: f64,
    /// Change of the posterior under a constant offset.
    pub shift: f64,
    /// `|Σ posterior − 1|`.
    pub normalization: f64,
}

impl IdentityReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.singleton <= tolerance && self.shift <= tolerance && self.normalization <= tolerance
    }
}

/// Checks `lse` of singletons, posterior shift invariance and posterior
/// normalization on random volumes.
pub fn score_identities(trials: usize, seed: u64) -> Result<IdentityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = IdentityReport {
        singleton: 0.0,
        shift: 0.0,
        normalization: 0.0,
    };
    let single = build_pose_grid(GridSpec {
        n_t: 1,
        n_theta: 1,
        search_extent: 1.0,
        pixel_size: 1.0,
        l_a: 3,
        l_b: 3,
    })?;
    let single = alloc::sync::Arc::new(single);
    let grid = alloc::sync::Arc::new(build_pose_grid(GridSpec {
        n_t: 4,
        n_theta: 8,
        search_extent: 4.0,
        pixel_size: 1.0,
        l_a: 8,
        l_b: 5,
    })?);
    for _ in 0..trials {
        let x = rng.random_range(-50.0f32..50.0);
        let v = ScoreVolume::new(Tensor::new([1, 1, 1], alloc::vec![x])?, single.clone())?;
        r.singleton = r.singleton.max((retrieval_score(&v) - x as f64).abs());

        let data: Vec<f32> = (0..grid.len()).map(|_| rng.random_range(-20.0f32..20.0)).collect();
        // Integer offsets keep the shifted values exact in f32.
        let c = rng.random_range(-30i32..30) as f32;
        let a = ScoreVolume::new(Tensor::new([4, 4, 8], data.clone())?, grid.clone())?;
        let b = ScoreVolume::new(Tensor::new([4, 4, 8], data.iter().map(|&v| v + c).collect())?, grid.clone())?;
        let (pa, pb) = (pose_posterior(&a), pose_posterior(&b));
        let shift = pa
            .data()
            .iter()
            .zip(pb.data())
            .map(|(&p, &q)| (p as f64 - q as f64).abs())
            .fold(0.0, f64::max);
        r.shift = r.shift.max(shift);
        let total: f64 = pa.data().iter().map(|&p| p as f64).sum();
        r.normalization = r.normalization.max((total - 1.0).abs());
    }
    Ok(r)
}

/// One line of a self-check report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub section: &'static str,
    pub name: String,
    pub detail: String,
    pub passed: bool,
}

/// Geometry sanity checks: the fit constraint, grid symmetry and the
/// pose ↔ index round trip.
pub fn geometry_checks() -> Result<Vec<CheckLine>> {
    let mut out = Vec::new();
    let spec = GridSpec::desk_default();
    let too_many = GridSpec {
        n_t: spec.l_a - spec.l_b + 2,
        ..spec
    };
    out.push(CheckLine {
        section: "geometry",
        name: "fit constraint rejects n_t > l_A - l_B + 1".into(),
        detail: format!("n_t = {}", too_many.n_t),
        passed: build_pose_grid(too_many).is_err() && MatchContext::new(build_pose_grid(spec)?).is_ok(),
    });
    let grid = build_pose_grid(spec)?;
    let (sx, sy) = grid
        .poses()
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    out.push(CheckLine {
        section: "geometry",
        name: "grid translations are centred".into(),
        detail: format!("sum x {sx:.2e}, sum y {sy:.2e}"),
        passed: sx.abs() < 1e-6 && sy.abs() < 1e-6,
    });
    let roundtrip = (0..grid.len()).all(|i| grid.pose_to_index(&grid.index_to_pose(i)) == i);
    out.push(CheckLine {
        section: "geometry",
        name: "pose index round trip".into(),
        detail: format!("{} hypotheses", grid.len()),
        passed: roundtrip,
    });
    Ok(out)
}
