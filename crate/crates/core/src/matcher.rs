//! Score volumes: every pose hypothesis tested as an inner product between
//! the rotated, translated BEV map and the aerial map.
//!
//! Two backends compute the same `[n_t, n_t, n_θ]` volume. The brute-force
//! backend sums products cell by cell; the Fourier backend rotates the BEV
//! map once per heading, zero-pads it, and evaluates all translations with
//! one circular cross-correlation per heading. Both accumulate in `f64` and
//! share the same rotation resampling, so they differ only by summation
//! rounding.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::encoder::{AerialMap, BevMap};
use crate::fft::{good_size, Fft2};
use crate::geometry::{circular_mask, rotation_coords, PoseGrid, ResampleMap, ValidityMask};
use crate::math;
use crate::util::par_map;
use crate::{Error, Result, Tensor};

/// Which implementation evaluates the score volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Fft,
    BruteForce,
}

/// Unnormalized pose logits tied to their pose grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    values: Tensor,
    grid: Arc<PoseGrid>,
}

impl ScoreVolume {
    pub fn new(values: Tensor, grid: Arc<PoseGrid>) -> Result<Self> {
        let s = grid.spec();
        if values.shape() != [s.n_t, s.n_t, s.n_theta] {
            return Err(Error::dim(
                "score_volume",
                format!(
                    "values {:?} do not match grid [{}, {}, {}]",
                    values.shape(),
                    s.n_t,
                    s.n_t,
                    s.n_theta
                ),
            ));
        }
        values.ensure_finite("score_volume")?;
        Ok(Self { values, grid })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn grid(&self) -> &Arc<PoseGrid> {
        &self.grid
    }

    /// The same volume multiplied by `factor` (e.g. `1 / τ` to turn raw
    /// inner products into pose logits).
    pub fn scaled(&self, factor: f64) -> Self {
        let data = self
            .values
            .data()
            .iter()
            .map(|&v| (v as f64 * factor) as f32)
            .collect();
        Self {
            values: Tensor::new(self.values.shape().to_vec(), data).expect("same shape"),
            grid: self.grid.clone(),
        }
    }

    pub fn argmax(&self) -> usize {
        let d = self.values.data();
        (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
    }
}

/// Everything about a pose grid that matching needs, precomputed once:
/// per-heading rotation maps, translation offsets and the FFT plan.
#[derive(Debug, Clone)]
pub struct MatchContext {
    grid: Arc<PoseGrid>,
    mask: ValidityMask,
    rotations: Vec<ResampleMap>,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
    /// Distinct aerial rows read by any placement.
    needed_rows: Vec<usize>,
    fft: Fft2,
}

impl MatchContext {
    /// Validates the grid against the feature-map lattice and precomputes
    /// the matching machinery.
    ///
    /// Translation spacing must be a whole number of cells so every
    /// hypothesis lands on an integer offset of the aerial map.
    pub fn new(grid: PoseGrid) -> Result<Self> {
        let spec = *grid.spec();
        spec.check_fit_constraint()?;
        let (l_a, l_b) = (spec.l_a, spec.l_b);
        let stride = spec.spacing() / spec.pixel_size;
        let stride_int = math::round(stride);
        if stride_int < 1.0 || math::abs(stride - stride_int) > 1e-9 {
            return Err(Error::GridAlignment(format!(
                "translation spacing {} m is not a whole number of {} m cells",
                spec.spacing(),
                spec.pixel_size
            )));
        }
        let half = (l_a as f64 - l_b as f64) / 2.0;
        let centre = (spec.n_t as f64 - 1.0) / 2.0;
        let offset = |delta: f64| -> Result<usize> {
            let o = half + delta;
            if math::abs(o - math::round(o)) > 1e-9 || o < -1e-9 || o > (l_a - l_b) as f64 + 1e-9 {
                return Err(Error::GridAlignment(format!(
                    "offset {o} is not an integer cell inside [0, {}] (l_A = {l_a}, l_B = {l_b}, n_t = {})",
                    l_a - l_b,
                    spec.n_t
                )));
            }
            Ok(math::round(o) as usize)
        };
        let mut row_offsets = Vec::with_capacity(spec.n_t);
        let mut col_offsets = Vec::with_capacity(spec.n_t);
        for i in 0..spec.n_t {
            let step = (i as f64 - centre) * stride_int;
            // North (positive y) moves the footprint towards row 0.
            row_offsets.push(offset(-step)?);
            col_offsets.push(offset(step)?);
        }
        let mask = circular_mask(l_b);
        let rotations = (0..spec.n_theta)
            .map(|k| {
                ResampleMap::from_coords(&rotation_coords(l_b, spec.angle(k)), l_b, l_b, false)?
                    .restrict(&mask)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid: Arc::new(grid),
            mask,
            rotations,
            needed_rows: {
                let mut r = row_offsets.clone();
                r.sort_unstable();
                r.dedup();
                r
            },
            row_offsets,
            col_offsets,
            fft: Fft2::new(good_size(l_a)),
        })
    }

    pub fn grid(&self) -> &Arc<PoseGrid> {
        &self.grid
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    pub fn fft_size(&self) -> usize {
        self.fft.size()
    }

    /// Top-left aerial cell `(row, col)` of the BEV footprint for
    /// translation `(iy, ix)`.
    pub fn placement(&self, iy: usize, ix: usize) -> (usize, usize) {
        (self.row_offsets[iy], self.col_offsets[ix])
    }

    /// Checks map shapes against the grid and returns the channel count.
    pub fn check_maps(&self, bev: &Tensor, aerial: &Tensor) -> Result<usize> {
        let s = self.grid.spec();
        let (bh, bw, bc) = bev.hwc("score_volume")?;
        let (ah, aw, ac) = aerial.hwc("score_volume")?;
        if (bh, bw) != (s.l_b, s.l_b) || (ah, aw) != (s.l_a, s.l_a) || bc != ac {
            return Err(Error::dim(
                "score_volume",
                format!(
                    "BEV {:?} / aerial {:?} do not match l_B = {}, l_A = {}",
                    bev.shape(),
                    aerial.shape(),
                    s.l_b,
                    s.l_a
                ),
            ));
        }
        Ok(bc)
    }

    fn check_pixel_sizes(&self, bev: &BevMap, aerial: &AerialMap) -> Result<usize> {
        if math::abs(bev.pixel_size - aerial.pixel_size) > 1e-9 {
            return Err(Error::PixelSizeMismatch {
                bev: bev.pixel_size,
                aerial: aerial.pixel_size,
            });
        }
        let grid_px = self.grid.spec().pixel_size;
        if math::abs(aerial.pixel_size - grid_px) > 1e-9 {
            return Err(Error::PixelSizeMismatch {
                bev: grid_px,
                aerial: aerial.pixel_size,
            });
        }
        self.check_maps(&bev.tensor, &aerial.tensor)
    }

    /// BEV map rotated clockwise by heading `k`, masked, in `f64`.
    pub fn rotated_bev(&self, bev: &[f32], channels: usize, k: usize) -> Vec<f64> {
        self.rotations[k].apply_f64(bev, channels)
    }

    /// Per-channel spectra of an aerial map, reusable across queries.
    pub fn aerial_spectrum(&self, aerial: &[f32], channels: usize) -> AerialSpectrum {
        let l_a = self.grid.spec().l_a;
        let a: Vec<f64> = aerial.iter().map(|&v| v as f64).collect();
        let planes = self.fft.forward_real_channels(&a, l_a, l_a, channels);
        AerialSpectrum { channels, planes }
    }

    /// Spectra of the rotated BEV map for every heading.
    pub fn bev_spectrum(&self, bev: &[f32], channels: usize) -> BevSpectrum {
        let l_b = self.grid.spec().l_b;
        let rotations = (0..self.grid.spec().n_theta)
            .map(|k| {
                let r = self.rotated_bev(bev, channels, k);
                self.fft.forward_real_channels(&r, l_b, l_b, channels)
            })
            .collect();
        BevSpectrum {
            channels,
            rotations,
        }
    }

    /// Score volume from precomputed spectra.
    pub fn volume_from_spectra(&self, bev: &BevSpectrum, aerial: &AerialSpectrum) -> Vec<f64> {
        let s = *self.grid.spec();
        let n = self.fft.size();
        let mut out = vec![0.0; s.len()];
        let mut acc = vec![Complex64::new(0.0, 0.0); n * n];
        for (k, planes) in bev.rotations.iter().enumerate() {
            acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for (bp, ap) in planes.iter().zip(&aerial.planes) {
                for ((a, &b), &x) in acc.iter_mut().zip(bp).zip(ap) {
                    *a += b.conj() * x;
                }
            }
            self.fft.inverse_rows(&mut acc, &self.needed_rows);
            for iy in 0..s.n_t {
                for ix in 0..s.n_t {
                    let (r, c) = self.placement(iy, ix);
                    out[(iy * s.n_t + ix) * s.n_theta + k] = acc[r * n + c].re;
                }
            }
        }
        out
    }

    /// Scatters per-translation adjoints of heading `k` into an FFT plane
    /// and transforms it.
    fn upstream_spectrum(&self, upstream: &[f64], k: usize) -> Vec<Complex64> {
        let s = *self.grid.spec();
        let n = self.fft.size();
        let mut plane = vec![Complex64::new(0.0, 0.0); n * n];
        for iy in 0..s.n_t {
            for ix in 0..s.n_t {
                let (r, c) = self.placement(iy, ix);
                plane[r * n + c].re += upstream[(iy * s.n_t + ix) * s.n_theta + k];
            }
        }
        self.fft.forward(&mut plane);
        plane
    }

    /// Inverse-transforms a spectrum and crops the real `side × side` block
    /// into channel `ch` of `out`.
    fn crop_into(&self, mut spec: Vec<Complex64>, side: usize, channels: usize, ch: usize, out: &mut [f64]) {
        let n = self.fft.size();
        self.fft.inverse(&mut spec);
        for r in 0..side {
            for c in 0..side {
                out[(r * side + c) * channels + ch] += spec[r * n + c].re;
            }
        }
    }
}

/// Per-channel spectra of a zero-padded aerial map.
#[derive(Debug, Clone)]
pub struct AerialSpectrum {
    channels: usize,
    planes: Vec<Vec<Complex64>>,
}

impl AerialSpectrum {
    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Spectra of a BEV map under every heading of the grid.
#[derive(Debug, Clone)]
pub struct BevSpectrum {
    channels: usize,
    rotations: Vec<Vec<Vec<Complex64>>>,
}

impl BevSpectrum {
    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Raw score volume, flattened in `(ty, tx, θ)` order.
pub fn volume_raw(bev: &[f32], aerial: &[f32], channels: usize, ctx: &MatchContext, backend: Backend) -> Vec<f64> {
    match backend {
        Backend::BruteForce => bruteforce_raw(bev, aerial, channels, ctx),
        Backend::Fft => {
            let a = ctx.aerial_spectrum(aerial, channels);
            let b = ctx.bev_spectrum(bev, channels);
            ctx.volume_from_spectra(&b, &a)
        }
    }
}

fn bruteforce_raw(bev: &[f32], aerial: &[f32], channels: usize, ctx: &MatchContext) -> Vec<f64> {
    let s = *ctx.grid.spec();
    let (l_a, l_b) = (s.l_a, s.l_b);
    let mut out = vec![0.0; s.len()];
    for k in 0..s.n_theta {
        let rot = ctx.rotated_bev(bev, channels, k);
        for iy in 0..s.n_t {
            for ix in 0..s.n_t {
                let (r0, c0) = ctx.placement(iy, ix);
                let mut acc = 0.0;
                for r in 0..l_b {
                    let brow = &rot[r * l_b * channels..][..l_b * channels];
                    let arow = &aerial[((r0 + r) * l_a + c0) * channels..][..l_b * channels];
                    for (&b, &a) in brow.iter().zip(arow) {
                        acc += b * a as f64;
                    }
                }
                out[(iy * s.n_t + ix) * s.n_theta + k] = acc;
            }
        }
    }
    out
}

/// Adjoints of the raw score volume with respect to the BEV and aerial maps.
pub fn volume_backward_raw(
    upstream: &[f64],
    bev: &[f32],
    aerial: &[f32],
    channels: usize,
    ctx: &MatchContext,
    backend: Backend,
) -> (Vec<f64>, Vec<f64>) {
    match backend {
        Backend::BruteForce => bruteforce_backward(upstream, bev, aerial, channels, ctx),
        Backend::Fft => {
            let a = ctx.aerial_spectrum(aerial, channels);
            let b = ctx.bev_spectrum(bev, channels);
            let (db, da_spec) = fft_backward_one(upstream, &b, &a, ctx);
            let s = ctx.grid.spec();
            let mut da = vec![0.0; s.l_a * s.l_a * channels];
            for (ch, plane) in da_spec.into_iter().enumerate() {
                ctx.crop_into(plane, s.l_a, channels, ch, &mut da);
            }
            (rotations_transpose(ctx, db, channels), da)
        }
    }
}

fn bruteforce_backward(
    upstream: &[f64],
    bev: &[f32],
    aerial: &[f32],
    channels: usize,
    ctx: &MatchContext,
) -> (Vec<f64>, Vec<f64>) {
    let s = *ctx.grid.spec();
    let (l_a, l_b) = (s.l_a, s.l_b);
    let mut d_aerial = vec![0.0; l_a * l_a * channels];
    let mut d_bev = vec![0.0; l_b * l_b * channels];
    for k in 0..s.n_theta {
        let rot = ctx.rotated_bev(bev, channels, k);
        let mut d_rot = vec![0.0; rot.len()];
        for iy in 0..s.n_t {
            for ix in 0..s.n_t {
                let g = upstream[(iy * s.n_t + ix) * s.n_theta + k];
                if g == 0.0 {
                    continue;
                }
                let (r0, c0) = ctx.placement(iy, ix);
                for r in 0..l_b {
                    let base_a = ((r0 + r) * l_a + c0) * channels;
                    let base_b = r * l_b * channels;
                    for t in 0..l_b * channels {
                        d_aerial[base_a + t] += g * rot[base_b + t];
                        d_rot[base_b + t] += g * aerial[base_a + t] as f64;
                    }
                }
            }
        }
        ctx.rotations[k].transpose_accumulate(&d_rot, channels, &mut d_bev);
    }
    (d_bev, d_aerial)
}

/// Frequency-domain adjoints for one pair: per-heading rotated-BEV
/// gradients (spatial, `[k][l_b·l_b·c]`) and aerial gradient spectra per
/// channel.
fn fft_backward_one(
    upstream: &[f64],
    bev: &BevSpectrum,
    aerial: &AerialSpectrum,
    ctx: &MatchContext,
) -> (Vec<Vec<f64>>, Vec<Vec<Complex64>>) {
    let s = *ctx.grid.spec();
    let n = ctx.fft.size();
    let c = aerial.channels;
    let mut da_spec = vec![vec![Complex64::new(0.0, 0.0); n * n]; c];
    let mut d_rot = Vec::with_capacity(s.n_theta);
    for k in 0..s.n_theta {
        let g = ctx.upstream_spectrum(upstream, k);
        let mut dr = vec![0.0; s.l_b * s.l_b * c];
        for ch in 0..c {
            let bp = &bev.rotations[k][ch];
            let ap = &aerial.planes[ch];
            for ((d, &gv), &b) in da_spec[ch].iter_mut().zip(&g).zip(bp) {
                *d += gv * b;
            }
            let spec: Vec<Complex64> = g.iter().zip(ap).map(|(&gv, &a)| gv.conj() * a).collect();
            ctx.crop_into(spec, s.l_b, c, ch, &mut dr);
        }
        d_rot.push(dr);
    }
    (d_rot, da_spec)
}

fn rotations_transpose(ctx: &MatchContext, d_rot: Vec<Vec<f64>>, channels: usize) -> Vec<f64> {
    let l_b = ctx.grid.spec().l_b;
    let mut d_bev = vec![0.0; l_b * l_b * channels];
    for (k, dr) in d_rot.iter().enumerate() {
        ctx.rotations[k].transpose_accumulate(dr, channels, &mut d_bev);
    }
    d_bev
}

/// Reference backend: explicit sum over every cell of every hypothesis.
pub fn score_volume_bruteforce(bev: &BevMap, aerial: &AerialMap, ctx: &MatchContext) -> Result<ScoreVolume> {
    score_volume(bev, aerial, ctx, Backend::BruteForce)
}

/// Fourier-domain backend.
pub fn score_volume_fft(bev: &BevMap, aerial: &AerialMap, ctx: &MatchContext) -> Result<ScoreVolume> {
    score_volume(bev, aerial, ctx, Backend::Fft)
}

pub fn score_volume(bev: &BevMap, aerial: &AerialMap, ctx: &MatchContext, backend: Backend) -> Result<ScoreVolume> {
    let c = ctx.check_pixel_sizes(bev, aerial)?;
    let raw = volume_raw(bev.tensor.data(), aerial.tensor.data(), c, ctx, backend);
    let s = ctx.grid.spec();
    let values = Tensor::new(
        [s.n_t, s.n_t, s.n_theta],
        raw.into_iter().map(|v| v as f32).collect(),
    )?;
    ScoreVolume::new(values, ctx.grid.clone())
}

/// Gradients of `Σ upstream ⊙ S` with respect to the BEV and aerial maps
/// (brute-force reference). Masked BEV cells receive zero.
pub fn score_volume_backward(
    upstream: &Tensor,
    bev: &BevMap,
    aerial: &AerialMap,
    ctx: &MatchContext,
) -> Result<(Tensor, Tensor)> {
    let c = ctx.check_pixel_sizes(bev, aerial)?;
    let s = ctx.grid.spec();
    if upstream.shape() != [s.n_t, s.n_t, s.n_theta] {
        return Err(Error::dim("score_volume_backward", "upstream must match the score volume"));
    }
    let up: Vec<f64> = upstream.data().iter().map(|&v| v as f64).collect();
    let (db, da) = bruteforce_backward(&up, bev.tensor.data(), aerial.tensor.data(), c, ctx);
    let to_tensor = |shape: [usize; 3], v: Vec<f64>| Tensor::new(shape, v.into_iter().map(|x| x as f32).collect());
    Ok((
        to_tensor([s.l_b, s.l_b, c], db)?,
        to_tensor([s.l_a, s.l_a, c], da)?,
    ))
}

/// Output of [`pairwise_lse`].
#[derive(Debug, Clone)]
pub struct PairwiseLse {
    /// Row-major `[n, n]`: `τ · lse(S_ij / τ)`.
    pub scores: Vec<f64>,
    /// `softmax(S_ij / τ)` per pair, row-major over pairs.
    pub posteriors: Vec<Vec<f64>>,
}

/// Temperature-scaled retrieval logits for every (BEV `i`, aerial `j`) pair.
pub fn pairwise_lse(
    bevs: &[&[f32]],
    aerials: &[&[f32]],
    channels: usize,
    ctx: &MatchContext,
    temperature: f64,
) -> Result<PairwiseLse> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    let n = bevs.len();
    let a_spec: Vec<AerialSpectrum> = par_map(aerials.len(), |j| ctx.aerial_spectrum(aerials[j], channels));
    let rows: Vec<Vec<(f64, Vec<f64>)>> = par_map(n, |i| {
        let b = ctx.bev_spectrum(bevs[i], channels);
        a_spec
            .iter()
            .map(|a| {
                let vol = ctx.volume_from_spectra(&b, a);
                softmax_lse(&vol, temperature)
            })
            .collect()
    });
    let mut scores = Vec::with_capacity(n * n);
    let mut posteriors = Vec::with_capacity(n * n);
    for row in rows {
        for (s, p) in row {
            scores.push(s);
            posteriors.push(p);
        }
    }
    Ok(PairwiseLse { scores, posteriors })
}

/// `(τ · lse(v / τ), softmax(v / τ))`.
pub(crate) fn softmax_lse(values: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let lse = math::logsumexp(values.iter().map(|&v| v / temperature));
    let p = values.iter().map(|&v| math::exp(v / temperature - lse)).collect();
    (temperature * lse, p)
}

/// Adjoint of [`pairwise_lse`] given `∂L/∂scores`.
pub fn pairwise_lse_backward(
    upstream: &[f64],
    posteriors: &[Vec<f64>],
    bevs: &[&[f32]],
    aerials: &[&[f32]],
    channels: usize,
    ctx: &MatchContext,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = bevs.len();
    let s = *ctx.grid.spec();
    let a_spec: Vec<AerialSpectrum> = par_map(n, |j| ctx.aerial_spectrum(aerials[j], channels));
    // Per BEV row: its gradient and its contribution to every aerial
    // spectrum; contributions are summed in row order afterwards.
    let nf = ctx.fft.size();
    let zero = Complex64::new(0.0, 0.0);
    let per_row: Vec<(Vec<f64>, Vec<Vec<Vec<Complex64>>>)> = par_map(n, |i| {
        let b = ctx.bev_spectrum(bevs[i], channels);
        let ups: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let g = upstream[i * n + j];
                posteriors[i * n + j].iter().map(|&p| g * p).collect()
            })
            .collect();
        let mut da = vec![vec![vec![zero; nf * nf]; channels]; n];
        let mut d_rot = Vec::with_capacity(s.n_theta);
        for k in 0..s.n_theta {
            // Sum over aerials in the frequency domain, then one inverse
            // transform per channel.
            let mut dr_spec = vec![vec![zero; nf * nf]; channels];
            for (j, a) in a_spec.iter().enumerate() {
                let g = ctx.upstream_spectrum(&ups[j], k);
                for ch in 0..channels {
                    let (bp, ap) = (&b.rotations[k][ch], &a.planes[ch]);
                    for (((d, r), &gv), (&bv, &av)) in
                        da[j][ch].iter_mut().zip(dr_spec[ch].iter_mut()).zip(&g).zip(bp.iter().zip(ap))
                    {
                        *d += gv * bv;
                        *r += gv.conj() * av;
                    }
                }
            }
            let mut dr = vec![0.0; s.l_b * s.l_b * channels];
            for (ch, spec) in dr_spec.into_iter().enumerate() {
                ctx.crop_into(spec, s.l_b, channels, ch, &mut dr);
            }
            d_rot.push(dr);
        }
        (rotations_transpose(ctx, d_rot, channels), da)
    });
    let mut d_bevs = Vec::with_capacity(n);
    let mut da_total: Vec<Vec<Vec<Complex64>>> = Vec::new();
    for (db, da) in per_row {
        d_bevs.push(db);
        if da_total.is_empty() {
            da_total = da;
        } else {
            for (tot, part) in da_total.iter_mut().zip(da) {
                for (tp, pp) in tot.iter_mut().zip(part) {
                    tp.iter_mut().zip(pp).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let d_aerials = par_map(n, |j| {
        let mut out = vec![0.0; s.l_a * s.l_a * channels];
        for (ch, plane) in da_total[j].iter().enumerate() {
            ctx.crop_into(plane.clone(), s.l_a, channels, ch, &mut out);
        }
        out
    });
    (d_bevs, d_aerials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_pose_grid, GridSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx(l_a: usize, l_b: usize, n_t: usize, n_theta: usize) -> MatchContext {
        let spec = GridSpec {
            n_t,
            n_theta,
            search_extent: n_t as f64,
            pixel_size: 1.0,
            l_a,
            l_b,
        };
        MatchContext::new(build_pose_grid(spec).unwrap()).unwrap()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_cell_inner_product() {
        let c = ctx(1, 1, 1, 1);
        for backend in [Backend::BruteForce, Backend::Fft] {
            let v = volume_raw(&[3.0], &[-2.5], 1, &c, backend);
            assert!((v[0] + 7.5).abs() < 1e-12);
        }
    }

    #[test]
    fn offsets_are_centred() {
        let c = ctx(48, 19, 28, 1);
        assert_eq!(c.placement(0, 0), (28, 1));
        assert_eq!(c.placement(27, 27), (1, 28));
        let c = ctx(6, 3, 4, 1);
        assert_eq!(c.placement(0, 3), (3, 3));
    }

    #[test]
    fn misaligned_grid_rejected() {
        let spec = GridSpec {
            n_t: 4,
            n_theta: 1,
            search_extent: 6.0,
            pixel_size: 1.0,
            l_a: 12,
            l_b: 5,
        };
        assert!(matches!(
            MatchContext::new(build_pose_grid(spec).unwrap()),
            Err(Error::GridAlignment(_))
        ));
    }

    #[test]
    fn backends_agree_on_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(l_a, l_b, n_t, n_theta, c) in &[(6, 3, 4, 2, 2), (9, 5, 5, 3, 1), (16, 7, 10, 8, 3)] {
            let cx = ctx(l_a, l_b, n_t, n_theta);
            let b = random(l_b * l_b * c, &mut rng);
            let a = random(l_a * l_a * c, &mut rng);
            let bf = volume_raw(&b, &a, c, &cx, Backend::BruteForce);
            let ff = volume_raw(&b, &a, c, &cx, Backend::Fft);
            let scale = bf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in bf.iter().zip(&ff) {
                assert!((x - y).abs() <= 1e-9 * scale.max(1.0));
            }
            let up = random(bf.len(), &mut rng).into_iter().map(|v| v as f64).collect::<Vec<_>>();
            let (db1, da1) = volume_backward_raw(&up, &b, &a, c, &cx, Backend::BruteForce);
            let (db2, da2) = volume_backward_raw(&up, &b, &a, c, &cx, Backend::Fft);
            for (x, y) in db1.iter().zip(&db2).chain(da1.iter().zip(&da2)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pairwise_matches_individual_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cx = ctx(6, 3, 4, 2);
        let c = 2;
        let bevs: Vec<Vec<f32>> = (0..3).map(|_| random(18, &mut rng)).collect();
        let aers: Vec<Vec<f32>> = (0..3).map(|_| random(72, &mut rng)).collect();
        let br: Vec<&[f32]> = bevs.iter().map(|v| v.as_slice()).collect();
        let ar: Vec<&[f32]> = aers.iter().map(|v| v.as_slice()).collect();
        let tau = 0.1;
        let out = pairwise_lse(&br, &ar, c, &cx, tau).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v = volume_raw(br[i], ar[j], c, &cx, Backend::BruteForce);
                let want = tau * math::logsumexp(v.iter().map(|x| x / tau));
                assert!((out.scores[i * 3 + j] - want).abs() < 1e-9);
            }
        }
        assert!(pairwise_lse(&br, &ar, c, &cx, 0.0).is_err());
    }
}
