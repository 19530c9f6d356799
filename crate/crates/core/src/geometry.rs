//! SE(2) poses, pose-hypothesis grids, resampling fields and validity masks.
//!
//! Conventions used throughout the crate:
//! - Map cell `(row, col)`; rows grow southwards, columns eastwards. The
//!   continuous centre of a `side`-cell map is at `(side - 1) / 2`.
//! - Metric offsets are `(x, y) = (east, north)`.
//! - Headings are measured clockwise from north and live in `[0, 2π)`.
//!   Panorama column 0 looks along the heading and later columns turn
//!   clockwise.
//! - A camera-local BEV map has the viewing direction pointing "up"
//!   (towards row 0). Placing it on a north-up aerial map at heading `θ`
//!   rotates it clockwise by `θ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{self, TAU};
use crate::{Error, Result, Tensor};

/// Camera pose relative to the centre of an aerial image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    /// Metres east of the aerial-image centre.
    pub x: f64,
    /// Metres north of the aerial-image centre.
    pub y: f64,
    /// Heading in radians, clockwise from north, in `[0, 2π)`.
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: math::wrap_angle(theta),
        }
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }
}

/// Rotates an `(east, north)` vector clockwise by `theta`.
#[inline]
pub fn rotate_cw(east: f64, north: f64, theta: f64) -> (f64, f64) {
    let (s, c) = (math::sin(theta), math::cos(theta));
    (east * c + north * s, -east * s + north * c)
}

/// Geometry of the pose search: translations, orientations and map sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Translations per axis.
    pub n_t: usize,
    /// Orientations covering 360°.
    pub n_theta: usize,
    /// Side of the square search region in metres.
    pub search_extent: f64,
    /// Metres per feature-map cell.
    pub pixel_size: f64,
    /// Aerial map side in cells.
    pub l_a: usize,
    /// BEV map side in cells.
    pub l_b: usize,
}

impl GridSpec {
    /// Desk-scale default: `l_A = 48`, `l_B = 19`, `n_t = 28`, `n_θ = 32`,
    /// one translation per 1 m cell.
    pub fn desk_default() -> Self {
        Self {
            n_t: 28,
            n_theta: 32,
            search_extent: 28.0,
            pixel_size: 1.0,
            l_a: 48,
            l_b: 19,
        }
    }

    /// Distance between neighbouring translation hypotheses.
    pub fn spacing(&self) -> f64 {
        self.search_extent / self.n_t as f64
    }

    /// Metric coordinate of translation index `i` along one axis.
    pub fn translation(&self, i: usize) -> f64 {
        (i as f64 - (self.n_t as f64 - 1.0) / 2.0) * self.spacing()
    }

    pub fn angle(&self, k: usize) -> f64 {
        TAU * k as f64 / self.n_theta as f64
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_t * self.n_theta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks `n_t ≤ l_A − l_B + 1` together with the basic counts.
    pub fn check_fit_constraint(&self) -> Result<()> {
        check_fit_constraint(self)
    }
}

/// Rejects grids whose BEV footprint would leave the aerial map at the
/// outermost translation.
pub fn check_fit_constraint(spec: &GridSpec) -> Result<()> {
    if spec.n_t == 0 || spec.n_theta == 0 {
        return Err(Error::InvalidConfig(format!(
            "n_t and n_theta must be at least 1 (got {} and {})",
            spec.n_t, spec.n_theta
        )));
    }
    if !(spec.pixel_size > 0.0) || !spec.pixel_size.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "pixel_size must be positive, got {}",
            spec.pixel_size
        )));
    }
    if !(spec.search_extent > 0.0) || !spec.search_extent.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "search_extent must be positive, got {}",
            spec.search_extent
        )));
    }
    let limit = spec.l_a as i64 - spec.l_b as i64 + 1;
    if spec.n_t as i64 > limit {
        return Err(Error::FitConstraint {
            n_t: spec.n_t,
            l_a: spec.l_a,
            l_b: spec.l_b,
            limit,
        });
    }
    Ok(())
}

/// Regular grid of pose hypotheses, flattened in `(ty, tx, θ)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrid {
    spec: GridSpec,
    poses: Vec<Pose2>,
}

/// Builds the `n_t × n_t × n_θ` grid of cell-centred translations and
/// uniformly spaced headings starting at 0.
pub fn build_pose_grid(spec: GridSpec) -> Result<PoseGrid> {
    check_fit_constraint(&spec)?;
    let mut poses = Vec::with_capacity(spec.len());
    for iy in 0..spec.n_t {
        for ix in 0..spec.n_t {
            for k in 0..spec.n_theta {
                poses.push(Pose2 {
                    x: spec.translation(ix),
                    y: spec.translation(iy),
                    theta: spec.angle(k),
                });
            }
        }
    }
    Ok(PoseGrid { spec, poses })
}

impl PoseGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn poses(&self) -> &[Pose2] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn index(&self, iy: usize, ix: usize, k: usize) -> usize {
        (iy * self.spec.n_t + ix) * self.spec.n_theta + k
    }

    /// Splits a flat index into `(iy, ix, k)`.
    pub fn split_index(&self, index: usize) -> (usize, usize, usize) {
        let k = index % self.spec.n_theta;
        let rest = index / self.spec.n_theta;
        (rest / self.spec.n_t, rest % self.spec.n_t, k)
    }

    pub fn index_to_pose(&self, index: usize) -> Pose2 {
        self.poses[index]
    }

    /// Index of the hypothesis nearest to `pose` (translations clamped to
    /// the grid, heading rounded on the circle).
    pub fn pose_to_index(&self, pose: &Pose2) -> usize {
        let s = &self.spec;
        let half = (s.n_t as f64 - 1.0) / 2.0;
        let to_cell = |v: f64| -> usize {
            let i = math::round(v / s.spacing() + half);
            i.clamp(0.0, (s.n_t - 1) as f64) as usize
        };
        let k = math::round(math::wrap_angle(pose.theta) / TAU * s.n_theta as f64) as usize
            % s.n_theta;
        self.index(to_cell(pose.y), to_cell(pose.x), k)
    }
}

/// Boolean disc of cells within `side / 2` of the map centre.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    side: usize,
    values: Vec<bool>,
}

impl ValidityMask {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.values[row * self.side + col]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.count() as f64 / self.values.len() as f64
    }
}

/// Cells whose centre lies within `side / 2` cells of the map centre.
pub fn circular_mask(side: usize) -> ValidityMask {
    let m = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 2.0;
    let mut values = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let (dr, dc) = (r as f64 - m, c as f64 - m);
            values.push(math::sqrt(dr * dr + dc * dc) <= radius + 1e-9);
        }
    }
    ValidityMask { side, values }
}

fn snap(v: f64) -> f64 {
    let r = math::round(v);
    if math::abs(v - r) < 1e-6 {
        r
    } else {
        v
    }
}

/// Source coordinates that rotate a `side × side` map clockwise by `theta`
/// about its centre.
///
/// Returns a `[side, side, 2]` field of `(row, col)` source positions for
/// [`ResampleMap::from_coords`]. Coordinates within 1e-6 of an integer are
/// snapped so right-angle rotations resample losslessly.
pub fn rotation_coords(side: usize, theta: f64) -> Tensor {
    let m = (side as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(side * side * 2);
    for r in 0..side {
        for c in 0..side {
            let (e, n) = (c as f64 - m, m - r as f64);
            let (se, sn) = rotate_cw(e, n, -theta);
            data.push(snap(m - sn) as f32);
            data.push(snap(m + se) as f32);
        }
    }
    Tensor::new([side, side, 2], data).expect("shape matches")
}

/// Depth of polar bin `k` in cells: bins are linear in `(0, side / 2]`.
pub fn polar_bin_depth(k: usize, depth_bins: usize, side: usize) -> f64 {
    (k as f64 + 1.0) * (side as f64 / 2.0) / depth_bins as f64
}

/// Maps every cell of a cartesian `side × side` BEV map to continuous
/// `(depth bin, angle bin)` coordinates of a `[d, w]` polar map.
///
/// Angle bin `j` looks along bearing `j · 360° / w` clockwise from the map's
/// "up" direction; the angle axis wraps. Depth bin `k` sits at
/// [`polar_bin_depth`]; cells closer than the first bin or beyond the last
/// fall outside the polar map and resample as invalid.
pub fn polar_coords(depth_bins: usize, angle_bins: usize, side: usize) -> Result<Tensor> {
    if depth_bins < 2 || angle_bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "polar grid needs at least 2 depth and 2 angle bins, got {depth_bins} x {angle_bins}"
        )));
    }
    let m = (side as f64 - 1.0) / 2.0;
    let step = (side as f64 / 2.0) / depth_bins as f64;
    let mut data = Vec::with_capacity(side * side * 2);
    for r in 0..side {
        for c in 0..side {
            let (e, n) = (c as f64 - m, m - r as f64);
            let depth = math::sqrt(e * e + n * n);
            let bearing = math::wrap_angle(math::atan2(e, n));
            data.push(snap(depth / step - 1.0) as f32);
            data.push(snap(bearing / TAU * angle_bins as f64) as f32);
        }
    }
    Tensor::new([side, side, 2], data)
}

/// Coordinates into an `l_a`-cell aerial map of the camera-local BEV
/// footprint (`l_b` cells) of a camera at `pose`.
///
/// Resampling an aerial map with these coordinates gives the BEV map that a
/// perfect panorama encoder would produce at `pose`.
pub fn footprint_coords(pose: &Pose2, l_b: usize, l_a: usize, pixel_size: f64) -> Tensor {
    let mb = (l_b as f64 - 1.0) / 2.0;
    let ma = (l_a as f64 - 1.0) / 2.0;
    let (cx, cy) = (pose.x / pixel_size, pose.y / pixel_size);
    let mut data = Vec::with_capacity(l_b * l_b * 2);
    for r in 0..l_b {
        for c in 0..l_b {
            let (e, n) = (c as f64 - mb, mb - r as f64);
            let (we, wn) = rotate_cw(e, n, pose.theta);
            data.push(snap(ma - (cy + wn)) as f32);
            data.push(snap(ma + cx + we) as f32);
        }
    }
    Tensor::new([l_b, l_b, 2], data).expect("shape matches")
}

/// Precomputed bilinear resampling: each output cell is a weighted sum of up
/// to four input cells, or invalid.
///
/// A sample is invalid when any corner with non-zero weight falls outside
/// the input (columns may instead wrap). Invalid samples produce 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMap {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    taps: Vec<[(u32, f32); 4]>,
    valid: Vec<bool>,
}

impl ResampleMap {
    /// Builds a map from a `[h', w', 2]` field of `(row, col)` coordinates.
    pub fn from_coords(coords: &Tensor, in_h: usize, in_w: usize, wrap_cols: bool) -> Result<Self> {
        let (oh, ow, two) = coords.hwc("bilinear_sample")?;
        if two != 2 {
            return Err(Error::dim(
                "bilinear_sample",
                format!("coordinate field needs 2 channels, got {two}"),
            ));
        }
        let mut taps = Vec::with_capacity(oh * ow);
        let mut valid = Vec::with_capacity(oh * ow);
        for p in coords.data().chunks_exact(2) {
            match bilinear_taps(p[0] as f64, p[1] as f64, in_h, in_w, wrap_cols) {
                Some(t) => {
                    taps.push(t);
                    valid.push(true);
                }
                None => {
                    taps.push([(0, 0.0); 4]);
                    valid.push(false);
                }
            }
        }
        Ok(Self {
            in_hw: (in_h, in_w),
            out_hw: (oh, ow),
            taps,
            valid,
        })
    }

    /// Invalidates every output cell where `mask` is false.
    pub fn restrict(mut self, mask: &ValidityMask) -> Result<Self> {
        if mask.side() * mask.side() != self.valid.len() {
            return Err(Error::dim("resample_mask", "mask size differs from output"));
        }
        for (i, &m) in mask.values().iter().enumerate() {
            if !m {
                self.valid[i] = false;
                self.taps[i] = [(0, 0.0); 4];
            }
        }
        Ok(self)
    }

    pub fn in_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Validity as a `[h', w']` tensor of 0/1.
    pub fn validity_tensor(&self) -> Tensor {
        let (h, w) = self.out_hw;
        Tensor::new([h, w], self.valid.iter().map(|&v| v as u8 as f32).collect())
            .expect("shape matches")
    }

    /// Resamples `input` (`channels` interleaved per cell) in f64.
    pub fn apply_f64(&self, input: &[f32], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.valid.len() * channels];
        for (o, (taps, &ok)) in self.taps.iter().zip(&self.valid).enumerate() {
            if !ok {
                continue;
            }
            let dst = &mut out[o * channels..(o + 1) * channels];
            for &(src, w) in taps {
                if w == 0.0 {
                    continue;
                }
                let s = src as usize * channels;
                for (d, &v) in dst.iter_mut().zip(&input[s..s + channels]) {
                    *d += w as f64 * v as f64;
                }
            }
        }
        out
    }

    pub fn apply(&self, input: &[f32], channels: usize) -> Vec<f32> {
        self.apply_f64(input, channels)
            .into_iter()
            .map(|v| v as f32)
            .collect()
    }

    /// Adjoint of [`apply`](Self::apply): scatters output gradients back to
    /// the input cells.
    pub fn transpose_accumulate(&self, grad_out: &[f64], channels: usize, grad_in: &mut [f64]) {
        for (o, (taps, &ok)) in self.taps.iter().zip(&self.valid).enumerate() {
            if !ok {
                continue;
            }
            let g = &grad_out[o * channels..(o + 1) * channels];
            for &(src, w) in taps {
                if w == 0.0 {
                    continue;
                }
                let s = src as usize * channels;
                for (d, &v) in grad_in[s..s + channels].iter_mut().zip(g) {
                    *d += w as f64 * v;
                }
            }
        }
    }
}

fn bilinear_taps(
    row: f64,
    col: f64,
    h: usize,
    w: usize,
    wrap_cols: bool,
) -> Option<[(u32, f32); 4]> {
    if !row.is_finite() || !col.is_finite() {
        return None;
    }
    let r0 = math::floor(row);
    let c0 = math::floor(col);
    let fr = row - r0;
    let fc = col - c0;
    let rows = [(r0 as i64, 1.0 - fr), (r0 as i64 + 1, fr)];
    let cols = [(c0 as i64, 1.0 - fc), (c0 as i64 + 1, fc)];
    let mut taps = [(0u32, 0.0f32); 4];
    let mut n = 0;
    for &(r, wr) in &rows {
        for &(c, wc) in &cols {
            let wgt = wr * wc;
            if wgt == 0.0 {
                n += 1;
                continue;
            }
            if r < 0 || r >= h as i64 {
                return None;
            }
            let c = if wrap_cols {
                c.rem_euclid(w as i64)
            } else if c < 0 || c >= w as i64 {
                return None;
            } else {
                c
            };
            taps[n] = ((r as usize * w + c as usize) as u32, wgt as f32);
            n += 1;
        }
    }
    Some(taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_t: usize, n_theta: usize, extent: f64, l_a: usize, l_b: usize) -> GridSpec {
        GridSpec {
            n_t,
            n_theta,
            search_extent: extent,
            pixel_size: 1.0,
            l_a,
            l_b,
        }
    }

    #[test]
    fn fit_constraint_examples() {
        assert!(check_fit_constraint(&spec(28, 32, 28.0, 48, 19)).is_ok());
        assert!(check_fit_constraint(&spec(1, 1, 1.0, 48, 48)).is_ok());
        assert!(check_fit_constraint(&spec(30, 1, 30.0, 48, 19)).is_ok());
        let err = check_fit_constraint(&spec(31, 1, 31.0, 48, 19)).unwrap_err();
        assert_eq!(
            err,
            Error::FitConstraint {
                n_t: 31,
                l_a: 48,
                l_b: 19,
                limit: 30
            }
        );
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("31") && msg.contains("48") && msg.contains("19"));
    }

    #[test]
    fn fit_constraint_rejects_bev_larger_than_aerial() {
        assert!(check_fit_constraint(&spec(1, 1, 1.0, 10, 12)).is_err());
    }

    #[test]
    fn single_pose_grid() {
        let g = build_pose_grid(spec(1, 1, 1.0, 5, 5)).unwrap();
        assert_eq!(g.poses(), &[Pose2::new(0.0, 0.0, 0.0)]);
    }

    #[test]
    fn right_angle_headings() {
        let g = build_pose_grid(spec(1, 4, 1.0, 5, 5)).unwrap();
        let deg: Vec<f64> = g.poses().iter().map(|p| p.theta_deg()).collect();
        for (d, want) in deg.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            assert!((d - want).abs() < 1e-9);
        }
    }

    #[test]
    fn two_cell_translations() {
        let g = build_pose_grid(spec(2, 1, 10.0, 5, 3)).unwrap();
        let xs: Vec<(f64, f64)> = g.poses().iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(xs, vec![(-2.5, -2.5), (2.5, -2.5), (-2.5, 2.5), (2.5, 2.5)]);
    }

    #[test]
    fn grid_round_trip_and_symmetry() {
        let g = build_pose_grid(spec(5, 6, 5.0, 9, 5)).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.pose_to_index(&g.index_to_pose(i)), i);
            let (iy, ix, k) = g.split_index(i);
            assert_eq!(g.index(iy, ix, k), i);
        }
        for p in g.poses() {
            assert!(g
                .poses()
                .iter()
                .any(|q| (q.x + p.x).abs() < 1e-12 && (q.y + p.y).abs() < 1e-12));
        }
    }

    #[test]
    fn mask_examples() {
        assert_eq!(circular_mask(1).count(), 1);
        let m = circular_mask(19);
        assert!(m.is_valid(9, 9));
        for (r, c) in [(0, 0), (0, 18), (18, 0), (18, 18)] {
            assert!(!m.is_valid(r, c));
        }
        assert!(m.is_valid(0, 9));
        let frac = circular_mask(48).valid_fraction();
        assert!((frac - PI_4).abs() < 0.05, "{frac}");
    }

    const PI_4: f64 = core::f64::consts::FRAC_PI_4;

    #[test]
    fn identity_rotation_coords() {
        let c = rotation_coords(4, 0.0);
        for r in 0..4 {
            for col in 0..4 {
                let i = (r * 4 + col) * 2;
                assert_eq!(c.data()[i], r as f32);
                assert_eq!(c.data()[i + 1], col as f32);
            }
        }
    }

    #[test]
    fn quarter_turn_coords_are_exact() {
        let idx = Tensor::from_fn([3, 3, 1], |i| i as f32);
        let map = ResampleMap::from_coords(&rotation_coords(3, math::PI / 2.0), 3, 3, false).unwrap();
        let out = map.apply(idx.data(), 1);
        let want = crate::tensor::rotate_quarter_turns(&idx, 1).unwrap();
        assert_eq!(out, want.data());
    }

    #[test]
    fn rotation_coords_compose_to_identity() {
        let side = 19;
        for theta in [0.3, 1.1, 2.0, 4.5] {
            // Source of each cell under -theta, pushed through +theta
            // analytically, lands back on the cell.
            let back = rotation_coords(side, -theta);
            let m = (side as f64 - 1.0) / 2.0;
            for r in 0..side {
                for c in 0..side {
                    let i = (r * side + c) * 2;
                    let (br, bc) = (back.data()[i] as f64, back.data()[i + 1] as f64);
                    let (e, n) = (bc - m, m - br);
                    let (se, sn) = rotate_cw(e, n, -theta);
                    assert!((m - sn - r as f64).abs() < 1e-5);
                    assert!((m + se - c as f64).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn polar_axis_conventions() {
        let side = 19;
        let d = 19;
        let w = 32;
        let pc = polar_coords(d, w, side).unwrap();
        let at = |r: usize, c: usize| {
            let i = (r * side + c) * 2;
            (pc.data()[i] as f64, pc.data()[i + 1] as f64)
        };
        // Centre: depth coordinate below the first bin.
        assert!(at(9, 9).0 < 0.0);
        // Due north, 4 cells away: angle bin 0, depth bin 7 of 19.
        let (dep, ang) = at(5, 9);
        assert_eq!(ang, 0.0);
        assert!((dep - (4.0 / (9.5 / 19.0) - 1.0)).abs() < 1e-5);
        // Due east is a quarter turn clockwise.
        assert!((at(9, 13).1 - w as f64 / 4.0).abs() < 1e-5);
        // Due west is three quarters.
        assert!((at(9, 5).1 - 3.0 * w as f64 / 4.0).abs() < 1e-5);
    }

    #[test]
    fn polar_valid_fraction_matches_disc() {
        let side = 48;
        let pc = polar_coords(48, 64, side).unwrap();
        let map = ResampleMap::from_coords(&pc, 48, 64, true).unwrap();
        let frac = map.validity().iter().filter(|&&v| v).count() as f64 / (side * side) as f64;
        assert!((frac - PI_4).abs() < 0.05, "{frac}");
    }

    #[test]
    fn polar_needs_two_bins() {
        assert!(polar_coords(1, 8, 9).is_err());
        assert!(polar_coords(8, 1, 9).is_err());
    }

    #[test]
    fn bilinear_midpoint_and_bounds() {
        let coords = Tensor::new([1, 3, 2], vec![0.5, 0.0, 0.0, 0.0, 1.5, 0.0]).unwrap();
        let map = ResampleMap::from_coords(&coords, 2, 1, false).unwrap();
        let out = map.apply(&[0.0, 2.0], 1);
        assert_eq!(out, vec![1.0, 0.0, 0.0]);
        assert_eq!(map.validity(), &[true, true, false]);
    }

    #[test]
    fn wrapping_columns() {
        let coords = Tensor::new([1, 1, 2], vec![0.0, 3.5]).unwrap();
        assert!(!ResampleMap::from_coords(&coords, 1, 4, false).unwrap().validity()[0]);
        let map = ResampleMap::from_coords(&coords, 1, 4, true).unwrap();
        assert_eq!(map.apply(&[2.0, 0.0, 0.0, 4.0], 1), vec![3.0]);
    }

    #[test]
    fn footprint_at_origin_is_central_crop() {
        let coords = footprint_coords(&Pose2::new(0.0, 0.0, 0.0), 3, 7, 1.0);
        assert_eq!(&coords.data()[..2], &[2.0, 2.0]);
        let coords = footprint_coords(&Pose2::new(1.0, 2.0, 0.0), 3, 7, 1.0);
        // Camera 1 m east, 2 m north: centre cell (1, 1) maps to (3-2, 3+1).
        assert_eq!(&coords.data()[8..10], &[1.0, 4.0]);
    }
}
