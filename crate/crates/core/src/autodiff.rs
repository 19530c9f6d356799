//! Minimal reverse-mode differentiation over a linear tape.
//!
//! Each primitive records its inputs and whatever it needs for the adjoint;
//! [`Tape::backward`] walks the tape in reverse. Values are `f32`, adjoints
//! and reductions are accumulated in `f64`.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::ResampleMap;
use crate::matcher::{self, Backend, MatchContext};
use crate::math;
use crate::{Error, Result, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Border handling for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Zeros outside the map.
    #[default]
    Zero,
    /// Columns wrap around (panorama azimuth), rows are zero-padded.
    WrapColumns,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        padding: Padding,
    },
    Gelu(Var),
    Scale(Var, f64),
    Reshape(Var),
    SoftmaxAxis {
        input: Var,
        axis: usize,
    },
    LogSumExp(Var),
    L2Normalize {
        input: Var,
        mask: Option<Arc<Vec<bool>>>,
        norm: f64,
    },
    Resample {
        input: Var,
        map: Arc<ResampleMap>,
    },
    ColumnAttention {
        weights: Var,
        values: Var,
    },
    AddRowBias {
        input: Var,
        bias: Var,
    },
    MeanPool(Var),
    MatMulT {
        a: Var,
        b: Var,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    DotConst {
        input: Var,
        weights: Arc<Vec<f32>>,
    },
    ScoreVolume {
        bev: Var,
        aerial: Var,
        ctx: Arc<MatchContext>,
        backend: Backend,
    },
    PairwiseScores {
        bevs: Vec<Var>,
        aerials: Vec<Var>,
        ctx: Arc<MatchContext>,
        posteriors: Arc<Vec<Vec<f64>>>,
    },
    SymmetricInfoNce {
        logits: Var,
        tau: f64,
        smoothing: f64,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::Gelu(v)
            | Op::Scale(v, _)
            | Op::Reshape(v)
            | Op::LogSumExp(v)
            | Op::MeanPool(v) => vec![*v],
            Op::SoftmaxAxis { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::Resample { input, .. }
            | Op::DotConst { input, .. } => vec![*input],
            Op::ColumnAttention { weights, values } => vec![*weights, *values],
            Op::AddRowBias { input, bias } => vec![*input, *bias],
            Op::MatMulT { a, b } => vec![*a, *b],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::ScoreVolume { bev, aerial, .. } => vec![*bev, *aerial],
            Op::PairwiseScores { bevs, aerials, .. } => {
                bevs.iter().chain(aerials.iter()).copied().collect()
            }
            Op::SymmetricInfoNce { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracks: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn get_f32(&self, v: Var) -> Option<Vec<f32>> {
        self.get(v).map(|g| g.iter().map(|&x| x as f32).collect())
    }
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input; gradients are tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracks = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracks,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let tracks = op.inputs().iter().any(|v| self.nodes[v.0].tracks);
        self.nodes.push(Node { value, op, tracks });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Same-size 2-D cross-correlation of `[h, w, cin]` with a
    /// `[k, k, cin, cout]` kernel plus bias; `k` must be odd.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (h, w, cin) = self.value(input).hwc("conv2d")?;
        let (k, cout) = match self.value(kernel).shape() {
            &[k1, k2, ci, co] if k1 == k2 && ci == cin => (k1, co),
            other => {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {other:?} incompatible with input channels {cin}"),
                ))
            }
        };
        if k % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel size {k} must be odd")));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias {:?} must be [{cout}]", self.value(bias).shape()),
            ));
        }
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let b = self.value(bias).data();
        let pad = (k / 2) as isize;
        let mut out = vec![0.0f32; h * w * cout];
        let mut acc = vec![0.0f64; cout];
        for y in 0..h {
            for xx in 0..w {
                acc.iter_mut().zip(b).for_each(|(a, &bv)| *a = bv as f64);
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let Some(sx) = source_col(xx, dx, pad, w, padding) else {
                            continue;
                        };
                        let src = &x[(sy as usize * w + sx) * cin..][..cin];
                        let kbase = (dy * k + dx) * cin * cout;
                        for (i, &xv) in src.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &kd[kbase + i * cout..][..cout];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv as f64 * kv as f64;
                            }
                        }
                    }
                }
                let o = &mut out[(y * w + xx) * cout..][..cout];
                o.iter_mut().zip(&acc).for_each(|(o, &a)| *o = a as f32);
            }
        }
        let value = Tensor::new([h, w, cout], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            "conv2d",
        )
    }

    /// GELU nonlinearity (tanh approximation).
    pub fn gelu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| gelu(v as f64) as f32).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Gelu(input), "gelu")
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| (v as f64 * factor) as f32).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::Scale(input, factor), "scale")
    }

    /// Same values under a new shape of equal element count.
    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        self.push(value, Op::Reshape(input), "reshape")
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let t = self.value(input);
        let (outer, len, inner) = axis_layout(t.shape(), axis, "softmax_axis")?;
        let x = t.data();
        let mut out = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| x[idx(a)] as f64).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..len).map(|a| math::exp(x[idx(a)] as f64 - max)).sum();
                for a in 0..len {
                    out[idx(a)] = (math::exp(x[idx(a)] as f64 - max) / sum) as f32;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::SoftmaxAxis { input, axis }, "softmax_axis")
    }

    /// `log Σ exp` over every element, returned as a scalar.
    pub fn logsumexp(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.numel() == 0 {
            return Err(Error::Empty { op: "logsumexp" });
        }
        let v = math::logsumexp(t.data().iter().map(|&v| v as f64));
        self.push(Tensor::scalar(v as f32), Op::LogSumExp(input), "logsumexp")
    }

    /// Scales the input so the unmasked elements have unit Frobenius norm;
    /// masked cells are forced to zero.
    ///
    /// `mask` covers the leading (spatial) cells: element `i` belongs to cell
    /// `i / c` where `c` is the last dimension.
    pub fn l2_normalize_global(&mut self, input: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let t = self.value(input);
        let c = *t.shape().last().unwrap_or(&1);
        let c = c.max(1);
        if let Some(m) = &mask {
            if m.len() * c != t.numel() {
                return Err(Error::dim(
                    "l2_normalize_global",
                    format!("mask of {} cells for {} elements", m.len(), t.numel()),
                ));
            }
        }
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i / c]);
        let sq: f64 = t
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, &v)| v as f64 * v as f64)
            .sum();
        let norm = math::sqrt(sq);
        if !(norm > 1e-12) {
            return Err(Error::DegenerateNorm {
                op: "l2_normalize_global",
            });
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep(i) { (v as f64 / norm) as f32 } else { 0.0 })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, Op::L2Normalize { input, mask, norm }, "l2_normalize_global")
    }

    /// Applies a precomputed bilinear resampling to an `[h, w, c]` map.
    pub fn resample(&mut self, input: Var, map: Arc<ResampleMap>) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc("bilinear_sample")?;
        if map.in_hw() != (h, w) {
            return Err(Error::dim(
                "bilinear_sample",
                format!("map built for {:?}, input is {:?}", map.in_hw(), (h, w)),
            ));
        }
        let (oh, ow) = map.out_hw();
        let data = map.apply(self.value(input).data(), c);
        let value = Tensor::new([oh, ow, c], data)?;
        self.push(value, Op::Resample { input, map }, "bilinear_sample")
    }

    /// Bilinear sampling at a `[h', w', 2]` field of `(row, col)`
    /// coordinates. Returns the samples and a `[h', w']` validity map;
    /// invalid samples are zero. Coordinates are treated as constants.
    pub fn bilinear_sample(&mut self, input: Var, coords: &Tensor) -> Result<(Var, Tensor)> {
        let (h, w, _) = self.value(input).hwc("bilinear_sample")?;
        let map = ResampleMap::from_coords(coords, h, w, false)?;
        let validity = map.validity_tensor();
        let out = self.resample(input, Arc::new(map))?;
        Ok((out, validity))
    }

    /// `out[k, j, :] = Σ_i weights[i, j, k] · values[i, j, :]` — attention
    /// pooling down each column into `d` output rows.
    pub fn column_attention(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (h, w, d) = self.value(weights).hwc("column_attention")?;
        let (vh, vw, c) = self.value(values).hwc("column_attention")?;
        if (vh, vw) != (h, w) {
            return Err(Error::dim(
                "column_attention",
                format!("weights {h}x{w} vs values {vh}x{vw}"),
            ));
        }
        let a = self.value(weights).data();
        let v = self.value(values).data();
        let mut out = vec![0.0f32; d * w * c];
        let mut acc = vec![0.0f64; c];
        for k in 0..d {
            for j in 0..w {
                acc.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..h {
                    let wt = a[(i * w + j) * d + k] as f64;
                    let vv = &v[(i * w + j) * c..][..c];
                    acc.iter_mut().zip(vv).for_each(|(x, &y)| *x += wt * y as f64);
                }
                let o = &mut out[(k * w + j) * c..][..c];
                o.iter_mut().zip(&acc).for_each(|(o, &x)| *o = x as f32);
            }
        }
        let value = Tensor::new([d, w, c], out)?;
        self.push(value, Op::ColumnAttention { weights, values }, "column_attention")
    }

    /// Adds a per-row bias `[h, d]` to an `[h, w, d]` map (broadcast over
    /// columns).
    pub fn add_row_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (h, w, d) = self.value(input).hwc("add_row_bias")?;
        if self.value(bias).shape() != [h, d] {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} must be [{h}, {d}]", self.value(bias).shape()),
            ));
        }
        let x = self.value(input).data();
        let b = self.value(bias).data();
        let data = (0..h * w * d)
            .map(|idx| {
                let i = idx / (w * d);
                let k = idx % d;
                x[idx] + b[i * d + k]
            })
            .collect();
        let value = Tensor::new([h, w, d], data)?;
        self.push(value, Op::AddRowBias { input, bias }, "add_row_bias")
    }

    /// Spatial mean of `[h, w, c]`, returned as `[1, c]`.
    pub fn mean_pool(&mut self, input: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc("mean_pool")?;
        let x = self.value(input).data();
        let mut acc = vec![0.0f64; c];
        for cell in x.chunks_exact(c) {
            acc.iter_mut().zip(cell).for_each(|(a, &v)| *a += v as f64);
        }
        let n = (h * w) as f64;
        let value = Tensor::new([1, c], acc.iter().map(|&a| (a / n) as f32).collect())?;
        self.push(value, Op::MeanPool(input), "mean_pool")
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_t")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", format!("inner dims {k} vs {k2}")));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(&ad[i * k..][..k], &bd[j * k..][..k]) as f32;
            }
        }
        let value = Tensor::new([m, n], out)?;
        self.push(value, Op::MatMulT { a, b }, "matmul_t")
    }

    /// Stacks `[r_i, e]` matrices along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_rows" })?;
        let (_, e) = matrix_dims(self.value(*first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, e2) = matrix_dims(self.value(p), "concat_rows")?;
            if e2 != e {
                return Err(Error::dim("concat_rows", format!("width {e2} vs {e}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([rows, e], data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Joins `[m, c_i]` matrices side by side into `[m, Σ c_i]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_cols" })?;
        let (m, _) = matrix_dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", format!("rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * c..][..c]);
            }
        }
        let value = Tensor::new([m, total], data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// `Σ weights ⊙ input` as a scalar; `weights` are constants.
    pub fn dot_const(&mut self, input: Var, weights: Arc<Vec<f32>>) -> Result<Var> {
        let x = self.value(input).data();
        if weights.len() != x.len() {
            return Err(Error::LengthMismatch {
                expected: x.len(),
                got: weights.len(),
            });
        }
        let v = dot(x, &weights);
        self.push(Tensor::scalar(v as f32), Op::DotConst { input, weights }, "dot_const")
    }

    /// Raw score volume `[n_t, n_t, n_θ]` of a BEV map against an aerial map.
    pub fn score_volume(
        &mut self,
        bev: Var,
        aerial: Var,
        ctx: Arc<MatchContext>,
        backend: Backend,
    ) -> Result<Var> {
        let c = ctx.check_maps(self.value(bev), self.value(aerial))?;
        let vol = matcher::volume_raw(self.value(bev).data(), self.value(aerial).data(), c, &ctx, backend);
        let spec = *ctx.grid().spec();
        let value = Tensor::new(
            [spec.n_t, spec.n_t, spec.n_theta],
            vol.into_iter().map(|v| v as f32).collect(),
        )?;
        self.push(
            value,
            Op::ScoreVolume {
                bev,
                aerial,
                ctx,
                backend,
            },
            "score_volume",
        )
    }

    /// `[n, n]` matrix of temperature-scaled retrieval logits
    /// `τ · lse(S_ij / τ)` between every BEV map `i` and aerial map `j`.
    pub fn pairwise_scores(
        &mut self,
        bevs: &[Var],
        aerials: &[Var],
        ctx: Arc<MatchContext>,
        temperature: f64,
    ) -> Result<Var> {
        if bevs.is_empty() || bevs.len() != aerials.len() {
            return Err(Error::LengthMismatch {
                expected: bevs.len().max(1),
                got: aerials.len(),
            });
        }
        let mut c = 0;
        for (&b, &a) in bevs.iter().zip(aerials) {
            c = ctx.check_maps(self.value(b), self.value(a))?;
        }
        let bev_data: Vec<&[f32]> = bevs.iter().map(|&b| self.value(b).data()).collect();
        let aer_data: Vec<&[f32]> = aerials.iter().map(|&a| self.value(a).data()).collect();
        let fwd = matcher::pairwise_lse(&bev_data, &aer_data, c, &ctx, temperature)?;
        let n = bevs.len();
        let value = Tensor::new([n, n], fwd.scores.iter().map(|&v| v as f32).collect())?;
        self.push(
            value,
            Op::PairwiseScores {
                bevs: bevs.to_vec(),
                aerials: aerials.to_vec(),
                ctx,
                posteriors: Arc::new(fwd.posteriors),
            },
            "pairwise_scores",
        )
    }

    /// Symmetric cross-entropy over an `[n, n]` logit matrix whose diagonal
    /// holds the positive pairs; logits are divided by `tau` and targets are
    /// `1 − ε` on the diagonal, `ε / (n − 1)` elsewhere.
    pub fn symmetric_infonce(&mut self, logits: Var, tau: f64, smoothing: f64) -> Result<Var> {
        let (n, n2) = matrix_dims(self.value(logits), "symmetric_infonce")?;
        if n != n2 {
            return Err(Error::dim("symmetric_infonce", format!("logits must be square, got {n}x{n2}")));
        }
        if n < 2 {
            return Err(Error::dim("symmetric_infonce", "needs at least 2 pairs"));
        }
        if !(tau > 0.0) || !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidConfig(format!(
                "temperature {tau} must be > 0 and smoothing {smoothing} in [0, 1)"
            )));
        }
        let loss = infonce_forward(self.value(logits).data(), n, tau, smoothing).loss;
        self.push(
            Tensor::scalar(loss as f32),
            Op::SymmetricInfoNce {
                logits,
                tau,
                smoothing,
            },
            "symmetric_infonce",
        )
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::dim("backward", "root must be a scalar"));
        }
        self.backward_with(root, vec![1.0])
    }

    /// Reverse pass seeded with an explicit output adjoint.
    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::LengthMismatch {
                expected: self.value(root).numel(),
                got: seed.len(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracks {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracks {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => self.conv2d_backward(g, *input, *kernel, *bias, *padding, grads),
            Op::Gelu(input) => {
                let x = self.value(*input).data();
                self.accumulate(grads, *input, |buf| {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *b += gv * gelu_grad(xv as f64);
                    }
                });
            }
            Op::Reshape(input) => {
                self.accumulate(grads, *input, |buf| add_into(buf, g));
            }
            Op::Scale(input, factor) => {
                self.accumulate(grads, *input, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, &gv)| *b += gv * factor);
                });
            }
            Op::SoftmaxAxis { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) =
                    axis_layout(node.value.shape(), *axis, "softmax_axis").expect("checked in forward");
                self.accumulate(grads, *input, |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let s: f64 = (0..len).map(|a| y[at(a)] as f64 * g[at(a)]).sum();
                            for a in 0..len {
                                buf[at(a)] += y[at(a)] as f64 * (g[at(a)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp(input) => {
                let x = self.value(*input).data();
                let lse = math::logsumexp(x.iter().map(|&v| v as f64));
                self.accumulate(grads, *input, |buf| {
                    for (b, &xv) in buf.iter_mut().zip(x) {
                        *b += g[0] * math::exp(xv as f64 - lse);
                    }
                });
            }
            Op::L2Normalize { input, mask, norm } => {
                let y = node.value.data();
                let c = (*node.value.shape().last().unwrap_or(&1)).max(1);
                let ydg: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv as f64 * gv).sum();
                self.accumulate(grads, *input, |buf| {
                    for (i, b) in buf.iter_mut().enumerate() {
                        if mask.as_ref().is_none_or(|m| m[i / c]) {
                            *b += (g[i] - y[i] as f64 * ydg) / norm;
                        }
                    }
                });
            }
            Op::Resample { input, map } => {
                let c = self.value(*input).shape()[2];
                self.accumulate(grads, *input, |buf| map.transpose_accumulate(g, c, buf));
            }
            Op::ColumnAttention { weights, values } => {
                let (h, w, d) = self.value(*weights).hwc("").expect("checked");
                let c = self.value(*values).shape()[2];
                let a = self.value(*weights).data();
                let v = self.value(*values).data();
                self.accumulate(grads, *weights, |buf| {
                    for i in 0..h {
                        for j in 0..w {
                            let vv = &v[(i * w + j) * c..][..c];
                            for k in 0..d {
                                let gg = &g[(k * w + j) * c..][..c];
                                buf[(i * w + j) * d + k] +=
                                    gg.iter().zip(vv).map(|(&x, &y)| x * y as f64).sum::<f64>();
                            }
                        }
                    }
                });
                self.accumulate(grads, *values, |buf| {
                    for i in 0..h {
                        for j in 0..w {
                            let dst = &mut buf[(i * w + j) * c..][..c];
                            for k in 0..d {
                                let wt = a[(i * w + j) * d + k] as f64;
                                let gg = &g[(k * w + j) * c..][..c];
                                dst.iter_mut().zip(gg).for_each(|(x, &y)| *x += wt * y);
                            }
                        }
                    }
                });
            }
            Op::AddRowBias { input, bias } => {
                let (h, w, d) = node.value.hwc("").expect("checked");
                self.accumulate(grads, *input, |buf| {
                    buf.iter_mut().zip(g).for_each(|(b, &gv)| *b += gv);
                });
                self.accumulate(grads, *bias, |buf| {
                    for i in 0..h {
                        for j in 0..w {
                            for k in 0..d {
                                buf[i * d + k] += g[(i * w + j) * d + k];
                            }
                        }
                    }
                });
            }
            Op::MeanPool(input) => {
                let (h, w, c) = self.value(*input).hwc("").expect("checked");
                let inv = 1.0 / (h * w) as f64;
                self.accumulate(grads, *input, |buf| {
                    for cell in buf.chunks_exact_mut(c) {
                        cell.iter_mut().zip(g).for_each(|(b, &gv)| *b += gv * inv);
                    }
                });
            }
            Op::MatMulT { a, b } => {
                let (m, k) = matrix_dims(self.value(*a), "").expect("checked");
                let (n, _) = matrix_dims(self.value(*b), "").expect("checked");
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for t in 0..k {
                                buf[i * k + t] += gv * bd[j * k + t] as f64;
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for t in 0..k {
                                buf[j * k + t] += gv * ad[i * k + t] as f64;
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &g[offset..offset + len];
                    self.accumulate(grads, p, |buf| {
                        buf.iter_mut().zip(slice).for_each(|(b, &gv)| *b += gv);
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (m, c) = matrix_dims(self.value(p), "concat_cols").expect("checked in forward");
                    self.accumulate(grads, p, |buf| {
                        for i in 0..m {
                            for t in 0..c {
                                buf[i * c + t] += g[i * total + offset + t];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::DotConst { input, weights } => {
                self.accumulate(grads, *input, |buf| {
                    buf.iter_mut()
                        .zip(weights.iter())
                        .for_each(|(b, &wv)| *b += g[0] * wv as f64);
                });
            }
            Op::ScoreVolume {
                bev,
                aerial,
                ctx,
                backend,
            } => {
                let c = self.value(*bev).shape()[2];
                let (db, da) = matcher::volume_backward_raw(
                    g,
                    self.value(*bev).data(),
                    self.value(*aerial).data(),
                    c,
                    ctx,
                    *backend,
                );
                self.accumulate(grads, *bev, |buf| add_into(buf, &db));
                self.accumulate(grads, *aerial, |buf| add_into(buf, &da));
            }
            Op::PairwiseScores {
                bevs,
                aerials,
                ctx,
                posteriors,
            } => {
                let c = self.value(bevs[0]).shape()[2];
                let bev_data: Vec<&[f32]> = bevs.iter().map(|&b| self.value(b).data()).collect();
                let aer_data: Vec<&[f32]> = aerials.iter().map(|&a| self.value(a).data()).collect();
                let (dbs, das) = matcher::pairwise_lse_backward(g, posteriors, &bev_data, &aer_data, c, ctx);
                for (&v, d) in bevs.iter().zip(&dbs) {
                    self.accumulate(grads, v, |buf| add_into(buf, d));
                }
                for (&v, d) in aerials.iter().zip(&das) {
                    self.accumulate(grads, v, |buf| add_into(buf, d));
                }
            }
            Op::SymmetricInfoNce {
                logits,
                tau,
                smoothing,
            } => {
                let n = self.value(*logits).shape()[0];
                let fwd = infonce_forward(self.value(*logits).data(), n, *tau, *smoothing);
                self.accumulate(grads, *logits, |buf| {
                    buf.iter_mut()
                        .zip(&fwd.grad)
                        .for_each(|(b, &gv)| *b += g[0] * gv);
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        g: &[f64],
        input: Var,
        kernel: Var,
        bias: Var,
        padding: Padding,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (h, w, cin) = self.value(input).hwc("").expect("checked");
        let k = self.value(kernel).shape()[0];
        let cout = self.value(bias).numel();
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let pad = (k / 2) as isize;
        let need_in = self.tracks(input);
        let need_k = self.tracks(kernel);
        let mut d_in = if need_in { vec![0.0; x.len()] } else { Vec::new() };
        let mut d_k = if need_k { vec![0.0; kd.len()] } else { Vec::new() };
        for y in 0..h {
            for xx in 0..w {
                let go = &g[(y * w + xx) * cout..][..cout];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let Some(sx) = source_col(xx, dx, pad, w, padding) else {
                            continue;
                        };
                        let sbase = (sy as usize * w + sx) * cin;
                        let kbase = (dy * k + dx) * cin * cout;
                        for i in 0..cin {
                            let krow = &kd[kbase + i * cout..][..cout];
                            if need_in {
                                d_in[sbase + i] +=
                                    go.iter().zip(krow).map(|(&a, &b)| a * b as f64).sum::<f64>();
                            }
                            if need_k {
                                let xv = x[sbase + i] as f64;
                                if xv != 0.0 {
                                    let dk = &mut d_k[kbase + i * cout..][..cout];
                                    dk.iter_mut().zip(go).for_each(|(d, &a)| *d += a * xv);
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_in {
            self.accumulate(grads, input, |buf| add_into(buf, &d_in));
        }
        if need_k {
            self.accumulate(grads, kernel, |buf| add_into(buf, &d_k));
        }
        self.accumulate(grads, bias, |buf| {
            for cell in g.chunks_exact(cout) {
                buf.iter_mut().zip(cell).for_each(|(b, &gv)| *b += gv);
            }
        });
    }
}

fn source_col(x: usize, dx: usize, pad: isize, w: usize, padding: Padding) -> Option<usize> {
    let sx = x as isize + dx as isize - pad;
    match padding {
        Padding::Zero => (sx >= 0 && sx < w as isize).then_some(sx as usize),
        Padding::WrapColumns => Some(sx.rem_euclid(w as isize) as usize),
    }
}

fn add_into(buf: &mut [f64], src: &[f64]) {
    buf.iter_mut().zip(src).for_each(|(b, &s)| *b += s);
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[m, n] => Ok((m, n)),
        other => Err(Error::dim(op, format!("expected a matrix, got {other:?}"))),
    }
}

fn axis_layout(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = math::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) struct InfoNceForward {
    pub loss: f64,
    /// Row-wise (street-view → aerial) and column-wise components.
    pub row_loss: f64,
    pub col_loss: f64,
    pub grad: Vec<f64>,
}

/// Loss, per-direction components and gradient of the symmetric smoothed
/// cross-entropy.
pub(crate) fn infonce_forward(logits: &[f32], n: usize, tau: f64, smoothing: f64) -> InfoNceForward {
    let z: Vec<f64> = logits.iter().map(|&v| v as f64 / tau).collect();
    let target = |i: usize, j: usize| {
        if i == j {
            1.0 - smoothing
        } else {
            smoothing / (n - 1) as f64
        }
    };
    let mut grad = vec![0.0; n * n];
    let mut row_loss = 0.0;
    let mut col_loss = 0.0;
    let scale = 0.5 / n as f64 / tau;
    for i in 0..n {
        let row = (0..n).map(|j| z[i * n + j]);
        let lse = math::logsumexp(row);
        for j in 0..n {
            let p = math::exp(z[i * n + j] - lse);
            row_loss -= target(i, j) * (z[i * n + j] - lse);
            grad[i * n + j] += scale * (p - target(i, j));
        }
    }
    for j in 0..n {
        let col = (0..n).map(|i| z[i * n + j]);
        let lse = math::logsumexp(col);
        for i in 0..n {
            let p = math::exp(z[i * n + j] - lse);
            col_loss -= target(j, i) * (z[i * n + j] - lse);
            grad[i * n + j] += scale * (p - target(j, i));
        }
    }
    row_loss /= n as f64;
    col_loss /= n as f64;
    InfoNceForward {
        loss: 0.5 * (row_loss + col_loss),
        row_loss,
        col_loss,
        grad,
    }
}
