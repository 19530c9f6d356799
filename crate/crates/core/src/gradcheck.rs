//! Central finite-difference checks of tape adjoints.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use alloc::sync::Arc;

use crate::autodiff::{Padding, Tape, Var};
use crate::encoder::{aerial_forward, embed_forward, panorama_forward, BevGeometry, BoundParams, EncoderConfig, EncoderParams, ParamGroup};
use crate::geometry::{build_pose_grid, circular_mask, rotation_coords, GridSpec, ResampleMap};
use crate::matcher::{Backend, MatchContext};
use crate::{Result, Tensor};

/// Step used for the central differences.
pub const FD_EPSILON: f64 = 1e-3;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    /// `max |analytic − numeric| / max(1, |numeric|)` over all inputs.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl core::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err {:.3e}  tol {:.0e}  {}",
            self.op_name,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Something whose output can be recomputed from fresh input leaves.
pub trait GradOp {
    fn name(&self) -> String;
    fn build(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var>;
}

impl<F> GradOp for (&str, F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn name(&self) -> String {
        String::from(self.0)
    }

    fn build(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var> {
        (self.1)(tape, inputs)
    }
}

/// Checks the adjoint of `op` on random inputs of `input_shapes`, drawn
/// uniformly from `[-1, 1)` with `seed`. The output is reduced to a scalar
/// with a fixed random projection.
pub fn grad_check(op: &dyn GradOp, input_shapes: &[Vec<usize>], tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = input_shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        })
        .collect::<Result<_>>()?;
    grad_check_at(op, &inputs, tolerance, seed, 1.0)
}

/// As [`grad_check`] at explicit input values. `adjoint_scale` multiplies
/// the analytic gradient before comparison; anything but 1 is a deliberately
/// corrupted adjoint used as a negative control.
pub fn grad_check_at(
    op: &dyn GradOp,
    inputs: &[Tensor],
    tolerance: f64,
    seed: u64,
    adjoint_scale: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = op.build(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let projection: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let grads = tape.backward_with(out, projection.clone())?;

    let objective = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = op.build(&mut t, &vs)?;
        Ok(t.value(o)
            .data()
            .iter()
            .zip(&projection)
            .map(|(&y, &w)| y as f64 * w)
            .sum())
    };

    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; inputs[idx].numel()]);
        for e in 0..inputs[idx].numel() {
            let x0 = inputs[idx].data()[e];
            work[idx].data_mut()[e] = (x0 as f64 + FD_EPSILON) as f32;
            let plus = objective(&work)?;
            work[idx].data_mut()[e] = (x0 as f64 - FD_EPSILON) as f32;
            let minus = objective(&work)?;
            work[idx].data_mut()[e] = x0;
            // Use the step actually representable in f32.
            let h = (x0 as f64 + FD_EPSILON) as f32 as f64 - (x0 as f64 - FD_EPSILON) as f32 as f64;
            let numeric = (plus - minus) / h;
            let a = analytic[e] * adjoint_scale;
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradCheckReport {
        op_name: if adjoint_scale == 1.0 {
            op.name()
        } else {
            format!("{} (adjoint x{adjoint_scale})", op.name())
        },
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    })
}

/// Tolerance of the standard suite.
pub const SUITE_TOLERANCE: f64 = 1e-3;

fn minimal_encoder() -> EncoderConfig {
    EncoderConfig {
        c_in: 2,
        hidden: 3,
        pano_channels: 3,
        channels: 2,
        depth_bins: 3,
        pano_height: 4,
        pano_width: 8,
        embed_dim: 3,
        kernel: 3,
        bev_side: 5,
        pixel_size: 1.0,
        search_extent: 4.0,
    }
}

fn minimal_grid(n_theta: usize) -> GridSpec {
    GridSpec {
        n_t: 4,
        n_theta,
        search_extent: 4.0,
        pixel_size: 1.0,
        l_a: 8,
        l_b: 5,
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// Finite-difference checks of every tape primitive and of both training
/// objectives on minimal shapes.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let tol = SUITE_TOLERANCE;
    let mut reports = Vec::new();
    let mut run = |op: &dyn GradOp, shapes: &[Vec<usize>]| -> Result<()> {
        reports.push(grad_check(op, shapes, tol, seed)?);
        Ok(())
    };

    run(&("conv2d (zero pad)", |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], v[2], Padding::Zero)), &[vec![4, 5, 2], vec![3, 3, 2, 3], vec![3]])?;
    run(
        &("conv2d (wrap columns)", |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], v[2], Padding::WrapColumns)),
        &[vec![4, 6, 2], vec![3, 3, 2, 2], vec![2]],
    )?;
    run(&("gelu", |t: &mut Tape, v: &[Var]| t.gelu(v[0])), &[vec![3, 4]])?;
    run(&("scale", |t: &mut Tape, v: &[Var]| t.scale(v[0], -2.5)), &[vec![2, 3]])?;
    run(&("reshape", |t: &mut Tape, v: &[Var]| t.reshape(v[0], [3, 2])), &[vec![2, 3]])?;
    run(&("softmax (axis 0)", |t: &mut Tape, v: &[Var]| t.softmax_axis(v[0], 0)), &[vec![4, 3, 2]])?;
    run(&("softmax (axis 2)", |t: &mut Tape, v: &[Var]| t.softmax_axis(v[0], 2)), &[vec![2, 3, 4]])?;
    run(&("logsumexp", |t: &mut Tape, v: &[Var]| t.logsumexp(v[0])), &[vec![3, 3, 2]])?;
    run(&("l2_normalize", |t: &mut Tape, v: &[Var]| t.l2_normalize_global(v[0], None)), &[vec![3, 3, 2]])?;
    let mask = Arc::new(circular_mask(5).values().to_vec());
    run(
        &("l2_normalize (masked)", move |t: &mut Tape, v: &[Var]| t.l2_normalize_global(v[0], Some(mask.clone()))),
        &[vec![5, 5, 2]],
    )?;
    let rot = Arc::new(ResampleMap::from_coords(&rotation_coords(5, 0.7), 5, 5, false)?);
    run(&("resample", move |t: &mut Tape, v: &[Var]| t.resample(v[0], rot.clone())), &[vec![5, 5, 2]])?;
    let coords = rotation_coords(4, 2.1);
    run(
        &("bilinear_sample", move |t: &mut Tape, v: &[Var]| Ok(t.bilinear_sample(v[0], &coords)?.0)),
        &[vec![4, 4, 3]],
    )?;
    run(&("column_attention", |t: &mut Tape, v: &[Var]| t.column_attention(v[0], v[1])), &[vec![4, 3, 2], vec![4, 3, 2]])?;
    run(&("add_row_bias", |t: &mut Tape, v: &[Var]| t.add_row_bias(v[0], v[1])), &[vec![3, 4, 2], vec![3, 2]])?;
    run(&("mean_pool", |t: &mut Tape, v: &[Var]| t.mean_pool(v[0])), &[vec![3, 4, 2]])?;
    run(&("matmul_t", |t: &mut Tape, v: &[Var]| t.matmul_t(v[0], v[1])), &[vec![2, 3], vec![4, 3]])?;
    run(&("concat_rows", |t: &mut Tape, v: &[Var]| t.concat_rows(&[v[0], v[1]])), &[vec![1, 3], vec![2, 3]])?;
    run(&("concat_cols", |t: &mut Tape, v: &[Var]| t.concat_cols(&[v[0], v[1]])), &[vec![2, 1], vec![2, 3]])?;
    let w = Arc::new(alloc::vec![0.5f32, -1.0, 2.0, 0.25, 1.5, -0.75]);
    run(&("dot_const", move |t: &mut Tape, v: &[Var]| t.dot_const(v[0], w.clone())), &[vec![2, 3]])?;
    run(
        &("symmetric_infonce", |t: &mut Tape, v: &[Var]| t.symmetric_infonce(v[0], 0.5, 0.1)),
        &[vec![3, 3]],
    )?;

    let ctx = Arc::new(MatchContext::new(build_pose_grid(minimal_grid(4))?)?);
    for backend in [Backend::Fft, Backend::BruteForce] {
        let c = ctx.clone();
        let name = match backend {
            Backend::Fft => "score_volume (fft)",
            Backend::BruteForce => "score_volume (brute force)",
        };
        run(&(name, move |t: &mut Tape, v: &[Var]| t.score_volume(v[0], v[1], c.clone(), backend)), &[vec![5, 5, 2], vec![8, 8, 2]])?;
    }
    let c = ctx.clone();
    run(
        &("pairwise_scores", move |t: &mut Tape, v: &[Var]| t.pairwise_scores(&[v[0], v[1]], &[v[2], v[3]], c.clone(), 0.5)),
        &[vec![5, 5, 2], vec![5, 5, 2], vec![8, 8, 2], vec![8, 8, 2]],
    )?;

    reports.extend(objective_checks(seed)?);
    Ok(reports)
}

/// Checks of the full stage-one and stage-two losses with respect to the
/// encoder parameters of each stage.
fn objective_checks(seed: u64) -> Result<Vec<GradCheckReport>> {
    let cfg = minimal_encoder();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params = EncoderParams::init(cfg, seed)?;
    let panos: Vec<Tensor> = (0..2).map(|_| random_tensor(&[cfg.pano_height, cfg.pano_width, cfg.c_in], &mut rng)).collect();
    let aerials: Vec<Tensor> = (0..2).map(|_| random_tensor(&[8, 8, cfg.c_in], &mut rng)).collect();
    let geom = BevGeometry::from_config(&cfg)?;
    let ctx = Arc::new(MatchContext::new(build_pose_grid(minimal_grid(4))?)?);
    let mut out = Vec::new();
    for group in [ParamGroup::Embedding, ParamGroup::Bev] {
        let names: Vec<String> = params.names().filter(|n| group.contains(n)).cloned().collect();
        // Perturb away from the zero-initialized attention so every path
        // carries gradient.
        let inputs: Vec<Tensor> = names
            .iter()
            .map(|n| {
                let t = params.get(n)?;
                let data = t.data().iter().map(|&x| x + rng.random_range(-0.3f32..0.3)).collect();
                Tensor::new(t.shape().to_vec(), data)
            })
            .collect::<Result<_>>()?;
        let (panos, aerials, geom, ctx, names_c) = (panos.clone(), aerials.clone(), geom.clone(), ctx.clone(), names.clone());
        let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let p = BoundParams::from_vars(names_c.iter().cloned().zip(v.iter().copied()).collect());
            let mut left = Vec::new();
            let mut right = Vec::new();
            for (pano, aerial) in panos.iter().zip(&aerials) {
                let x = t.constant(pano.clone());
                let y = t.constant(aerial.clone());
                match group {
                    ParamGroup::Embedding => {
                        left.push(embed_forward(t, &p, "embed.query", x, Padding::WrapColumns)?);
                        right.push(embed_forward(t, &p, "embed.ref", y, Padding::Zero)?);
                    }
                    ParamGroup::Bev => {
                        left.push(panorama_forward(t, &p, &geom, x)?);
                        right.push(aerial_forward(t, &p, y)?);
                    }
                }
            }
            let logits = match group {
                ParamGroup::Embedding => {
                    let q = t.concat_rows(&left)?;
                    let r = t.concat_rows(&right)?;
                    t.matmul_t(q, r)?
                }
                ParamGroup::Bev => t.pairwise_scores(&left, &right, ctx.clone(), 0.5)?,
            };
            t.symmetric_infonce(logits, 0.5, 0.1)
        };
        let name = match group {
            ParamGroup::Embedding => "stage-one loss wrt embedding params",
            ParamGroup::Bev => "stage-two loss wrt BEV params",
        };
        out.push(grad_check_at(&(name, build), &inputs, SUITE_TOLERANCE, seed, 1.0)?);
    }
    Ok(out)
}

/// The conv2d check with its adjoint deliberately doubled. Must fail.
pub fn corrupted_adjoint_control(seed: u64) -> Result<GradCheckReport> {
    let op = ("conv2d", |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], v[2], Padding::Zero));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = [vec![4, 5, 2], vec![3, 3, 2, 3], vec![3]].iter().map(|s| random_tensor(s, &mut rng)).collect();
    grad_check_at(&op, &inputs, SUITE_TOLERANCE, seed, 2.0)
}
