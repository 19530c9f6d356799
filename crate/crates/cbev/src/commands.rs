//! Implementations of the subcommands. Each takes a fully resolved
//! [`RunConfig`] and writes only below the directories it names.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cbev_core::encoder::{embed_reference, EncoderParams};
use cbev_core::geometry::{build_pose_grid, GridSpec};
use cbev_core::gradcheck::{corrupted_adjoint_control, standard_suite};
use cbev_core::matcher::{volume_raw, Backend, MatchContext};
use cbev_core::pipeline::{evaluate, Evaluation};
use cbev_core::selftest::{fft_equivalence, geometry_checks, planted_pose_recovery, score_identities, CheckLine};
use cbev_core::synth::{build_dataset, Dataset};
use cbev_core::train::{train_with, Stage, TrainOutcome};
use cbev_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset_io;
use crate::error::{CliError, CliResult};
use crate::results::{self, EpochLog, EpochRecord, Metrics};
use crate::tensor_io::write_tensor;

pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Checkpoint directory of a stage below `checkpoints`.
pub fn stage_dir(checkpoints: &Path, stage: Stage) -> PathBuf {
    checkpoints.join(format!("stage-{}", stage.as_str()))
}

pub fn synth(config: &RunConfig) -> CliResult<Dataset> {
    config.validate()?;
    let ds = build_dataset(&config.dataset_config())?;
    dataset_io::save(&config.paths.dataset, &ds)?;
    log::info!(
        "wrote {} worlds and {} samples to {}",
        ds.worlds.len(),
        ds.samples.len(),
        config.paths.dataset.display()
    );
    Ok(ds)
}

fn load_stage(config: &RunConfig, stage: Stage, needed_by: &str) -> CliResult<EncoderParams> {
    let dir = stage_dir(&config.paths.checkpoints, stage);
    if !dir.join(checkpoint::MANIFEST).is_file() {
        return Err(CliError::Missing(format!(
            "{needed_by} needs the stage-{} checkpoint at {} (run `cbev train --stage {}` first)",
            stage.as_str(),
            dir.display(),
            stage.as_str()
        )));
    }
    Ok(checkpoint::load(&dir)?.1)
}

/// Trains one stage and writes its checkpoint and per-epoch log.
pub fn train(config: &RunConfig, stage: Stage) -> CliResult<TrainOutcome> {
    config.validate()?;
    let start = match stage {
        Stage::One => None,
        Stage::Two => Some(load_stage(config, Stage::One, "stage-two training")?),
    };
    let ds = dataset_io::load(&config.paths.dataset)?;
    let dir = stage_dir(&config.paths.checkpoints, stage);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut log_file = EpochLog::create(&dir.join(TRAIN_LOG))?;
    let mut write_error = None;
    let outcome = train_with(&config.train_config(stage), &ds, start.as_ref(), &mut |r| {
        log::info!(
            "stage {} epoch {:>3}  loss {:.4}  in-batch acc {:.3}  lr {:.2e}",
            stage.as_str(),
            r.epoch,
            r.loss,
            r.accuracy_in_batch,
            r.lr
        );
        if let Err(e) = log_file.append(&EpochRecord::new(stage.as_str(), r)) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let a = &outcome.audit;
    log::info!(
        "mining: {} batches, {} pairs checked, {} violations of the {} m minimum distance",
        a.batches,
        a.pairs_checked,
        a.violations,
        config.train_config(stage).min_negative_distance
    );
    checkpoint::save(&dir, &outcome.params, stage.as_str(), config.seed)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub ids: Vec<u32>,
    /// Metric centre of each reference, in `ids` order.
    pub locations: Vec<[f64; 2]>,
    pub embeddings: String,
}

/// Embeds every reference with the stage-one model and stores the vectors.
pub fn index(config: &RunConfig) -> CliResult<IndexManifest> {
    config.validate()?;
    let params = load_stage(config, Stage::One, "indexing")?;
    let ds = dataset_io::load(&config.paths.dataset)?;
    let dir = &config.paths.index;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut data = Vec::new();
    for w in &ds.worlds {
        data.extend(embed_reference(&w.field, &params)?);
    }
    let e = params.config().embed_dim;
    write_tensor(&dir.join("embeddings.tnsr"), &Tensor::new([ds.worlds.len(), e], data)?)?;
    let m = IndexManifest {
        ids: ds.worlds.iter().map(|w| w.id).collect(),
        locations: ds.worlds.iter().map(|w| [w.origin.0, w.origin.1]).collect(),
        embeddings: "embeddings.tnsr".into(),
    };
    let path = dir.join("index.toml");
    fs::write(&path, toml::to_string(&m).expect("index serializes")).map_err(|e| CliError::io(&path, e))?;
    log::info!("indexed {} references in {}", m.ids.len(), dir.display());
    Ok(m)
}

/// Runs both retrieval stages on the configured split and writes
/// `results.jsonl` and `metrics.toml`.
pub fn retrieve_eval(config: &RunConfig) -> CliResult<(Evaluation, Metrics)> {
    config.validate()?;
    let params = load_stage(config, Stage::Two, "retrieval")?;
    let ds = dataset_io::load(&config.paths.dataset)?;
    let split = config.eval.split.split();
    let references: BTreeSet<u32> = ds.samples_in(split).map(|s| s.world_id).collect();
    if config.eval.k > references.len() {
        log::warn!(
            "k = {} exceeds the {} references; using k = {}",
            config.eval.k,
            references.len(),
            references.len()
        );
    }
    let ev = evaluate(&ds, split, &params, &config.pipeline_config())?;
    let metrics = results::write_evaluation(&config.paths.results, &ev)?;
    Ok((ev, metrics))
}

/// Sizes of the self-test battery.
#[derive(Debug, Clone, Copy)]
pub struct SelftestPlan {
    pub grid: GridSpec,
    pub fft_configurations: usize,
    pub fft_thetas: [usize; 3],
    pub channels: usize,
    pub planted_trials: usize,
    pub identity_trials: usize,
    pub seed: u64,
}

impl Default for SelftestPlan {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk_default(),
            fft_configurations: 50,
            fft_thetas: [1, 8, 32],
            channels: 8,
            planted_trials: 100,
            identity_trials: 100,
            seed: 0,
        }
    }
}

pub const FFT_TOLERANCE: f64 = 1e-4;
pub const IDENTITY_TOLERANCE: f64 = 1e-6;
/// Planted-pose trials whose argmax must hit, per hundred.
pub const PLANTED_REQUIRED_PER_100: usize = 99;

/// Runs every self-check and returns one line per check.
pub fn selftest(plan: &SelftestPlan) -> CliResult<Vec<CheckLine>> {
    let mut lines = Vec::new();
    for r in standard_suite(plan.seed)? {
        lines.push(CheckLine {
            section: "gradients",
            name: r.op_name.clone(),
            detail: format!("max rel err {:.3e} (tol {:.0e})", r.max_rel_error, r.tolerance),
            passed: r.passed,
        });
    }
    let control = corrupted_adjoint_control(plan.seed)?;
    lines.push(CheckLine {
        section: "gradients",
        name: "corrupted adjoint is detected".into(),
        detail: format!("max rel err {:.3e} (must exceed {:.0e})", control.max_rel_error, control.tolerance),
        passed: !control.passed,
    });

    let eq = fft_equivalence(plan.grid, &plan.fft_thetas, plan.channels, plan.fft_configurations, FFT_TOLERANCE, plan.seed)?;
    lines.push(CheckLine {
        section: "fft",
        name: format!("fft equals brute force on {} configurations", eq.configurations),
        detail: format!("max rel err {:.3e} (tol {:.0e})", eq.max_rel_error, eq.tolerance),
        passed: eq.passed,
    });

    let pl = planted_pose_recovery(plan.grid, plan.channels, plan.planted_trials, 0.01, plan.seed)?;
    let required = (plan.planted_trials * PLANTED_REQUIRED_PER_100).div_ceil(100);
    lines.push(CheckLine {
        section: "planted",
        name: "argmax recovers planted pose".into(),
        detail: format!("{}/{} (need {required})", pl.argmax_hits, pl.trials),
        passed: pl.argmax_hits >= required,
    });
    let step = 360.0 / plan.grid.n_theta as f64;
    lines.push(CheckLine {
        section: "planted",
        name: "estimate within one cell and one heading step".into(),
        detail: format!(
            "{}/{} (max {:.3} cells, {:.3} deg)",
            pl.estimate_hits, pl.trials, pl.max_translation_error_cells, pl.max_rotation_error_deg
        ),
        passed: pl.estimate_hits == pl.trials && pl.max_translation_error_cells <= 1.0 && pl.max_rotation_error_deg <= step,
    });

    let id = score_identities(plan.identity_trials, plan.seed)?;
    for (name, v) in [
        ("lse of a singleton", id.singleton),
        ("posterior shift invariance", id.shift),
        ("posterior sums to one", id.normalization),
    ] {
        lines.push(CheckLine {
            section: "identities",
            name: name.into(),
            detail: format!("max deviation {v:.3e} (tol {IDENTITY_TOLERANCE:.0e})"),
            passed: v <= IDENTITY_TOLERANCE,
        });
    }
    lines.extend(geometry_checks()?);
    Ok(lines)
}

pub fn format_check(line: &CheckLine) -> String {
    format!(
        "[{}] {:<11} {:<46} {}",
        if line.passed { "PASS" } else { "FAIL" },
        line.section,
        line.name,
        line.detail
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: String,
    pub n_theta: usize,
    pub l_a: usize,
    pub l_b: usize,
    pub n_t: usize,
    pub channels: usize,
    pub repeats: usize,
    pub ms_per_match: f64,
}

pub const BENCH_HEADER: &str = "backend     n_theta  l_a  l_b  n_t  channels  repeats  ms_per_match";

impl BenchRow {
    pub fn line(&self) -> String {
        format!(
            "{:<10} {:>8} {:>4} {:>4} {:>4} {:>9} {:>8} {:>13.3}",
            self.backend, self.n_theta, self.l_a, self.l_b, self.n_t, self.channels, self.repeats, self.ms_per_match
        )
    }
}

/// Times one full score volume per backend for each orientation count.
pub fn bench(base: GridSpec, thetas: &[usize], channels: usize, repeats: usize, seed: u64) -> CliResult<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &n_theta in thetas {
        let spec = GridSpec { n_theta, ..base };
        let ctx = MatchContext::new(build_pose_grid(spec)?)?;
        let bev: Vec<f32> = (0..spec.l_b * spec.l_b * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let aerial: Vec<f32> = (0..spec.l_a * spec.l_a * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (name, backend) in [("fft", Backend::Fft), ("bruteforce", Backend::BruteForce)] {
            let t0 = Instant::now();
            for _ in 0..repeats.max(1) {
                std::hint::black_box(volume_raw(&bev, &aerial, channels, &ctx, backend));
            }
            rows.push(BenchRow {
                backend: name.into(),
                n_theta,
                l_a: spec.l_a,
                l_b: spec.l_b,
                n_t: spec.n_t,
                channels,
                repeats: repeats.max(1),
                ms_per_match: t0.elapsed().as_secs_f64() * 1e3 / repeats.max(1) as f64,
            });
        }
    }
    Ok(rows)
}
