use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbev::results::{read_jsonl, read_metrics, EpochRecord, ResultRecord};

const TOY: &str = r#"
seed = 5

[dataset]
n_worlds = 9
samples_per_world = 2
world_size = 20
c_in = 2
pano_height = 5
pano_width = 16
max_range = 4.0
search_extent = 8.0

[encoder]
hidden = 4
pano_channels = 4
channels = 4
depth_bins = 4
embed_dim = 8
bev_side = 7

[grid]
n_t = 8
n_theta = 4
train_n_theta = 4

[stage_one]
batch_size = 4
epochs = 2

[stage_two]
batch_size = 4
epochs = 2
"#;

fn cbev(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbev"))
        .current_dir(dir)
        .env("CBEV_THREADS", "1")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), TOY).unwrap();
    dir
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_default_writes_sixty_four_worlds() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cbev(dir.path(), &["synth", "--dataset", "a"]));
    let m = cbev::dataset_io::read_manifest(&dir.path().join("a")).unwrap();
    assert_eq!(m.worlds.len(), 64);
    assert_eq!(m.samples.len(), 128);
    ok(&cbev(dir.path(), &["synth", "--dataset", "b"]));
    assert_eq!(files_under(&dir.path().join("a")), files_under(&dir.path().join("b")));
}

#[test]
fn synth_into_unwritable_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), b"x").unwrap();
    let out = cbev(dir.path(), &["synth", "--dataset", "blocker/data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blocker"));
}

#[test]
fn stage_two_requires_stage_one() {
    let dir = toy_dir();
    ok(&cbev(dir.path(), &["-c", "run.toml", "synth"]));
    let out = cbev(dir.path(), &["-c", "run.toml", "train", "--stage", "two"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage-one checkpoint"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cbev(dir.path(), &["train"]).status.code(), Some(1));
    assert_eq!(cbev(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cbev(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[grid]\nn_t = 100\n").unwrap();
    let out = cbev(dir.path(), &["-c", "bad.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit constraint"));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = toy_dir();
    let d = dir.path();
    ok(&cbev(d, &["-c", "run.toml", "synth"]));
    ok(&cbev(d, &["-c", "run.toml", "train", "--stage", "one"]));
    ok(&cbev(d, &["-c", "run.toml", "train", "--stage", "two"]));

    let log: Vec<EpochRecord> = read_jsonl(&d.join("checkpoints/stage-two/train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|r| r.loss.is_finite() && (0.0..=1.0).contains(&r.in_batch_accuracy)));

    // Same seed, same checkpoint bytes.
    ok(&cbev(d, &["-c", "run.toml", "--checkpoints", "again", "train", "--stage", "one"]));
    let a = files_under(&d.join("checkpoints/stage-one"));
    let b = files_under(&d.join("again/stage-one"));
    assert_eq!(a, b);

    let idx = ok(&cbev(d, &["-c", "run.toml", "index"]));
    assert!(idx.contains("9 references"), "{idx}");
    assert!(d.join("index/embeddings.tnsr").is_file());

    let out = cbev(d, &["-c", "run.toml", "eval", "--k", "500"]);
    let stdout = ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds"));
    let metrics_text = fs::read_to_string(d.join("results/metrics.toml")).unwrap();
    for key in ["r_at_1", "r_at_5", "r_at_10", "mean_t_err_m", "median_t_err_m", "mean_r_err_deg", "median_r_err_deg"] {
        assert!(metrics_text.contains(&format!("{key} = ")), "{key} missing");
        assert!(stdout.contains(key));
    }
    let with_prior: Vec<ResultRecord> = read_jsonl(&d.join("results/results.jsonl")).unwrap();
    assert_eq!(with_prior.len(), 9);
    assert!(with_prior.iter().all(|r| r.ranked_ids.len() == 9));

    ok(&cbev(d, &["-c", "run.toml", "--results", "noprior", "eval", "--no-prior"]));
    let without: Vec<ResultRecord> = read_jsonl(&d.join("noprior/results.jsonl")).unwrap();
    for (a, b) in with_prior.iter().zip(&without) {
        assert_eq!(a.query_id, b.query_id);
        let by_id = |r: &ResultRecord| -> BTreeMap<u32, (f64, f64)> {
            r.ranked_ids
                .iter()
                .zip(r.prior_logits.iter().zip(&r.bev_scores))
                .map(|(&id, (&p, &s))| (id, (p, s)))
                .collect()
        };
        assert_eq!(by_id(a), by_id(b));
        assert_eq!(b.combined_scores, b.bev_scores);
    }

    ok(&cbev(d, &["-c", "run.toml", "--results", "brute", "retrieve", "--backend", "bruteforce"]));
    let brute: Vec<ResultRecord> = read_jsonl(&d.join("brute/results.jsonl")).unwrap();
    for (a, b) in with_prior.iter().zip(&brute) {
        assert_eq!(a.ranked_ids, b.ranked_ids);
    }
    let m = read_metrics(&d.join("results/metrics.toml")).unwrap();
    assert_eq!(m.k, 9);
}

#[test]
fn quick_selftest_reports_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&cbev(dir.path(), &["selftest", "--quick"]));
    for section in ["gradients", "fft", "planted", "identities", "geometry"] {
        assert!(out.contains(&format!("] {section}")), "{section} missing:\n{out}");
    }
    assert!(out.contains("corrupted adjoint"));
    assert!(out.contains("max rel err"));
    assert!(!out.contains("[FAIL]"));
}

#[test]
fn bench_table_has_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&cbev(dir.path(), &["bench", "--repeats", "1"]));
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), cbev::commands::BENCH_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 6);
    let mut thetas: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    thetas.dedup();
    assert_eq!(thetas, [1, 8, 32]);
    for r in &rows {
        assert_eq!(r.len(), 8);
        assert!(r[7].parse::<f64>().unwrap() > 0.0);
    }
    let ms = |backend: &str| -> f64 {
        rows.iter().find(|r| r[0] == backend && r[1] == "32").unwrap()[7].parse().unwrap()
    };
    assert!(ms("fft") < ms("bruteforce"), "fft {} vs brute force {}", ms("fft"), ms("bruteforce"));
}
