use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gcdm::moldata::{compute_size_distribution, parse_internal, write_internal};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gcdm"));
    cmd.env_remove("GCDM_THREADS");
    cmd
}

fn repo_data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// Writes the first `n` excerpt molecules to `dir/mols.mol`.
fn small_dataset(dir: &Path, n: usize) -> PathBuf {
    let path = repo_data("qm9_excerpt_1k.mol");
    let mols = parse_internal(&std::fs::read_to_string(&path).unwrap(), &path).unwrap();
    let out = dir.join("mols.mol");
    let mut bytes = Vec::new();
    write_internal(&mut bytes, &mols[..n]).unwrap();
    std::fs::write(&out, bytes).unwrap();
    out
}

const TINY: &str = r#"
seed = 3

[data]
path = "mols.mol"
split_seed = 1
split_sizes = [16, 4, 4]

[model]
num_layers = 1
node_scalar_dim = 8
node_vector_dim = 2
edge_scalar_dim = 4
edge_vector_dim = 2

[schedule]
steps = 20
step_clip = 1e-5

[optimizer]
learning_rate = 1e-3
batch_size = 8

[training]
steps = 6
eval_every = 3
eval_molecules = 4
checkpoint_every = 2
log_every = 0

[sampling]
count = 3
chunk = 2
"#;

fn tiny_setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path(), 24);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, TINY).unwrap();
    (dir, config)
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn gcdm(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    run(bin()
        .arg(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn inspect_prints_size_distribution_and_snr() {
    let (dir, config) = tiny_setup();
    let three = small_dataset(dir.path(), 3);
    let out = run(bin().args(["inspect", "--config"]).arg(&config).arg("--override").arg(format!(
        "data.path={}",
        three.display()
    )));
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mols = parse_internal(&std::fs::read_to_string(&three).unwrap(), &three).unwrap();
    let dist = compute_size_distribution(&mols).unwrap();
    for (n, p) in dist.probs() {
        assert!(text.contains(&format!("{n}\t{}\t{p:.10}", dist.counts()[n])), "{text}");
    }
    let snr_rows = text.lines().skip_while(|l| !l.starts_with("t\talpha")).skip(1).count();
    assert_eq!(snr_rows, 21);
}

#[test]
fn train_sample_eval_pipeline() {
    let (dir, config) = tiny_setup();
    let out = dir.path().join("run");
    assert_eq!(gcdm("train", &config, &out, &[]).status.code(), Some(0));
    for file in ["checkpoint.ckpt", "loss_log.csv", "provenance.txt", "config.resolved.toml", "split.txt"] {
        assert!(out.join(file).is_file(), "{file}");
    }
    assert!(!out.join(".gcdm.lock").exists());
    let log = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("train,")).count(), 6);
    assert_eq!(log.lines().filter(|l| l.starts_with("val,")).count(), 2);
    let provenance = std::fs::read_to_string(out.join("provenance.txt")).unwrap();
    for key in ["config_sha256=", "seed=3", "version="] {
        assert!(provenance.contains(key), "{provenance}");
    }

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ckpt = format!("sampling.checkpoint={}", out.join("checkpoint.ckpt").display());
    for d in [&a, &b] {
        assert_eq!(gcdm("sample", &config, d, &["--override", &ckpt]).status.code(), Some(0));
    }
    for file in ["samples.mol", "samples.xyz", "samples.meta"] {
        let x = std::fs::read(a.join(file)).unwrap();
        assert_eq!(x, std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let meta = std::fs::read_to_string(a.join("samples.meta")).unwrap();
    for key in ["schedule_kind=polynomial", "steps=20", "seed=3", "checkpoint_sha256="] {
        assert!(meta.contains(key), "{meta}");
    }
    let sampled = std::fs::read_to_string(a.join("samples.mol")).unwrap();
    assert_eq!(parse_internal(&sampled, Path::new("s.mol")).unwrap().len(), 3);

    let other = gcdm("sample", &config, &dir.path().join("c"), &["--override", &ckpt, "--seed", "4"]);
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(
        std::fs::read(a.join("samples.mol")).unwrap(),
        std::fs::read(dir.path().join("c/samples.mol")).unwrap()
    );

    let eval = gcdm("eval", &config, &out, &["--override", "evaluation.nll_molecules=2", "--override", "evaluation.nll_t_samples=3"]);
    assert_eq!(eval.status.code(), Some(0));
    let kv = std::fs::read_to_string(out.join("report.kv")).unwrap();
    for key in ["sample_count=3", "atom_stability=", "validity=", "nll_bound_count=2", "provenance.checkpoint_sha256="] {
        assert!(kv.contains(key), "{kv}");
    }
}

#[test]
fn eval_of_a_sample_file_needs_no_checkpoint() {
    let (dir, config) = tiny_setup();
    let out = dir.path().join("eval");
    let samples = format!("evaluation.samples={}", repo_data("qm9_excerpt_1k.mol").display());
    let res = gcdm("eval", &config, &out, &["--override", &samples]);
    assert_eq!(res.status.code(), Some(0));
    let kv = std::fs::read_to_string(out.join("report.kv")).unwrap();
    assert!(kv.contains("sample_count=1000"));
    assert!(kv.contains("stable_molecule_count=956"));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (dir, config) = tiny_setup();
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    assert_eq!(gcdm("train", &config, &straight, &[]).status.code(), Some(0));
    assert_eq!(gcdm("train", &config, &split, &["--override", "training.steps=4"]).status.code(), Some(0));
    let resumed = gcdm("train", &config, &split, &["--override", "training.resume=true"]);
    assert_eq!(resumed.status.code(), Some(0));
    assert_eq!(
        std::fs::read(straight.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(split.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn missing_checkpoint_is_reported() {
    let (dir, config) = tiny_setup();
    for sub in ["sample", "eval"] {
        let res = gcdm(sub, &config, &dir.path().join("empty"), &[]);
        assert_eq!(res.status.code(), Some(1), "{sub}");
        assert!(stderr(&res).contains("checkpoint") && stderr(&res).contains("not found"), "{}", stderr(&res));
    }
}

#[test]
fn config_errors_exit_with_one() {
    let (dir, config) = tiny_setup();
    let out = dir.path().join("o");
    let cases: &[(&[&str], &str)] = &[
        (&["--override", "model.hidden=3"], "hidden"),
        (&["--override", "optimizer.learning_rate=-1"], "optimizer.learning_rate"),
        (&["--override", "model.num_layers=0"], "model.num_layers"),
        (&["--override", "schedule.steps=0"], "schedule"),
        (&["--override", "novalue"], "KEY=VALUE"),
        (&["--override", "data.path=missing.mol"], "data.path"),
        (&["--override", "bogus=1"], "bogus"),
    ];
    for (args, needle) in cases {
        let res = gcdm("train", &config, &out, args);
        assert_eq!(res.status.code(), Some(1), "{args:?}");
        assert!(stderr(&res).contains(needle), "{args:?}: {}", stderr(&res));
    }
    assert!(!out.exists(), "no work before validation");
    let res = run(bin().args(["train", "--config", "/nonexistent/run.toml"]));
    assert_eq!(res.status.code(), Some(1));
    let res = run(bin().arg("train"));
    assert_eq!(res.status.code(), Some(1));
    let res = run(bin().args(["inspect", "--config"]).arg(&config).env("GCDM_THREADS", "zero"));
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn locked_output_is_a_runtime_failure() {
    let (dir, config) = tiny_setup();
    let out = dir.path().join("locked");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".gcdm.lock"), "pid=1\n").unwrap();
    let res = gcdm("train", &config, &out, &[]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("locked"));
}

#[test]
fn thread_count_from_environment() {
    let (_dir, config) = tiny_setup();
    let res = run(bin().args(["inspect", "--config"]).arg(&config).env("GCDM_THREADS", "2"));
    assert_eq!(res.status.code(), Some(0));
}

#[test]
fn desk_config_runs_end_to_end() {
    let config = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("desk");
    let shrink = [
        "--override",
        "training.steps=2",
        "--override",
        "training.eval_every=0",
        "--override",
        "optimizer.batch_size=8",
        "--override",
        "sampling.count=2",
    ];
    assert_eq!(gcdm("train", &config, &out, &shrink).status.code(), Some(0));
    assert_eq!(gcdm("eval", &config, &out, &shrink).status.code(), Some(0));
    let kv = std::fs::read_to_string(out.join("report.kv")).unwrap();
    assert!(kv.contains("sample_count=2"));
}
