//! End-to-end tests of the `pso` binary and its file formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pso() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pso"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pso_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SMOKE: &str = "\
model.topology = fully_connected
model.width = 12
model.num_layers = 3
model.activation = tanh
instance.name = pso_lde
instance.alpha = 1.0
data.distribution = columns
data.dim = 1
data.dataset_size = 1000
down.kind = explicit
down.lo = -2.35
down.hi = 2.35
train.iterations = 100
train.batch_up = 25
train.batch_down = 25
train.warm_iters = 50
train.lr_min = 1e-4
train.seed = 5
train.checkpoint_period = 50
eval.test_size = 400
eval.eval_period = 20
output.csv = metrics.csv
";

fn write_smoke_config(dir: &Path) -> PathBuf {
    let path = dir.join("smoke.conf");
    std::fs::write(&path, format!("{SMOKE}output.dir = {}\n", dir.join("out").display()))
        .unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning pso");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// The metrics CSV minus its wall-time column (the one nondeterministic
/// field: it records elapsed seconds).
fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn train_smoke_writes_expected_artifacts() {
    let dir = tmp_dir("smoke");
    let cfg = write_smoke_config(&dir);
    run_ok(pso().args(["train", "--config"]).arg(&cfg));

    let csv = std::fs::read_to_string(dir.join("out/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,lr,psqr,lsqr,is_err,grad_norm,wall_time"
    );
    // iterations / eval_period + 1 rows (recorded at 0, 20, ..., 100)
    assert_eq!(lines.count(), 100 / 20 + 1);

    assert!(dir.join("out/summary.txt").exists());
    assert!(dir.join("out/checkpoint_final.ckpt").exists());
    assert!(dir.join("out/checkpoint_000000050.ckpt").exists());
}

#[test]
fn train_rejects_bad_alpha_naming_the_key() {
    let dir = tmp_dir("badalpha");
    let path = dir.join("bad.conf");
    std::fs::write(&path, SMOKE.replace("instance.alpha = 1.0", "instance.alpha = -1")).unwrap();
    let out = pso().args(["train", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("instance.alpha"), "stderr: {stderr}");
}

#[test]
fn train_rejects_unknown_keys() {
    let dir = tmp_dir("unknown");
    let path = dir.join("bad.conf");
    std::fs::write(&path, format!("{SMOKE}model.dropout = 0.5\n")).unwrap();
    let out = pso().args(["train", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("model.dropout"), "stderr: {stderr}");
}

#[test]
fn repeated_runs_are_deterministic_up_to_wall_time() {
    let dir = tmp_dir("det");
    let cfg = write_smoke_config(&dir);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    run_ok(pso().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_a));
    run_ok(pso().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_b));
    let csv_a = std::fs::read_to_string(out_a.join("metrics.csv")).unwrap();
    let csv_b = std::fs::read_to_string(out_b.join("metrics.csv")).unwrap();
    assert_eq!(strip_wall_time(&csv_a), strip_wall_time(&csv_b));

    // checkpoints are fully deterministic (no timing inside)
    let ck_a = std::fs::read(out_a.join("checkpoint_final.ckpt")).unwrap();
    let ck_b = std::fs::read(out_b.join("checkpoint_final.ckpt")).unwrap();
    assert_eq!(ck_a, ck_b);
}

#[test]
fn eval_with_training_seed_reproduces_trainer_metrics() {
    let dir = tmp_dir("eval");
    let cfg = write_smoke_config(&dir);
    run_ok(pso().args(["train", "--config"]).arg(&cfg));

    let eval_dir = dir.join("evalout");
    run_ok(
        pso()
            .args(["eval", "--seed", "5", "--test-size", "400", "--checkpoint"])
            .arg(dir.join("out/checkpoint_final.ckpt"))
            .arg("--out")
            .arg(&eval_dir),
    );
    let eval_txt = std::fs::read_to_string(eval_dir.join("eval.txt")).unwrap();
    let eval_lsqr: f64 = eval_txt
        .lines()
        .find_map(|l| l.strip_prefix("lsqr = "))
        .unwrap()
        .parse()
        .unwrap();

    let csv = std::fs::read_to_string(dir.join("out/metrics.csv")).unwrap();
    let last = csv.lines().last().unwrap();
    let train_lsqr: f64 = last.split(',').nth(3).unwrap().parse().unwrap();
    assert!(
        (eval_lsqr - train_lsqr).abs() <= 1e-12 * train_lsqr.abs().max(1.0),
        "eval {eval_lsqr} vs trainer {train_lsqr}"
    );
}

#[test]
fn eval_rejects_truncated_checkpoints() {
    let dir = tmp_dir("trunc");
    let cfg = write_smoke_config(&dir);
    run_ok(pso().args(["train", "--config"]).arg(&cfg));
    let ck_path = dir.join("out/checkpoint_final.ckpt");
    let bytes = std::fs::read(&ck_path).unwrap();
    let cut = dir.join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let out = pso().args(["eval", "--checkpoint"]).arg(&cut).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("checksum") || stderr.contains("truncated"),
        "stderr: {stderr}"
    );
}

#[test]
fn diag_scan_and_gramian_round_trip() {
    let dir = tmp_dir("diag");
    let cfg = write_smoke_config(&dir);
    run_ok(pso().args(["train", "--config"]).arg(&cfg));
    let ck = dir.join("out/checkpoint_final.ckpt");

    let diag_dir = dir.join("diag");
    run_ok(
        pso()
            .args(["diag", "--mode", "scan", "--probes", "100", "--checkpoint"])
            .arg(&ck)
            .arg("--out")
            .arg(&diag_dir),
    );
    let scan = std::fs::read_to_string(diag_dir.join("scan_raw.csv")).unwrap();
    // 100 probes -> header + 100*101/2 unordered pairs
    assert_eq!(scan.lines().count(), 1 + 100 * 101 / 2);

    run_ok(
        pso()
            .args(["diag", "--mode", "gramian", "--probes", "20", "--checkpoint"])
            .arg(&ck)
            .arg("--out")
            .arg(&diag_dir),
    );
    let g = pso_cli::sink::read_gramian(&diag_dir.join("gramian.bin")).unwrap();
    assert_eq!(g.n(), 20);
    // reimported matrix is bitwise what the library computes
    let ckpt = pso_cli::checkpoint::load(&ck).unwrap();
    let model = ckpt.to_model().unwrap();
    let down = ckpt.down.to_density().unwrap();
    let data = pso_core::dist::columns::<f64>(1).unwrap();
    let mut rng = pso_core::rng::stream_rng(0, pso_core::rng::Stream::Diag);
    use pso_core::dist::Density;
    let up_part = data.sample(&mut rng, 10);
    let down_part = down.sample(&mut rng, 10);
    let mut probes = pso_core::batch::Batch::zeros(20, 1);
    for i in 0..10 {
        probes.row_mut(i).copy_from_slice(up_part.row(i));
        probes.row_mut(10 + i).copy_from_slice(down_part.row(i));
    }
    let expect = pso_core::kernel::gramian(&model, &probes).unwrap();
    for (a, b) in g.flat().iter().zip(expect.flat()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    run_ok(
        pso()
            .args([
                "diag",
                "--mode",
                "differential",
                "--probes",
                "20",
                "--deltas",
                "1e-3,1e-2",
                "--checkpoint",
            ])
            .arg(&ck)
            .arg("--out")
            .arg(&diag_dir),
    );
    let diff = std::fs::read_to_string(diag_dir.join("differential.csv")).unwrap();
    assert_eq!(diff.lines().count(), 1 + 20 * 2);
}

#[test]
fn feasibility_subcommand_classifies() {
    let out = run_ok(pso().args([
        "feasibility",
        "--instance",
        "pso_lde",
        "--param",
        "alpha=0.25",
    ]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("feasible without range restriction"), "{stdout}");

    let out = run_ok(pso().args(["feasibility", "--instance", "gan_critic"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("range-restricted"), "{stdout}");

    let out = run_ok(pso().args(["feasibility", "--instance", "unit"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("infeasible"), "{stdout}");

    let out = pso()
        .args(["feasibility", "--instance", "no_such_thing"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn sample_subcommand_writes_csv_and_matrix() {
    let dir = tmp_dir("sample");
    run_ok(
        pso()
            .args([
                "sample",
                "--distribution",
                "columns",
                "--dim",
                "3",
                "--count",
                "250",
            ])
            .arg("--out")
            .arg(&dir),
    );
    let csv = std::fs::read_to_string(dir.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().count(), 250);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 3);

    run_ok(pso().args(["sample", "--matrix-a"]).arg("--out").arg(&dir));
    let m = std::fs::read_to_string(dir.join("matrix_a.csv")).unwrap();
    assert_eq!(m.lines().count(), 20);
}

#[test]
fn external_dataset_training_runs_without_truth() {
    let dir = tmp_dir("extdata");
    // 2-dim ring-ish data dumped to CSV
    let mut rows = String::new();
    for i in 0..2000 {
        let t = i as f64 * 0.01;
        rows.push_str(&format!("{},{}\n", t.sin() + 0.001 * i as f64, t.cos()));
    }
    let data_path = dir.join("data.csv");
    std::fs::write(&data_path, rows).unwrap();

    let cfg_text = format!(
        "\
model.topology = fully_connected
model.width = 8
model.num_layers = 3
model.activation = tanh
instance.name = nce
data.distribution = columns
data.dim = 2
data.dataset_path = {}
down.kind = gaussian_fit
train.iterations = 50
train.batch_up = 20
train.batch_down = 20
train.warm_iters = 10
train.lr_min = 1e-4
train.seed = 9
eval.test_size = 100
eval.eval_period = 25
output.dir = {}
",
        data_path.display(),
        dir.join("out").display()
    );
    let cfg = dir.join("ext.conf");
    std::fs::write(&cfg, cfg_text).unwrap();
    run_ok(pso().args(["train", "--config"]).arg(&cfg));
    let csv = std::fs::read_to_string(dir.join("out/metrics.csv")).unwrap();
    // no analytic truth: psqr/lsqr columns are NaN, is_err is finite
    let last = csv.lines().last().unwrap();
    let cells: Vec<&str> = last.split(',').collect();
    assert!(cells[2].contains("NaN"));
    let is_err: f64 = cells[4].parse().unwrap();
    assert!(is_err.is_finite());
}

#[test]
fn numeric_blowup_aborts_naming_last_checkpoint() {
    let dir = tmp_dir("blowup");
    let path = dir.join("blowup.conf");
    // unbounded magnitudes plus an absurd learning rate overflow quickly
    let text = SMOKE
        .replace("instance.name = pso_lde", "instance.name = is")
        .replace("instance.alpha = 1.0", "")
        .replace("train.checkpoint_period = 50", "train.checkpoint_period = 1")
        .replace("train.lr_min = 1e-4", "train.lr_min = 1000000")
        + "train.lr0 = 1000000\n"
        + &format!("output.dir = {}\n", dir.join("out").display());
    std::fs::write(&path, text).unwrap();
    let out = pso().args(["train", "--config"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("aborted"), "stderr: {stderr}");
    assert!(stderr.contains("checkpoint"), "stderr: {stderr}");
}
