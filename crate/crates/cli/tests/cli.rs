use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdbert::checkpoint::Checkpoint;
use sdbert::data::{build_vocab, save_tsv, synth_dataset, Example};
use sdbert::model::{count_parameters, init_params, ModelConfig};
use sdbert::pipeline::OUTPUT_DIR_ENV;
use serde_json::Value;

fn sdbert(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdbert"));
    cmd.args(args);
    match out_dir {
        Some(dir) => cmd.env(OUTPUT_DIR_ENV, dir),
        None => cmd.env_remove(OUTPUT_DIR_ENV),
    };
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn read_report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn curve(report: &Value, field: &str) -> Vec<f64> {
    report["epochs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e[field].as_f64().unwrap())
        .collect()
}

const SMALL: &str = "\
synth_count=240
synth_seed=3
d_model=16
d_ff=32
max_len=40
vocab_size=200
teacher_epochs=2
student_epochs=2
batch_size=16
";

#[test]
fn mask_dump_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let out = sdbert(
        &[
            "mask-dump",
            "--n",
            "4",
            "--g",
            "1",
            "--w",
            "1",
            "--r",
            "0",
            "--seed",
            "0",
        ],
        None,
    );
    assert_eq!(code(&out), 0);
    assert_eq!(
        stdout(&out),
        fs::read_to_string(golden.join("mask_n4_g1_w1_r0.txt")).unwrap()
    );

    let out = sdbert(&["mask-dump", "--n", "2", "--g", "2"], None);
    assert_eq!(code(&out), 0);
    assert_eq!(
        stdout(&out),
        fs::read_to_string(golden.join("mask_n2_g2.txt")).unwrap()
    );
}

#[test]
fn mask_dump_is_repeatable_and_validates() {
    let args = [
        "mask-dump",
        "--n",
        "64",
        "--g",
        "2",
        "--w",
        "3",
        "--r",
        "4",
        "--seed",
        "9",
    ];
    let a = sdbert(&args, None);
    let b = sdbert(&args, None);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a).lines().count(), 64);

    let bad = sdbert(&["mask-dump", "--n", "3", "--g", "4"], None);
    assert_eq!(code(&bad), 2);
    assert!(!bad.stderr.is_empty());
}

#[test]
fn bench_prints_json() {
    let out = sdbert(
        &[
            "bench",
            "--lengths",
            "16,32,64",
            "--d-model",
            "8",
            "--heads",
            "2",
            "--reps",
            "3",
        ],
        None,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let result: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let points = result["points"].as_array().unwrap();
    assert_eq!(points.len(), 3);
    assert_eq!(points[2]["n"], 64);
    assert!(result["full_slope"].as_f64().unwrap().is_finite());
    assert!(result["sparse_slope"].as_f64().unwrap().is_finite());

    let bad = sdbert(&["bench", "--lengths", "32", "--reps", "3"], None);
    assert_eq!(code(&bad), 2);
}

#[test]
fn invalid_configs_exit_2_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(
        dir.path(),
        "missing.cfg",
        "train_data=/nonexistent/train.tsv\n",
    );
    let out = sdbert(
        &["train-teacher", "--config", missing.to_str().unwrap()],
        Some(dir.path()),
    );
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("teacher.ckpt").exists());

    let unknown = write_config(dir.path(), "unknown.cfg", "learning_rat=0.1\n");
    assert_eq!(
        code(&sdbert(
            &["train-teacher", "--config", unknown.to_str().unwrap()],
            Some(dir.path())
        )),
        2
    );

    let absent = dir.path().join("absent.cfg");
    assert_eq!(
        code(&sdbert(
            &["train-teacher", "--config", absent.to_str().unwrap()],
            Some(dir.path())
        )),
        2
    );

    let teacher = dir.path().join("no_teacher.ckpt");
    let ok_cfg = write_config(dir.path(), "ok.cfg", SMALL);
    let out = sdbert(
        &[
            "distill",
            "--config",
            ok_cfg.to_str().unwrap(),
            "--teacher",
            teacher.to_str().unwrap(),
        ],
        Some(dir.path()),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "hot.cfg",
        &format!("{SMALL}learning_rate=1e200\n"),
    );
    let out = sdbert(
        &["train-teacher", "--config", cfg.to_str().unwrap()],
        Some(dir.path()),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_reports_accuracy_with_four_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(40, 5, 0.0).unwrap();
    let tsv = dir.path().join("balanced.tsv");
    save_tsv(&tsv, &data).unwrap();

    let config = ModelConfig {
        d_model: 8,
        d_ff: 16,
        vocab_size: 200,
        max_len: 40,
        ..ModelConfig::desk_student()
    };
    let mut params = init_params(&config, 1).unwrap();
    params.classifier.data_mut().fill(0.0);
    params
        .classifier_bias
        .data_mut()
        .copy_from_slice(&[2.0, -2.0]);
    let ckpt = dir.path().join("constant.ckpt");
    Checkpoint {
        config,
        vocab: Some(build_vocab(&data, 200).unwrap()),
        params,
    }
    .save(&ckpt)
    .unwrap();

    let out = sdbert(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            tsv.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "0.5000\n");

    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let out = sdbert(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            empty.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 2);

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = sdbert(
        &[
            "eval",
            "--ckpt",
            garbage.to_str().unwrap(),
            "--data",
            tsv.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn memorized_training_set_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<Example> = synth_dataset(48, 21, 0.0).unwrap();
    let tsv = dir.path().join("train.tsv");
    save_tsv(&tsv, &data).unwrap();
    let cfg = write_config(
        dir.path(),
        "memorize.cfg",
        &format!(
            "train_data={}\neval_data={}\nd_model=16\nd_ff=32\nmax_len=40\nvocab_size=200\n\
             teacher_epochs=40\nbatch_size=8\nlearning_rate=3e-3\n",
            tsv.display(),
            tsv.display()
        ),
    );
    let out = sdbert(
        &["train-teacher", "--config", cfg.to_str().unwrap()],
        Some(dir.path()),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("teacher.ckpt");
    let out = sdbert(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            tsv.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "1.0000\n");
}

#[test]
fn alpha_one_distillation_matches_supervised_student() {
    let dir = tempfile::tempdir().unwrap();
    let teacher_dir = dir.path().join("teacher");
    let kd_dir = dir.path().join("kd");
    let sup_dir = dir.path().join("supervised");

    let base = write_config(dir.path(), "base.cfg", SMALL);
    assert_eq!(
        code(&sdbert(
            &["train-teacher", "--config", base.to_str().unwrap()],
            Some(&teacher_dir)
        )),
        0
    );

    let kd_cfg = write_config(dir.path(), "kd.cfg", &format!("{SMALL}alpha=1\n"));
    let teacher = teacher_dir.join("teacher.ckpt");
    let out = sdbert(
        &[
            "distill",
            "--config",
            kd_cfg.to_str().unwrap(),
            "--teacher",
            teacher.to_str().unwrap(),
        ],
        Some(&kd_dir),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    // A supervised run of the student shape through the teacher phase.
    let sup_cfg = write_config(
        dir.path(),
        "sup.cfg",
        &format!("{SMALL}teacher_layers=1\nteacher_heads=2\n"),
    );
    assert_eq!(
        code(&sdbert(
            &["train-teacher", "--config", sup_cfg.to_str().unwrap()],
            Some(&sup_dir)
        )),
        0
    );

    let kd = read_report(&kd_dir.join("student_report.json"));
    let sup = read_report(&sup_dir.join("teacher_report.json"));
    assert_eq!(curve(&kd, "ce"), curve(&sup, "ce"));
    assert_eq!(curve(&kd, "combined"), curve(&sup, "combined"));
    assert!(curve(&kd, "distill").iter().all(|&d| d > 0.0));
    assert_eq!(kd["accuracy"], sup["accuracy"]);
    assert_eq!(
        fs::read(kd_dir.join("student.ckpt")).unwrap(),
        fs::read(sup_dir.join("teacher.ckpt")).unwrap()
    );

    let mismatched = write_config(
        dir.path(),
        "other.cfg",
        &SMALL.replace("synth_seed=3", "synth_seed=4"),
    );
    let out = sdbert(
        &[
            "distill",
            "--config",
            mismatched.to_str().unwrap(),
            "--teacher",
            teacher.to_str().unwrap(),
        ],
        Some(&dir.path().join("other")),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn desk_defaults_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "desk.cfg", "preset=desk\n");
    let out_dir = dir.path().join("out");

    let out = sdbert(
        &["train-teacher", "--config", cfg.to_str().unwrap()],
        Some(&out_dir),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let teacher_ckpt = out_dir.join("teacher.ckpt");
    assert!(teacher_ckpt.exists());
    assert!(out_dir.join("vocab.txt").exists());
    let teacher = read_report(&out_dir.join("teacher_report.json"));
    let teacher_acc = teacher["accuracy"].as_f64().unwrap();
    assert!(teacher_acc >= 0.95, "{teacher_acc}");
    assert!(teacher["wall_clock_seconds"].as_f64().unwrap() > 0.0);

    let out = sdbert(
        &[
            "distill",
            "--config",
            cfg.to_str().unwrap(),
            "--teacher",
            teacher_ckpt.to_str().unwrap(),
        ],
        Some(&out_dir),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let student = read_report(&out_dir.join("student_report.json"));
    let student_acc = student["accuracy"].as_f64().unwrap();
    assert!(
        student_acc >= 0.9 * teacher_acc,
        "{student_acc} vs {teacher_acc}"
    );
    assert!(curve(&student, "ce")
        .iter()
        .all(|v| v.is_finite() && *v > 0.0));
    assert!(curve(&student, "distill")
        .iter()
        .all(|v| v.is_finite() && *v > 0.0));

    let teacher_params = Checkpoint::load(&teacher_ckpt)
        .unwrap()
        .params
        .num_elements();
    let student_params = Checkpoint::load(out_dir.join("student.ckpt"))
        .unwrap()
        .params
        .num_elements();
    assert!(student_params < teacher_params);
    assert_eq!(
        teacher_params,
        count_parameters(&ModelConfig::desk_teacher())
    );
}

#[test]
fn reruns_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.cfg", SMALL);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = sdbert(
            &["train-teacher", "--config", cfg.to_str().unwrap()],
            Some(&out_dir),
        );
        assert_eq!(code(&out), 0);
        let report = read_report(&out_dir.join("teacher_report.json"));
        (report, fs::read(out_dir.join("teacher.ckpt")).unwrap())
    };
    let (ra, ca) = run("a");
    let (rb, cb) = run("b");
    assert_eq!(ra["accuracy"].to_string(), rb["accuracy"].to_string());
    assert_eq!(ra["epochs"], rb["epochs"]);
    assert_eq!(ca, cb);
}
