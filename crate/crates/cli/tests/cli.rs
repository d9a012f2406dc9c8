use std::path::Path;
use std::process::{Command, Output};

fn normsoft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normsoft"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = normsoft(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    normsoft(dir, args).status.code().unwrap()
}

fn small_data(dir: &Path) {
    ok(
        dir,
        &[
            "gen",
            "--classes",
            "5",
            "--per-class",
            "12",
            "--dim",
            "8",
            "--seed",
            "1",
            "-o",
            "data.csv",
        ],
    );
}

#[test]
fn gen_writes_expected_rows_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let stdout = ok(
        d,
        &[
            "gen",
            "--classes",
            "20",
            "--per-class",
            "100",
            "--dim",
            "64",
            "--seed",
            "7",
            "-o",
            "a.csv",
        ],
    );
    assert!(stdout.contains("N=2000 F=64 classes=20"), "{stdout}");
    ok(
        d,
        &[
            "gen",
            "--classes",
            "20",
            "--per-class",
            "100",
            "--dim",
            "64",
            "--seed",
            "7",
            "-o",
            "b.csv",
        ],
    );
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 2001);
    let cfg = std::fs::read_to_string(d.join("gen.config")).unwrap();
    assert!(cfg.contains("seed=7") && cfg.contains("per_class=100"));
}

#[test]
fn gen_rejects_single_sample_classes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(tmp.path(), &["gen", "--per-class", "1"]), 2);
}

#[test]
fn train_embed_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(
        d,
        &[
            "train",
            "--data",
            "data.csv",
            "--epochs",
            "3",
            "--samples-per-class",
            "15",
            "--embed-dim",
            "6",
            "--out",
            "run",
        ],
    );
    let history = std::fs::read_to_string(d.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("epoch,loss,lr\n"));
    let cfg = std::fs::read_to_string(d.join("run/train.config")).unwrap();
    assert!(cfg.contains("embed_dim=6") && cfg.contains("temperature=0.05") && cfg.contains("momentum=0.9"));

    ok(
        d,
        &[
            "embed",
            "--checkpoint",
            "run/model.pxe",
            "--data",
            "data.csv",
            "--out",
            "run",
            "--codes",
        ],
    );
    let emb = std::fs::read(d.join("run/embeddings.emb")).unwrap();
    assert_eq!(&emb[..4], b"EMB1");
    assert_eq!(emb.len(), 12 + 60 * 6 * 4);
    let codes = std::fs::read(d.join("run/codes.bin")).unwrap();
    assert_eq!(codes.len(), 12 + 60 * 8);

    let text = ok(
        d,
        &[
            "eval",
            "--embeddings",
            "run/embeddings.emb",
            "--labels",
            "run/labels.txt",
            "--out",
            "run",
            "--binary",
        ],
    );
    assert!(text.contains("FLOAT") && text.contains("BINARY"));
    let report = std::fs::read_to_string(d.join("run/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "mode,R@1,R@2,R@4,R@8,NMI");
    assert!(lines[1].starts_with("FLOAT,") && lines[2].starts_with("BINARY,"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    std::fs::write(
        d.join("my.config"),
        "epochs=2\nembed_dim=4\nsamples_per_class=15\nlr=0.05\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "train",
            "--data",
            "data.csv",
            "--config",
            "my.config",
            "--lr",
            "0.02",
            "--out",
            "run",
        ],
    );
    let cfg = std::fs::read_to_string(d.join("run/train.config")).unwrap();
    assert!(
        cfg.contains("epochs=2") && cfg.contains("lr=0.02") && cfg.contains("embed_dim=4"),
        "{cfg}"
    );
    // the resolved config reproduces the run
    ok(d, &["train", "--config", "run/train.config", "--out", "again"]);
    assert_eq!(
        std::fs::read(d.join("run/model.pxe")).unwrap(),
        std::fs::read(d.join("again/model.pxe")).unwrap()
    );
    std::fs::write(d.join("bad.config"), "no_such_key=1\n").unwrap();
    assert_eq!(code(d, &["train", "--data", "data.csv", "--config", "bad.config"]), 2);
}

#[test]
fn lmcl_and_subsampled_training_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    for extra in [
        &["--loss", "lmcl", "--scale", "30", "--margin", "0.35"][..],
        &["--subsample", "0.5"],
        &["--loss", "nca", "--sequential"],
        &["--hidden", "10"],
    ] {
        let mut args = vec![
            "train",
            "--data",
            "data.csv",
            "--epochs",
            "2",
            "--samples-per-class",
            "15",
            "--out",
            "run",
        ];
        args.extend_from_slice(extra);
        ok(d, &args);
    }
}

#[test]
fn exit_codes_for_bad_input_and_divergence() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    assert_eq!(code(d, &["train", "--data", "missing.csv"]), 2);
    std::fs::write(d.join("broken.csv"), "0,1,2\n1,x,3\n").unwrap();
    assert_eq!(code(d, &["train", "--data", "broken.csv"]), 2);
    let out = normsoft(
        d,
        &[
            "train",
            "--data",
            "data.csv",
            "--lr",
            "1e300",
            "--epochs",
            "3",
            "--samples-per-class",
            "15",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration"));
    assert_eq!(code(d, &["train", "--data", "data.csv", "--samples-per-class", "3"]), 2);
}

#[test]
fn embed_rejects_mismatched_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    ok(
        d,
        &[
            "train",
            "--data",
            "data.csv",
            "--epochs",
            "1",
            "--samples-per-class",
            "15",
            "--out",
            "run",
        ],
    );
    ok(
        d,
        &[
            "gen",
            "--classes",
            "5",
            "--per-class",
            "4",
            "--dim",
            "9",
            "-o",
            "wide.csv",
        ],
    );
    assert_eq!(
        code(d, &["embed", "--checkpoint", "run/model.pxe", "--data", "wide.csv"]),
        2
    );
}

/// Three classes, each a pair of identical unit vectors.
fn duplicated_pairs(d: &Path) {
    let mut emb = b"EMB1".to_vec();
    emb.extend(6u32.to_le_bytes());
    emb.extend(3u32.to_le_bytes());
    for i in 0..6 {
        for j in 0..3 {
            emb.extend((if i % 3 == j { 1f32 } else { 0f32 }).to_le_bytes());
        }
    }
    std::fs::write(d.join("pairs.emb"), emb).unwrap();
    std::fs::write(d.join("pairs.txt"), "0\n1\n2\n0\n1\n2\n").unwrap();
}

#[test]
fn eval_duplicated_pairs_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    duplicated_pairs(d);
    ok(
        d,
        &[
            "eval",
            "--embeddings",
            "pairs.emb",
            "--labels",
            "pairs.txt",
            "--ks",
            "1",
        ],
    );
    assert_eq!(
        std::fs::read_to_string(d.join("report.csv")).unwrap(),
        "mode,R@1,NMI\nFLOAT,1,1\n"
    );
    assert_eq!(
        code(
            d,
            &["eval", "--embeddings", "pairs.emb", "--labels", "pairs.txt", "--sop"]
        ),
        2
    );
}

#[test]
fn eval_sop_ks_and_binary_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen",
            "--classes",
            "30",
            "--per-class",
            "5",
            "--dim",
            "8",
            "-o",
            "data.csv",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--data",
            "data.csv",
            "--epochs",
            "1",
            "--out",
            "run",
            "--samples-per-class",
            "15",
        ],
    );
    ok(
        d,
        &[
            "embed",
            "--checkpoint",
            "run/model.pxe",
            "--data",
            "data.csv",
            "--out",
            "run",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--embeddings",
            "run/embeddings.emb",
            "--labels",
            "run/labels.txt",
            "--sop",
            "--binary",
            "--out",
            "run",
        ],
    );
    let report = std::fs::read_to_string(d.join("run/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "mode,R@1,R@10,R@100,NMI");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2].split(',').count(), 5);
}

#[test]
fn sweep_records_error_rows_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_data(d);
    let csv = ok(
        d,
        &[
            "sweep",
            "--data",
            "data.csv",
            "--axis",
            "samples-per-class",
            "--values",
            "1,5",
            "--batch-size",
            "10",
            "--epochs",
            "2",
            "--test-per-class",
            "4",
            "--out",
            "sw",
        ],
    );
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "samples-per-class,R@1,R@2,R@4,R@8,NMI,binary_R@1,wall_time_secs,error"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,,") && lines[1].contains("classes"));
    assert!(lines[2].starts_with("5,") && lines[2].ends_with(','));
    assert_eq!(std::fs::read_to_string(d.join("sw/sweep.csv")).unwrap(), csv);
    assert_eq!(
        code(d, &["sweep", "--data", "data.csv", "--axis", "depth", "--values", "1"]),
        2
    );
}

#[test]
fn gradcheck_filter_and_negative_control() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let stdout = ok(d, &["gradcheck", "--loss", "nca", "--instances", "5"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("nca")).count(), 2);
    assert!(!stdout.contains("lmcl"));
    assert!(stdout.contains("gradcheck PASS"));

    let out = normsoft(
        d,
        &[
            "gradcheck",
            "--loss",
            "norm-softmax",
            "--instances",
            "2",
            "--inject-sign-flip",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL") && stdout.contains("worst="));
    assert_eq!(code(d, &["gradcheck", "--loss", "hinge"]), 2);
}
