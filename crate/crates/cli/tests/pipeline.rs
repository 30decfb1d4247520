//! End-to-end checks of the command-line driver.

use std::path::Path;
use std::process::Command;

fn abnn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_abnn"))
}

fn write_idx_pair(dir: &Path, n: usize, side: usize, classes: usize) -> (String, String) {
    let images = dir.join("images-idx3-ubyte");
    let labels = dir.join("labels-idx1-ubyte");
    let mut img_bytes = Vec::new();
    img_bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    img_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(side as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(side as u32).to_be_bytes());
    let mut lbl_bytes = Vec::new();
    lbl_bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lbl_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    // Class k gets bright pixels in stripe k, so the task is learnable.
    for i in 0..n {
        let class = i % classes;
        lbl_bytes.push(class as u8);
        for p in 0..side * side {
            let stripe = p * classes / (side * side);
            img_bytes.push(if stripe == class { 220 } else { 20 });
        }
    }
    std::fs::write(&images, img_bytes).unwrap();
    std::fs::write(&labels, lbl_bytes).unwrap();
    (
        images.to_str().unwrap().to_string(),
        labels.to_str().unwrap().to_string(),
    )
}

#[test]
fn missing_checkpoint_fails_before_any_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let output = abnn()
        .args([
            "eval",
            "--seed",
            "1",
            "--model",
            dir.path().join("nope.abnn").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("model checkpoint") && stderr.contains("does not exist"),
        "stderr: {stderr}"
    );
    // Validation failed before the eval stage produced anything.
    assert!(!out.exists());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(
        !stdout.contains("clean accuracy"),
        "eval ran despite the missing checkpoint: {stdout}"
    );
}

#[test]
fn resolved_config_is_logged_before_work_starts() {
    let dir = tempfile::tempdir().unwrap();
    let output = abnn()
        .current_dir(dir.path())
        .args([
            "train", "--seed", "3", "--out", "m.abnn", "--defense", "adv_training",
            "--epochs", "1", "--batch-size", "10", "--classes", "2", "--dim", "4",
            "--per-class", "10", "--hidden", "4", "--train-gamma", "0.05",
            "--train-steps", "2", "--train-m-grad", "1",
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("# resolved configuration"));
    for key in ["seed = 3", "defense_kind = \"adv_training\"", "epochs = 1", "gamma = 0.05"] {
        assert!(stdout.contains(key), "resolved config lacks {key}:\n{stdout}");
    }
}

#[test]
fn sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let train = abnn()
        .current_dir(dir.path())
        .args([
            "train", "--seed", "5", "--out", "m.abnn", "--defense", "adv_bnn_naive",
            "--epochs", "2", "--batch-size", "16", "--classes", "3", "--dim", "8",
            "--per-class", "20", "--hidden", "8", "--train-gamma", "0.05",
            "--train-steps", "2", "--train-m-grad", "2",
        ])
        .output()
        .unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));

    let sweep = abnn()
        .current_dir(dir.path())
        .args([
            "sweep", "--seed", "6", "--model", "m.abnn", "--out", "sweep.csv",
            "--param", "m_grad", "--values", "1,5,10", "--gamma", "0.08",
            "--steps", "5", "--m-eval", "4", "--n-examples", "30",
            "--classes", "3", "--dim", "8",
        ])
        .output()
        .unwrap();
    assert!(sweep.status.success(), "{}", String::from_utf8_lossy(&sweep.stderr));

    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 3, "csv:\n{csv}");
    for (row, m) in rows.iter().zip(["1", "5", "10"]) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[7], m, "m_grad column in {row}");
        assert_eq!(fields[1], "averaged");
    }
}

#[test]
fn idx_training_and_evaluation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_idx_pair(dir.path(), 60, 4, 3);

    let train = abnn()
        .current_dir(dir.path())
        .args([
            "train", "--seed", "9", "--out", "m.abnn", "--defense", "adv_training",
            "--epochs", "8", "--batch-size", "15",
            "--data", "idx", "--idx-images", &images, "--idx-labels", &labels,
            "--hidden", "10", "--train-gamma", "0.05", "--train-steps", "2",
            "--train-m-grad", "1", "--lr", "0.01", "--optimizer", "adam",
        ])
        .output()
        .unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));

    let eval = abnn()
        .current_dir(dir.path())
        .args([
            "eval", "--seed", "10", "--model", "m.abnn", "--out", "report.csv",
            "--data", "idx", "--idx-images", &images, "--idx-labels", &labels,
            "--gammas", "0.05", "--attacks", "naive", "--steps", "4",
            "--m-eval", "4", "--n-examples", "60",
        ])
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));

    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "adv_training");
    let clean: f64 = fields[3].parse().unwrap();
    // The stripe task is trivially learnable; training must have worked.
    assert!(clean >= 0.9, "clean accuracy {clean} in {row}");
}

#[test]
fn report_rerenders_csv_to_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_idx_pair(dir.path(), 30, 4, 3);
    let train = abnn()
        .current_dir(dir.path())
        .args([
            "train", "--seed", "21", "--out", "m.abnn", "--defense", "adv_training",
            "--epochs", "1", "--batch-size", "10",
            "--data", "idx", "--idx-images", &images, "--idx-labels", &labels,
            "--hidden", "6", "--train-gamma", "0.05", "--train-steps", "1",
            "--train-m-grad", "1",
        ])
        .output()
        .unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let eval = abnn()
        .current_dir(dir.path())
        .args([
            "eval", "--seed", "22", "--model", "m.abnn", "--out", "report.csv",
            "--data", "idx", "--idx-images", &images, "--idx-labels", &labels,
            "--gammas", "0.03,0.06", "--attacks", "naive,averaged", "--steps", "3",
            "--m-eval", "2", "--m-grad", "2", "--n-examples", "30",
        ])
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));

    let report = abnn()
        .current_dir(dir.path())
        .args([
            "report", "--input", "report.csv", "--format", "markdown", "--out", "table.md",
        ])
        .output()
        .unwrap();
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    let md = std::fs::read_to_string(dir.path().join("table.md")).unwrap();
    assert!(md.starts_with("| defense | plain | naive γ=0.03 | averaged γ=0.03 | naive γ=0.06 | averaged γ=0.06 |"),
        "markdown:\n{md}");
    assert!(md.contains("| adv_training |"));
}

#[test]
fn attack_command_writes_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let train = abnn()
        .current_dir(dir.path())
        .args([
            "train", "--seed", "31", "--out", "m.abnn", "--defense", "adv_bnn_naive",
            "--epochs", "1", "--batch-size", "16", "--classes", "2", "--dim", "6",
            "--per-class", "16", "--hidden", "6", "--train-gamma", "0.05",
            "--train-steps", "2", "--train-m-grad", "1",
        ])
        .output()
        .unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let attack = abnn()
        .current_dir(dir.path())
        .args([
            "attack", "--seed", "32", "--model", "m.abnn", "--out", "row.csv",
            "--gamma", "0.08", "--attack", "averaged", "--steps", "4",
            "--m-grad", "3", "--m-eval", "4", "--n-examples", "20",
            "--classes", "2", "--dim", "6",
        ])
        .output()
        .unwrap();
    assert!(attack.status.success(), "{}", String::from_utf8_lossy(&attack.stderr));
    let csv = std::fs::read_to_string(dir.path().join("row.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "csv:\n{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("adv_bnn_naive,averaged,0.08,"));
}
