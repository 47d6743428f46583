use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sha2::{Digest, Sha256};

fn hastcw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hastcw"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _root: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
    work: PathBuf,
}

/// A small dataset and a one-epoch model, built once through the CLI.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let model = root.path().join("model");
        let config = root.path().join("train.cfg");
        std::fs::write(&config, "epochs = 1\nlatent_dim = 16\nt_thre = 5\n").unwrap();
        let out = hastcw(&[
            "gen-data",
            "--out",
            s(&data),
            "--seed",
            "4",
            "--per-leaf",
            "10",
            "--image-size",
            "16",
            "--noise",
            "0.05",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let out = hastcw(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&config),
            "--out",
            s(&model),
            "--seed",
            "3",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(stdout.contains("test_accuracy = "), "{stdout}");
        let work = root.path().join("work");
        std::fs::create_dir_all(&work).unwrap();
        Fixture {
            data,
            model,
            work,
            _root: root,
        }
    })
}

fn hashes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let h = Sha256::digest(std::fs::read(&p).unwrap()).to_vec();
            (p, h)
        })
        .collect()
}

#[test]
fn dataset_and_checkpoint_files_exist() {
    let f = fixture();
    for name in ["images.hcwt", "labels.hcwt", "split.txt", "tree.txt"] {
        assert!(f.data.join(name).is_file(), "{name}");
    }
    for name in [
        "config.txt",
        "tree.txt",
        "hcw.q.hcwt",
        "hcw.w.hcwt",
        "hcw.mu.hcwt",
        "report.csv",
        "q_trace.csv",
    ] {
        assert!(f.model.join(name).is_file(), "{name}");
    }
}

#[test]
fn eval_prints_metrics_for_each_split() {
    let f = fixture();
    for split in ["train", "val", "test"] {
        let out = hastcw(&[
            "eval",
            "--model",
            s(&f.model),
            "--data",
            s(&f.data),
            "--split",
            split,
        ]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("accuracy"), "{text}");
    }
}

#[test]
fn top_activations_csv_is_ranked() {
    let f = fixture();
    let out = hastcw(&[
        "top-activations",
        "--model",
        s(&f.model),
        "--data",
        s(&f.data),
        "--concept",
        "Citrus",
        "--k",
        "5",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rank,sample_index,concept,activation");
    assert_eq!(lines.len(), 6);
    let values: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
    for (i, l) in lines[1..].iter().enumerate() {
        assert!(l.starts_with(&format!("{},", i + 1)));
        assert!(l.contains(",Citrus,"));
    }
}

#[test]
fn project_writes_one_row_per_test_image() {
    let f = fixture();
    let out_path = f.work.join("proj.csv");
    let out = hastcw(&[
        "project",
        "--model",
        s(&f.model),
        "--data",
        s(&f.data),
        "--cx",
        "Fruit",
        "--cy",
        "Weed",
        "--out",
        s(&out_path),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&out_path).unwrap();
    let n_rows = text.lines().count() - 1;
    // 9 leaves, 10 images each, 20% held out for test.
    assert_eq!(n_rows, 18);
    assert!(text.starts_with("sample_index,label_name,activation_x,activation_y\n"));
}

#[test]
fn activation_tree_lists_every_concept() {
    let f = fixture();
    let out = hastcw(&[
        "activation-tree",
        "--model",
        s(&f.model),
        "--data",
        s(&f.data),
        "--index",
        "0",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 17);
    assert!(
        text.lines().any(|l| l.starts_with("    Nutsedge: ")),
        "{text}"
    );
}

#[test]
fn analysis_commands_leave_inputs_untouched() {
    let f = fixture();
    let before = (hashes(&f.model), hashes(&f.data));
    let out_path = f.work.join("ro.csv");
    for args in [
        vec!["top-activations", "--concept", "Apple", "--k", "3"],
        vec![
            "project",
            "--cx",
            "Apple",
            "--cy",
            "Gala",
            "--out",
            s(&out_path),
        ],
        vec!["activation-tree", "--index", "5"],
        vec!["eval", "--split", "test"],
    ] {
        let mut full = args.clone();
        full.extend(["--model", s(&f.model), "--data", s(&f.data)]);
        assert!(hastcw(&full).status.success(), "{args:?}");
    }
    assert_eq!(before, (hashes(&f.model), hashes(&f.data)));
}

#[test]
fn validation_errors_exit_with_two() {
    let f = fixture();
    let cases: Vec<Vec<&str>> = vec![
        vec!["top-activations", "--concept", "Banana", "--k", "3"],
        vec!["top-activations", "--concept", "Apple", "--k", "0"],
        vec!["activation-tree", "--index", "100000"],
        vec![
            "project",
            "--cx",
            "Apple",
            "--cy",
            "Nope",
            "--out",
            "/dev/null",
        ],
    ];
    for args in cases {
        let mut full = args.clone();
        full.extend(["--model", s(&f.model), "--data", s(&f.data)]);
        assert_eq!(hastcw(&full).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(
        hastcw(&["eval", "--model", "m", "--data", "d", "--split", "holdout"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(hastcw(&["bogus"]).status.code(), Some(2));
    let bad = hastcw(&[
        "gen-data",
        "--out",
        s(&f.work.join("small")),
        "--seed",
        "1",
        "--per-leaf",
        "3",
        "--image-size",
        "16",
        "--noise",
        "0.05",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn missing_or_corrupt_files_exit_with_four() {
    let f = fixture();
    let missing = f.work.join("does_not_exist");
    let out = hastcw(&[
        "eval",
        "--model",
        s(&missing),
        "--data",
        s(&f.data),
        "--split",
        "test",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let copy = f.work.join("corrupt_data");
    std::fs::create_dir_all(&copy).unwrap();
    for entry in std::fs::read_dir(&f.data).unwrap() {
        let p = entry.unwrap().path();
        std::fs::copy(&p, copy.join(p.file_name().unwrap())).unwrap();
    }
    let labels = copy.join("labels.hcwt");
    let mut bytes = std::fs::read(&labels).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&labels, bytes).unwrap();
    let out = hastcw(&[
        "eval",
        "--model",
        s(&f.model),
        "--data",
        s(&copy),
        "--split",
        "test",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bad_config_key_is_rejected() {
    let f = fixture();
    let cfg = f.work.join("bad.cfg");
    std::fs::write(&cfg, "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let out = hastcw(&[
        "train",
        "--data",
        s(&f.data),
        "--config",
        s(&cfg),
        "--out",
        s(&f.work.join("never")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!f.work.join("never").exists());
}
