use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn mna(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mna"))
        .args(args)
        .env_remove("MNA_SEED")
        .output()
        .expect("spawn mna")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn synth(dir: &Path, seed: &str, counts: &str, dims: &str) -> Output {
    mna(&["synth", "--out", dir.to_str().unwrap(), "--seed", seed, "--counts", counts, "--dims", dims])
}

/// Hash over every file under `dir`, by relative path then contents.
fn tree_hash(dir: &Path) -> String {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for (p, bytes) in files {
        h.update(p.to_string_lossy().as_bytes());
        h.update(&bytes);
    }
    format!("{:x}", h.finalize())
}

const TINY_DIMS: &str = "12,14,12";

fn tiny_config(dir: &Path, manifest: &Path) -> PathBuf {
    let text = format!(
        "[paths]\nmanifest = {}\n\n[run]\nvariant = full\nseed = 3\nworkers = 1\n\n\
         [model]\nvolume_dims = {TINY_DIMS}\npatch_dims = 6,8,6\nchannels = 4,4,4,4\nfusion_width = 4\n\n\
         [augment]\ncopies = 1\n\n[stage1]\nmax_epochs = 2\n[stage2]\nmax_epochs = 3\n[stage3]\nmax_epochs = 3\n",
        manifest.display()
    );
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn tiny_setup() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, "1", "4,2,2", TINY_DIMS)), 0);
    let cfg = tiny_config(tmp.path(), &data.join("manifest.tsv"));
    (tmp, cfg)
}

#[test]
fn synth_default_counts_follow_the_cohort_table() {
    let tmp = TempDir::new().unwrap();
    let o = mna(&["synth", "--out", tmp.path().to_str().unwrap(), "--dims", TINY_DIMS]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("subjects\t204\tconverters\t104\tstable\t100"), "{}", stdout(&o));
    let manifest = fs::read_to_string(tmp.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(".mnav")).count(), 408);
}

#[test]
fn synth_smoke_counts_and_repeatability() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let o = synth(&a, "5", "4,2,2", TINY_DIMS);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("subjects\t8\t"));
    assert_eq!(code(&synth(&b, "5", "4,2,2", TINY_DIMS)), 0);
    assert_eq!(code(&synth(&c, "6", "4,2,2", TINY_DIMS)), 0);
    let hash = |d: &Path| {
        // Manifest rows hold absolute paths; compare the volumes and record table.
        fs::remove_file(d.join("manifest.tsv")).unwrap();
        tree_hash(d)
    };
    let (ha, hb, hc) = (hash(&a), hash(&b), hash(&c));
    assert_eq!(ha, hb);
    assert_ne!(ha, hc);
}

#[test]
fn synth_rejects_bad_counts() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().to_str().unwrap();
    for counts in ["4,2", "4,x,2", "4,0,2"] {
        let o = mna(&["synth", "--out", out, "--counts", counts, "--dims", TINY_DIMS]);
        assert_eq!(code(&o), 1, "{counts}");
    }
}

#[test]
fn unknown_flag_is_a_validation_error() {
    assert_eq!(code(&mna(&["train", "--bogus"])), 1);
    assert_eq!(code(&mna(&["--help"])), 0);
}

#[test]
fn stage_two_without_stage_one_names_the_missing_stage() {
    let (_tmp, cfg) = tiny_setup();
    let o = mna(&["train", "--config", cfg.to_str().unwrap(), "--stage", "2"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage 1"), "{err}");
}

#[test]
fn missing_config_fails() {
    let o = mna(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn train_all_then_evaluate_two_variants() {
    let (tmp, cfg) = tiny_setup();
    let cfg = cfg.to_str().unwrap();
    let o = mna(&["train", "--config", cfg, "--stage", "all"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = stdout(&o);
    for s in 1..=3 {
        assert!(log.contains(&format!("== stage {s} summary")), "{log}");
    }
    assert!(log.contains("checkpoints\t82/82"), "{log}");
    assert_eq!(fs::read_dir(tmp.path().join("run/checkpoints")).unwrap().count(), 82);

    let o = mna(&["train", "--config", cfg, "--variant", "no_attention", "--stage", "all"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("stage\t1\ttrained\t0\treused\t54"), "{}", stdout(&o));

    let report = tmp.path().join("report.tsv");
    let o = mna(&[
        "evaluate",
        "--config",
        cfg,
        "--variant",
        "full",
        "--variant",
        "no_attention",
        "--split",
        "test",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .skip_while(|l| !l.starts_with("[agreement]"))
        .skip(2)
        .collect();
    assert_eq!(rows.len(), 1);
    let cells: Vec<usize> = rows[0].split('\t').skip(2).map(|c| c.parse().unwrap()).collect();
    assert_eq!(cells.len(), 4);
    assert_eq!(cells.iter().sum::<usize>(), 2);
}

#[test]
fn evaluate_without_checkpoints_fails() {
    let (_tmp, cfg) = tiny_setup();
    let o = mna(&["evaluate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_relu_passes() {
    let o = mna(&["gradcheck", "--ops", "relu", "--trials", "50"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("relu\t")).count(), 2);
    assert!(out.contains("0 failed"));
}

#[test]
fn gradcheck_reports_corrupted_backward() {
    let o = mna(&["gradcheck", "--ops", "relu,matmul", "--trials", "5", "--inject-fault"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_unknown_op() {
    assert_eq!(code(&mna(&["gradcheck", "--ops", "tanh"])), 1);
}
