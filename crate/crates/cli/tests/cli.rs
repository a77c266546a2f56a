use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

use s3dcnn::optimizer::{DEFAULT_LEARNING_RATE, DEFAULT_LR_DECAY, DEFAULT_MOMENTUM};
use s3dcnn::sparse_grid::svox_bytes;
use s3dcnn::synth::{self, write_corpus, ShapeKind};
use s3dcnn::trainer::{DEFAULT_BATCH_SIZE, DEFAULT_MARGIN};
use s3dcnn::voxelizer::{voxelize, DEFAULT_PAD};
use s3dcnn::{RenderConfig, SparseGrid};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_s3dcnn"));
    c.env("RUST_LOG", "warn");
    c
}

fn stdout(c: &mut Command) -> String {
    let out = c.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(c: &mut Command) -> i32 {
    c.output().unwrap().status.code().unwrap()
}

/// Micro network (14^3 field) so training runs take a second or two.
const MICRO: [&str; 6] = ["--pad", "14", "--widths", "4,6,5", "-r", "10"];

fn corpus(dir: &Path, kinds: &[ShapeKind], train: usize, test: usize) {
    write_corpus(dir, kinds, train, test, 42).unwrap();
}

fn train_micro(data: &Path, out: &Path, extra: &[&str]) -> Command {
    let mut c = bin();
    c.arg("--threads").arg("1").arg("train").arg("--data").arg(data).arg("--out").arg(out);
    c.args(MICRO).args(["--epochs", "2", "--batch", "6", "--lr", "0.01", "--momentum", "0.9", "--seed", "3"]);
    c.args(extra);
    c
}

#[test]
fn voxelize_cube_matches_library_bytes() {
    let dir = TempDir::new().unwrap();
    let off = dir.path().join("cube.off");
    fs::write(&off, synth::cube().to_off()).unwrap();
    let svox = dir.path().join("cube.svox");
    let text = stdout(bin().args(["voxelize", "-r", "4", "--pad", "4", "--input"]).arg(&off).arg("--output").arg(&svox));
    assert!(text.contains("56 sites"), "{text}");
    let grid: SparseGrid<f32> = voxelize(&synth::cube().normalized().unwrap(), &RenderConfig::new(4, 4).unwrap()).unwrap();
    assert_eq!(fs::read(&svox).unwrap(), svox_bytes(&grid, false));
}

#[test]
fn voxelize_rejects_oversized_render() {
    let dir = TempDir::new().unwrap();
    let off = dir.path().join("cube.off");
    fs::write(&off, synth::cube().to_off()).unwrap();
    let mut c = bin();
    c.args(["voxelize", "-r", "127", "--pad", "126", "--input"]).arg(&off).arg("--output").arg(dir.path().join("x.svox"));
    assert_eq!(code(&mut c), 1);
    assert_eq!(code(bin().args(["voxelize", "--bogus"])), 1);
}

#[test]
fn voxelize_directory_writes_one_file_per_mesh() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    corpus(&data, &[ShapeKind::Cube, ShapeKind::Sphere], 2, 1);
    let out = dir.path().join("vox");
    let text = stdout(bin().args(["voxelize", "-r", "12", "--pad", "16", "--input"]).arg(&data).arg("--output").arg(&out));
    let written: Vec<_> = walk(&out).into_iter().filter(|p| p.ends_with(".svox")).collect();
    assert_eq!(written.len(), 6);
    assert!(text.contains("voxelized 6/6 meshes"), "{text}");

    fs::write(data.join("cube/train/broken.off"), "OFF\n3 1 0\n0 0 0\n").unwrap();
    let mut c = bin();
    c.args(["voxelize", "-r", "12", "--pad", "16", "--input"]).arg(&data).arg("--output").arg(&out);
    let o = c.output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.off"));
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p.display().to_string());
        }
    }
    out
}

#[test]
fn help_lists_library_defaults() {
    let help = stdout(bin().args(["train", "--help"]));
    for (flag, value) in [
        ("--lr", DEFAULT_LEARNING_RATE.to_string()),
        ("--momentum", DEFAULT_MOMENTUM.to_string()),
        ("--lr-decay", DEFAULT_LR_DECAY.to_string()),
        ("--margin", DEFAULT_MARGIN.to_string()),
        ("--batch", DEFAULT_BATCH_SIZE.to_string()),
        ("--pad", DEFAULT_PAD.to_string()),
        ("--epochs", "200".to_string()),
    ] {
        let line = help.lines().find(|l| l.trim_start().starts_with(flag) && l.contains(&format!("{flag} <")));
        let line = line.unwrap_or_else(|| panic!("{flag} missing from help"));
        assert!(line.contains(&format!("[default: {value}]")), "{line}");
    }
    for sub in ["voxelize", "embed", "evaluate", "sweep", "bench"] {
        let help = stdout(bin().args([sub, "--help"]));
        for line in help.lines().filter(|l| l.trim_start().starts_with("--") || l.trim_start().starts_with('-')) {
            assert!(line.split_whitespace().count() > 1, "{sub}: undocumented flag `{line}`");
        }
    }
}

#[test]
fn triplet_training_on_one_class_fails_before_training() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    corpus(&data, &[ShapeKind::Cube], 6, 0);
    let ckpt = dir.path().join("m.ckpt");
    let mut c = train_micro(&data, &ckpt, &["--task", "triplet"]);
    assert_eq!(code(&mut c), 2);
    assert!(!ckpt.exists());
}

#[test]
fn fixed_seed_gives_identical_logs() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    corpus(&data, &[ShapeKind::Cube, ShapeKind::Sphere], 6, 2);
    let logs: Vec<String> = (0..2)
        .map(|i| {
            let ckpt = dir.path().join(format!("m{i}.ckpt"));
            stdout(&mut train_micro(&data, &ckpt, &[]));
            fs::read_to_string(ckpt.with_extension("log.ndjson")).unwrap()
        })
        .collect();
    assert_eq!(logs[0].lines().count(), 2);
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    corpus(&data, &[ShapeKind::Cube, ShapeKind::Sphere], 4, 0);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# toy\nlr = 0.005\nepochs = 1\n").unwrap();
    let lr_of = |extra: &[&str]| -> (f64, usize) {
        let ckpt = dir.path().join("c.ckpt");
        let mut c = bin();
        c.arg("--config").arg(&cfg).args(["train", "--data"]).arg(&data).arg("--out").arg(&ckpt);
        c.args(MICRO).args(["--batch", "4", "--momentum", "0.9"]).args(extra);
        stdout(&mut c);
        let log = fs::read_to_string(ckpt.with_extension("log.ndjson")).unwrap();
        let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        (first["lr"].as_f64().unwrap(), log.lines().count())
    };
    assert_eq!(lr_of(&[]), (0.005, 1));
    assert_eq!(lr_of(&["--lr", "0.02"]), (0.02, 1));
    assert_eq!(lr_of(&["--epochs", "2"]).1, 2);
}

#[test]
fn exploding_learning_rate_exits_with_divergence_code() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    corpus(&data, &[ShapeKind::Cube, ShapeKind::Sphere], 6, 0);
    let mut c = bin();
    c.args(["train", "--data"]).arg(&data).arg("--out").arg(dir.path().join("m.ckpt")).args(MICRO);
    c.args(["--epochs", "20", "--batch", "6", "--lr", "1e30", "--momentum", "0.9"]);
    let out = c.output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn embed_is_deterministic_and_covers_the_split() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    corpus(&data, &[ShapeKind::Cube, ShapeKind::Sphere], 4, 3);
    fs::write(data.join("cube/test/empty.off"), "OFF\n0 0 0\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    stdout(&mut train_micro(&data, &ckpt, &["--task", "triplet"]));
    let embed = |name: &str| -> String {
        let out = dir.path().join(name);
        let mut c = bin();
        c.args(["embed", "--checkpoint"]).arg(&ckpt).arg("--data").arg(&data).args(["-r", "10", "--out"]).arg(&out);
        stdout(&mut c);
        fs::read_to_string(out).unwrap()
    };
    let a = embed("a.csv");
    assert_eq!(a, embed("b.csv"));
    let rows: Vec<&str> = a.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(a.lines().next().unwrap().split(',').count(), 2 + 5);
    let empty = rows.iter().find(|r| r.starts_with("empty,")).unwrap();
    assert!(empty.split(',').skip(2).all(|v| v.parse::<f32>().unwrap() == 0.0), "{empty}");

    let mut c = bin();
    c.args(["embed", "--checkpoint"]).arg(&ckpt).arg("--data").arg(&data);
    c.args(["--widths", "4,6,6", "--out"]).arg(dir.path().join("c.csv"));
    assert_eq!(code(&mut c), 2);
}

/// Brute-force mAP with cosine ranking, all rows as queries.
fn oracle_map(rows: &[(&str, [f64; 2])]) -> f64 {
    let cos = |a: [f64; 2], b: [f64; 2]| 1.0 - (a[0] * b[0] + a[1] * b[1]) / ((a[0].hypot(a[1])) * (b[0].hypot(b[1])));
    let mut aps = Vec::new();
    for (q, (ql, qv)) in rows.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = (0..rows.len()).filter(|&i| i != q).map(|i| (cos(*qv, rows[i].1), i)).collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let (mut hits, mut sum) = (0.0, 0.0);
        for (k, &(_, i)) in others.iter().enumerate() {
            if rows[i].0 == *ql {
                hits += 1.0;
                sum += hits / (k + 1) as f64;
            }
        }
        if hits > 0.0 {
            aps.push(sum / hits);
        }
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

fn write_embeddings(path: &Path, rows: &[(&str, [f64; 2])]) {
    let mut text = String::from("id,label,v0,v1\n");
    for (i, (label, v)) in rows.iter().enumerate() {
        text += &format!("s{i},{label},{},{}\n", v[0], v[1]);
    }
    fs::write(path, text).unwrap();
}

#[test]
fn evaluate_matches_brute_force_and_caps_queries() {
    let dir = TempDir::new().unwrap();
    let rows = [
        ("a", [1.0, 0.1]),
        ("b", [0.9, 0.5]),
        ("a", [0.8, -0.3]),
        ("b", [0.2, 1.0]),
        ("a", [0.5, 0.45]),
        ("b", [-0.4, 0.9]),
    ];
    let csv = dir.path().join("e.csv");
    write_embeddings(&csv, &rows);
    let metrics = dir.path().join("m.json");
    let pr = dir.path().join("pr.csv");
    let out = bin()
        .args(["evaluate", "--queries-per-class", "50", "--embeddings"])
        .arg(&csv)
        .arg("--out")
        .arg(&metrics)
        .arg("--pr-curve")
        .arg(&pr)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fewer than 50"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!((m["map"].as_f64().unwrap() - oracle_map(&rows)).abs() < 1e-12, "{m}");
    assert_eq!(m["n_queries"], 6);
    let pr_rows = fs::read_to_string(&pr).unwrap();
    assert_eq!(pr_rows.lines().count(), 12);
    assert!(pr_rows.lines().nth(1).unwrap().starts_with("0.0,"));

    let separated = [("a", [1.0, 0.0]), ("a", [0.9, 0.1]), ("a", [1.0, 0.05]), ("b", [0.0, 1.0]), ("b", [0.1, 0.9]), ("b", [0.05, 1.0])];
    write_embeddings(&csv, &separated);
    let text = stdout(bin().args(["evaluate", "--embeddings"]).arg(&csv));
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["map"].as_f64().unwrap(), 1.0);

    fs::write(&csv, "id,label,v0\ns0,a,notanumber\n").unwrap();
    assert_eq!(code(bin().args(["evaluate", "--embeddings"]).arg(&csv)), 2);
}

#[test]
fn sweep_writes_one_row_per_resolution_and_resumes() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    corpus(&data, &[ShapeKind::Cube, ShapeKind::Sphere], 6, 3);
    let out = dir.path().join("sweep.csv");
    let run = || {
        let mut c = bin();
        c.args(["--threads", "1", "sweep", "--resolutions", "8,12", "--pad", "14", "--widths", "4,6,5"]);
        c.args(["--epochs", "1", "--batch", "6", "--lr", "0.01", "--momentum", "0.9", "--data"]).arg(&data);
        c.arg("--out").arg(&out);
        stdout(&mut c)
    };
    run();
    let first = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "resolution,map");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("8,") && lines[2].starts_with("12,"));
    assert!(dir.path().join("sweep.runs/r8.ckpt").exists());
    run();
    assert_eq!(fs::read_to_string(&out).unwrap(), first);
}

#[test]
fn bench_reports_surface_scaling_of_rules() {
    let dir = TempDir::new().unwrap();
    let off = dir.path().join("sphere.off");
    fs::write(&off, synth::uv_sphere(48, 96).to_off()).unwrap();
    let rules = |r: &str| -> u64 {
        let json = dir.path().join(format!("b{r}.json"));
        let text = stdout(bin().args(["bench", "--repeat", "2", "-r", r, "--data"]).arg(&off).arg("--out").arg(&json));
        assert!(text.contains("s/sample"), "{text}");
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
        assert!(v["seconds_per_sample_mean"].as_f64().unwrap() > 0.0);
        v["rules"][0].as_u64().unwrap()
    };
    let (r40, r80) = (rules("40"), rules("80"));
    assert_eq!(r40, rules("40"));
    let ratio = r80 as f64 / r40 as f64;
    assert!((3.0..=5.0).contains(&ratio), "rule ratio {ratio}");
}
