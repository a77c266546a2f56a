//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;

use s3dcnn::dataset::{load_manifest, scan_corpus, Corpus, MeshCache, Split};
use s3dcnn::mesh::read_off;
use s3dcnn::network::{Checkpoint, TaskKind, DEFAULT_INPUT_SPATIAL, DEFAULT_WIDTHS};
use s3dcnn::optimizer::{SgdConfig, DEFAULT_LEARNING_RATE, DEFAULT_LR_DECAY, DEFAULT_MOMENTUM};
use s3dcnn::retrieval::{evaluate as evaluate_queries, load_embeddings_csv, save_embeddings_csv, select_queries, write_pr_csv, EmbeddingSet, RankBy, RetrievalResult};
use s3dcnn::sparse_grid::write_svox;
use s3dcnn::trainer::{embed_set, train_classification, train_triplet, TrainConfig, TrainReport, DEFAULT_BATCH_SIZE, DEFAULT_MARGIN, DEFAULT_VAL_EVERY, DEFAULT_VAL_FRACTION};
use s3dcnn::voxelizer::{voxelize as voxelize_mesh, DEFAULT_PAD};
use s3dcnn::{Error, Network, NetworkSpec, RenderConfig, SparseGrid};

use crate::config::{Config, List};
use crate::{BenchArgs, EmbedArgs, EvaluateArgs, ModelArgs, OptimArgs, QueryArgs, SweepArgs, Task, TrainArgs, UsageError, VoxelizeArgs};

pub const DEFAULT_RESOLUTION: usize = 40;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_QUERIES_PER_CLASS: usize = 20;
pub const DEFAULT_REPEAT: usize = 5;
pub const DEFAULT_BENCH_LIMIT: usize = 20;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    let corpus = if path.is_file() {
        load_manifest(path)?
    } else {
        scan_corpus(path)?
    };
    for bad in &corpus.unreadable {
        warn!("skipping {}", bad.display());
    }
    info!(
        "corpus {}: {} samples in {} classes",
        path.display(),
        corpus.samples.len(),
        corpus.num_classes()
    );
    Ok(corpus)
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn off_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("off")))
        .collect();
    files.sort();
    files
}

/// Voxelize one file; returns the number of active sites.
fn voxelize_file(input: &Path, output: &Path, render: &RenderConfig, geometry_only: bool) -> anyhow::Result<usize> {
    let mesh = read_off(input)?.normalized().map_err(|e| e.in_file(input))?;
    let grid: SparseGrid<f32> = voxelize_mesh(&mesh, render)?;
    create_parent(output)?;
    let file = fs::File::create(output).with_context(|| format!("creating {}", output.display()))?;
    let mut w = BufWriter::new(file);
    write_svox(&grid, geometry_only, &mut w)?;
    w.flush()?;
    Ok(grid.num_sites())
}

fn sparsity_line(sites: usize, render: &RenderConfig) -> String {
    let cube = (render.render_size as f64).powi(3);
    let field = (render.pad_to as f64).powi(3);
    format!(
        "{sites} sites, {:.3}% of the render cube, {:.4}% of the field",
        100.0 * sites as f64 / cube,
        100.0 * sites as f64 / field
    )
}

pub fn voxelize(a: VoxelizeArgs, cfg: &Config) -> anyhow::Result<()> {
    let r = cfg.pick(a.resolution, "resolution", DEFAULT_RESOLUTION)?;
    let pad = cfg.pick(a.pad, "pad", DEFAULT_PAD)?;
    let render = RenderConfig::new(r, pad)?;
    let geometry_only = a.geometry_only || cfg.pick(None, "geometry-only", false)?;
    if !a.input.is_dir() {
        let sites = voxelize_file(&a.input, &a.output, &render, geometry_only)?;
        println!("{}: {}", a.input.display(), sparsity_line(sites, &render));
        return Ok(());
    }
    let files = off_files(&a.input);
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .off files under {}", a.input.display())).into());
    }
    let results: Vec<(PathBuf, anyhow::Result<usize>)> = files
        .par_iter()
        .map(|f| {
            let rel = f.strip_prefix(&a.input).unwrap_or(f).to_path_buf();
            let out = a.output.join(&rel).with_extension("svox");
            (rel, voxelize_file(f, &out, &render, geometry_only))
        })
        .collect();
    let mut written = Vec::new();
    let mut failed = 0usize;
    for (rel, result) in results {
        match result {
            Ok(sites) => {
                println!("{}: {}", rel.display(), sparsity_line(sites, &render));
                written.push(sites);
            }
            Err(e) => {
                eprintln!("{}: {e:#}", rel.display());
                failed += 1;
            }
        }
    }
    let mean = written.iter().sum::<usize>() as f64 / written.len().max(1) as f64;
    println!(
        "voxelized {}/{} meshes at r={r} in a {pad}^3 field into {}; mean in-cube sparsity {:.3}%",
        written.len(),
        files.len(),
        a.output.display(),
        100.0 * mean / (r as f64).powi(3)
    );
    if failed > 0 {
        return Err(Error::Dataset(format!("{failed} of {} meshes could not be voxelized", files.len())).into());
    }
    Ok(())
}

struct Model {
    resolution: usize,
    pad: usize,
    widths: Vec<usize>,
}

fn model(a: &ModelArgs, cfg: &Config) -> anyhow::Result<Model> {
    Ok(Model {
        resolution: cfg.pick(a.resolution, "resolution", DEFAULT_RESOLUTION)?,
        pad: cfg.pick(a.pad, "pad", DEFAULT_INPUT_SPATIAL)?,
        widths: cfg.pick(a.widths.clone(), "widths", List(DEFAULT_WIDTHS.to_vec()))?.0,
    })
}

fn spec_for(task: Task, pad: usize, widths: &[usize], corpus: &Corpus) -> anyhow::Result<NetworkSpec> {
    let classes = (task == Task::Classify).then(|| corpus.num_classes());
    let spec = NetworkSpec::from_blocks(pad, widths, classes);
    spec.geometry().map_err(|e| usage(format!("field {pad} with widths {widths:?}: {e}")))?;
    Ok(spec)
}

fn kind(task: Task) -> TaskKind {
    match task {
        Task::Classify => TaskKind::Classification,
        Task::Triplet => TaskKind::Triplet,
    }
}

/// Training configuration plus the validation fraction.
fn train_config(task: Task, render: RenderConfig, o: &OptimArgs, cfg: &Config) -> anyhow::Result<(TrainConfig, f64)> {
    let mut tc = TrainConfig::new(kind(task), render);
    tc.epochs = cfg.pick(o.epochs, "epochs", DEFAULT_EPOCHS)?;
    tc.sgd = SgdConfig {
        lr0: cfg.pick(o.lr, "lr", DEFAULT_LEARNING_RATE)?,
        momentum: cfg.pick(o.momentum, "momentum", DEFAULT_MOMENTUM)?,
        decay: cfg.pick(o.lr_decay, "lr-decay", DEFAULT_LR_DECAY)?,
    };
    tc.margin = cfg.pick(o.margin, "margin", DEFAULT_MARGIN)?;
    tc.batch_size = cfg.pick(o.batch, "batch", DEFAULT_BATCH_SIZE)?;
    tc.seed = cfg.pick(o.seed, "seed", 0)?;
    tc.val_every = cfg.pick(o.val_every, "val-every", DEFAULT_VAL_EVERY)?;
    tc.augment = cfg.pick_opt(o.augment, "augment")?;
    tc.validate()?;
    let val_fraction = cfg.pick(o.val_fraction, "val-fraction", DEFAULT_VAL_FRACTION)?;
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(usage(format!("--val-fraction {val_fraction} must lie in [0, 1)")));
    }
    Ok((tc, val_fraction))
}

fn split_train(corpus: &Corpus, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let all = corpus.indices(Split::Train);
    if val_fraction > 0.0 {
        corpus.hold_out(&all, val_fraction, seed)
    } else {
        (all, Vec::new())
    }
}

fn run_training(
    task: Task,
    corpus: &Corpus,
    train: &[usize],
    val: &[usize],
    spec: &NetworkSpec,
    tc: &TrainConfig,
    resume: Option<Checkpoint>,
) -> anyhow::Result<TrainReport> {
    info!(
        "training {} on {} samples ({} held out), {} parameters",
        match task {
            Task::Classify => "classifier",
            Task::Triplet => "triplet embedding",
        },
        train.len(),
        val.len(),
        spec.num_parameters()?
    );
    Ok(match task {
        Task::Classify => train_classification(corpus, train, val, spec, tc, resume)?,
        Task::Triplet => train_triplet(corpus, train, val, spec, tc, resume)?,
    })
}

pub fn train(a: TrainArgs, cfg: &Config) -> anyhow::Result<()> {
    let task = cfg.pick(a.task, "task", Task::Classify)?;
    let m = model(&a.model, cfg)?;
    let render = RenderConfig::new(m.resolution, m.pad)?;
    let (mut tc, val_fraction) = train_config(task, render, &a.optim, cfg)?;
    let corpus = load_corpus(&a.data)?;
    let spec = spec_for(task, m.pad, &m.widths, &corpus)?;
    let log_path = cfg.pick_opt(a.log, "log")?.unwrap_or_else(|| a.out.with_extension("log.ndjson"));
    create_parent(&a.out)?;
    create_parent(&log_path)?;
    tc.checkpoint = Some(a.out.clone());
    tc.log = Some(log_path.clone());
    let (train, val) = split_train(&corpus, val_fraction, tc.seed);
    let resume = cfg.pick_opt(a.resume, "resume")?.map(Checkpoint::load).transpose()?;
    let report = run_training(task, &corpus, &train, &val, &spec, &tc, resume)?;
    let last = report.history.last();
    println!(
        "trained {} epochs; final loss {}; best {} {}",
        report.history.len(),
        last.map_or("n/a".into(), |r| format!("{:.5}", r.loss)),
        if task == Task::Classify { "accuracy" } else { "validation mAP" },
        report.best_metric.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    println!("checkpoint {}; metrics log {}", a.out.display(), log_path.display());
    Ok(())
}

pub fn embed(a: EmbedArgs, cfg: &Config) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let net = ckpt.network;
    let spec = net.spec().clone();
    let pad = cfg.pick_opt(a.pad, "pad")?;
    let widths = cfg.pick_opt(a.widths, "widths")?;
    if pad.is_some() || widths.is_some() {
        let pad = pad.unwrap_or(spec.input_spatial());
        let expected = match widths {
            Some(List(w)) => NetworkSpec::from_blocks(pad, &w, spec.num_classes()),
            None if pad == spec.input_spatial() => spec.clone(),
            None => NetworkSpec::from_blocks(pad, &DEFAULT_WIDTHS, spec.num_classes()),
        };
        if expected != spec {
            return Err(Error::SpecMismatch {
                expected: expected.to_text(),
                found: spec.to_text(),
            }
            .in_file(&a.checkpoint)
            .into());
        }
    }
    let r = cfg.pick(a.resolution, "resolution", DEFAULT_RESOLUTION)?;
    let render = RenderConfig::new(r, spec.input_spatial())?;
    let split = cfg.pick(a.split, "split", Split::Test)?;
    let batch = cfg.pick(a.batch, "batch", DEFAULT_BATCH_SIZE)?;
    let corpus = load_corpus(&a.data)?;
    let indices = corpus.indices(split);
    if indices.is_empty() {
        return Err(Error::Dataset(format!("the {} split is empty", split.name())).into());
    }
    let set = embed_set(&net, &corpus, &indices, &render, batch, &MeshCache::default())?;
    create_parent(&a.out)?;
    save_embeddings_csv(&set, &a.out)?;
    println!(
        "wrote {} embeddings of dimension {} ({} split, r={r}) to {}",
        set.len(),
        set.dim(),
        split.name(),
        a.out.display()
    );
    Ok(())
}

struct Queries {
    per_class: usize,
    rank_by: RankBy,
}

fn queries(a: &QueryArgs, cfg: &Config) -> anyhow::Result<Queries> {
    let per_class = cfg.pick(a.queries_per_class, "queries-per-class", DEFAULT_QUERIES_PER_CLASS)?;
    if per_class == 0 {
        return Err(usage("--queries-per-class must be at least 1"));
    }
    Ok(Queries {
        per_class,
        rank_by: cfg.pick(a.rank_by, "rank-by", RankBy::Cosine)?,
    })
}

fn retrieve(set: &EmbeddingSet, q: &Queries, seed: u64) -> anyhow::Result<RetrievalResult> {
    let (picked, capped) = select_queries(set, q.per_class, seed);
    for class in capped {
        warn!(
            "class `{class}` has fewer than {} samples; all of them are used as queries",
            q.per_class
        );
    }
    Ok(evaluate_queries(set, &picked, q.rank_by)?)
}

pub fn evaluate(a: EvaluateArgs, cfg: &Config) -> anyhow::Result<()> {
    let q = queries(&a.query, cfg)?;
    let seed = cfg.pick(a.seed, "seed", 0)?;
    let set = load_embeddings_csv(&a.embeddings)?;
    let result = retrieve(&set, &q, seed)?;
    let m = result.metrics();
    let report = json!({
        "map": m.map,
        "auc": m.auc,
        "n_queries": m.n_queries,
        "n_skipped": m.n_skipped,
        "queries_per_class": q.per_class,
        "rank_by": q.rank_by,
        "pr_curve": result
            .pr_points()
            .iter()
            .map(|(r, p)| json!({"recall": r, "precision": p}))
            .collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&report)?;
    let out = cfg.pick_opt(a.out, "out")?;
    match &out {
        Some(path) => {
            create_parent(path)?;
            fs::write(path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?;
        }
        None => println!("{text}"),
    }
    if let Some(path) = cfg.pick_opt(a.pr_curve, "pr-curve")? {
        create_parent(&path)?;
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_pr_csv(&result, BufWriter::new(file))?;
    }
    if out.is_some() {
        println!(
            "mAP {:.4}, AUC {:.4} over {} queries ({} skipped)",
            m.map, m.auc, m.n_queries, m.n_skipped
        );
    }
    Ok(())
}

/// Resolutions already present in a sweep CSV.
fn finished_rows(path: &Path) -> anyhow::Result<BTreeSet<usize>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut done = BTreeSet::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let r = line
            .split(',')
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected resolution,map, got `{line}`"),
            })
            .map_err(|e| e.in_file(path))?;
        done.insert(r);
    }
    Ok(done)
}

pub fn sweep(a: SweepArgs, cfg: &Config) -> anyhow::Result<()> {
    let List(resolutions) = cfg
        .pick_opt(a.resolutions, "resolutions")?
        .ok_or_else(|| usage("--resolutions is required (e.g. 20,30,40)"))?;
    let task = cfg.pick(a.task, "task", Task::Triplet)?;
    let pad = cfg.pick(a.pad, "pad", DEFAULT_INPUT_SPATIAL)?;
    let widths = cfg.pick(a.widths, "widths", List(DEFAULT_WIDTHS.to_vec()))?.0;
    let q = queries(&a.query, cfg)?;
    for &r in &resolutions {
        RenderConfig::new(r, pad)?;
    }
    let (base, val_fraction) = train_config(task, RenderConfig::new(resolutions[0], pad)?, &a.optim, cfg)?;
    let corpus = load_corpus(&a.data)?;
    let spec = spec_for(task, pad, &widths, &corpus)?;
    let (train, val) = split_train(&corpus, val_fraction, base.seed);
    let test = corpus.indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Dataset("a sweep evaluates on the test split, which is empty".into()).into());
    }
    let work = cfg
        .pick_opt(a.work_dir, "work-dir")?
        .unwrap_or_else(|| a.out.with_extension("runs"));
    fs::create_dir_all(&work).with_context(|| format!("creating {}", work.display()))?;
    let done = finished_rows(&a.out)?;
    create_parent(&a.out)?;
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&a.out)
        .with_context(|| format!("opening {}", a.out.display()))?;
    if done.is_empty() && fs::metadata(&a.out)?.len() == 0 {
        writeln!(csv, "resolution,map")?;
    }
    let cache = MeshCache::default();
    for &r in &resolutions {
        if done.contains(&r) {
            info!("r={r} already in {}, skipping", a.out.display());
            continue;
        }
        let started = Instant::now();
        let render = RenderConfig::new(r, pad)?;
        let mut tc = base.clone();
        tc.render = render;
        let ckpt_path = work.join(format!("r{r}.ckpt"));
        tc.checkpoint = Some(ckpt_path.clone());
        tc.log = Some(work.join(format!("r{r}.log.ndjson")));
        let resume = ckpt_path.exists().then(|| Checkpoint::load(&ckpt_path)).transpose()?;
        let report = run_training(task, &corpus, &train, &val, &spec, &tc, resume)?;
        let set = embed_set(&report.network, &corpus, &test, &render, tc.batch_size, &cache)?;
        let map = retrieve(&set, &q, tc.seed)?.map;
        writeln!(csv, "{r},{map}")?;
        csv.flush()?;
        println!("r={r}: test mAP {map:.4} ({:.1?})", started.elapsed());
    }
    println!("sweep results in {}", a.out.display());
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn bench(a: BenchArgs, cfg: &Config) -> anyhow::Result<()> {
    let r = cfg.pick(a.resolution, "resolution", DEFAULT_RESOLUTION)?;
    let repeat = cfg.pick(a.repeat, "repeat", DEFAULT_REPEAT)?;
    if repeat == 0 {
        return Err(usage("--repeat must be at least 1"));
    }
    let net = match cfg.pick_opt(a.checkpoint, "checkpoint")? {
        Some(path) => Checkpoint::load(path)?.network,
        None => Network::<f32>::build(NetworkSpec::default_embedding(), cfg.pick(a.seed, "seed", 0)?)?,
    };
    let render = RenderConfig::new(r, net.spec().input_spatial())?;
    let meshes = if a.data.is_file() && a.data.extension().is_some_and(|x| x.eq_ignore_ascii_case("off")) {
        vec![read_off(&a.data)?.normalized()?]
    } else {
        let corpus = load_corpus(&a.data)?;
        let split = cfg.pick(a.split, "split", Split::Test)?;
        let limit = cfg.pick(a.limit, "limit", DEFAULT_BENCH_LIMIT)?;
        let cache = MeshCache::new(0);
        let mut out = Vec::new();
        for &i in corpus.indices(split).iter().take(limit) {
            match cache.get(&corpus.samples[i].path) {
                Ok(m) => out.push((*m).clone()),
                Err(e) => warn!("skipping: {e}"),
            }
        }
        out
    };
    if meshes.is_empty() {
        return Err(Error::Dataset("nothing to benchmark".into()).into());
    }
    let mut seconds = Vec::new();
    let mut rules = Vec::new();
    let mut sites = Vec::new();
    for mesh in &meshes {
        let grid: SparseGrid<f32> = voxelize_mesh(mesh, &render)?;
        rules.push(net.forward(&grid)?.total_rules());
        sites.push(grid.num_sites());
        for _ in 0..repeat {
            let t = Instant::now();
            std::hint::black_box(net.embed(&grid)?);
            seconds.push(t.elapsed().as_secs_f64());
        }
    }
    let (mean, std) = mean_std(&seconds);
    let rule_f: Vec<f64> = rules.iter().map(|&x| x as f64).collect();
    let (rule_mean, _) = mean_std(&rule_f);
    let site_f: Vec<f64> = sites.iter().map(|&x| x as f64).collect();
    let (site_mean, _) = mean_std(&site_f);
    let (rmin, rmax) = (rules.iter().min().unwrap(), rules.iter().max().unwrap());
    println!(
        "{} samples x {repeat} runs, r={r} in a {}^3 field, {} threads",
        meshes.len(),
        render.pad_to,
        rayon::current_num_threads()
    );
    println!("forward: {mean:.5} s/sample (stddev {std:.5})");
    println!("input sites: mean {site_mean:.0}");
    println!("rules: mean {rule_mean:.0}, min {rmin}, max {rmax}");
    if let Some(path) = cfg.pick_opt(a.out, "out")? {
        let report = json!({
            "resolution": r,
            "samples": meshes.len(),
            "repeat": repeat,
            "seconds_per_sample_mean": mean,
            "seconds_per_sample_std": std,
            "sites": sites,
            "rules": rules,
        });
        create_parent(&path)?;
        fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}
