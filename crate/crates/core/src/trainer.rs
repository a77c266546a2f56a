//! Classification and triplet-embedding training loops.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{assemble_batch, mix, render_sample, BatchPlan, BatchStream, Corpus, MeshCache, TripletSampler};
use crate::error::{Error, Result};
use crate::losses::{argmax, softmax_nll, triplet_loss_backward};
use crate::network::{Checkpoint, CheckpointMeta, Network, NetworkSpec, TaskKind};
use crate::optimizer::{SgdConfig, SgdState};
use crate::retrieval::{evaluate_all, EmbeddingSet, RankBy};
use crate::sparse_grid::{merge_batch, SparseGrid};
use crate::voxelizer::{Augmentation, RenderConfig};

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_BATCH_SIZE: usize = 45;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;
pub const DEFAULT_VAL_EVERY: usize = 5;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: TaskKind,
    /// Total epochs; a resumed run continues up to this count.
    pub epochs: usize,
    pub sgd: SgdConfig,
    pub margin: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub render: RenderConfig,
    /// `Some(max_jitter)` enables per-sample random rotation and jitter.
    pub augment: Option<i32>,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    /// Last-epoch checkpoint path; the best-validation checkpoint goes next
    /// to it (see [`best_checkpoint_path`]).
    pub checkpoint: Option<PathBuf>,
    /// Newline-delimited JSON metrics log.
    pub log: Option<PathBuf>,
    /// Stop once training accuracy (classification) reaches this value.
    pub target_train_acc: Option<f64>,
    /// Stop once validation mAP (triplet) reaches this value.
    pub target_val_map: Option<f64>,
}

impl TrainConfig {
    pub fn new(task: TaskKind, render: RenderConfig) -> Self {
        TrainConfig {
            task,
            epochs: 200,
            sgd: SgdConfig::default(),
            margin: DEFAULT_MARGIN,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            render,
            augment: None,
            val_every: DEFAULT_VAL_EVERY,
            checkpoint: None,
            log: None,
            target_train_acc: None,
            target_val_map: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.render.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.task == TaskKind::Triplet && self.batch_size < 3 {
            return Err(Error::invalid("triplet training needs a batch of at least 3"));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid(format!("margin {} must be >= 0", self.margin)));
        }
        if self.val_every == 0 {
            return Err(Error::invalid("validation interval must be at least 1"));
        }
        Ok(())
    }
}

/// `model.ckpt` -> `model.best.ckpt`.
pub fn best_checkpoint_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    path.with_file_name(name)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub loss: f64,
    /// Training accuracy over the epoch's batches (classification).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    /// Fraction of zero-loss triplets (triplet).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub satisfied: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub network: Network<f32>,
    pub history: Vec<EpochRecord>,
    pub best_metric: Option<f64>,
    pub velocity: Vec<Vec<f32>>,
}

/// Shared state of both regimes.
struct Run<'a> {
    cfg: &'a TrainConfig,
    net: Network<f32>,
    opt: SgdState<f32>,
    step: usize,
    log: Option<fs::File>,
    history: Vec<EpochRecord>,
    best: Option<f64>,
    class_names: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(
        corpus: &'a Corpus,
        spec: &NetworkSpec,
        cfg: &'a TrainConfig,
        resume: Option<Checkpoint>,
    ) -> Result<(Self, usize)> {
        cfg.validate()?;
        let (net, velocity, first_epoch, best, steps_done) = match resume {
            Some(ckpt) => {
                if ckpt.network.spec() != spec {
                    return Err(Error::SpecMismatch {
                        expected: spec.to_text(),
                        found: ckpt.network.spec().to_text(),
                    });
                }
                if ckpt.meta.task != cfg.task {
                    return Err(Error::IncompatibleSpec(format!(
                        "checkpoint was trained for {:?}, not {:?}",
                        ckpt.meta.task, cfg.task
                    )));
                }
                (ckpt.network, ckpt.velocity, ckpt.meta.epoch + 1, ckpt.meta.best_metric, ckpt.meta.step)
            }
            None => (Network::build(spec.clone(), cfg.seed)?, None, 0, None, 0),
        };
        if net.spec().input_spatial() != cfg.render.pad_to {
            return Err(Error::IncompatibleSpec(format!(
                "network input is {}^3 but the render field is {}^3",
                net.spec().input_spatial(),
                cfg.render.pad_to
            )));
        }
        let mut opt = SgdState::new(cfg.sgd, &net.parameter_lengths())?;
        if let Some(v) = velocity {
            opt.velocity = v;
        }
        let log = match &cfg.log {
            Some(p) => Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(first_epoch > 0)
                    .write(true)
                    .truncate(first_epoch == 0)
                    .open(p)
                    .map_err(|e| Error::from(e).in_file(p))?,
            ),
            None => None,
        };
        Ok((
            Run {
                cfg,
                net,
                opt,
                step: steps_done,
                log,
                history: Vec::new(),
                best,
                class_names: corpus.class_names.clone(),
            },
            first_epoch,
        ))
    }

    fn apply(&mut self, grads: &crate::network::Gradients<f32>, lr: f64) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient at step {}", self.step)));
        }
        let g = grads.slices();
        let mut p = self.net.parameter_slices_mut();
        self.opt.step(&mut p, &g, lr)?;
        self.step += 1;
        Ok(())
    }

    fn finish_epoch(&mut self, record: EpochRecord, val_metric: Option<f64>) -> Result<()> {
        log::info!("{}", serde_json::to_string(&record).unwrap_or_default());
        if let Some(f) = &mut self.log {
            let line = serde_json::to_string(&record).map_err(|e| Error::format(e.to_string()))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        let improved = matches!((val_metric, self.best), (Some(v), None) if v.is_finite())
            || matches!((val_metric, self.best), (Some(v), Some(b)) if v > b);
        if improved {
            self.best = val_metric;
        }
        if let Some(path) = &self.cfg.checkpoint {
            let ckpt = self.checkpoint(record.epoch);
            ckpt.save(path)?;
            if improved {
                ckpt.save(best_checkpoint_path(path))?;
            }
        }
        self.history.push(record);
        Ok(())
    }

    fn checkpoint(&self, epoch: usize) -> Checkpoint {
        let meta = CheckpointMeta {
            epoch,
            step: self.step,
            sgd: self.cfg.sgd,
            seed: self.cfg.seed,
            task: self.cfg.task,
            spec_fingerprint: 0,
            has_velocity: true,
            class_names: self.class_names.clone(),
            best_metric: self.best,
        };
        Checkpoint::new(self.net.clone(), meta, Some(self.opt.velocity.clone()))
    }

    fn validation_due(&self, epoch: usize) -> bool {
        (epoch + 1) % self.cfg.val_every == 0 || epoch + 1 == self.cfg.epochs
    }

    fn report(self) -> TrainReport {
        TrainReport {
            network: self.net,
            history: self.history,
            best_metric: self.best,
            velocity: self.opt.velocity,
        }
    }
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss became {loss} at step {step}")));
    }
    Ok(())
}

/// Softmax classification on `train`, validating accuracy on `val`.
pub fn train_classification(
    corpus: &Corpus,
    train: &[usize],
    val: &[usize],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    match spec.num_classes() {
        Some(c) if c == corpus.num_classes() => {}
        other => {
            return Err(Error::IncompatibleSpec(format!(
                "classifier head has {other:?} classes, corpus has {}",
                corpus.num_classes()
            )))
        }
    }
    let (mut run, first) = Run::start(corpus, spec, cfg, resume)?;
    let cache = MeshCache::default();
    for epoch in first..cfg.epochs {
        let lr = cfg.sgd.lr_at_epoch(epoch);
        let plan = BatchPlan {
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            epoch,
            shuffle: true,
            augment: cfg.augment,
        };
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in BatchStream::new(corpus, train, plan, cfg.render, &cache)? {
            let batch = batch?;
            let trace = run.net.forward(&batch.grid)?;
            let logits = trace.logits().expect("classifier spec");
            let n = batch.labels.len();
            let mut grad = Array2::<f32>::zeros(logits.dim());
            let mut batch_loss = 0.0;
            for (k, &label) in batch.labels.iter().enumerate() {
                let row = logits.row(k).to_vec();
                let (l, g) = softmax_nll(&row, label)?;
                batch_loss += l as f64;
                correct += (argmax(&row) == Some(label)) as usize;
                for (dst, v) in grad.row_mut(k).iter_mut().zip(g) {
                    *dst = v / n as f32;
                }
            }
            check_loss(batch_loss, run.step)?;
            let grads = run.net.backward_logits(&trace, grad.view())?;
            run.apply(&grads, lr)?;
            loss_sum += batch_loss;
            seen += n;
        }
        if seen == 0 {
            return Err(Error::Dataset("no training sample could be voxelized".into()));
        }
        let acc = correct as f64 / seen as f64;
        let val_acc = if !val.is_empty() && run.validation_due(epoch) {
            Some(accuracy(&run.net, corpus, val, &cfg.render, cfg.batch_size, &cache)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            step: run.step,
            loss: loss_sum / seen as f64,
            acc: Some(acc),
            val_acc,
            map: None,
            satisfied: None,
            lr,
        };
        // without a validation set, training accuracy ranks checkpoints
        let metric = if val.is_empty() { Some(acc) } else { val_acc };
        run.finish_epoch(record, metric)?;
        // running accuracy mixes several weight states; confirm with a clean pass
        if let Some(target) = cfg.target_train_acc.filter(|&t| acc >= t) {
            if accuracy(&run.net, corpus, train, &cfg.render, cfg.batch_size, &cache)? >= target {
                break;
            }
        }
    }
    Ok(run.report())
}

/// Triplet-loss embedding training on `train`, validating retrieval mAP on `val`.
pub fn train_triplet(
    corpus: &Corpus,
    train: &[usize],
    val: &[usize],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainReport> {
    let sampler = TripletSampler::new(corpus, train)?;
    let (mut run, first) = Run::start(corpus, spec, cfg, resume)?;
    let cache = MeshCache::default();
    let triplets_per_step = cfg.batch_size / 3;
    let steps = train.len().div_ceil(cfg.batch_size);
    let margin = cfg.margin as f32;
    for epoch in first..cfg.epochs {
        let lr = cfg.sgd.lr_at_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ mix(epoch as u64 + 0x7121)));
        let (mut loss_sum, mut satisfied, mut counted) = (0.0, 0usize, 0usize);
        for s in 0..steps {
            let members: Vec<[usize; 3]> = (0..triplets_per_step).map(|_| sampler.sample(&mut rng)).collect();
            let step_seed = mix(cfg.seed ^ mix(((epoch as u64) << 32) | s as u64));
            let Some(grid) = render_triplets(corpus, &members, cfg, step_seed, &cache)? else {
                log::warn!("step {s}: no triplet could be voxelized");
                continue;
            };
            let trace = run.net.forward(&grid)?;
            let emb = trace.embeddings();
            let t = emb.nrows() / 3;
            let mut grad = Array2::<f32>::zeros(emb.dim());
            let mut losses = Vec::with_capacity(t);
            for i in 0..t {
                let rows = [3 * i, 3 * i + 1, 3 * i + 2].map(|r| emb.row(r).to_vec());
                match triplet_loss_backward(&rows[0], &rows[1], &rows[2], margin) {
                    Ok(g) => {
                        losses.push(g.loss as f64);
                        satisfied += g.is_satisfied() as usize;
                        for (r, gr) in [g.anchor, g.positive, g.negative].into_iter().enumerate() {
                            grad.row_mut(3 * i + r).iter_mut().zip(gr).for_each(|(d, v)| *d = v);
                        }
                    }
                    Err(Error::Degenerate(m)) => log::warn!("triplet skipped: {m}"),
                    Err(e) => return Err(e),
                }
            }
            if losses.is_empty() {
                continue;
            }
            grad /= losses.len() as f32;
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            check_loss(loss, run.step)?;
            let grads = run.net.backward_embeddings(&trace, grad.view())?;
            if loss == 0.0 && spread(&emb.to_owned()) < 1e-12 {
                log::warn!("step {s}: all embeddings coincide and the loss is zero (degenerate stationary point)");
            }
            run.apply(&grads, lr)?;
            loss_sum += loss * losses.len() as f64;
            counted += losses.len();
        }
        if counted == 0 {
            return Err(Error::Dataset("no training triplet could be voxelized".into()));
        }
        let map = if val.len() >= 2 && run.validation_due(epoch) {
            let set = embed_set(&run.net, corpus, val, &cfg.render, cfg.batch_size, &cache)?;
            Some(evaluate_all(&set, RankBy::Cosine).map(|r| r.map).unwrap_or(0.0))
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            step: run.step,
            loss: loss_sum / counted as f64,
            acc: None,
            val_acc: None,
            map,
            satisfied: Some(satisfied as f64 / counted as f64),
            lr,
        };
        run.finish_epoch(record, map)?;
        if map.is_some_and(|m| cfg.target_val_map.is_some_and(|t| m >= t)) {
            break;
        }
    }
    Ok(run.report())
}

/// Largest per-coordinate range across rows.
fn spread(m: &Array2<f32>) -> f64 {
    m.axis_iter(Axis(1))
        .map(|c| {
            let lo = c.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = c.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (hi - lo) as f64
        })
        .fold(0.0, f64::max)
}

/// Voxelize triplets at samples 3i, 3i+1, 3i+2. A triplet with any member
/// that fails to load is dropped whole.
fn render_triplets(
    corpus: &Corpus,
    triplets: &[[usize; 3]],
    cfg: &TrainConfig,
    seed: u64,
    cache: &MeshCache,
) -> Result<Option<SparseGrid<f32>>> {
    let rendered: Vec<Option<Vec<SparseGrid<f32>>>> = triplets
        .par_iter()
        .enumerate()
        .map(|(t, members)| {
            members
                .iter()
                .enumerate()
                .map(|(r, &i)| {
                    let aug = match cfg.augment {
                        Some(j) => Augmentation::sample(mix(seed ^ mix((3 * t + r) as u64)), j),
                        None => Augmentation::identity(),
                    };
                    render_sample(corpus, i, &cfg.render, &aug, cache)
                        .map_err(|e| log::warn!("skipping triplet member {}: {e}", corpus.samples[i].path.display()))
                        .ok()
                })
                .collect()
        })
        .collect();
    let grids: Vec<SparseGrid<f32>> = rendered.into_iter().flatten().flatten().collect();
    if grids.is_empty() {
        return Ok(None);
    }
    merge_batch(&grids).map(Some)
}

/// Embeddings of `indices` without augmentation, in order. Samples that
/// cannot be loaded produce zero rows, like samples without active voxels.
pub fn embed_indices(
    net: &Network<f32>,
    corpus: &Corpus,
    indices: &[usize],
    render: &RenderConfig,
    batch_size: usize,
    cache: &MeshCache,
) -> Result<Array2<f32>> {
    let dim = net.embedding_dim();
    let mut out = Array2::zeros((indices.len(), dim));
    for (c, chunk) in indices.chunks(batch_size.max(1)).enumerate() {
        let augs = vec![Augmentation::identity(); chunk.len()];
        let Some(batch) = assemble_batch(corpus, chunk, render, &augs, cache)? else {
            continue;
        };
        let emb = net.embed(&batch.grid)?;
        for (k, idx) in batch.indices.iter().enumerate() {
            let pos = chunk.iter().position(|i| i == idx).expect("batch index from chunk");
            out.row_mut(c * batch_size.max(1) + pos).assign(&emb.row(k));
        }
    }
    Ok(out)
}

/// Embedding set labelled with class names and keyed by file stem.
pub fn embed_set(
    net: &Network<f32>,
    corpus: &Corpus,
    indices: &[usize],
    render: &RenderConfig,
    batch_size: usize,
    cache: &MeshCache,
) -> Result<EmbeddingSet> {
    let vectors = embed_indices(net, corpus, indices, render, batch_size, cache)?;
    let ids = indices.iter().map(|&i| corpus.samples[i].id()).collect();
    let labels = indices
        .iter()
        .map(|&i| corpus.class_names[corpus.samples[i].label].clone())
        .collect();
    EmbeddingSet::new(ids, labels, vectors)
}

/// Top-1 accuracy without augmentation. Samples that cannot be loaded count as wrong.
pub fn accuracy(
    net: &Network<f32>,
    corpus: &Corpus,
    indices: &[usize],
    render: &RenderConfig,
    batch_size: usize,
    cache: &MeshCache,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let augs = vec![Augmentation::identity(); chunk.len()];
        let Some(batch) = assemble_batch(corpus, chunk, render, &augs, cache)? else {
            continue;
        };
        let logits = net.logits(&batch.grid)?;
        for (k, &label) in batch.labels.iter().enumerate() {
            correct += (argmax(logits.row(k).as_slice().unwrap()) == Some(label)) as usize;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}
