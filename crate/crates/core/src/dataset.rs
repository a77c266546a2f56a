//! Corpus scanning, seeded splits, batch assembly and triplet sampling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{read_off, TriangleMesh};
use crate::sparse_grid::{merge_batch, Site, SparseGrid};
use crate::voxelizer::{voxel_sites, Augmentation, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}` (train|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

impl Sample {
    /// File stem, used as the sample id in embedding files.
    pub fn id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    /// Entries found during the scan that could not be used.
    pub unreadable: Vec<PathBuf>,
}

/// Per-class and total sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Census {
    pub total: usize,
    pub train: usize,
    pub test: usize,
    /// (class, train count, test count) in class order.
    pub per_class: Vec<(String, usize, usize)>,
}

impl Census {
    /// Smallest and largest per-class total.
    pub fn class_range(&self) -> Option<(usize, usize)> {
        let totals = self.per_class.iter().map(|(_, a, b)| a + b);
        Some((totals.clone().min()?, totals.max()?))
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::from(e).in_file(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::from(e).in_file(dir))?;
    out.sort();
    Ok(out)
}

/// Read `<root>/<class>/{train,test}/*.off`. Classes and files are sorted by
/// name so label indices are stable.
pub fn scan_corpus(root: impl AsRef<Path>) -> Result<Corpus> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut corpus = Corpus::default();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = corpus.class_names.len();
        let name = class_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for split in [Split::Train, Split::Test] {
            let dir = class_dir.join(split.name());
            if !dir.is_dir() {
                return Err(Error::Dataset(format!("missing split directory {}", dir.display())));
            }
            for path in sorted_entries(&dir)? {
                let is_off = path
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("off"));
                if !is_off {
                    continue;
                }
                match fs::File::open(&path) {
                    Ok(_) if path.is_file() => corpus.samples.push(Sample { path, label, split }),
                    _ => corpus.unreadable.push(path),
                }
            }
        }
        corpus.class_names.push(name);
    }
    if corpus.class_names.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    for p in &corpus.unreadable {
        log::warn!("unreadable sample {}", p.display());
    }
    Ok(corpus)
}

/// Read a `path,label,split` CSV manifest. Relative paths resolve against the
/// manifest's directory; class order is first appearance.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Dataset(e.to_string()).in_file(path))?;
    let mut corpus = Corpus::default();
    let mut labels: HashMap<String, usize> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let bad = |message: String| Error::Parse { line, message }.in_file(path);
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 3 {
            return Err(bad(format!("expected path,label,split, found {} fields", rec.len())));
        }
        let split: Split = rec[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let next = labels.len();
        let label = *labels.entry(rec[1].to_string()).or_insert_with(|| {
            corpus.class_names.push(rec[1].to_string());
            next
        });
        let p = PathBuf::from(&rec[0]);
        let p = if p.is_absolute() { p } else { base.join(p) };
        if p.is_file() {
            corpus.samples.push(Sample { path: p, label, split });
        } else {
            log::warn!("unreadable sample {}", p.display());
            corpus.unreadable.push(p);
        }
    }
    Ok(corpus)
}

impl Corpus {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn census(&self) -> Census {
        let mut per_class: Vec<(String, usize, usize)> =
            self.class_names.iter().map(|n| (n.clone(), 0, 0)).collect();
        for s in &self.samples {
            match s.split {
                Split::Train => per_class[s.label].1 += 1,
                Split::Test => per_class[s.label].2 += 1,
            }
        }
        let train = per_class.iter().map(|c| c.1).sum();
        let test = per_class.iter().map(|c| c.2).sum();
        Census {
            total: train + test,
            train,
            test,
            per_class,
        }
    }

    /// Seeded per-class hold-out of `fraction` of `indices` (rounded, at least
    /// one per class with two or more samples). Returns (kept, held out).
    pub fn hold_out(&self, indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            by_class.entry(self.samples[i].label).or_default().push(i);
        }
        let (mut keep, mut held) = (Vec::new(), Vec::new());
        for (_, mut rows) in by_class {
            rows.shuffle(&mut rng);
            let mut n = (rows.len() as f64 * fraction).round() as usize;
            if fraction > 0.0 && rows.len() >= 2 {
                n = n.clamp(1, rows.len() - 1);
            }
            held.extend_from_slice(&rows[..n]);
            keep.extend_from_slice(&rows[n..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        (keep, held)
    }
}

/// Loaded, normalized meshes kept in memory up to a face budget.
#[derive(Debug)]
pub struct MeshCache {
    meshes: Mutex<HashMap<PathBuf, Arc<TriangleMesh>>>,
    budget: usize,
    used: Mutex<usize>,
}

impl MeshCache {
    /// `max_faces` bounds the summed face count of cached meshes.
    pub fn new(max_faces: usize) -> Self {
        MeshCache {
            meshes: Mutex::new(HashMap::new()),
            budget: max_faces,
            used: Mutex::new(0),
        }
    }

    pub fn get(&self, path: &Path) -> Result<Arc<TriangleMesh>> {
        if let Some(m) = self.meshes.lock().unwrap().get(path) {
            return Ok(Arc::clone(m));
        }
        let mesh = Arc::new(read_off(path)?.normalized().map_err(|e| e.in_file(path))?);
        let mut used = self.used.lock().unwrap();
        if *used + mesh.faces.len() <= self.budget {
            *used += mesh.faces.len();
            self.meshes
                .lock()
                .unwrap()
                .insert(path.to_path_buf(), Arc::clone(&mesh));
        }
        Ok(mesh)
    }
}

impl Default for MeshCache {
    fn default() -> Self {
        MeshCache::new(20_000_000)
    }
}

/// Per-epoch batching parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: usize,
    pub shuffle: bool,
    /// `Some(max_jitter)` draws a fresh rotation and jitter per sample.
    pub augment: Option<i32>,
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Seed of the augmentation draw for one sample in this epoch.
    pub fn sample_seed(&self, sample: usize) -> u64 {
        mix(self.seed ^ mix(self.epoch as u64 + 1) ^ mix((sample as u64) << 20 | 0x5eed))
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce5_e9b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub grid: SparseGrid<f32>,
    /// Corpus indices of the samples, in batch order.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Voxelize one corpus sample.
pub fn render_sample(
    corpus: &Corpus,
    index: usize,
    render: &RenderConfig,
    aug: &Augmentation,
    cache: &MeshCache,
) -> Result<SparseGrid<f32>> {
    let sample = &corpus.samples[index];
    let mesh = cache.get(&sample.path)?;
    let cfg = render.with_augmentation(aug);
    let coords = voxel_sites(&mesh, &cfg).map_err(|e| e.in_file(&sample.path))?;
    let sites: Vec<Site> = coords.iter().map(|&[x, y, z]| Site::new(0, x, y, z)).collect();
    let features = ndarray::Array2::from_elem((sites.len(), 1), 1.0f32);
    SparseGrid::from_parts(cfg.pad_to, 1, sites, features)
}

/// Voxelize `indices` in parallel and merge them into one batch. Samples that
/// fail are logged and dropped; `None` if none survive.
pub fn assemble_batch(
    corpus: &Corpus,
    indices: &[usize],
    render: &RenderConfig,
    augmentations: &[Augmentation],
    cache: &MeshCache,
) -> Result<Option<Batch>> {
    let rendered: Vec<(usize, Result<SparseGrid<f32>>)> = indices
        .par_iter()
        .zip(augmentations.par_iter())
        .map(|(&i, aug)| (i, render_sample(corpus, i, render, aug, cache)))
        .collect();
    let mut grids = Vec::with_capacity(rendered.len());
    let mut kept = Vec::with_capacity(rendered.len());
    for (i, r) in rendered {
        match r {
            Ok(g) => {
                grids.push(g);
                kept.push(i);
            }
            Err(e) => log::warn!("skipping sample {}: {e}", corpus.samples[i].path.display()),
        }
    }
    if grids.is_empty() {
        return Ok(None);
    }
    let grid = merge_batch(&grids)?;
    let labels = kept.iter().map(|&i| corpus.samples[i].label).collect();
    Ok(Some(Batch {
        grid,
        indices: kept,
        labels,
    }))
}

/// Lazily voxelized batches of one epoch. The order and the augmentation of
/// every sample are fixed by the plan alone.
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    plan: BatchPlan,
    render: RenderConfig,
    cache: &'a MeshCache,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        corpus: &'a Corpus,
        indices: &[usize],
        plan: BatchPlan,
        render: RenderConfig,
        cache: &'a MeshCache,
    ) -> Result<Self> {
        plan.validate()?;
        render.validate()?;
        let mut order = indices.to_vec();
        if plan.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(plan.seed ^ mix(plan.epoch as u64)));
            order.shuffle(&mut rng);
        }
        Ok(BatchStream {
            corpus,
            order,
            plan,
            render,
            cache,
            pos: 0,
        })
    }

    /// Sample indices of each batch before any skipping.
    pub fn planned_batches(&self) -> Vec<Vec<usize>> {
        self.order.chunks(self.plan.batch_size).map(<[usize]>::to_vec).collect()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.pos < self.order.len() {
            let end = (self.pos + self.plan.batch_size).min(self.order.len());
            let chunk = &self.order[self.pos..end];
            self.pos = end;
            let augs: Vec<Augmentation> = chunk
                .iter()
                .map(|&i| match self.plan.augment {
                    Some(j) => Augmentation::sample(self.plan.sample_seed(i), j),
                    None => Augmentation::identity(),
                })
                .collect();
            match assemble_batch(self.corpus, chunk, &self.render, &augs, self.cache) {
                Ok(Some(b)) => return Some(Ok(b)),
                Ok(None) => continue,
                Err(e) => return Some(Err(e)),
            }
        }
        None
    }
}

/// Draws (anchor, positive, negative) corpus indices.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    /// Members per class, restricted to the sampled index set.
    classes: Vec<Vec<usize>>,
    /// Classes with at least two members.
    anchors: Vec<usize>,
}

impl TripletSampler {
    pub fn new(corpus: &Corpus, indices: &[usize]) -> Result<Self> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            by_class.entry(corpus.samples[i].label).or_default().push(i);
        }
        let classes: Vec<Vec<usize>> = by_class.into_values().collect();
        let anchors: Vec<usize> = (0..classes.len()).filter(|&c| classes[c].len() >= 2).collect();
        if classes.len() < 2 || anchors.is_empty() {
            return Err(Error::Dataset(format!(
                "triplet sampling needs two classes and one class with two samples; found {} classes, {} with >= 2 samples",
                classes.len(),
                anchors.len()
            )));
        }
        Ok(TripletSampler { classes, anchors })
    }

    /// Anchor class uniform over classes with >= 2 samples, a distinct
    /// (anchor, positive) pair uniform within it, negative class uniform over
    /// the remaining classes and negative uniform within that class.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> [usize; 3] {
        let c = self.anchors[rng.gen_range(0..self.anchors.len())];
        let members = &self.classes[c];
        let a = rng.gen_range(0..members.len());
        let mut p = rng.gen_range(0..members.len() - 1);
        if p >= a {
            p += 1;
        }
        let mut nc = rng.gen_range(0..self.classes.len() - 1);
        if nc >= c {
            nc += 1;
        }
        let negatives = &self.classes[nc];
        let n = negatives[rng.gen_range(0..negatives.len())];
        [members[a], members[p], n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, ShapeKind};

    fn toy(root: &Path) -> Corpus {
        synth::write_corpus(root, &[ShapeKind::Sphere, ShapeKind::Cube], 5, 2, 1).unwrap();
        scan_corpus(root).unwrap()
    }

    fn fake_corpus(per_class: &[usize]) -> Corpus {
        let mut c = Corpus::default();
        for (label, &n) in per_class.iter().enumerate() {
            c.class_names.push(format!("c{label}"));
            for k in 0..n {
                c.samples.push(Sample {
                    path: PathBuf::from(format!("c{label}_{k}.off")),
                    label,
                    split: Split::Train,
                });
            }
        }
        c
    }

    #[test]
    fn scan_layout_and_census() {
        let dir = tempfile::tempdir().unwrap();
        let c = toy(dir.path());
        assert_eq!(c.class_names, vec!["cube", "sphere"]);
        let census = c.census();
        assert_eq!((census.total, census.train, census.test), (14, 10, 4));
        assert_eq!(census.class_range(), Some((7, 7)));
        let train = c.indices(Split::Train);
        let test = c.indices(Split::Test);
        assert!(train.iter().all(|i| !test.contains(i)));
    }

    #[test]
    fn missing_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("chair/train")).unwrap();
        assert!(matches!(scan_corpus(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn manifest() {
        let dir = tempfile::tempdir().unwrap();
        let c = toy(dir.path());
        let mut text = String::from("path,label,split\n");
        for s in &c.samples {
            let rel = s.path.strip_prefix(dir.path()).unwrap();
            text.push_str(&format!("{},{},{}\n", rel.display(), c.class_names[s.label], s.split.name()));
        }
        text.push_str("missing.off,cube,train\n");
        let path = dir.path().join("manifest.csv");
        fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.samples.len(), c.samples.len());
        assert_eq!(m.unreadable.len(), 1);
        fs::write(&path, "path,label,split\na.off,x,val\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn hold_out_is_seeded_and_disjoint() {
        let c = fake_corpus(&[20, 10, 3]);
        let all: Vec<usize> = (0..c.samples.len()).collect();
        let (keep, held) = c.hold_out(&all, 0.1, 3);
        assert_eq!(held.len(), 2 + 1 + 1);
        assert_eq!(keep.len() + held.len(), all.len());
        assert!(keep.iter().all(|i| !held.contains(i)));
        assert_eq!(c.hold_out(&all, 0.1, 3), (keep, held));
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let c = toy(dir.path());
        let cache = MeshCache::default();
        let render = RenderConfig::new(8, 10).unwrap();
        let train = c.indices(Split::Train);
        let plan = BatchPlan {
            batch_size: 4,
            seed: 5,
            epoch: 0,
            shuffle: true,
            augment: Some(1),
        };
        let collect = |plan: BatchPlan| -> Vec<Batch> {
            BatchStream::new(&c, &train, plan, render, &cache)
                .unwrap()
                .collect::<Result<_>>()
                .unwrap()
        };
        let a = collect(plan);
        assert_eq!(a.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b = collect(plan);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices, y.indices);
            assert_eq!(x.grid.sites(), y.grid.sites());
        }
        let next = collect(BatchPlan { epoch: 1, ..plan });
        assert_ne!(
            a.iter().map(|b| b.indices.clone()).collect::<Vec<_>>(),
            next.iter().map(|b| b.indices.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unreadable_sample_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = toy(dir.path());
        fs::write(&c.samples[0].path, "OFF\n1 1 0\n0 0 0\n3 0 1 2\n").unwrap();
        c.samples[1].path = dir.path().join("gone.off");
        let cache = MeshCache::default();
        let render = RenderConfig::new(8, 10).unwrap();
        let aug = [Augmentation::identity(); 3];
        let b = assemble_batch(&c, &[0, 1, 2], &render, &aug, &cache).unwrap().unwrap();
        assert_eq!(b.indices, vec![2]);
        assert!(assemble_batch(&c, &[0, 1], &render, &aug[..2], &cache).unwrap().is_none());
    }

    #[test]
    fn triplet_pairs_are_uniform() {
        let c = fake_corpus(&[2, 2]);
        let s = TripletSampler::new(&c, &[0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut counts: HashMap<[usize; 3], usize> = HashMap::new();
        for _ in 0..draws {
            let t = s.sample(&mut rng);
            assert_eq!(c.samples[t[0]].label, c.samples[t[1]].label);
            assert_ne!(c.samples[t[0]].label, c.samples[t[2]].label);
            assert_ne!(t[0], t[1]);
            *counts.entry(t).or_default() += 1;
        }
        // 2 anchor classes x 2 ordered pairs x 2 negatives, all equally likely
        assert_eq!(counts.len(), 8);
        let expected = draws as f64 / 8.0;
        let sigma = (draws as f64 * (1.0 / 8.0) * (7.0 / 8.0)).sqrt();
        let chi2: f64 = counts.values().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
        for &n in counts.values() {
            assert!((n as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
        }
        // 7 degrees of freedom, 99.9% quantile
        assert!(chi2 < 24.32, "{chi2}");
    }

    #[test]
    fn singleton_class_never_anchors() {
        let c = fake_corpus(&[1, 3]);
        let s = TripletSampler::new(&c, &[0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut neg_zero = 0;
        for _ in 0..1000 {
            let t = s.sample(&mut rng);
            assert_ne!(t[0], 0);
            neg_zero += (t[2] == 0) as usize;
        }
        assert_eq!(neg_zero, 1000);
        assert!(TripletSampler::new(&fake_corpus(&[5]), &[0, 1, 2, 3, 4]).is_err());
        assert!(TripletSampler::new(&fake_corpus(&[1, 1]), &[0, 1]).is_err());
    }
}
