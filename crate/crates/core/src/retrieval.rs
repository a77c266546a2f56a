//! Distance ranking and retrieval metrics (AP, mAP, 11-point interpolated
//! precision-recall, AUC).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recall levels of the interpolated precision-recall curve.
pub const PR_LEVELS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankBy {
    #[default]
    Cosine,
    L2,
}

impl std::str::FromStr for RankBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(RankBy::Cosine),
            "l2" => Ok(RankBy::L2),
            _ => Err(Error::invalid(format!("unknown ranking metric `{s}` (cosine|l2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub vectors: Array2<f32>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, labels: Vec<String>, vectors: Array2<f32>) -> Result<Self> {
        if ids.len() != labels.len() || ids.len() != vectors.nrows() {
            return Err(Error::invalid(format!(
                "embedding set has {} ids, {} labels and {} rows",
                ids.len(),
                labels.len(),
                vectors.nrows()
            )));
        }
        Ok(EmbeddingSet { ids, labels, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Rows indexed by class label, in label order.
    pub fn by_class(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            m.entry(l.as_str()).or_default().push(i);
        }
        m
    }
}

fn norm(v: ArrayView1<'_, f32>) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn distance(q: ArrayView1<'_, f32>, c: ArrayView1<'_, f32>, by: RankBy, qn: f64, cn: f64) -> f64 {
    match by {
        RankBy::Cosine => {
            let dot: f64 = q.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum();
            1.0 - dot / (qn * cn)
        }
        RankBy::L2 => q
            .iter()
            .zip(c)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt(),
    }
}

/// Candidates ordered by ascending distance to `query`; ties keep index order.
/// Cosine ranking rejects a zero-norm query and drops zero-norm candidates.
pub fn rank(query: ArrayView1<'_, f32>, candidates: &Array2<f32>, by: RankBy) -> Result<Vec<usize>> {
    let ranked = rank_with_distances(query, candidates, by, |_| true)?;
    Ok(ranked.into_iter().map(|(i, _)| i).collect())
}

fn rank_with_distances(
    query: ArrayView1<'_, f32>,
    candidates: &Array2<f32>,
    by: RankBy,
    keep: impl Fn(usize) -> bool,
) -> Result<Vec<(usize, f64)>> {
    if query.len() != candidates.ncols() {
        return Err(Error::DimensionMismatch {
            expected: candidates.ncols(),
            actual: query.len(),
        });
    }
    let qn = norm(query);
    if by == RankBy::Cosine && qn == 0.0 {
        return Err(Error::Degenerate("zero-norm query".into()));
    }
    let mut out: Vec<(usize, f64)> = candidates
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .filter_map(|(i, c)| {
            let cn = norm(c);
            (by == RankBy::L2 || cn > 0.0).then(|| (i, distance(query, c, by, qn, cn)))
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(out)
}

/// Mean of precision@k over the ranks k that hold a relevant item.
/// `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Interpolated precision at recall 0.0, 0.1, ..., 1.0: the best precision
/// reached at any rank whose recall is at least the level.
pub fn interpolated_precision(relevant: &[bool]) -> Option<[f64; PR_LEVELS]> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut points = Vec::with_capacity(total);
    let mut hits = 0usize;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            points.push((hits as f64 / total as f64, hits as f64 / (k + 1) as f64));
        }
    }
    let mut out = [0.0; PR_LEVELS];
    for (level, slot) in out.iter_mut().enumerate() {
        let r = level as f64 / (PR_LEVELS - 1) as f64;
        // tolerance absorbs 3/10 != 0.3 style rounding
        *slot = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
    }
    Some(out)
}

/// Trapezoidal area under an evenly spaced curve over recall [0, 1].
pub fn pr_auc(curve: &[f64; PR_LEVELS]) -> f64 {
    let h = 1.0 / (PR_LEVELS - 1) as f64;
    curve.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub ranked: Vec<usize>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub per_query: Vec<QueryResult>,
    pub map: f64,
    /// Mean interpolated precision at recall 0.0, 0.1, ..., 1.0.
    pub pr_curve: [f64; PR_LEVELS],
    pub auc: f64,
    /// Queries without a usable relevant candidate (or a zero-norm query
    /// under cosine ranking); excluded from all means.
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub auc: f64,
    pub n_queries: usize,
    pub n_skipped: usize,
}

impl RetrievalResult {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            map: self.map,
            auc: self.auc,
            n_queries: self.per_query.len(),
            n_skipped: self.n_skipped,
        }
    }

    pub fn pr_points(&self) -> Vec<(f64, f64)> {
        self.pr_curve
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as f64 / (PR_LEVELS - 1) as f64, p))
            .collect()
    }
}

/// Leave-query-out retrieval of every `queries` row against the whole set.
pub fn evaluate(set: &EmbeddingSet, queries: &[usize], by: RankBy) -> Result<RetrievalResult> {
    if queries.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= set.len()) {
        return Err(Error::invalid(format!("query index {q} out of range")));
    }
    let outcomes: Vec<Option<(QueryResult, [f64; PR_LEVELS])>> = queries
        .par_iter()
        .map(|&q| {
            let ranked = match rank_with_distances(set.vectors.row(q), &set.vectors, by, |i| i != q) {
                Ok(r) => r,
                Err(_) => return None,
            };
            let relevant: Vec<bool> = ranked.iter().map(|&(i, _)| set.labels[i] == set.labels[q]).collect();
            let ap = average_precision(&relevant)?;
            let pr = interpolated_precision(&relevant)?;
            Some((
                QueryResult {
                    query: q,
                    ranked: ranked.into_iter().map(|(i, _)| i).collect(),
                    ap,
                },
                pr,
            ))
        })
        .collect();
    let n_skipped = outcomes.iter().filter(|o| o.is_none()).count();
    let kept: Vec<_> = outcomes.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {} queries were skipped (no relevant candidates)",
            queries.len()
        )));
    }
    if n_skipped > 0 {
        log::warn!("{n_skipped} of {} queries skipped", queries.len());
    }
    let n = kept.len() as f64;
    let mut pr_curve = [0.0; PR_LEVELS];
    for (_, pr) in &kept {
        for (acc, p) in pr_curve.iter_mut().zip(pr) {
            *acc += p;
        }
    }
    pr_curve.iter_mut().for_each(|p| *p /= n);
    let map = kept.iter().map(|(r, _)| r.ap).sum::<f64>() / n;
    Ok(RetrievalResult {
        per_query: kept.into_iter().map(|(r, _)| r).collect(),
        map,
        auc: pr_auc(&pr_curve),
        pr_curve,
        n_skipped,
    })
}

/// Every row as a query.
pub fn evaluate_all(set: &EmbeddingSet, by: RankBy) -> Result<RetrievalResult> {
    let queries: Vec<usize> = (0..set.len()).collect();
    evaluate(set, &queries, by)
}

/// Up to `per_class` seeded random rows of each class. Classes smaller than
/// `per_class` contribute all their rows and are reported as capped.
pub fn select_queries(set: &EmbeddingSet, per_class: usize, seed: u64) -> (Vec<usize>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::new();
    let mut capped = Vec::new();
    for (label, mut rows) in set.by_class() {
        if rows.len() < per_class {
            capped.push(label.to_string());
        }
        rows.shuffle(&mut rng);
        rows.truncate(per_class);
        rows.sort_unstable();
        queries.extend(rows);
    }
    queries.sort_unstable();
    (queries, capped)
}

pub fn write_embeddings_csv<W: Write>(set: &EmbeddingSet, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..set.dim()).map(|k| format!("v{k}")));
    out.write_record(&header).map_err(csv_err)?;
    for (i, row) in set.vectors.axis_iter(Axis(0)).enumerate() {
        let mut rec = vec![set.ids[i].clone(), set.labels[i].clone()];
        // `{}` on f32 prints the shortest exactly round-tripping form
        rec.extend(row.iter().map(|v| v.to_string()));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_embeddings_csv<R: Read>(r: R) -> Result<EmbeddingSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(Error::format("embeddings CSV must start with `id,label,v0`"));
    }
    let dim = headers.len() - 2;
    let (mut ids, mut labels, mut values) = (Vec::new(), Vec::new(), Vec::new());
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", dim + 2, rec.len()),
            });
        }
        ids.push(rec[0].to_string());
        labels.push(rec[1].to_string());
        for field in rec.iter().skip(2) {
            let v: f32 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("not a number: `{field}`"),
            })?;
            values.push(v);
        }
    }
    let vectors = Array2::from_shape_vec((ids.len(), dim), values).expect("row lengths checked");
    EmbeddingSet::new(ids, labels, vectors)
}

pub fn save_embeddings_csv(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    write_embeddings_csv(set, std::io::BufWriter::new(f)).map_err(|e| e.in_file(path))
}

pub fn load_embeddings_csv(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    read_embeddings_csv(std::io::BufReader::new(f)).map_err(|e| e.in_file(path))
}

pub fn write_pr_csv<W: Write>(result: &RetrievalResult, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["recall", "precision"]).map_err(csv_err)?;
    for (r, p) in result.pr_points() {
        out.write_record([format!("{r:.1}"), p.to_string()]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("{other:?}")),
    }
}
