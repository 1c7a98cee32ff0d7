//! Retrieval evaluation of treatment profiles: cosine ranking, folds of
//! enrichment, mean average precision, recall@K and IMAD.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiles::{Level, ProfileTable, Role};
use crate::tensor::Rng;
use crate::util::median;

pub const DEFAULT_TOP_FRAC: f64 = 0.01;
pub const RECALL_KS: [usize; 4] = [1, 3, 5, 10];
/// Returned by IMAD when all pairwise distances coincide.
pub const IMAD_CLAMP: f64 = 1e9;
/// Fraction of variance kept by the PCA step of IMAD.
pub const IMAD_VARIANCE: f64 = 0.95;

// ── annotations ──────────────────────────────────────────────────────────

/// Treatment → set of biological annotations (MoA or pathway).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationMap {
    entries: BTreeMap<String, BTreeSet<String>>,
}

impl AnnotationMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, treatment: impl Into<String>, annotation: impl Into<String>) {
        self.entries.entry(treatment.into()).or_default().insert(annotation.into());
    }

    pub fn get(&self, treatment: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(treatment)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn treatments(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Whether two treatments share at least one annotation.
    pub fn related(&self, a: &str, b: &str) -> bool {
        match (self.entries.get(a), self.entries.get(b)) {
            (Some(x), Some(y)) => !x.is_disjoint(y),
            _ => false,
        }
    }

    /// Read a `treatment,annotation` CSV; repeated treatments accumulate.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::input(path, e.to_string()))?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::input(path, format!("missing column {name:?}")))
        };
        let (t, a) = (col("treatment")?, col("annotation")?);
        let mut map = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            let (tv, av) = (rec.get(t).unwrap_or("").trim(), rec.get(a).unwrap_or("").trim());
            if tv.is_empty() || av.is_empty() {
                return Err(Error::input(path, format!("empty cell in row {:?}", rec.position().map(|p| p.line()))));
            }
            map.insert(tv, av);
        }
        if map.is_empty() {
            return Err(Error::input(path, "no annotations"));
        }
        Ok(map)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["treatment", "annotation"])?;
        for (t, set) in &self.entries {
            for a in set {
                w.write_record([t, a])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        crate::util::write_atomic(path.as_ref(), &bytes)
    }
}

// ── ranking ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub treatment: String,
    pub similarity: f64,
    pub relevant: bool,
}

/// Other treatments ordered by descending cosine similarity to `query`,
/// ties broken by ascending treatment name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub items: Vec<RankedItem>,
}

impl RankedList {
    pub fn relevance(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.relevant).collect()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_hit_rank(&self) -> Option<usize> {
        self.items.iter().position(|i| i.relevant).map(|p| p + 1)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Similarity rankings of every treated treatment against all others, with
/// relevance left unset. Control rows are ignored.
pub fn rank_by_cosine(table: &ProfileTable) -> Result<Vec<RankedList>> {
    if table.level() != Level::Treatment {
        return Err(Error::InvalidArgument(format!("ranking needs a treatment-level table, got {}", table.level())));
    }
    let rows: Vec<_> = table.rows().iter().filter(|r| r.role == Role::Treated).collect();
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!("ranking needs >= 2 treatments, got {}", rows.len())));
    }
    if let Some(zero) = rows.iter().find(|r| r.vector.iter().all(|&v| v == 0.0)) {
        return Err(Error::InvalidArgument(format!("treatment {:?} has a zero-norm profile", zero.treatment)));
    }
    Ok(rows
        .iter()
        .map(|q| {
            let mut items: Vec<RankedItem> = rows
                .iter()
                .filter(|o| o.treatment != q.treatment)
                .map(|o| RankedItem {
                    treatment: o.treatment.clone(),
                    similarity: cosine(&q.vector, &o.vector),
                    relevant: false,
                })
                .collect();
            items.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.treatment.cmp(&b.treatment)));
            RankedList { query: q.treatment.clone(), items }
        })
        .collect())
}

/// Mark relevance from `annotations` and drop queries without any relevant
/// partner. Every ranked treatment must be annotated.
pub fn attach_relevance(lists: &[RankedList], annotations: &AnnotationMap) -> Result<Vec<RankedList>> {
    if let Some(missing) = lists.iter().map(|l| &l.query).find(|q| annotations.get(q).is_none()) {
        return Err(Error::InvalidArgument(format!("treatment {missing:?} has no annotation")));
    }
    Ok(lists
        .iter()
        .map(|l| RankedList {
            query: l.query.clone(),
            items: l
                .items
                .iter()
                .map(|i| RankedItem { relevant: annotations.related(&l.query, &i.treatment), ..i.clone() })
                .collect(),
        })
        .filter(|l| l.items.iter().any(|i| i.relevant))
        .collect())
}

pub fn cosine_rank(table: &ProfileTable, annotations: &AnnotationMap) -> Result<Vec<RankedList>> {
    attach_relevance(&rank_by_cosine(table)?, annotations)
}

// ── folds of enrichment ──────────────────────────────────────────────────

/// Number of top connections for a list of `n` items: `ceil(top_frac · n)`,
/// at least 1.
pub fn top_k(n: usize, top_frac: f64) -> usize {
    // The small slack keeps products such as 0.01 · 300 from rounding up.
    (((top_frac * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Contingency cells `[a, b, c, d]`: relevant/irrelevant in the top `k`,
/// then relevant/irrelevant below it.
pub fn contingency(relevance: &[bool], k: usize) -> [usize; 4] {
    let (top, rest) = relevance.split_at(k.min(relevance.len()));
    let a = top.iter().filter(|&&r| r).count();
    let c = rest.iter().filter(|&&r| r).count();
    [a, top.len() - a, c, rest.len() - c]
}

/// Sample odds ratio `(a·d)/(b·c)`, adding 0.5 to every cell when any is zero.
pub fn odds_ratio([a, b, c, d]: [usize; 4]) -> f64 {
    let [a, b, c, d] = [a, b, c, d].map(|v| v as f64);
    if a == 0.0 || b == 0.0 || c == 0.0 || d == 0.0 {
        ((a + 0.5) * (d + 0.5)) / ((b + 0.5) * (c + 0.5))
    } else {
        (a * d) / (b * c)
    }
}

fn check_top_frac(top_frac: f64) -> Result<()> {
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("top_frac must lie in (0,1], got {top_frac}")));
    }
    Ok(())
}

pub fn query_odds_ratio(relevance: &[bool], top_frac: f64) -> Result<f64> {
    check_top_frac(top_frac)?;
    if relevance.is_empty() {
        return Err(Error::InvalidArgument("empty ranked list".into()));
    }
    Ok(odds_ratio(contingency(relevance, top_k(relevance.len(), top_frac))))
}

/// Mean odds ratio over queries.
pub fn foe(lists: &[RankedList], top_frac: f64) -> Result<f64> {
    check_top_frac(top_frac)?;
    if lists.is_empty() {
        return Err(Error::InvalidArgument("no ranked lists".into()));
    }
    let ors = lists.iter().map(|l| query_odds_ratio(&l.relevance(), top_frac)).collect::<Result<Vec<_>>>()?;
    Ok(ors.iter().sum::<f64>() / ors.len() as f64)
}

// ── precision metrics ────────────────────────────────────────────────────

/// Mean of the interpolated precision `max_{r' ≥ r} P(r')` at the recall
/// points `1/R, …, 1`.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let mut hit_precision = Vec::new();
    let mut hits = 0usize;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            hit_precision.push(hits as f64 / (i + 1) as f64);
        }
    }
    if hits == 0 {
        return Err(Error::InvalidArgument("average precision of a list without relevant items".into()));
    }
    for j in (0..hits - 1).rev() {
        hit_precision[j] = hit_precision[j].max(hit_precision[j + 1]);
    }
    Ok(hit_precision.iter().sum::<f64>() / hits as f64)
}

pub fn mean_average_precision(lists: &[RankedList]) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::InvalidArgument("no ranked lists".into()));
    }
    let aps = lists.iter().map(|l| average_precision(&l.relevance())).collect::<Result<Vec<_>>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of queries with at least one relevant item in the top `k`.
pub fn recall_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if lists.is_empty() {
        return Ok(0.0);
    }
    let hits = lists.iter().filter(|l| l.first_hit_rank().is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / lists.len() as f64)
}

// ── IMAD ─────────────────────────────────────────────────────────────────

/// Principal components of `rows`, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Column `k` of this `dim × dim` matrix is the `k`-th principal axis.
    pub axes: DMatrix<f64>,
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InvalidArgument("PCA needs >= 2 rows".into()));
        }
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let mut axes = DMatrix::from_fn(d, d, |i, k| eig.eigenvectors[(i, order[k])]);
        // Fix each axis' sign so the largest-magnitude entry is positive.
        for k in 0..d {
            let col = axes.column(k);
            let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
            if pivot < 0.0 {
                axes.column_mut(k).neg_mut();
            }
        }
        Ok(Self { mean, eigenvalues, axes })
    }

    /// Smallest number of components whose variance share reaches `fraction`.
    pub fn components_for(&self, fraction: f64) -> usize {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 1;
        }
        let mut acc = 0.0;
        for (k, l) in self.eigenvalues.iter().enumerate() {
            acc += l;
            if acc >= fraction * total * (1.0 - 1e-12) {
                return k + 1;
            }
        }
        self.eigenvalues.len()
    }

    /// Scores of `rows` on the first `k` axes, optionally divided by the
    /// axis standard deviation.
    pub fn transform(&self, rows: &[Vec<f64>], k: usize, whiten: bool) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                (0..k)
                    .map(|c| {
                        let s: f64 =
                            r.iter().zip(&self.mean).enumerate().map(|(i, (x, m))| (x - m) * self.axes[(i, c)]).sum();
                        let sd = self.eigenvalues[c].sqrt();
                        if whiten && sd > 0.0 {
                            s / sd
                        } else {
                            s
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Maps PCA-reduced well profiles to 2-D coordinates.
pub trait Embedder {
    fn embed(&self, reduced: &[Vec<f64>]) -> Result<Vec<[f64; 2]>>;
}

/// The first two principal axes of the reduced data, optionally scaled to
/// unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcaEmbedder {
    pub whiten: bool,
}

impl Default for PcaEmbedder {
    fn default() -> Self {
        Self { whiten: true }
    }
}

impl Embedder for PcaEmbedder {
    fn embed(&self, reduced: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
        let pca = Pca::fit(reduced)?;
        let k = pca.eigenvalues.len().min(2);
        Ok(pca
            .transform(reduced, k, self.whiten)
            .into_iter()
            .map(|s| [s[0], s.get(1).copied().unwrap_or(0.0)])
            .collect())
    }
}

/// `1 / max(MAD, 1e-9)` of all pairwise Euclidean distances between points.
pub fn imad_from_coords(points: &[[f64; 2]]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("IMAD needs >= 3 points, got {}", points.len())));
    }
    let mut dist = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            dist.push(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
        }
    }
    let med = median(&dist).expect("at least three distances");
    let dev: Vec<f64> = dist.iter().map(|d| (d - med).abs()).collect();
    let mad = median(&dev).expect("at least three deviations");
    if mad < 1e-9 {
        log::warn!("pairwise distances have zero spread; IMAD clamped to {IMAD_CLAMP:e}");
        return Ok(IMAD_CLAMP);
    }
    Ok(1.0 / mad)
}

/// IMAD of a well table: PCA keeping 95% of the variance, a 2-D embedding,
/// then [`imad_from_coords`].
pub fn imad(wells: &ProfileTable, embedder: &dyn Embedder) -> Result<f64> {
    if wells.len() < 3 {
        return Err(Error::InvalidArgument(format!("IMAD needs >= 3 wells, got {}", wells.len())));
    }
    let rows: Vec<Vec<f64>> = wells.rows().iter().map(|r| r.vector.clone()).collect();
    let pca = Pca::fit(&rows)?;
    let k = pca.components_for(IMAD_VARIANCE);
    let reduced = pca.transform(&rows, k, false);
    let coords = embedder.embed(&reduced)?;
    if coords.len() != rows.len() {
        return Err(Error::Invariant("embedder returned a different number of points".into()));
    }
    imad_from_coords(&coords)
}

// ── report ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    pub average_precision: f64,
    pub odds_ratio: f64,
    pub first_hit_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub foe: f64,
    pub map: f64,
    /// Keys `recall@K`.
    #[serde(flatten)]
    pub recall_at: BTreeMap<String, f64>,
    pub imad: Option<f64>,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&format!("recall@{k}")).copied()
    }

    /// `recall@K` values ordered by K.
    pub fn recalls(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .recall_at
            .iter()
            .filter_map(|(key, &v)| key.strip_prefix("recall@")?.parse().ok().map(|k| (k, v)))
            .collect();
        out.sort_by_key(|p| p.0);
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::util::write_atomic(path.as_ref(), &bytes)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_slice(&crate::util::read_file(path)?).map_err(|e| Error::input(path, e.to_string()))
    }
}

/// Metrics of already ranked lists.
pub fn report_from_lists(lists: &[RankedList], top_frac: f64) -> Result<EvalReport> {
    if lists.is_empty() {
        return Err(Error::InvalidArgument("no query has a relevant partner".into()));
    }
    let per_query = lists
        .iter()
        .map(|l| {
            let rel = l.relevance();
            Ok(QueryResult {
                query: l.query.clone(),
                average_precision: average_precision(&rel)?,
                odds_ratio: query_odds_ratio(&rel, top_frac)?,
                first_hit_rank: l.first_hit_rank().expect("lists have a relevant item"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let recall_at = RECALL_KS
        .iter()
        .map(|&k| Ok((format!("recall@{k}"), recall_at_k(lists, k)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalReport { foe: foe(lists, top_frac)?, map: mean_average_precision(lists)?, recall_at, imad: None, per_query })
}

/// Rank, attach relevance and compute every metric.
pub fn evaluate(treatments: &ProfileTable, annotations: &AnnotationMap, top_frac: f64) -> Result<EvalReport> {
    report_from_lists(&cosine_rank(treatments, annotations)?, top_frac)
}

/// Mean MAP after randomly permuting annotation sets among the ranked
/// treatments, the chance level for a given ranking.
pub fn permutation_baseline_map(
    treatments: &ProfileTable,
    annotations: &AnnotationMap,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    let ranked = rank_by_cosine(treatments)?;
    let names: Vec<String> = ranked.iter().map(|l| l.query.clone()).collect();
    let sets: Vec<&BTreeSet<String>> = names
        .iter()
        .map(|n| annotations.get(n).ok_or_else(|| Error::InvalidArgument(format!("treatment {n:?} has no annotation"))))
        .collect::<Result<_>>()?;
    let mut rng = Rng::new(seed);
    let mut total = 0.0;
    let mut counted = 0usize;
    for _ in 0..permutations {
        let mut perm: Vec<usize> = (0..names.len()).collect();
        rng.shuffle(&mut perm);
        let mut shuffled = AnnotationMap::new();
        for (name, &p) in names.iter().zip(&perm) {
            for a in sets[p] {
                shuffled.insert(name.clone(), a.clone());
            }
        }
        let lists = attach_relevance(&ranked, &shuffled)?;
        if !lists.is_empty() {
            total += mean_average_precision(&lists)?;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidArgument("no permutation produced a valid query".into()));
    }
    Ok(total / counted as f64)
}
