//! Hamming-space retrieval evaluation.
//!
//! Codes are bit-packed into 64-bit words (`+1 -> 1`, `-1 -> 0`, padding
//! bits zero). Ranking is by ascending Hamming distance with ties broken by
//! ascending id, so every report is deterministic.
//!
//! Code file layout (little-endian):
//!
//! ```text
//! "CMHC" | version u32 | n u32 | k u32
//! n * ceil(k/64) u64 packed codes
//! n u64 ids
//! label_words u32 | n * label_words u64 label bitsets
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ByteReader, FeatureDataset};
use crate::error::{Error, Result};
use crate::model::{HashCode, Model};

pub const CODE_MAGIC: &[u8; 4] = b"CMHC";
pub const CODE_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

/// Ks on the mAP-vs-K axis: 5, 10, 20, ..., 100.
pub fn default_ks() -> Vec<usize> {
    std::iter::once(5).chain((1..=10).map(|i| 10 * i)).collect()
}

/// Recall grid 0.05, 0.10, ..., 1.0.
pub fn recall_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

#[inline]
fn words_for(k: usize) -> usize {
    k.div_ceil(64)
}

/// Packs a `{-1, +1}` code into `ceil(k / 64)` words.
pub fn pack(code: &HashCode) -> Vec<u64> {
    let mut words = vec![0u64; words_for(code.len())];
    for (i, &b) in code.bits().iter().enumerate() {
        if b > 0 {
            words[i / 64] |= 1u64 << (i % 64);
        }
    }
    words
}

fn unpack(words: &[u64], k: usize) -> HashCode {
    let bits = (0..k)
        .map(|i| if words[i / 64] >> (i % 64) & 1 == 1 { 1 } else { -1 })
        .collect();
    HashCode::from_bits(bits).expect("unpacked bits are +-1")
}

/// XOR + popcount over packed words.
#[inline]
pub fn hamming_packed(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

pub fn hamming_distance(a: &HashCode, b: &HashCode) -> Result<u32> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("code lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(hamming_packed(&pack(a), &pack(b)))
}

/// Label set stored as a bitset; class `c` sets bit `c`.
pub fn label_bits(labels: &[u32]) -> Vec<u64> {
    let words = labels.iter().map(|&l| l as usize / 64 + 1).max().unwrap_or(0);
    let mut out = vec![0u64; words];
    for &l in labels {
        out[l as usize / 64] |= 1u64 << (l % 64);
    }
    out
}

fn labels_intersect(a: &[u64], b: &[u64]) -> bool {
    a.iter().zip(b).any(|(x, y)| x & y != 0)
}

/// Immutable-after-build corpus of packed codes, ids and label bitsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeDatabase {
    k: usize,
    words: usize,
    label_words: usize,
    codes: Vec<u64>,
    ids: Vec<u64>,
    labels: Vec<u64>,
}

impl CodeDatabase {
    /// Builds a database; `labels[i]` lists the classes of item `i`.
    pub fn new(codes: &[HashCode], ids: Vec<u64>, labels: &[Vec<u32>]) -> Result<Self> {
        if codes.len() != ids.len() || codes.len() != labels.len() {
            return Err(Error::arg("codes, ids and labels must align"));
        }
        let k = codes.first().map_or(0, HashCode::len);
        if k == 0 && !codes.is_empty() {
            return Err(Error::arg("codes must be non-empty"));
        }
        if codes.iter().any(|c| c.len() != k) {
            return Err(Error::arg("codes have inconsistent lengths"));
        }
        let label_sets: Vec<Vec<u64>> = labels.iter().map(|l| label_bits(l)).collect();
        let label_words = label_sets.iter().map(Vec::len).max().unwrap_or(0);
        let mut flat_labels = Vec::with_capacity(label_words * codes.len());
        for mut l in label_sets {
            l.resize(label_words, 0);
            flat_labels.extend(l);
        }
        Ok(CodeDatabase {
            k,
            words: words_for(k),
            label_words,
            codes: codes.iter().flat_map(pack).collect(),
            ids,
            labels: flat_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_length(&self) -> usize {
        self.k
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn packed(&self, i: usize) -> &[u64] {
        &self.codes[i * self.words..(i + 1) * self.words]
    }

    pub fn code(&self, i: usize) -> HashCode {
        unpack(self.packed(i), self.k)
    }

    pub fn label_set(&self, i: usize) -> &[u64] {
        &self.labels[i * self.label_words..(i + 1) * self.label_words]
    }

    pub fn labels(&self, i: usize) -> Vec<u32> {
        let set = self.label_set(i);
        (0..self.label_words * 64)
            .filter(|&b| set[b / 64] >> (b % 64) & 1 == 1)
            .map(|b| b as u32)
            .collect()
    }

    /// Items at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> CodeDatabase {
        let mut out = CodeDatabase {
            k: self.k,
            words: self.words,
            label_words: self.label_words,
            codes: Vec::with_capacity(idx.len() * self.words),
            ids: Vec::with_capacity(idx.len()),
            labels: Vec::with_capacity(idx.len() * self.label_words),
        };
        for &i in idx {
            out.codes.extend_from_slice(self.packed(i));
            out.ids.push(self.ids[i]);
            out.labels.extend_from_slice(self.label_set(i));
        }
        out
    }

    /// Flips bit `p` of every code.
    pub fn flip_bit(&mut self, p: usize) {
        assert!(p < self.k);
        for i in 0..self.len() {
            self.codes[i * self.words + p / 64] ^= 1u64 << (p % 64);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * (self.codes.len() + self.ids.len() + self.labels.len()));
        out.extend_from_slice(CODE_MAGIC);
        out.extend_from_slice(&CODE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        for w in &self.codes {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&(self.label_words as u32).to_le_bytes());
        for w in &self.labels {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Parses a code file. Never panics on malformed input.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != CODE_MAGIC {
            return Err(Error::format("magic", "not a CMHC code file"));
        }
        let version = r.u32("version")?;
        if version != CODE_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let n = r.u32("n")? as usize;
        let k = r.u32("k")? as usize;
        if k == 0 {
            return Err(Error::format("k", "code length must be positive"));
        }
        let words = words_for(k);
        let code_words = n
            .checked_mul(words)
            .filter(|w| w.saturating_mul(8) <= r.remaining())
            .ok_or_else(|| Error::format("codes", "truncated code block"))?;
        let mut codes = Vec::with_capacity(code_words);
        for _ in 0..code_words {
            codes.push(r.u64("codes")?);
        }
        let pad = words * 64 - k;
        if pad > 0 {
            let mask = !0u64 << (64 - pad);
            if (0..n).any(|i| codes[i * words + words - 1] & mask != 0) {
                return Err(Error::format("codes", "padding bits must be zero"));
            }
        }
        if n.saturating_mul(8) > r.remaining() {
            return Err(Error::format("ids", "truncated id block"));
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(r.u64("ids")?);
        }
        let label_words = r.u32("label_words")? as usize;
        let total = n
            .checked_mul(label_words)
            .and_then(|w| w.checked_mul(8))
            .ok_or_else(|| Error::format("labels", "label block overflows"))?;
        if total != r.remaining() {
            return Err(Error::format(
                "labels",
                format!("expected {total} label bytes, found {}", r.remaining()),
            ));
        }
        let mut labels = Vec::with_capacity(n * label_words);
        for _ in 0..n * label_words {
            labels.push(r.u64("labels")?);
        }
        Ok(CodeDatabase {
            k,
            words,
            label_words,
            codes,
            ids,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Ranking workspace: database positions sorted by id, reused per query.
struct Ranker<'a> {
    db: &'a CodeDatabase,
    by_id: Vec<usize>,
    buckets: Vec<Vec<usize>>,
}

impl<'a> Ranker<'a> {
    fn new(db: &'a CodeDatabase) -> Self {
        let mut by_id: Vec<usize> = (0..db.len()).collect();
        by_id.sort_by_key(|&i| db.ids[i]);
        Ranker {
            db,
            by_id,
            buckets: vec![Vec::new(); db.k + 1],
        }
    }

    /// Database positions in rank order, skipping items whose id is `exclude`.
    fn rank(&mut self, query: &[u64], exclude: Option<u64>) -> Vec<usize> {
        for b in &mut self.buckets {
            b.clear();
        }
        for &i in &self.by_id {
            if Some(self.db.ids[i]) == exclude {
                continue;
            }
            let d = hamming_packed(query, self.db.packed(i)) as usize;
            self.buckets[d].push(i);
        }
        self.buckets.iter().flatten().copied().collect()
    }
}

/// Database ids by ascending Hamming distance, ties by ascending id.
pub fn rank(query: &HashCode, db: &CodeDatabase) -> Result<Vec<u64>> {
    if db.is_empty() {
        return Err(Error::arg("rank: empty database"));
    }
    if query.len() != db.k {
        return Err(Error::arg(format!("query has {} bits, database {}", query.len(), db.k)));
    }
    let order = Ranker::new(db).rank(&pack(query), None);
    Ok(order.into_iter().map(|i| db.ids[i]).collect())
}

/// `sum_{i<=K} rel(i) * P(i) / min(total_relevant, K)`, zero when nothing
/// is relevant.
pub fn average_precision_at_k(flags: &[bool], k: usize, total_relevant: usize) -> f64 {
    if total_relevant == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in flags.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total_relevant.min(k) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query_id: u64,
    /// AP@K aligned with the report's `ks`.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub code_length: usize,
    pub num_queries: usize,
    pub num_database: usize,
    /// Queries that contributed to the means.
    pub evaluated_queries: usize,
    /// Queries without any relevant database item.
    pub skipped_queries: usize,
    /// Queries whose own id was found in, and removed from, the database.
    pub self_matches_excluded: usize,
    pub train_tag: Option<String>,
    pub test_tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub version: u32,
    pub ks: Vec<usize>,
    /// mAP@K keyed by K.
    pub map_at_k: BTreeMap<usize, f64>,
    /// Averaged (recall, precision) on the fixed recall grid.
    pub pr_points: Vec<(f64, f64)>,
    pub per_query_ap: Vec<QueryAp>,
    pub metadata: ReportMetadata,
}

impl RetrievalReport {
    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.map_at_k.get(&k).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn pr_csv(&self) -> String {
        let mut out = String::from("recall,precision\n");
        for (r, p) in &self.pr_points {
            out.push_str(&format!("{r},{p}\n"));
        }
        out
    }

    pub fn map_csv(&self) -> String {
        let mut out = String::from("k,map\n");
        for (k, v) in &self.map_at_k {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

fn check_compatible(queries: &CodeDatabase, db: &CodeDatabase) -> Result<()> {
    if db.is_empty() {
        return Err(Error::Evaluation("database is empty".into()));
    }
    if queries.k != db.k {
        return Err(Error::Evaluation(format!(
            "code length mismatch: queries {} bits, database {} bits",
            queries.k, db.k
        )));
    }
    Ok(())
}

struct QueryRanking {
    query_id: u64,
    flags: Vec<bool>,
    total_relevant: usize,
}

/// Ranked relevance flags for every query with at least one relevant item.
fn ranked_queries(queries: &CodeDatabase, db: &CodeDatabase, meta: &mut ReportMetadata) -> Vec<QueryRanking> {
    let db_ids: std::collections::HashSet<u64> = db.ids.iter().copied().collect();
    let mut ranker = Ranker::new(db);
    let mut out = Vec::with_capacity(queries.len());
    for q in 0..queries.len() {
        let qid = queries.ids[q];
        if db_ids.contains(&qid) {
            meta.self_matches_excluded += 1;
        }
        let qlabels = queries.label_set(q);
        let order = ranker.rank(queries.packed(q), Some(qid));
        let flags: Vec<bool> = order
            .iter()
            .map(|&i| labels_intersect(qlabels, db.label_set(i)))
            .collect();
        let total_relevant = flags.iter().filter(|&&f| f).count();
        if total_relevant == 0 {
            meta.skipped_queries += 1;
            continue;
        }
        out.push(QueryRanking {
            query_id: qid,
            flags,
            total_relevant,
        });
    }
    meta.evaluated_queries = out.len();
    out
}

/// Precision on the recall grid for one ranked list, interpolating
/// linearly between consecutive relevant hits.
fn pr_on_grid(flags: &[bool], total_relevant: usize, grid: &[f64]) -> Vec<f64> {
    let mut points = Vec::with_capacity(total_relevant);
    let mut hits = 0usize;
    for (i, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            points.push((hits as f64 / total_relevant as f64, hits as f64 / (i + 1) as f64));
        }
    }
    grid.iter()
        .map(|&g| {
            let j = points
                .iter()
                .position(|&(r, _)| r + 1e-12 >= g)
                .unwrap_or(points.len() - 1);
            let (r1, p1) = points[j];
            if j == 0 || (r1 - g).abs() <= 1e-12 {
                return p1;
            }
            let (r0, p0) = points[j - 1];
            p0 + (p1 - p0) * (g - r0) / (r1 - r0)
        })
        .collect()
}

/// mAP@K for each K plus the averaged PR curve.
pub fn evaluate(queries: &CodeDatabase, db: &CodeDatabase, ks: &[usize]) -> Result<RetrievalReport> {
    check_compatible(queries, db)?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Evaluation("Ks must be non-empty and positive".into()));
    }
    let mut meta = ReportMetadata {
        code_length: db.k,
        num_queries: queries.len(),
        num_database: db.len(),
        ..ReportMetadata::default()
    };
    let ranked = ranked_queries(queries, db, &mut meta);
    if ranked.is_empty() {
        return Err(Error::Evaluation("no query has a relevant database item".into()));
    }
    let grid = recall_grid();
    let mut sums = vec![0.0; ks.len()];
    let mut pr_sums = vec![0.0; grid.len()];
    let mut per_query_ap = Vec::with_capacity(ranked.len());
    for q in &ranked {
        let ap: Vec<f64> = ks
            .iter()
            .map(|&k| average_precision_at_k(&q.flags, k, q.total_relevant))
            .collect();
        for (s, v) in sums.iter_mut().zip(&ap) {
            *s += v;
        }
        for (s, p) in pr_sums.iter_mut().zip(pr_on_grid(&q.flags, q.total_relevant, &grid)) {
            *s += p;
        }
        per_query_ap.push(QueryAp {
            query_id: q.query_id,
            ap,
        });
    }
    let n = ranked.len() as f64;
    Ok(RetrievalReport {
        version: REPORT_VERSION,
        ks: ks.to_vec(),
        map_at_k: ks.iter().zip(&sums).map(|(&k, s)| (k, s / n)).collect(),
        pr_points: grid.iter().zip(&pr_sums).map(|(&g, s)| (g, s / n)).collect(),
        per_query_ap,
        metadata: meta,
    })
}

pub fn map_at_k(queries: &CodeDatabase, db: &CodeDatabase, ks: &[usize]) -> Result<RetrievalReport> {
    evaluate(queries, db, ks)
}

pub fn pr_curve(queries: &CodeDatabase, db: &CodeDatabase) -> Result<Vec<(f64, f64)>> {
    Ok(evaluate(queries, db, &[1])?.pr_points)
}

/// How an encoded split is divided into queries and database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fraction of videos drawn as queries. The database always holds every
    /// video; a query never retrieves itself.
    pub query_fraction: f64,
    pub split_seed: u64,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            query_fraction: 1.0,
            split_seed: 0,
            ks: default_ks(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.query_fraction > 0.0 && self.query_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "query_fraction {} outside (0, 1]",
                self.query_fraction
            )));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Sorted positions of the query videos among `n`.
    pub fn query_indices(&self, n: usize) -> Vec<usize> {
        let count = ((self.query_fraction * n as f64).round() as usize).clamp(1, n.max(1));
        let mut idx: Vec<usize> = (0..n).collect();
        if count < n {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.split_seed));
            idx.truncate(count);
            idx.sort_unstable();
        }
        idx
    }
}

fn dataset_labels(ds: &FeatureDataset) -> Result<Vec<Vec<u32>>> {
    ds.sequences
        .iter()
        .map(|s| {
            s.label
                .map(|l| vec![l])
                .ok_or_else(|| Error::Evaluation(format!("video {} has no label", s.video_id)))
        })
        .collect()
}

/// Encodes every video of `ds` with the mask-free inference path.
pub fn encode_dataset(model: &Model, ds: &FeatureDataset) -> Result<CodeDatabase> {
    let dim = model.config().feature_dim;
    if ds.dim != dim {
        return Err(Error::Config(format!(
            "dataset dim {} does not match checkpoint feature_dim {dim}",
            ds.dim
        )));
    }
    let mut codes = Vec::with_capacity(ds.len());
    for chunk in ds.sequences.chunks(256) {
        let frames: Vec<&crate::tensor::Mat> = chunk.iter().map(|s| &s.frames).collect();
        codes.extend(model.inference_codes(&frames)?);
    }
    let labels = if ds.sequences.iter().all(|s| s.label.is_some()) {
        dataset_labels(ds)?
    } else {
        vec![Vec::new(); ds.len()]
    };
    let ids = ds.sequences.iter().map(|s| s.video_id).collect();
    CodeDatabase::new(&codes, ids, &labels)
}

/// Splits an encoded dataset into (queries, database) per `cfg`.
pub fn split_codes(all: &CodeDatabase, cfg: &EvalConfig) -> (CodeDatabase, CodeDatabase) {
    (all.subset(&cfg.query_indices(all.len())), all.clone())
}

/// Evaluates an encoded dataset against itself.
pub fn evaluate_codes(all: &CodeDatabase, cfg: &EvalConfig) -> Result<RetrievalReport> {
    cfg.validate()?;
    let (queries, db) = split_codes(all, cfg);
    evaluate(&queries, &db, &cfg.ks)
}

/// Encodes `test_set` with a model trained elsewhere and evaluates it,
/// tagging the report with both domains.
pub fn cross_dataset_eval(
    model: &Model,
    train_tag: &str,
    test_set: &FeatureDataset,
    cfg: &EvalConfig,
) -> Result<RetrievalReport> {
    let dim = model.config().feature_dim;
    if test_set.dim != dim {
        return Err(Error::Config(format!(
            "test set dim {} does not match checkpoint feature_dim {dim}",
            test_set.dim
        )));
    }
    dataset_labels(test_set)?;
    let all = encode_dataset(model, test_set)?;
    let mut report = evaluate_codes(&all, cfg)?;
    report.metadata.train_tag = Some(train_tag.to_string());
    report.metadata.test_tag = Some(test_set.split_name.clone());
    Ok(report)
}
