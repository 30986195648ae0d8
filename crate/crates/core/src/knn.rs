//! Exhaustive k-nearest-neighbor classification over feature vectors.

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
    Manhattan,
    Minkowski,
    Chebyshev,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Cosine, Metric::Euclidean, Metric::Manhattan, Metric::Minkowski, Metric::Chebyshev];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Manhattan => "manhattan",
            Metric::Minkowski => "minkowski",
            Metric::Chebyshev => "chebyshev",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| config_err!("unknown metric '{}'", s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Uniform,
    Distance,
}

impl Weighting {
    pub const ALL: [Weighting; 2] = [Weighting::Uniform, Weighting::Distance];

    pub fn name(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::Distance => "distance",
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Weighting::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| config_err!("unknown weighting '{}'", s))
    }
}

pub const DEFAULT_MINKOWSKI_P: f64 = 3.0;
pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: Metric,
    pub p: f64,
    pub weighting: Weighting,
    pub epsilon: f64,
}

impl KnnConfig {
    pub fn new(k: usize, metric: Metric, weighting: Weighting) -> Self {
        KnnConfig {
            k,
            metric,
            p: DEFAULT_MINKOWSKI_P,
            weighting,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config_err!("k must be at least 1"));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(config_err!("minkowski p must be positive, got {}", self.p));
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err!("distance-weighting epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Distance between two equal-length vectors, accumulated in `f64`.
pub fn distance(a: &[f32], b: &[f32], metric: Metric, p: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("distance between {}- and {}-vectors", a.len(), b.len())));
    }
    let diffs = a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs());
    Ok(match metric {
        Metric::Euclidean => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        Metric::Manhattan => diffs.sum(),
        Metric::Chebyshev => diffs.fold(0.0, f64::max),
        Metric::Minkowski => diffs.map(|d| d.powf(p)).sum::<f64>().powf(1.0 / p),
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (&x, &y) in a.iter().zip(b) {
                let (x, y) = (f64::from(x), f64::from(y));
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Data("cosine distance with a zero vector is undefined".into()));
            }
            (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
        }
    })
}

/// Labeled feature rows; rows are kept verbatim, duplicates included.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    n: usize,
    d: usize,
    matrix: Vec<f32>,
    labels: Vec<u8>,
    pub extractor_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    n: usize,
    d: usize,
    extractor_id: String,
    label_counts: [usize; NUM_CLASSES],
}

const STORE_MAGIC: &[u8; 8] = b"FLNSKNN1";

impl FeatureStore {
    /// Builds a store from `n × d` row-major features.
    pub fn fit(features: Vec<f32>, d: usize, labels: &[usize], extractor_id: &str) -> Result<Self> {
        let n = labels.len();
        if n == 0 || d == 0 || features.len() != n * d {
            return Err(Error::Dimension(format!("{} features for {} rows of width {}", features.len(), n, d)));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature row {} has a non-finite entry", i / d)));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {l} out of range")));
        }
        Ok(FeatureStore {
            n,
            d,
            matrix: features,
            labels: labels.iter().map(|&l| l as u8).collect(),
            extractor_id: extractor_id.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn label_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[usize::from(l)] += 1;
        }
        c
    }

    /// Predicted label and normalized per-class scores for one query.
    ///
    /// Neighbors are the `k` smallest distances, ties resolved by row order;
    /// class ties go to the lowest class index.
    pub fn predict(&self, query: &[f32], cfg: &KnnConfig) -> Result<(usize, [f64; NUM_CLASSES])> {
        cfg.validate()?;
        if cfg.k > self.n {
            return Err(config_err!("k = {} exceeds the {} stored training rows", cfg.k, self.n));
        }
        let mut dists = (0..self.n)
            .map(|i| Ok((distance(self.row(i), query, cfg.metric, cfg.p)?, i)))
            .collect::<Result<Vec<(f64, usize)>>>()?;
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = [0.0; NUM_CLASSES];
        for &(dist, i) in &dists[..cfg.k] {
            votes[self.label(i)] += match cfg.weighting {
                Weighting::Uniform => 1.0,
                Weighting::Distance => 1.0 / (dist + cfg.epsilon),
            };
        }
        let total: f64 = votes.iter().sum();
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        Ok((best, votes.map(|v| v / total)))
    }

    /// Predictions for every row of `queries`.
    pub fn predict_all(&self, queries: &FeatureStore, cfg: &KnnConfig) -> Result<Vec<usize>> {
        use rayon::prelude::*;
        (0..queries.len())
            .into_par_iter()
            .map(|i| self.predict(queries.row(i), cfg).map(|p| p.0))
            .collect()
    }

    /// Header JSON length-prefixed by a little-endian `u32`, then the `f32`
    /// matrix and one label byte per row.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&StoreHeader {
            n: self.n,
            d: self.d,
            extractor_id: self.extractor_id.clone(),
            label_counts: self.label_counts(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + self.matrix.len() * 4 + self.n);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.matrix {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Integrity(format!("feature store: {m}"));
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != STORE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let len = u32::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: StoreHeader = serde_json::from_slice(&r[..len]).map_err(|e| bad(&e.to_string()))?;
        r = &r[len..];
        let body = header.n * header.d * 4;
        if r.len() != body + header.n {
            return Err(bad("payload length mismatch"));
        }
        let matrix = r[..body].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let labels: Vec<usize> = r[body..].iter().map(|&b| usize::from(b)).collect();
        let store = FeatureStore::fit(matrix, header.d, &labels, &header.extractor_id)?;
        if store.label_counts() != header.label_counts {
            return Err(bad("label counts disagree with header"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// One evaluated configuration of a grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub metric: Metric,
    pub weighting: Weighting,
    pub k: usize,
    pub accuracy: f64,
}

/// Validation accuracy of every `(metric, weighting, k)` combination, best
/// first; equal accuracies are ordered by `(metric, weighting, k)` names.
pub fn grid_search(
    train: &FeatureStore,
    val: &FeatureStore,
    metrics: &[Metric],
    weightings: &[Weighting],
    ks: &[usize],
) -> Result<Vec<GridRow>> {
    if val.is_empty() {
        return Err(Error::Data("empty validation store".into()));
    }
    if metrics.is_empty() || weightings.is_empty() || ks.is_empty() {
        return Err(config_err!("grid search needs at least one metric, weighting and k"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k > train.len()) {
        return Err(config_err!("k = {} exceeds the {} stored training rows", k, train.len()));
    }
    let mut rows = Vec::new();
    for &metric in metrics {
        for &weighting in weightings {
            for &k in ks {
                let cfg = KnnConfig::new(k, metric, weighting);
                let preds = train.predict_all(val, &cfg)?;
                let correct = preds.iter().enumerate().filter(|&(i, &p)| p == val.label(i)).count();
                rows.push(GridRow {
                    metric,
                    weighting,
                    k,
                    accuracy: correct as f64 / val.len() as f64,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then_with(|| a.metric.name().cmp(b.metric.name()))
            .then_with(|| a.weighting.name().cmp(b.weighting.name()))
            .then(a.k.cmp(&b.k))
    });
    Ok(rows)
}

/// Writes a grid table as CSV with header `metric,weighting,k,accuracy`.
pub fn write_grid_csv(rows: &[GridRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    w.write_record(["metric", "weighting", "k", "accuracy"])?;
    for r in rows {
        w.write_record([r.metric.name(), r.weighting.name(), &r.k.to_string(), &format!("{}", r.accuracy)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
