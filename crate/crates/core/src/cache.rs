//! Text cache and visual (key/value) cache construction.
//!
//! The text cache is a `d x N` matrix of unit class-text embeddings. The
//! visual cache holds `d x (N*K)` unit keys, laid out class by class with
//! shots in order inside each class block, plus a one-hot value matrix that
//! maps every key column to its class.

use std::collections::BTreeMap;

use crate::adapter::Adapter;
use crate::bundle::{EmbeddingBundle, SplitTag, TextBundle};
use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, Mat};

/// Default number of augmented views averaged into one cache key.
pub const DEFAULT_CACHE_VIEWS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TextCache {
    weights: Mat,
    classes: Vec<String>,
}

impl TextCache {
    /// Wraps an existing `d x N` weight matrix. Columns are taken as given,
    /// which is how tuned (unnormalized) caches are represented.
    pub fn from_weights(weights: Mat, classes: Vec<String>) -> Result<Self> {
        if weights.cols() != classes.len() {
            return Err(Error::DimensionMismatch(format!(
                "text weights have {} columns for {} classes",
                weights.cols(),
                classes.len()
            )));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("text cache weights".into()));
        }
        Ok(Self { weights, classes })
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        self.weights.column(class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheKind {
    /// One key per (class, shot).
    Shots,
    /// One key per class.
    Prototype,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualCache {
    keys: Mat,
    values: Mat,
    labels: Vec<usize>,
    classes: Vec<String>,
    shots_per_class: usize,
    kind: CacheKind,
}

impl VisualCache {
    /// Assembles a cache from unit key columns and their class labels.
    pub fn from_parts(
        keys: Mat,
        labels: Vec<usize>,
        classes: Vec<String>,
        shots_per_class: usize,
        kind: CacheKind,
    ) -> Result<Self> {
        if keys.cols() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} key columns but {} labels",
                keys.cols(),
                labels.len()
            )));
        }
        if !keys.is_finite() {
            return Err(Error::NonFinite("cache keys".into()));
        }
        let n = classes.len();
        let mut values = Mat::zeros(labels.len(), n);
        for (row, &label) in labels.iter().enumerate() {
            if label >= n {
                return Err(Error::InvariantViolation(format!(
                    "cache key {row} has label {label} but only {n} classes"
                )));
            }
            values.set(row, label, 1.0);
        }
        Ok(Self {
            keys,
            values,
            labels,
            classes,
            shots_per_class,
            kind,
        })
    }

    /// `d x (N*K)` key matrix.
    pub fn keys(&self) -> &Mat {
        &self.keys
    }

    /// `(N*K) x N` one-hot value matrix.
    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dim(&self) -> usize {
        self.keys.rows()
    }

    pub fn n_keys(&self) -> usize {
        self.keys.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn shots_per_class(&self) -> usize {
        self.shots_per_class
    }

    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn key(&self, index: usize) -> Vec<f64> {
        self.keys.column(index)
    }

    /// `L_onehot^T a`: per-class sums of a per-key vector.
    pub fn aggregate(&self, per_key: &[f64]) -> Vec<f64> {
        assert_eq!(per_key.len(), self.labels.len(), "one entry per cache key");
        let mut out = vec![0.0; self.classes.len()];
        for (&label, &a) in self.labels.iter().zip(per_key) {
            out[label] += a;
        }
        out
    }
}

pub fn build_text_cache(text: &TextBundle) -> Result<TextCache> {
    text.validate()?;
    if text.embeddings.is_empty() {
        return Err(Error::EmptyBundle("text bundle has no classes".into()));
    }
    let mut columns = Vec::with_capacity(text.embeddings.len());
    for (name, emb) in text.classes.iter().zip(&text.embeddings) {
        let raw: Vec<f64> = emb.iter().map(|&x| x as f64).collect();
        let unit = l2_normalize(&raw).map_err(|e| match e {
            Error::ZeroNorm(_) => Error::ZeroNorm(format!("text embedding of class {name:?}")),
            other => other,
        })?;
        columns.push(unit);
    }
    TextCache::from_weights(Mat::from_columns(&columns)?, text.classes.clone())
}

fn check_cache_split(bundle: &EmbeddingBundle) -> Result<()> {
    match bundle.split {
        SplitTag::Cache | SplitTag::Train => Ok(()),
        other => Err(Error::InvariantViolation(format!(
            "cannot build a cache from a {other} split"
        ))),
    }
}

fn mean_of(views: &[&[f32]], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; dim];
    for v in views {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += x as f64;
        }
    }
    let count = views.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    acc
}

/// Builds the per-shot visual cache. Each key is the normalized mean of
/// the first `cache_views_per_image` views of its (class, shot) group.
pub fn build_visual_cache(bundle: &EmbeddingBundle, cache_views_per_image: usize) -> Result<VisualCache> {
    bundle.validate()?;
    check_cache_split(bundle)?;
    if cache_views_per_image == 0 {
        return Err(Error::InvalidConfig("cache_views_per_image must be >= 1".into()));
    }
    if bundle.is_empty() {
        return Err(Error::EmptyBundle("cache bundle has no records".into()));
    }
    let n = bundle.n_classes();
    let groups: BTreeMap<(usize, usize), Vec<&[f32]>> = bundle
        .groups()
        .into_iter()
        .map(|g| {
            let views = g
                .views
                .iter()
                .take(cache_views_per_image)
                .map(|r| r.embedding.as_slice())
                .collect();
            ((g.class_index, g.shot_index), views)
        })
        .collect();
    let shots = groups.keys().map(|&(_, s)| s + 1).max().unwrap_or(0);

    let mut columns = Vec::with_capacity(n * shots);
    let mut labels = Vec::with_capacity(n * shots);
    for class in 0..n {
        for shot in 0..shots {
            let views = groups.get(&(class, shot)).ok_or_else(|| Error::MissingGroup {
                class,
                class_name: bundle.classes[class].clone(),
                shot,
            })?;
            let mean = mean_of(views, bundle.dim);
            let key = l2_normalize(&mean).map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm(format!(
                    "mean view embedding of class {class} ({}), shot {shot}",
                    bundle.classes[class]
                )),
                other => other,
            })?;
            columns.push(key);
            labels.push(class);
        }
    }
    VisualCache::from_parts(
        Mat::from_columns(&columns)?,
        labels,
        bundle.classes.clone(),
        shots,
        CacheKind::Shots,
    )
}

/// Builds a cache with one key per class: the normalized mean of all of
/// that class's view embeddings.
pub fn build_prototype_cache(bundle: &EmbeddingBundle) -> Result<VisualCache> {
    bundle.validate()?;
    check_cache_split(bundle)?;
    if bundle.is_empty() {
        return Err(Error::EmptyBundle("cache bundle has no records".into()));
    }
    let by_class = bundle.records_by_class();
    let mut columns = Vec::with_capacity(by_class.len());
    for (class, recs) in by_class.iter().enumerate() {
        if recs.is_empty() {
            return Err(Error::MissingGroup {
                class,
                class_name: bundle.classes[class].clone(),
                shot: 0,
            });
        }
        let views: Vec<&[f32]> = recs.iter().map(|r| r.embedding.as_slice()).collect();
        let mean = mean_of(&views, bundle.dim);
        let key = l2_normalize(&mean).map_err(|e| match e {
            Error::ZeroNorm(_) => Error::ZeroNorm(format!(
                "prototype of class {class} ({})",
                bundle.classes[class]
            )),
            other => other,
        })?;
        columns.push(key);
    }
    let labels = (0..by_class.len()).collect();
    VisualCache::from_parts(
        Mat::from_columns(&columns)?,
        labels,
        bundle.classes.clone(),
        1,
        CacheKind::Prototype,
    )
}

/// Passes every key through the adapter and renormalizes; values unchanged.
pub fn adapt_cache(cache: &VisualCache, adapter: &Adapter) -> Result<VisualCache> {
    if adapter.dim() != cache.dim() {
        return Err(Error::DimensionMismatch(format!(
            "adapter dim {} vs cache dim {}",
            adapter.dim(),
            cache.dim()
        )));
    }
    let mut keys = Mat::zeros(cache.dim(), cache.n_keys());
    for c in 0..cache.n_keys() {
        let g = adapter.embed(&cache.key(c)).map_err(|e| match e {
            Error::ZeroNorm(_) => Error::ZeroNorm(format!("adapter annihilates cache key {c}")),
            other => other,
        })?;
        keys.set_column(c, &g);
    }
    Ok(VisualCache {
        keys,
        ..cache.clone()
    })
}
