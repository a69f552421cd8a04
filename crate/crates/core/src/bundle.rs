//! In-memory embedding bundles: labeled image embeddings and class-text
//! embeddings as produced by the upstream encoder.
//!
//! Embeddings are kept raw (unnormalized, `f32` as on disk). Normalization
//! happens when caches and queries are built.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Cache,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitTag::Train => "train",
            SplitTag::Cache => "cache",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub class_index: usize,
    pub shot_index: usize,
    pub view_index: usize,
    pub embedding: Vec<f32>,
}

impl Record {
    pub fn new(class_index: usize, shot_index: usize, view_index: usize, embedding: Vec<f32>) -> Self {
        Self {
            class_index,
            shot_index,
            view_index,
            embedding,
        }
    }

    pub fn embedding_f64(&self) -> Vec<f64> {
        self.embedding.iter().map(|&x| x as f64).collect()
    }
}

/// A labeled set of image embeddings for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub dim: usize,
    pub classes: Vec<String>,
    pub records: Vec<Record>,
    pub split: SplitTag,
    pub backbone: String,
}

/// One (class, shot) group with its views in view order.
pub struct ShotGroup<'a> {
    pub class_index: usize,
    pub shot_index: usize,
    pub views: Vec<&'a Record>,
}

impl EmbeddingBundle {
    pub fn new(dim: usize, classes: Vec<String>, split: SplitTag, backbone: impl Into<String>) -> Self {
        Self {
            dim,
            classes,
            records: Vec::new(),
            split,
            backbone: backbone.into(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        check_unique_classes(&self.classes)?;
        let n = self.classes.len();
        let mut seen = HashSet::with_capacity(self.records.len());
        for (i, rec) in self.records.iter().enumerate() {
            if rec.class_index >= n {
                return Err(Error::InvariantViolation(format!(
                    "record {i}: class_index {} out of range for {n} classes",
                    rec.class_index
                )));
            }
            if rec.embedding.len() != self.dim {
                return Err(Error::InvariantViolation(format!(
                    "record {i}: embedding length {} but bundle dim is {}",
                    rec.embedding.len(),
                    self.dim
                )));
            }
            if rec.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvariantViolation(format!(
                    "record {i}: non-finite embedding entry"
                )));
            }
            if !seen.insert((rec.class_index, rec.shot_index, rec.view_index)) {
                return Err(Error::InvariantViolation(format!(
                    "record {i}: duplicate (class {}, shot {}, view {})",
                    rec.class_index, rec.shot_index, rec.view_index
                )));
            }
        }
        if self.split == SplitTag::Train {
            let mut counts: Option<(usize, usize, usize)> = None;
            for g in self.groups() {
                match counts {
                    None => counts = Some((g.class_index, g.shot_index, g.views.len())),
                    Some((c, s, v)) if v != g.views.len() => {
                        return Err(Error::InvariantViolation(format!(
                            "train split: (class {}, shot {}) has {} views but (class {c}, shot {s}) has {v}",
                            g.class_index,
                            g.shot_index,
                            g.views.len()
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Records grouped by (class, shot), both ascending; views sorted by view index.
    pub fn groups(&self) -> Vec<ShotGroup<'_>> {
        let mut map: BTreeMap<(usize, usize), Vec<&Record>> = BTreeMap::new();
        for rec in &self.records {
            map.entry((rec.class_index, rec.shot_index)).or_default().push(rec);
        }
        map.into_iter()
            .map(|((class_index, shot_index), mut views)| {
                views.sort_by_key(|r| r.view_index);
                ShotGroup {
                    class_index,
                    shot_index,
                    views,
                }
            })
            .collect()
    }

    /// Per class, the records ordered by (shot, view).
    pub fn records_by_class(&self) -> Vec<Vec<&Record>> {
        let mut out: Vec<Vec<&Record>> = vec![Vec::new(); self.classes.len()];
        for rec in &self.records {
            out[rec.class_index].push(rec);
        }
        for recs in &mut out {
            recs.sort_by_key(|r| (r.shot_index, r.view_index));
        }
        out
    }

    /// Keeps `shots` randomly chosen shot indices per class and renumbers
    /// them `0..shots` in their original order.
    ///
    /// The choice depends only on `seed` and the sorted shot indices present
    /// for each class, so bundles that share images (train and cache splits)
    /// keep the same images.
    pub fn subsample_shots(&self, shots: usize, seed: u64) -> Result<EmbeddingBundle> {
        if shots == 0 {
            return Err(Error::InvalidConfig("shot count must be at least 1".into()));
        }
        let mut available: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.classes.len()];
        for rec in &self.records {
            available[rec.class_index].insert(rec.shot_index);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut remap: Vec<BTreeMap<usize, usize>> = Vec::with_capacity(self.classes.len());
        for (class, shots_here) in available.iter().enumerate() {
            if shots_here.len() < shots {
                return Err(Error::InvalidConfig(format!(
                    "class {class} ({}) has {} shots, {shots} requested",
                    self.classes[class],
                    shots_here.len()
                )));
            }
            let sorted: Vec<usize> = shots_here.iter().copied().collect();
            let mut picked: Vec<usize> = index::sample(&mut rng, sorted.len(), shots).into_vec();
            picked.sort_unstable();
            remap.push(
                picked
                    .into_iter()
                    .enumerate()
                    .map(|(new, pos)| (sorted[pos], new))
                    .collect(),
            );
        }
        let records = self
            .records
            .iter()
            .filter_map(|rec| {
                remap[rec.class_index]
                    .get(&rec.shot_index)
                    .map(|&new_shot| Record {
                        shot_index: new_shot,
                        ..rec.clone()
                    })
            })
            .collect();
        Ok(EmbeddingBundle {
            records,
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> EmbeddingBundle {
        EmbeddingBundle {
            dim: self.dim,
            classes: self.classes.clone(),
            records: Vec::new(),
            split: self.split,
            backbone: self.backbone.clone(),
        }
    }
}

/// Class-text embeddings, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBundle {
    pub dim: usize,
    pub classes: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
    pub backbone: String,
}

impl TextBundle {
    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        check_unique_classes(&self.classes)?;
        if self.embeddings.len() != self.classes.len() {
            return Err(Error::InvariantViolation(format!(
                "text bundle has {} classes but {} embeddings",
                self.classes.len(),
                self.embeddings.len()
            )));
        }
        for (i, e) in self.embeddings.iter().enumerate() {
            if e.len() != self.dim {
                return Err(Error::InvariantViolation(format!(
                    "text embedding {i} ({}) has length {}, expected {}",
                    self.classes[i],
                    e.len(),
                    self.dim
                )));
            }
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvariantViolation(format!(
                    "text embedding {i} ({}) has a non-finite entry",
                    self.classes[i]
                )));
            }
        }
        Ok(())
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvariantViolation("embedding dimension must be >= 1".into()));
    }
    Ok(())
}

fn check_unique_classes(classes: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(classes.len());
    for name in classes {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvariantViolation(format!(
                "duplicate class name {name:?}"
            )));
        }
    }
    Ok(())
}
