//! Binary artifact containers.
//!
//! Every artifact uses the same little-endian layout:
//!
//! ```text
//! offset 0   magic            8 bytes, e.g. b"DACEMB1\0"
//! offset 8   version          u32 (currently 1)
//! offset 12  manifest_len     u32
//! offset 16  manifest_crc32   u32
//! offset 20  manifest         UTF-8 JSON, manifest_len bytes
//! ...        blobs            concatenated in manifest order
//! ```
//!
//! The manifest is `{"format_version", "blobs": [{"name", "dtype", "len",
//! "crc32"}], "meta"}`. `len` counts elements; `dtype` is `f32` or `f64`.
//! Truncation, trailing bytes and checksum mismatches all fail with
//! [`Error::ChecksumFail`].

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdamState, Adapter};
use crate::bundle::{EmbeddingBundle, Record, SplitTag, TextBundle};
use crate::cache::{build_text_cache, CacheKind, TextCache, VisualCache};
use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub const BUNDLE_MAGIC: [u8; 8] = *b"DACEMB1\0";
pub const ADAPTER_MAGIC: [u8; 8] = *b"DACADP1\0";
pub const TEXT_CACHE_MAGIC: [u8; 8] = *b"DACTXC1\0";
pub const VISUAL_CACHE_MAGIC: [u8; 8] = *b"DACVCH1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl BlobData {
    fn dtype(&self) -> Dtype {
        match self {
            BlobData::F32(_) => Dtype::F32,
            BlobData::F64(_) => Dtype::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            BlobData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            BlobData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => BlobData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            Dtype::F64 => BlobData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: Dtype,
    pub len: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub blobs: Vec<BlobEntry>,
    pub meta: serde_json::Value,
}

/// A decoded container: magic, JSON metadata and named blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub meta: serde_json::Value,
    pub blobs: Vec<(String, BlobData)>,
}

impl Container {
    pub fn blob(&self, name: &str) -> Result<&BlobData> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::InvariantViolation(format!("container has no blob {name:?}")))
    }

    fn f32_blob(&self, name: &str) -> Result<&[f32]> {
        match self.blob(name)? {
            BlobData::F32(v) => Ok(v),
            BlobData::F64(_) => Err(Error::InvariantViolation(format!("blob {name:?} must be f32"))),
        }
    }

    fn f64_blob(&self, name: &str) -> Result<&[f64]> {
        match self.blob(name)? {
            BlobData::F64(v) => Ok(v),
            BlobData::F32(_) => Err(Error::InvariantViolation(format!("blob {name:?} must be f64"))),
        }
    }

    fn typed_meta<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::InvariantViolation(format!("malformed manifest metadata: {e}")))
    }
}

fn magic_str(magic: &[u8]) -> String {
    String::from_utf8_lossy(magic).trim_end_matches('\0').to_string()
}

pub fn encode_container(container: &Container) -> Result<Vec<u8>> {
    let blobs: Vec<(BlobEntry, Vec<u8>)> = container
        .blobs
        .iter()
        .map(|(name, data)| {
            let bytes = data.to_bytes();
            let entry = BlobEntry {
                name: name.clone(),
                dtype: data.dtype(),
                len: data.len(),
                crc32: crc32fast::hash(&bytes),
            };
            (entry, bytes)
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        blobs: blobs.iter().map(|(e, _)| e.clone()).collect(),
        meta: container.meta.clone(),
    };
    let manifest = serde_json::to_vec(&manifest)
        .map_err(|e| Error::InvariantViolation(format!("manifest serialization: {e}")))?;
    let manifest_len = u32::try_from(manifest.len())
        .map_err(|_| Error::InvariantViolation("manifest exceeds 4 GiB".into()))?;
    let payload: usize = blobs.iter().map(|(_, b)| b.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload);
    out.extend_from_slice(&container.magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&manifest).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, bytes) in &blobs {
        out.extend_from_slice(bytes);
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes and verifies a container whose magic must equal `expected`.
pub fn decode_container(bytes: &[u8], expected: [u8; 8]) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(Error::ChecksumFail(format!("file truncated to {} bytes", bytes.len())));
    }
    if bytes[..8] != expected {
        return Err(Error::BadMagic {
            expected: magic_str(&expected),
            found: magic_str(&bytes[..8]),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::ChecksumFail(format!("header truncated to {} bytes", bytes.len())));
    }
    let version = read_u32(bytes, 8);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let manifest_len = read_u32(bytes, 12) as usize;
    let manifest_crc = read_u32(bytes, 16);
    let body = &bytes[HEADER_LEN..];
    if body.len() < manifest_len {
        return Err(Error::ChecksumFail(format!(
            "manifest truncated: {} of {manifest_len} bytes",
            body.len()
        )));
    }
    let (manifest_bytes, mut payload) = body.split_at(manifest_len);
    if crc32fast::hash(manifest_bytes) != manifest_crc {
        return Err(Error::ChecksumFail("manifest checksum mismatch".into()));
    }
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::InvariantViolation(format!("malformed manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let mut blobs = Vec::with_capacity(manifest.blobs.len());
    for entry in &manifest.blobs {
        let n_bytes = entry
            .len
            .checked_mul(entry.dtype.width())
            .ok_or_else(|| Error::ChecksumFail(format!("blob {:?} length overflows", entry.name)))?;
        if payload.len() < n_bytes {
            return Err(Error::ChecksumFail(format!(
                "blob {:?} truncated: {} of {n_bytes} bytes",
                entry.name,
                payload.len()
            )));
        }
        let (chunk, rest) = payload.split_at(n_bytes);
        if crc32fast::hash(chunk) != entry.crc32 {
            return Err(Error::ChecksumFail(format!("blob {:?} checksum mismatch", entry.name)));
        }
        blobs.push((entry.name.clone(), BlobData::from_bytes(entry.dtype, chunk)));
        payload = rest;
    }
    if !payload.is_empty() {
        return Err(Error::ChecksumFail(format!("{} trailing bytes after last blob", payload.len())));
    }
    Ok(Container {
        magic: expected,
        meta: manifest.meta,
        blobs,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    Ok(fs::write(path, bytes)?)
}

// ---- embedding bundles -------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BundleKind {
    Image,
    Text,
}

#[derive(Debug, Serialize, Deserialize)]
struct KindProbe {
    kind: BundleKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageMeta {
    kind: BundleKind,
    dim: usize,
    n_classes: usize,
    n_records: usize,
    classes: Vec<String>,
    split_tag: SplitTag,
    backbone_tag: String,
    /// `[class_index, shot_index, view_index]` per record, in payload order.
    records: Vec<[usize; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TextMeta {
    kind: BundleKind,
    dim: usize,
    n_classes: usize,
    classes: Vec<String>,
    backbone_tag: String,
}

fn to_value<T: Serialize>(meta: &T) -> Result<serde_json::Value> {
    serde_json::to_value(meta).map_err(|e| Error::InvariantViolation(format!("metadata serialization: {e}")))
}

pub fn encode_bundle(bundle: &EmbeddingBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let meta = ImageMeta {
        kind: BundleKind::Image,
        dim: bundle.dim,
        n_classes: bundle.n_classes(),
        n_records: bundle.records.len(),
        classes: bundle.classes.clone(),
        split_tag: bundle.split,
        backbone_tag: bundle.backbone.clone(),
        records: bundle
            .records
            .iter()
            .map(|r| [r.class_index, r.shot_index, r.view_index])
            .collect(),
    };
    let payload: Vec<f32> = bundle.records.iter().flat_map(|r| r.embedding.iter().copied()).collect();
    encode_container(&Container {
        magic: BUNDLE_MAGIC,
        meta: to_value(&meta)?,
        blobs: vec![("embeddings".into(), BlobData::F32(payload))],
    })
}

fn bundle_kind(container: &Container) -> Result<BundleKind> {
    Ok(container.typed_meta::<KindProbe>()?.kind)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<EmbeddingBundle> {
    let container = decode_container(bytes, BUNDLE_MAGIC)?;
    if let BundleKind::Text = bundle_kind(&container)? {
        return Err(Error::InvariantViolation("expected an image bundle, found a text bundle".into()));
    }
    let meta: ImageMeta = container.typed_meta()?;
    if meta.n_classes != meta.classes.len() || meta.n_records != meta.records.len() {
        return Err(Error::InvariantViolation(format!(
            "manifest counts disagree: n_classes {} for {} names, n_records {} for {} entries",
            meta.n_classes,
            meta.classes.len(),
            meta.n_records,
            meta.records.len()
        )));
    }
    let payload = container.f32_blob("embeddings")?;
    let expected = meta.n_records * meta.dim;
    if payload.len() != expected {
        return Err(Error::InvariantViolation(format!(
            "embedding payload has {} values, expected {} records x dim {}",
            payload.len(),
            meta.n_records,
            meta.dim
        )));
    }
    let records = meta
        .records
        .iter()
        .enumerate()
        .map(|(i, &[c, s, v])| Record::new(c, s, v, payload[i * meta.dim..(i + 1) * meta.dim].to_vec()))
        .collect();
    let bundle = EmbeddingBundle {
        dim: meta.dim,
        classes: meta.classes,
        records,
        split: meta.split_tag,
        backbone: meta.backbone_tag,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_bundle(bundle)?)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    decode_bundle(&read_file(path.as_ref())?)
}

pub fn encode_text_bundle(bundle: &TextBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let meta = TextMeta {
        kind: BundleKind::Text,
        dim: bundle.dim,
        n_classes: bundle.classes.len(),
        classes: bundle.classes.clone(),
        backbone_tag: bundle.backbone.clone(),
    };
    let payload: Vec<f32> = bundle.embeddings.iter().flatten().copied().collect();
    encode_container(&Container {
        magic: BUNDLE_MAGIC,
        meta: to_value(&meta)?,
        blobs: vec![("embeddings".into(), BlobData::F32(payload))],
    })
}

pub fn decode_text_bundle(bytes: &[u8]) -> Result<TextBundle> {
    let container = decode_container(bytes, BUNDLE_MAGIC)?;
    text_bundle_from(&container)
}

fn text_bundle_from(container: &Container) -> Result<TextBundle> {
    if let BundleKind::Image = bundle_kind(container)? {
        return Err(Error::InvariantViolation("expected a text bundle, found an image bundle".into()));
    }
    let meta: TextMeta = container.typed_meta()?;
    let payload = container.f32_blob("embeddings")?;
    if meta.n_classes != meta.classes.len() || payload.len() != meta.n_classes * meta.dim {
        return Err(Error::InvariantViolation(format!(
            "text payload has {} values for {} classes of dim {}",
            payload.len(),
            meta.classes.len(),
            meta.dim
        )));
    }
    let embeddings = (0..meta.n_classes)
        .map(|c| payload[c * meta.dim..(c + 1) * meta.dim].to_vec())
        .collect();
    let bundle = TextBundle {
        dim: meta.dim,
        classes: meta.classes,
        embeddings,
        backbone: meta.backbone_tag,
    };
    bundle.validate()?;
    Ok(bundle)
}

pub fn write_text_bundle(bundle: &TextBundle, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_text_bundle(bundle)?)
}

pub fn read_text_bundle(path: impl AsRef<Path>) -> Result<TextBundle> {
    decode_text_bundle(&read_file(path.as_ref())?)
}

// ---- adapter -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct AdapterMeta {
    dim: usize,
    depth: usize,
    adam_step: u64,
    epoch: u64,
    seed: u64,
}

pub fn encode_adapter(adapter: &Adapter) -> Result<Vec<u8>> {
    let meta = AdapterMeta {
        dim: adapter.dim(),
        depth: adapter.depth(),
        adam_step: adapter.adam().step,
        epoch: adapter.epoch,
        seed: adapter.seed,
    };
    let mut blobs = Vec::new();
    for (prefix, mats) in [
        ("theta", adapter.layers()),
        ("adam_m", adapter.adam().first_moment.as_slice()),
        ("adam_v", adapter.adam().second_moment.as_slice()),
    ] {
        for (l, m) in mats.iter().enumerate() {
            blobs.push((format!("{prefix}_{l}"), BlobData::F64(m.data().to_vec())));
        }
    }
    encode_container(&Container {
        magic: ADAPTER_MAGIC,
        meta: to_value(&meta)?,
        blobs,
    })
}

fn square(container: &Container, name: &str, dim: usize) -> Result<Mat> {
    let data = container.f64_blob(name)?;
    if data.len() != dim * dim {
        return Err(Error::DimensionMismatch(format!(
            "blob {name:?} has {} values, expected {dim}x{dim}",
            data.len()
        )));
    }
    Mat::from_vec(dim, dim, data.to_vec())
}

pub fn decode_adapter(bytes: &[u8]) -> Result<Adapter> {
    let container = decode_container(bytes, ADAPTER_MAGIC)?;
    let meta: AdapterMeta = container.typed_meta()?;
    let load = |prefix: &str| -> Result<Vec<Mat>> {
        (0..meta.depth)
            .map(|l| square(&container, &format!("{prefix}_{l}"), meta.dim))
            .collect()
    };
    let adam = AdamState {
        first_moment: load("adam_m")?,
        second_moment: load("adam_v")?,
        step: meta.adam_step,
    };
    Adapter::from_parts(load("theta")?, adam, meta.epoch, meta.seed)
}

pub fn save_adapter(adapter: &Adapter, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_adapter(adapter)?)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<Adapter> {
    decode_adapter(&read_file(path.as_ref())?)
}

// ---- caches ------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TextCacheMeta {
    dim: usize,
    classes: Vec<String>,
}

pub fn encode_text_cache(cache: &TextCache) -> Result<Vec<u8>> {
    let meta = TextCacheMeta {
        dim: cache.dim(),
        classes: cache.classes().to_vec(),
    };
    encode_container(&Container {
        magic: TEXT_CACHE_MAGIC,
        meta: to_value(&meta)?,
        blobs: vec![("weights".into(), BlobData::F64(cache.weights().data().to_vec()))],
    })
}

pub fn decode_text_cache(bytes: &[u8]) -> Result<TextCache> {
    let container = decode_container(bytes, TEXT_CACHE_MAGIC)?;
    let meta: TextCacheMeta = container.typed_meta()?;
    let data = container.f64_blob("weights")?;
    if data.len() != meta.dim * meta.classes.len() {
        return Err(Error::DimensionMismatch(format!(
            "text cache blob has {} values, expected {}x{}",
            data.len(),
            meta.dim,
            meta.classes.len()
        )));
    }
    TextCache::from_weights(Mat::from_vec(meta.dim, meta.classes.len(), data.to_vec())?, meta.classes)
}

pub fn save_text_cache(cache: &TextCache, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_text_cache(cache)?)
}

pub fn load_text_cache(path: impl AsRef<Path>) -> Result<TextCache> {
    decode_text_cache(&read_file(path.as_ref())?)
}

/// Loads a text cache from either a saved cache or a raw text bundle
/// (which is normalized into a cache on the fly).
pub fn load_text_cache_any(path: impl AsRef<Path>) -> Result<TextCache> {
    let bytes = read_file(path.as_ref())?;
    if bytes.starts_with(&BUNDLE_MAGIC) {
        build_text_cache(&decode_text_bundle(&bytes)?)
    } else {
        decode_text_cache(&bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VisualCacheMeta {
    dim: usize,
    classes: Vec<String>,
    labels: Vec<usize>,
    shots_per_class: usize,
    prototype: bool,
}

pub fn encode_visual_cache(cache: &VisualCache) -> Result<Vec<u8>> {
    let meta = VisualCacheMeta {
        dim: cache.dim(),
        classes: cache.classes().to_vec(),
        labels: cache.labels().to_vec(),
        shots_per_class: cache.shots_per_class(),
        prototype: cache.kind() == CacheKind::Prototype,
    };
    encode_container(&Container {
        magic: VISUAL_CACHE_MAGIC,
        meta: to_value(&meta)?,
        blobs: vec![("keys".into(), BlobData::F64(cache.keys().data().to_vec()))],
    })
}

pub fn decode_visual_cache(bytes: &[u8]) -> Result<VisualCache> {
    let container = decode_container(bytes, VISUAL_CACHE_MAGIC)?;
    let meta: VisualCacheMeta = container.typed_meta()?;
    let data = container.f64_blob("keys")?;
    if data.len() != meta.dim * meta.labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "cache key blob has {} values, expected {}x{}",
            data.len(),
            meta.dim,
            meta.labels.len()
        )));
    }
    let kind = if meta.prototype { CacheKind::Prototype } else { CacheKind::Shots };
    VisualCache::from_parts(
        Mat::from_vec(meta.dim, meta.labels.len(), data.to_vec())?,
        meta.labels,
        meta.classes,
        meta.shots_per_class,
        kind,
    )
}

pub fn save_visual_cache(cache: &VisualCache, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_visual_cache(cache)?)
}

pub fn load_visual_cache(path: impl AsRef<Path>) -> Result<VisualCache> {
    decode_visual_cache(&read_file(path.as_ref())?)
}
