//! Logits of the four classifiers: zero-shot, Tip-Adapter, DAC-V, DAC-VT.
//!
//! All functions take a unit query `z` (the normalized raw image embedding)
//! and return raw, pre-softmax scores, one per class.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::cache::{TextCache, VisualCache};
use crate::error::{Error, Result};
use crate::linalg::{argmax, matvec_t, norm};

/// Sharpness used for the Tip-Adapter baseline when none is given.
pub const DEFAULT_BETA: f64 = 5.5;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ZeroShot,
    Tip,
    DacV,
    DacVt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ZeroShot, Method::Tip, Method::DacV, Method::DacVt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero-shot",
            Method::Tip => "tip",
            Method::DacV => "dac-v",
            Method::DacVt => "dac-vt",
        }
    }

    /// Whether the method has an intra-modal term weighted by alpha.
    pub fn uses_alpha(self) -> bool {
        !matches!(self, Method::ZeroShot)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub alpha: f64,
    pub beta: f64,
}

impl InferenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta {} must be > 0", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Vec<f64>,
    pub method: Method,
}

impl Logits {
    pub fn prediction(&self) -> usize {
        argmax(&self.values)
    }
}

fn check_query(z: &[f64], dim: usize) -> Result<()> {
    if z.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "query of length {} for embedding dim {dim}",
            z.len()
        )));
    }
    let n = norm(z);
    if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::InvariantViolation(format!("query norm {n} is not 1")));
    }
    Ok(())
}

fn check_cache_pair(text: &TextCache, cache: &VisualCache) -> Result<()> {
    if text.dim() != cache.dim() || text.n_classes() != cache.n_classes() {
        return Err(Error::DimensionMismatch(format!(
            "text cache is {}x{}, visual cache has dim {} and {} classes",
            text.dim(),
            text.n_classes(),
            cache.dim(),
            cache.n_classes()
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha {alpha} must be >= 0")))
    }
}

/// Inter-modal scores `W_text^T z`.
pub fn inter_modal(text: &TextCache, z: &[f64]) -> Result<Vec<f64>> {
    check_query(z, text.dim())?;
    matvec_t(text.weights(), z)
}

pub fn clip_logits(text: &TextCache, z: &[f64]) -> Result<Logits> {
    Ok(Logits {
        values: inter_modal(text, z)?,
        method: Method::ZeroShot,
    })
}

/// `exp(beta (W_image^T z - 1))`, one entry per cache key.
pub fn tip_affinity(cache: &VisualCache, z: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!("beta {beta} must be > 0")));
    }
    check_query(z, cache.dim())?;
    let sims = matvec_t(cache.keys(), z)?;
    Ok(sims.into_iter().map(|s| (beta * (s - 1.0)).exp()).collect())
}

/// Per-class Tip-Adapter intra-modal scores `L^T exp(beta (W^T z - 1))`.
pub fn tip_intra(cache: &VisualCache, z: &[f64], beta: f64) -> Result<Vec<f64>> {
    Ok(cache.aggregate(&tip_affinity(cache, z, beta)?))
}

pub fn tip_logits(text: &TextCache, cache: &VisualCache, z: &[f64], params: &InferenceParams) -> Result<Logits> {
    params.validate()?;
    check_cache_pair(text, cache)?;
    let mut values = inter_modal(text, z)?;
    let intra = tip_intra(cache, z, params.beta)?;
    for (v, i) in values.iter_mut().zip(&intra) {
        *v += params.alpha * i;
    }
    Ok(Logits {
        values,
        method: Method::Tip,
    })
}

/// `exp(W_dac^T g - 1)` with `g` the adapted query.
pub fn dacv_affinity(adapted_cache: &VisualCache, adapter: &Adapter, z: &[f64]) -> Result<Vec<f64>> {
    check_query(z, adapted_cache.dim())?;
    if adapter.dim() != adapted_cache.dim() {
        return Err(Error::DimensionMismatch(format!(
            "adapter dim {} vs cache dim {}",
            adapter.dim(),
            adapted_cache.dim()
        )));
    }
    let g = adapter.embed(z)?;
    let keys = adapted_cache.keys();
    Ok(matvec_t(keys, &g)?.into_iter().map(|s| (s - 1.0).exp()).collect())
}

/// Per-class DAC intra-modal scores.
pub fn dacv_intra(adapted_cache: &VisualCache, adapter: &Adapter, z: &[f64]) -> Result<Vec<f64>> {
    Ok(adapted_cache.aggregate(&dacv_affinity(adapted_cache, adapter, z)?))
}

fn ensemble(inter: Vec<f64>, intra: &[f64], alpha: f64, method: Method) -> Logits {
    let values = inter.into_iter().zip(intra).map(|(a, b)| a + alpha * b).collect();
    Logits { values, method }
}

pub fn dacv_logits(
    text: &TextCache,
    adapted_cache: &VisualCache,
    adapter: &Adapter,
    z: &[f64],
    alpha: f64,
) -> Result<Logits> {
    check_alpha(alpha)?;
    check_cache_pair(text, adapted_cache)?;
    let inter = inter_modal(text, z)?;
    let intra = dacv_intra(adapted_cache, adapter, z)?;
    Ok(ensemble(inter, &intra, alpha, Method::DacV))
}

/// Same as DAC-V but with the tuned text cache on the inter-modal side.
pub fn dacvt_logits(
    tuned_text: &TextCache,
    adapted_cache: &VisualCache,
    adapter: &Adapter,
    z: &[f64],
    alpha: f64,
) -> Result<Logits> {
    check_alpha(alpha)?;
    check_cache_pair(tuned_text, adapted_cache)?;
    let inter = inter_modal(tuned_text, z)?;
    let intra = dacv_intra(adapted_cache, adapter, z)?;
    Ok(ensemble(inter, &intra, alpha, Method::DacVt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheKind;
    use crate::linalg::{l2_normalize, Mat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        l2_normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
    }

    fn orthonormal_text(n: usize) -> TextCache {
        TextCache::from_weights(Mat::identity(n), (0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn random_setup(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> (TextCache, VisualCache) {
        let text_cols: Vec<Vec<f64>> = (0..n).map(|_| unit(rng, d)).collect();
        let text = TextCache::from_weights(Mat::from_columns(&text_cols).unwrap(), (0..n).map(|i| format!("c{i}")).collect()).unwrap();
        let keys: Vec<Vec<f64>> = (0..n * k).map(|_| unit(rng, d)).collect();
        let labels = (0..n * k).map(|c| c / k).collect();
        let cache = VisualCache::from_parts(Mat::from_columns(&keys).unwrap(), labels, text.classes().to_vec(), k, CacheKind::Shots).unwrap();
        (text, cache)
    }

    #[test]
    fn clip_logits_examples() {
        let text = orthonormal_text(3);
        let l = clip_logits(&text, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(l.values, vec![0.0, 1.0, 0.0]);
        assert_eq!(l.prediction(), 1);
        let text = TextCache::from_weights(Mat::from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(), vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(clip_logits(&text, &[0.0, 0.0, 1.0]).unwrap().values, vec![0.0, 0.0]);
        assert!(matches!(clip_logits(&text, &[1.0, 0.0]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(clip_logits(&text, &[2.0, 0.0, 0.0]), Err(Error::InvariantViolation(_))));
    }

    #[test]
    fn clip_logits_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (text, _) = random_setup(&mut rng, 5, 1, 8);
        let z = unit(&mut rng, 8);
        let l = clip_logits(&text, &z).unwrap();
        for n in 0..5 {
            let naive: f64 = (0..8).map(|i| text.weights().get(i, n) * z[i]).sum();
            assert!((l.values[n] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn tip_affinity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, cache) = random_setup(&mut rng, 2, 2, 6);
        let z = cache.key(3);
        let a = tip_affinity(&cache, &z, 5.5).unwrap();
        assert!((a[3] - 1.0).abs() < 1e-15);
        assert!(a.iter().all(|&x| x > 0.0 && x <= 1.0 + 1e-15));
        let mut prev = tip_affinity(&cache, &z, 1.0).unwrap();
        for beta in [2.0, 10.0, 100.0, 1000.0] {
            let cur = tip_affinity(&cache, &z, beta).unwrap();
            for c in 0..3 {
                assert!(cur[c] <= prev[c]);
            }
            prev = cur;
        }
        assert!(prev[0] < 1e-10);
        assert!(tip_affinity(&cache, &z, 0.0).is_err());
    }

    #[test]
    fn tip_alpha_zero_is_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (text, cache) = random_setup(&mut rng, 3, 2, 6);
        let z = unit(&mut rng, 6);
        let tip = tip_logits(&text, &cache, &z, &InferenceParams { alpha: 0.0, beta: 5.5 }).unwrap();
        assert_eq!(tip.values, clip_logits(&text, &z).unwrap().values);
    }

    #[test]
    fn tip_single_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (text, cache) = random_setup(&mut rng, 1, 3, 4);
        let z = unit(&mut rng, 4);
        let params = InferenceParams { alpha: 2.0, beta: 3.0 };
        let tip = tip_logits(&text, &cache, &z, &params).unwrap();
        let aff: f64 = tip_affinity(&cache, &z, 3.0).unwrap().iter().sum();
        let clip = clip_logits(&text, &z).unwrap().values[0];
        assert!((tip.values[0] - (clip + 2.0 * aff)).abs() < 1e-14);
        assert_eq!(tip.prediction(), 0);
    }

    #[test]
    fn dacv_identity_reduces_to_tip_beta_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (text, cache) = random_setup(&mut rng, 3, 2, 6);
        let id = Adapter::identity(6, 1, 0);
        for _ in 0..20 {
            let z = unit(&mut rng, 6);
            let a = dacv_logits(&text, &cache, &id, &z, 1.7).unwrap();
            let b = tip_logits(&text, &cache, &z, &InferenceParams { alpha: 1.7, beta: 1.0 }).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-12);
            }
            let zero = dacv_logits(&text, &cache, &id, &z, 0.0).unwrap();
            assert_eq!(zero.values, clip_logits(&text, &z).unwrap().values);
        }
    }

    #[test]
    fn dacvt_untuned_alpha_zero_is_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (text, cache) = random_setup(&mut rng, 4, 2, 5);
        let id = Adapter::identity(5, 1, 0);
        let z = unit(&mut rng, 5);
        let vt = dacvt_logits(&text, &cache, &id, &z, 0.0).unwrap();
        assert_eq!(vt.values, clip_logits(&text, &z).unwrap().values);
        assert_eq!(vt.method, Method::DacVt);
    }

    #[test]
    fn raising_alpha_adds_per_class_affinity_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (text, cache) = random_setup(&mut rng, 3, 3, 6);
        let z = unit(&mut rng, 6);
        let intra = tip_intra(&cache, &z, 4.0).unwrap();
        let lo = tip_logits(&text, &cache, &z, &InferenceParams { alpha: 1.0, beta: 4.0 }).unwrap();
        let hi = tip_logits(&text, &cache, &z, &InferenceParams { alpha: 2.5, beta: 4.0 }).unwrap();
        for n in 0..3 {
            assert!(intra[n] >= 0.0);
            assert!((hi.values[n] - lo.values[n] - 1.5 * intra[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_argmax_is_scale_invariant_in_raw_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (text, _) = random_setup(&mut rng, 5, 1, 8);
        let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = clip_logits(&text, &l2_normalize(&raw).unwrap()).unwrap().prediction();
        for c in [0.01, 3.0, 1e4] {
            let scaled: Vec<f64> = raw.iter().map(|x| x * c).collect();
            assert_eq!(clip_logits(&text, &l2_normalize(&scaled).unwrap()).unwrap().prediction(), base);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("tip-f".parse::<Method>().is_err());
    }
}
