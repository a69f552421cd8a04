//! Top-1 evaluation, alpha grid search and the inter/intra-modal error
//! inconsistency ("flip") analysis.
//!
//! Every ensemble classifier has the form `inter + alpha * intra`, so a
//! bundle is scored once into per-sample `(inter, intra)` pairs and any
//! number of alphas can then be evaluated without touching the caches.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::bundle::{EmbeddingBundle, SplitTag};
use crate::cache::{adapt_cache, TextCache, VisualCache};
use crate::error::{Error, Result};
use crate::inference::{dacv_intra, inter_modal, tip_intra, Method};
use crate::linalg::{argmax, l2_normalize};

/// Alpha used when no validation split is available.
pub const FALLBACK_ALPHA: f64 = 1.0;

/// Everything a classifier may need. Unused fields may be `None`.
#[derive(Debug, Clone, Copy)]
pub struct Artifacts<'a> {
    /// Frozen zero-shot text cache.
    pub text: &'a TextCache,
    /// Unadapted visual cache (Tip-Adapter).
    pub cache: Option<&'a VisualCache>,
    pub adapter: Option<&'a Adapter>,
    /// Visual cache passed through `adapter`.
    pub adapted_cache: Option<&'a VisualCache>,
    /// Fine-tuned text cache (DAC-VT).
    pub tuned_text: Option<&'a TextCache>,
    /// Tip-Adapter sharpness.
    pub beta: f64,
}

impl<'a> Artifacts<'a> {
    pub fn zero_shot(text: &'a TextCache) -> Self {
        Self {
            text,
            cache: None,
            adapter: None,
            adapted_cache: None,
            tuned_text: None,
            beta: crate::inference::DEFAULT_BETA,
        }
    }

    fn require<T>(value: Option<T>, what: &str, method: Method) -> Result<T> {
        value.ok_or_else(|| Error::InvalidConfig(format!("method {method} needs {what}")))
    }

    fn dim(&self) -> usize {
        self.text.dim()
    }
}

/// Inter- and intra-modal scores of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub inter: Vec<f64>,
    /// Empty for zero-shot.
    pub intra: Vec<f64>,
    pub label: usize,
}

impl SampleScores {
    pub fn logits(&self, alpha: f64) -> Vec<f64> {
        if self.intra.is_empty() {
            return self.inter.clone();
        }
        self.inter.iter().zip(&self.intra).map(|(a, b)| a + alpha * b).collect()
    }

    pub fn predict(&self, alpha: f64) -> usize {
        argmax(&self.logits(alpha))
    }
}

fn check_eval_bundle(bundle: &EmbeddingBundle, dim: usize, n_classes: usize) -> Result<()> {
    bundle.validate()?;
    if !matches!(bundle.split, SplitTag::Val | SplitTag::Test) {
        return Err(Error::InvariantViolation(format!(
            "evaluation needs a val or test split, got {}",
            bundle.split
        )));
    }
    if bundle.is_empty() {
        return Err(Error::EmptyBundle(format!("{} bundle has no records", bundle.split)));
    }
    if bundle.dim != dim {
        return Err(Error::DimensionMismatch(format!(
            "bundle dim {} vs model dim {dim}",
            bundle.dim
        )));
    }
    if bundle.n_classes() != n_classes {
        return Err(Error::DimensionMismatch(format!(
            "bundle has {} classes, model has {n_classes}",
            bundle.n_classes()
        )));
    }
    if let Some(g) = bundle.groups().into_iter().find(|g| g.views.len() != 1) {
        return Err(Error::InvariantViolation(format!(
            "evaluation expects one view per image; class {} shot {} has {}",
            g.class_index,
            g.shot_index,
            g.views.len()
        )));
    }
    Ok(())
}

/// Scores every record of an evaluation bundle for `method`, in record order.
pub fn score_bundle(method: Method, bundle: &EmbeddingBundle, artifacts: &Artifacts<'_>) -> Result<Vec<SampleScores>> {
    check_eval_bundle(bundle, artifacts.dim(), artifacts.text.n_classes())?;
    let text = match method {
        Method::DacVt => Artifacts::require(artifacts.tuned_text, "a tuned text cache", method)?,
        _ => artifacts.text,
    };
    bundle
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let z = l2_normalize(&rec.embedding_f64()).map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm(format!("{} record {i}", bundle.split)),
                other => other,
            })?;
            let inter = inter_modal(text, &z)?;
            let intra = match method {
                Method::ZeroShot => Vec::new(),
                Method::Tip => {
                    let cache = Artifacts::require(artifacts.cache, "a visual cache", method)?;
                    tip_intra(cache, &z, artifacts.beta)?
                }
                Method::DacV | Method::DacVt => {
                    let cache = Artifacts::require(artifacts.adapted_cache, "an adapted visual cache", method)?;
                    let adapter = Artifacts::require(artifacts.adapter, "an adapter", method)?;
                    dacv_intra(cache, adapter, &z)?
                }
            };
            if !intra.is_empty() && intra.len() != inter.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} intra-modal scores for {} classes",
                    intra.len(),
                    inter.len()
                )));
            }
            Ok(SampleScores {
                inter,
                intra,
                label: rec.class_index,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub top1: f64,
    pub correct: usize,
    pub n_samples: usize,
    pub alpha_used: Option<f64>,
    /// `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    #[serde(default)]
    pub shots: Option<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Builds a report from predictions and labels.
pub fn report_from_predictions(
    method: &str,
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
    alpha_used: Option<f64>,
) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBundle("no samples to evaluate".into()));
    }
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(EvalReport {
        method: method.to_string(),
        top1: correct as f64 / labels.len() as f64,
        correct,
        n_samples: labels.len(),
        alpha_used,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
        shots: None,
        warnings: Vec::new(),
    })
}

pub fn report_from_scores(method: Method, scores: &[SampleScores], n_classes: usize, alpha: f64) -> Result<EvalReport> {
    let predictions: Vec<usize> = scores.iter().map(|s| s.predict(alpha)).collect();
    let labels: Vec<usize> = scores.iter().map(|s| s.label).collect();
    let alpha_used = method.uses_alpha().then_some(alpha);
    report_from_predictions(method.as_str(), &predictions, &labels, n_classes, alpha_used)
}

pub fn evaluate(method: Method, bundle: &EmbeddingBundle, artifacts: &Artifacts<'_>, alpha: f64) -> Result<EvalReport> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} must be >= 0")));
    }
    let scores = score_bundle(method, bundle, artifacts)?;
    let mut report = report_from_scores(method, &scores, artifacts.text.n_classes(), alpha)?;
    report.shots = artifacts.cache.or(artifacts.adapted_cache).map(VisualCache::shots_per_class);
    Ok(report)
}

/// Inclusive alpha grid `lo, lo + step, ..., <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            lo: 0.1,
            hi: 10.0,
            step: 0.01,
        }
    }
}

impl AlphaGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo >= 0.0 && self.lo < self.hi && self.hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha range [{}, {}] must satisfy 0 <= lo < hi",
                self.lo, self.hi
            )));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha step {} must be > 0", self.step)));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|k| {
                let a = self.lo + k as f64 * self.step;
                // strip accumulated representation noise, e.g. 0.13000000000000003
                (a * 1e10).round() / 1e10
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    pub alpha: f64,
    pub top1: f64,
    pub correct: usize,
    pub n_samples: usize,
}

/// Best alpha over the grid on precomputed scores; ties go to the smallest alpha.
pub fn search_alpha_on_scores(scores: &[SampleScores], grid: &AlphaGrid) -> Result<AlphaSearch> {
    grid.validate()?;
    if scores.is_empty() {
        return Err(Error::EmptyBundle("no validation samples".into()));
    }
    let points = grid.points();
    let counts: Vec<usize> = points
        .par_iter()
        .map(|&alpha| scores.iter().filter(|s| s.predict(alpha) == s.label).count())
        .collect();
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    Ok(AlphaSearch {
        alpha: points[best],
        top1: counts[best] as f64 / scores.len() as f64,
        correct: counts[best],
        n_samples: scores.len(),
    })
}

pub fn grid_search_alpha(
    method: Method,
    val: &EmbeddingBundle,
    artifacts: &Artifacts<'_>,
    grid: &AlphaGrid,
) -> Result<AlphaSearch> {
    let scores = score_bundle(method, val, artifacts)?;
    search_alpha_on_scores(&scores, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub alpha: f64,
    pub search: Option<AlphaSearch>,
    pub warning: Option<String>,
}

/// Grid-searches alpha on `val` when present, else falls back to 1.0.
pub fn select_alpha(
    method: Method,
    val: Option<&EmbeddingBundle>,
    artifacts: &Artifacts<'_>,
    grid: &AlphaGrid,
) -> Result<AlphaChoice> {
    match val {
        Some(val) => {
            let search = grid_search_alpha(method, val, artifacts, grid)?;
            Ok(AlphaChoice {
                alpha: search.alpha,
                search: Some(search),
                warning: None,
            })
        }
        None => Ok(AlphaChoice {
            alpha: FALLBACK_ALPHA,
            search: None,
            warning: Some(format!(
                "no validation split given; {method} uses alpha = {FALLBACK_ALPHA}"
            )),
        }),
    }
}

/// Accuracy of the visual cache alone (no text term).
///
/// With `adapter`, `cache` must be the unadapted cache: it is adapted here
/// and scored with `exp(W_dac^T g - 1)`. Without, Tip-Adapter affinities
/// with sharpness `beta` are used.
pub fn intra_modal_accuracy(
    cache: &VisualCache,
    bundle: &EmbeddingBundle,
    adapter: Option<&Adapter>,
    beta: f64,
) -> Result<EvalReport> {
    check_eval_bundle(bundle, cache.dim(), cache.n_classes())?;
    let adapted = adapter.map(|a| adapt_cache(cache, a)).transpose()?;
    let predictions: Vec<usize> = bundle
        .records
        .par_iter()
        .map(|rec| {
            let z = l2_normalize(&rec.embedding_f64())?;
            let intra = match (adapter, adapted.as_ref()) {
                (Some(a), Some(c)) => dacv_intra(c, a, &z)?,
                _ => tip_intra(cache, &z, beta)?,
            };
            Ok(argmax(&intra))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = bundle.records.iter().map(|r| r.class_index).collect();
    let tag = if adapter.is_some() { "intra-modal-dac" } else { "intra-modal-clip" };
    let mut report = report_from_predictions(tag, &predictions, &labels, cache.n_classes(), None)?;
    report.shots = Some(cache.shots_per_class());
    Ok(report)
}

/// Agreement statistics between the inter-modal sub-classifier, the
/// intra-modal sub-classifier and their ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub n_samples: usize,
    pub acc_inter: f64,
    pub acc_intra: f64,
    pub acc_ensemble: f64,
    /// Samples on which exactly one sub-classifier is correct.
    pub n_inconsistent: usize,
    /// `n_inconsistent / n_samples`.
    pub inconsistency: f64,
    /// Inter-modal wrong, ensemble right; over all samples.
    pub correct_flips: f64,
    /// Inter-modal right, ensemble wrong; over all samples.
    pub incorrect_flips: f64,
    /// Correct flips among inconsistent samples, over `n_inconsistent`.
    pub correct_flips_inconsistent: Option<f64>,
    /// Incorrect flips among inconsistent samples, over `n_inconsistent`.
    pub incorrect_flips_inconsistent: Option<f64>,
    pub n_correct_flips: usize,
    pub n_incorrect_flips: usize,
}

pub fn flip_analysis(
    inter_logits: &[Vec<f64>],
    intra_logits: &[Vec<f64>],
    ensemble_logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<FlipReport> {
    let n = labels.len();
    if inter_logits.len() != n || intra_logits.len() != n || ensemble_logits.len() != n {
        return Err(Error::LengthMismatch(format!(
            "{} inter, {} intra, {} ensemble logit rows for {n} labels",
            inter_logits.len(),
            intra_logits.len(),
            ensemble_logits.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyBundle("no samples for flip analysis".into()));
    }
    let (mut inter_ok, mut intra_ok, mut ens_ok) = (0usize, 0usize, 0usize);
    let (mut inconsistent, mut correct_flips, mut incorrect_flips) = (0usize, 0usize, 0usize);
    let (mut cf_inc, mut if_inc) = (0usize, 0usize);
    for i in 0..n {
        let y = labels[i];
        let a = argmax(&inter_logits[i]) == y;
        let b = argmax(&intra_logits[i]) == y;
        let e = argmax(&ensemble_logits[i]) == y;
        inter_ok += a as usize;
        intra_ok += b as usize;
        ens_ok += e as usize;
        let differs = a != b;
        inconsistent += differs as usize;
        let correct_flip = !a && e;
        let incorrect_flip = a && !e;
        correct_flips += correct_flip as usize;
        incorrect_flips += incorrect_flip as usize;
        if differs {
            cf_inc += correct_flip as usize;
            if_inc += incorrect_flip as usize;
        }
    }
    let frac = |k: usize| k as f64 / n as f64;
    let over_inconsistent = |k: usize| (inconsistent > 0).then(|| k as f64 / inconsistent as f64);
    Ok(FlipReport {
        n_samples: n,
        acc_inter: frac(inter_ok),
        acc_intra: frac(intra_ok),
        acc_ensemble: frac(ens_ok),
        n_inconsistent: inconsistent,
        inconsistency: frac(inconsistent),
        correct_flips: frac(correct_flips),
        incorrect_flips: frac(incorrect_flips),
        correct_flips_inconsistent: over_inconsistent(cf_inc),
        incorrect_flips_inconsistent: over_inconsistent(if_inc),
        n_correct_flips: correct_flips,
        n_incorrect_flips: incorrect_flips,
    })
}

/// Flip analysis of an ensemble method on a bundle at a fixed alpha.
pub fn method_flip_analysis(
    method: Method,
    bundle: &EmbeddingBundle,
    artifacts: &Artifacts<'_>,
    alpha: f64,
) -> Result<FlipReport> {
    if !method.uses_alpha() {
        return Err(Error::InvalidConfig("flip analysis needs an ensemble method".into()));
    }
    let scores = score_bundle(method, bundle, artifacts)?;
    let inter: Vec<Vec<f64>> = scores.iter().map(|s| s.inter.clone()).collect();
    let intra: Vec<Vec<f64>> = scores.iter().map(|s| s.intra.clone()).collect();
    let ensemble: Vec<Vec<f64>> = scores.iter().map(|s| s.logits(alpha)).collect();
    let labels: Vec<usize> = scores.iter().map(|s| s.label).collect();
    flip_analysis(&inter, &intra, &ensemble, &labels)
}

/// Renders reports as a `method x shots` table of top-1 percentages.
pub fn results_table_csv(reports: &[EvalReport]) -> Result<String> {
    let shots: BTreeSet<usize> = reports.iter().filter_map(|r| r.shots).collect();
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string()];
    header.extend(shots.iter().map(|s| s.to_string()));
    writer.write_record(&header).map_err(csv_error)?;
    for method in methods {
        let mut row = vec![method.to_string()];
        for &k in &shots {
            let cell = reports
                .iter()
                .rfind(|r| r.method == method && r.shots == Some(k))
                .map(|r| format!("{:.2}", 100.0 * r.top1))
                .unwrap_or_default();
            row.push(cell);
        }
        writer.write_record(&row).map_err(csv_error)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvariantViolation(e.to_string()))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::Record;
    use crate::cache::CacheKind;
    use crate::linalg::Mat;

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v
    }

    #[test]
    fn grid_has_991_points() {
        let pts = AlphaGrid::default().points();
        assert_eq!(pts.len(), 991);
        assert_eq!(pts[0], 0.1);
        assert_eq!(pts[3], 0.13);
        assert_eq!(*pts.last().unwrap(), 10.0);
        assert!(AlphaGrid { lo: 1.0, hi: 1.0, step: 0.1 }.validate().is_err());
        assert!(AlphaGrid { lo: 0.0, hi: 1.0, step: 0.0 }.validate().is_err());
    }

    #[test]
    fn perfect_and_permuted_labels() {
        let scores: Vec<SampleScores> = (0..3)
            .map(|k| SampleScores { inter: one_hot(3, k), intra: vec![], label: k })
            .collect();
        let r = report_from_scores(Method::ZeroShot, &scores, 3, 1.0).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.alpha_used, None);
        let permuted: Vec<SampleScores> = scores
            .iter()
            .map(|s| SampleScores { label: (s.label + 1) % 3, ..s.clone() })
            .collect();
        let r = report_from_scores(Method::ZeroShot, &permuted, 3, 1.0).unwrap();
        assert_eq!(r.top1, 0.0);
        assert_eq!(r.per_class_accuracy, vec![Some(0.0); 3]);
    }

    #[test]
    fn alpha_irrelevant_returns_lower_bound() {
        let scores: Vec<SampleScores> = (0..4)
            .map(|i| SampleScores {
                inter: vec![0.3, 0.1],
                intra: vec![0.5, 0.5],
                label: i % 2,
            })
            .collect();
        let s = search_alpha_on_scores(&scores, &AlphaGrid::default()).unwrap();
        assert_eq!(s.alpha, 0.1);
        assert_eq!(s.correct, 2);
    }

    #[test]
    fn alpha_threshold_case() {
        // Sample 0 is correct for every alpha. Sample 1 needs
        // 0.2 + 0.1 a > 0.5 + 0.0 a, i.e. a > 3.
        let scores = vec![
            SampleScores { inter: vec![1.0, 0.0], intra: vec![0.1, 0.1], label: 0 },
            SampleScores { inter: vec![0.5, 0.2], intra: vec![0.0, 0.1], label: 1 },
        ];
        let grid = AlphaGrid::default();
        let s = search_alpha_on_scores(&scores, &grid).unwrap();
        // enumerate the grid independently
        let first = grid
            .points()
            .into_iter()
            .find(|&a| 0.2 + 0.1 * a > 0.5)
            .unwrap();
        assert_eq!(s.alpha, first);
        assert!(s.alpha > 3.0 && s.alpha <= 3.01 + 1e-12);
        assert_eq!(s.top1, 1.0);
    }

    #[test]
    fn halving_step_never_worse() {
        let scores = vec![
            SampleScores { inter: vec![1.0, 0.0], intra: vec![0.1, 0.3], label: 0 },
            SampleScores { inter: vec![0.5, 0.2], intra: vec![0.0, 0.1], label: 1 },
            SampleScores { inter: vec![0.1, 0.3], intra: vec![0.4, 0.1], label: 0 },
        ];
        let coarse = search_alpha_on_scores(&scores, &AlphaGrid { lo: 0.1, hi: 10.0, step: 0.02 }).unwrap();
        let fine = search_alpha_on_scores(&scores, &AlphaGrid { lo: 0.1, hi: 10.0, step: 0.01 }).unwrap();
        assert!(fine.correct >= coarse.correct);
    }

    fn labels_for(bits: &[(bool, bool, bool)]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>) {
        let pick = |ok: bool| if ok { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        let inter = bits.iter().map(|b| pick(b.0)).collect();
        let intra = bits.iter().map(|b| pick(b.1)).collect();
        let ens = bits.iter().map(|b| pick(b.2)).collect();
        (inter, intra, ens, vec![0; bits.len()])
    }

    #[test]
    fn flips_identical_subclassifiers() {
        let bits = [(true, true, true), (false, false, false), (true, true, true)];
        let (a, b, c, y) = labels_for(&bits);
        let r = flip_analysis(&a, &b, &c, &y).unwrap();
        assert_eq!(r.inconsistency, 0.0);
        assert_eq!(r.correct_flips, 0.0);
        assert_eq!(r.incorrect_flips, 0.0);
        assert_eq!(r.correct_flips_inconsistent, None);
    }

    #[test]
    fn flips_extreme_case() {
        let bits = [(false, true, true); 5];
        let (a, b, c, y) = labels_for(&bits);
        let r = flip_analysis(&a, &b, &c, &y).unwrap();
        assert_eq!(r.inconsistency, 1.0);
        assert_eq!(r.correct_flips, 1.0);
        assert_eq!(r.incorrect_flips, 0.0);
    }

    #[test]
    fn flips_six_sample_table() {
        // (inter, intra, ensemble) correctness, counted by hand:
        // inconsistent: rows 1, 2, 4 -> 3/6
        // correct flips (inter wrong, ensemble right): rows 1, 5 -> 2/6
        // incorrect flips (inter right, ensemble wrong): row 2 -> 1/6
        // among inconsistent rows: correct 1/3 (row 1), incorrect 1/3 (row 2)
        let bits = [
            (true, true, true),
            (false, true, true),
            (true, false, false),
            (false, false, false),
            (false, true, false),
            (false, false, true),
        ];
        let (a, b, c, y) = labels_for(&bits);
        let r = flip_analysis(&a, &b, &c, &y).unwrap();
        assert_eq!(r.n_inconsistent, 3);
        assert_eq!(r.inconsistency, 0.5);
        assert_eq!(r.correct_flips, 2.0 / 6.0);
        assert_eq!(r.incorrect_flips, 1.0 / 6.0);
        assert_eq!(r.correct_flips_inconsistent, Some(1.0 / 3.0));
        assert_eq!(r.incorrect_flips_inconsistent, Some(1.0 / 3.0));
        assert_eq!(r.acc_inter, 2.0 / 6.0);
        assert_eq!(r.acc_intra, 3.0 / 6.0);
        assert_eq!(r.acc_ensemble, 3.0 / 6.0);
    }

    #[test]
    fn flip_length_mismatch() {
        let err = flip_analysis(&[vec![1.0]], &[], &[vec![1.0]], &[0]).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch(_)));
    }

    fn tiny_artifacts() -> (TextCache, VisualCache) {
        let text = TextCache::from_weights(Mat::identity(2), vec!["a".into(), "b".into()]).unwrap();
        let cache = VisualCache::from_parts(Mat::identity(2), vec![0, 1], vec!["a".into(), "b".into()], 1, CacheKind::Shots).unwrap();
        (text, cache)
    }

    #[test]
    fn evaluation_bundle_checks() {
        let (text, _) = tiny_artifacts();
        let art = Artifacts::zero_shot(&text);
        let empty = EmbeddingBundle::new(2, vec!["a".into(), "b".into()], SplitTag::Test, "t");
        assert!(matches!(evaluate(Method::ZeroShot, &empty, &art, 1.0), Err(Error::EmptyBundle(_))));
        let mut wrong_split = empty.clone();
        wrong_split.split = SplitTag::Train;
        wrong_split.records.push(Record::new(0, 0, 0, vec![1.0, 0.0]));
        assert!(matches!(evaluate(Method::ZeroShot, &wrong_split, &art, 1.0), Err(Error::InvariantViolation(_))));
        let mut two_views = empty.clone();
        two_views.records.push(Record::new(0, 0, 0, vec![1.0, 0.0]));
        two_views.records.push(Record::new(0, 0, 1, vec![1.0, 0.1]));
        assert!(matches!(evaluate(Method::ZeroShot, &two_views, &art, 1.0), Err(Error::InvariantViolation(_))));
        let mut wrong_dim = EmbeddingBundle::new(3, vec!["a".into(), "b".into()], SplitTag::Test, "t");
        wrong_dim.records.push(Record::new(0, 0, 0, vec![1.0, 0.0, 0.0]));
        assert!(matches!(evaluate(Method::ZeroShot, &wrong_dim, &art, 1.0), Err(Error::DimensionMismatch(_))));
        // Tip without a cache
        let mut ok = empty;
        ok.records.push(Record::new(0, 0, 0, vec![1.0, 0.0]));
        assert!(matches!(evaluate(Method::Tip, &ok, &art, 1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn intra_modal_exact_key_match() {
        let (_, cache) = tiny_artifacts();
        let mut b = EmbeddingBundle::new(2, vec!["a".into(), "b".into()], SplitTag::Test, "t");
        b.records.push(Record::new(1, 0, 0, vec![0.0, 3.0]));
        b.records.push(Record::new(0, 1, 0, vec![2.0, 0.0]));
        let r = intra_modal_accuracy(&cache, &b, None, 5.5).unwrap();
        assert_eq!(r.top1, 1.0);
        let id = Adapter::identity(2, 1, 0);
        let r = intra_modal_accuracy(&cache, &b, Some(&id), 5.5).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(r.method, "intra-modal-dac");
    }

    #[test]
    fn no_validation_falls_back() {
        let (text, _) = tiny_artifacts();
        let choice = select_alpha(Method::Tip, None, &Artifacts::zero_shot(&text), &AlphaGrid::default()).unwrap();
        assert_eq!(choice.alpha, 1.0);
        assert!(choice.warning.is_some());
    }

    #[test]
    fn csv_table_layout() {
        let mk = |m: &str, k: usize, t: f64| EvalReport {
            method: m.into(),
            top1: t,
            correct: 0,
            n_samples: 1,
            alpha_used: None,
            per_class_accuracy: vec![],
            shots: Some(k),
            warnings: vec![],
        };
        let csv = results_table_csv(&[mk("tip", 1, 0.5), mk("dac-v", 1, 0.6), mk("tip", 16, 0.625)]).unwrap();
        assert_eq!(csv, "method,1,16\ntip,50.00,62.50\ndac-v,60.00,\n");
    }
}
