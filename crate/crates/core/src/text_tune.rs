//! Fine-tuning of the text cache under a frozen adapted visual cache.
//!
//! Only the `d x N` text weights are optimized. Logits are
//! `W^T z + alpha_train * intra(z)`, where `intra` comes from the frozen
//! adapter and adapted cache and is precomputed once per example.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdamConfig, AdamState, Adapter};
use crate::bundle::{EmbeddingBundle, SplitTag};
use crate::cache::{TextCache, VisualCache};
use crate::error::{Error, Result};
use crate::inference::dacv_intra;
use crate::linalg::{l2_normalize, log_sum_exp, matvec_t, Mat};
use crate::train::BatchPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Ensemble weight during tuning. Only 1 is accepted.
    pub alpha_train: f64,
    /// `PerClassPair` draws one example per class per step.
    pub batch_policy: BatchPolicy,
    /// Views used per shot; `None` uses every view in the bundle.
    pub views_per_shot: Option<usize>,
}

impl Default for TextTuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha_train: 1.0,
            batch_policy: BatchPolicy::PerClassPair,
            views_per_shot: Some(7),
        }
    }
}

impl TextTuneConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.alpha_train != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "text tuning uses a fixed ensemble weight of 1, got {}",
                self.alpha_train
            )));
        }
        if self.views_per_shot == Some(0) {
            return Err(Error::InvalidConfig("views per shot must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training view with its frozen intra-modal scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneExample {
    pub z: Vec<f64>,
    pub intra: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEpochLog {
    pub epoch: u64,
    /// Mean per-step loss, measured before each update.
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneLog {
    pub epochs: Vec<TuneEpochLog>,
    pub initial_loss: f64,
    /// Full training-set loss of the returned cache.
    pub final_loss: f64,
    pub n_examples: usize,
}

/// Builds tuning examples from the training views, in (class, shot, view)
/// order.
pub fn tune_examples(
    adapted_cache: &VisualCache,
    adapter: &Adapter,
    train: &EmbeddingBundle,
    views_per_shot: Option<usize>,
) -> Result<Vec<TuneExample>> {
    train.validate()?;
    if !matches!(train.split, SplitTag::Train | SplitTag::Cache) {
        return Err(Error::InvariantViolation(format!(
            "cannot tune on a {} split",
            train.split
        )));
    }
    if train.dim != adapted_cache.dim() || train.n_classes() != adapted_cache.n_classes() {
        return Err(Error::DimensionMismatch(format!(
            "training split is {}-d with {} classes, cache {}-d with {}",
            train.dim,
            train.n_classes(),
            adapted_cache.dim(),
            adapted_cache.n_classes()
        )));
    }
    let mut out = Vec::new();
    for g in train.groups() {
        let take = views_per_shot.unwrap_or(g.views.len());
        if g.views.len() < take {
            return Err(Error::InsufficientViews(format!(
                "class {} shot {} has {} views, {take} requested",
                g.class_index,
                g.shot_index,
                g.views.len()
            )));
        }
        for rec in g.views.iter().take(take) {
            let z = l2_normalize(&rec.embedding_f64())?;
            let intra = dacv_intra(adapted_cache, adapter, &z)?;
            out.push(TuneExample {
                z,
                intra,
                label: rec.class_index,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyBundle("no training views for text tuning".into()));
    }
    Ok(out)
}

fn example_terms(weights: &Mat, ex: &TuneExample, alpha: f64, grad: Option<(&mut Mat, f64)>) -> Result<f64> {
    let mut logits = matvec_t(weights, &ex.z)?;
    for (l, s) in logits.iter_mut().zip(&ex.intra) {
        *l += alpha * s;
    }
    let lse = log_sum_exp(&logits);
    if let Some((grad, scale)) = grad {
        let delta: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(n, &l)| (l - lse).exp() - if n == ex.label { 1.0 } else { 0.0 })
            .collect();
        grad.add_outer(scale, &ex.z, &delta);
    }
    Ok(lse - logits[ex.label])
}

fn check_examples(weights: &Mat, examples: &[&TuneExample]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::EmptyBundle("no tuning examples".into()));
    }
    for ex in examples {
        if ex.z.len() != weights.rows() || ex.intra.len() != weights.cols() {
            return Err(Error::DimensionMismatch(format!(
                "example with dim {} and {} scores for a {}x{} text cache",
                ex.z.len(),
                ex.intra.len(),
                weights.rows(),
                weights.cols()
            )));
        }
        if ex.label >= weights.cols() {
            return Err(Error::InvariantViolation(format!("label {} out of range", ex.label)));
        }
    }
    Ok(())
}

/// Mean cross-entropy over `examples`.
pub fn tune_loss(weights: &Mat, examples: &[&TuneExample], alpha: f64) -> Result<f64> {
    check_examples(weights, examples)?;
    let mut total = 0.0;
    for ex in examples {
        total += example_terms(weights, ex, alpha, None)?;
    }
    Ok(total / examples.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to the text weights.
pub fn tune_loss_and_grad(weights: &Mat, examples: &[&TuneExample], alpha: f64) -> Result<(f64, Mat)> {
    check_examples(weights, examples)?;
    let scale = 1.0 / examples.len() as f64;
    let mut grad = Mat::zeros(weights.rows(), weights.cols());
    let mut total = 0.0;
    for ex in examples {
        total += example_terms(weights, ex, alpha, Some((&mut grad, scale)))?;
    }
    Ok((total * scale, grad))
}

fn batches<'e>(examples: &'e [TuneExample], n_classes: usize, policy: BatchPolicy, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<&'e TuneExample>>> {
    match policy {
        BatchPolicy::FullBatch => Ok(vec![examples.iter().collect()]),
        BatchPolicy::PerClassPair => {
            let mut by_class: Vec<Vec<&TuneExample>> = vec![Vec::new(); n_classes];
            for ex in examples {
                by_class[ex.label].push(ex);
            }
            let steps = by_class[0].len();
            if let Some((c, v)) = by_class.iter().enumerate().find(|(_, v)| v.len() != steps) {
                return Err(Error::InvariantViolation(format!(
                    "class-balanced batches need equal views per class: class 0 has {steps}, class {c} has {}",
                    v.len()
                )));
            }
            for v in by_class.iter_mut() {
                v.shuffle(rng);
            }
            Ok((0..steps).map(|t| by_class.iter().map(|v| v[t]).collect()).collect())
        }
    }
}

/// Returns the tuned text cache; the adapter and adapted cache are only read.
pub fn tune_text_cache(
    text: &TextCache,
    adapted_cache: &VisualCache,
    adapter: &Adapter,
    train: &EmbeddingBundle,
    cfg: &TextTuneConfig,
) -> Result<(TextCache, TuneLog)> {
    cfg.validate()?;
    if text.dim() != adapted_cache.dim() || text.n_classes() != adapted_cache.n_classes() || adapter.dim() != text.dim() {
        return Err(Error::DimensionMismatch(format!(
            "text cache {}x{}, visual cache dim {} with {} classes, adapter dim {}",
            text.dim(),
            text.n_classes(),
            adapted_cache.dim(),
            adapted_cache.n_classes(),
            adapter.dim()
        )));
    }
    let examples = tune_examples(adapted_cache, adapter, train, cfg.views_per_shot)?;
    let all: Vec<&TuneExample> = examples.iter().collect();
    let alpha = cfg.alpha_train;
    let adam_cfg = cfg.adam();
    let mut weights = [text.weights().clone()];
    let mut adam = AdamState::new(&[(text.dim(), text.n_classes())]);
    let initial_loss = tune_loss(&weights[0], &all, alpha)?;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch);
        let batches = batches(&examples, text.n_classes(), cfg.batch_policy, &mut rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grad) = tune_loss_and_grad(&weights[0], batch, alpha)?;
            total += loss;
            adam.update(&mut weights, &[grad], &adam_cfg);
        }
        if !weights[0].is_finite() {
            return Err(Error::NonFinite(format!("text weights after epoch {}", epoch + 1)));
        }
        epochs.push(TuneEpochLog {
            epoch: epoch + 1,
            mean_loss: total / batches.len() as f64,
            steps: batches.len(),
        });
    }
    let [weights] = weights;
    let final_loss = tune_loss(&weights, &all, alpha)?;
    let tuned = TextCache::from_weights(weights, text.classes().to_vec())?;
    Ok((
        tuned,
        TuneLog {
            epochs,
            initial_loss,
            final_loss,
            n_examples: examples.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::Record;
    use crate::cache::{adapt_cache, build_visual_cache};
    use rand::Rng;

    fn setup(n: usize, k: usize, d: usize, seed: u64) -> (TextCache, VisualCache, Adapter, EmbeddingBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let mut b = EmbeddingBundle::new(d, classes.clone(), SplitTag::Train, "t");
        for c in 0..n {
            for s in 0..k {
                for v in 0..2 {
                    let mut e: Vec<f32> = (0..d).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
                    e[c % d] += 1.5;
                    b.records.push(Record::new(c, s, v, e));
                }
            }
        }
        let cache = build_visual_cache(&b, 10).unwrap();
        let adapter = Adapter::identity(d, 1, 0);
        let adapted = adapt_cache(&cache, &adapter).unwrap();
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|_| l2_normalize(&(0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let text = TextCache::from_weights(Mat::from_columns(&cols).unwrap(), classes).unwrap();
        (text, adapted, adapter, b)
    }

    #[test]
    fn zero_lr_is_identity() {
        let (text, cache, adapter, b) = setup(3, 2, 6, 1);
        let cfg = TextTuneConfig { lr: 0.0, epochs: 2, views_per_shot: Some(2), ..Default::default() };
        let (tuned, _) = tune_text_cache(&text, &cache, &adapter, &b, &cfg).unwrap();
        assert_eq!(tuned, text);
    }

    #[test]
    fn single_class_has_zero_gradient() {
        let (text, cache, adapter, b) = setup(1, 1, 4, 2);
        let cfg = TextTuneConfig { lr: 0.1, epochs: 1, views_per_shot: Some(1), ..Default::default() };
        let (tuned, log) = tune_text_cache(&text, &cache, &adapter, &b, &cfg).unwrap();
        assert_eq!(tuned, text);
        assert_eq!(log.initial_loss, 0.0);
    }

    #[test]
    fn alpha_train_must_be_one() {
        let (text, cache, adapter, b) = setup(2, 1, 4, 3);
        let cfg = TextTuneConfig { alpha_train: 2.0, ..Default::default() };
        assert!(matches!(
            tune_text_cache(&text, &cache, &adapter, &b, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let (text, _, _, b) = setup(2, 1, 4, 4);
        let (_, cache, adapter, _) = setup(2, 1, 5, 4);
        let cfg = TextTuneConfig::default();
        assert!(matches!(
            tune_text_cache(&text, &cache, &adapter, &b, &cfg),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn full_batch_loss_decreases() {
        let (text, cache, adapter, b) = setup(3, 2, 6, 5);
        let cfg = TextTuneConfig {
            lr: 1e-3,
            epochs: 30,
            views_per_shot: Some(2),
            batch_policy: BatchPolicy::FullBatch,
            ..Default::default()
        };
        let (tuned, log) = tune_text_cache(&text, &cache, &adapter, &b, &cfg).unwrap();
        for w in log.epochs.windows(2) {
            assert!(w[1].mean_loss <= w[0].mean_loss + 1e-9);
        }
        assert!(log.final_loss < log.initial_loss);
        assert_ne!(tuned, text);
    }

    #[test]
    fn balanced_batches_hold_one_example_per_class() {
        let (text, cache, adapter, b) = setup(3, 2, 6, 6);
        let examples = tune_examples(&cache, &adapter, &b, Some(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bs = batches(&examples, text.n_classes(), BatchPolicy::PerClassPair, &mut rng).unwrap();
        assert_eq!(bs.len(), 4);
        for batch in bs {
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            assert_eq!(labels, vec![0, 1, 2]);
        }
    }
}
