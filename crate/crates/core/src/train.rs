//! Visual adapter training with Adam.
//!
//! The default loop follows the few-shot protocol: every epoch enumerates
//! all `C(MK, 2)` view pairs `(i, j)` of each class in a seeded random
//! order, and each step feeds the same pair index for all `N` classes (a
//! batch of `N` pairs). `BatchPolicy::FullBatch` instead accumulates every
//! pair into one update per epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdamConfig, Adapter, MAX_DEPTH};
use crate::bundle::{EmbeddingBundle, SplitTag};
use crate::cache::{adapt_cache, TextCache, VisualCache};
use crate::error::{Error, Result};
use crate::eval::{search_alpha_on_scores, score_bundle, AlphaGrid, Artifacts};
use crate::inference::Method;
use crate::linalg::{l2_normalize, Mat};
use crate::objective::{check_tau, contrastive_core, pair_terms, traces, xent_loss_and_grad, LabeledQuery};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Contrastive,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchPolicy {
    /// One pair index (contrastive) or one example (cross-entropy) per class per step.
    PerClassPair,
    /// All pairs / examples in a single step per epoch.
    FullBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub tau: f64,
    pub epochs: usize,
    /// Augmented views `M` used per shot.
    pub views_per_shot: usize,
    pub batch_policy: BatchPolicy,
    pub seed: u64,
    pub objective: Objective,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Adapter layers; values above 1 insert ReLUs between layers.
    pub depth: usize,
    /// Fixed ensemble weight inside the cross-entropy objective.
    pub xent_alpha: f64,
    /// Checkpoint evaluation period (epochs) when a validation split is given.
    pub val_every: usize,
    pub alpha_grid: AlphaGrid,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            tau: 0.008,
            epochs: 500,
            views_per_shot: 7,
            batch_policy: BatchPolicy::PerClassPair,
            seed: 0,
            objective: Objective::Contrastive,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            depth: 1,
            xent_alpha: 1.0,
            val_every: 10,
            alpha_grid: AlphaGrid::default(),
        }
    }
}

impl TrainConfig {
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
        check_tau(self.tau)?;
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.views_per_shot == 0 {
            return Err(Error::InvalidConfig("views per shot must be >= 1".into()));
        }
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::InvalidConfig(format!("adapter depth must be in 1..={MAX_DEPTH}")));
        }
        if self.val_every == 0 {
            return Err(Error::InvalidConfig("val_every must be >= 1".into()));
        }
        if !(self.xent_alpha >= 0.0 && self.xent_alpha.is_finite()) {
            return Err(Error::InvalidConfig("xent_alpha must be >= 0".into()));
        }
        self.alpha_grid.validate()
    }
}

/// Unit view embeddings grouped by class, `M*K` per class, ordered by
/// (shot, view).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    views: Vec<Vec<Vec<f64>>>,
}

impl TrainingSet {
    pub fn from_bundle(bundle: &EmbeddingBundle, views_per_shot: usize) -> Result<Self> {
        bundle.validate()?;
        if !matches!(bundle.split, SplitTag::Train | SplitTag::Cache) {
            return Err(Error::InvariantViolation(format!(
                "cannot train on a {} split",
                bundle.split
            )));
        }
        let mut views: Vec<Vec<Vec<f64>>> = vec![Vec::new(); bundle.n_classes()];
        for g in bundle.groups() {
            if g.views.len() < views_per_shot {
                return Err(Error::InsufficientViews(format!(
                    "class {} ({}) shot {} has {} views, {views_per_shot} requested",
                    g.class_index,
                    bundle.classes[g.class_index],
                    g.shot_index,
                    g.views.len()
                )));
            }
            for rec in g.views.iter().take(views_per_shot) {
                let z = l2_normalize(&rec.embedding_f64()).map_err(|e| match e {
                    Error::ZeroNorm(_) => Error::ZeroNorm(format!(
                        "train record class {} shot {} view {}",
                        rec.class_index, rec.shot_index, rec.view_index
                    )),
                    other => other,
                })?;
                views[g.class_index].push(z);
            }
        }
        Self::from_views(views, &bundle.classes)
    }

    fn from_views(views: Vec<Vec<Vec<f64>>>, classes: &[String]) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::EmptyBundle("training split has no classes".into()));
        }
        let per_class = views[0].len();
        for (c, v) in views.iter().enumerate() {
            if v.len() < 2 {
                return Err(Error::InsufficientViews(format!(
                    "class {c} ({}) has {} view embeddings; contrastive pairs need MK >= 2",
                    classes.get(c).map(String::as_str).unwrap_or("?"),
                    v.len()
                )));
            }
            if v.len() != per_class {
                return Err(Error::InvariantViolation(format!(
                    "training split is not class-balanced: class 0 has {per_class} views, class {c} has {}",
                    v.len()
                )));
            }
        }
        Ok(Self { views })
    }

    pub fn n_classes(&self) -> usize {
        self.views.len()
    }

    /// `M*K`.
    pub fn views_per_class(&self) -> usize {
        self.views[0].len()
    }

    pub fn dim(&self) -> usize {
        self.views[0][0].len()
    }

    pub fn class_views(&self, class: usize) -> &[Vec<f64>] {
        &self.views[class]
    }

    /// All `(i, j)` with `i < j`, in lexicographic order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let m = self.views_per_class();
        (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect()
    }

    fn queries(&self) -> Vec<Vec<LabeledQuery>> {
        self.views
            .iter()
            .enumerate()
            .map(|(label, vs)| vs.iter().map(|z| LabeledQuery { z: z.clone(), label }).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: u64,
    /// Mean per-step loss, measured before each update.
    pub mean_loss: f64,
    pub steps: usize,
    /// Contrastive pair terms evaluated per class this epoch.
    pub pair_terms_per_class: Vec<u64>,
    pub val_top1: Option<f64>,
    pub val_alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub objective: Objective,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose adapter was returned.
    pub selected_epoch: u64,
    pub selected_alpha: Option<f64>,
    pub selected_val_top1: Option<f64>,
}

struct XentContext {
    base_cache: VisualCache,
    text: TextCache,
    queries: Vec<Vec<LabeledQuery>>,
}

/// Owns an adapter and advances it one epoch at a time.
pub struct VisualTrainer<'a> {
    adapter: Adapter,
    cfg: TrainConfig,
    data: &'a TrainingSet,
    xent: Option<XentContext>,
}

impl<'a> VisualTrainer<'a> {
    /// Continues training `adapter` (fresh or loaded from disk). The
    /// cross-entropy objective needs the unadapted cache and text cache.
    pub fn new(
        adapter: Adapter,
        data: &'a TrainingSet,
        cfg: &TrainConfig,
        cache: Option<&VisualCache>,
        text: Option<&TextCache>,
    ) -> Result<Self> {
        cfg.validate()?;
        if adapter.dim() != data.dim() {
            return Err(Error::DimensionMismatch(format!(
                "adapter dim {} vs training dim {}",
                adapter.dim(),
                data.dim()
            )));
        }
        let xent = match cfg.objective {
            Objective::Contrastive => None,
            Objective::CrossEntropy => {
                let (Some(cache), Some(text)) = (cache, text) else {
                    return Err(Error::InvalidConfig(
                        "cross-entropy training needs the visual and text caches".into(),
                    ));
                };
                if cache.n_classes() != data.n_classes() {
                    return Err(Error::DimensionMismatch(format!(
                        "cache has {} classes, training split {}",
                        cache.n_classes(),
                        data.n_classes()
                    )));
                }
                Some(XentContext {
                    base_cache: cache.clone(),
                    text: text.clone(),
                    queries: data.queries(),
                })
            }
        };
        Ok(Self {
            adapter,
            cfg: cfg.clone(),
            data,
            xent,
        })
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn into_adapter(self) -> Adapter {
        self.adapter
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.adapter.seed);
        rng.set_stream(self.adapter.epoch);
        rng
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let log = match (self.cfg.objective, self.cfg.batch_policy) {
            (Objective::Contrastive, BatchPolicy::PerClassPair) => self.contrastive_pairwise()?,
            (Objective::Contrastive, BatchPolicy::FullBatch) => self.contrastive_full()?,
            (Objective::CrossEntropy, policy) => self.xent_epoch(policy)?,
        };
        self.adapter.epoch += 1;
        if !self.adapter.layers().iter().all(Mat::is_finite) {
            return Err(Error::NonFinite(format!("adapter after epoch {}", self.adapter.epoch)));
        }
        Ok(log)
    }

    fn contrastive_pairwise(&mut self) -> Result<EpochLog> {
        let mut pairs = self.data.pairs();
        pairs.shuffle(&mut self.epoch_rng());
        let adam = self.cfg.adam();
        let n = self.data.n_classes();
        let mut counter = vec![0u64; n];
        let mut total = 0.0;
        for &(i, j) in &pairs {
            let first: Vec<&[f64]> = (0..n).map(|c| self.data.views[c][i].as_slice()).collect();
            let second: Vec<&[f64]> = (0..n).map(|c| self.data.views[c][j].as_slice()).collect();
            let (loss, grads) = contrastive_core(&self.adapter, &first, &second, self.cfg.tau, true)?;
            counter.iter_mut().for_each(|k| *k += 1);
            total += loss;
            self.adapter.apply_adam(&grads.expect("gradients requested"), &adam);
        }
        Ok(self.epoch_log(total / pairs.len() as f64, pairs.len(), counter))
    }

    fn contrastive_full(&mut self) -> Result<EpochLog> {
        let n = self.data.n_classes();
        let d = self.data.dim();
        let m = self.data.views_per_class();
        let pairs = self.data.pairs();
        let scale = 1.0 / pairs.len() as f64;
        let class_traces: Vec<_> = self
            .data
            .views
            .iter()
            .map(|vs| traces(&self.adapter, vs))
            .collect::<Result<_>>()?;
        let mut d_unit = vec![vec![vec![0.0; d]; m]; n];
        let mut counter = vec![0u64; n];
        let mut total = 0.0;
        let mut d_anchor = vec![vec![0.0; d]; n];
        let mut d_cand = vec![vec![0.0; d]; n];
        for &(i, j) in &pairs {
            let candidates: Vec<&[f64]> = class_traces.iter().map(|t| t[i].unit.as_slice()).collect();
            let anchors: Vec<&[f64]> = class_traces.iter().map(|t| t[j].unit.as_slice()).collect();
            d_anchor.iter_mut().chain(d_cand.iter_mut()).for_each(|v| v.fill(0.0));
            total += pair_terms(
                &anchors,
                &candidates,
                self.cfg.tau,
                Some((&mut d_anchor, &mut d_cand)),
                scale,
            );
            counter.iter_mut().for_each(|k| *k += 1);
            for c in 0..n {
                for (acc, &g) in d_unit[c][j].iter_mut().zip(&d_anchor[c]) {
                    *acc += g;
                }
                for (acc, &g) in d_unit[c][i].iter_mut().zip(&d_cand[c]) {
                    *acc += g;
                }
            }
        }
        let mut grads = self.adapter.zero_grads();
        for (traces, grads_c) in class_traces.iter().zip(&d_unit) {
            for (trace, g) in traces.iter().zip(grads_c) {
                self.adapter.backward(trace, g, &mut grads);
            }
        }
        self.adapter.apply_adam(&grads, &self.cfg.adam());
        Ok(self.epoch_log(total * scale, 1, counter))
    }

    fn xent_epoch(&mut self, policy: BatchPolicy) -> Result<EpochLog> {
        let ctx = self.xent.as_ref().expect("cross-entropy context");
        let adam = self.cfg.adam();
        let batches: Vec<Vec<LabeledQuery>> = match policy {
            BatchPolicy::FullBatch => vec![ctx.queries.iter().flatten().cloned().collect()],
            BatchPolicy::PerClassPair => {
                let mut rng = self.epoch_rng();
                let orders: Vec<Vec<usize>> = ctx
                    .queries
                    .iter()
                    .map(|qs| {
                        let mut idx: Vec<usize> = (0..qs.len()).collect();
                        idx.shuffle(&mut rng);
                        idx
                    })
                    .collect();
                (0..self.data.views_per_class())
                    .map(|t| {
                        ctx.queries
                            .iter()
                            .zip(&orders)
                            .map(|(qs, order)| qs[order[t]].clone())
                            .collect()
                    })
                    .collect()
            }
        };
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grads) =
                xent_loss_and_grad(&self.adapter, &ctx.base_cache, &ctx.text, batch, self.cfg.xent_alpha)?;
            total += loss;
            self.adapter.apply_adam(&grads, &adam);
        }
        Ok(self.epoch_log(total / batches.len() as f64, batches.len(), Vec::new()))
    }

    fn epoch_log(&self, mean_loss: f64, steps: usize, counter: Vec<u64>) -> EpochLog {
        EpochLog {
            epoch: self.adapter.epoch + 1,
            mean_loss,
            steps,
            pair_terms_per_class: counter,
            val_top1: None,
            val_alpha: None,
        }
    }
}

fn check_shapes(data: &TrainingSet, cache: &VisualCache, text: &TextCache) -> Result<()> {
    if cache.dim() != data.dim() || text.dim() != data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "training dim {}, cache dim {}, text dim {}",
            data.dim(),
            cache.dim(),
            text.dim()
        )));
    }
    if cache.n_classes() != data.n_classes() || text.n_classes() != data.n_classes() {
        return Err(Error::DimensionMismatch(format!(
            "training split has {} classes, cache {}, text {}",
            data.n_classes(),
            cache.n_classes(),
            text.n_classes()
        )));
    }
    Ok(())
}

/// Trains an identity-initialized adapter. With `val`, checkpoints every
/// `val_every` epochs (and the last one) are scored by DAC-V validation
/// accuracy at their best grid alpha, and the best checkpoint is returned
/// (earliest on ties). Without `val`, the final adapter is returned.
pub fn train_visual_adapter(
    train: &EmbeddingBundle,
    cfg: &TrainConfig,
    val: Option<&EmbeddingBundle>,
    cache: &VisualCache,
    text: &TextCache,
) -> Result<(Adapter, TrainLog)> {
    cfg.validate()?;
    let data = TrainingSet::from_bundle(train, cfg.views_per_shot)?;
    check_shapes(&data, cache, text)?;
    let adapter = Adapter::identity(data.dim(), cfg.depth, cfg.seed);
    let mut trainer = VisualTrainer::new(adapter, &data, cfg, Some(cache), Some(text))?;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Adapter, u64, f64, usize)> = None;
    for e in 1..=cfg.epochs {
        let mut log = trainer.run_epoch()?;
        if let Some(val) = val {
            if e % cfg.val_every == 0 || e == cfg.epochs {
                let adapted = adapt_cache(cache, trainer.adapter())?;
                let artifacts = Artifacts {
                    text,
                    cache: Some(cache),
                    adapter: Some(trainer.adapter()),
                    adapted_cache: Some(&adapted),
                    tuned_text: None,
                    beta: crate::inference::DEFAULT_BETA,
                };
                let scores = score_bundle(Method::DacV, val, &artifacts)?;
                let search = search_alpha_on_scores(&scores, &cfg.alpha_grid)?;
                log.val_top1 = Some(search.top1);
                log.val_alpha = Some(search.alpha);
                if best.as_ref().is_none_or(|b| search.correct > b.3) {
                    best = Some((trainer.adapter().clone(), log.epoch, search.alpha, search.correct));
                }
            }
        }
        epochs.push(log);
    }
    match best {
        Some((adapter, epoch, alpha, _)) => {
            let top1 = epochs.iter().find(|l| l.epoch == epoch).and_then(|l| l.val_top1);
            Ok((
                adapter,
                TrainLog {
                    objective: cfg.objective,
                    epochs,
                    selected_epoch: epoch,
                    selected_alpha: Some(alpha),
                    selected_val_top1: top1,
                },
            ))
        }
        None => {
            let adapter = trainer.into_adapter();
            Ok((
                adapter,
                TrainLog {
                    objective: cfg.objective,
                    epochs,
                    selected_epoch: cfg.epochs as u64,
                    selected_alpha: None,
                    selected_val_top1: None,
                },
            ))
        }
    }
}

/// Cross-entropy ablation: the adapter is trained on DAC-V logits with
/// `cfg.xent_alpha` instead of the contrastive objective.
pub fn train_visual_adapter_xent(
    train: &EmbeddingBundle,
    cfg: &TrainConfig,
    cache: &VisualCache,
    text: &TextCache,
) -> Result<(Adapter, TrainLog)> {
    let cfg = TrainConfig {
        objective: Objective::CrossEntropy,
        ..cfg.clone()
    };
    train_visual_adapter(train, &cfg, None, cache, text)
}
