//! Adapter training objectives and their analytic gradients.
//!
//! The contrastive objective works on one pair index `(i, j)` per class.
//! For class `n` the anchor is `g_j^(n)` and the candidates are the `i`-th
//! adapted views of every class; the loss is the InfoNCE cross-entropy of
//! picking the own-class candidate:
//!
//! ```text
//! L = -sum_n log( exp(g_j^(n) . g_i^(n) / tau) / sum_q exp(g_j^(n) . g_i^(q) / tau) )
//! ```
//!
//! with `g = H z / ||H z||`. Gradients include the normalization Jacobian.

use crate::adapter::{Adapter, ForwardTrace};
use crate::cache::{TextCache, VisualCache};
use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, matvec_t, Mat};

/// One pair index across all classes: `first[q]` is the `i`-th and
/// `second[q]` the `j`-th normalized view of class `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl PairBatch {
    pub fn n_classes(&self) -> usize {
        self.first.len()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.first.len() != self.second.len() {
            return Err(Error::LengthMismatch(format!(
                "pair batch has {} first and {} second views",
                self.first.len(),
                self.second.len()
            )));
        }
        if let Some(v) = self.first.iter().chain(&self.second).find(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "pair batch view of length {} for adapter dim {dim}",
                v.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau))
    }
}

/// Gradient accumulators for the anchor and candidate embeddings.
pub(crate) type PairGrads<'a> = (&'a mut [Vec<f64>], &'a mut [Vec<f64>]);

/// Loss of one pair batch given adapted unit embeddings. When gradient
/// buffers are supplied, `scale * dL/d(anchor)` and `scale * dL/d(candidate)`
/// are added to them.
pub(crate) fn pair_terms(
    anchors: &[&[f64]],
    candidates: &[&[f64]],
    tau: f64,
    mut grads: Option<PairGrads<'_>>,
    scale: f64,
) -> f64 {
    let n = anchors.len();
    let mut loss = 0.0;
    let mut scores = vec![0.0; n];
    for (a, anchor) in anchors.iter().enumerate() {
        for (s, cand) in scores.iter_mut().zip(candidates) {
            *s = dot(anchor, cand) / tau;
        }
        let lse = log_sum_exp(&scores);
        loss += lse - scores[a];
        if let Some((d_anchor, d_cand)) = grads.as_mut() {
            for (q, cand) in candidates.iter().enumerate() {
                let p = (scores[q] - lse).exp();
                let w = scale * (p - if q == a { 1.0 } else { 0.0 }) / tau;
                if w == 0.0 {
                    continue;
                }
                for ((da, dc), (&c, &an)) in d_anchor[a]
                    .iter_mut()
                    .zip(d_cand[q].iter_mut())
                    .zip(cand.iter().zip(anchor.iter()))
                {
                    *da += w * c;
                    *dc += w * an;
                }
            }
        }
    }
    loss
}

pub(crate) fn traces<V: AsRef<[f64]>>(adapter: &Adapter, views: &[V]) -> Result<Vec<ForwardTrace>> {
    views
        .iter()
        .map(|v| {
            adapter.trace(v.as_ref()).map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm("adapter annihilated a training embedding".into()),
                other => other,
            })
        })
        .collect()
}

pub fn contrastive_loss(adapter: &Adapter, batch: &PairBatch, tau: f64) -> Result<f64> {
    batch.validate(adapter.dim())?;
    let first: Vec<&[f64]> = batch.first.iter().map(Vec::as_slice).collect();
    let second: Vec<&[f64]> = batch.second.iter().map(Vec::as_slice).collect();
    Ok(contrastive_core(adapter, &first, &second, tau, false)?.0)
}

pub fn contrastive_loss_and_grad(adapter: &Adapter, batch: &PairBatch, tau: f64) -> Result<(f64, Vec<Mat>)> {
    batch.validate(adapter.dim())?;
    let first: Vec<&[f64]> = batch.first.iter().map(Vec::as_slice).collect();
    let second: Vec<&[f64]> = batch.second.iter().map(Vec::as_slice).collect();
    let (loss, grads) = contrastive_core(adapter, &first, &second, tau, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

pub(crate) fn contrastive_core(
    adapter: &Adapter,
    first: &[&[f64]],
    second: &[&[f64]],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Mat>>)> {
    check_tau(tau)?;
    let d = adapter.dim();
    let n = first.len();
    let first = traces(adapter, first)?;
    let second = traces(adapter, second)?;
    let anchors: Vec<&[f64]> = second.iter().map(|t| t.unit.as_slice()).collect();
    let candidates: Vec<&[f64]> = first.iter().map(|t| t.unit.as_slice()).collect();
    if !want_grad {
        return Ok((pair_terms(&anchors, &candidates, tau, None, 1.0), None));
    }
    let mut d_anchor = vec![vec![0.0; d]; n];
    let mut d_cand = vec![vec![0.0; d]; n];
    let loss = pair_terms(
        &anchors,
        &candidates,
        tau,
        Some((&mut d_anchor, &mut d_cand)),
        1.0,
    );
    let mut grads = adapter.zero_grads();
    for (trace, g) in second.iter().zip(&d_anchor) {
        adapter.backward(trace, g, &mut grads);
    }
    for (trace, g) in first.iter().zip(&d_cand) {
        adapter.backward(trace, g, &mut grads);
    }
    Ok((loss, Some(grads)))
}

/// `dL/dθ` of [`contrastive_loss`], one matrix per adapter layer.
pub fn contrastive_grad(adapter: &Adapter, batch: &PairBatch, tau: f64) -> Result<Vec<Mat>> {
    Ok(contrastive_loss_and_grad(adapter, batch, tau)?.1)
}

/// A labeled unit query for the cross-entropy objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledQuery {
    pub z: Vec<f64>,
    pub label: usize,
}

fn check_xent_inputs(
    adapter: &Adapter,
    base_cache: &VisualCache,
    text: &TextCache,
    queries: &[LabeledQuery],
) -> Result<()> {
    let d = adapter.dim();
    if base_cache.dim() != d || text.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "adapter dim {d}, cache dim {}, text dim {}",
            base_cache.dim(),
            text.dim()
        )));
    }
    if base_cache.n_classes() != text.n_classes() {
        return Err(Error::DimensionMismatch(format!(
            "cache has {} classes, text cache {}",
            base_cache.n_classes(),
            text.n_classes()
        )));
    }
    for q in queries {
        if q.z.len() != d {
            return Err(Error::DimensionMismatch(format!("query of length {} for dim {d}", q.z.len())));
        }
        if q.label >= text.n_classes() {
            return Err(Error::InvariantViolation(format!("query label {} out of range", q.label)));
        }
    }
    Ok(())
}

/// Mean cross-entropy of DAC-V logits over `queries`, where both the
/// queries and the (unadapted) cache keys pass through the adapter.
pub fn xent_loss(
    adapter: &Adapter,
    base_cache: &VisualCache,
    text: &TextCache,
    queries: &[LabeledQuery],
    alpha: f64,
) -> Result<f64> {
    Ok(xent_impl(adapter, base_cache, text, queries, alpha, false)?.0)
}

pub fn xent_loss_and_grad(
    adapter: &Adapter,
    base_cache: &VisualCache,
    text: &TextCache,
    queries: &[LabeledQuery],
    alpha: f64,
) -> Result<(f64, Vec<Mat>)> {
    let (loss, grads) = xent_impl(adapter, base_cache, text, queries, alpha, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn xent_impl(
    adapter: &Adapter,
    base_cache: &VisualCache,
    text: &TextCache,
    queries: &[LabeledQuery],
    alpha: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Mat>>)> {
    check_xent_inputs(adapter, base_cache, text, queries)?;
    if queries.is_empty() {
        return Err(Error::EmptyBundle("no queries for cross-entropy objective".into()));
    }
    let d = adapter.dim();
    let n_classes = text.n_classes();
    let key_traces = traces(adapter, &base_cache.keys().columns())?;
    let labels = base_cache.labels();
    let scale = 1.0 / queries.len() as f64;

    let mut loss = 0.0;
    let mut grads = want_grad.then(|| adapter.zero_grads());
    let mut d_keys = vec![vec![0.0; d]; key_traces.len()];
    let mut affinity = vec![0.0; key_traces.len()];
    for q in queries {
        let trace = adapter.trace(&q.z)?;
        let mut logits = matvec_t(text.weights(), &q.z)?;
        for (a, kt) in affinity.iter_mut().zip(&key_traces) {
            *a = (dot(&kt.unit, &trace.unit) - 1.0).exp();
        }
        for (&label, &a) in labels.iter().zip(&affinity) {
            logits[label] += alpha * a;
        }
        let lse = log_sum_exp(&logits);
        loss += scale * (lse - logits[q.label]);
        if let Some(grads) = grads.as_mut() {
            let d_logit: Vec<f64> = (0..n_classes)
                .map(|c| scale * ((logits[c] - lse).exp() - if c == q.label { 1.0 } else { 0.0 }))
                .collect();
            let mut d_query = vec![0.0; d];
            for (k, kt) in key_traces.iter().enumerate() {
                let w = alpha * affinity[k] * d_logit[labels[k]];
                if w == 0.0 {
                    continue;
                }
                for ((dq, dk), (&kv, &gv)) in d_query
                    .iter_mut()
                    .zip(d_keys[k].iter_mut())
                    .zip(kt.unit.iter().zip(&trace.unit))
                {
                    *dq += w * kv;
                    *dk += w * gv;
                }
            }
            adapter.backward(&trace, &d_query, grads);
        }
    }
    if let Some(grads) = grads.as_mut() {
        for (kt, dk) in key_traces.iter().zip(&d_keys) {
            adapter.backward(kt, dk, grads);
        }
    }
    Ok((loss, grads))
}
