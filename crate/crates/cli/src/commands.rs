use std::path::Path;

use dac_core::bundle::EmbeddingBundle;
use dac_core::cache::{self, adapt_cache, build_prototype_cache, build_visual_cache, CacheKind};
use dac_core::eval::{
    evaluate, grid_search_alpha, intra_modal_accuracy, method_flip_analysis, results_table_csv, select_alpha,
    AlphaChoice, Artifacts, EvalReport,
};
use dac_core::inference::Method;
use dac_core::io;
use dac_core::synthetic::{generate, SyntheticConfig};
use dac_core::text_tune::{tune_text_cache, TextTuneConfig};
use dac_core::train::{train_visual_adapter, train_visual_adapter_xent, Objective, TrainConfig};
use dac_core::{Adapter, AlphaGrid, Error, Result, TextCache, VisualCache};
use serde_json::{json, Value};

use super::*;

fn to_value<T: serde::Serialize>(value: &T) -> Result<Value> {
    serde_json::to_value(value).map_err(|e| Error::InvariantViolation(format!("JSON encoding: {e}")))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvariantViolation(format!("JSON encoding: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn read_shots(path: &Path, shots: ShotArgs) -> Result<EmbeddingBundle> {
    let bundle = io::read_bundle(path)?;
    match shots.shots {
        Some(k) => bundle.subsample_shots(k, shots.shot_seed),
        None => Ok(bundle),
    }
}

pub fn synth(a: SynthArgs) -> Result<Value> {
    let cfg = SyntheticConfig {
        n_classes: a.classes,
        shots: a.shots,
        dim: a.dim,
        nuisance_dims: a.nuisance_dims,
        train_views: a.train_views,
        cache_views: a.cache_views,
        val_per_class: a.val_per_class,
        test_per_class: a.test_per_class,
        seed: a.seed,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    io::write_text_bundle(&data.text, a.out.join("text.dacemb"))?;
    for (name, bundle) in [
        ("train", &data.train),
        ("cache", &data.cache),
        ("val", &data.val),
        ("test", &data.test),
    ] {
        io::write_bundle(bundle, a.out.join(format!("{name}.dacemb")))?;
    }
    eprintln!("wrote synthetic benchmark to {}", a.out.display());
    Ok(json!({
        "out": path_str(&a.out),
        "config": to_value(&cfg)?,
        "records": {
            "train": data.train.records.len(),
            "cache": data.cache.records.len(),
            "val": data.val.records.len(),
            "test": data.test.records.len(),
        },
    }))
}

pub fn build_text_cache(a: BuildTextCacheArgs) -> Result<Value> {
    let cache = cache::build_text_cache(&io::read_text_bundle(&a.text)?)?;
    io::save_text_cache(&cache, &a.out)?;
    Ok(json!({ "out": path_str(&a.out), "classes": cache.n_classes(), "dim": cache.dim() }))
}

pub fn build_cache(a: BuildCacheArgs) -> Result<Value> {
    let bundle = read_shots(&a.bundle, a.shots)?;
    let cache = if a.prototype {
        build_prototype_cache(&bundle)?
    } else {
        build_visual_cache(&bundle, a.cache_views)?
    };
    io::save_visual_cache(&cache, &a.out)?;
    eprintln!("cache: {} keys of dim {}", cache.n_keys(), cache.dim());
    Ok(json!({
        "out": path_str(&a.out),
        "kind": if cache.kind() == CacheKind::Prototype { "prototype" } else { "shots" },
        "classes": cache.n_classes(),
        "shots_per_class": cache.shots_per_class(),
        "keys": cache.n_keys(),
        "dim": cache.dim(),
    }))
}

pub fn train_visual(a: TrainVisualArgs) -> Result<Value> {
    let cfg = TrainConfig {
        lr: a.lr,
        tau: a.tau,
        epochs: a.epochs,
        views_per_shot: a.views_per_shot,
        batch_policy: a.batch_policy.into(),
        seed: a.seed,
        objective: match a.objective {
            ObjectiveArg::Contrastive => Objective::Contrastive,
            ObjectiveArg::CrossEntropy => Objective::CrossEntropy,
        },
        depth: a.depth,
        xent_alpha: a.xent_alpha,
        val_every: a.val_every,
        alpha_grid: a.grid.into(),
        ..Default::default()
    };
    cfg.validate()?;
    let train = read_shots(&a.train, a.shots)?;
    let cache = io::load_visual_cache(&a.cache)?;
    let text = io::load_text_cache_any(&a.text)?;
    let val = a.val.as_deref().map(io::read_bundle).transpose()?;
    let (adapter, log) = match cfg.objective {
        Objective::Contrastive => train_visual_adapter(&train, &cfg, val.as_ref(), &cache, &text)?,
        Objective::CrossEntropy => train_visual_adapter_xent(&train, &cfg, &cache, &text)?,
    };
    if val.is_none() {
        eprintln!("no validation split given; keeping the final epoch");
    }
    io::save_adapter(&adapter, &a.out)?;
    if let Some(path) = &a.log {
        write_json(&log, path)?;
    }
    let first = log.epochs.first().map(|e| e.mean_loss);
    let last = log.epochs.last().map(|e| e.mean_loss);
    eprintln!("trained {} epochs; loss {:?} -> {:?}", log.epochs.len(), first, last);
    Ok(json!({
        "out": path_str(&a.out),
        "config": to_value(&cfg)?,
        "epochs": log.epochs.len(),
        "first_loss": first,
        "final_loss": last,
        "selected_epoch": log.selected_epoch,
        "selected_alpha": log.selected_alpha,
        "selected_val_top1": log.selected_val_top1,
    }))
}

pub fn train_text(a: TrainTextArgs) -> Result<Value> {
    let cfg = TextTuneConfig {
        lr: a.lr,
        epochs: a.epochs,
        seed: a.seed,
        batch_policy: a.batch_policy.into(),
        views_per_shot: (!a.all_views).then_some(a.views_per_shot),
        ..Default::default()
    };
    cfg.validate()?;
    let train = read_shots(&a.train, a.shots)?;
    let cache = io::load_visual_cache(&a.cache)?;
    let text = io::load_text_cache_any(&a.text)?;
    let adapter = io::load_adapter(&a.adapter)?;
    let adapted = adapt_cache(&cache, &adapter)?;
    let (tuned, log) = tune_text_cache(&text, &adapted, &adapter, &train, &cfg)?;
    io::save_text_cache(&tuned, &a.out)?;
    if let Some(path) = &a.log {
        write_json(&log, path)?;
    }
    eprintln!("text tuning: loss {} -> {}", log.initial_loss, log.final_loss);
    Ok(json!({
        "out": path_str(&a.out),
        "config": to_value(&cfg)?,
        "examples": log.n_examples,
        "initial_loss": log.initial_loss,
        "final_loss": log.final_loss,
    }))
}

/// Loaded artifacts; `Artifacts` borrows from this.
struct Model {
    method: Method,
    text: TextCache,
    cache: Option<VisualCache>,
    adapter: Option<Adapter>,
    adapted: Option<VisualCache>,
    tuned_text: Option<TextCache>,
    beta: f64,
}

impl Model {
    fn load(m: &ModelArgs) -> Result<Self> {
        let method: Method = m.method.into();
        let need = |flag: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("method {method} needs --{flag}")))
            }
        };
        match method {
            Method::ZeroShot => {}
            Method::Tip => need("cache", m.cache.is_some())?,
            Method::DacV => {
                need("cache", m.cache.is_some())?;
                need("adapter", m.adapter.is_some())?;
            }
            Method::DacVt => {
                need("cache", m.cache.is_some())?;
                need("adapter", m.adapter.is_some())?;
                need("tuned-text", m.tuned_text.is_some())?;
            }
        }
        let text = io::load_text_cache_any(&m.text)?;
        let cache = m.cache.as_deref().map(io::load_visual_cache).transpose()?;
        let adapter = m.adapter.as_deref().map(io::load_adapter).transpose()?;
        let adapted = match (&cache, &adapter) {
            (Some(c), Some(a)) => Some(adapt_cache(c, a)?),
            _ => None,
        };
        let tuned_text = m.tuned_text.as_deref().map(io::load_text_cache).transpose()?;
        Ok(Self {
            method,
            text,
            cache,
            adapter,
            adapted,
            tuned_text,
            beta: m.beta,
        })
    }

    fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            text: &self.text,
            cache: self.cache.as_ref(),
            adapter: self.adapter.as_ref(),
            adapted_cache: self.adapted.as_ref(),
            tuned_text: self.tuned_text.as_ref(),
            beta: self.beta,
        }
    }

    fn choose_alpha(&self, a: &AlphaArgs) -> Result<AlphaChoice> {
        if let Some(alpha) = a.alpha {
            return Ok(AlphaChoice {
                alpha,
                search: None,
                warning: None,
            });
        }
        if !self.method.uses_alpha() {
            return Ok(AlphaChoice {
                alpha: 0.0,
                search: None,
                warning: None,
            });
        }
        let val = a.val.as_deref().map(io::read_bundle).transpose()?;
        let choice = select_alpha(self.method, val.as_ref(), &self.artifacts(), &a.grid.into())?;
        if let Some(w) = &choice.warning {
            eprintln!("warning: {w}");
        }
        Ok(choice)
    }
}

pub fn eval(a: EvalArgs) -> Result<Value> {
    let model = Model::load(&a.model)?;
    let bundle = io::read_bundle(&a.bundle)?;
    let choice = model.choose_alpha(&a.alpha)?;
    let mut report: EvalReport = evaluate(model.method, &bundle, &model.artifacts(), choice.alpha)?;
    report.warnings.extend(choice.warning);
    eprintln!("{}: top-1 {:.4} ({}/{})", report.method, report.top1, report.correct, report.n_samples);
    to_value(&report)
}

pub fn grid_alpha(a: GridAlphaArgs) -> Result<Value> {
    let model = Model::load(&a.model)?;
    if !model.method.uses_alpha() {
        return Err(Error::InvalidConfig(format!("method {} has no ensemble weight", model.method)));
    }
    let val = io::read_bundle(&a.val)?;
    let grid: AlphaGrid = a.grid.into();
    let search = grid_search_alpha(model.method, &val, &model.artifacts(), &grid)?;
    let mut value = to_value(&search)?;
    value["method"] = json!(model.method.as_str());
    value["grid_points"] = json!(grid.points().len());
    Ok(value)
}

pub fn intra_acc(a: IntraAccArgs) -> Result<Value> {
    let cache = io::load_visual_cache(&a.cache)?;
    let bundle = io::read_bundle(&a.bundle)?;
    let adapter = a.adapter.as_deref().map(io::load_adapter).transpose()?;
    let report = intra_modal_accuracy(&cache, &bundle, adapter.as_ref(), a.beta)?;
    eprintln!("{}: top-1 {:.4}", report.method, report.top1);
    to_value(&report)
}

pub fn analyze_flips(a: AnalyzeFlipsArgs) -> Result<Value> {
    let model = Model::load(&a.model)?;
    let bundle = io::read_bundle(&a.bundle)?;
    let choice = model.choose_alpha(&a.alpha)?;
    let flips = method_flip_analysis(model.method, &bundle, &model.artifacts(), choice.alpha)?;
    let mut value = to_value(&flips)?;
    value["method"] = json!(model.method.as_str());
    value["alpha"] = json!(choice.alpha);
    Ok(value)
}

pub fn table(a: TableArgs) -> Result<Value> {
    let mut reports = Vec::with_capacity(a.reports.len());
    for path in &a.reports {
        let text = std::fs::read_to_string(path)?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::InvariantViolation(format!("{}: not an eval report: {e}", path.display())))?;
        reports.push(report);
    }
    let csv = results_table_csv(&reports)?;
    match &a.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            Ok(json!({ "out": path_str(path), "reports": reports.len() }))
        }
        None => Ok(json!({ "csv": csv, "reports": reports.len() })),
    }
}
