use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use serde_json::json;

use saereg_core::classifier::{evaluate, train_classifier, ClfTrainConfig, LogisticClassifier, Purifier};
use saereg_core::embedding::split_dataset;
use saereg_core::judge::UnintendedSet;
use saereg_core::sae::TopKSae;

use crate::config::{pick, PipelineConfig};
use crate::output::{load_embeddings, read_json, sci, write_json};

#[derive(Args)]
pub struct TrainClfArgs {
    /// SAE1 model the unintended features refer to.
    #[arg(long)]
    sae: PathBuf,
    /// Labelled training embeddings.
    #[arg(long)]
    emb: PathBuf,
    /// Labelled validation embeddings; otherwise a stratified split of --emb.
    #[arg(long)]
    val_emb: Option<PathBuf>,
    /// Unintended set from `judge`; without it no direction is purified or
    /// penalised.
    #[arg(long)]
    unintended: Option<PathBuf>,
    /// Output CLF1 file.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history (JSON).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Comma-separated learning rates tried from scratch.
    #[arg(long, value_delimiter = ',')]
    lr_grid: Option<Vec<f64>>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn resolve_train(a: &TrainClfArgs, cfg: &PipelineConfig) -> anyhow::Result<(ClfTrainConfig, f64)> {
    let f = &cfg.train_clf;
    let d = ClfTrainConfig::default();
    let mut c = ClfTrainConfig {
        max_epochs: pick(a.max_epochs, f.max_epochs, d.max_epochs),
        lr_grid: pick(a.lr_grid.clone(), f.lr_grid.clone(), d.lr_grid.clone()),
        batch_size: pick(a.batch, f.batch, d.batch_size),
        seed: cfg.seed(a.seed, f.seed),
        beta: pick(a.beta, f.beta, d.beta),
        ..d
    };
    c.optimizer.weight_decay = pick(a.weight_decay, f.weight_decay, c.optimizer.weight_decay);
    c.validate()?;
    let val_frac = pick(a.val_frac, f.val_frac, 0.2);
    if a.val_emb.is_none() && !(val_frac > 0.0 && val_frac < 1.0) {
        bail!("val-frac {val_frac} outside (0, 1)");
    }
    Ok((c, val_frac))
}

fn load_sae(path: &std::path::Path) -> anyhow::Result<TopKSae<f32>> {
    TopKSae::<f32>::read(path).with_context(|| format!("loading SAE {}", path.display()))
}

pub fn run_train(a: TrainClfArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let (c, val_frac) = resolve_train(&a, cfg)?;
    let sae = load_sae(&a.sae)?;
    let unintended: UnintendedSet = match &a.unintended {
        Some(p) => read_json(p)?,
        None => UnintendedSet::empty(),
    };
    let purifier = Purifier::from_sae(&sae, &unintended)?;
    let data = load_embeddings(&a.emb)?;
    let (train, val) = match &a.val_emb {
        Some(p) => (data, load_embeddings(p)?),
        None => split_dataset(&data, val_frac, c.seed)?,
    };
    tracing::info!(
        beta = c.beta,
        unintended = unintended.len(),
        max_epochs = c.max_epochs,
        batch = c.batch_size,
        lr_grid = ?c.lr_grid.iter().map(|&v| sci(v)).collect::<Vec<_>>(),
        n_train = train.n_rows(),
        n_val = val.n_rows(),
        seed = c.seed,
        "train-clf settings"
    );
    let outcome = train_classifier(&train, &val, &purifier, &c)?;
    outcome.classifier.write(&a.out)?;
    if let Some(h) = &a.history {
        write_json(
            h,
            &json!({ "command": "train-clf", "config": c, "epochs": outcome.history, "val": outcome.val_report }),
        )?;
    }
    let r = &outcome.val_report;
    tracing::info!(val_accuracy = r.accuracy, val_f1 = r.f1_positive, penalty_l1 = r.penalty_l1, "trained");
    Ok(json!({
        "command": "train-clf",
        "seed": c.seed,
        "out": a.out,
        "beta": c.beta,
        "unintended": unintended.feature_ids,
        "val_accuracy": r.accuracy,
        "val_f1_positive": r.f1_positive,
        "penalty_l1": r.penalty_l1,
    }))
}

#[derive(Args)]
pub struct EvalArgs {
    /// CLF1 classifier.
    #[arg(long)]
    clf: PathBuf,
    /// The SAE1 model the classifier was trained against.
    #[arg(long)]
    sae: PathBuf,
    /// Labelled evaluation embeddings.
    #[arg(long)]
    emb: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decision threshold on the predicted probability.
    #[arg(long)]
    threshold: Option<f64>,
    /// Recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run_eval(a: EvalArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let f = &cfg.eval;
    let seed = cfg.seed(a.seed, f.seed);
    let threshold = pick(a.threshold, f.threshold, 0.5);
    let clf = LogisticClassifier::read(&a.clf).with_context(|| format!("loading classifier {}", a.clf.display()))?;
    let sae = load_sae(&a.sae)?;
    let unintended = UnintendedSet {
        feature_ids: clf.unintended.clone(),
        ..UnintendedSet::empty()
    };
    let purifier = Purifier::from_sae(&sae, &unintended)?;
    let ds = load_embeddings(&a.emb)?;
    let r = evaluate(&clf, &ds, &purifier, threshold)?;
    let report = json!({
        "command": "eval",
        "seed": seed,
        "threshold": threshold,
        "accuracy": r.accuracy,
        "f1_positive": r.f1_positive,
        "n_eval": r.n_eval,
        "penalty_l1": r.penalty_l1,
        "beta": clf.beta,
        "unintended": clf.unintended,
    });
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(report)
}
