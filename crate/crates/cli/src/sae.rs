use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde_json::json;

use saereg_core::sae::{
    detect_dead_features, finetune, nmse, pretrain, EpochRecord, ReconstructionNorm, SaeTrainConfig, TopKSae,
};

use crate::config::{pick, PipelineConfig, SaeSection};
use crate::output::{hex, load_embeddings, sci, write_json};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    Squared,
    Euclidean,
}

impl From<NormArg> for ReconstructionNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Squared => ReconstructionNorm::Squared,
            NormArg::Euclidean => ReconstructionNorm::Euclidean,
        }
    }
}

fn parse_norm(s: &str) -> anyhow::Result<ReconstructionNorm> {
    match NormArg::from_str(s, true) {
        Ok(n) => Ok(n.into()),
        Err(_) => bail!("unknown norm {s:?}; expected squared or euclidean"),
    }
}

/// Optimisation flags shared by `pretrain` and `finetune`.
#[derive(Args, Default)]
pub struct SaeFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Reconstruction norm.
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    /// Rescale feature vectors to unit norm after every step.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize_features: Option<bool>,
    /// Per-epoch training history (JSON).
    #[arg(long)]
    history: Option<PathBuf>,
}

/// Layers flags and the config section over `base`.
fn resolve(flags: &SaeFlags, file: &SaeSection, mut base: SaeTrainConfig, seed: u64) -> anyhow::Result<SaeTrainConfig> {
    let o = &mut base.optimizer;
    o.learning_rate = pick(flags.lr, file.lr, o.learning_rate);
    o.epsilon = pick(flags.adam_eps, file.adam_eps, o.epsilon);
    o.weight_decay = pick(flags.weight_decay, file.weight_decay, o.weight_decay);
    base.batch_size = pick(flags.batch, file.batch, base.batch_size);
    base.epochs = pick(flags.epochs, file.epochs, base.epochs);
    base.norm = match (flags.norm, &file.norm) {
        (Some(n), _) => n.into(),
        (None, Some(s)) => parse_norm(s)?,
        (None, None) => base.norm,
    };
    base.normalize_features = pick(flags.normalize_features, file.normalize_features, base.normalize_features);
    base.seed = seed;
    Ok(base)
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Training embeddings (EMB1).
    #[arg(long)]
    emb: PathBuf,
    /// Validation embeddings; loss is reported per epoch when given.
    #[arg(long)]
    val_emb: Option<PathBuf>,
    /// Continue training an existing SAE1 model instead of a fresh one.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output SAE1 file.
    #[arg(long)]
    out: PathBuf,
    /// Dictionary size C.
    #[arg(long)]
    features: Option<usize>,
    /// Active features per input.
    #[arg(long)]
    k: Option<usize>,
    /// L1 weight on activations.
    #[arg(long)]
    l1: Option<f64>,
    #[command(flatten)]
    flags: SaeFlags,
}

pub struct PretrainSettings {
    pub cfg: SaeTrainConfig,
    pub features: usize,
    pub k: usize,
    pub l1: f64,
}

pub fn resolve_pretrain(a: &PretrainArgs, cfg: &PipelineConfig) -> anyhow::Result<PretrainSettings> {
    let f = &cfg.pretrain;
    let seed = cfg.seed(a.flags.seed, f.seed);
    let train = resolve(&a.flags, f, SaeTrainConfig::pretrain(), seed)?;
    train.validate()?;
    let s = PretrainSettings {
        cfg: train,
        features: pick(a.features, f.features, 65536),
        k: pick(a.k, f.k, 20),
        l1: pick(a.l1, f.l1, 0.0),
    };
    if s.k == 0 || s.features == 0 {
        bail!("features and k must be >= 1");
    }
    if !(s.l1 >= 0.0 && s.l1.is_finite()) {
        bail!("l1 must be finite and >= 0");
    }
    Ok(s)
}

fn log_history(stage: &str, history: &[EpochRecord]) {
    for r in history {
        tracing::info!(
            stage,
            epoch = r.epoch,
            train_loss = r.train_loss,
            val_loss = r.val_loss,
            n_dead = r.n_dead,
            val_nmse = r.val_nmse,
            "epoch"
        );
    }
}

pub fn run_pretrain(a: PretrainArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let s = resolve_pretrain(&a, cfg)?;
    let train = load_embeddings(&a.emb)?;
    let val = match &a.val_emb {
        Some(p) => load_embeddings(p)?,
        None => train.subset(&[]),
    };
    let mut sae = match &a.init {
        Some(path) => {
            if a.features.is_some() || a.k.is_some() {
                bail!("--features and --k come from the --init model and cannot be overridden");
            }
            TopKSae::<f32>::read(path).with_context(|| format!("loading initial SAE {}", path.display()))?
        }
        None => TopKSae::init_kaiming(train.dim(), s.features, s.k, s.cfg.seed)?,
    };
    if a.l1.is_some() || cfg.pretrain.l1.is_some() || a.init.is_none() {
        sae.set_l1_weight(s.l1 as f32);
    }
    tracing::info!(
        features = sae.n_features(),
        k = sae.k_active(),
        lr = %sci(s.cfg.optimizer.learning_rate),
        batch = s.cfg.batch_size,
        epochs = s.cfg.epochs,
        seed = s.cfg.seed,
        "pretrain settings"
    );
    let (sae, history) = pretrain(sae, &train, &val, &s.cfg)?;
    log_history("pretrain", &history);
    sae.write(&a.out)?;
    if let Some(h) = &a.flags.history {
        write_json(h, &json!({ "command": "pretrain", "config": s.cfg, "epochs": history }))?;
    }
    Ok(json!({
        "command": "pretrain",
        "seed": s.cfg.seed,
        "out": a.out,
        "n_features": sae.n_features(),
        "k": sae.k_active(),
        "final_train_loss": history.last().map(|r| r.train_loss),
        "sae_sha256": hex(&sae.digest()?),
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 5 epochs, batch 512, lr 5e-5.
    Default,
    /// Small task datasets: 40 epochs, batch 8, lr 3e-6.
    Small,
}

#[derive(Args)]
pub struct FinetuneArgs {
    /// SAE1 model to fine-tune.
    #[arg(long)]
    sae: PathBuf,
    /// Task embeddings (EMB1).
    #[arg(long)]
    emb: PathBuf,
    /// Embeddings for per-epoch nMSE; defaults to the training file.
    #[arg(long)]
    val_emb: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Weight of the residual loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Dead features fitted to each residual.
    #[arg(long)]
    dead_k: Option<usize>,
    #[command(flatten)]
    flags: SaeFlags,
}

pub fn resolve_finetune(a: &FinetuneArgs, cfg: &PipelineConfig) -> anyhow::Result<SaeTrainConfig> {
    let f = &cfg.finetune;
    let seed = cfg.seed(a.flags.seed, f.seed);
    let preset = match (a.preset, &f.preset) {
        (Some(p), _) => p,
        (None, Some(s)) => Preset::from_str(s, true).map_err(|_| anyhow::anyhow!("unknown preset {s:?}"))?,
        (None, None) => Preset::Default,
    };
    let base = match preset {
        Preset::Default => SaeTrainConfig::finetune(),
        Preset::Small => SaeTrainConfig::finetune_small(),
    };
    let mut c = resolve(&a.flags, f, base, seed)?;
    c.alpha = pick(a.alpha, f.alpha, c.alpha);
    c.dead_k = pick(a.dead_k, f.dead_k, c.dead_k);
    c.validate()?;
    Ok(c)
}

pub fn run_finetune(a: FinetuneArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let c = resolve_finetune(&a, cfg)?;
    let sae = TopKSae::<f32>::read(&a.sae).with_context(|| format!("loading SAE {}", a.sae.display()))?;
    let train = load_embeddings(&a.emb)?;
    let val = match &a.val_emb {
        Some(p) => load_embeddings(p)?,
        None => train.clone(),
    };
    tracing::info!(
        alpha = c.alpha,
        dead_k = c.dead_k,
        lr = %sci(c.optimizer.learning_rate),
        batch = c.batch_size,
        epochs = c.epochs,
        seed = c.seed,
        "finetune settings"
    );
    let initial = (detect_dead_features(&sae, &train)?.n_dead, nmse(&sae, &val)?);
    let (sae, history) = finetune(sae, &train, &val, &c)?;
    log_history("finetune", &history);
    let last = (detect_dead_features(&sae, &train)?.n_dead, nmse(&sae, &val)?);
    tracing::info!(n_dead = last.0, nmse = last.1, "after fine-tuning");
    sae.write(&a.out)?;
    if let Some(h) = &a.flags.history {
        write_json(
            h,
            &json!({
                "command": "finetune",
                "config": c,
                "initial": { "n_dead": initial.0, "nmse": initial.1 },
                "epochs": history,
                "final": { "n_dead": last.0, "nmse": last.1 },
            }),
        )?;
    }
    Ok(json!({
        "command": "finetune",
        "seed": c.seed,
        "out": a.out,
        "n_dead_initial": initial.0,
        "n_dead_final": last.0,
        "nmse_initial": initial.1,
        "nmse_final": last.1,
        "sae_sha256": hex(&sae.digest()?),
    }))
}
