use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand};
use serde::Serialize;
use serde_json::json;

use saereg_core::embedding::write_embeddings;
use saereg_core::synth::{
    gen_dictionary_data, gen_probe_corpus, gen_spurious_data, write_manifest, PlantedDictionary, SpuriousScenario,
};

use crate::config::{pick, PipelineConfig};

#[derive(Args)]
pub struct SynthArgs {
    #[command(subcommand)]
    kind: SynthKind,
}

#[derive(Subcommand)]
enum SynthKind {
    /// Rows built from a random planted dictionary.
    Dictionary(DictionaryArgs),
    /// Labelled train/test sets with a shortcut direction, plus an
    /// unlabelled probe corpus for learning and explaining features.
    Spurious(SpuriousArgs),
}

#[derive(Args)]
struct DictionaryArgs {
    /// Output EMB1 file; the manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long)]
    k_true: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    activation_prob: Option<f64>,
    /// Swap this many atoms of the seeded dictionary for fresh ones, giving a
    /// shifted distribution over the same space.
    #[arg(long)]
    replace_atoms: Option<usize>,
}

#[derive(Args)]
struct SpuriousArgs {
    /// Directory for train.emb, test.emb, probe.emb and manifest.json.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_correlation: Option<f64>,
    #[arg(long)]
    test_correlation: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    probe_n: Option<usize>,
    #[arg(long)]
    probe_noise: Option<f64>,
    /// Random orthonormal directions instead of e0/e1.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    random_directions: Option<bool>,
}

pub fn run(args: SynthArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    match args.kind {
        SynthKind::Dictionary(a) => dictionary(a, cfg),
        SynthKind::Spurious(a) => spurious(a, cfg),
    }
}

#[derive(Serialize)]
struct DictionaryManifest {
    kind: &'static str,
    seed: u64,
    dim: usize,
    atoms: usize,
    k_true: usize,
    n: usize,
    activation_prob: f64,
    noise_std: f64,
    replace_atoms: usize,
    replaced: Vec<usize>,
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn dictionary(a: DictionaryArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let f = &cfg.synth.dictionary;
    let seed = cfg.seed(a.seed, f.seed);
    let dim = pick(a.dim, f.dim, 32);
    let atoms = pick(a.atoms, f.atoms, 64);
    let k_true = pick(a.k_true, f.k_true, 4);
    let n = pick(a.n, f.n, 5000);
    let activation_prob = pick(a.activation_prob, f.activation_prob, 0.75);
    let replace_atoms = pick(a.replace_atoms, f.replace_atoms, 0);

    let mut dict = PlantedDictionary::random(dim, atoms, k_true, seed)?;
    let mut replaced = Vec::new();
    if replace_atoms > 0 {
        (dict, replaced) = dict.with_replaced(replace_atoms, seed.wrapping_add(1))?;
    }
    let ds = gen_dictionary_data(&dict, n, activation_prob, seed.wrapping_add(2))?;
    write_embeddings(&ds, &a.out)?;
    let manifest = DictionaryManifest {
        kind: "dictionary",
        seed,
        dim,
        atoms,
        k_true,
        n,
        activation_prob,
        noise_std: saereg_core::synth::DICTIONARY_NOISE_STD,
        replace_atoms,
        replaced,
    };
    let mpath = manifest_path(&a.out);
    write_manifest(&mpath, &manifest)?;
    tracing::info!(rows = n, dim, atoms, k_true, replace_atoms, "wrote dictionary data");
    Ok(json!({
        "command": "synth dictionary",
        "seed": seed,
        "out": a.out,
        "manifest": mpath,
        "rows": n,
        "dim": dim,
    }))
}

#[derive(Serialize)]
struct SpuriousManifest<'a> {
    kind: &'static str,
    scenario: &'a SpuriousScenario,
    probe_n: usize,
    probe_noise: f64,
    random_directions: bool,
}

fn spurious(a: SpuriousArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let f = &cfg.synth.spurious;
    let seed = cfg.seed(a.seed, f.seed);
    let dim = pick(a.dim, f.dim, 32);
    let random_directions = pick(a.random_directions, f.random_directions, false);
    let base = if random_directions {
        SpuriousScenario::random_orthogonal(dim, seed)?
    } else {
        SpuriousScenario::axis_aligned(dim, seed)?
    };
    let sc = SpuriousScenario {
        train_correlation: pick(a.train_correlation, f.train_correlation, base.train_correlation),
        test_correlation: pick(a.test_correlation, f.test_correlation, base.test_correlation),
        noise_std: pick(a.noise_std, f.noise_std, base.noise_std),
        n_train: pick(a.n_train, f.n_train, base.n_train),
        n_test: pick(a.n_test, f.n_test, base.n_test),
        ..base
    };
    let probe_n = pick(a.probe_n, f.probe_n, 5000);
    let probe_noise = pick(a.probe_noise, f.probe_noise, 0.05);
    sc.validate()?;

    let (train, test) = gen_spurious_data(&sc)?;
    let probe = gen_probe_corpus(&sc, probe_n, probe_noise, seed)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (name, ds) in [("train.emb", &train), ("test.emb", &test), ("probe.emb", &probe)] {
        write_embeddings(ds, &a.out_dir.join(name))?;
    }
    let manifest = SpuriousManifest {
        kind: "spurious",
        scenario: &sc,
        probe_n,
        probe_noise,
        random_directions,
    };
    write_manifest(&a.out_dir.join("manifest.json"), &manifest)?;
    tracing::info!(n_train = sc.n_train, n_test = sc.n_test, probe_n, dim, "wrote spurious scenario");
    Ok(json!({
        "command": "synth spurious",
        "seed": seed,
        "out_dir": a.out_dir,
        "train": a.out_dir.join("train.emb"),
        "test": a.out_dir.join("test.emb"),
        "probe": a.out_dir.join("probe.emb"),
    }))
}
