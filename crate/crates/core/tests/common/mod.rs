//! Scenario drivers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use saereg_core::classifier::{evaluate, train_classifier, ClfTrainConfig, Purifier, TrainOutcome};
use saereg_core::embedding::{split_dataset, split_random};
use saereg_core::interpret::{explain_all, write_features_jsonl, FeatureExplanation};
use saereg_core::judge::{
    identify_unintended, judge_all, write_verdicts_jsonl, JudgeVerdict, MemorySink, RelevanceLevel, StubJudge,
    UnintendedSet,
};
use saereg_core::sae::{detect_dead_features, finetune, nmse, pretrain, SaeTrainConfig, TopKSae};
use saereg_core::synth::{
    dictionary_recovery_score, gen_dictionary_data, gen_probe_corpus, gen_spurious_data, PlantedDictionary,
    SpuriousScenario,
};

pub const ACTIVATION_PROB: f64 = 0.75;

pub const STUB_RULES: &str = r#"[
  {"keyword": "topic_pos", "summary": "task topic, positive", "relevance": "yes"},
  {"keyword": "topic_neg", "summary": "task topic, negative", "relevance": "yes"},
  {"keyword": "marker_a", "summary": "formatting marker A", "relevance": "no"},
  {"keyword": "marker_b", "summary": "formatting marker B", "relevance": "no"}
]"#;

pub const RUBRIC: &str = "Does the feature describe the topic of the text rather than its formatting?";

fn pretrain_config(seed: u64) -> SaeTrainConfig {
    let mut cfg = SaeTrainConfig::pretrain();
    cfg.optimizer.learning_rate = 1e-2;
    cfg.batch_size = 64;
    cfg.seed = seed;
    cfg
}

fn finetune_config(seed: u64) -> SaeTrainConfig {
    let mut cfg = SaeTrainConfig::finetune();
    cfg.optimizer.learning_rate = 1e-3;
    cfg.batch_size = 64;
    cfg.seed = seed;
    cfg
}

/// Planted dictionary D=32, C_true=64, k_true=4 learned by an SAE with
/// C=256, K=4 on 5000 rows for 5 epochs.
pub fn dictionary_recovery(seed: u64) -> f64 {
    let dict = PlantedDictionary::random(32, 64, 4, seed).unwrap();
    let ds = gen_dictionary_data(&dict, 5000, ACTIVATION_PROB, seed + 1).unwrap();
    let sae = TopKSae::<f32>::init_kaiming(32, 256, 4, seed).unwrap();
    let (sae, _) = pretrain(sae, &ds, &ds.subset(&[]), &pretrain_config(seed)).unwrap();
    dictionary_recovery_score(&sae, &dict).unwrap()
}

#[derive(Debug)]
pub struct ShiftOutcome {
    pub dead_before: usize,
    pub dead_after: usize,
    pub nmse_before: f64,
    pub nmse_after: f64,
}

/// Pre-trains on dictionary A, then fine-tunes on B, which swaps out half of
/// A's atoms.
pub fn residual_shift(seed: u64, alpha: f64) -> ShiftOutcome {
    let a = PlantedDictionary::random(32, 64, 4, 100 + seed).unwrap();
    let (b, _) = a.with_replaced(32, 200 + seed).unwrap();
    let ds_a = gen_dictionary_data(&a, 5000, ACTIVATION_PROB, 300 + seed).unwrap();
    let ds_b = gen_dictionary_data(&b, 5000, ACTIVATION_PROB, 400 + seed).unwrap();
    let (tr_b, va_b) = split_random(&ds_b, 0.1, seed).unwrap();
    let sae = TopKSae::<f32>::init_kaiming(32, 256, 4, seed).unwrap();
    let (sae, _) = pretrain(sae, &ds_a, &ds_a.subset(&[]), &pretrain_config(seed)).unwrap();
    let dead_before = detect_dead_features(&sae, &tr_b).unwrap().n_dead;
    let nmse_before = nmse(&sae, &va_b).unwrap();
    let mut cfg = finetune_config(seed);
    cfg.alpha = alpha;
    let (sae, _) = finetune(sae, &tr_b, &va_b, &cfg).unwrap();
    ShiftOutcome {
        dead_before,
        dead_after: detect_dead_features(&sae, &tr_b).unwrap().n_dead,
        nmse_before,
        nmse_after: nmse(&sae, &va_b).unwrap(),
    }
}

pub struct PipelineOutcome {
    pub sae: TopKSae<f32>,
    pub explanations: Vec<FeatureExplanation>,
    pub verdicts: Vec<JudgeVerdict>,
    pub unintended: UnintendedSet,
    pub regularized: TrainOutcome,
    pub baseline: TrainOutcome,
    pub reg_accuracy: f64,
    pub base_accuracy: f64,
    /// Both measured against the regularized run's unintended directions.
    pub reg_l1: f64,
    pub base_l1: f64,
}

/// Spurious scenario end to end: SAE on a probe corpus, fine-tuned on the
/// task data, explained, judged with the stub rules, then a regularized
/// classifier compared against an unregularized one without purification.
pub fn spurious_pipeline(seed: u64) -> PipelineOutcome {
    let sc = SpuriousScenario::axis_aligned(32, seed).unwrap();
    let (train, test) = gen_spurious_data(&sc).unwrap();
    let probe = gen_probe_corpus(&sc, 5000, 0.05, seed).unwrap();
    let empty = probe.subset(&[]);
    let sae = TopKSae::<f32>::init_kaiming(32, 128, 4, seed).unwrap();
    let (sae, _) = pretrain(sae, &probe, &empty, &pretrain_config(seed)).unwrap();
    let (sae, _) = finetune(sae, &train, &empty, &finetune_config(seed)).unwrap();

    let explanations = explain_all(&sae, &probe, 10).unwrap();
    let judge = StubJudge::from_json(STUB_RULES).unwrap();
    let verdicts = judge_all(&judge, &MemorySink::default(), &explanations, RUBRIC, 4).unwrap();
    let unintended = identify_unintended(&verdicts, RelevanceLevel::Yes)
        .unwrap()
        .with_rubric(RUBRIC);

    let (tr, va) = split_dataset(&train, 0.2, seed).unwrap();
    let purifier = Purifier::from_sae(&sae, &unintended).unwrap();
    let plain = Purifier::from_sae(&sae, &UnintendedSet::empty()).unwrap();
    let regularized = train_classifier(&tr, &va, &purifier, &ClfTrainConfig { beta: 3.0, seed, ..Default::default() })
        .unwrap();
    let baseline =
        train_classifier(&tr, &va, &plain, &ClfTrainConfig { beta: 0.0, seed, ..Default::default() }).unwrap();
    let reg_accuracy = evaluate(&regularized.classifier, &test, &purifier, 0.5).unwrap().accuracy;
    let base_accuracy = evaluate(&baseline.classifier, &test, &plain, 0.5).unwrap().accuracy;
    let reg_l1 = purifier.alignment_l1(regularized.classifier.theta.view());
    let base_l1 = purifier.alignment_l1(baseline.classifier.theta.view());
    PipelineOutcome {
        sae,
        explanations,
        verdicts,
        unintended,
        regularized,
        baseline,
        reg_accuracy,
        base_accuracy,
        reg_l1,
        base_l1,
    }
}

/// Writes the pipeline artifacts under their conventional names.
pub fn write_artifacts(out: &PipelineOutcome, dir: &Path) {
    out.sae.write(&dir.join("sae.sae1")).unwrap();
    out.regularized.classifier.write(&dir.join("clf.clf1")).unwrap();
    write_features_jsonl(&dir.join("features.jsonl"), &out.explanations).unwrap();
    write_verdicts_jsonl(&dir.join("verdicts.jsonl"), &out.verdicts).unwrap();
}

pub const ARTIFACTS: [&str; 4] = ["sae.sae1", "clf.clf1", "features.jsonl", "verdicts.jsonl"];

