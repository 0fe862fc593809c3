//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line per criterion and exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use saereg_core::classifier::{clf_loss, LogisticClassifier, Purifier};
use saereg_core::embedding::{decode_emb1, encode_emb1, EmbeddingDataset, EMB_HEADER_LEN};
use saereg_core::error::FormatError;
use saereg_core::judge::{identify_unintended, JudgeVerdict, RelevanceLevel, Summary};
use saereg_core::rng::seeded;
use saereg_core::sae::{residual_loss, sae_loss, DeadMask, ReconstructionNorm, TopKSae};
use saereg_core::samplesize::{n_sparse, SampleSizeQuery};

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn run(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let elapsed = t.elapsed();
    let (mut pass, mut detail) = match outcome {
        Ok(c) => (c.pass, c.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let timing = match limit {
        Some(l) => {
            if elapsed >= l {
                pass = false;
                detail.push_str("; too slow");
            }
            format!("{elapsed:.2?} / limit {l:.0?}")
        }
        None => format!("{elapsed:.2?}"),
    };
    println!("{} {name}: {detail} [{timing}]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sample_size() -> Check {
    let n = n_sparse(&SampleSizeQuery::new(0.01, 0.95, 0.1)).unwrap();
    Check::new(n == 38416, format!("n_sparse = {n}"))
}

/// Brute force: sort every feature by (activation desc, index asc) and keep
/// the first K positive ones.
fn oracle_top_k(w: &[Vec<f32>], x: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut all: Vec<(usize, f32)> = w
        .iter()
        .enumerate()
        .map(|(c, row)| (c, row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut top: Vec<(usize, f32)> = all.into_iter().take(k).filter(|&(_, v)| v > 0.0).collect();
    top.sort_by_key(|&(c, _)| c);
    top
}

fn top_k_equivalence() -> Check {
    let mut rng = seeded(11, 0);
    // Eighths in [-2, 2]: every dot product is exact in f32, so any
    // summation order gives the same value and ties are common.
    let dyadic = |rng: &mut ChaCha8Rng| rng.random_range(-16i32..=16) as f32 / 8.0;
    let mut mismatches = 0;
    let mut ties = 0;
    let n = 10_000;
    for _ in 0..n {
        let dim = rng.random_range(1..=32);
        let n_features = rng.random_range(dim..=64);
        let k = rng.random_range(1..=n_features);
        let rows: Vec<Vec<f32>> = (0..n_features)
            .map(|_| (0..dim).map(|_| dyadic(&mut rng)).collect())
            .collect();
        let feats = Array2::from_shape_vec((n_features, dim), rows.concat()).unwrap();
        let sae = TopKSae::from_features(feats, k, 0.0).unwrap();
        let b = rng.random_range(1..=4);
        let xs: Vec<f32> = (0..b * dim).map(|_| dyadic(&mut rng)).collect();
        let batch = ArrayView2::from_shape((b, dim), &xs).unwrap();
        let batched = sae.encode_batch(batch).unwrap();
        for (i, x) in xs.chunks(dim).enumerate() {
            let want = oracle_top_k(&rows, x, k);
            let single = sae.encode(x).unwrap();
            let got: Vec<(usize, f32)> = single.iter().collect();
            if got != want || batched[i] != single {
                mismatches += 1;
            }
            let mut pre: Vec<f32> = rows.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            pre.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if k < pre.len() && pre[k - 1] > 0.0 && pre[k - 1] == pre[k] {
                ties += 1;
            }
        }
    }
    Check::new(
        mismatches == 0,
        format!("{n} instances, {mismatches} mismatches, {ties} rows with a tie at the K boundary"),
    )
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Top-K support and Top-dead_k dead support for every row.
fn supports(sae: &TopKSae<f64>, batch: ArrayView2<'_, f64>, dead: &[bool], dead_k: usize) -> Vec<Vec<usize>> {
    let pre = sae.preacts(batch);
    let mut out = Vec::new();
    for p in pre.rows() {
        for (k, keep) in [(sae.k_active(), None), (dead_k, Some(dead))] {
            let mut c: Vec<(usize, f64)> = p
                .iter()
                .copied()
                .enumerate()
                .filter(|&(i, v)| v > 0.0 && keep.is_none_or(|d| d[i]))
                .collect();
            c.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut ids: Vec<usize> = c.into_iter().take(k).map(|(i, _)| i).collect();
            ids.sort_unstable();
            out.push(ids);
        }
    }
    out
}

/// Central differences over the listed feature rows. `None` when the
/// support moves under any perturbation.
fn sae_fd(
    feats: &Array2<f64>,
    k: usize,
    l1: f64,
    batch: ArrayView2<'_, f64>,
    dead: &[bool],
    dead_k: usize,
    rows: &[usize],
    loss: &dyn Fn(&TopKSae<f64>) -> f64,
) -> Option<Vec<f64>> {
    let base = supports(&TopKSae::from_features(feats.clone(), k, l1).unwrap(), batch, dead, dead_k);
    let mut g = Vec::new();
    for &c in rows {
        for d in 0..feats.ncols() {
            let mut vals = [0.0; 2];
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut f = feats.clone();
                f[[c, d]] += sign * FD_STEP;
                let sae = TopKSae::from_features(f, k, l1).unwrap();
                if supports(&sae, batch, dead, dead_k) != base {
                    return None;
                }
                vals[s] = loss(&sae);
            }
            g.push((vals[0] - vals[1]) / (2.0 * FD_STEP));
        }
    }
    Some(g)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| normal(rng))
}

fn gradient_suite() -> Check {
    let mut rng = seeded(12, 0);
    let want = 100;
    let mut worst = [0.0f64; 3];
    let mut rejected = [0usize; 3];

    let mut accepted = 0;
    while accepted < want {
        let dim = rng.random_range(2..=6);
        let c = rng.random_range(dim.max(4)..=10);
        let k = rng.random_range(1..=3);
        let l1 = rng.random_range(0.0..0.1);
        let norm = if accepted % 2 == 0 { ReconstructionNorm::Squared } else { ReconstructionNorm::Euclidean };
        let feats = random_matrix(&mut rng, c, dim);
        let b = rng.random_range(1..=4);
        let batch = random_matrix(&mut rng, b, dim);
        let sae = TopKSae::from_features(feats.clone(), k, l1).unwrap();
        let analytic = sae_loss(&sae, batch.view(), norm).unwrap().grad;
        let all: Vec<usize> = (0..c).collect();
        let no_dead = vec![false; c];
        let loss = |s: &TopKSae<f64>| sae_loss(s, batch.view(), norm).unwrap().loss;
        match sae_fd(&feats, k, l1, batch.view(), &no_dead, 0, &all, &loss) {
            Some(num) if num.iter().any(|v| v.abs() > 1e-6) => {
                worst[0] = worst[0].max(rel_error(analytic.as_slice().unwrap(), &num));
                accepted += 1;
            }
            _ => rejected[0] += 1,
        }
    }

    let mut accepted = 0;
    let mut alive_grad_nonzero = false;
    while accepted < want {
        let dim = rng.random_range(2..=6);
        let c = rng.random_range(8..=16);
        let k = rng.random_range(1..=2);
        let dead_k = rng.random_range(1..=3);
        let norm = if accepted % 2 == 0 { ReconstructionNorm::Squared } else { ReconstructionNorm::Euclidean };
        let feats = random_matrix(&mut rng, c, dim);
        let b = rng.random_range(1..=3);
        let batch = random_matrix(&mut rng, b, dim);
        let sae = TopKSae::from_features(feats.clone(), k, 0.0).unwrap();
        // Dead on this batch, so the residual does not depend on dead rows.
        let mut dead = vec![true; c];
        for a in sae.encode_batch(batch.view()).unwrap() {
            for i in a.indices {
                dead[i] = false;
            }
        }
        let mask = DeadMask::from_flags(dead.clone());
        if mask.n_dead == 0 {
            rejected[1] += 1;
            continue;
        }
        let analytic = residual_loss(&sae, &mask, dead_k, batch.view(), norm).unwrap().grad;
        for (ci, row) in analytic.rows().into_iter().enumerate() {
            if !dead[ci] && row.iter().any(|&v| v != 0.0) {
                alive_grad_nonzero = true;
            }
        }
        let dead_ids = mask.dead_ids();
        let loss = |s: &TopKSae<f64>| residual_loss(s, &mask, dead_k, batch.view(), norm).unwrap().loss;
        match sae_fd(&feats, k, 0.0, batch.view(), &dead, dead_k, &dead_ids, &loss) {
            Some(num) if num.iter().any(|v| v.abs() > 1e-6) => {
                let ana: Vec<f64> = dead_ids.iter().flat_map(|&i| analytic.row(i).to_vec()).collect();
                worst[1] = worst[1].max(rel_error(&ana, &num));
                accepted += 1;
            }
            _ => rejected[1] += 1,
        }
    }

    let mut accepted = 0;
    while accepted < want {
        let dim = rng.random_range(2..=8);
        let m = rng.random_range(1..=3);
        let n = rng.random_range(1..=16);
        let w_minus = random_matrix(&mut rng, dim, m);
        let batch = random_matrix(&mut rng, n, dim);
        let labels: Vec<Option<u8>> = (0..n).map(|_| Some(rng.random_range(0..=1u8))).collect();
        let wts = (rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
        let mut clf = LogisticClassifier::zeros(dim, rng.random_range(0.0..5.0), &Purifier::identity(dim));
        clf.theta = Array1::from_shape_fn(dim, |_| normal(&mut rng));
        if accepted % 2 == 1 {
            clf.intercept = Some(normal(&mut rng));
        }
        // Kink-free: no alignment entry near zero.
        if clf.theta.dot(&w_minus).iter().any(|a| a.abs() <= 1e-3) {
            rejected[2] += 1;
            continue;
        }
        let out = clf_loss(&clf, batch.view(), &labels, w_minus.view(), wts).unwrap();
        let eval = |c: &LogisticClassifier| clf_loss(c, batch.view(), &labels, w_minus.view(), wts).unwrap().loss;
        let mut num = Vec::new();
        for d in 0..dim {
            let (mut p, mut q) = (clf.clone(), clf.clone());
            p.theta[d] += FD_STEP;
            q.theta[d] -= FD_STEP;
            num.push((eval(&p) - eval(&q)) / (2.0 * FD_STEP));
        }
        let mut ana = out.grad_theta.to_vec();
        if let Some(b) = clf.intercept {
            let (mut p, mut q) = (clf.clone(), clf.clone());
            p.intercept = Some(b + FD_STEP);
            q.intercept = Some(b - FD_STEP);
            num.push((eval(&p) - eval(&q)) / (2.0 * FD_STEP));
            ana.push(out.grad_intercept);
        }
        worst[2] = worst[2].max(rel_error(&ana, &num));
        accepted += 1;
    }

    let pass = worst.iter().all(|&e| e <= FD_TOL) && !alive_grad_nonzero;
    Check::new(
        pass,
        format!(
            "max rel err sae {:.1e}, residual {:.1e}, clf {:.1e} over {want} instances each \
             (rejected {:?}); residual gradient confined to dead rows: {}",
            worst[0], worst[1], worst[2], rejected, !alive_grad_nonzero
        ),
    )
}

fn dictionary_recovery() -> Check {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let score = pool.install(|| common::dictionary_recovery(0));
    Check::new(score >= 0.90, format!("recovery score {score:.4} (need >= 0.90)"))
}

fn residual_direction() -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let o = common::residual_shift(seed, 0.1);
        pass &= o.dead_after < o.dead_before && o.nmse_after < o.nmse_before;
        parts.push(format!(
            "seed {seed}: dead {}->{}, nMSE {:.3}->{:.3}",
            o.dead_before, o.dead_after, o.nmse_before, o.nmse_after
        ));
    }
    Check::new(pass, parts.join("; "))
}

fn self_regularization() -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let o = common::spurious_pipeline(seed);
        let gain = o.reg_accuracy - o.base_accuracy;
        let reduction = 1.0 - o.reg_l1 / o.base_l1;
        pass &= gain >= 0.05 && reduction >= 0.90 && !o.unintended.is_empty();
        parts.push(format!(
            "seed {seed}: acc {:.3}->{:.3}, l1 {:.3}->{:.4} ({:.1}% less), {} unintended",
            o.base_accuracy,
            o.reg_accuracy,
            o.base_l1,
            o.reg_l1,
            100.0 * reduction,
            o.unintended.len()
        ));
    }
    Check::new(pass, parts.join("; "))
}

fn purification_identity() -> Check {
    let mut rng = seeded(13, 0);
    let mut rows = 0;
    let mut changed = 0;
    while rows < 10_000 {
        let dim = rng.random_range(2..=32);
        let m = rng.random_range(1..=4);
        let w = random_matrix(&mut rng, dim, m);
        let p = Purifier::from_matrix(w.clone());
        let mut xs = Vec::new();
        while xs.len() < 100 * dim {
            let mut x: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            match rng.random_range(0..10) {
                0 => x.iter_mut().for_each(|v| *v = 0.0),
                1 => x.iter_mut().for_each(|v| *v = -0.0),
                _ => {}
            }
            let pre = Array1::from(x.clone()).dot(&w);
            if pre.iter().all(|&v| v <= 0.0) {
                xs.extend(x);
            }
        }
        let batch = Array2::from_shape_vec((100, dim), xs).unwrap();
        let out = p.purify_batch(batch.view()).unwrap();
        for (i, (a, b)) in batch.rows().into_iter().zip(out.rows()).enumerate() {
            let single = p.purify(batch.row(i)).unwrap();
            let same = |o: &[f64]| a.iter().zip(o).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same(&b.to_vec()) || !same(&single.to_vec()) {
                changed += 1;
            }
        }
        rows += 100;
    }
    Check::new(changed == 0, format!("{rows} rows, {changed} not bit-identical"))
}

fn random_verdict(rng: &mut ChaCha8Rng, id: usize) -> JudgeVerdict {
    let summary = if rng.random_bool(0.2) { Summary::CannotTell } else { Summary::Text(format!("pattern {id}")) };
    let verified = rng.random_bool(0.7);
    let relevance = rng
        .random_bool(0.8)
        .then(|| RelevanceLevel::ALL[rng.random_range(0..4)]);
    JudgeVerdict {
        feature_id: id,
        summary,
        verified,
        relevance,
        transcript_ids: Vec::new(),
    }
}

fn judge_monotonicity() -> Check {
    let mut rng = seeded(14, 0);
    let mut violations = 0;
    let mut strict = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..=60);
        let mut ids: Vec<usize> = (0..200).collect();
        ids.shuffle(&mut rng);
        let verdicts: Vec<JudgeVerdict> = ids[..n].iter().map(|&id| random_verdict(&mut rng, id)).collect();
        let yes = identify_unintended(&verdicts, RelevanceLevel::Yes).unwrap();
        let probably = identify_unintended(&verdicts, RelevanceLevel::Probably).unwrap();
        if !probably.feature_ids.iter().all(|&id| yes.contains(id)) {
            violations += 1;
        }
        if yes.len() > probably.len() {
            strict += 1;
        }
    }
    Check::new(
        violations == 0,
        format!("1000 lists, {violations} violations, {strict} with a strictly larger Yes-threshold set"),
    )
}

fn determinism() -> Check {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        common::write_artifacts(&common::spurious_pipeline(7), d.path());
    }
    let mut differing = Vec::new();
    for name in common::ARTIFACTS {
        let a = std::fs::read(dirs[0].path().join(name)).unwrap();
        let b = std::fs::read(dirs[1].path().join(name)).unwrap();
        if a != b || a.is_empty() {
            differing.push(name);
        }
    }
    Check::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} byte-identical across two runs", common::ARTIFACTS.join(", "))
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Magic,
    Version,
    Dtype,
    Size,
    Header,
    NonFinite,
}

fn matches(expect: Expect, err: &FormatError) -> bool {
    use FormatError::*;
    match expect {
        Expect::Magic => matches!(err, BadMagic { .. }),
        Expect::Version => matches!(err, UnsupportedVersion(_)),
        Expect::Dtype => matches!(err, UnsupportedDtype(_)),
        Expect::Size => matches!(err, Truncated { .. } | TrailingBytes(_) | SizeOverflow),
        Expect::Header => matches!(err, InvalidHeader(_)),
        Expect::NonFinite => matches!(err, NonFinite(_)),
    }
}

fn set_u32(b: &mut [u8], at: usize, v: u32) {
    b[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn format_fuzzing() -> Check {
    let mut rng = seeded(15, 0);
    let mut panics = 0;
    let mut accepted = 0;
    let mut wrong_kind = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..=20usize);
        let dim = rng.random_range(1..=16usize);
        let values: Vec<f32> = (0..n * dim).map(|_| normal(&mut rng) as f32).collect();
        let mut bytes = encode_emb1(&EmbeddingDataset::unlabeled(dim, values).unwrap()).unwrap();
        let expect = match i % 8 {
            0 => {
                bytes.truncate(rng.random_range(0..bytes.len()));
                Expect::Size
            }
            1 => {
                let extra = rng.random_range(1..=16);
                bytes.extend((0..extra).map(|_| rng.random::<u8>()));
                Expect::Size
            }
            2 => {
                let at = rng.random_range(0..4);
                bytes[at] = bytes[at].wrapping_add(rng.random_range(1..=255));
                Expect::Magic
            }
            3 => {
                set_u32(&mut bytes, 4, rng.random_range(2..=u32::MAX));
                Expect::Version
            }
            4 => {
                set_u32(&mut bytes, 20, rng.random_range(1..=u32::MAX));
                Expect::Dtype
            }
            5 => {
                let mut rows = rng.random::<u64>() >> rng.random_range(0..64);
                if rows == n as u64 {
                    rows += 1;
                }
                bytes[8..16].copy_from_slice(&rows.to_le_bytes());
                Expect::Size
            }
            6 => {
                let new_dim = rng.random_range(0..=64u32);
                if new_dim as usize == dim {
                    set_u32(&mut bytes, 16, new_dim + 1);
                } else {
                    set_u32(&mut bytes, 16, new_dim);
                }
                if new_dim == 0 {
                    Expect::Header
                } else {
                    Expect::Size
                }
            }
            _ => {
                let at = EMB_HEADER_LEN + 4 * rng.random_range(0..n * dim);
                let bad = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY, f32::from_bits(0x7fc0_1234)];
                bytes[at..at + 4].copy_from_slice(&bad[rng.random_range(0..bad.len())].to_le_bytes());
                Expect::NonFinite
            }
        };
        match catch_unwind(|| decode_emb1(&bytes)) {
            Err(_) => panics += 1,
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(e)) => {
                if !matches(expect, &e) {
                    eprintln!("mutation {i}: expected {expect:?}, got {e}");
                    wrong_kind += 1;
                }
            }
        }
    }
    Check::new(
        panics == 0 && accepted == 0 && wrong_kind == 0,
        format!("1000 mutations: {panics} panics, {accepted} accepted, {wrong_kind} unexpected error kinds"),
    )
}

fn main() -> ExitCode {
    // Keep panic messages from interleaving with the report.
    std::panic::set_hook(Box::new(|_| {}));
    let secs = Duration::from_secs;
    let results = [
        run("sample_size_worked_example", Some(Duration::from_millis(1)), sample_size),
        run("top_k_encoder_equivalence", Some(secs(10)), top_k_equivalence),
        run("gradient_suite", Some(secs(30)), gradient_suite),
        run("dictionary_recovery", Some(secs(60)), dictionary_recovery),
        run("residual_finetune_direction", Some(secs(120)), residual_direction),
        run("self_regularization_end_to_end", Some(secs(120)), self_regularization),
        run("purification_identity", None, purification_identity),
        run("judge_threshold_monotonicity", None, judge_monotonicity),
        run("determinism", None, determinism),
        run("format_fuzzing", None, format_fuzzing),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
