//! Synthetic embedding generators with known ground truth: planted sparse
//! dictionaries and label/shortcut scenarios.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingDataset, SpanMeta};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::seeded;
use crate::sae::TopKSae;

/// Noise added to every dictionary row.
pub const DICTIONARY_NOISE_STD: f64 = 0.01;

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDictionary {
    /// `dim x n_atoms`, unit-norm columns.
    pub atoms: Array2<f64>,
    pub k_true: usize,
    pub seed: u64,
}

impl PlantedDictionary {
    pub fn random(dim: usize, n_atoms: usize, k_true: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_atoms == 0 || k_true > n_atoms {
            return Err(Error::InvalidConfig(format!(
                "need dim >= 1, n_atoms >= 1 and k_true <= n_atoms (got {dim}, {n_atoms}, {k_true})"
            )));
        }
        let mut rng = seeded(seed, 0);
        let mut atoms = Array2::zeros((dim, n_atoms));
        for c in 0..n_atoms {
            atoms.column_mut(c).assign(&unit_gaussian(&mut rng, dim));
        }
        Ok(Self { atoms, k_true, seed })
    }

    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    /// A copy with `n_replace` randomly chosen atoms redrawn.
    pub fn with_replaced(&self, n_replace: usize, seed: u64) -> Result<(Self, Vec<usize>)> {
        if n_replace > self.n_atoms() {
            return Err(Error::InvalidConfig(format!(
                "cannot replace {n_replace} of {} atoms",
                self.n_atoms()
            )));
        }
        let mut rng = seeded(seed, 1);
        let mut ids = sample(&mut rng, self.n_atoms(), n_replace).into_vec();
        ids.sort_unstable();
        let mut out = self.clone();
        out.seed = seed;
        for &c in &ids {
            out.atoms.column_mut(c).assign(&unit_gaussian(&mut rng, self.dim()));
        }
        Ok((out, ids))
    }
}

/// Active atoms and coefficients of one generated row.
pub type Code = Vec<(usize, f64)>;

/// Rows `sum_j coef_j * atom_j + noise` with up to `k_true` atoms each: `k_true`
/// distinct atoms are drawn and each is kept with probability
/// `activation_prob`; coefficients are uniform on [0.5, 1.5].
pub fn gen_dictionary_data_with_codes(
    dict: &PlantedDictionary,
    n: usize,
    activation_prob: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, Vec<Code>)> {
    if !(activation_prob > 0.0 && activation_prob < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "activation probability {activation_prob} outside (0, 1)"
        )));
    }
    let dim = dict.dim();
    let mut rng = seeded(seed, 10);
    let noise = Normal::new(0.0, DICTIONARY_NOISE_STD).expect("valid std");
    let mut vectors = Vec::with_capacity(n * dim);
    let mut codes = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        let mut chosen = sample(&mut rng, dict.n_atoms(), dict.k_true).into_vec();
        chosen.sort_unstable();
        let mut code = Code::new();
        for c in chosen {
            if rng.random_bool(activation_prob) {
                code.push((c, rng.random_range(0.5..1.5)));
            }
        }
        let mut x: Array1<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
        for &(c, a) in &code {
            x.scaled_add(a, &dict.atoms.column(c));
        }
        vectors.extend(x.iter().map(|&v| v as f32));
        let ids: Vec<String> = code.iter().map(|(c, _)| c.to_string()).collect();
        meta.push(SpanMeta::new(
            i as u64,
            format!("dict-{i}"),
            format!("atoms:{}", ids.join(",")),
            1 + code.len() as u32,
        ));
        codes.push(code);
    }
    let ds = EmbeddingDataset::new(dim, vectors, vec![None; n], meta)?;
    Ok((ds, codes))
}

pub fn gen_dictionary_data(
    dict: &PlantedDictionary,
    n: usize,
    activation_prob: f64,
    seed: u64,
) -> Result<EmbeddingDataset> {
    Ok(gen_dictionary_data_with_codes(dict, n, activation_prob, seed)?.0)
}

/// Mean over planted atoms of the best absolute cosine similarity with any
/// learned feature.
pub fn dictionary_recovery_score<F: Real>(sae: &TopKSae<F>, dict: &PlantedDictionary) -> Result<f64> {
    if sae.dim() != dict.dim() {
        return Err(Error::DimensionMismatch {
            expected: dict.dim(),
            actual: sae.dim(),
        });
    }
    let feats: Vec<(Array1<f64>, f64)> = sae
        .features()
        .rows()
        .into_iter()
        .map(|r| {
            let v: Array1<f64> = r.iter().map(|x| x.as_f64()).collect();
            let n = v.dot(&v).sqrt();
            (v, n)
        })
        .collect();
    let mut total = 0.0;
    for atom in dict.atoms.columns() {
        let best = feats
            .iter()
            .filter(|(_, n)| *n > 0.0)
            .map(|(v, n)| (atom.dot(v) / n).abs())
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / dict.n_atoms() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousScenario {
    pub signal_dir: Vec<f64>,
    pub spurious_dir: Vec<f64>,
    pub train_correlation: f64,
    pub test_correlation: f64,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SpuriousScenario {
    /// Signal along `e0`, shortcut along `e1`, with the default strengths.
    pub fn axis_aligned(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidConfig("dim must be at least 2".into()));
        }
        let mut signal = vec![0.0; dim];
        let mut spurious = vec![0.0; dim];
        signal[0] = 1.0;
        spurious[1] = 1.0;
        Ok(Self::with_dirs(signal, spurious, seed))
    }

    /// Random orthonormal signal/shortcut pair.
    pub fn random_orthogonal(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidConfig("dim must be at least 2".into()));
        }
        let mut rng = seeded(seed, 20);
        let a = unit_gaussian(&mut rng, dim);
        let mut b = unit_gaussian(&mut rng, dim);
        loop {
            let proj = b.dot(&a);
            b.scaled_add(-proj, &a);
            let n = b.dot(&b).sqrt();
            if n > 1e-6 {
                b /= n;
                break;
            }
            b = unit_gaussian(&mut rng, dim);
        }
        Ok(Self::with_dirs(a.to_vec(), b.to_vec(), seed))
    }

    fn with_dirs(signal_dir: Vec<f64>, spurious_dir: Vec<f64>, seed: u64) -> Self {
        Self {
            signal_dir,
            spurious_dir,
            train_correlation: 0.95,
            test_correlation: 0.5,
            noise_std: 0.3,
            n_train: 2000,
            n_test: 2000,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.signal_dir.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d < 2 || self.spurious_dir.len() != d {
            return Err(Error::InvalidConfig("directions must share a dimension >= 2".into()));
        }
        let dot: f64 = self.signal_dir.iter().zip(&self.spurious_dir).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if dot.abs() >= 1e-6 || (norm(&self.signal_dir) - 1.0).abs() > 1e-6 || (norm(&self.spurious_dir) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig("directions must be orthonormal".into()));
        }
        for c in [self.train_correlation, self.test_correlation] {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidConfig(format!("correlation {c} outside [0, 1]")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

fn span_text(label_sign: Option<f64>, spurious_sign: Option<f64>) -> String {
    let mut tokens = Vec::new();
    match label_sign {
        Some(s) if s > 0.0 => tokens.push("topic_pos"),
        Some(_) => tokens.push("topic_neg"),
        None => {}
    }
    match spurious_sign {
        Some(s) if s > 0.0 => tokens.push("marker_a"),
        Some(_) => tokens.push("marker_b"),
        None => {}
    }
    if tokens.is_empty() {
        tokens.push("background");
    }
    tokens.join(" ")
}

fn spurious_split(sc: &SpuriousScenario, n: usize, correlation: f64, stream: u64, prefix: &str) -> Result<EmbeddingDataset> {
    let dim = sc.dim();
    let signal = Array1::from(sc.signal_dir.clone());
    let spurious = Array1::from(sc.spurious_dir.clone());
    for attempt in 0u64.. {
        let mut rng = seeded(sc.seed, stream * 1_000 + attempt);
        let mut vectors = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        let mut meta = Vec::with_capacity(n);
        for i in 0..n {
            let y = rng.random_bool(0.5) as u8;
            let t = if y == 1 { 1.0 } else { -1.0 };
            let aligned = rng.random_bool(correlation);
            let s = if aligned { t } else { -t };
            let mut x = &signal * t + &spurious * s;
            if sc.noise_std > 0.0 {
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += sc.noise_std * z;
                }
            }
            vectors.extend(x.iter().map(|&v| v as f32));
            labels.push(Some(y));
            let tag = if aligned { "SPUR" } else { "CLEAN" };
            meta.push(SpanMeta::new(
                i as u64,
                format!("{prefix}-{i}"),
                format!("{} {tag}", span_text(Some(t), Some(s))),
                3,
            ));
        }
        let both = labels.contains(&Some(0)) && labels.contains(&Some(1));
        if both || n < 2 {
            return EmbeddingDataset::new(dim, vectors, labels, meta);
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// Labelled train/test sets where a shortcut direction agrees with the label
/// sign on a `*_correlation` fraction of rows. Each split is redrawn until
/// both classes are present.
pub fn gen_spurious_data(sc: &SpuriousScenario) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    sc.validate()?;
    let train = spurious_split(sc, sc.n_train, sc.train_correlation, 1, "train")?;
    let test = spurious_split(sc, sc.n_test, sc.test_correlation, 2, "test")?;
    Ok((train, test))
}

/// Unlabelled corpus over the same space in which the task direction and the
/// shortcut direction each appear independently (present with probability
/// 1/2, random sign). Used to learn and explain features without the
/// correlation baked into the task data.
pub fn gen_probe_corpus(sc: &SpuriousScenario, n: usize, noise_std: f64, seed: u64) -> Result<EmbeddingDataset> {
    sc.validate()?;
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig("noise_std must be non-negative".into()));
    }
    let dim = sc.dim();
    let signal = Array1::from(sc.signal_dir.clone());
    let spurious = Array1::from(sc.spurious_dir.clone());
    let mut rng = seeded(seed, 30);
    let mut vectors = Vec::with_capacity(n * dim);
    let mut meta = Vec::with_capacity(n);
    for i in 0..n {
        let draw = |rng: &mut ChaCha8Rng| {
            rng.random_bool(0.5)
                .then(|| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.5..1.5))
        };
        let t = draw(&mut rng);
        let s = draw(&mut rng);
        let mut x = Array1::<f64>::zeros(dim);
        if let Some(t) = t {
            x.scaled_add(t, &signal);
        }
        if let Some(s) = s {
            x.scaled_add(s, &spurious);
        }
        for v in x.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise_std * z;
        }
        vectors.extend(x.iter().map(|&v| v as f32));
        let text = span_text(t, s);
        let tokens = text.split(' ').count() as u32;
        meta.push(SpanMeta::new(i as u64, format!("probe-{i}"), text, tokens));
    }
    EmbeddingDataset::new(dim, vectors, vec![None; n], meta)
}

/// Writes scenario parameters as pretty JSON.
pub fn write_manifest<T: Serialize>(path: &Path, manifest: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atoms_are_unit_norm() {
        let d = PlantedDictionary::random(32, 64, 4, 1).unwrap();
        for c in d.atoms.columns() {
            assert!((c.dot(&c).sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(PlantedDictionary::random(4, 3, 4, 0).is_err());
    }

    #[test]
    fn zero_atoms_is_pure_noise() {
        let d = PlantedDictionary::random(64, 8, 0, 2).unwrap();
        let ds = gen_dictionary_data(&d, 200, 0.5, 3).unwrap();
        let mean_norm: f64 = ds
            .rows()
            .map(|r| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / 200.0;
        assert!((mean_norm - 0.01 * 8.0).abs() < 0.01, "{mean_norm}");
        assert!(ds.meta().iter().all(|m| m.text == "atoms:"));
    }

    #[test]
    fn codes_reconstruct_rows() {
        let d = PlantedDictionary::random(16, 20, 3, 4).unwrap();
        let (ds, codes) = gen_dictionary_data_with_codes(&d, 300, 0.7, 5).unwrap();
        for (row, code) in ds.rows().zip(&codes) {
            let mut r: Array1<f64> = row.iter().map(|&v| v as f64).collect();
            for &(c, a) in code {
                assert!((0.5..1.5).contains(&a));
                r.scaled_add(-a, &d.atoms.column(c));
            }
            // 6 standard deviations of the per-row noise norm, plus f32 rounding
            assert!(r.dot(&r).sqrt() < 0.01 * (16f64.sqrt() + 6.0), "{}", r.dot(&r).sqrt());
        }
        let again = gen_dictionary_data(&d, 300, 0.7, 5).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn recovery_score_examples() {
        let d = PlantedDictionary::random(8, 5, 2, 6).unwrap();
        let extra = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let mut w = ndarray::concatenate![ndarray::Axis(1), d.atoms.view(), extra.view()];
        let exact = TopKSae::<f64>::new(w.clone(), 2, 0.0).unwrap();
        assert!((dictionary_recovery_score(&exact, &d).unwrap() - 1.0).abs() < 1e-6);
        // permute and negate
        w.column_mut(0).mapv_inplace(|v| -v);
        let cols: Vec<usize> = (0..8).rev().collect();
        let permuted = TopKSae::<f64>::new(w.select(ndarray::Axis(1), &cols), 2, 0.0).unwrap();
        assert!((dictionary_recovery_score(&permuted, &d).unwrap() - 1.0).abs() < 1e-6);

        let big = PlantedDictionary::random(32, 64, 4, 7).unwrap();
        let random = TopKSae::<f64>::init_kaiming(32, 64, 4, 8).unwrap();
        assert!(dictionary_recovery_score(&random, &big).unwrap() < 0.5);
        let wrong = TopKSae::<f64>::init_kaiming(16, 64, 4, 8).unwrap();
        assert!(dictionary_recovery_score(&wrong, &big).is_err());
    }

    #[test]
    fn full_correlation_matches_label() {
        let mut sc = SpuriousScenario::axis_aligned(8, 9).unwrap();
        sc.train_correlation = 1.0;
        sc.noise_std = 0.0;
        sc.n_train = 500;
        sc.n_test = 20;
        let (train, test) = gen_spurious_data(&sc).unwrap();
        assert_eq!(train.n_rows(), 500);
        assert_eq!(test.n_rows(), 20);
        let labels = train.require_labels().unwrap();
        for ((row, m), &y) in train.rows().zip(train.meta()).zip(&labels) {
            assert!(m.text.ends_with("SPUR"));
            assert_eq!(row[1], if y == 1 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn noiseless_signal_probe_is_perfect() {
        let mut sc = SpuriousScenario::random_orthogonal(16, 10).unwrap();
        sc.noise_std = 0.0;
        let (_, test) = gen_spurious_data(&sc).unwrap();
        let labels = test.require_labels().unwrap();
        for (row, &y) in test.rows().zip(&labels) {
            let proj: f64 = row.iter().zip(&sc.signal_dir).map(|(&x, &s)| x as f64 * s).sum();
            assert_eq!(proj > 0.0, y == 1);
        }
    }

    #[test]
    fn half_correlation_is_independent() {
        let mut sc = SpuriousScenario::axis_aligned(4, 11).unwrap();
        sc.n_test = 10_000;
        sc.n_train = 16;
        let (train, test) = gen_spurious_data(&sc).unwrap();
        let l = train.require_labels().unwrap();
        assert!(l.contains(&0) && l.contains(&1));
        // 2x2 contingency of label vs shortcut sign, chi-square with 1 dof
        let labels = test.require_labels().unwrap();
        let mut table = [[0f64; 2]; 2];
        for (row, &y) in test.rows().zip(&labels) {
            table[y as usize][(row[1] > 0.0) as usize] += 1.0;
        }
        let n = 10_000.0;
        let mut chi2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let row: f64 = table[i].iter().sum();
                let col = table[0][j] + table[1][j];
                let e = row * col / n;
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
        // 0.99 quantile of chi-square with one degree of freedom
        assert!(chi2 < 6.635, "{chi2}");
    }

    #[test]
    fn probe_corpus_tokens() {
        let sc = SpuriousScenario::axis_aligned(8, 12).unwrap();
        let ds = gen_probe_corpus(&sc, 400, 0.05, 13).unwrap();
        for (row, m) in ds.rows().zip(ds.meta()) {
            assert_eq!(m.text.contains("topic_pos"), row[0] > 0.25);
            assert_eq!(m.text.contains("marker_b"), row[1] < -0.25);
        }
        assert_eq!(gen_probe_corpus(&sc, 400, 0.05, 13).unwrap(), ds);
    }
}
