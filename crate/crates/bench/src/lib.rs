//! Fixtures shared by the benchmarks.

use saereg_core::embedding::EmbeddingDataset;
use saereg_core::sae::TopKSae;
use saereg_core::synth::{gen_dictionary_data, PlantedDictionary};

/// Planted-dictionary rows of width `dim` and a freshly initialised SAE.
pub fn fixture(dim: usize, n_features: usize, k: usize, rows: usize) -> (TopKSae<f32>, EmbeddingDataset) {
    let dict = PlantedDictionary::random(dim, 2 * dim, 4, 0).expect("valid dictionary");
    let ds = gen_dictionary_data(&dict, rows, 0.75, 1).expect("valid data");
    let sae = TopKSae::init_kaiming(dim, n_features, k, 2).expect("valid sae");
    (sae, ds)
}
