//! Shared fixtures for the benchmarks under `benches/`.

use mdt_core::model::{AblationMode, Model, ModelConfig};
use mdt_core::syndata::{vocabulary, DataConfig, Generator};
use mdt_core::train::{encode_samples, Example};
use mdt_core::ParamStore;

/// Synthetic examples with default-sized features.
pub fn examples(n: usize) -> Vec<Example> {
    let generator = Generator::new(DataConfig::default()).expect("default data config is valid");
    let samples = (0..n as u64).map(|id| generator.sample(id)).collect();
    encode_samples(&vocabulary(), samples).expect("templates are in the vocabulary")
}

/// A freshly initialized model of the default shape in `mode`.
pub fn model(mode: AblationMode) -> (Model, ParamStore) {
    let config = ModelConfig {
        vocab_size: vocabulary().len(),
        mode,
        ..ModelConfig::default()
    };
    Model::init(&config, 1).expect("default model config is valid")
}

/// Generated-report-like corpus: each reference paired with the next one.
pub fn report_pairs(n: usize) -> (Vec<String>, Vec<String>) {
    let reports: Vec<String> = examples(n + 1).into_iter().map(|e| e.sample.report).collect();
    (reports[1..].to_vec(), reports[..n].to_vec())
}
