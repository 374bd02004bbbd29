//! Shared fixtures for the benchmarks.

use densebam::data::{generate, RasterConfig, Sample, SynthConfig, Vocabulary};
use densebam::model::{Model, ModelConfig};

/// The default desk model and `count` synthetic samples of up to `max_len` tokens.
pub fn desk_fixture(count: usize, max_len: usize) -> (Model, Vec<Sample>) {
    let vocab = Vocabulary::synthetic();
    let cfg = SynthConfig {
        count,
        max_len,
        ..SynthConfig::default()
    };
    let samples = generate(1, &cfg, &RasterConfig::default(), &vocab).expect("synthetic data");
    let model = Model::new(&ModelConfig::default(), vocab, 1).expect("desk model");
    (model, samples)
}
