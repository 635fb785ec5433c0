//! Shared fixtures for the benchmarks: the default dataset and model.

use moonlite::attr::GenConfig;
use moonlite::model::{Model, ModelConfig};
use moonlite::{Dataset, Schema};

/// Seed-7 dataset at default size.
pub fn dataset() -> Dataset {
    Dataset::generate(Schema::default_schema(), &GenConfig::default()).expect("default dataset")
}

/// Freshly initialized model at default size for `ds`.
pub fn model(ds: &Dataset) -> Model {
    let (patches, patch_dim) = ds.patch_shape();
    Model::new(ModelConfig {
        vocab_size: ds.vocab.len(),
        patches,
        patch_dim,
        ..ModelConfig::default()
    })
    .expect("default model")
}
