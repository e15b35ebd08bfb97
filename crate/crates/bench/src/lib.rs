//! Shared fixtures for the criterion benches.

use gt_core::models::ModelSpec;
use gt_core::nn::Activation;
use gt_core::synth::{random_bundle, RandomGraphSpec};
use gt_core::DatasetBundle;

/// Mid-sized random graph used by the engine benches.
pub fn bench_bundle(nodes: usize, edges: usize) -> DatasetBundle {
    random_bundle(&RandomGraphSpec {
        nodes,
        edges,
        feature_dim: 16,
        classes: 4,
        seed: 99,
        symmetric: false,
    })
}

pub fn bench_spec(bundle: &DatasetBundle) -> ModelSpec {
    ModelSpec::gcn(
        vec![bundle.graph.feature_dim(), 16, bundle.class_count],
        Activation::Relu,
        bundle.class_count,
    )
}
