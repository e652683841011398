//! Benchmark fixtures shared by the criterion targets.

use cemb_core::cemb::SubGroupCondition;
use cemb_core::data::{generate, prepare_samples, LoadOptions, SegSample, SyntheticSpec};
use cemb_core::model::ModelConfig;

/// `n` preprocessed samples of the default heterogeneous spec.
pub fn samples(n: usize, config: &ModelConfig) -> Vec<SegSample> {
    let mut spec = SyntheticSpec::heterogeneous(0);
    spec.samples_per_subgroup = n.div_ceil(spec.m).max(1);
    let (s, m) = generate(&spec).expect("default spec is valid");
    let opts = LoadOptions {
        image_size: config.image_size,
        in_channels: config.in_channels,
        empty_mask: Default::default(),
    };
    let mut out = prepare_samples(s, m, opts).expect("preprocessing succeeds").samples;
    out.truncate(n);
    out
}

pub fn conditions(samples: &[SegSample]) -> Vec<SubGroupCondition> {
    samples.iter().map(|s| s.subgroup).collect()
}
