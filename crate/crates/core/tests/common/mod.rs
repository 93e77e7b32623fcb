#![allow(dead_code)]

pub mod grads;
pub mod oracle;

use traumakit::phantom::{generate_studies, PhantomConfig, PhantomStudy};
use traumakit::volumeprep::{prepare_study, PrepParams, PreparedStudy};
use traumakit::LabelSchema;

/// Phantoms prepared with their ground-truth masks.
pub fn oracle_prepared(root_seed: u64, count: usize, schema: &LabelSchema, prep: &PrepParams) -> (Vec<PhantomStudy>, Vec<PreparedStudy>) {
    let studies = generate_studies(root_seed, count, &PhantomConfig::default(), schema).unwrap();
    let prepared = studies
        .iter()
        .map(|s| prepare_study(s, &s.organ_masks, schema, prep).unwrap())
        .collect();
    (studies, prepared)
}
