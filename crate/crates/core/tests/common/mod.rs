#![allow(dead_code)]

use std::path::Path;

use aesn::config::TrainConfig;
use aesn::corpus::EntitySpan;
use aesn::synth::{gen_synth, SynthPaths, SynthSpec};
use rand::Rng;

pub const TYPES: [&str; 3] = ["PER", "LOC", "ORG"];

/// A valid BIO sequence built from its spans; the spans are the oracle.
pub fn random_bio<R: Rng>(rng: &mut R, max_len: usize) -> (Vec<String>, Vec<EntitySpan>) {
    let n = rng.gen_range(0..=max_len);
    let mut labels = Vec::with_capacity(n);
    let mut spans = Vec::new();
    while labels.len() < n {
        if rng.gen_bool(0.4) {
            labels.push("O".to_string());
            continue;
        }
        let ty = TYPES[rng.gen_range(0..TYPES.len())];
        let len = rng.gen_range(1..=4).min(n - labels.len());
        let start = labels.len();
        labels.push(format!("B-{ty}"));
        for _ in 1..len {
            labels.push(format!("I-{ty}"));
        }
        spans.push(EntitySpan::new(start, start + len - 1, ty));
    }
    (labels, spans)
}

/// Small synthetic corpus for quick training runs.
pub fn tiny_synth(dir: &Path, train: usize, noise: f64) -> SynthPaths {
    let spec = SynthSpec {
        train,
        dev: 20,
        test: 20,
        noise,
        ..SynthSpec::default()
    };
    gen_synth(&spec, dir).unwrap()
}

pub fn small_config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.encoder.hidden = 16;
    c.encoder.heads = 2;
    c.encoder.layers = 1;
    c.emb_dim = 16;
    c.lr = 1e-3;
    c.batch_size = 8;
    c.epochs = epochs;
    c
}
