mod common;

use std::fs;

use aesn::checkpoint;
use aesn::config::TrainConfig;
use aesn::data::load_dataset;
use aesn::ensemble::Fusion;
use aesn::train::{evaluate, format_log, inspect, predict, train};

const TOY: &str = "\
Alice NNP B-PER
visited VBD O
Paris NNP B-LOC

Bob NNP B-PER
left VBD O
Acme NNP B-ORG
Corp NNP I-ORG
";

#[test]
fn toy_loss_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.conll");
    fs::write(&path, TOY).unwrap();
    let data = load_dataset(&path, None, None, &[]).unwrap();
    let mut c = TrainConfig::default().baseline();
    c.encoder.hidden = 16;
    c.encoder.heads = 2;
    c.epochs = 5;
    // dropout noise would swamp five single-step epochs
    c.encoder.dropout = 0.0;
    assert_eq!(c.fusion, Fusion::None);
    let out = train(&c, &data, &data).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    let golden: Vec<String> = out.log.iter().map(|e| format!("{:.6}", e.loss)).collect();
    assert_eq!(golden, GOLDEN_TOY_LOSSES);
}

// recorded from the first run of `toy_loss_decreases`
const GOLDEN_TOY_LOSSES: [&str; 5] = ["10.169202", "10.021038", "9.876982", "9.736974", "9.601718"];

#[test]
fn identical_runs_identical_logs_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::tiny_synth(dir.path(), 30, 0.1);
    let tr = load_dataset(&paths.train, None, None, &TrainConfig::default().syntax).unwrap();
    let dev = load_dataset(&paths.dev, None, None, &TrainConfig::default().syntax).unwrap();
    let c = common::small_config(3);
    let a = train(&c, &tr, &dev).unwrap();
    let b = train(&c, &tr, &dev).unwrap();
    assert_eq!(format_log(&a.log), format_log(&b.log));
    let bytes = checkpoint::to_bytes(&a.model).unwrap();
    assert_eq!(bytes, checkpoint::to_bytes(&b.model).unwrap());

    let file = dir.path().join("m.aesn");
    checkpoint::save(&a.model, &file).unwrap();
    let loaded = checkpoint::load(&file).unwrap();
    assert_eq!(checkpoint::to_bytes(&loaded).unwrap(), bytes);
    assert_eq!(evaluate(&loaded, &dev).unwrap(), evaluate(&a.model, &dev).unwrap());

    let mut other = c.clone();
    other.seed += 1;
    let d = train(&other, &tr, &dev).unwrap();
    assert_ne!(checkpoint::to_bytes(&d.model).unwrap(), bytes);
}

#[test]
fn predictions_score_like_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let paths = common::tiny_synth(dir.path(), 30, 0.0);
    let syntax = TrainConfig::default().syntax;
    let tr = load_dataset(&paths.train, None, None, &syntax).unwrap();
    let dev = load_dataset(&paths.dev, None, None, &syntax).unwrap();
    let out = train(&common::small_config(2), &tr, &dev).unwrap();

    let mut buf = Vec::new();
    predict(&out.model, &dev, &mut buf).unwrap();
    let pred: Vec<Vec<String>> = String::from_utf8(buf)
        .unwrap()
        .split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .map(|b| b.lines().map(|l| l.split_whitespace().last().unwrap().to_string()).collect())
        .collect();
    let gold: Vec<Vec<String>> = dev.sentences().iter().map(|s| s.labels.clone()).collect();
    let report = aesn::eval::EvalReport::score(&gold, &pred).unwrap();
    assert_eq!(report, evaluate(&out.model, &dev).unwrap());

    let rows = inspect(&out.model, &dev, Some(1), None).unwrap();
    assert_eq!(rows.len(), dev.sentences()[1].len());
    for r in &rows {
        assert_eq!(r.memory.len(), 3);
        for (_, keys, p) in &r.memory {
            assert_eq!(keys.len(), p.len());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if p.len() == 1 {
                assert_eq!(p[0], 1.0);
            }
        }
        let a = r.attention.as_ref().unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.gate_norm.unwrap() > 0.0);
    }
    assert!(inspect(&out.model, &dev, Some(999), None).is_err());
}

#[test]
fn label_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.conll");
    fs::write(&path, TOY).unwrap();
    let other = dir.path().join("other.conll");
    fs::write(&other, "Zed NNP B-GPE\n").unwrap();
    let data = load_dataset(&path, None, None, &[]).unwrap();
    let odd = load_dataset(&other, None, None, &[]).unwrap();
    let mut c = TrainConfig::default().baseline();
    c.epochs = 1;
    assert!(train(&c, &data, &odd).is_err());
}
