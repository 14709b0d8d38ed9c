use themewise_core::corpus::{assign_splits, generate_synthetic};
use themewise_core::pipeline::{embed_stage, extract_stage};
use themewise_core::train::train;
use themewise_core::{BackendConfig, Gateway, InContextTemplate, Split, SyntheticSpec, TrainConfig};

fn features(seed: u64) -> Vec<(Split, themewise_core::SessionFeatures)> {
    let mut corpus = generate_synthetic(&SyntheticSpec {
        num_sessions: 40,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let splits = assign_splits(&corpus, Default::default(), seed).unwrap();
    for (t, s) in corpus.iter_mut().zip(splits) {
        t.split = s;
    }
    let gw = Gateway::new(BackendConfig::mock(0, 16)).unwrap();
    let records = extract_stage(&gw, &corpus, InContextTemplate::builtin(), 2);
    assert!(records.iter().all(|r| r.warnings.is_empty()));
    let feats = embed_stage(&gw, &records).unwrap();
    records.iter().map(|r| r.split).zip(feats).collect()
}

#[test]
fn same_seed_same_features_and_checkpoint() {
    let a = features(3);
    let b = features(3);
    assert_eq!(a, b);
    assert_ne!(a, features(4));

    let pick = |s: Split| -> Vec<_> { a.iter().filter(|(x, _)| *x == s).map(|(_, f)| f.clone()).collect() };
    let (tr, dev) = (pick(Split::Train), pick(Split::Dev));
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let x = train(&tr, &dev, &cfg, 16).unwrap();
    let y = train(&tr, &dev, &cfg, 16).unwrap();
    assert_eq!(x.log.len(), 5);
    assert_eq!(x.best_epoch, y.best_epoch);
    assert_eq!(
        x.model.to_checkpoint(cfg.seed, serde_json::json!({})).to_json(),
        y.model.to_checkpoint(cfg.seed, serde_json::json!({})).to_json()
    );
}
