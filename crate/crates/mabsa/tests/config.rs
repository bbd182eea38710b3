use std::fs;

use mabsa::config::{Preset, RunConfig};

fn set(pairs: &[&str]) -> Vec<String> {
    pairs.iter().map(|s| s.to_string()).collect()
}

#[test]
fn defaults_are_the_desk_preset() {
    let c = RunConfig::resolve(None, &[]).unwrap();
    assert_eq!(c, RunConfig::preset(Preset::Desk));
    assert_eq!(c.model.vocab_size, 0);
    assert_eq!(c.train.seed, c.seed);
    assert_eq!(c.synth.seed, c.seed);
}

#[test]
fn full_preset_keeps_the_long_schedule() {
    let c = RunConfig::resolve(None, &set(&["preset=full"])).unwrap();
    assert_eq!(c.train.learning_rate, 5e-5);
    assert_eq!(c.train.pretrain_epochs, 40);
    assert_eq!(c.train.finetune_epochs, 35);
    assert_eq!((c.train.pretrain_batch, c.train.finetune_batch), (64, 16));
    assert_eq!(c.model.hidden, 768);
}

#[test]
fn file_then_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, r#"{"train.learning_rate": 0.01, "model.hidden": 64, "seed": 4, "train": {"lambdas.mlm": 0.5}}"#)
        .unwrap();
    let c = RunConfig::resolve(Some(&p), &set(&["model.hidden=16", "train.tasks=[\"mlm\",\"msp\"]"])).unwrap();
    assert_eq!(c.train.learning_rate, 0.01);
    assert_eq!(c.model.hidden, 16);
    assert_eq!(c.train.lambdas.mlm, 0.5);
    assert_eq!((c.seed, c.train.seed, c.synth.seed), (4, 4, 4));
    assert_eq!(c.train.tasks.len(), 2);
}

#[test]
fn bad_keys_and_values_are_usage_errors() {
    for bad in [
        "model.hiden=3",
        "model.hidden=1.5",
        "train.learning_rate=fast",
        "train.seed=3",
        "seed=-1",
        "preset=huge",
        "train.tasks=[\"nope\"]",
        "train.pretrain_epochs=0",
        "synth.examples=0",
        "novalue",
    ] {
        let e = RunConfig::resolve(None, &set(&[bad])).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad}: {e}");
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.json");
    fs::write(&p, "[1,2]").unwrap();
    assert_eq!(RunConfig::resolve(Some(&p), &[]).unwrap_err().exit_code(), 2);
    assert_eq!(RunConfig::resolve(Some(&dir.path().join("none.json")), &[]).unwrap_err().exit_code(), 2);
}

#[test]
fn persisted_config_resolves_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig::resolve(None, &set(&["seed=9", "train.lambdas.aog=0", "data.train_size=16", "preset=full"]))
        .unwrap();
    c.persist(dir.path()).unwrap();
    let back = RunConfig::resolve(Some(&dir.path().join("config.json")), &[]).unwrap();
    assert_eq!(back, c);
    let text = fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert!(text.contains("\"train.learning_rate\"") && !text.contains("\"train.seed\""));
}

#[test]
fn data_shaped_model_fields_are_inferred() {
    let c = RunConfig::resolve(None, &set(&["model.classes=5"])).unwrap();
    let m = c.model_for(100, 36, 8, 32);
    assert_eq!((m.vocab_size, m.regions, m.classes, m.feature_dim), (100, 36, 5, 32));
}
