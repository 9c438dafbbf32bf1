//! Small end-to-end runs through the library API.

use convsearch::dialogue::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec};
use convsearch::train::eval::evaluate;
use convsearch::train::{run_training, Checkpoint, RunConfig, Workspace};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic.conversations = 12;
    cfg.train.total_steps = 20;
    cfg.train.checkpoint_interval = 10;
    cfg.train.collapse_window = 10;
    cfg
}

#[test]
fn synthetic_data_is_seeded_and_consistent() {
    let spec = SyntheticSpec {
        conversations: 20,
        ..SyntheticSpec::default()
    };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.conversations, b.conversations);
    assert_eq!(a.corpus, b.corpus);
    let ws_index = convsearch::corpus::Index::build(a.corpus.clone()).unwrap();
    assert!(a.qrels.missing_from(&ws_index).is_empty());
    for c in &a.conversations {
        for t in &c.turns {
            assert!(!t.question.trim().is_empty());
            assert!(t.rewrite.is_some());
        }
    }
}

#[test]
fn dataset_round_trips_through_jsonl() {
    let data = generate_synthetic(&SyntheticSpec {
        conversations: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&path, &data.conversations).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data.conversations);
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small_config();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn training_writes_checkpoints_that_reload() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.train.output_dir = Some(dir.path().to_path_buf());
    let ws = Workspace::load(&cfg.data).unwrap();
    let out = run_training(&cfg, &ws).unwrap();
    assert_eq!(out.diagnostics.len(), 20);
    assert_eq!(out.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), [10, 20]);
    let loaded = Checkpoint::load(dir.path().join(Checkpoint::file_name(20))).unwrap();
    assert_eq!(loaded, out.final_checkpoint);
    let diag = std::fs::read_to_string(dir.path().join("diagnostics.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 20);
    assert!(dir.path().join("selection.json").exists());

    let report = evaluate(&loaded, &ws, &ws.conversations, &cfg.env).unwrap();
    assert_eq!(report.per_turn.len(), ws.turns().len());
    assert!((0.0..=1.0).contains(&report.aggregates.mean_answer_f1));
}

#[test]
fn training_is_deterministic_in_memory() {
    let cfg = small_config();
    let ws = Workspace::load(&cfg.data).unwrap();
    let a = run_training(&cfg, &ws).unwrap();
    let b = run_training(&cfg, &ws).unwrap();
    assert_eq!(a.final_checkpoint, b.final_checkpoint);
    assert_eq!(a.diagnostics, b.diagnostics);
}
