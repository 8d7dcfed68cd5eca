mod common;

use common::ratio_after_penalty_training;

#[test]
fn penalty_drives_ratio_to_target() {
    for target in [0.1, 0.25, 0.5] {
        let r = ratio_after_penalty_training(target, 500, 1);
        eprintln!("target {target}: {r}");
        assert!((r - target).abs() <= 0.05, "target {target}: realized {r}");
    }
}

use dyncp::training::{finetune_dyncp, synth_dataset, train_baseline};

#[test]
fn baseline_training_lowers_validation_loss() {
    let mut cfg = common::tiny_train_config(false);
    cfg.optim.max_epochs = 30;
    cfg.optim.patience = 30;
    let ds = synth_dataset(50, 4, 0.5).unwrap();
    let out = train_baseline(&cfg, &ds, 4).unwrap();
    let first = out.history[0].valid_se.unwrap();
    assert!(out.best_metric < first, "{} vs {first}", out.best_metric);
    assert!(out.history.iter().all(|r| r.realized_ratio.is_none()));
}

#[test]
fn full_target_keeps_gates_open() {
    let mut cfg = common::tiny_train_config(false);
    cfg.optim.max_epochs = 4;
    let ds = synth_dataset(24, 5, 0.5).unwrap();
    let base = train_baseline(&cfg, &ds, 5).unwrap();
    let mut g = common::tiny_train_config(true);
    g.loss.target_ratio = 1.0;
    g.optim.max_epochs = 100;
    g.optim.patience = 100;
    let out = finetune_dyncp(&base.weights, &g, &ds, 6).unwrap();
    let last = out.history.iter().rev().find_map(|r| r.realized_ratio).unwrap();
    assert!(last > 0.9, "{last}");
}
