use mole_core::config::ExperimentConfig;
use mole_core::experiment::{parse_stats_csv, run_experiment, STATS_HEADER};
use mole_core::model::{AdapterMode, ToyTransformer};
use mole_core::train::{evaluate, train};

const BASE: &str = r#"
    [model]
    vocab = 48
    d_model = 16
    d_ff = 32
    layers = 1
    heads = 2
    max_context = 16
    embed_groups = 3
    embed_group_scale = 4.0
    embed_scale = 3.0
    logit_scale = 8.0

    [train]
    mode = "plain-lora"
    rank = 4
    alpha = 8.0
    batch_size = 16
    total_steps = 500
    warmup_steps = 50

    [mixture]
    kind = "stock"
    seed = 0
    domain_seed = 0
    weights = [1.0]

    [report]
    eval_instances = 64
"#;

#[test]
fn plain_lora_learns_a_single_domain() {
    let cfg = ExperimentConfig::from_toml(BASE).unwrap();
    let mix = cfg.build_mixture().unwrap();
    let model = ToyTransformer::new(cfg.model.clone(), cfg.train.adapter_spec()).unwrap();
    let held_out = mix.sample_range(1 << 40, 128).unwrap();
    let before = evaluate(&model, &held_out).unwrap();
    let trained = train(model, &mix, &cfg.train).unwrap();
    let after = evaluate(&trained.model, &held_out).unwrap();
    // the floor is the answer entropy, far below a random base
    let floor = mix.domains[0].0.answer_entropy();
    assert!(after < 0.2 * before, "{before} -> {after}");
    assert!(after < 1.5 * floor, "{after} vs entropy {floor}");
}

#[test]
fn balance_loss_keeps_four_experts_in_use() {
    let mut cfg = ExperimentConfig::from_toml(BASE).unwrap();
    cfg.train.mode = AdapterMode::MoleSparse;
    cfg.train.experts = 4;
    cfg.train.balance_coef = 1e-2;
    *cfg.mixture.weights_mut() = vec![1.0, 1.0];
    let mix = cfg.build_mixture().unwrap();
    let model = ToyTransformer::new(cfg.model.clone(), cfg.train.adapter_spec()).unwrap();
    let trained = train(model, &mix, &cfg.train).unwrap();
    let tail = &trained.metrics[trained.metrics.len() - 50..];
    let mean_load = tail.iter().map(|r| r.max_load[0]).sum::<f64>() / tail.len() as f64;
    assert!(mean_load < 0.5, "mean max load {mean_load}");
}

#[test]
fn experiment_artifacts_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(BASE).unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.train.mode = AdapterMode::MoleSparse;
    cfg.train.experts = 3;
    cfg.train.total_steps = 60;
    cfg.train.warmup_steps = 10;
    *cfg.mixture.weights_mut() = vec![1.0, 1.0, 1.0];
    let art = run_experiment(&cfg).unwrap();
    let metrics = std::fs::read_to_string(&art.metrics).unwrap();
    assert_eq!(metrics.lines().count(), 61);
    let stats = std::fs::read_to_string(&art.routing_stats).unwrap();
    assert_eq!(stats.lines().next(), Some(STATS_HEADER));
    let rows = parse_stats_csv(&stats).unwrap();
    assert_eq!(rows.len(), 3 * 3);
    for d in ["general", "document", "biomedicine"] {
        let sum: f64 = rows.iter().filter(|r| r.domain == d).map(|r| r.mean).sum();
        assert!((sum - 1.0).abs() < 1e-9, "{d}: {sum}");
    }
    assert_eq!(art.report.eval.len(), 3);
}
