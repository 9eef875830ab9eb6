use super::*;
use crate::dag::{fixtures::diamond, write_dag};

fn diamond_config(dir: &Path) -> ExperimentConfig {
    let path = dir.join("diamond.dag");
    std::fs::write(&path, write_dag(&diamond())).unwrap();
    ExperimentConfig::from_toml(&format!(
        r#"
        [env]
        type = "dag_file"
        path = "{}"

        [objective]
        kind = "tb"

        [loss]
        name = "quadratic"

        [model]
        type = "tabular"

        [training]
        trajectories = 32000
        lr = 0.05
        seed = 3

        [eval]
        interval = 250
        "#,
        path.display()
    ))
    .unwrap()
}

fn small_grid(seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        r#"
        name = "grid"
        [env]
        type = "hypergrid"
        dims = 2
        side = 4
        [objective]
        kind = "db"
        backward = "learned"
        [loss]
        name = "linex1"
        [model]
        type = "mlp"
        hidden_layers = 1
        hidden_width = 16
        [sampler]
        mode = "epsilon_noisy"
        epsilon = 0.05
        [training]
        trajectories = 640
        seed = {seed}
        [eval]
        interval = 10
        spearman = "mc"
        test_set_size = 6
        top_k = 3
        "#
    ))
    .unwrap()
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small_grid(7);
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_toml().unwrap(), text);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = small_grid(1).to_toml().unwrap().replace("batch_size", "batchsize");
    assert!(matches!(ExperimentConfig::from_toml(&text), Err(RunError::Config(_))));
    let text = small_grid(1).to_toml().unwrap().replace("[training]", "[training]\nepsilon = 0.1");
    assert!(ExperimentConfig::from_toml(&text).is_err());
}

#[test]
fn seed_is_mandatory_and_names_must_resolve() {
    let text = small_grid(1).to_toml().unwrap().replace("seed = 1\n", "");
    assert!(ExperimentConfig::from_toml(&text).is_err());
    let text = small_grid(1).to_toml().unwrap().replace("\"linex1\"", "\"linex2\"");
    assert!(matches!(ExperimentConfig::from_toml(&text), Err(RunError::Loss(_))));
}

#[test]
fn hash_tracks_semantic_fields_only() {
    let a = small_grid(1);
    let mut renamed = a.clone();
    renamed.name = "other".into();
    assert_eq!(a.hash().unwrap(), renamed.hash().unwrap());
    assert_ne!(a.hash().unwrap(), a.with_seed(2).hash().unwrap());
    let mut lr = a.clone();
    lr.training.lr *= 2.0;
    assert_ne!(a.hash().unwrap(), lr.hash().unwrap());
    let mut defaulted = a.clone();
    defaulted.eval.window = Some(64);
    assert_ne!(a.hash().unwrap(), defaulted.hash().unwrap());
}

#[test]
fn tabular_tb_on_diamond_converges() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&diamond_config(dir.path())).unwrap();
    let l1 = out.summary.final_report.l1_exact.unwrap();
    assert!(l1 < 1e-3, "l1 = {l1}");
    assert_eq!(out.summary.steps, 2000);
    assert_eq!(out.summary.trajectories, 32000);
}

#[test]
fn runs_are_deterministic() {
    let a = run_experiment(&small_grid(5)).unwrap();
    let b = run_experiment(&small_grid(5)).unwrap();
    assert_eq!(a.csv, b.csv);
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = run_experiment(&small_grid(6)).unwrap();
    assert_ne!(a.csv, c.csv);
}

#[test]
fn csv_has_expected_shape() {
    let out = run_experiment(&small_grid(2)).unwrap();
    let lines: Vec<&str> = out.csv.lines().collect();
    assert_eq!(lines[0], crate::metrics::CSV_HEADER);
    // step 0 plus one row every 10 of 40 steps
    assert_eq!(lines.len(), 1 + 5);
    assert!(lines[1].starts_with("0,0,linex1,db,"));
    assert!(lines[5].starts_with("40,640,linex1,db,"));
    assert!(lines.iter().skip(1).all(|l| l.ends_with(",2")));
    assert_eq!(out.summary.steps_to_all_modes, None);
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_grid(4);
    let out = run_experiment(&cfg).unwrap();
    let stem = run_stem(&cfg);
    assert_eq!(stem, "grid_db_linex1_s4");
    out.write_to(dir.path(), &stem).unwrap();
    let json = std::fs::read_to_string(dir.path().join("grid_db_linex1_s4.summary.json")).unwrap();
    let back: RunSummary = serde_json::from_str(&json).unwrap();
    assert_eq!(back.config_hash, cfg.hash().unwrap());
    let mut store = crate::model::ParamStore::new();
    let env = cfg.build_env().unwrap();
    let kind = cfg.objective_kind();
    let mut model =
        PolicyModel::new(cfg.model.clone(), kind.required_heads(&env), &env, &mut stream_rng(0, Stream::Init));
    std::mem::swap(&mut store, model.store_mut());
    let bytes = std::fs::read(dir.path().join("grid_db_linex1_s4.ckpt")).unwrap();
    crate::model::read_checkpoint(&bytes[..], &mut store, &cfg.hash().unwrap()).unwrap();
    assert!(crate::model::read_checkpoint(&bytes[..], &mut store, "wrong").is_err());
}

#[test]
fn divergence_is_reported() {
    let mut cfg = small_grid(1);
    cfg.loss = LossConfig { name: "steep".into(), expression: Some("exp(50*t) - 1 - 50*t".into()) };
    cfg.training.clamp_bound = f64::INFINITY;
    cfg.training.lr = 10.0;
    cfg.training.z_lr = 10.0;
    match run_experiment(&cfg) {
        Err(RunError::NumericalDivergence { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn suite_isolates_failures_and_keeps_order() {
    let mut bad = small_grid(9);
    bad.objective.kind = crate::objectives::ObjectiveVariant::ModDb;
    bad.env = EnvConfig::DagFile { path: "/nonexistent/file.dag".into() };
    let configs = vec![small_grid(1), bad, small_grid(2)];
    let results = run_suite(&configs, 2);
    assert_eq!(results.len(), 3);
    assert_eq!(results[0].as_ref().unwrap().summary.seed, 1);
    assert!(results[1].is_err());
    assert_eq!(results[2].as_ref().unwrap().summary.seed, 2);
    assert!(run_suite(&[], 4).is_empty());

    let stats = aggregate(&configs, &results);
    let db = stats.iter().find(|s| s.objective == "db").unwrap();
    assert_eq!((db.runs, db.failures), (2, 0));
    let md = stats.iter().find(|s| s.objective == "mod_db").unwrap();
    assert_eq!((md.runs, md.failures), (1, 1));
    assert_eq!(md.median_final_l1, None);
}

#[test]
fn median_of_seeds() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[]), None);
    let configs: Vec<ExperimentConfig> = (0..5).map(small_grid).collect();
    let results = run_suite(&configs, 1);
    let stats = aggregate(&configs, &results);
    assert_eq!(stats.len(), 1);
    assert_eq!(stats[0].runs, 5);
    let mut l1: Vec<f64> = results.iter().map(|r| r.as_ref().unwrap().summary.final_report.l1_exact.unwrap()).collect();
    l1.sort_by(f64::total_cmp);
    assert_eq!(stats[0].median_final_l1, Some(l1[2]));
}
