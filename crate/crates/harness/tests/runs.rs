use ligs_core::config::RunConfig;
use ligs_core::metrics::read_metrics;
use ligs_core::ExperimentId;
use ligs_harness::{run_experiment, ExperimentSpec};

fn config(experiment: ExperimentId, body: &str) -> RunConfig {
    let mut cfg = RunConfig::defaults_for(experiment);
    for pair in body.split(',') {
        let (k, v) = pair.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn plain_learners_never_build_generator_or_novelty() {
    let dir = tempfile::tempdir().unwrap();
    for alg in ["mappo", "ippo"] {
        let cfg = config(ExperimentId::Foraging1, &format!("algorithm={alg},total_env_steps=2000"));
        let summary = run_experiment(&ExperimentSpec::new(cfg, dir.path())).unwrap();
        assert!(!summary.modules.generator && !summary.modules.novelty, "{alg}");
        assert_eq!(summary.active_steps, 0);
        let rows = read_metrics(&summary.metrics_path).unwrap();
        assert!(rows.iter().all(|r| r.switch_activations == 0 && r.episode_return_intrinsic == 0.0));
    }
    let cfg = config(ExperimentId::Foraging1, "algorithm=mappo_rnd,total_env_steps=2000");
    let summary = run_experiment(&ExperimentSpec::new(cfg, dir.path())).unwrap();
    assert!(!summary.modules.generator && summary.modules.novelty);
}

#[test]
fn always_on_switches_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        ExperimentId::Corridor,
        "algorithm=ligs_always_on,base_learner=ippo,num_actors=1,total_env_steps=3000",
    );
    let summary = run_experiment(&ExperimentSpec::new(cfg, dir.path())).unwrap();
    assert!(summary.modules.generator);
    assert_eq!(summary.switch_fraction(), 1.0);
    let rows = read_metrics(&summary.metrics_path).unwrap();
    assert!(!rows.is_empty());
    let mut prev = 0;
    for r in &rows {
        assert_eq!(r.switch_activations, r.step - prev);
        prev = r.step;
    }
}

#[test]
fn random_switch_is_near_half() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(ExperimentId::Foraging3, "algorithm=ligs_random_switch,total_env_steps=20000");
    let summary = run_experiment(&ExperimentSpec::new(cfg, dir.path())).unwrap();
    assert!((summary.switch_fraction() - 0.5).abs() < 0.02, "{}", summary.switch_fraction());
}

#[test]
fn checkpoints_and_heatmap_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(ExperimentId::Foraging2, "algorithm=ligs,total_env_steps=2000");
    let spec = ExperimentSpec::new(cfg, dir.path());
    let summary = run_experiment(&spec).unwrap();
    assert!(summary.heatmap_path.exists());
    let names: Vec<String> = std::fs::read_dir(&summary.checkpoint_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n == "switch_actor.bin"), "{names:?}");
    assert!(names.iter().any(|n| n == "actor0.bin"), "{names:?}");
}

#[test]
fn same_config_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config(ExperimentId::Foraging1, "algorithm=ligs,novelty_kind=count,total_env_steps=3000");
    let pa = run_experiment(&ExperimentSpec::new(cfg.clone(), a.path())).unwrap().metrics_path;
    let pb = run_experiment(&ExperimentSpec::new(cfg, b.path())).unwrap().metrics_path;
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}
