use std::fs;

use regen::config::{ExperimentConfig, Phase};
use regen::pipeline::{self, adopt_phases, OnComplete, RunLayout, RunManifest};
use regen::report::write_report;
use tempfile::TempDir;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json_str(
        r#"{
          "dataset": {"scene": {"height": 32, "width": 32}, "n_source": 8, "n_target": 8, "n_probe": 2},
          "schedule": {"pretrain_epochs": 1, "warmup_rounds": 1, "iter_tr": 6, "iter_joint": 6,
                       "checkpoint_every": 3, "log_every": 2},
          "eval": {"eval_interval": 3}
        }"#,
    )
    .unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn report_after_pretraining_only_has_the_baseline() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    pipeline::generate_data(&cfg, OnComplete::Refuse).unwrap();
    pipeline::pretrain(&cfg, OnComplete::Refuse).unwrap();
    let rep = write_report(&cfg).unwrap();
    assert!(rep.baseline_miou.is_some() && rep.baseline_source_miou.is_some());
    assert_eq!((rep.post_warmup_miou, rep.post_joint_miou), (None, None));
    assert_eq!(rep.final_miou, rep.baseline_miou);
    assert_eq!(rep.final_phase.as_deref(), Some("baseline"));
    assert_eq!(rep.delta_miou, Some(0.0));
    assert!(rep.contracts.is_none());
}

#[test]
fn full_run_records_contracts_hashes_and_intermediate_checkpoints() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    let (outcomes, rep) = pipeline::run_all(&cfg, false).unwrap();
    assert!(outcomes.iter().all(|o| !o.skipped));
    let layout = RunLayout::new(&cfg);
    let m = RunManifest::load(&layout.manifest()).unwrap().unwrap();
    assert!(m.contracts.as_ref().unwrap().holds());
    assert_eq!(m.seed, 0);
    assert_eq!(m.phases.len(), 5);
    assert!(layout.intermediate_checkpoint(Phase::Translation, 3).exists());
    assert!(layout.intermediate_checkpoint(Phase::Joint, 3).exists());
    assert_eq!(rep.final_phase.as_deref(), Some("joint"));
    assert_eq!(rep.final_iteration, Some(6));

    // A second run-all finds everything done.
    let (again, rep2) = pipeline::run_all(&cfg, false).unwrap();
    assert!(again.iter().all(|o| o.skipped));
    assert_eq!(rep2.final_miou, rep.final_miou);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (ca, cb) = (tiny(a.path()), tiny(b.path()));
    pipeline::run_all(&ca, false).unwrap();
    pipeline::run_all(&cb, false).unwrap();
    let read = |c: &ExperimentConfig| fs::read(RunLayout::new(c).metrics()).unwrap();
    assert_eq!(read(&ca), read(&cb));
}

#[test]
fn adoption_takes_only_phases_with_matching_settings() {
    let dir = TempDir::new().unwrap();
    let base = tiny(&dir.path().join("base"));
    pipeline::run_all(&base, false).unwrap();

    let mut joint_only = base.with_value("loss.lambda_pseg", serde_json::json!(0.0)).unwrap();
    joint_only.output_dir = dir.path().join("no_lp");
    joint_only.dataset_dir = Some(base.dataset_dir());
    assert_eq!(adopt_phases(&base, &joint_only).unwrap(), vec![Phase::Pretrain, Phase::Warmup, Phase::Translation]);
    let (outcomes, _) = pipeline::run_all(&joint_only, false).unwrap();
    let ran: Vec<Phase> = outcomes.iter().filter(|o| !o.skipped).map(|o| o.phase).collect();
    assert_eq!(ran, vec![Phase::Joint]);

    let mut other_seed = base.clone();
    other_seed.seed = 1;
    other_seed.output_dir = dir.path().join("seed1");
    assert!(adopt_phases(&base, &other_seed).unwrap().is_empty());
}

#[test]
fn changed_settings_make_a_prerequisite_stale() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(dir.path());
    pipeline::generate_data(&cfg, OnComplete::Refuse).unwrap();
    pipeline::pretrain(&cfg, OnComplete::Refuse).unwrap();
    let mut changed = cfg.clone();
    changed.schedule.pretrain_lr *= 2.0;
    let err = pipeline::warmup(&changed, OnComplete::Refuse).unwrap_err().to_string();
    assert!(err.contains("different configuration"), "{err}");
}
