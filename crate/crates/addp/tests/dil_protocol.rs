//! Integration tests of the domain-incremental protocol on small synthetic
//! configurations.

use addp::model::ModelConfig;
use addp::proto::PrototypeStore;
use addp::protocol::{
    run_ablation, run_dil, train_task, DebugFlags, ExperimentConfig, Hyperparams, Method,
    TaskSource, Toggles,
};
use addp::signal::{incremental_performance, MetricName};
use addp::synth::{DomainFactors, TaskSpec};

fn mk_task(name: &str, seed: u64, color: [f64; 3], n_train: usize, n_test: usize) -> TaskSource {
    TaskSource::Synth(TaskSpec {
        name: name.into(),
        domain: DomainFactors {
            base_color: color,
            ..DomainFactors::default()
        },
        n_train_clips: n_train,
        n_test_clips: n_test,
        hr_range: (60.0, 120.0),
        seed,
        frames: 32,
        height: 16,
        width: 16,
    })
}

fn tiny_config(method: Method, seed: u64, n_tasks: usize) -> ExperimentConfig {
    let colors = [
        [0.70, 0.50, 0.40],
        [0.40, 0.50, 0.70],
        [0.55, 0.70, 0.45],
    ];
    ExperimentConfig {
        tasks: (0..n_tasks)
            .map(|i| mk_task(&format!("t{i}"), 100 + i as u64 * 37, colors[i % 3], 3, 2))
            .collect(),
        method,
        toggles: Toggles::default(),
        hyperparams: Hyperparams {
            k: 2,
            alpha: 3,
            epochs_initial: 2,
            epochs_incremental: 1,
            batch: 2,
            lr: 1e-3,
            ..Hyperparams::default()
        },
        seed,
        model: ModelConfig {
            stage_channels: [4, 4, 8, 8],
            ..ModelConfig::default()
        },
        task_order: None,
        ablation: None,
        debug: DebugFlags::default(),
    }
}

fn matrices_bit_equal(a: &addp::signal::ResultMatrix, b: &addp::signal::ResultMatrix) -> bool {
    serde_json::to_string(a).unwrap() == serde_json::to_string(b).unwrap()
}

#[test]
fn single_task_run_has_single_entry() {
    let cfg = tiny_config(Method::Naive, 5, 1);
    let out = run_dil(&cfg, None).unwrap();
    let m = &out.record.result_matrix;
    assert_eq!(m.n_tasks(), 1);
    assert!(m.is_complete());
    let p1 = incremental_performance(m, MetricName::Mae).unwrap();
    assert_eq!(p1, m.get(0, 0).unwrap().mae, "P_1 = p_{{1,1}}");
}

#[test]
fn joint_fills_final_row_only() {
    let cfg = tiny_config(Method::Joint, 6, 2);
    let out = run_dil(&cfg, None).unwrap();
    let m = &out.record.result_matrix;
    assert!(m.get(1, 0).is_some() && m.get(1, 1).is_some());
    assert!(m.get(0, 0).is_none(), "joint trains once, on the union");
    assert!(out.record.pn.contains_key("mae"));
    assert!(out.store.is_empty(), "joint keeps no prototypes");
}

#[test]
fn matrix_complete_exactly_lower_triangle() {
    let cfg = tiny_config(Method::Naive, 7, 3);
    let out = run_dil(&cfg, None).unwrap();
    let m = &out.record.result_matrix;
    assert!(m.is_complete());
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(m.get(i, j).is_some(), j <= i, "entry ({i},{j})");
        }
    }
}

#[test]
fn all_off_ablation_equals_naive_bit_for_bit() {
    let naive = {
        let mut c = tiny_config(Method::Naive, 11, 2);
        c.toggles = Toggles::all_off();
        run_dil(&c, None).unwrap()
    };
    let all_off = {
        let mut c = tiny_config(Method::Addp, 11, 2);
        c.toggles = Toggles::all_off();
        run_dil(&c, None).unwrap()
    };
    assert!(
        matrices_bit_equal(&naive.record.result_matrix, &all_off.record.result_matrix),
        "all-off addp must equal the naive baseline bit-for-bit"
    );
}

#[test]
fn p_zero_and_simplify_off_equals_naive() {
    let naive = run_dil(&tiny_config(Method::Naive, 13, 2), None).unwrap();
    let addp = {
        let mut c = tiny_config(Method::Addp, 13, 2);
        c.hyperparams.p = 0.0;
        c.toggles.simplify = false;
        run_dil(&c, None).unwrap()
    };
    assert!(
        matrices_bit_equal(&naive.record.result_matrix, &addp.record.result_matrix),
        "p=0 with simplification off must be bit-equivalent to naive"
    );
    // but the addp run still extracted prototypes
    assert!(!addp.store.is_empty());
}

#[test]
fn addp_incremental_with_empty_store_is_hard_error() {
    let cfg = tiny_config(Method::Addp, 15, 2);
    let tasks = match &cfg.tasks[1] {
        TaskSource::Synth(spec) => addp::synth::generate_task(spec, 1).unwrap(),
        _ => unreachable!(),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut model = addp::model::Model::new(cfg.effective_model(), &mut rng).unwrap();
    let mut store = PrototypeStore::new();
    let mut audit = Vec::new();
    let err = train_task(
        &mut model,
        &tasks.0,
        addp::model::TrainStage::Incremental,
        &mut store,
        &cfg,
        1,
        &mut audit,
    )
    .unwrap_err();
    assert!(matches!(err, addp::Error::EmptyStore), "got {err}");
}

#[test]
fn naive_keeps_no_prototypes_and_no_audit() {
    let mut cfg = tiny_config(Method::Naive, 17, 2);
    cfg.debug.audit_augmentation = true;
    let out = run_dil(&cfg, None).unwrap();
    assert!(out.store.is_empty());
    assert!(out.record.prototype_counts.is_empty());
    assert!(out.record.aug_audit.is_empty());
}

#[test]
fn store_monotonicity_through_run() {
    let mut cfg = tiny_config(Method::Addp, 19, 3);
    cfg.hyperparams.k = 8; // more than the 3 train clips: K is clipped
    let out = run_dil(&cfg, None).unwrap();
    // after task t the store holds sum_i min(K, |train_i|) prototypes
    let expect: usize = 3 * 3.min(8);
    assert_eq!(out.store.styles().len(), expect);
    assert_eq!(out.store.noises().len(), expect);
    for (s, n) in &out.record.prototype_counts {
        assert_eq!((*s, *n), (3, 3));
    }
}

#[test]
fn reproducibility_same_config_same_matrix() {
    let cfg = tiny_config(Method::Addp, 21, 2);
    let a = run_dil(&cfg, None).unwrap();
    let b = run_dil(&cfg, None).unwrap();
    for i in 0..2 {
        for j in 0..=i {
            let ma = a.record.result_matrix.get(i, j).unwrap();
            let mb = b.record.result_matrix.get(i, j).unwrap();
            for metric in MetricName::ALL {
                assert!(
                    (metric.get(ma) - metric.get(mb)).abs() <= 1e-6,
                    "{} differs at ({i},{j})",
                    metric.as_str()
                );
            }
        }
    }
}

#[test]
fn ablation_grid_produces_one_record_per_row() {
    let cfg = tiny_config(Method::Addp, 23, 2);
    let grid = [
        Toggles::all_off(),
        Toggles {
            style_aug: true,
            noise_aug: false,
            simplify: false,
        },
        Toggles {
            style_aug: true,
            noise_aug: true,
            simplify: false,
        },
        Toggles::default(),
    ];
    let outs = run_ablation(&cfg, &grid).unwrap();
    assert_eq!(outs.len(), 4);
    for (out, row) in outs.iter().zip(&grid) {
        assert_eq!(out.record.toggles, *row);
    }
}

#[test]
fn simplification_changes_predictions() {
    // A/B on a 3-task run: enabling simplification must change at least one
    // task's MAE (non-degenerate effect).
    let mut on = tiny_config(Method::Addp, 25, 3);
    on.hyperparams.p = 1.0; // guarantee MAE records from augmentation
    let mut off = on.clone();
    off.toggles.simplify = false;
    let out_on = run_dil(&on, None).unwrap();
    let out_off = run_dil(&off, None).unwrap();
    assert!(
        out_on.record.simplification.iter().any(|s| s.prototype.is_some()),
        "a prototype must get selected"
    );
    let changed = (0..3).any(|j| {
        let a = out_on.record.result_matrix.get(2, j).unwrap().mae;
        let b = out_off.record.result_matrix.get(2, j).unwrap().mae;
        (a - b).abs() > 1e-12
    });
    assert!(changed, "simplification must have a non-degenerate effect");
}

#[test]
fn freeze_audit_reports_bit_exact_backbone() {
    let mut cfg = tiny_config(Method::Addp, 27, 2);
    cfg.debug.freeze_audit = true;
    let out = run_dil(&cfg, None).unwrap();
    assert!(!out.record.freeze_ok.is_empty());
    assert!(out.record.freeze_ok.iter().all(|&ok| ok));
}

#[test]
fn run_artifacts_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(Method::Addp, 29, 2);
    cfg.debug.audit_augmentation = true;
    cfg.hyperparams.p = 1.0;
    let _ = run_dil(&cfg, Some(dir.path())).unwrap();
    for f in [
        "result_matrix.csv",
        "result_matrix.std.csv",
        "result_matrix.rmse.csv",
        "result_matrix.r.csv",
        "metrics.json",
        "prototypes.bin",
        "aug_audit.jsonl",
        "checkpoint_task1.bin",
        "checkpoint_task2.bin",
    ] {
        assert!(dir.path().join(f).exists(), "missing artifact {f}");
    }
    let rec = addp::protocol::load_run_record(dir.path()).unwrap();
    assert_eq!(rec.result_matrix.n_tasks(), 2);
}

#[test]
fn learning_happens_on_initial_task() {
    // loss on the final epoch is lower than on the first
    let mut cfg = tiny_config(Method::Naive, 31, 1);
    cfg.tasks = vec![mk_task("learn", 400, [0.65, 0.5, 0.42], 6, 2)];
    cfg.hyperparams.epochs_initial = 5;
    cfg.hyperparams.batch = 2;
    let out = run_dil(&cfg, None).unwrap();
    let losses = &out.record.epoch_losses[0];
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "training must reduce the loss: {losses:?}"
    );
}

#[test]
fn task_order_permutation_applies() {
    let mut cfg = tiny_config(Method::Naive, 33, 2);
    cfg.task_order = Some(vec![1, 0]);
    let out = run_dil(&cfg, None).unwrap();
    assert_eq!(out.record.task_names, vec!["t1".to_string(), "t0".to_string()]);
}
