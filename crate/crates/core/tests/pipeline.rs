use std::path::{Path, PathBuf};

use oodl_core::pipeline::{evaluate, fit_detector, EvaluationPlan, FileSource, Method, Stage, TrackingSource};
use oodl_core::synthetic::{planted_ood, planted_task, PlantedOod};
use oodl_core::{DatasetManifest, Role};

struct Fixture {
    _dir: tempfile::TempDir,
    net: oodl_core::refnet::RefNet,
    train: PathBuf,
    id: PathBuf,
    ood: Vec<PathBuf>,
}

fn fixture(n_train: usize, n_test: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let task = planted_task(n_train, n_test, PlantedOod::MeanShift(2.0), 4);
    let p = dir.path();
    Fixture {
        train: task.train.save(p, "train").unwrap(),
        id: task.id_test.save(p, "id").unwrap(),
        ood: vec![
            task.ood.save(p, "shift").unwrap(),
            planted_ood(n_test, PlantedOod::Scaled(3.0), 77).save(p, "scale").unwrap(),
        ],
        net: task.net,
        _dir: dir,
    }
}

fn load(p: &Path) -> DatasetManifest {
    DatasetManifest::load(p).unwrap()
}

fn plan(methods: Vec<Method>) -> EvaluationPlan {
    let mut plan = EvaluationPlan {
        methods,
        ..EvaluationPlan::default()
    };
    plan.detector.layer = Some(2);
    plan
}

#[test]
fn fitting_never_reads_ood_data() {
    let f = fixture(200, 100);
    let src = TrackingSource::new(FileSource);
    let mut p = plan(Method::ALL.to_vec());
    p.tune_epsilon = true;
    p.epsilon_grid = vec![0.0, 0.001];
    let ood: Vec<_> = f.ood.iter().map(|o| load(o)).collect();
    evaluate(&f.net, &src, &load(&f.train), &load(&f.id), &ood, &p).unwrap();

    assert_eq!(src.roles_read_during(Stage::Fit), vec![Role::Train]);
    assert!(src.roles_read_during(Stage::Tune).iter().all(|&r| r == Role::OodTest));
    let events = src.events();
    let first_ood = events.iter().position(|e| e.role == Role::OodTest).unwrap();
    assert!(events[first_ood..].iter().all(|e| e.stage != Some(Stage::Fit)));

    let src = TrackingSource::new(FileSource);
    fit_detector(&f.net, &src, &load(&f.train), 2, &p.ocsvm, false, 0).unwrap();
    assert_eq!(src.roles_read_during(Stage::Fit), vec![Role::Train]);
    assert!(src.events().iter().all(|e| e.role == Role::Train));
}

#[test]
fn planted_ood_gives_the_perfect_row() {
    let f = fixture(300, 200);
    let ev = evaluate(
        &f.net,
        &FileSource,
        &load(&f.train),
        &load(&f.id),
        &[load(&f.ood[0])],
        &plan(vec![Method::Ours]),
    )
    .unwrap();
    let m = &ev.rows[0].metrics;
    assert_eq!(
        (m.fpr_at_tpr, m.detection_error, m.auroc, m.aupr_out, m.aupr_in),
        (0.0, 2.5, 100.0, 100.0, 100.0)
    );
}

#[test]
fn self_versus_self_is_chance() {
    let f = fixture(300, 600);
    let id = load(&f.id);
    let ev = evaluate(
        &f.net,
        &FileSource,
        &load(&f.train),
        &id,
        std::slice::from_ref(&id),
        &plan(vec![Method::MaxSoftmax, Method::Ours]),
    )
    .unwrap();
    for row in &ev.rows {
        assert!((row.metrics.auroc - 50.0).abs() <= 2.0, "{}: {}", row.method, row.metrics.auroc);
    }
}

#[test]
fn two_methods_give_two_rows_per_set_in_order() {
    let f = fixture(200, 100);
    let ood: Vec<_> = f.ood.iter().map(|o| load(o)).collect();
    let ev = evaluate(
        &f.net,
        &FileSource,
        &load(&f.train),
        &load(&f.id),
        &ood,
        &plan(vec![Method::MaxSoftmax, Method::Ours]),
    )
    .unwrap();
    let got: Vec<(Method, &str)> = ev.rows.iter().map(|r| (r.method, r.ood.as_str())).collect();
    assert_eq!(
        got,
        vec![
            (Method::MaxSoftmax, "planted-shift"),
            (Method::Ours, "planted-shift"),
            (Method::MaxSoftmax, "planted-scale"),
            (Method::Ours, "planted-scale"),
        ]
    );
    let table = ev.to_table();
    let header = table.lines().next().unwrap();
    let cols = ["FPR@95%TPR", "DetErr", "AUROC", "AUPR-Out", "AUPR-In"];
    let pos: Vec<usize> = cols.iter().map(|c| header.find(c).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn evaluation_is_deterministic() {
    let f = fixture(150, 80);
    let ood: Vec<_> = f.ood.iter().map(|o| load(o)).collect();
    let mut p = plan(Method::ALL.to_vec());
    p.tune_epsilon = true;
    p.epsilon_grid = vec![0.0, 0.002];
    let run = || {
        let ev = evaluate(&f.net, &FileSource, &load(&f.train), &load(&f.id), &ood, &p).unwrap();
        serde_json::to_string(&ev).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn missing_layer_is_an_argument_error() {
    let f = fixture(50, 20);
    let mut p = plan(vec![Method::Ours]);
    p.detector.layer = None;
    let err = evaluate(&f.net, &FileSource, &load(&f.train), &load(&f.id), &[load(&f.ood[0])], &p).unwrap_err();
    assert!(matches!(err, oodl_core::Error::InvalidArgument(_)));
}
