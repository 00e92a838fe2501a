mod common;

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use activehar::acquire::{acquisition_size, AcquisitionFn};
use activehar::active::results::{without_timing, write_cells_csv};
use activehar::active::*;
use activehar::data::WindowStore;
use activehar::oracle::{SimulatedOracle, TaskState};
use activehar::signal::FeatureWindow;
use activehar::{HarnetConfig, ModelBundle};

const USER: &str = "user0";

struct Fixture {
    store: WindowStore,
    plan: ExperimentPlan,
    baseline: ModelBundle,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let store = common::small_store(3, 4, 12, 5);
        let plan = ExperimentPlan {
            held_out_users: vec![USER.into()],
            baseline_epochs: 5,
            incremental_epochs: 3,
            passes: 4,
            eta_grid: vec![0.0, 0.5, 1.0],
            functions: vec![AcquisitionFn::VariationRatio, AcquisitionFn::Random],
            seeds: vec![1, 2],
            ..Default::default()
        };
        let baseline = train_baseline(&store, USER, &HarnetConfig::default(), &plan).unwrap();
        Fixture {
            store,
            plan,
            baseline,
        }
    })
}

fn session(eta: f64, function: AcquisitionFn, seed: u64) -> Session {
    let f = fixture();
    let (pool, test) = user_split(&f.store, USER, &f.plan, seed).unwrap();
    let init = SessionInit {
        user: USER.into(),
        function,
        eta,
        seed,
        classes: f.store.classes().to_vec(),
        plan: f.plan.clone(),
    };
    let own = |v: Vec<&FeatureWindow>| v.into_iter().cloned().collect();
    Session::start(init, f.baseline.clone(), own(pool), own(test), Vec::new()).unwrap()
}

fn oracle(s: &Session) -> SimulatedOracle {
    SimulatedOracle::from_windows(&s.pool, s.classes.len(), 0.0, s.seed)
}

#[test]
fn separable_toy_set_is_learned_in_ten_epochs() {
    let ws: Vec<FeatureWindow> = (0..50u64)
        .map(|i| {
            let class = (i % 2) as usize;
            let sign = if class == 0 { -1.0 } else { 1.0 };
            let coefficients = (0..60)
                .map(|j| sign * (1.0 + 0.1 * ((i * 7 + j) % 5) as f64))
                .collect();
            FeatureWindow {
                id: i,
                user_id: "u".into(),
                device_id: "d".into(),
                label: Some(class),
                rate_hz: 100.0,
                native_rate_hz: 100.0,
                coefficients,
                display: vec![0.0; 120],
            }
        })
        .collect();
    let mut model = ModelBundle::build(HarnetConfig::with_classes(2, 20), 0).unwrap();
    let data: Vec<(&FeatureWindow, usize)> = ws.iter().map(|w| (w, w.label.unwrap())).collect();
    train_epochs(&mut model, &data, 10, 32, 0).unwrap();
    let refs: Vec<&FeatureWindow> = ws.iter().collect();
    let predicted = model.predict(&model.input_tensor(&refs).unwrap()).unwrap();
    let correct = predicted
        .data()
        .chunks(2)
        .zip(&ws)
        .filter(|(p, w)| activehar::acquire::argmax(p) == w.label.unwrap())
        .count();
    assert_eq!(correct, 50);
}

#[test]
fn baseline_never_sees_the_held_out_user() {
    let f = fixture();
    assert!(source_windows(&f.store, USER)
        .iter()
        .all(|w| w.user_id != USER));
}

#[test]
fn test_windows_never_reach_pool_or_training() {
    for function in AcquisitionFn::ALL {
        let mut s = session(0.5, function, 3);
        let test: HashSet<u64> = s.test.iter().map(|w| w.id).collect();
        assert!(s.pool.iter().all(|w| !test.contains(&w.id)));
        let mut o = oracle(&s);
        while let Some(t) = s.next_pending().cloned() {
            assert!(!test.contains(&t.window_id));
            s.label(
                t.task_id,
                activehar::oracle::Oracle::answer(&mut o, &t).unwrap(),
            )
            .unwrap();
        }
        let job = s.take_retrain_job().unwrap();
        assert!(job
            .data
            .iter()
            .all(|(w, _)| !test.contains(&w.id) && w.user_id == USER));
    }
}

#[test]
fn acquired_count_is_the_ceiling_and_labels_are_ground_truth() {
    for eta in [0.1, 0.33, 0.5, 1.0] {
        let mut s = session(eta, AcquisitionFn::Bald, 4);
        assert_eq!(s.k(), acquisition_size(eta, s.pool.len()));
        let mut o = oracle(&s);
        s.drive(&mut o).unwrap();
        let acquired = s.acquired();
        assert_eq!(acquired.len(), s.k());
        assert!(acquired.iter().all(|(w, c)| w.label == Some(*c)));
    }
}

#[test]
fn eta_zero_leaves_parameters_bit_identical() {
    let f = fixture();
    let (pool, test) = user_split(&f.store, USER, &f.plan, 1).unwrap();
    let classes = f.store.classes().to_vec();
    let mut o = SimulatedOracle::from_windows(pool.iter().copied(), classes.len(), 0.0, 1);
    let run = |eta, o: &mut SimulatedOracle| {
        run_incremental(
            &f.baseline,
            USER,
            &pool,
            &test,
            &[],
            eta,
            AcquisitionFn::VariationRatio,
            &classes,
            o,
            &f.plan,
            1,
        )
        .unwrap()
    };
    let (model, rec) = run(0.0, &mut o);
    assert_eq!(model, f.baseline);
    assert_eq!(rec.pre, rec.post);
    let (model, rec) = run(0.5, &mut o);
    assert_ne!(model.network, f.baseline.network);
    assert_eq!(rec.acquired.len(), acquisition_size(0.5, pool.len()));
}

#[test]
fn retrain_fires_once_after_the_last_task() {
    let mut s = session(0.25, AcquisitionFn::MaxEntropy, 6);
    let k = s.k();
    assert!(k >= 2);
    let mut o = oracle(&s);
    for i in 0..k {
        assert!(s.take_retrain_job().is_none());
        let t = s.next_pending().unwrap().clone();
        if i == 0 {
            assert_eq!(s.skip(t.task_id), Ok(k - 1));
        } else {
            let c = activehar::oracle::Oracle::answer(&mut o, &t).unwrap();
            assert_eq!(s.label(t.task_id, c), Ok(k - 1 - i));
        }
    }
    assert!(s.next_pending().is_none());
    let job = s.take_retrain_job().unwrap();
    assert_eq!(job.data.len(), k - 1);
    assert!(s.take_retrain_job().is_none());
    s.complete_retrain(job.run().unwrap());
    assert_eq!(s.version, 1);
    assert!(s.take_retrain_job().is_none());
    assert_eq!(
        (s.count(TaskState::Labeled), s.count(TaskState::Skipped)),
        (k - 1, 1)
    );
}

#[test]
fn task_errors() {
    let mut s = session(0.25, AcquisitionFn::Random, 7);
    let id = s.next_pending().unwrap().task_id;
    assert_eq!(s.label(999, 0), Err(TaskError::UnknownTask(999)));
    assert_eq!(s.label(999, 99), Err(TaskError::UnknownTask(999)));
    assert_eq!(
        s.label(id, 4),
        Err(TaskError::ClassOutOfRange {
            class: 4,
            classes: 4
        })
    );
    s.label(id, 1).unwrap();
    assert!(matches!(
        s.label(id, 2),
        Err(TaskError::AlreadyResolved { .. })
    ));
    assert!(matches!(s.skip(id), Err(TaskError::AlreadyResolved { .. })));
}

#[test]
fn tasks_never_carry_ground_truth() {
    let s = session(0.5, AcquisitionFn::VariationRatio, 8);
    let text = serde_json::to_string(&s.tasks[0]).unwrap();
    assert!(!text.contains("label"), "{text}");
}

#[test]
fn sweep_emits_one_row_per_cell_and_is_reproducible() {
    let f = fixture();
    let baselines = HashMap::from([(USER.to_string(), f.baseline.clone())]);
    let run = || {
        let r = sweep(&f.store, &HarnetConfig::default(), &f.plan, &baselines).unwrap();
        let mut csv = Vec::new();
        write_cells_csv(&r.cells, &mut csv).unwrap();
        (r, String::from_utf8(csv).unwrap())
    };
    let (a, csv_a) = run();
    let (_, csv_b) = run();
    assert_eq!(a.cells.len(), 2 * 2 * 3);
    assert_eq!(csv_a.lines().count(), 1 + 12);
    assert_eq!(
        without_timing(&csv_a).unwrap(),
        without_timing(&csv_b).unwrap()
    );
    assert!(a.cells.iter().all(|c| c.error.is_none()));
    for c in &a.cells {
        assert_eq!(c.acquired.len(), acquisition_size(c.eta, c.pool_size));
    }
}

#[test]
fn iterative_mode_reaches_the_same_budget() {
    let f = fixture();
    let plan = ExperimentPlan {
        mode: AcquisitionMode::Iterative { steps: 3 },
        ..f.plan.clone()
    };
    let (pool, test) = user_split(&f.store, USER, &plan, 1).unwrap();
    let classes = f.store.classes().to_vec();
    let mut o = SimulatedOracle::from_windows(pool.iter().copied(), classes.len(), 0.0, 1);
    let (_, rec) = run_incremental(
        &f.baseline,
        USER,
        &pool,
        &test,
        &[],
        0.5,
        AcquisitionFn::Bald,
        &classes,
        &mut o,
        &plan,
        1,
    )
    .unwrap();
    assert_eq!(rec.acquired.len(), acquisition_size(0.5, pool.len()));
    assert_eq!(rec.trajectory.len(), 3);
    let unique: HashSet<u64> = rec.acquired.iter().copied().collect();
    assert_eq!(unique.len(), rec.acquired.len());
}

#[test]
fn pool_cap_limits_the_pool() {
    let f = fixture();
    let plan = ExperimentPlan {
        pool_cap: Some(5),
        ..f.plan.clone()
    };
    let (pool, _) = user_split(&f.store, USER, &plan, 1).unwrap();
    assert_eq!(pool.len(), 5);
}

#[test]
fn loocv_baselines_fit_the_separable_corpus() {
    let store = common::small_store(3, 6, 60, 9);
    let plan = ExperimentPlan::default();
    let baselines = train_baseline_loocv(&store, &HarnetConfig::default(), &plan).unwrap();
    assert_eq!(baselines.len(), 3);
    for b in baselines {
        assert!(
            b.evaluation.accuracy > 0.9,
            "{}: {}",
            b.user,
            b.evaluation.accuracy
        );
    }
}
