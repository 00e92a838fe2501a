use std::collections::HashMap;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::plan::{AcquisitionMode, ExperimentPlan, FineTuneData};
use super::session::{Session, SessionInit};
use super::train::{
    evaluate, held_out_users, source_windows, split_pool_test, train_baseline, train_epochs,
};
use crate::acquire::{
    acquisition_size, predict_mc_batch, random_score, AcquisitionBatch, AcquisitionFn, PassStrategy,
};
use crate::data::WindowStore;
use crate::error::{Error, Result};
use crate::metrics::Evaluation;
use crate::model::{HarnetConfig, ModelBundle};
use crate::oracle::{Oracle, SimulatedOracle};
use crate::rng::{domain, RngStream};
use crate::signal::FeatureWindow;

/// Outcome of one (user, eta, function, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub user: String,
    pub eta: f64,
    pub function: AcquisitionFn,
    pub seed: u64,
    pub pool_size: usize,
    pub test_size: usize,
    /// Ids of windows the oracle labeled, in acquisition order.
    pub acquired: Vec<u64>,
    /// Labels the oracle gave, aligned with `acquired`.
    pub labels: Vec<usize>,
    pub skipped: usize,
    pub pre: Option<Evaluation>,
    pub post: Option<Evaluation>,
    /// Evaluation after each round in iterative mode.
    pub trajectory: Vec<Evaluation>,
    pub error: Option<String>,
    pub score_seconds: f64,
    pub train_seconds: f64,
}

impl CellRecord {
    fn empty(user: &str, eta: f64, function: AcquisitionFn, seed: u64) -> Self {
        Self {
            user: user.to_string(),
            eta,
            function,
            seed,
            pool_size: 0,
            test_size: 0,
            acquired: Vec::new(),
            labels: Vec::new(),
            skipped: 0,
            pre: None,
            post: None,
            trajectory: Vec::new(),
            error: None,
            score_seconds: 0.0,
            train_seconds: 0.0,
        }
    }

    /// Record of a single-shot session in its current state.
    pub fn from_session(session: &Session) -> Self {
        record_from_session(
            session,
            Self::empty(&session.user, session.eta, session.function, session.seed),
        )
    }
}

/// Pool and test windows of a held-out user for one seed, with the pool
/// cap applied.
pub fn user_split<'a>(
    store: &'a WindowStore,
    user: &str,
    plan: &ExperimentPlan,
    seed: u64,
) -> Result<(Vec<&'a FeatureWindow>, Vec<&'a FeatureWindow>)> {
    let labeled = store.labeled(user);
    if labeled.is_empty() {
        return Err(Error::Data(format!("user {user:?} has no labeled windows")));
    }
    let (mut pool, test) = split_pool_test(&labeled, plan.pool_fraction, seed)?;
    if let Some(cap) = plan.pool_cap {
        pool.truncate(cap);
    }
    Ok((pool, test))
}

fn owned(ws: &[&FeatureWindow]) -> Vec<FeatureWindow> {
    ws.iter().map(|w| (*w).clone()).collect()
}

/// Scores shared by every eta of one (user, seed): the MC predictions do not
/// depend on eta, and only random scores depend on the function.
struct PoolScores {
    pre: Evaluation,
    samples: Vec<crate::acquire::PredictiveSample>,
}

impl PoolScores {
    fn compute(
        model: &ModelBundle,
        pool: &[&FeatureWindow],
        test: &[&FeatureWindow],
        passes: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            pre: evaluate(model, test, passes, seed)?,
            samples: predict_mc_batch(model, pool, passes, seed, PassStrategy::SharedTrunk)?,
        })
    }

    fn batch(
        &self,
        pool: &[&FeatureWindow],
        function: AcquisitionFn,
        eta: f64,
        seed: u64,
    ) -> Result<AcquisitionBatch> {
        let scores = match function {
            AcquisitionFn::Random => {
                let root = RngStream::root(seed, domain::RANDOM_SCORE);
                pool.iter()
                    .map(|w| random_score(root.derive(w.id)))
                    .collect()
            }
            f => self
                .samples
                .iter()
                .map(|s| f.score(s).expect("scored function"))
                .collect(),
        };
        AcquisitionBatch::from_scores(function, eta, scores)
    }
}

fn record_from_session(session: &Session, mut rec: CellRecord) -> CellRecord {
    let acquired = session.acquired();
    rec.pool_size = session.pool.len();
    rec.test_size = session.test.len();
    rec.acquired = acquired.iter().map(|(w, _)| w.id).collect();
    rec.labels = acquired.iter().map(|(_, c)| *c).collect();
    rec.skipped = session.count(crate::oracle::TaskState::Skipped);
    rec.pre = Some(session.pre.clone());
    rec.post = session.post.clone();
    rec
}

/// Single-shot cell: score the pool, label the top `ceil(eta * |pool|)`
/// windows through `oracle`, fine-tune a copy of `baseline` on them and
/// evaluate before and after. Returns the updated model.
#[allow(clippy::too_many_arguments)]
pub fn run_incremental(
    baseline: &ModelBundle,
    user: &str,
    pool: &[&FeatureWindow],
    test: &[&FeatureWindow],
    replay: &[&FeatureWindow],
    eta: f64,
    function: AcquisitionFn,
    classes: &[String],
    oracle: &mut dyn Oracle,
    plan: &ExperimentPlan,
    seed: u64,
) -> Result<(ModelBundle, CellRecord)> {
    match plan.mode {
        AcquisitionMode::SingleShot => {
            let t0 = Instant::now();
            let scores = PoolScores::compute(baseline, pool, test, plan.passes, seed)?;
            let batch = scores.batch(pool, function, eta, seed)?;
            let score_seconds = t0.elapsed().as_secs_f64();
            single_shot(
                baseline,
                user,
                pool,
                test,
                replay,
                classes,
                oracle,
                plan,
                seed,
                scores.pre,
                batch,
                score_seconds,
            )
        }
        AcquisitionMode::Iterative { steps } => iterative(
            baseline, user, pool, test, replay, eta, function, oracle, plan, seed, steps,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn single_shot(
    baseline: &ModelBundle,
    user: &str,
    pool: &[&FeatureWindow],
    test: &[&FeatureWindow],
    replay: &[&FeatureWindow],
    classes: &[String],
    oracle: &mut dyn Oracle,
    plan: &ExperimentPlan,
    seed: u64,
    pre: Evaluation,
    batch: AcquisitionBatch,
    score_seconds: f64,
) -> Result<(ModelBundle, CellRecord)> {
    let init = SessionInit {
        user: user.to_string(),
        function: batch.function,
        eta: batch.eta,
        seed,
        classes: classes.to_vec(),
        plan: plan.clone(),
    };
    let mut rec = CellRecord::empty(user, batch.eta, batch.function, seed);
    let mut session = Session::with_batch(
        init,
        baseline.clone(),
        owned(pool),
        owned(test),
        owned(replay),
        pre,
        batch,
    );
    let t0 = Instant::now();
    session.drive(oracle)?;
    rec.train_seconds = t0.elapsed().as_secs_f64();
    rec.score_seconds = score_seconds;
    let rec = record_from_session(&session, rec);
    Ok((session.model, rec))
}

/// Reaches `ceil(eta * |pool|)` labels in `steps` rounds, re-scoring the
/// remaining pool with the current model each round and fine-tuning on
/// everything acquired so far.
#[allow(clippy::too_many_arguments)]
fn iterative(
    baseline: &ModelBundle,
    user: &str,
    pool: &[&FeatureWindow],
    test: &[&FeatureWindow],
    replay: &[&FeatureWindow],
    eta: f64,
    function: AcquisitionFn,
    oracle: &mut dyn Oracle,
    plan: &ExperimentPlan,
    seed: u64,
    steps: usize,
) -> Result<(ModelBundle, CellRecord)> {
    let mut rec = CellRecord::empty(user, eta, function, seed);
    rec.pool_size = pool.len();
    rec.test_size = test.len();
    let pre = evaluate(baseline, test, plan.passes, seed)?;
    rec.pre = Some(pre.clone());
    let mut model = baseline.clone();
    let mut remaining: Vec<&FeatureWindow> = pool.to_vec();
    let mut data: Vec<(&FeatureWindow, usize)> = Vec::new();
    let mut taken = 0;
    let mut post = pre;
    for step in 1..=steps {
        let target = acquisition_size(eta * step as f64 / steps as f64, pool.len());
        let want = target.saturating_sub(taken);
        if want == 0 {
            rec.trajectory.push(post.clone());
            continue;
        }
        let t0 = Instant::now();
        let batch = crate::acquire::select(&remaining, &model, function, 1.0, plan.passes, seed)?;
        rec.score_seconds += t0.elapsed().as_secs_f64();
        let chosen: Vec<usize> = batch.ranking[..want.min(remaining.len())].to_vec();
        for (rank, &i) in chosen.iter().enumerate() {
            let task = crate::oracle::LabelTask::new(
                taken as u64 + rank as u64,
                taken + rank,
                batch.scores[i],
                function,
                remaining[i],
                &[],
            );
            match oracle.answer(&task) {
                Some(c) if c < model.num_classes() => {
                    data.push((remaining[i], c));
                    rec.acquired.push(remaining[i].id);
                    rec.labels.push(c);
                }
                _ => rec.skipped += 1,
            }
        }
        taken += chosen.len();
        let mut drop: Vec<usize> = chosen;
        drop.sort_unstable_by(|a, b| b.cmp(a));
        for i in drop {
            remaining.remove(i);
        }
        let mut train: Vec<(&FeatureWindow, usize)> = data.clone();
        if plan.fine_tune == FineTuneData::WithSource {
            train.extend(replay.iter().filter_map(|w| w.label.map(|l| (*w, l))));
        }
        let t0 = Instant::now();
        train_epochs(
            &mut model,
            &train,
            plan.incremental_epochs,
            plan.batch_size,
            seed,
        )?;
        rec.train_seconds += t0.elapsed().as_secs_f64();
        post = evaluate(&model, test, plan.passes, seed)?;
        rec.trajectory.push(post.clone());
    }
    rec.post = Some(post);
    Ok((model, rec))
}

/// Baseline evaluation per held-out user, as trained by a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub user: String,
    /// Evaluation on the test split of the first seed.
    pub train_windows: usize,
    pub evaluation: Option<Evaluation>,
    pub error: Option<String>,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub baselines: Vec<BaselineRecord>,
    pub cells: Vec<CellRecord>,
}

/// Runs every (user, seed, function, eta) cell. Each held-out user gets one
/// baseline (from `baselines` when supplied, else trained here) that every
/// cell of that user starts from. Failures are recorded per cell.
pub fn sweep(
    store: &WindowStore,
    base: &HarnetConfig,
    plan: &ExperimentPlan,
    baselines: &HashMap<String, ModelBundle>,
) -> Result<SweepResult> {
    plan.validate()?;
    let mut out = SweepResult {
        baselines: Vec::new(),
        cells: Vec::new(),
    };
    let classes = store.classes().to_vec();
    for user in held_out_users(store, plan) {
        let source = source_windows(store, &user);
        let t0 = Instant::now();
        let trained = match baselines.get(&user) {
            Some(m) => Ok(m.clone()),
            None => {
                info!("training baseline for held-out user {user}");
                train_baseline(store, &user, base, plan)
            }
        };
        let mut brec = BaselineRecord {
            user: user.clone(),
            train_windows: source.len(),
            evaluation: None,
            error: None,
            train_seconds: t0.elapsed().as_secs_f64(),
        };
        let model = match trained {
            Ok(m) => m,
            Err(e) => {
                warn!("baseline for {user} failed: {e}");
                brec.error = Some(e.to_string());
                out.baselines.push(brec);
                for &seed in &plan.seeds {
                    for &function in &plan.functions {
                        for &eta in &plan.eta_grid {
                            let mut rec = CellRecord::empty(&user, eta, function, seed);
                            rec.error = Some(format!("baseline: {e}"));
                            out.cells.push(rec);
                        }
                    }
                }
                continue;
            }
        };
        let replay: Vec<&FeatureWindow> = match plan.fine_tune {
            FineTuneData::WithSource => source.clone(),
            FineTuneData::AcquiredOnly => Vec::new(),
        };
        for &seed in &plan.seeds {
            let prepared = user_split(store, &user, plan, seed).and_then(|(pool, test)| {
                let t0 = Instant::now();
                let scores = match plan.mode {
                    AcquisitionMode::SingleShot => Some(PoolScores::compute(
                        &model,
                        &pool,
                        &test,
                        plan.passes,
                        seed,
                    )?),
                    AcquisitionMode::Iterative { .. } => None,
                };
                Ok((pool, test, scores, t0.elapsed().as_secs_f64()))
            });
            if seed == plan.seeds[0] {
                brec.evaluation = match &prepared {
                    Ok((_, _, Some(s), _)) => Some(s.pre.clone()),
                    Ok((_, test, None, _)) => evaluate(&model, test, plan.passes, seed).ok(),
                    Err(_) => None,
                };
            }
            for &function in &plan.functions {
                for &eta in &plan.eta_grid {
                    let rec = match &prepared {
                        Err(e) => {
                            let mut rec = CellRecord::empty(&user, eta, function, seed);
                            rec.error = Some(e.to_string());
                            rec
                        }
                        Ok((pool, test, scores, score_seconds)) => {
                            let mut oracle = SimulatedOracle::from_windows(
                                pool.iter().copied(),
                                classes.len(),
                                plan.label_noise,
                                seed,
                            );
                            let result = match scores {
                                Some(s) => s.batch(pool, function, eta, seed).and_then(|batch| {
                                    single_shot(
                                        &model,
                                        &user,
                                        pool,
                                        test,
                                        &replay,
                                        &classes,
                                        &mut oracle,
                                        plan,
                                        seed,
                                        s.pre.clone(),
                                        batch,
                                        *score_seconds,
                                    )
                                }),
                                None => run_incremental(
                                    &model,
                                    &user,
                                    pool,
                                    test,
                                    &replay,
                                    eta,
                                    function,
                                    &classes,
                                    &mut oracle,
                                    plan,
                                    seed,
                                ),
                            };
                            match result {
                                Ok((_, rec)) => rec,
                                Err(e) => {
                                    warn!("cell {user}/{function}/{eta}/{seed} failed: {e}");
                                    let mut rec = CellRecord::empty(&user, eta, function, seed);
                                    rec.error = Some(e.to_string());
                                    rec
                                }
                            }
                        }
                    };
                    info!(
                        "{user} {function} eta={eta} seed={seed}: {}",
                        rec.post.as_ref().map_or("failed".to_string(), |e| format!(
                            "accuracy {:.4}",
                            e.accuracy
                        ))
                    );
                    out.cells.push(rec);
                }
            }
        }
        out.baselines.push(brec);
    }
    Ok(out)
}
