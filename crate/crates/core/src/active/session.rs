//! One acquisition round as a resumable state machine: score the pool,
//! queue label tasks, collect answers, then fine-tune once.

use std::fmt;

use super::plan::{ExperimentPlan, FineTuneData};
use super::train::{evaluate, train_epochs};
use crate::acquire::{select, AcquisitionBatch, AcquisitionFn};
use crate::error::Result;
use crate::metrics::Evaluation;
use crate::model::ModelBundle;
use crate::oracle::{LabelTask, Oracle, TaskState};
use crate::signal::FeatureWindow;

/// Rejected task operations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskError {
    UnknownTask(u64),
    ClassOutOfRange { class: usize, classes: usize },
    AlreadyResolved { task_id: u64, state: TaskState },
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskError::UnknownTask(id) => write!(f, "no task {id} in this session"),
            TaskError::ClassOutOfRange { class, classes } => {
                write!(f, "class index {class} out of range for {classes} classes")
            }
            TaskError::AlreadyResolved { task_id, state } => {
                write!(f, "task {task_id} is already {state:?}")
            }
        }
    }
}

impl std::error::Error for TaskError {}

/// Everything a fine-tune needs, detached from the session so it can run
/// on another thread.
#[derive(Clone, Debug)]
pub struct RetrainJob {
    pub model: ModelBundle,
    pub data: Vec<(FeatureWindow, usize)>,
    pub test: Vec<FeatureWindow>,
    pub epochs: usize,
    pub batch_size: usize,
    pub passes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub model: ModelBundle,
    pub evaluation: Evaluation,
    pub losses: Vec<f64>,
}

impl RetrainJob {
    pub fn run(self) -> Result<RetrainOutcome> {
        let mut model = self.model;
        let data: Vec<(&FeatureWindow, usize)> = self.data.iter().map(|(w, c)| (w, *c)).collect();
        let losses = train_epochs(&mut model, &data, self.epochs, self.batch_size, self.seed)?;
        let test: Vec<&FeatureWindow> = self.test.iter().collect();
        let evaluation = evaluate(&model, &test, self.passes, self.seed)?;
        Ok(RetrainOutcome {
            model,
            evaluation,
            losses,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Session {
    pub user: String,
    pub function: AcquisitionFn,
    pub eta: f64,
    pub seed: u64,
    pub classes: Vec<String>,
    pub plan: ExperimentPlan,
    pub model: ModelBundle,
    pub pool: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
    /// Source-user windows mixed into fine-tuning under [`FineTuneData::WithSource`].
    pub replay: Vec<FeatureWindow>,
    pub batch: AcquisitionBatch,
    pub tasks: Vec<LabelTask>,
    answers: Vec<Option<usize>>,
    /// Completed retrains.
    pub version: u64,
    pub pre: Evaluation,
    pub post: Option<Evaluation>,
    retraining: bool,
}

#[derive(Clone, Debug)]
pub struct SessionInit {
    pub user: String,
    pub function: AcquisitionFn,
    pub eta: f64,
    pub seed: u64,
    pub classes: Vec<String>,
    pub plan: ExperimentPlan,
}

impl Session {
    /// Evaluates the model on `test` and scores `pool`.
    pub fn start(
        init: SessionInit,
        model: ModelBundle,
        pool: Vec<FeatureWindow>,
        test: Vec<FeatureWindow>,
        replay: Vec<FeatureWindow>,
    ) -> Result<Self> {
        let test_refs: Vec<&FeatureWindow> = test.iter().collect();
        let pre = evaluate(&model, &test_refs, init.plan.passes, init.seed)?;
        let pool_refs: Vec<&FeatureWindow> = pool.iter().collect();
        let batch = select(
            &pool_refs,
            &model,
            init.function,
            init.eta,
            init.plan.passes,
            init.seed,
        )?;
        Ok(Self::with_batch(
            init, model, pool, test, replay, pre, batch,
        ))
    }

    /// Session from an already computed baseline evaluation and pool scoring.
    pub fn with_batch(
        init: SessionInit,
        model: ModelBundle,
        pool: Vec<FeatureWindow>,
        test: Vec<FeatureWindow>,
        replay: Vec<FeatureWindow>,
        pre: Evaluation,
        batch: AcquisitionBatch,
    ) -> Self {
        let tasks: Vec<LabelTask> = batch
            .selected
            .iter()
            .enumerate()
            .map(|(rank, &i)| {
                LabelTask::new(
                    rank as u64,
                    rank,
                    batch.scores[i],
                    init.function,
                    &pool[i],
                    &init.classes,
                )
            })
            .collect();
        let post = tasks.is_empty().then(|| pre.clone());
        Self {
            answers: vec![None; tasks.len()],
            user: init.user,
            function: init.function,
            eta: init.eta,
            seed: init.seed,
            classes: init.classes,
            plan: init.plan,
            model,
            pool,
            test,
            replay,
            batch,
            tasks,
            version: 0,
            pre,
            post,
            retraining: false,
        }
    }

    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    pub fn next_pending(&self) -> Option<&LabelTask> {
        self.tasks.iter().find(|t| t.state == TaskState::Pending)
    }

    pub fn count(&self, state: TaskState) -> usize {
        self.tasks.iter().filter(|t| t.state == state).count()
    }

    pub fn is_resolved(&self) -> bool {
        self.count(TaskState::Pending) == 0
    }

    pub fn is_retraining(&self) -> bool {
        self.retraining
    }

    fn pending_index(&self, task_id: u64) -> std::result::Result<usize, TaskError> {
        let i = self
            .tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .ok_or(TaskError::UnknownTask(task_id))?;
        match self.tasks[i].state {
            TaskState::Pending => Ok(i),
            state => Err(TaskError::AlreadyResolved { task_id, state }),
        }
    }

    /// Records a label. Returns the number of tasks still pending.
    pub fn label(&mut self, task_id: u64, class: usize) -> std::result::Result<usize, TaskError> {
        if class >= self.classes.len() {
            // Unknown tasks still report as unknown.
            self.tasks
                .iter()
                .find(|t| t.task_id == task_id)
                .ok_or(TaskError::UnknownTask(task_id))?;
            return Err(TaskError::ClassOutOfRange {
                class,
                classes: self.classes.len(),
            });
        }
        let i = self.pending_index(task_id)?;
        self.tasks[i].state = TaskState::Labeled;
        self.answers[i] = Some(class);
        Ok(self.count(TaskState::Pending))
    }

    /// Marks a task skipped. Returns the number of tasks still pending.
    pub fn skip(&mut self, task_id: u64) -> std::result::Result<usize, TaskError> {
        let i = self.pending_index(task_id)?;
        self.tasks[i].state = TaskState::Skipped;
        Ok(self.count(TaskState::Pending))
    }

    /// Labeled windows in acquisition-rank order.
    pub fn acquired(&self) -> Vec<(&FeatureWindow, usize)> {
        self.batch
            .selected
            .iter()
            .zip(&self.answers)
            .filter_map(|(&i, a)| a.map(|c| (&self.pool[i], c)))
            .collect()
    }

    /// The fine-tune to run once every task is resolved; `None` before that,
    /// while one is running, or after it completed.
    pub fn take_retrain_job(&mut self) -> Option<RetrainJob> {
        if !self.is_resolved() || self.post.is_some() || self.retraining {
            return None;
        }
        self.retraining = true;
        let mut data: Vec<(FeatureWindow, usize)> = self
            .acquired()
            .into_iter()
            .map(|(w, c)| (w.clone(), c))
            .collect();
        if self.plan.fine_tune == FineTuneData::WithSource {
            data.extend(
                self.replay
                    .iter()
                    .filter_map(|w| w.label.map(|l| (w.clone(), l))),
            );
        }
        Some(RetrainJob {
            model: self.model.clone(),
            data,
            test: self.test.clone(),
            epochs: self.plan.incremental_epochs,
            batch_size: self.plan.batch_size,
            passes: self.plan.passes,
            seed: self.seed,
        })
    }

    pub fn complete_retrain(&mut self, outcome: RetrainOutcome) {
        self.model = outcome.model;
        self.post = Some(outcome.evaluation);
        self.version += 1;
        self.retraining = false;
    }

    /// Gives up on a failed retrain so it can be attempted again.
    pub fn abort_retrain(&mut self) {
        self.retraining = false;
    }

    /// Answers every pending task from `oracle` in rank order (`None`
    /// answers skip) and runs the fine-tune inline.
    pub fn drive(&mut self, oracle: &mut dyn Oracle) -> Result<()> {
        while let Some(task) = self.next_pending().cloned() {
            let outcome = match oracle.answer(&task) {
                Some(c) => self.label(task.task_id, c),
                None => self.skip(task.task_id),
            };
            if let Err(e) = outcome {
                log::warn!("oracle answer for task {} rejected: {e}", task.task_id);
                self.skip(task.task_id).expect("task is pending");
            }
        }
        if let Some(job) = self.take_retrain_job() {
            match job.run() {
                Ok(outcome) => self.complete_retrain(outcome),
                Err(e) => {
                    self.abort_retrain();
                    return Err(e);
                }
            }
        }
        Ok(())
    }
}
