use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use activehar::acquire::AcquisitionFn;
use activehar::active::{
    source_windows, user_split, ExperimentPlan, FineTuneData, Session, SessionInit, TaskError,
};
use activehar::data::WindowStore;
use activehar::signal::FeatureWindow;
use activehar::ModelBundle;
use axum::http::StatusCode;
use tokio::sync::watch;

/// A request the service refuses, with the status it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceError {
    pub status: StatusCode,
    pub message: String,
}

impl ServiceError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<TaskError> for ServiceError {
    fn from(e: TaskError) -> Self {
        let status = match e {
            TaskError::UnknownTask(_) => StatusCode::NOT_FOUND,
            TaskError::ClassOutOfRange { .. } => StatusCode::BAD_REQUEST,
            TaskError::AlreadyResolved { .. } => StatusCode::CONFLICT,
        };
        Self::new(status, e.to_string())
    }
}

pub(crate) struct Entry {
    pub session: Mutex<Session>,
    /// Last retrain failure, if any.
    pub error: Mutex<Option<String>>,
    /// Bumped whenever a retrain finishes or fails.
    pub done: watch::Sender<u64>,
}

struct Inner {
    store: WindowStore,
    model: ModelBundle,
    plan: ExperimentPlan,
    seed: u64,
    static_dir: Option<PathBuf>,
    sessions: Mutex<HashMap<u64, Arc<Entry>>>,
    next_id: AtomicU64,
}

/// Shared service state: the window store, the model every session starts
/// from, and the live sessions.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(store: WindowStore, model: ModelBundle, plan: ExperimentPlan, seed: u64) -> Self {
        Self(Arc::new(Inner {
            store,
            model,
            plan,
            seed,
            static_dir: None,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }))
    }

    /// Also serve the files under `dir` (the labeling UI) for unmatched paths.
    pub fn with_static_dir(self, dir: impl Into<PathBuf>) -> Self {
        let inner = Arc::try_unwrap(self.0)
            .unwrap_or_else(|_| panic!("static dir must be set before the state is shared"));
        Self(Arc::new(Inner {
            static_dir: Some(dir.into()),
            ..inner
        }))
    }

    pub fn static_dir(&self) -> Option<&PathBuf> {
        self.0.static_dir.as_ref()
    }

    pub fn classes(&self) -> &[String] {
        self.0.store.classes()
    }

    /// Splits the user's windows, scores the pool and queues the tasks.
    /// Blocking: scoring runs every stochastic pass over the pool.
    pub fn create_session(
        &self,
        user: &str,
        function: AcquisitionFn,
        eta: f64,
        seed: Option<u64>,
    ) -> Result<u64, ServiceError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(ServiceError::bad_request(format!(
                "eta {eta} outside [0, 1]"
            )));
        }
        let inner = &self.0;
        if !inner.store.users.contains_key(user) {
            return Err(ServiceError::not_found(format!("unknown user {user:?}")));
        }
        let seed = seed.unwrap_or(inner.seed);
        let (pool, test) = user_split(&inner.store, user, &inner.plan, seed)
            .map_err(|e| ServiceError::bad_request(e.to_string()))?;
        let replay: Vec<FeatureWindow> = match inner.plan.fine_tune {
            FineTuneData::WithSource => source_windows(&inner.store, user)
                .into_iter()
                .cloned()
                .collect(),
            FineTuneData::AcquiredOnly => Vec::new(),
        };
        let init = SessionInit {
            user: user.to_string(),
            function,
            eta,
            seed,
            classes: inner.store.classes().to_vec(),
            plan: inner.plan.clone(),
        };
        let own = |v: Vec<&FeatureWindow>| v.into_iter().cloned().collect();
        let session = Session::start(init, inner.model.clone(), own(pool), own(test), replay)
            .map_err(|e| ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        let id = inner.next_id.fetch_add(1, Ordering::Relaxed);
        log::info!(
            "session {id}: user {user}, {function}, eta {eta}, {} tasks",
            session.k()
        );
        let entry = Arc::new(Entry {
            session: Mutex::new(session),
            error: Mutex::new(None),
            done: watch::channel(0).0,
        });
        inner
            .sessions
            .lock()
            .expect("session map")
            .insert(id, entry);
        Ok(id)
    }

    pub(crate) fn entry(&self, id: u64) -> Result<Arc<Entry>, ServiceError> {
        self.0
            .sessions
            .lock()
            .expect("session map")
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found(format!("no session {id}")))
    }

    /// Runs `f` on the session under its lock.
    pub fn with_session<T>(
        &self,
        id: u64,
        f: impl FnOnce(&mut Session) -> T,
    ) -> Result<T, ServiceError> {
        let entry = self.entry(id)?;
        let mut s = entry.session.lock().expect("session lock");
        Ok(f(&mut s))
    }

    /// Starts the fine-tune on a blocking thread if the session is ready for it.
    pub(crate) fn maybe_retrain(&self, id: u64, entry: Arc<Entry>) {
        let job = entry
            .session
            .lock()
            .expect("session lock")
            .take_retrain_job();
        let Some(job) = job else { return };
        log::info!(
            "session {id}: all tasks resolved, fine-tuning on {} windows",
            job.data.len()
        );
        tokio::task::spawn_blocking(move || {
            let outcome = job.run();
            let mut s = entry.session.lock().expect("session lock");
            match outcome {
                Ok(o) => {
                    log::info!(
                        "session {id}: model version {} accuracy {:.4}",
                        s.version + 1,
                        o.evaluation.accuracy
                    );
                    s.complete_retrain(o);
                    *entry.error.lock().expect("error lock") = None;
                }
                Err(e) => {
                    log::error!("session {id}: retrain failed: {e}");
                    s.abort_retrain();
                    *entry.error.lock().expect("error lock") = Some(e.to_string());
                }
            }
            drop(s);
            entry.done.send_modify(|n| *n += 1);
        });
    }

    /// Waits until the session has post-update metrics or its retrain failed.
    pub async fn wait_for_update(&self, id: u64) -> Result<Session, ServiceError> {
        let entry = self.entry(id)?;
        let mut rx = entry.done.subscribe();
        loop {
            {
                let s = entry.session.lock().expect("session lock");
                if s.post.is_some() {
                    return Ok(s.clone());
                }
                if let Some(e) = entry.error.lock().expect("error lock").clone() {
                    return Err(ServiceError::new(StatusCode::INTERNAL_SERVER_ERROR, e));
                }
            }
            if rx.changed().await.is_err() {
                return Err(ServiceError::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "session dropped",
                ));
            }
        }
    }

    pub(crate) fn retrain_error(&self, id: u64) -> Option<String> {
        self.entry(id)
            .ok()?
            .error
            .lock()
            .expect("error lock")
            .clone()
    }
}
