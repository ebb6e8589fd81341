//! Live vetting sessions over HTTP.
//!
//! Each session wraps an [`ActiveRun`](active_testing::engine::ActiveRun)
//! driven by a human oracle. Every state change is appended to a JSON lines
//! log before it is applied, and a restarted service rebuilds its sessions by
//! replaying those logs.

mod catalog;
mod error;
mod events;
mod routes;
mod session;

use std::collections::HashMap;
use std::fs;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use active_testing::engine::{Budget, RunConfig};
use active_testing::estimators::EstimatorKind;
use active_testing::metrics::MetricSpec;
use active_testing::strategies::VettingStrategyKind;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub use catalog::Catalog;
pub use error::{ErrorBody, ServiceError};
pub use events::{EventLog, SessionEvent};
pub use routes::{router, CreateSessionResponse, SubmitResponse, SubmitVet};
pub use session::{
    BatchItem, BatchPayload, BatchStatus, EstimateSnapshot, HistoryPoint, Progress, Session,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub dataset: String,
    pub metric: MetricSpec,
    pub estimator: EstimatorKind,
    pub strategy: VettingStrategyKind,
    pub batch_size: usize,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub seed: u64,
}

impl CreateSession {
    /// Sessions record a step after every batch.
    pub fn config(&self) -> RunConfig {
        RunConfig {
            budget: self.budget,
            seed: self.seed,
            report_at: Vec::new(),
            ..RunConfig::new(
                self.metric.clone(),
                self.estimator,
                self.strategy,
                self.batch_size,
            )
        }
    }
}

type SessionRef = Arc<RwLock<Session>>;

struct Inner {
    catalog: Catalog,
    dir: PathBuf,
    sessions: RwLock<HashMap<Uuid, SessionRef>>,
}

/// Shared service state. Sessions are independent; within one, writers
/// are exclusive and readers see a whole step.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn poisoned<T>(_: T) -> ServiceError {
    ServiceError::Internal("lock poisoned".into())
}

impl AppState {
    /// Opens `dir` for session logs and replays every log already there.
    pub fn open(catalog: Catalog, dir: &Path) -> Result<Self, ServiceError> {
        let log_err = |e: std::io::Error| ServiceError::Log {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(log_err)?;
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(log_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut sessions = HashMap::new();
        for path in paths {
            let session = Session::replay(&path, &catalog)?;
            tracing::info!(session = %session.id(), "restored session");
            sessions.insert(session.id(), Arc::new(RwLock::new(session)));
        }
        Ok(AppState {
            inner: Arc::new(Inner {
                catalog,
                dir: dir.to_path_buf(),
                sessions: RwLock::new(sessions),
            }),
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.inner.catalog
    }

    pub fn n_sessions(&self) -> usize {
        self.inner.sessions.read().map(|s| s.len()).unwrap_or(0)
    }

    pub fn create_session(
        &self,
        request: &CreateSession,
    ) -> Result<EstimateSnapshot, ServiceError> {
        let source = self
            .inner
            .catalog
            .get(&request.dataset)
            .ok_or_else(|| ServiceError::UnknownDataset(request.dataset.clone()))?;
        let id = Uuid::new_v4();
        let session = Session::create(
            id,
            &request.dataset,
            source,
            request.config(),
            &self.inner.dir,
        )?;
        let snapshot = session.estimate();
        self.inner
            .sessions
            .write()
            .map_err(poisoned)?
            .insert(id, Arc::new(RwLock::new(session)));
        Ok(snapshot)
    }

    pub fn session(&self, id: &str) -> Result<SessionRef, ServiceError> {
        let unknown = || ServiceError::UnknownSession(id.to_owned());
        let uuid = Uuid::parse_str(id).map_err(|_| unknown())?;
        self.inner
            .sessions
            .read()
            .map_err(poisoned)?
            .get(&uuid)
            .cloned()
            .ok_or_else(unknown)
    }

    pub fn read<R>(&self, id: &str, f: impl FnOnce(&Session) -> R) -> Result<R, ServiceError> {
        let session = self.session(id)?;
        let guard = session.read().map_err(poisoned)?;
        Ok(f(&guard))
    }

    pub fn write<R>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<R, ServiceError>,
    ) -> Result<R, ServiceError> {
        let session = self.session(id)?;
        let mut guard = session.write().map_err(poisoned)?;
        f(&mut guard)
    }

    /// Forces every session log to disk.
    pub fn flush(&self) -> Result<(), ServiceError> {
        let sessions: Vec<SessionRef> = self
            .inner
            .sessions
            .read()
            .map_err(poisoned)?
            .values()
            .cloned()
            .collect();
        for session in sessions {
            session.read().map_err(poisoned)?.sync()?;
        }
        Ok(())
    }
}

/// Serves until `shutdown` resolves, then flushes the session logs.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    state.flush()
}
