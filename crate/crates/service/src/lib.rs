//! HTTP facade over the TaskFlow engine: chat sessions, versioned TaskFlow
//! documents, the action inventory and pipeline reruns.

pub mod config;
pub mod http;
pub mod state;

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use taskflow_core::engine::EngineError;
use taskflow_core::pipeline::PipelineError;
use taskflow_core::taskflow::{Issue, PublishError};
use thiserror::Error;
use tokio::net::TcpListener;

pub use config::ServiceConfig;
pub use http::router;
pub use state::AppState;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no corpus configured")]
    NoCorpus,
    #[error("cannot load artifacts: {0}")]
    Artifacts(String),
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("unknown taskflow version {0}")]
    UnknownVersion(u64),
    #[error("taskflow version conflict: candidate is based on {candidate}, current is {current}")]
    Conflict { current: u64, candidate: u64 },
    #[error("taskflow has {} validation error(s)", .0.len())]
    Invalid(Vec<Issue>),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    fn artifacts(e: impl std::fmt::Display) -> Self {
        Self::Artifacts(e.to_string())
    }
}

impl From<PublishError> for ServiceError {
    fn from(e: PublishError) -> Self {
        match e {
            PublishError::Conflict { current, candidate } => Self::Conflict { current, candidate },
            PublishError::Invalid(issues) => Self::Invalid(issues),
        }
    }
}

/// Serves until `shutdown` resolves, then drains in-flight requests. Idle
/// sessions are swept once a minute.
pub async fn serve(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let idle = Duration::from_secs(state.config().session_idle_secs);
    let sweeper = {
        let state = Arc::clone(&state);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(60).min(idle));
            loop {
                tick.tick().await;
                let dropped = state.expire_idle(idle);
                if dropped > 0 {
                    tracing::info!(dropped, "expired idle sessions");
                }
            }
        })
    };
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    result
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}
