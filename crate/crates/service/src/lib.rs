//! HTTP facade through which an oracle (a person in the labeling UI or a
//! script) answers the label tasks of an active-learning session.
//!
//! Routes (payloads are JSON, see `docs/oracle-api.md`):
//!
//! | method | path | |
//! |---|---|---|
//! | `POST` | `/session` | score the user's pool and queue `ceil(eta * |pool|)` tasks |
//! | `GET` | `/session/{id}/next` | next pending task, `204` when none |
//! | `POST` | `/session/{id}/label` | record a label |
//! | `POST` | `/session/{id}/skip` | skip a task |
//! | `GET` | `/session/{id}/status` | counts, model version, metrics |
//! | `GET` | `/classes` | class list of the store |
//!
//! Once the last pending task is resolved the session fine-tunes its model
//! on a blocking worker thread; reads stay available meanwhile.

mod api;
mod state;

pub use api::{
    router, CreateSession, CreatedSession, LabelRequest, LabelResponse, SessionStatus, SkipRequest,
};
pub use state::{AppState, ServiceError};

use std::net::SocketAddr;

/// Serves `state` on `addr` until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, state).await
}

/// Serves `state` on an already bound listener until ctrl-c.
pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    log::info!(
        "oracle service listening on http://{}",
        listener.local_addr()?
    );
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
