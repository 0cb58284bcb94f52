//! HTTP service: `POST /edit` with `{"question": ...}` answers against the
//! edit memory and returns `{answer, trace, fact_id}`.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use cotedit_core::editor::{EditError, EditSession};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::commands::{answer_question, edit_session, EditResponse};
use crate::config::PipelineConfig;
use crate::{failed, CliError};

#[derive(Debug, Deserialize)]
pub struct EditBody {
    pub question: String,
    #[serde(default)]
    pub hops: Option<u32>,
}

fn status_for(e: &EditError) -> StatusCode {
    match e {
        EditError::InvalidQuery(_) => StatusCode::BAD_REQUEST,
        EditError::EmptyMemory | EditError::NoRelevantFact { .. } => StatusCode::NOT_FOUND,
        EditError::EditFailed { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        EditError::Memory(_) => StatusCode::INTERNAL_SERVER_ERROR,
        EditError::Backend(_) => StatusCode::BAD_GATEWAY,
    }
}

async fn handle_edit(
    State(session): State<Arc<EditSession>>,
    Json(body): Json<EditBody>,
) -> Result<Json<EditResponse>, (StatusCode, Json<Value>)> {
    let result = tokio::task::spawn_blocking(move || answer_question(&session, &body.question, body.hops.unwrap_or(1)))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"error": e.to_string()}))))?;
    result
        .map(Json)
        .map_err(|e| (status_for(&e), Json(json!({"error": e.to_string()}))))
}

pub fn router(session: EditSession) -> Router {
    Router::new()
        .route("/edit", post(handle_edit))
        .with_state(Arc::new(session))
}

pub fn serve(config: &PipelineConfig, addr: &str) -> Result<(), CliError> {
    let session = edit_session(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(config.run.parallelism)
        .enable_all()
        .build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(session))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
    .map_err(failed)
}
