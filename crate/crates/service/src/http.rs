//! HTTP adapter over [`Service`].

use std::collections::HashMap;
use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::reason::{Reason, Rejection};
use crate::service::Service;

type Shared = Arc<Service>;

fn reply<T: Serialize>(result: Result<T, Rejection>) -> Response {
    match result {
        Ok(body) => (StatusCode::OK, Json(body)).into_response(),
        Err(r) => {
            let status = StatusCode::from_u16(r.status()).unwrap_or(StatusCode::BAD_REQUEST);
            (status, Json(json!({ "status": "rejected", "reasons": r.reasons }))).into_response()
        }
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Rejection> {
    serde_json::from_slice(body).map_err(|e| {
        Reason::MalformedRequest {
            message: e.to_string(),
        }
        .into()
    })
}

/// Runs a state-changing call off the async workers, since commits sync to
/// disk.
async fn blocking<T, F>(service: Shared, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Service) -> Result<T, Rejection> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&service)).await {
        Ok(result) => reply(result),
        Err(e) => reply::<()>(Err(Reason::Storage {
            message: e.to_string(),
        }
        .into())),
    }
}

async fn next_task(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Response {
    let Some(annotator) = q.get("annotator").cloned() else {
        return reply::<()>(Err(Reason::MalformedRequest {
            message: "missing `annotator` query parameter".into(),
        }
        .into()));
    };
    blocking(s, move |s| s.next_task(&annotator).map(|task| json!({ "task": task }))).await
}

macro_rules! submit {
    ($name:ident, $method:ident) => {
        async fn $name(State(s): State<Shared>, body: Bytes) -> Response {
            match parse(&body) {
                Ok(req) => blocking(s, move |s| s.$method(req)).await,
                Err(r) => reply::<()>(Err(r)),
            }
        }
    };
}

submit!(submit_prompt, submit_prompt);
submit!(submit_rating, submit_rating);
submit!(submit_ranking, submit_ranking);
submit!(skip, skip);
submit!(qualify, qualify);

async fn review(State(s): State<Shared>, Path(id): Path<String>, body: Bytes) -> Response {
    match parse(&body) {
        Ok(req) => blocking(s, move |s| s.review(&id, req)).await,
        Err(r) => reply::<()>(Err(r)),
    }
}

async fn progress(State(s): State<Shared>) -> Response {
    reply(Ok(s.progress()))
}

async fn export(State(s): State<Shared>) -> Response {
    reply(Ok(s.export()))
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks/skip", post(skip))
        .route("/annotations/prompt", post(submit_prompt))
        .route("/annotations/rating", post(submit_rating))
        .route("/annotations/ranking", post(submit_ranking))
        .route("/annotators", post(qualify))
        .route("/review/{id}", post(review))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .with_state(service)
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve_with_shutdown(
    listener: TcpListener,
    service: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}
