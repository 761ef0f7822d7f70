//! The daemon's HTTP server.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::Response;
use axum::Router;
use crossbeam_channel::RecvTimeoutError;
use jobfront::JobRef;
use serde::de::DeserializeOwned;
use serde_json::json;
use tokio::sync::Notify;
use tokio_stream::wrappers::ReceiverStream;

use crate::api::{bad_request, error_body, error_response, filter_from_query, Api, ApiRequest, ApiResponse};

struct ServerState {
    api: Arc<Api>,
    token: Option<String>,
    stop: Arc<Notify>,
}

fn respond(r: ApiResponse) -> Response {
    Response::builder()
        .status(StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(r.text()))
        .expect("valid response")
}

fn not_found(path: &str) -> ApiResponse {
    ApiResponse {
        status: 404,
        body: error_body("NotFound", &format!("no endpoint {path}"), json!({})),
    }
}

fn body_or_default<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiResponse> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    body_required(body)
}

fn body_required<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiResponse> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("request body: {e}")))
}

fn job_ref(s: &str) -> Result<JobRef, ApiResponse> {
    s.parse().map_err(|e| error_response(&e))
}

fn job_id(s: &str) -> Result<u64, ApiResponse> {
    s.parse()
        .map_err(|_| error_response(&jobfront::Error::UnknownJob(s.to_string())))
}

fn parse_request(method: &Method, path: &str, q: &BTreeMap<String, String>, body: &Bytes) -> Result<ApiRequest, ApiResponse> {
    use ApiRequest::*;
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    let m = method.as_str();
    Ok(match (m, segs.as_slice()) {
        ("GET", ["jobs"]) => ListJobs(filter_from_query(q).map_err(|e| error_response(&e))?),
        ("POST", ["jobs"]) => CreateJob(body_required(body)?),
        ("POST", ["jobs", "bulk", verb]) => Bulk(
            verb.parse().map_err(|e| error_response(&e))?,
            body_or_default(body)?,
        ),
        ("GET", ["jobs", id]) => GetJob(job_ref(id)?),
        ("PATCH", ["jobs", id]) => UpdateJob(job_id(id)?, body_required(body)?),
        ("DELETE", ["jobs", id]) => Remove(job_id(id)?),
        ("POST", ["jobs", id, "submit"]) => Submit(job_id(id)?),
        ("POST", ["jobs", id, "kill"]) => Kill(job_ref(id)?),
        ("POST", ["jobs", id, "resubmit"]) => Resubmit(job_ref(id)?),
        ("POST", ["jobs", id, "copy"]) => Copy(job_id(id)?, body_or_default(body)?),
        ("POST", ["jobs", id, "merge"]) => Merge(job_id(id)?, body_or_default(body)?),
        ("POST", ["jobs", id, "wait"]) => Wait {
            job: job_ref(id)?,
            timeout_s: match q.get("timeout_s") {
                Some(t) => t.parse().map_err(|_| bad_request(format!("bad timeout_s `{t}`")))?,
                None => 60.0,
            },
        },
        ("GET", ["jobs", id, "peek"]) => Peek {
            job: job_ref(id)?,
            file: q.get("file").cloned().unwrap_or_else(|| "stdout".into()),
            lines: match q.get("lines") {
                Some(n) => Some(n.parse().map_err(|_| bad_request(format!("bad lines `{n}`")))?),
                None => None,
            },
        },
        ("GET", ["jobs", id, "subjobs"]) => Subjobs(job_id(id)?),
        ("GET", ["schemas"]) => Schemas,
        ("GET", ["templates"]) => ListTemplates,
        ("POST", ["templates"]) => SaveTemplate(body_required(body)?),
        ("POST", ["templates", tid, "jobs"]) => NewFromTemplate(
            tid.parse().map_err(|_| bad_request(format!("bad template id `{tid}`")))?,
            body_or_default(body)?,
        ),
        ("GET", ["jobtree"]) => TreeList(q.get("path").cloned().unwrap_or_else(|| "/".into())),
        ("POST", ["jobtree"]) => Tree(body_required(body)?),
        ("GET", ["credential"]) => Credential,
        ("POST", ["credential", "renew"]) => CredentialRenew(body_or_default(body)?),
        ("POST", ["credential", "destroy"]) => CredentialDestroy,
        ("GET", ["robot", "runs"]) => RobotRuns,
        ("POST", ["robot", "run"]) => RobotRun(body_required(body)?),
        ("GET", ["status"]) => Status,
        ("POST", ["shutdown"]) => Shutdown,
        _ => return Err(not_found(path)),
    })
}

fn authorized(token: &Option<String>, headers: &HeaderMap) -> bool {
    let Some(t) = token else {
        return true;
    };
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|v| v == t)
}

fn event_line(e: &jobfront::lifecycle::MonitorEvent) -> Bytes {
    let mut s = serde_json::to_string(e).expect("serializable");
    s.push('\n');
    Bytes::from(s)
}

/// `GET /events?since=N&follow=false`: retained events after `since`, then
/// live ones, one JSON object per line.
fn events(api: &Api, q: &BTreeMap<String, String>) -> Response {
    let since = match q.get("since").map(|s| s.parse::<u64>()) {
        Some(Ok(s)) => Some(s),
        Some(Err(_)) => return respond(bad_request("bad since")),
        None => None,
    };
    let follow = q.get("follow").is_none_or(|f| f != "false");
    let bus = api.session().bus();
    let stream_head = |b: Body| {
        Response::builder()
            .status(StatusCode::OK)
            .header(header::CONTENT_TYPE, "application/x-ndjson")
            .body(b)
            .expect("valid response")
    };
    if !follow {
        let backlog = bus.since(since.unwrap_or(0));
        let mut text = Vec::new();
        for e in &backlog {
            text.extend_from_slice(&event_line(e));
        }
        return stream_head(Body::from(text));
    }
    let (backlog, rx) = bus.subscribe(since);
    let (tx, out) = tokio::sync::mpsc::channel::<Result<Bytes, Infallible>>(256);
    thread::spawn(move || {
        for e in &backlog {
            if tx.blocking_send(Ok(event_line(e))).is_err() {
                return;
            }
        }
        loop {
            match rx.recv_timeout(Duration::from_millis(250)) {
                Ok(e) => {
                    if tx.blocking_send(Ok(event_line(&e))).is_err() {
                        return;
                    }
                }
                Err(RecvTimeoutError::Timeout) if tx.is_closed() => return,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
    });
    stream_head(Body::from_stream(ReceiverStream::new(out)))
}

async fn handle(
    State(st): State<Arc<ServerState>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    if !authorized(&st.token, &headers) {
        return respond(ApiResponse {
            status: 401,
            body: error_body("Unauthorized", "missing or wrong bearer token", json!({})),
        });
    }
    let q: BTreeMap<String, String> = match Query::try_from_uri(&uri) {
        Ok(Query(q)) => q,
        Err(e) => return respond(bad_request(e.to_string())),
    };
    if method == Method::GET && uri.path().trim_end_matches('/') == "/events" {
        return events(&st.api, &q);
    }
    let req = match parse_request(&method, uri.path(), &q, &body) {
        Ok(r) => r,
        Err(resp) => return respond(resp),
    };
    let shutdown = matches!(req, ApiRequest::Shutdown);
    let api = st.api.clone();
    let resp = tokio::task::spawn_blocking(move || api.handle(req))
        .await
        .unwrap_or_else(|e| ApiResponse {
            status: 500,
            body: error_body("Internal", &e.to_string(), json!({})),
        });
    if shutdown {
        st.stop.notify_one();
    }
    respond(resp)
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<Notify>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops (after `POST /shutdown`).
    pub fn wait(mut self) -> io::Result<()> {
        self.thread.take().map_or(Ok(()), |t| t.join().unwrap_or(Ok(())))
    }

    pub fn shutdown(self) -> io::Result<()> {
        self.stop.notify_one();
        self.wait()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.stop.notify_one();
            let _ = t.join();
        }
    }
}

/// Binds `bind:port` (port 0 picks a free one) and serves on a background
/// thread with its own runtime.
pub fn start(api: Arc<Api>, bind: &str, port: u16, token: Option<String>) -> io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind((bind, port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(Notify::new());
    let state = Arc::new(ServerState {
        api,
        token,
        stop: stop.clone(),
    });
    let app = Router::new().fallback(handle).with_state(state);
    let stop2 = stop.clone();
    let thread = thread::Builder::new().name("http".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(4)
            .enable_all()
            .build()?;
        let result = rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            tokio::select! {
                r = axum::serve(listener, app) => r,
                _ = stop2.notified() => Ok(()),
            }
        });
        rt.shutdown_timeout(Duration::from_secs(2));
        result
    })?;
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}
