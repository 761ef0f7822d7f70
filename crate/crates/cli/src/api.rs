//! Requests and JSON responses shared by the HTTP server and the CLI.
//!
//! Every operation is an [`ApiRequest`]. The server parses HTTP into one,
//! the CLI builds one from its arguments, and both hand it to
//! [`Api::handle`] (directly in embedded mode, over HTTP otherwise), so a
//! CLI `--json` output is the same bytes as the HTTP response body.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use jobfront::external::{job_json, schema_json};
use jobfront::persistence::{parse_id_range, JobFilter};
use jobfront::session::BulkVerb;
use jobfront::tasks::{Robot, RobotPipeline, RobotRunReport};
use jobfront::{Component, Error, JobPatch, JobRef, JobStatus, Session};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TreeOp {
    Mkdir { path: String },
    Add { path: String, id: u64 },
    Rm {
        path: String,
        #[serde(default)]
        recursive: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaveTemplate {
    pub job_id: u64,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRequest {
    #[serde(default)]
    pub merger: Option<Component>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenewRequest {
    #[serde(default)]
    pub ttl_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ApiRequest {
    ListJobs(JobFilter),
    GetJob(JobRef),
    CreateJob(JobPatch),
    UpdateJob(u64, JobPatch),
    Submit(u64),
    Kill(JobRef),
    Resubmit(JobRef),
    Copy(u64, JobPatch),
    Remove(u64),
    Peek { job: JobRef, file: String, lines: Option<usize> },
    Subjobs(u64),
    Merge(u64, MergeRequest),
    Wait { job: JobRef, timeout_s: f64 },
    Bulk(BulkVerb, JobFilter),
    Schemas,
    ListTemplates,
    SaveTemplate(SaveTemplate),
    NewFromTemplate(u64, JobPatch),
    TreeList(String),
    Tree(TreeOp),
    Credential,
    CredentialRenew(RenewRequest),
    CredentialDestroy,
    RobotRuns,
    RobotRun(RobotPipeline),
    Status,
    Shutdown,
}

/// Method, path, query pairs and JSON body of a request.
pub struct HttpForm {
    pub method: &'static str,
    pub path: String,
    pub query: Vec<(String, String)>,
    pub body: Option<Json>,
}

fn filter_query(f: &JobFilter) -> Vec<(String, String)> {
    let mut q = Vec::new();
    if let Some(s) = f.status {
        q.push(("status".into(), s.as_str().into()));
    }
    for (k, v) in [("name", &f.name), ("application", &f.application), ("backend", &f.backend)] {
        if let Some(v) = v {
            q.push((k.into(), v.clone()));
        }
    }
    if let Some((lo, hi)) = f.id_range {
        q.push(("ids".into(), format!("{lo}-{hi}")));
    }
    q
}

/// Parses the query parameters of `GET /jobs`.
pub fn filter_from_query(q: &BTreeMap<String, String>) -> Result<JobFilter, Error> {
    let mut f = JobFilter::default();
    for (k, v) in q {
        match k.as_str() {
            "status" => {
                f.status = Some(
                    v.parse::<JobStatus>()
                        .map_err(|_| Error::InvalidFilter(format!("unknown status `{v}`")))?,
                )
            }
            "name" => f.name = Some(v.clone()),
            "application" => f.application = Some(v.clone()),
            "backend" => f.backend = Some(v.clone()),
            "ids" => f.id_range = Some(parse_id_range(v)?),
            other => return Err(Error::InvalidFilter(format!("unknown filter `{other}`"))),
        }
    }
    Ok(f)
}

fn to_json<T: Serialize>(v: &T) -> Json {
    serde_json::to_value(v).expect("serializable")
}

impl ApiRequest {
    pub fn http(&self) -> HttpForm {
        let form = |method, path: String, query, body| HttpForm {
            method,
            path,
            query,
            body,
        };
        use ApiRequest::*;
        match self {
            ListJobs(f) => form("GET", "/jobs".into(), filter_query(f), None),
            GetJob(r) => form("GET", format!("/jobs/{r}"), vec![], None),
            CreateJob(p) => form("POST", "/jobs".into(), vec![], Some(to_json(p))),
            UpdateJob(id, p) => form("PATCH", format!("/jobs/{id}"), vec![], Some(to_json(p))),
            Submit(id) => form("POST", format!("/jobs/{id}/submit"), vec![], None),
            Kill(r) => form("POST", format!("/jobs/{r}/kill"), vec![], None),
            Resubmit(r) => form("POST", format!("/jobs/{r}/resubmit"), vec![], None),
            Copy(id, p) => form("POST", format!("/jobs/{id}/copy"), vec![], Some(to_json(p))),
            Remove(id) => form("DELETE", format!("/jobs/{id}"), vec![], None),
            Peek { job, file, lines } => {
                let mut q = vec![("file".to_string(), file.clone())];
                if let Some(n) = lines {
                    q.push(("lines".into(), n.to_string()));
                }
                form("GET", format!("/jobs/{job}/peek"), q, None)
            }
            Subjobs(id) => form("GET", format!("/jobs/{id}/subjobs"), vec![], None),
            Merge(id, m) => form("POST", format!("/jobs/{id}/merge"), vec![], Some(to_json(m))),
            Wait { job, timeout_s } => form(
                "POST",
                format!("/jobs/{job}/wait"),
                vec![("timeout_s".into(), timeout_s.to_string())],
                None,
            ),
            Bulk(verb, f) => form("POST", format!("/jobs/bulk/{}", to_json(verb).as_str().unwrap_or("")), vec![], Some(to_json(f))),
            Schemas => form("GET", "/schemas".into(), vec![], None),
            ListTemplates => form("GET", "/templates".into(), vec![], None),
            SaveTemplate(t) => form("POST", "/templates".into(), vec![], Some(to_json(t))),
            NewFromTemplate(tid, p) => form("POST", format!("/templates/{tid}/jobs"), vec![], Some(to_json(p))),
            TreeList(path) => form("GET", "/jobtree".into(), vec![("path".into(), path.clone())], None),
            Tree(op) => form("POST", "/jobtree".into(), vec![], Some(to_json(op))),
            Credential => form("GET", "/credential".into(), vec![], None),
            CredentialRenew(r) => form("POST", "/credential/renew".into(), vec![], Some(to_json(r))),
            CredentialDestroy => form("POST", "/credential/destroy".into(), vec![], None),
            RobotRuns => form("GET", "/robot/runs".into(), vec![], None),
            RobotRun(p) => form("POST", "/robot/run".into(), vec![], Some(to_json(p))),
            Status => form("GET", "/status".into(), vec![], None),
            Shutdown => form("POST", "/shutdown".into(), vec![], None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Json,
}

impl ApiResponse {
    pub fn ok(body: Json) -> Self {
        ApiResponse { status: 200, body }
    }

    pub fn created(body: Json) -> Self {
        ApiResponse { status: 201, body }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// The response body as sent on the wire.
    pub fn text(&self) -> String {
        render(&self.body)
    }
}

pub fn render(body: &Json) -> String {
    let mut s = serde_json::to_string_pretty(body).expect("serializable");
    s.push('\n');
    s
}

pub fn http_status(e: &Error) -> u16 {
    use Error::*;
    match e {
        UnknownJob(_) | UnknownTemplate(_) | UnknownPlugin { .. } | UnknownHandle(_) | PeekUnavailable(_) => 404,
        IllegalTransition { .. }
        | JobImmutable(_)
        | ReadOnly(_)
        | AlreadyFinished(_)
        | AlreadyRunning
        | LockHeld(_)
        | MergeIncomplete(_)
        | PathExists(_)
        | NotEmpty(_) => 409,
        ConfigError(_)
        | InvalidFilter(_)
        | InvalidCategory(_)
        | UnknownAttribute { .. }
        | AttributeNotVisible(_)
        | AttributeReadOnly(_)
        | TypeMismatch { .. }
        | NoHandler { .. }
        | QueueUnknown(_)
        | SplitterMismatch(_)
        | EmptySplit
        | EmptySubjobs
        | ShapeMismatch(_)
        | PathMissing(_)
        | FileMissing(_)
        | OutputMissing(_)
        | ActionFailed { .. } => 422,
        Gate(_) => 403,
        BackendUnavailable(_) | TransportError(_) | SubmitFailed(_) => 503,
        _ => 500,
    }
}

fn detail(e: &Error) -> Json {
    match e {
        Error::IllegalTransition { from, event } => json!({ "from": from, "event": event }),
        Error::TypeMismatch { attribute, expected } => json!({ "attribute": attribute, "expected": expected }),
        Error::UnknownAttribute { plugin, attribute } => json!({ "plugin": plugin, "attribute": attribute }),
        Error::NoHandler { application, backend } => json!({ "application": application, "backend": backend }),
        Error::MigrationGap { plugin, from } => json!({ "plugin": plugin, "from": from }),
        Error::ActionFailed { action, reason } => json!({ "action": action, "reason": reason }),
        _ => json!({}),
    }
}

pub fn error_body(code: &str, message: &str, detail: Json) -> Json {
    json!({ "code": code, "message": message, "detail": detail })
}

pub fn error_response(e: &Error) -> ApiResponse {
    ApiResponse {
        status: http_status(e),
        body: error_body(e.code(), &e.to_string(), detail(e)),
    }
}

/// A malformed request (bad path, query or body).
pub fn bad_request(message: impl Into<String>) -> ApiResponse {
    ApiResponse {
        status: 422,
        body: error_body("InvalidRequest", &message.into(), json!({})),
    }
}

pub struct Api {
    session: Session,
    /// Refresh job states before each request; used when no monitor runs
    /// in this process.
    refresh: bool,
    robot_runs: Mutex<Vec<RobotRunReport>>,
}

impl Api {
    pub fn new(session: Session, refresh: bool) -> Self {
        Api {
            session,
            refresh,
            robot_runs: Mutex::new(Vec::new()),
        }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn handle(&self, req: ApiRequest) -> ApiResponse {
        if self.refresh && !matches!(req, ApiRequest::Shutdown) {
            if let Err(e) = self.session.refresh() {
                log::warn!("refresh failed: {e}");
            }
        }
        self.dispatch(req).unwrap_or_else(|e| error_response(&e))
    }

    fn dispatch(&self, req: ApiRequest) -> Result<ApiResponse, Error> {
        let s = &self.session;
        let reg = s.registry();
        use ApiRequest::*;
        Ok(match req {
            ListJobs(f) => ApiResponse::ok(Json::Array(s.select(&f)?.iter().map(|j| job_json(reg, j)).collect())),
            GetJob(r) => ApiResponse::ok(job_json(reg, &s.get(r)?)),
            CreateJob(doc) => ApiResponse::created(job_json(reg, &s.create_job(&doc)?)),
            UpdateJob(id, p) => ApiResponse::ok(job_json(reg, &s.update_job(id, &p)?)),
            Submit(id) => ApiResponse::ok(job_json(reg, &s.submit(id)?)),
            Kill(r) => ApiResponse::ok(job_json(reg, &s.kill(r)?)),
            Resubmit(r) => ApiResponse::ok(job_json(reg, &s.resubmit(r)?)),
            Copy(id, p) => ApiResponse::created(job_json(reg, &s.copy_job(id, &p)?)),
            Remove(id) => {
                s.remove(id)?;
                ApiResponse::ok(json!({ "removed": id }))
            }
            Peek { job, file, lines } => {
                let content = s.peek(job, &file, lines)?;
                ApiResponse::ok(json!({ "job": job.to_string(), "file": file, "content": content }))
            }
            Subjobs(id) => {
                let j = s.job(id)?;
                ApiResponse::ok(Json::Array(j.subjobs.iter().map(|sj| job_json(reg, sj)).collect()))
            }
            Merge(id, m) => {
                let files: Vec<PathBuf> = s.merge(id, m.merger)?;
                ApiResponse::ok(json!({ "job": id, "files": files }))
            }
            Wait { job, timeout_s } => {
                let t = Duration::from_secs_f64(timeout_s.clamp(0.0, 86_400.0));
                ApiResponse::ok(job_json(reg, &s.wait(job, t)?))
            }
            Bulk(verb, f) => ApiResponse::ok(to_json(&s.bulk(verb, &f)?)),
            Schemas => ApiResponse::ok(Json::Array(reg.list_plugins(None).into_iter().map(schema_json).collect())),
            ListTemplates => ApiResponse::ok(Json::Array(
                s.templates()
                    .iter()
                    .map(|t| json!({ "template_id": t.template_id, "name": t.name, "job": job_json(reg, &t.payload) }))
                    .collect(),
            )),
            SaveTemplate(t) => {
                let t = s.save_template(t.job_id, &t.name)?;
                ApiResponse::created(json!({ "template_id": t.template_id, "name": t.name, "job": job_json(reg, &t.payload) }))
            }
            NewFromTemplate(tid, p) => ApiResponse::created(job_json(reg, &s.instantiate_template(tid, &p)?)),
            TreeList(path) => ApiResponse::ok(to_json(&s.tree_list(&path)?)),
            Tree(op) => {
                let path = match &op {
                    TreeOp::Mkdir { path } => {
                        s.tree_mkdir(path)?;
                        path
                    }
                    TreeOp::Add { path, id } => {
                        s.tree_add(path, *id)?;
                        path
                    }
                    TreeOp::Rm { path, recursive } => {
                        s.tree_rm(path, *recursive)?;
                        path
                    }
                };
                let parent = match &op {
                    TreeOp::Rm { .. } => path.rsplit_once('/').map(|(p, _)| if p.is_empty() { "/" } else { p }).unwrap_or("/"),
                    _ => path.as_str(),
                };
                ApiResponse::ok(to_json(&s.tree_list(parent)?))
            }
            Credential => ApiResponse::ok(to_json(&s.credential_check())),
            CredentialRenew(r) => ApiResponse::ok(to_json(&s.credential_renew(r.ttl_s))),
            CredentialDestroy => ApiResponse::ok(to_json(&s.credential_destroy())),
            RobotRuns => ApiResponse::ok(to_json(&*self.robot_runs.lock().unwrap())),
            RobotRun(p) => {
                let report = Robot::new(s.clone()).run(&p)?;
                self.robot_runs.lock().unwrap().push(report.clone());
                ApiResponse::ok(to_json(&report))
            }
            Status => ApiResponse::ok(json!({
                "pid": std::process::id(),
                "repository": s.config().repository_root,
                "jobs": s.job_count(),
                "monitor_running": s.monitor_running(),
                "last_event_seq": s.bus().last_seq(),
            })),
            Shutdown => ApiResponse::ok(json!({ "shutdown": true })),
        })
    }
}
