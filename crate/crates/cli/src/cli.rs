//! Command-line parsing, dispatch and output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use jobfront::persistence::{parse_id_range, JobFilter};
use jobfront::session::BulkVerb;
use jobfront::tasks::RobotPipeline;
use jobfront::{JobPatch, JobRef, JobStatus, Session};
use serde_json::{json, Map, Value as Json};

use crate::api::{error_body, render, Api, ApiRequest, MergeRequest, RenewRequest, SaveTemplate, TreeOp};
use crate::client::Client;
use crate::config::{self, ConfigFile};
use crate::server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_API: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DAEMON_FILE: &str = "daemon.json";

#[derive(Parser, Debug)]
#[command(name = "jobfront", version, about = "Define jobs once, run them on any backend")]
pub struct Cli {
    /// Extra configuration file, applied after site, workgroup and user files.
    #[arg(long = "config", global = true, value_name = "FILE")]
    pub configs: Vec<PathBuf>,
    /// Configuration override, e.g. `monitor.default_poll_rate_s=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, global = true, value_name = "PATH")]
    pub repo: Option<PathBuf>,
    /// Daemon URL; defaults to the configured http address.
    #[arg(long, global = true)]
    pub url: Option<String>,
    #[arg(long, global = true)]
    pub token: Option<String>,
    /// Open the repository in this process instead of talking to a daemon.
    #[arg(long, global = true)]
    pub embedded: bool,
    /// Print response bodies as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Single-job operations.
    #[command(subcommand)]
    Job(JobCmd),
    /// Operations on selections of jobs.
    #[command(subcommand)]
    Jobs(JobsCmd),
    #[command(subcommand)]
    Template(TemplateCmd),
    #[command(subcommand)]
    Tree(TreeCmd),
    #[command(subcommand)]
    Cred(CredCmd),
    #[command(subcommand)]
    Robot(RobotCmd),
    /// Plugin schemas.
    Schemas,
    /// Print monitoring events.
    Events {
        #[arg(long)]
        since: Option<u64>,
        #[arg(long)]
        follow: bool,
    },
    #[command(subcommand)]
    Daemon(DaemonCmd),
    /// Print the merged configuration.
    Config,
}

#[derive(Args, Debug, Default)]
pub struct JobDoc {
    /// Application type.
    #[arg(long)]
    pub app: Option<String>,
    #[arg(long)]
    pub exe: Option<String>,
    #[arg(long = "arg", allow_hyphen_values = true)]
    pub args: Vec<String>,
    #[arg(long = "env", value_name = "K=V")]
    pub env: Vec<String>,
    /// Backend type.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub splitter: Option<String>,
    #[arg(long)]
    pub merger: Option<String>,
    #[arg(long = "input-sandbox")]
    pub input_sandbox: Vec<PathBuf>,
    #[arg(long = "output-sandbox")]
    pub output_sandbox: Vec<String>,
    /// Component attribute, e.g. `backend.queue=long` or
    /// `splitter.args=[["a"],["b"]]` (JSON values, else strings).
    #[arg(long = "attr", value_name = "SLOT.ATTR=VALUE")]
    pub attrs: Vec<String>,
    /// JSON or TOML job document to start from.
    #[arg(long = "from", value_name = "FILE")]
    pub from: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct FilterArgs {
    #[arg(long)]
    pub status: Option<String>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub application: Option<String>,
    #[arg(long)]
    pub backend: Option<String>,
    /// Id range `lo-hi` or a single id.
    #[arg(long)]
    pub ids: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum JobCmd {
    Create(JobDoc),
    Submit { id: u64 },
    Kill { job: String },
    Resubmit { job: String },
    Copy {
        id: u64,
        #[command(flatten)]
        doc: JobDoc,
    },
    Rm { id: u64 },
    Show { job: String },
    Peek {
        job: String,
        #[arg(default_value = "stdout")]
        file: String,
        #[arg(long)]
        lines: Option<usize>,
    },
    Wait {
        job: String,
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
    },
    Subjobs { id: u64 },
    Merge {
        id: u64,
        /// Merger type; the job's own merger or TextMerger by default.
        #[arg(long)]
        merger: Option<String>,
    },
    /// Edit a job that has not been submitted.
    Update {
        id: u64,
        #[command(flatten)]
        doc: JobDoc,
    },
}

#[derive(Subcommand, Debug)]
pub enum JobsCmd {
    List(FilterArgs),
    Submit(FilterArgs),
    Kill(FilterArgs),
    Resubmit(FilterArgs),
    Rm(FilterArgs),
}

#[derive(Subcommand, Debug)]
pub enum TemplateCmd {
    Save {
        id: u64,
        #[arg(long, default_value = "")]
        name: String,
    },
    List,
    NewFrom {
        template_id: u64,
        #[command(flatten)]
        doc: JobDoc,
    },
}

#[derive(Subcommand, Debug)]
pub enum TreeCmd {
    Mkdir { path: String },
    Add { path: String, id: u64 },
    Ls {
        #[arg(default_value = "/")]
        path: String,
    },
    Rm {
        path: String,
        #[arg(short, long)]
        recursive: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum CredCmd {
    Status,
    Renew {
        #[arg(long)]
        ttl: Option<f64>,
    },
    Destroy,
}

#[derive(Subcommand, Debug)]
pub enum RobotCmd {
    /// Run a pipeline file (TOML, or JSON with a .json extension).
    Run { pipeline: PathBuf },
    Runs,
}

#[derive(Subcommand, Debug)]
pub enum DaemonCmd {
    /// Start a daemon in the background.
    Start,
    Stop,
    Status,
    /// Serve in the foreground.
    Run,
}

struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn api_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_API,
        message: message.into(),
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_config(cli: &Cli) -> Result<ConfigFile, Failure> {
    let mut paths = config::standard_files();
    paths.extend(cli.configs.iter().cloned());
    let layers = config::read_layers(&paths).map_err(|e| usage(e.to_string()))?;
    let mut flags = Vec::new();
    for s in &cli.sets {
        flags.push(config::flag_override(s).map_err(|e| usage(e.to_string()))?);
    }
    if let Some(r) = &cli.repo {
        flags.push(
            config::flag_override(&format!("repository_root={}", toml::Value::String(r.display().to_string())))
                .map_err(|e| usage(e.to_string()))?,
        );
    }
    config::load(&layers, &flags).map_err(|e| usage(e.to_string()))
}

fn init_logging(verbose: bool) {
    let level = if verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_millis()
        .try_init();
}

enum Transport {
    Embedded(Api),
    Http(Client),
}

impl Transport {
    /// Status and body text of `req`.
    fn call(&self, req: ApiRequest) -> Result<(u16, String), Failure> {
        match self {
            Transport::Embedded(api) => {
                let r = api.handle(req);
                Ok((r.status, r.text()))
            }
            Transport::Http(c) => c.send(&req).map(|r| (r.status, r.body)).map_err(|e| {
                api_failure(format!(
                    "DaemonUnreachable: cannot reach {} ({e}); start it with `jobfront daemon start` or use --embedded",
                    c.base()
                ))
            }),
        }
    }
}

fn daemon_url(cfg: &ConfigFile, cli: &Cli) -> String {
    if let Some(u) = &cli.url {
        return u.clone();
    }
    let info = cfg.repository_root.join(DAEMON_FILE);
    fs::read_to_string(info)
        .ok()
        .and_then(|t| serde_json::from_str::<Json>(&t).ok())
        .and_then(|v| v["url"].as_str().map(str::to_string))
        .unwrap_or_else(|| cfg.base_url())
}

fn transport(cfg: &ConfigFile, cli: &Cli) -> Result<Transport, Failure> {
    if cli.embedded {
        let session = Session::open(cfg.session_config()).map_err(|e| api_failure(format!("{}: {e}", e.code())))?;
        Ok(Transport::Embedded(Api::new(session, true)))
    } else {
        let token = cli.token.clone().or_else(|| cfg.http.token.clone());
        Ok(Transport::Http(Client::new(&daemon_url(cfg, cli), token)))
    }
}

fn execute(cli: &Cli) -> Result<i32, Failure> {
    let cfg = load_config(cli)?;
    init_logging(cli.verbose || cfg.verbose);
    match &cli.command {
        Cmd::Config => {
            print!("{}", toml::to_string_pretty(&cfg).map_err(|e| usage(e.to_string()))?);
            return Ok(EXIT_OK);
        }
        Cmd::Daemon(d) => return daemon(cli, &cfg, d),
        Cmd::Events { since, follow } => return events(cli, &cfg, *since, *follow),
        _ => {}
    }
    let req = build_request(&cli.command)?;
    let t = transport(&cfg, cli)?;
    let (status, body) = t.call(req)?;
    let ok = (200..300).contains(&status);
    if cli.json {
        print!("{body}");
    } else {
        let v: Json = serde_json::from_str(&body).unwrap_or(Json::Null);
        if ok {
            print!("{}", human(&cli.command, &v));
        } else {
            eprintln!(
                "error: {}: {}",
                v["code"].as_str().unwrap_or("Error"),
                v["message"].as_str().unwrap_or(&body)
            );
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_API })
}

fn parse_ref(s: &str) -> Result<JobRef, Failure> {
    s.parse().map_err(|_| usage(format!("`{s}` is not a job id")))
}

fn filter(f: &FilterArgs) -> Result<JobFilter, Failure> {
    Ok(JobFilter {
        status: match &f.status {
            Some(s) => Some(s.parse::<JobStatus>().map_err(|_| usage(format!("unknown status `{s}`")))?),
            None => None,
        },
        name: f.name.clone(),
        application: f.application.clone(),
        backend: f.backend.clone(),
        id_range: match &f.ids {
            Some(r) => Some(parse_id_range(r).map_err(|e| usage(e.to_string()))?),
            None => None,
        },
    })
}

fn component(slot: &mut Map<String, Json>, name: &str, plugin: &Option<String>) {
    if let Some(p) = plugin {
        let c = slot.entry(name).or_insert_with(|| json!({}));
        if c.get("type").and_then(Json::as_str) != Some(p) {
            *c = json!({ "type": p });
        }
    }
}

fn read_document(path: &Path) -> Result<Json, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    } else {
        let t: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| usage(e.to_string()))
    }
}

/// Builds a job document from flags. `defaults` supplies application and
/// backend types for new jobs.
fn job_patch(doc: &JobDoc, defaults: bool) -> Result<JobPatch, Failure> {
    let mut m = match &doc.from {
        Some(p) => match read_document(p)? {
            Json::Object(m) => m,
            _ => return Err(usage("a job document must be a table")),
        },
        None => Map::new(),
    };
    let app = doc.app.clone().or_else(|| {
        (defaults && !m.contains_key("application")).then(|| "Executable".to_string())
    });
    let backend = doc
        .backend
        .clone()
        .or_else(|| (defaults && !m.contains_key("backend")).then(|| "Local".to_string()));
    component(&mut m, "application", &app);
    component(&mut m, "backend", &backend);
    component(&mut m, "splitter", &doc.splitter);
    component(&mut m, "merger", &doc.merger);
    let app_needed = doc.exe.is_some() || !doc.args.is_empty() || !doc.env.is_empty();
    if app_needed && !m.contains_key("application") {
        return Err(usage("--exe, --arg and --env need --app"));
    }
    if let Some(a) = m.get_mut("application").and_then(Json::as_object_mut) {
        if let Some(e) = &doc.exe {
            a.insert("exe".into(), json!(e));
        }
        if !doc.args.is_empty() {
            a.insert("args".into(), json!(doc.args));
        }
        if !doc.env.is_empty() {
            let mut env = Map::new();
            for kv in &doc.env {
                let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("`{kv}` is not K=V")))?;
                env.insert(k.into(), json!(v));
            }
            a.insert("env".into(), Json::Object(env));
        }
    }
    if let Some(n) = &doc.name {
        m.insert("name".into(), json!(n));
    }
    if !doc.input_sandbox.is_empty() {
        m.insert("input_sandbox".into(), json!(doc.input_sandbox));
    }
    if !doc.output_sandbox.is_empty() {
        m.insert("output_sandbox".into(), json!(doc.output_sandbox));
    }
    for a in &doc.attrs {
        let (path, raw) = a.split_once('=').ok_or_else(|| usage(format!("`{a}` is not SLOT.ATTR=VALUE")))?;
        let (slot, attr) = path
            .split_once('.')
            .ok_or_else(|| usage(format!("`{path}` is not SLOT.ATTR")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| json!(raw));
        let c = m
            .get_mut(slot)
            .and_then(Json::as_object_mut)
            .ok_or_else(|| usage(format!("set the {slot} type before its attributes")))?;
        c.insert(attr.into(), value);
    }
    serde_json::from_value(Json::Object(m)).map_err(|e| usage(format!("job document: {e}")))
}

fn build_request(cmd: &Cmd) -> Result<ApiRequest, Failure> {
    use ApiRequest as R;
    Ok(match cmd {
        Cmd::Job(j) => match j {
            JobCmd::Create(doc) => R::CreateJob(job_patch(doc, true)?),
            JobCmd::Submit { id } => R::Submit(*id),
            JobCmd::Kill { job } => R::Kill(parse_ref(job)?),
            JobCmd::Resubmit { job } => R::Resubmit(parse_ref(job)?),
            JobCmd::Copy { id, doc } => R::Copy(*id, job_patch(doc, false)?),
            JobCmd::Rm { id } => R::Remove(*id),
            JobCmd::Show { job } => R::GetJob(parse_ref(job)?),
            JobCmd::Peek { job, file, lines } => R::Peek {
                job: parse_ref(job)?,
                file: file.clone(),
                lines: *lines,
            },
            JobCmd::Wait { job, timeout } => R::Wait {
                job: parse_ref(job)?,
                timeout_s: *timeout,
            },
            JobCmd::Subjobs { id } => R::Subjobs(*id),
            JobCmd::Merge { id, merger } => R::Merge(
                *id,
                MergeRequest {
                    merger: merger.as_ref().map(|m| jobfront::Component::new(m)),
                },
            ),
            JobCmd::Update { id, doc } => R::UpdateJob(*id, job_patch(doc, false)?),
        },
        Cmd::Jobs(j) => match j {
            JobsCmd::List(f) => R::ListJobs(filter(f)?),
            JobsCmd::Submit(f) => R::Bulk(BulkVerb::Submit, filter(f)?),
            JobsCmd::Kill(f) => R::Bulk(BulkVerb::Kill, filter(f)?),
            JobsCmd::Resubmit(f) => R::Bulk(BulkVerb::Resubmit, filter(f)?),
            JobsCmd::Rm(f) => R::Bulk(BulkVerb::Remove, filter(f)?),
        },
        Cmd::Template(t) => match t {
            TemplateCmd::Save { id, name } => R::SaveTemplate(SaveTemplate {
                job_id: *id,
                name: name.clone(),
            }),
            TemplateCmd::List => R::ListTemplates,
            TemplateCmd::NewFrom { template_id, doc } => R::NewFromTemplate(*template_id, job_patch(doc, false)?),
        },
        Cmd::Tree(t) => match t {
            TreeCmd::Mkdir { path } => R::Tree(TreeOp::Mkdir { path: path.clone() }),
            TreeCmd::Add { path, id } => R::Tree(TreeOp::Add {
                path: path.clone(),
                id: *id,
            }),
            TreeCmd::Ls { path } => R::TreeList(path.clone()),
            TreeCmd::Rm { path, recursive } => R::Tree(TreeOp::Rm {
                path: path.clone(),
                recursive: *recursive,
            }),
        },
        Cmd::Cred(c) => match c {
            CredCmd::Status => R::Credential,
            CredCmd::Renew { ttl } => R::CredentialRenew(RenewRequest { ttl_s: *ttl }),
            CredCmd::Destroy => R::CredentialDestroy,
        },
        Cmd::Robot(r) => match r {
            RobotCmd::Run { pipeline } => {
                let doc = read_document(pipeline)?;
                let p: RobotPipeline =
                    serde_json::from_value(doc).map_err(|e| usage(format!("{}: {e}", pipeline.display())))?;
                R::RobotRun(p)
            }
            RobotCmd::Runs => R::RobotRuns,
        },
        Cmd::Schemas => R::Schemas,
        Cmd::Events { .. } | Cmd::Daemon(_) | Cmd::Config => unreachable!("handled before"),
    })
}

// ---- human-readable output ------------------------------------------------

fn s(v: &Json) -> String {
    match v {
        Json::String(s) => s.clone(),
        Json::Null => "-".into(),
        other => other.to_string(),
    }
}

fn component_line(c: &Json) -> String {
    let Some(m) = c.as_object() else {
        return "-".into();
    };
    let mut out = s(&m["type"]);
    for (k, v) in m {
        if k != "type" {
            out += &format!(" {k}={}", s(v));
        }
    }
    out
}

fn subjob_summary(j: &Json) -> String {
    let total = j["subjobs"]["total"].as_u64().unwrap_or(0);
    if total == 0 {
        return "-".into();
    }
    let done = j["subjobs"]["by_status"]["completed"].as_u64().unwrap_or(0);
    format!("{done}/{total}")
}

fn job_table(jobs: &[Json]) -> String {
    let mut out = format!(
        "{:>6}  {:<16} {:<10} {:<12} {:<10} {:<22} {:>8}\n",
        "id", "name", "status", "application", "backend", "queue/host", "subjobs"
    );
    for j in jobs {
        let h = &j["backend_handle"];
        let place = h["actual_queue"]
            .as_str()
            .or(h["actual_host"].as_str())
            .unwrap_or("-");
        out += &format!(
            "{:>6}  {:<16} {:<10} {:<12} {:<10} {:<22} {:>8}\n",
            s(&j["fqid"]),
            j["name"].as_str().unwrap_or(""),
            s(&j["status"]),
            s(&j["application"]["type"]),
            s(&j["backend"]["type"]),
            place,
            subjob_summary(j)
        );
    }
    out
}

fn job_details(j: &Json) -> String {
    let mut out = String::new();
    for k in ["fqid", "name", "status"] {
        out += &format!("{k:<14} {}\n", s(&j[k]));
    }
    for k in ["application", "backend", "inputdata", "outputdata", "splitter", "merger"] {
        if !j[k].is_null() {
            out += &format!("{k:<14} {}\n", component_line(&j[k]));
        }
    }
    for k in ["created_at", "submitted_at", "finished_at"] {
        out += &format!("{k:<14} {}\n", s(&j[k]));
    }
    if let Some(code) = j["backend_handle"]["exit_code"].as_i64() {
        out += &format!("{:<14} {code}\n", "exit_code");
    }
    if subjob_summary(j) != "-" {
        out += &format!("{:<14} {} completed\n", "subjobs", subjob_summary(j));
    }
    out
}

fn tree_listing(t: &Json) -> String {
    let mut out = format!("{}\n", s(&t["path"]));
    for c in t["children"].as_array().into_iter().flatten() {
        out += &format!("  {}/\n", s(c));
    }
    for id in t["job_ids"].as_array().into_iter().flatten() {
        out += &format!("  job {id}\n");
    }
    out
}

fn bulk_lines(v: &Json) -> String {
    let mut out = String::new();
    for o in v.as_array().into_iter().flatten() {
        out += &format!("job {:>5}: {}", s(&o["id"]), s(&o["result"]));
        if let Some(st) = o["status"].as_str() {
            out += &format!(" ({st})");
        }
        if let Some(m) = o["message"].as_str() {
            out += &format!(": {m}");
        }
        out.push('\n');
    }
    out
}

fn credential(v: &Json) -> String {
    format!(
        "{} {} remaining {:.0}s of {:.0}s\n",
        s(&v["label"]),
        s(&v["state"]),
        v["remaining_s"].as_f64().unwrap_or(0.0),
        v["ttl_s"].as_f64().unwrap_or(0.0)
    )
}

fn robot_report(v: &Json) -> String {
    let mut out = String::new();
    for it in v["iterations"].as_array().into_iter().flatten() {
        out += &format!(
            "iteration {}: {}/{} completed, {} failed",
            s(&it["iteration"]),
            s(&it["completed"]),
            s(&it["total"]),
            s(&it["failed"])
        );
        if let Some(t) = it["time_to_result_s"].as_array() {
            let f = |i: usize| t.get(i).and_then(Json::as_f64).unwrap_or(0.0);
            out += &format!("; time to result min {:.3}s mean {:.3}s max {:.3}s", f(0), f(1), f(2));
        }
        out.push('\n');
        for e in it["errors"].as_array().into_iter().flatten() {
            out += &format!("  {} failed: {}\n", s(&e["action"]), s(&e["reason"]));
        }
        for k in ["xml_path", "report_path", "outbox_path"] {
            if let Some(p) = it[k].as_str() {
                out += &format!("  {k}: {p}\n");
            }
        }
    }
    out
}

fn human(cmd: &Cmd, v: &Json) -> String {
    let list = |v: &Json| v.as_array().cloned().unwrap_or_default();
    match cmd {
        Cmd::Job(JobCmd::Peek { .. }) => v["content"].as_str().unwrap_or("").to_string(),
        Cmd::Job(JobCmd::Create(_)) | Cmd::Job(JobCmd::Copy { .. }) | Cmd::Template(TemplateCmd::NewFrom { .. }) => {
            format!("created job {}\n", s(&v["id"]))
        }
        Cmd::Job(JobCmd::Rm { .. }) => format!("removed job {}\n", s(&v["removed"])),
        Cmd::Job(JobCmd::Show { .. }) | Cmd::Job(JobCmd::Wait { .. }) | Cmd::Job(JobCmd::Update { .. }) => job_details(v),
        Cmd::Job(JobCmd::Submit { .. }) | Cmd::Job(JobCmd::Kill { .. }) | Cmd::Job(JobCmd::Resubmit { .. }) => {
            format!("job {} {}\n", s(&v["fqid"]), s(&v["status"]))
        }
        Cmd::Job(JobCmd::Subjobs { .. }) | Cmd::Jobs(JobsCmd::List(_)) => job_table(&list(v)),
        Cmd::Job(JobCmd::Merge { .. }) => list(&v["files"]).iter().map(|f| format!("{}\n", s(f))).collect(),
        Cmd::Jobs(_) => bulk_lines(v),
        Cmd::Template(TemplateCmd::Save { .. }) => format!("saved template {}\n", s(&v["template_id"])),
        Cmd::Template(TemplateCmd::List) => list(v)
            .iter()
            .map(|t| format!("{:>4}  {:<20} {}\n", s(&t["template_id"]), s(&t["name"]), component_line(&t["job"]["application"])))
            .collect(),
        Cmd::Tree(_) => tree_listing(v),
        Cmd::Cred(_) => credential(v),
        Cmd::Robot(RobotCmd::Run { .. }) => robot_report(v),
        Cmd::Robot(RobotCmd::Runs) => list(v).iter().map(robot_report).collect(),
        Cmd::Schemas => list(v)
            .iter()
            .map(|p| {
                let attrs: Vec<String> = list(&p["attributes"])
                    .iter()
                    .map(|a| format!("{}:{}", s(&a["name"]), s(&a["value_type"])))
                    .collect();
                format!("{:<12} {:<20} v{}  {}\n", s(&p["category"]), s(&p["plugin_name"]), s(&p["version"]), attrs.join(" "))
            })
            .collect(),
        Cmd::Events { .. } | Cmd::Daemon(_) | Cmd::Config => render(v),
    }
}

// ---- events and daemon ------------------------------------------------------

fn events(cli: &Cli, cfg: &ConfigFile, since: Option<u64>, follow: bool) -> Result<i32, Failure> {
    if cli.embedded {
        return Err(usage("events need a running daemon"));
    }
    let token = cli.token.clone().or_else(|| cfg.http.token.clone());
    let client = Client::new(&daemon_url(cfg, cli), token);
    let status = client
        .events(since, follow, |line| {
            println!("{line}");
            true
        })
        .map_err(|e| api_failure(format!("DaemonUnreachable: {e}")))?;
    Ok(if (200..300).contains(&status) { EXIT_OK } else { EXIT_API })
}

fn daemon(cli: &Cli, cfg: &ConfigFile, cmd: &DaemonCmd) -> Result<i32, Failure> {
    let token = cli.token.clone().or_else(|| cfg.http.token.clone());
    match cmd {
        DaemonCmd::Run => daemon_run(cfg),
        DaemonCmd::Start => {
            let client = Client::new(&daemon_url(cfg, cli), token.clone());
            if client.send(&ApiRequest::Status).is_ok_and(|r| r.status == 200) {
                return Err(api_failure(format!("AlreadyRunning: a daemon answers at {}", client.base())));
            }
            fs::create_dir_all(&cfg.repository_root).map_err(|e| api_failure(e.to_string()))?;
            let log = fs::File::create(cfg.repository_root.join("daemon.log")).map_err(|e| api_failure(e.to_string()))?;
            let exe = std::env::current_exe().map_err(|e| api_failure(e.to_string()))?;
            let mut cmd = Command::new(exe);
            for c in &cli.configs {
                cmd.arg("--config").arg(c);
            }
            for s in &cli.sets {
                cmd.arg("--set").arg(s);
            }
            if let Some(r) = &cli.repo {
                cmd.arg("--repo").arg(r);
            }
            if cli.verbose {
                cmd.arg("--verbose");
            }
            cmd.args(["daemon", "run"])
                .stdin(Stdio::null())
                .stdout(log.try_clone().map_err(|e| api_failure(e.to_string()))?)
                .stderr(log);
            {
                use std::os::unix::process::CommandExt;
                cmd.process_group(0);
            }
            let mut child = cmd.spawn().map_err(|e| api_failure(e.to_string()))?;
            let info = cfg.repository_root.join(DAEMON_FILE);
            let deadline = Instant::now() + Duration::from_secs(15);
            while Instant::now() < deadline {
                if let Ok(Some(status)) = child.try_wait() {
                    return Err(api_failure(format!(
                        "daemon exited with {status}; see {}",
                        cfg.repository_root.join("daemon.log").display()
                    )));
                }
                if info.is_file() {
                    let c = Client::new(&daemon_url(cfg, cli), token.clone());
                    if let Ok(r) = c.send(&ApiRequest::Status) {
                        if cli.json {
                            print!("{}", r.body);
                        } else {
                            println!("daemon {} listening on {}", child.id(), c.base());
                        }
                        return Ok(EXIT_OK);
                    }
                }
                thread::sleep(Duration::from_millis(50));
            }
            Err(api_failure("daemon did not come up in time"))
        }
        DaemonCmd::Stop | DaemonCmd::Status => {
            let client = Client::new(&daemon_url(cfg, cli), token);
            let req = if matches!(cmd, DaemonCmd::Stop) { ApiRequest::Shutdown } else { ApiRequest::Status };
            match client.send(&req) {
                Ok(r) => {
                    if cli.json || matches!(cmd, DaemonCmd::Status) {
                        print!("{}", r.body);
                    } else {
                        println!("daemon stopping");
                    }
                    Ok(if (200..300).contains(&r.status) { EXIT_OK } else { EXIT_API })
                }
                Err(e) => {
                    if cli.json {
                        print!(
                            "{}",
                            render(&error_body("DaemonUnreachable", &e.to_string(), json!({ "url": client.base() })))
                        );
                    }
                    Err(api_failure(format!("DaemonUnreachable: no daemon at {} ({e})", client.base())))
                }
            }
        }
    }
}

fn daemon_run(cfg: &ConfigFile) -> Result<i32, Failure> {
    let session = Session::open(cfg.session_config()).map_err(|e| api_failure(format!("{}: {e}", e.code())))?;
    session
        .start_monitor()
        .map_err(|e| api_failure(format!("{}: {e}", e.code())))?;
    let api = Arc::new(Api::new(session.clone(), false));
    let handle = server::start(api, &cfg.http.bind, cfg.http.port, cfg.http.token.clone())
        .map_err(|e| api_failure(format!("cannot listen on {}:{}: {e}", cfg.http.bind, cfg.http.port)))?;
    let info = cfg.repository_root.join(DAEMON_FILE);
    let doc = json!({ "pid": std::process::id(), "url": handle.url() });
    jobfront::persistence::write_atomic(&info, render(&doc).as_bytes()).map_err(|e| api_failure(e.to_string()))?;
    log::info!("listening on {}", handle.url());
    let result = handle.wait();
    let _ = fs::remove_file(&info);
    session.close();
    result.map_err(|e| api_failure(e.to_string()))?;
    Ok(EXIT_OK)
}
