//! The robot: a periodic pipeline of actions run through the session's
//! public operations.
//!
//! A pipeline in TOML:
//!
//! ```toml
//! period_s = 1.0
//! iterations = 2
//! output_dir = "robot-out"
//!
//! [[actions]]
//! action = "submit_saved"
//! templates = [{ id = 1, copies = 5 }]
//!
//! [[actions]]
//! action = "wait_complete"
//! timeout_s = 60
//!
//! [[actions]]
//! action = "extract_xml"
//!
//! [[actions]]
//! action = "render_report"
//! format = "html"
//! on_error = "abort"
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, Event};
use quick_xml::Writer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::job::{JobPatch, JobStatus};
use crate::persistence::{write_atomic, JobFilter};
use crate::session::Session;

/// Element and attribute set of the files written by `extract_xml`.
pub const ROBOT_RUN_XSD: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<xs:schema xmlns:xs="http://www.w3.org/2001/XMLSchema">
  <xs:element name="robot-run">
    <xs:complexType>
      <xs:sequence>
        <xs:element name="job" minOccurs="0" maxOccurs="unbounded">
          <xs:complexType>
            <xs:attribute name="id" type="xs:nonNegativeInteger" use="required"/>
            <xs:attribute name="name" type="xs:string" use="required"/>
            <xs:attribute name="status" use="required">
              <xs:simpleType>
                <xs:restriction base="xs:string">
                  <xs:enumeration value="new"/>
                  <xs:enumeration value="submitted"/>
                  <xs:enumeration value="running"/>
                  <xs:enumeration value="completed"/>
                  <xs:enumeration value="failed"/>
                  <xs:enumeration value="killed"/>
                </xs:restriction>
              </xs:simpleType>
            </xs:attribute>
            <xs:attribute name="backend" type="xs:string" use="required"/>
            <xs:attribute name="submitted" type="xs:dateTime"/>
            <xs:attribute name="finished" type="xs:dateTime"/>
            <xs:attribute name="duration_s" type="xs:decimal"/>
          </xs:complexType>
        </xs:element>
      </xs:sequence>
      <xs:attribute name="iteration" type="xs:positiveInteger" use="required"/>
      <xs:attribute name="timestamp" type="xs:dateTime" use="required"/>
    </xs:complexType>
  </xs:element>
</xs:schema>
"#;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionPolicy {
    /// Stop the pipeline.
    Abort,
    /// Record the error and go on with the next action.
    #[default]
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateCopies {
    pub id: u64,
    #[serde(default = "one")]
    pub copies: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Html,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ActionSpec {
    /// Instantiates templates, or copies the selected saved jobs, and
    /// submits the new jobs.
    SubmitSaved {
        #[serde(default)]
        templates: Vec<TemplateCopies>,
        #[serde(default)]
        select: Option<JobFilter>,
    },
    WaitComplete {
        timeout_s: f64,
    },
    ExtractXml,
    RenderReport {
        #[serde(default)]
        format: ReportFormat,
    },
    EmailStub {
        to: String,
        #[serde(default = "default_from")]
        from: String,
        #[serde(default = "default_subject")]
        subject: String,
        /// Defaults to `<output_dir>/outbox`.
        #[serde(default)]
        outbox: Option<PathBuf>,
    },
    /// An action registered with [`Robot::register_action`].
    Custom {
        name: String,
    },
}

fn default_from() -> String {
    "robot@localhost".into()
}

fn default_subject() -> String {
    "Robot report".into()
}

impl ActionSpec {
    pub fn name(&self) -> &str {
        match self {
            ActionSpec::SubmitSaved { .. } => "submit_saved",
            ActionSpec::WaitComplete { .. } => "wait_complete",
            ActionSpec::ExtractXml => "extract_xml",
            ActionSpec::RenderReport { .. } => "render_report",
            ActionSpec::EmailStub { .. } => "email_stub",
            ActionSpec::Custom { name } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEntry {
    #[serde(flatten)]
    pub spec: ActionSpec,
    #[serde(default)]
    pub on_error: ActionPolicy,
}

impl From<ActionSpec> for ActionEntry {
    fn from(spec: ActionSpec) -> Self {
        ActionEntry {
            spec,
            on_error: ActionPolicy::Continue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotPipeline {
    pub actions: Vec<ActionEntry>,
    pub period_s: f64,
    /// `None` runs until [`Robot::stop_flag`] is raised.
    #[serde(default)]
    pub iterations: Option<u32>,
    pub output_dir: PathBuf,
}

impl RobotPipeline {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigError(format!("robot pipeline: {e}")))
    }
}

/// State shared by the actions of one iteration.
pub struct RobotContext {
    pub session: Session,
    /// 1-based.
    pub iteration: u32,
    pub started_at: DateTime<Utc>,
    pub output_dir: PathBuf,
    /// Jobs submitted in this iteration.
    pub jobs: Vec<u64>,
    pub xml_path: Option<PathBuf>,
    pub report_text: Option<String>,
    pub report_path: Option<PathBuf>,
    pub outbox_path: Option<PathBuf>,
}

pub trait RobotAction: Send + Sync {
    fn run(&self, ctx: &mut RobotContext) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub id: u64,
    pub name: String,
    pub status: JobStatus,
    pub backend: String,
    pub submitted_at: Option<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionError {
    pub action: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub started_at: DateTime<Utc>,
    pub jobs: Vec<JobSummary>,
    pub total: usize,
    pub completed: usize,
    pub failed: usize,
    /// Over completed jobs, in seconds: (min, mean, max).
    pub time_to_result_s: Option<(f64, f64, f64)>,
    pub errors: Vec<ActionError>,
    pub xml_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub outbox_path: Option<PathBuf>,
}

impl IterationReport {
    pub fn success_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.completed as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotRunReport {
    pub iterations: Vec<IterationReport>,
    /// True when an `abort` action failed.
    pub aborted: bool,
}

fn summarize(session: &Session, ids: &[u64]) -> Vec<JobSummary> {
    ids.iter()
        .filter_map(|&id| session.job(id).ok())
        .map(|j| JobSummary {
            id: j.id,
            name: j.name.clone(),
            status: j.status,
            backend: j.backend.plugin.clone(),
            submitted_at: j.submitted_at,
            finished_at: j.finished_at,
            duration_s: match (j.submitted_at, j.finished_at) {
                (Some(s), Some(f)) => Some((f - s).num_milliseconds() as f64 / 1000.0),
                _ => None,
            },
        })
        .collect()
}

fn time_to_result(jobs: &[JobSummary]) -> Option<(f64, f64, f64)> {
    let d: Vec<f64> = jobs
        .iter()
        .filter(|j| j.status == JobStatus::Completed)
        .filter_map(|j| j.duration_s)
        .collect();
    if d.is_empty() {
        return None;
    }
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((min, d.iter().sum::<f64>() / d.len() as f64, max))
}

fn stamp(t: DateTime<Utc>) -> String {
    t.format("%Y%m%dT%H%M%S%.3fZ").to_string()
}

fn iso(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn failed(action: &str, reason: impl Into<String>) -> Error {
    Error::ActionFailed {
        action: action.to_string(),
        reason: reason.into(),
    }
}

fn io_failed<E: std::fmt::Display>(action: &str) -> impl Fn(E) -> Error + '_ {
    move |e| failed(action, e.to_string())
}

/// Renders the robot-run XML document for `jobs`.
pub fn robot_run_xml(iteration: u32, timestamp: DateTime<Utc>, jobs: &[JobSummary]) -> String {
    let mut w = Writer::new_with_indent(Cursor::new(Vec::new()), b' ', 2);
    let write = |w: &mut Writer<Cursor<Vec<u8>>>| -> std::io::Result<()> {
        w.write_event(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None)))?;
        let iter_s = iteration.to_string();
        let ts = iso(timestamp);
        let root = BytesStart::new("robot-run").with_attributes([("iteration", iter_s.as_str()), ("timestamp", ts.as_str())]);
        w.write_event(Event::Start(root))?;
        for j in jobs {
            let mut e = BytesStart::new("job");
            e.push_attribute(("id", j.id.to_string().as_str()));
            e.push_attribute(("name", j.name.as_str()));
            e.push_attribute(("status", j.status.as_str()));
            e.push_attribute(("backend", j.backend.as_str()));
            if let Some(t) = j.submitted_at {
                e.push_attribute(("submitted", iso(t).as_str()));
            }
            if let Some(t) = j.finished_at {
                e.push_attribute(("finished", iso(t).as_str()));
            }
            if let Some(d) = j.duration_s {
                e.push_attribute(("duration_s", format!("{d:.3}").as_str()));
            }
            w.write_event(Event::Empty(e))?;
        }
        w.write_event(Event::End(BytesEnd::new("robot-run")))?;
        Ok(())
    };
    write(&mut w).expect("writing to memory");
    let mut s = String::from_utf8(w.into_inner().into_inner()).expect("utf-8");
    s.push('\n');
    s
}

/// The success and timing summary in plain text.
pub fn render_text(iteration: u32, at: DateTime<Utc>, jobs: &[JobSummary]) -> String {
    let total = jobs.len();
    let completed = jobs.iter().filter(|j| j.status == JobStatus::Completed).count();
    let failed = jobs.iter().filter(|j| j.status == JobStatus::Failed).count();
    let mut s = format!("Robot report, iteration {iteration}, {}\n\n", iso(at));
    let rate = if total == 0 { 0.0 } else { 100.0 * completed as f64 / total as f64 };
    s += &format!("success: {completed}/{total} ({rate:.1}%)\n");
    s += &format!("failed: {failed}\n");
    match time_to_result(jobs) {
        Some((min, mean, max)) => s += &format!("time to result (s): min {min:.3} mean {mean:.3} max {max:.3}\n"),
        None => s += "time to result (s): n/a\n",
    }
    s += "\n";
    s += &format!("{:>6}  {:<20} {:<10} {:<12} {:>10}\n", "id", "name", "status", "backend", "duration_s");
    for j in jobs {
        let d = j.duration_s.map(|d| format!("{d:.3}")).unwrap_or_else(|| "-".into());
        s += &format!("{:>6}  {:<20} {:<10} {:<12} {:>10}\n", j.id, j.name, j.status.as_str(), j.backend, d);
    }
    s
}

pub fn render_html(iteration: u32, at: DateTime<Utc>, jobs: &[JobSummary]) -> String {
    use quick_xml::escape::escape;
    let total = jobs.len();
    let completed = jobs.iter().filter(|j| j.status == JobStatus::Completed).count();
    let mut s = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Robot report</title></head><body>\n");
    s += &format!("<h1>Robot report, iteration {iteration}</h1>\n<p>{}</p>\n", iso(at));
    s += &format!("<p class=\"success\">success: {completed}/{total}</p>\n");
    if let Some((min, mean, max)) = time_to_result(jobs) {
        s += &format!("<p class=\"ttr\">time to result (s): min {min:.3} mean {mean:.3} max {max:.3}</p>\n");
    }
    s += "<table>\n<tr><th>id</th><th>name</th><th>status</th><th>backend</th><th>duration_s</th></tr>\n";
    for j in jobs {
        let d = j.duration_s.map(|d| format!("{d:.3}")).unwrap_or_else(|| "-".into());
        s += &format!(
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{d}</td></tr>\n",
            j.id,
            escape(&j.name),
            j.status.as_str(),
            escape(&j.backend)
        );
    }
    s += "</table>\n</body></html>\n";
    s
}

fn submit_saved(ctx: &mut RobotContext, templates: &[TemplateCopies], select: Option<&JobFilter>) -> Result<()> {
    const NAME: &str = "submit_saved";
    let mut new_jobs = Vec::new();
    for t in templates {
        for _ in 0..t.copies {
            new_jobs.push(ctx.session.instantiate_template(t.id, &JobPatch::default()).map_err(io_failed(NAME))?);
        }
    }
    if let Some(filter) = select {
        for id in ctx.session.select_ids(filter).map_err(io_failed(NAME))? {
            new_jobs.push(ctx.session.copy_job(id, &JobPatch::default()).map_err(io_failed(NAME))?);
        }
    }
    let mut first_err = None;
    for j in new_jobs {
        ctx.jobs.push(j.id);
        if let Err(e) = ctx.session.submit(j.id) {
            first_err.get_or_insert(failed(NAME, format!("job {}: {e}", j.id)));
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn wait_complete(ctx: &mut RobotContext, timeout_s: f64) -> Result<()> {
    let deadline = Instant::now() + Duration::from_secs_f64(timeout_s.max(0.0));
    loop {
        ctx.session.refresh()?;
        let pending = ctx
            .jobs
            .iter()
            .filter(|&&id| ctx.session.job(id).map(|j| j.status.is_active()).unwrap_or(false))
            .count();
        if pending == 0 {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(failed("wait_complete", "timeout"));
        }
        thread::sleep(Duration::from_millis(50));
    }
}

fn extract_xml(ctx: &mut RobotContext) -> Result<()> {
    let now = ctx.session.clock().now();
    let jobs = summarize(&ctx.session, &ctx.jobs);
    let path = ctx
        .output_dir
        .join(format!("robot-run-{}-{}.xml", ctx.iteration, stamp(now)));
    write_atomic(&path, robot_run_xml(ctx.iteration, now, &jobs).as_bytes()).map_err(io_failed("extract_xml"))?;
    ctx.xml_path = Some(path);
    Ok(())
}

fn render_report(ctx: &mut RobotContext, format: ReportFormat) -> Result<()> {
    let now = ctx.session.clock().now();
    let jobs = summarize(&ctx.session, &ctx.jobs);
    let text = render_text(ctx.iteration, now, &jobs);
    let (body, ext) = match format {
        ReportFormat::Text => (text.clone(), "txt"),
        ReportFormat::Html => (render_html(ctx.iteration, now, &jobs), "html"),
    };
    let path = ctx
        .output_dir
        .join(format!("robot-report-{}-{}.{ext}", ctx.iteration, stamp(now)));
    write_atomic(&path, body.as_bytes()).map_err(io_failed("render_report"))?;
    ctx.report_text = Some(text);
    ctx.report_path = Some(path);
    Ok(())
}

fn email_stub(ctx: &mut RobotContext, to: &str, from: &str, subject: &str, outbox: Option<&Path>) -> Result<()> {
    let now = ctx.session.clock().now();
    let outbox = outbox.map(Path::to_path_buf).unwrap_or_else(|| ctx.output_dir.join("outbox"));
    let body = match &ctx.report_text {
        Some(t) => t.clone(),
        None => render_text(ctx.iteration, now, &summarize(&ctx.session, &ctx.jobs)),
    };
    let msg = format!(
        "From: {from}\r\nTo: {to}\r\nDate: {}\r\nSubject: {subject}\r\nContent-Type: text/plain; charset=utf-8\r\n\r\n{}",
        now.to_rfc2822(),
        body.replace('\n', "\r\n")
    );
    fs::create_dir_all(&outbox).map_err(io_failed("email_stub"))?;
    let path = outbox.join(format!("{}-{}.eml", stamp(now), ctx.iteration));
    write_atomic(&path, msg.as_bytes()).map_err(io_failed("email_stub"))?;
    ctx.outbox_path = Some(path);
    Ok(())
}

/// Runs pipelines against one session.
pub struct Robot {
    session: Session,
    custom: BTreeMap<String, Arc<dyn RobotAction>>,
    stop: Arc<AtomicBool>,
}

impl Robot {
    pub fn new(session: Session) -> Self {
        Robot {
            session,
            custom: BTreeMap::new(),
            stop: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn register_action(&mut self, name: &str, action: Arc<dyn RobotAction>) {
        self.custom.insert(name.to_string(), action);
    }

    /// Raising the flag ends the run after the current iteration.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn validate(&self, p: &RobotPipeline) -> Result<()> {
        if !(p.period_s > 0.0 && p.period_s.is_finite()) {
            return Err(Error::ConfigError("period_s must be positive".into()));
        }
        if p.iterations == Some(0) {
            return Err(Error::ConfigError("iterations must be at least 1".into()));
        }
        if p.actions.is_empty() {
            return Err(Error::ConfigError("a pipeline needs at least one action".into()));
        }
        let known: Vec<u64> = self.session.templates().iter().map(|t| t.template_id).collect();
        for a in &p.actions {
            match &a.spec {
                ActionSpec::Custom { name } if !self.custom.contains_key(name) => {
                    return Err(Error::ConfigError(format!("unknown robot action `{name}`")));
                }
                ActionSpec::SubmitSaved { templates, select } => {
                    if templates.is_empty() && select.is_none() {
                        return Err(Error::ConfigError("submit_saved needs templates or a selection".into()));
                    }
                    if let Some(t) = templates.iter().find(|t| !known.contains(&t.id)) {
                        return Err(Error::UnknownTemplate(t.id));
                    }
                    if let Some(f) = select {
                        f.compile()?;
                    }
                }
                ActionSpec::WaitComplete { timeout_s } if !(*timeout_s >= 0.0) => {
                    return Err(Error::ConfigError("timeout_s must not be negative".into()));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn run_action(&self, spec: &ActionSpec, ctx: &mut RobotContext) -> Result<()> {
        match spec {
            ActionSpec::SubmitSaved { templates, select } => submit_saved(ctx, templates, select.as_ref()),
            ActionSpec::WaitComplete { timeout_s } => wait_complete(ctx, *timeout_s),
            ActionSpec::ExtractXml => extract_xml(ctx),
            ActionSpec::RenderReport { format } => render_report(ctx, *format),
            ActionSpec::EmailStub { to, from, subject, outbox } => email_stub(ctx, to, from, subject, outbox.as_deref()),
            ActionSpec::Custom { name } => self.custom[name].run(ctx),
        }
    }

    pub fn run(&self, pipeline: &RobotPipeline) -> Result<RobotRunReport> {
        self.validate(pipeline)?;
        fs::create_dir_all(&pipeline.output_dir)?;
        let period = Duration::from_secs_f64(pipeline.period_s);
        let mut report = RobotRunReport {
            iterations: Vec::new(),
            aborted: false,
        };
        let mut iteration = 0u32;
        while pipeline.iterations.is_none_or(|n| iteration < n) && !self.stop.load(Ordering::SeqCst) {
            iteration += 1;
            let began = Instant::now();
            let mut ctx = RobotContext {
                session: self.session.clone(),
                iteration,
                started_at: self.session.clock().now(),
                output_dir: pipeline.output_dir.clone(),
                jobs: Vec::new(),
                xml_path: None,
                report_text: None,
                report_path: None,
                outbox_path: None,
            };
            let mut errors = Vec::new();
            for entry in &pipeline.actions {
                if let Err(e) = self.run_action(&entry.spec, &mut ctx) {
                    let (action, reason) = match e {
                        Error::ActionFailed { action, reason } => (action, reason),
                        other => (entry.spec.name().to_string(), other.to_string()),
                    };
                    log::warn!("robot iteration {iteration}: {action} failed: {reason}");
                    errors.push(ActionError { action, reason });
                    if entry.on_error == ActionPolicy::Abort {
                        report.aborted = true;
                        break;
                    }
                }
            }
            let jobs = summarize(&self.session, &ctx.jobs);
            report.iterations.push(IterationReport {
                iteration,
                started_at: ctx.started_at,
                total: jobs.len(),
                completed: jobs.iter().filter(|j| j.status == JobStatus::Completed).count(),
                failed: jobs.iter().filter(|j| j.status == JobStatus::Failed).count(),
                time_to_result_s: time_to_result(&jobs),
                jobs,
                errors,
                xml_path: ctx.xml_path,
                report_path: ctx.report_path,
                outbox_path: ctx.outbox_path,
            });
            if report.aborted {
                break;
            }
            let more = pipeline.iterations.is_none_or(|n| iteration < n);
            if more {
                let wait = period.saturating_sub(began.elapsed());
                let until = Instant::now() + wait;
                while Instant::now() < until && !self.stop.load(Ordering::SeqCst) {
                    thread::sleep(Duration::from_millis(20).min(until.saturating_duration_since(Instant::now())));
                }
            }
        }
        Ok(report)
    }
}

