//! JSON views of jobs and plugin schemas as shown to users and clients.
//! Only visible attributes appear.

use serde_json::{json, Map, Value as Json};

use crate::job::Job;
use crate::persistence::COMPONENT_SLOTS;
use crate::plugins::{Category, Component, PluginRegistry, PluginSchema};

fn component_json(registry: &PluginRegistry, category: Category, c: &Component) -> Json {
    match registry.proxy_view(category, c) {
        Ok(view) => view.to_json(),
        // Unknown plugins only occur in read-only jobs; show what is stored.
        Err(_) => {
            let mut m = Map::new();
            m.insert("type".into(), Json::String(c.plugin.clone()));
            for (k, v) in &c.attrs {
                m.insert(k.clone(), serde_json::to_value(v).unwrap_or(Json::Null));
            }
            Json::Object(m)
        }
    }
}

fn slot<'a>(job: &'a Job, name: &str) -> Option<&'a Component> {
    match name {
        "application" => Some(&job.application),
        "backend" => Some(&job.backend),
        "inputdata" => job.inputdata.as_ref(),
        "outputdata" => job.outputdata.as_ref(),
        "splitter" => job.splitter.as_ref(),
        "merger" => job.merger.as_ref(),
        _ => None,
    }
}

pub fn job_json(registry: &PluginRegistry, job: &Job) -> Json {
    let mut m = Map::new();
    m.insert("id".into(), json!(job.id));
    m.insert("fqid".into(), json!(job.job_ref().to_string()));
    if let Some(i) = job.subjob_index {
        m.insert("subjob_index".into(), json!(i));
    }
    m.insert("name".into(), json!(job.name));
    m.insert("status".into(), json!(job.status));
    for (name, category) in COMPONENT_SLOTS {
        let v = slot(job, name).map_or(Json::Null, |c| component_json(registry, category, c));
        m.insert(name.into(), v);
    }
    m.insert("input_sandbox".into(), json!(job.input_sandbox));
    m.insert("output_sandbox".into(), json!(job.output_sandbox));
    m.insert("backend_handle".into(), json!(job.backend_handle));
    m.insert("created_at".into(), json!(job.created_at));
    m.insert("submitted_at".into(), json!(job.submitted_at));
    m.insert("finished_at".into(), json!(job.finished_at));
    m.insert("read_only".into(), json!(job.read_only));
    if job.subjob_index.is_none() {
        let by_status: Map<String, Json> = job
            .subjob_summary()
            .into_iter()
            .map(|(s, n)| (s.as_str().to_string(), json!(n)))
            .collect();
        m.insert(
            "subjobs".into(),
            json!({ "total": job.subjobs.len(), "by_status": by_status }),
        );
    }
    Json::Object(m)
}

pub fn schema_json(schema: &PluginSchema) -> Json {
    let attrs: Vec<Json> = schema
        .visible_attributes()
        .map(|a| {
            json!({
                "name": a.name,
                "value_type": a.value_type,
                "access": a.access,
                "default": a.default,
                "doc": a.doc,
                "shortcut": a.shortcut,
            })
        })
        .collect();
    json!({
        "plugin_name": schema.plugin_name,
        "category": schema.category,
        "version": schema.version,
        "doc": schema.doc,
        "attributes": attrs,
    })
}
