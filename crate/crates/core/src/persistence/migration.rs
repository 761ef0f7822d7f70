use crate::error::{Error, Result};
use crate::plugins::{Category, PluginRegistry};

use super::record::{JobRecord, COMPONENT_SLOTS};

/// Brings every component of `record` to the registered schema version.
///
/// Hooks run stepwise (`v` to `v + 1`) on the component's attribute table.
/// Attributes the current schema no longer declares are moved to the job's
/// `quarantine` table under the component slot; missing ones are filled
/// with defaults when the record is turned into a job. A record already at
/// current versions is returned unchanged.
pub fn migrate_record(record: &JobRecord, registry: &PluginRegistry) -> Result<JobRecord> {
    let mut out = record.clone();
    migrate_payload(&mut out.payload, &record.schema_versions, registry)?;
    for (plugin, v) in out.schema_versions.iter_mut() {
        let current = COMPONENT_SLOTS
            .iter()
            .find_map(|(_, cat)| registry.schema_of(*cat, plugin).ok())
            .map(|s| s.version);
        if let Some(c) = current {
            *v = c;
        }
    }
    Ok(out)
}

/// Whether any plugin in `record` is stored at an older version.
pub fn needs_migration(record: &JobRecord, registry: &PluginRegistry) -> bool {
    record.schema_versions.iter().any(|(plugin, v)| {
        COMPONENT_SLOTS
            .iter()
            .any(|(_, cat)| registry.schema_of(*cat, plugin).is_ok_and(|s| s.version > *v))
    })
}

fn migrate_payload(
    payload: &mut toml::Table,
    versions: &std::collections::BTreeMap<String, u32>,
    registry: &PluginRegistry,
) -> Result<()> {
    for (slot, cat) in COMPONENT_SLOTS {
        let Some(toml::Value::Table(comp)) = payload.get_mut(slot) else {
            continue;
        };
        let quarantined = migrate_component(comp, cat, versions, registry)?;
        if quarantined.is_empty() {
            continue;
        }
        let q = payload
            .entry("quarantine")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let toml::Value::Table(q) = q else {
            return Err(Error::StorageError("quarantine is not a table".into()));
        };
        let entry = q
            .entry(slot)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(entry) = entry {
            entry.extend(quarantined);
        }
    }
    if let Some(toml::Value::Array(subjobs)) = payload.get_mut("subjobs") {
        for sj in subjobs {
            if let toml::Value::Table(t) = sj {
                migrate_payload(t, versions, registry)?;
            }
        }
    }
    Ok(())
}

/// Returns the quarantined attributes, rendered as TOML values.
fn migrate_component(
    comp: &mut toml::Table,
    category: Category,
    versions: &std::collections::BTreeMap<String, u32>,
    registry: &PluginRegistry,
) -> Result<toml::Table> {
    let plugin = comp
        .get("type")
        .and_then(toml::Value::as_str)
        .ok_or_else(|| Error::StorageError("component without a type".into()))?
        .to_string();
    let schema = registry.schema_of(category, &plugin)?;
    let stored = versions.get(&plugin).copied().unwrap_or(schema.version);
    if stored > schema.version {
        return Err(Error::StorageError(format!(
            "record has {plugin} version {stored}, newer than the registered version {}",
            schema.version
        )));
    }
    if stored == schema.version {
        return Ok(toml::Table::new());
    }
    for v in stored..schema.version {
        let hook = registry.migration(&plugin, v).ok_or_else(|| Error::MigrationGap {
            plugin: plugin.clone(),
            from: v,
        })?;
        hook(comp)?;
    }
    let stale: Vec<String> = comp
        .keys()
        .filter(|k| k.as_str() != "type" && schema.attribute(k).is_none())
        .cloned()
        .collect();
    let mut quarantined = toml::Table::new();
    for k in stale {
        if let Some(v) = comp.remove(&k) {
            quarantined.insert(k, toml::Value::String(v.to_string()));
        }
    }
    Ok(quarantined)
}
