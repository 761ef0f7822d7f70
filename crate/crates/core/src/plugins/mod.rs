//! Runtime plugin registry.
//!
//! Every job component is an instance of a registered plugin. The plugin's
//! [`PluginSchema`] drives validation, persistence, migration and the
//! user-facing [`ProxyView`]; its behavior object does the actual work.

mod application;
pub mod builtin;
mod handler;
mod proxy;
mod schema;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

pub use application::{
    matching_files, read_exit_code, Application, ConfiguredApplication, Dataset, Executable,
    FileListDataset, NullDataset, ValidationResult, INPUT_FILES_ENV,
};
pub use handler::{wrapper_translate, HandlerContext, SubmissionHandler, TranslateFn};
pub use proxy::ProxyView;
pub use schema::{Access, AttributeDescriptor, Category, Component, PluginSchema};

use crate::backends::Backend;
use crate::error::{Error, Result};
use crate::tasks::{Merger, Splitter};
use crate::value::Value;

/// Behavior half of a plugin.
#[derive(Clone)]
pub enum PluginBehavior {
    Application(Arc<dyn Application>),
    Backend(Arc<dyn Backend>),
    Dataset(Arc<dyn Dataset>),
    Splitter(Arc<dyn Splitter>),
    Merger(Arc<dyn Merger>),
}

impl PluginBehavior {
    pub fn category(&self) -> Category {
        match self {
            PluginBehavior::Application(_) => Category::Application,
            PluginBehavior::Backend(_) => Category::Backend,
            PluginBehavior::Dataset(_) => Category::Dataset,
            PluginBehavior::Splitter(_) => Category::Splitter,
            PluginBehavior::Merger(_) => Category::Merger,
        }
    }
}

struct PluginEntry {
    schema: PluginSchema,
    behavior: PluginBehavior,
}

/// Upgrades one component's stored attributes from version `v` to `v + 1`.
pub type MigrationHook = Arc<dyn Fn(&mut toml::Table) -> Result<()> + Send + Sync>;

#[derive(Default)]
pub struct PluginRegistry {
    entries: Vec<PluginEntry>,
    handlers: HashMap<(String, String), Arc<SubmissionHandler>>,
    migrations: BTreeMap<(String, u32), MigrationHook>,
}

impl fmt::Debug for PluginRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PluginRegistry")
            .field(
                "plugins",
                &self.entries.iter().map(|e| &e.schema.plugin_name).collect::<Vec<_>>(),
            )
            .field("handlers", &self.handlers.len())
            .finish()
    }
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a plugin. A name may be registered again in the same
    /// category only with a higher schema version, which replaces the old
    /// registration in place.
    pub fn register_plugin(&mut self, schema: PluginSchema, behavior: PluginBehavior) -> Result<()> {
        schema.validate()?;
        if behavior.category() != schema.category {
            return Err(Error::MalformedSchema {
                plugin: schema.plugin_name,
                reason: format!(
                    "declared category {} but behavior is a {}",
                    schema.category,
                    behavior.category()
                ),
            });
        }
        let existing = self
            .entries
            .iter_mut()
            .find(|e| e.schema.category == schema.category && e.schema.plugin_name == schema.plugin_name);
        match existing {
            Some(e) if schema.version > e.schema.version => {
                *e = PluginEntry { schema, behavior };
            }
            Some(_) => return Err(Error::DuplicatePlugin(schema.plugin_name)),
            None => self.entries.push(PluginEntry { schema, behavior }),
        }
        Ok(())
    }

    pub fn register_handler(&mut self, handler: SubmissionHandler) -> Result<()> {
        let key = (handler.application_type.clone(), handler.backend_type.clone());
        if self.handlers.contains_key(&key) {
            return Err(Error::DuplicatePlugin(format!("handler {}/{}", key.0, key.1)));
        }
        self.handlers.insert(key, Arc::new(handler));
        Ok(())
    }

    pub fn register_migration(&mut self, plugin: &str, from_version: u32, hook: MigrationHook) {
        self.migrations.insert((plugin.to_string(), from_version), hook);
    }

    pub fn migration(&self, plugin: &str, from_version: u32) -> Option<&MigrationHook> {
        self.migrations.get(&(plugin.to_string(), from_version))
    }

    /// Drops plugins of `category` not named in `enabled`.
    pub fn retain_enabled(&mut self, category: Category, enabled: &[String]) {
        self.entries
            .retain(|e| e.schema.category != category || enabled.contains(&e.schema.plugin_name));
    }

    /// Schemas in registration order.
    pub fn list_plugins(&self, category: Option<Category>) -> Vec<&PluginSchema> {
        self.entries
            .iter()
            .filter(|e| category.is_none_or(|c| e.schema.category == c))
            .map(|e| &e.schema)
            .collect()
    }

    fn entry(&self, category: Category, name: &str) -> Result<&PluginEntry> {
        self.entries
            .iter()
            .find(|e| e.schema.category == category && e.schema.plugin_name == name)
            .ok_or_else(|| Error::UnknownPlugin {
                category: category.to_string(),
                name: name.to_string(),
            })
    }

    pub fn schema_of(&self, category: Category, name: &str) -> Result<&PluginSchema> {
        self.entry(category, name).map(|e| &e.schema)
    }

    pub fn contains(&self, category: Category, name: &str) -> bool {
        self.entry(category, name).is_ok()
    }

    pub fn application(&self, name: &str) -> Result<Arc<dyn Application>> {
        match &self.entry(Category::Application, name)?.behavior {
            PluginBehavior::Application(a) => Ok(a.clone()),
            _ => unreachable!("category checked at registration"),
        }
    }

    pub fn backend(&self, name: &str) -> Result<Arc<dyn Backend>> {
        match &self.entry(Category::Backend, name)?.behavior {
            PluginBehavior::Backend(b) => Ok(b.clone()),
            _ => unreachable!("category checked at registration"),
        }
    }

    /// Every registered backend instance, by plugin name.
    pub fn backends(&self) -> Vec<(String, Arc<dyn Backend>)> {
        self.entries
            .iter()
            .filter_map(|e| match &e.behavior {
                PluginBehavior::Backend(b) => Some((e.schema.plugin_name.clone(), b.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn dataset(&self, name: &str) -> Result<Arc<dyn Dataset>> {
        match &self.entry(Category::Dataset, name)?.behavior {
            PluginBehavior::Dataset(d) => Ok(d.clone()),
            _ => unreachable!("category checked at registration"),
        }
    }

    pub fn splitter(&self, name: &str) -> Result<Arc<dyn Splitter>> {
        match &self.entry(Category::Splitter, name)?.behavior {
            PluginBehavior::Splitter(s) => Ok(s.clone()),
            _ => unreachable!("category checked at registration"),
        }
    }

    pub fn merger(&self, name: &str) -> Result<Arc<dyn Merger>> {
        match &self.entry(Category::Merger, name)?.behavior {
            PluginBehavior::Merger(m) => Ok(m.clone()),
            _ => unreachable!("category checked at registration"),
        }
    }

    /// Looks up the handler for an application/backend pair. Its absence
    /// means the combination is unsupported.
    pub fn resolve_handler(&self, application: &str, backend: &str) -> Result<Arc<SubmissionHandler>> {
        self.handlers
            .get(&(application.to_string(), backend.to_string()))
            .cloned()
            .ok_or_else(|| Error::NoHandler {
                application: application.to_string(),
                backend: backend.to_string(),
            })
    }

    /// Builds a component from user-supplied attributes, applying the same
    /// access rules as a proxy view: read-only and internal attributes may
    /// not be set.
    pub fn component(&self, category: Category, name: &str, attrs: BTreeMap<String, Value>) -> Result<Component> {
        let schema = self.schema_of(category, name)?;
        let mut view = ProxyView::new(schema.clone(), schema.default_component());
        for (k, v) in attrs {
            if schema.attribute(&k).is_none() {
                return Err(Error::UnknownAttribute {
                    plugin: name.to_string(),
                    attribute: k,
                });
            }
            view.set(&k, v)?;
        }
        Ok(view.into_component())
    }

    /// Validates a complete component against its schema, filling defaults.
    /// Used for trusted input (records, copies) where every access level may
    /// carry a value.
    pub fn normalize(&self, category: Category, component: Component, lenient: bool) -> Result<Component> {
        let schema = self.schema_of(category, &component.plugin)?;
        schema.normalize(component, lenient)
    }

    pub fn proxy_view(&self, category: Category, component: &Component) -> Result<ProxyView> {
        let schema = self.schema_of(category, &component.plugin)?;
        Ok(ProxyView::new(schema.clone(), component.clone()))
    }

    /// Read-write attributes only: what a user configured.
    pub fn user_settings(&self, category: Category, component: &Component) -> Component {
        match self.schema_of(category, &component.plugin) {
            Ok(schema) => Component {
                plugin: component.plugin.clone(),
                attrs: component
                    .attrs
                    .iter()
                    .filter(|(k, _)| schema.attribute(k).is_some_and(|a| a.access == Access::ReadWrite))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
            },
            Err(_) => component.clone(),
        }
    }
}
