use serde_json::{Map, Value as Json};

use super::schema::{Access, AttributeDescriptor, Component, PluginSchema};
use crate::error::{Error, Result};
use crate::value::Value;

/// The user-facing projection of a component.
///
/// Holds its own copy of the component: writes through the view never touch
/// the job the component was taken from until the caller stores the result
/// back explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyView {
    schema: PluginSchema,
    component: Component,
}

impl ProxyView {
    pub(crate) fn new(schema: PluginSchema, component: Component) -> Self {
        ProxyView { schema, component }
    }

    pub fn plugin(&self) -> &str {
        &self.schema.plugin_name
    }

    pub fn schema(&self) -> &PluginSchema {
        &self.schema
    }

    fn descriptor(&self, name: &str) -> Result<&AttributeDescriptor> {
        self.schema
            .attribute(name)
            .filter(|a| a.access.is_visible())
            .ok_or_else(|| Error::AttributeNotVisible(name.to_string()))
    }

    /// Visible attributes in schema order.
    pub fn attributes(&self) -> Vec<(&AttributeDescriptor, &Value)> {
        self.schema
            .visible_attributes()
            .filter_map(|a| self.component.get(&a.name).map(|v| (a, v)))
            .collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.attributes().into_iter().map(|(a, _)| a.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&Value> {
        let d = self.descriptor(name)?;
        self.component
            .get(&d.name)
            .ok_or_else(|| Error::AttributeNotVisible(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Value) -> Result<()> {
        let d = self.descriptor(name)?;
        if d.access == Access::ReadOnly {
            return Err(Error::AttributeReadOnly(name.to_string()));
        }
        let v = d.coerce(value, false)?;
        self.component.set(name, v);
        Ok(())
    }

    pub fn into_component(self) -> Component {
        self.component
    }

    pub fn to_json(&self) -> Json {
        let mut m = Map::new();
        m.insert("type".into(), Json::String(self.schema.plugin_name.clone()));
        for (a, v) in self.attributes() {
            m.insert(a.name.clone(), serde_json::to_value(v).unwrap_or(Json::Null));
        }
        Json::Object(m)
    }
}
