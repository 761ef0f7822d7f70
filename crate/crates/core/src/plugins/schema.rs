use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::{Shortcut, Value, ValueType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Application,
    Backend,
    Dataset,
    Splitter,
    Merger,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Application,
        Category::Backend,
        Category::Dataset,
        Category::Splitter,
        Category::Merger,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Application => "application",
            Category::Backend => "backend",
            Category::Dataset => "dataset",
            Category::Splitter => "splitter",
            Category::Merger => "merger",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    ReadWrite,
    ReadOnly,
    Internal,
}

impl Access {
    pub fn is_visible(self) -> bool {
        self != Access::Internal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDescriptor {
    pub name: String,
    pub value_type: ValueType,
    pub access: Access,
    pub default: Value,
    #[serde(default)]
    pub doc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortcut: Option<Shortcut>,
}

impl AttributeDescriptor {
    pub fn new(name: &str, value_type: ValueType, access: Access, default: Value, doc: &str) -> Self {
        AttributeDescriptor {
            name: name.to_string(),
            value_type,
            access,
            default,
            doc: doc.to_string(),
            shortcut: None,
        }
    }

    pub fn rw(name: &str, value_type: ValueType, default: Value, doc: &str) -> Self {
        Self::new(name, value_type, Access::ReadWrite, default, doc)
    }

    pub fn ro(name: &str, value_type: ValueType, default: Value, doc: &str) -> Self {
        Self::new(name, value_type, Access::ReadOnly, default, doc)
    }

    pub fn internal(name: &str, value_type: ValueType, default: Value, doc: &str) -> Self {
        Self::new(name, value_type, Access::Internal, default, doc)
    }

    pub fn with_shortcut(mut self, shortcut: Shortcut) -> Self {
        self.shortcut = Some(shortcut);
        self
    }

    /// Converts a user- or record-supplied value to this attribute's type.
    pub fn coerce(&self, value: Value, lenient: bool) -> Result<Value> {
        value
            .coerce(self.value_type, self.shortcut, lenient)
            .ok_or_else(|| Error::TypeMismatch {
                attribute: self.name.clone(),
                expected: self.value_type,
            })
    }
}

/// Declarative description of a plugin's attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginSchema {
    pub plugin_name: String,
    pub category: Category,
    pub version: u32,
    pub attributes: Vec<AttributeDescriptor>,
    #[serde(default)]
    pub doc: String,
}

impl PluginSchema {
    pub fn new(plugin_name: &str, category: Category, version: u32) -> Self {
        PluginSchema {
            plugin_name: plugin_name.to_string(),
            category,
            version,
            attributes: Vec::new(),
            doc: String::new(),
        }
    }

    pub fn attr(mut self, descriptor: AttributeDescriptor) -> Self {
        self.attributes.push(descriptor);
        self
    }

    pub fn doc(mut self, doc: &str) -> Self {
        self.doc = doc.to_string();
        self
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDescriptor> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn visible_attributes(&self) -> impl Iterator<Item = &AttributeDescriptor> {
        self.attributes.iter().filter(|a| a.access.is_visible())
    }

    pub fn validate(&self) -> Result<()> {
        let malformed = |reason: String| Error::MalformedSchema {
            plugin: self.plugin_name.clone(),
            reason,
        };
        if self.plugin_name.is_empty() {
            return Err(malformed("empty plugin name".into()));
        }
        if self.version == 0 {
            return Err(malformed("version must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for a in &self.attributes {
            if a.name.is_empty() || a.name == "type" {
                return Err(malformed(format!("invalid attribute name `{}`", a.name)));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(malformed(format!("duplicate attribute `{}`", a.name)));
            }
            if a.default.value_type() != a.value_type {
                return Err(malformed(format!(
                    "default of `{}` is {}, declared {}",
                    a.name,
                    a.default.value_type(),
                    a.value_type
                )));
            }
        }
        Ok(())
    }

    /// A component of this plugin with every attribute at its default.
    pub fn default_component(&self) -> Component {
        Component {
            plugin: self.plugin_name.clone(),
            attrs: self
                .attributes
                .iter()
                .map(|a| (a.name.clone(), a.default.clone()))
                .collect(),
        }
    }

    /// Coerces every attribute of `component` to its declared type and fills
    /// in defaults. Unknown attributes are rejected.
    pub fn normalize(&self, mut component: Component, lenient: bool) -> Result<Component> {
        let mut attrs = BTreeMap::new();
        for a in &self.attributes {
            let v = match component.attrs.remove(&a.name) {
                Some(v) => a.coerce(v, lenient)?,
                None => a.default.clone(),
            };
            attrs.insert(a.name.clone(), v);
        }
        if let Some(extra) = component.attrs.keys().next() {
            return Err(Error::UnknownAttribute {
                plugin: self.plugin_name.clone(),
                attribute: extra.clone(),
            });
        }
        Ok(Component {
            plugin: self.plugin_name.clone(),
            attrs,
        })
    }
}

/// A configured instance of a plugin: its type name and attribute values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    #[serde(rename = "type")]
    pub plugin: String,
    #[serde(flatten)]
    pub attrs: BTreeMap<String, Value>,
}

impl Component {
    /// An unvalidated component; the registry fills in and checks attributes.
    pub fn new(plugin: &str) -> Self {
        Component {
            plugin: plugin.to_string(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(name.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.attrs.get(name)
    }

    pub fn str_attr(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(Value::as_str)
    }

    pub fn list_attr(&self, name: &str) -> &[String] {
        self.get(name).and_then(Value::as_list).unwrap_or(&[])
    }

    pub fn bool_attr(&self, name: &str) -> Option<bool> {
        self.get(name).and_then(Value::as_bool)
    }

    pub fn int_attr(&self, name: &str) -> Option<i64> {
        self.get(name).and_then(Value::as_int)
    }

    pub fn set(&mut self, name: &str, value: impl Into<Value>) {
        self.attrs.insert(name.to_string(), value.into());
    }
}
