//! Typed attribute values carried by plugin components.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    String,
    Integer,
    Float,
    Boolean,
    Path,
    StringList,
    /// A list of string lists, e.g. the per-subjob argument sets of a splitter.
    StringTable,
    StringMap,
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueType::String => "string",
            ValueType::Integer => "integer",
            ValueType::Float => "float",
            ValueType::Boolean => "boolean",
            ValueType::Path => "path",
            ValueType::StringList => "string_list",
            ValueType::StringTable => "string_table",
            ValueType::StringMap => "string_map",
        };
        f.write_str(s)
    }
}

/// An attribute value.
///
/// Serialized untagged, so the wire and record forms are plain strings,
/// numbers, arrays and tables. Deserialization can be ambiguous (a path
/// reads back as a string, an empty table as an empty list); the owning
/// schema resolves that through [`Value::coerce`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Path(PathBuf),
    StrList(Vec<String>),
    StrTable(Vec<Vec<String>>),
    StrMap(BTreeMap<String, String>),
}

/// Convenience coercions an attribute may opt into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortcut {
    /// A single scalar is accepted where a list is expected.
    ScalarToList,
    /// A string is accepted where a path is expected.
    StringToPath,
}

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Bool(_) => ValueType::Boolean,
            Value::Int(_) => ValueType::Integer,
            Value::Float(_) => ValueType::Float,
            Value::Str(_) => ValueType::String,
            Value::Path(_) => ValueType::Path,
            Value::StrList(_) => ValueType::StringList,
            Value::StrTable(_) => ValueType::StringTable,
            Value::StrMap(_) => ValueType::StringMap,
        }
    }

    /// Converts `self` to `target`.
    ///
    /// Lossless normalizations (integer to float, an empty list read back
    /// where a table or map is expected, a string read back where a path is
    /// expected when `lenient` is set) are always allowed; the shortcut, if
    /// any, enables one user-facing convenience. Returns `None` when the value
    /// cannot represent the target type.
    pub fn coerce(self, target: ValueType, shortcut: Option<Shortcut>, lenient: bool) -> Option<Value> {
        use Value::*;
        if self.value_type() == target {
            return Some(self);
        }
        match (self, target) {
            (Int(i), ValueType::Float) => Some(Float(i as f64)),
            (Str(s), ValueType::Path) if lenient || shortcut == Some(Shortcut::StringToPath) => {
                Some(Path(PathBuf::from(s)))
            }
            (StrList(l), ValueType::StringTable) if l.is_empty() => Some(StrTable(Vec::new())),
            (StrList(l), ValueType::StringMap) if l.is_empty() => Some(StrMap(BTreeMap::new())),
            (StrTable(t), ValueType::StringList) if t.is_empty() => Some(StrList(Vec::new())),
            (Str(s), ValueType::StringList) if shortcut == Some(Shortcut::ScalarToList) => {
                Some(StrList(vec![s]))
            }
            (Path(p), ValueType::StringList) if shortcut == Some(Shortcut::ScalarToList) => {
                Some(StrList(vec![p.to_string_lossy().into_owned()]))
            }
            (StrList(l), ValueType::StringTable) if shortcut == Some(Shortcut::ScalarToList) => {
                Some(StrTable(l.into_iter().map(|s| vec![s]).collect()))
            }
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            Value::Path(p) => p.to_str(),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(f) => Some(*f),
            Value::Int(i) => Some(*i as f64),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[String]> {
        match self {
            Value::StrList(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_table(&self) -> Option<&[Vec<String>]> {
        match self {
            Value::StrTable(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, String>> {
        match self {
            Value::StrMap(m) => Some(m),
            _ => None,
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Str(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<Vec<String>> for Value {
    fn from(l: Vec<String>) -> Self {
        Value::StrList(l)
    }
}
