//! A subset of XML Schema, enough to check documents against the robot run
//! schema: element nesting and counts, sequence order, attribute presence,
//! simple types and enumerations.

use std::collections::BTreeMap;

use chrono::DateTime;
use quick_xml::events::Event;
use quick_xml::Reader;

#[derive(Debug, Default)]
struct AttrRule {
    name: String,
    ty: String,
    required: bool,
    allowed: Vec<String>,
}

#[derive(Debug, Default)]
pub struct ElementRule {
    name: String,
    min: u32,
    max: Option<u32>,
    attrs: Vec<AttrRule>,
    children: Vec<ElementRule>,
}

fn attr_of(e: &quick_xml::events::BytesStart, key: &str) -> Option<String> {
    e.try_get_attribute(key)
        .unwrap()
        .map(|a| a.unescape_value().unwrap().into_owned())
}

/// Reads the element/attribute/enumeration subset of XML Schema.
pub fn parse_xsd(xsd: &str) -> ElementRule {
    let mut reader = Reader::from_str(xsd);
    reader.config_mut().trim_text(true);
    let mut stack: Vec<ElementRule> = vec![ElementRule::default()];
    let mut attr: Option<AttrRule> = None;
    loop {
        let ev = reader.read_event().unwrap();
        let (e, empty) = match &ev {
            Event::Start(e) => (e.clone(), false),
            Event::Empty(e) => (e.clone(), true),
            Event::End(e) => {
                match e.name().as_ref() {
                    b"xs:element" => {
                        let done = stack.pop().unwrap();
                        stack.last_mut().unwrap().children.push(done);
                    }
                    b"xs:attribute" => {
                        let a = attr.take().unwrap();
                        stack.last_mut().unwrap().attrs.push(a);
                    }
                    _ => {}
                }
                continue;
            }
            Event::Eof => break,
            _ => continue,
        };
        match e.name().as_ref() {
            b"xs:element" => {
                let rule = ElementRule {
                    name: attr_of(&e, "name").unwrap(),
                    min: attr_of(&e, "minOccurs").map_or(1, |v| v.parse().unwrap()),
                    max: match attr_of(&e, "maxOccurs").as_deref() {
                        Some("unbounded") => None,
                        Some(v) => Some(v.parse().unwrap()),
                        None => Some(1),
                    },
                    ..Default::default()
                };
                if empty {
                    stack.last_mut().unwrap().children.push(rule);
                } else {
                    stack.push(rule);
                }
            }
            b"xs:attribute" => {
                let a = AttrRule {
                    name: attr_of(&e, "name").unwrap(),
                    ty: attr_of(&e, "type").unwrap_or_default(),
                    required: attr_of(&e, "use").as_deref() == Some("required"),
                    allowed: Vec::new(),
                };
                if empty {
                    stack.last_mut().unwrap().attrs.push(a);
                } else {
                    attr = Some(a);
                }
            }
            b"xs:restriction" => {
                if let Some(a) = attr.as_mut() {
                    a.ty = attr_of(&e, "base").unwrap();
                }
            }
            b"xs:enumeration" => attr.as_mut().unwrap().allowed.push(attr_of(&e, "value").unwrap()),
            _ => {}
        }
    }
    let mut top = stack.pop().unwrap();
    assert_eq!(top.children.len(), 1, "one root element expected");
    top.children.pop().unwrap()
}

fn check_value(ty: &str, v: &str) -> bool {
    let decimal = |s: &str| {
        let s = s.strip_prefix(['-', '+']).unwrap_or(s);
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        !(int.is_empty() && frac.is_empty())
            && int.bytes().all(|b| b.is_ascii_digit())
            && frac.bytes().all(|b| b.is_ascii_digit())
            && (s.contains('.') || !int.is_empty())
    };
    match ty {
        "xs:string" | "" => true,
        "xs:nonNegativeInteger" => !v.is_empty() && v.bytes().all(|b| b.is_ascii_digit()),
        "xs:positiveInteger" => v.parse::<u64>().is_ok_and(|n| n > 0) && v.bytes().all(|b| b.is_ascii_digit()),
        "xs:decimal" => decimal(v),
        "xs:dateTime" => DateTime::parse_from_rfc3339(v).is_ok(),
        other => panic!("validator does not know {other}"),
    }
}

fn validate_element(rule: &ElementRule, e: &quick_xml::events::BytesStart) -> Result<(), String> {
    let mut seen = BTreeMap::new();
    for a in e.attributes() {
        let a = a.map_err(|e| e.to_string())?;
        let key = String::from_utf8(a.key.as_ref().to_vec()).unwrap();
        seen.insert(key, a.unescape_value().map_err(|e| e.to_string())?.into_owned());
    }
    for (k, v) in &seen {
        let r = rule
            .attrs
            .iter()
            .find(|r| &r.name == k)
            .ok_or(format!("<{}> has undeclared attribute {k}", rule.name))?;
        if !check_value(&r.ty, v) || (!r.allowed.is_empty() && !r.allowed.contains(v)) {
            return Err(format!("<{}> {k}=`{v}` is not a valid {}", rule.name, r.ty));
        }
    }
    for r in rule.attrs.iter().filter(|r| r.required) {
        if !seen.contains_key(&r.name) {
            return Err(format!("<{}> lacks required attribute {}", rule.name, r.name));
        }
    }
    Ok(())
}

/// Validates a document against sequence-of-children rules.
pub fn validate(schema: &ElementRule, doc: &str) -> Result<(), String> {
    let mut reader = Reader::from_str(doc);
    reader.config_mut().trim_text(true);
    // (rule, per-child counts)
    let mut open: Vec<(&ElementRule, Vec<u32>)> = Vec::new();
    let mut saw_root = false;
    loop {
        let ev = reader.read_event().map_err(|e| e.to_string())?;
        let (e, empty) = match ev {
            Event::Start(e) => (e, false),
            Event::Empty(e) => (e, true),
            Event::End(_) => {
                let (rule, counts) = open.pop().unwrap();
                for (c, n) in rule.children.iter().zip(&counts) {
                    if *n < c.min {
                        return Err(format!("<{}> needs at least {} <{}>", rule.name, c.min, c.name));
                    }
                }
                continue;
            }
            Event::Text(t) if !t.unescape().map_err(|e| e.to_string())?.trim().is_empty() => {
                return Err("unexpected text".into())
            }
            Event::Eof => break,
            _ => continue,
        };
        let name = String::from_utf8(e.name().as_ref().to_vec()).unwrap();
        let rule = match open.last_mut() {
            None => {
                if saw_root || name != schema.name {
                    return Err(format!("unexpected root <{name}>"));
                }
                saw_root = true;
                schema
            }
            Some((parent, counts)) => {
                let i = parent
                    .children
                    .iter()
                    .position(|c| c.name == name)
                    .ok_or(format!("<{name}> not allowed in <{}>", parent.name))?;
                if counts[i..].iter().skip(1).any(|n| *n > 0) {
                    return Err(format!("<{name}> out of sequence"));
                }
                counts[i] += 1;
                if parent.children[i].max.is_some_and(|m| counts[i] > m) {
                    return Err(format!("too many <{name}>"));
                }
                &parent.children[i]
            }
        };
        validate_element(rule, &e)?;
        if empty {
            if let Some(c) = rule.children.iter().find(|c| c.min > 0) {
                return Err(format!("<{name}> needs <{}>", c.name));
            }
        } else {
            open.push((rule, vec![0; rule.children.len()]));
        }
    }
    if saw_root {
        Ok(())
    } else {
        Err("empty document".into())
    }
}
