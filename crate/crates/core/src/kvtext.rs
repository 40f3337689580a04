//! Line-oriented `key = value` text with `[section]` headers.
//!
//! Used for run configuration files, resolved-config snapshots, checkpoint
//! metadata, and metric reports. Rendering is deterministic: sections and
//! keys are emitted in lexicographic order.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvDoc {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<KvDoc> {
        let mut doc = KvDoc::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Data(format!("line {lineno}: unterminated section header"))
                })?;
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(Error::Data(format!("line {lineno}: empty section name")));
                }
                doc.sections.entry(section.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("line {lineno}: expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Data(format!("line {lineno}: empty key")));
            }
            if section.is_empty() {
                return Err(Error::Data(format!(
                    "line {lineno}: key `{key}` outside any [section]"
                )));
            }
            doc.sections
                .entry(section.clone())
                .or_default()
                .insert(key.to_string(), value.trim().to_string());
        }
        Ok(doc)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (section, kv) in &self.sections {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in kv {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Display) {
        let value = value.to_string();
        debug_assert!(!value.contains('\n'), "multi-line value");
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value);
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|kv| kv.get(key))
            .map(|s| s.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| Error::Data(format!("missing `{section}.{key}`")))
    }

    pub fn get_parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Data(format!("`{section}.{key}` has unparsable value `{raw}`"))
            }),
        }
    }

    pub fn require_parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        let raw = self.require(section, key)?;
        raw.parse::<T>()
            .map_err(|_| Error::Data(format!("`{section}.{key}` has unparsable value `{raw}`")))
    }

    pub fn sections(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, String>)> {
        self.sections.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }
}
