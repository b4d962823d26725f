//! Flat `key = value` text with optional `[section]` headers.
//!
//! Blank lines and lines starting with `#` are skipped. Keys are unique
//! within a section.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub entries: Vec<Entry>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse { line, msg: "unterminated section header".into() })?
                    .trim();
                if !is_ident(name) {
                    return Err(Error::Parse { line, msg: format!("bad section name {name:?}") });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: "expected key = value".into() })?;
            let (key, value) = (k.trim(), v.trim());
            if !is_ident(key) {
                return Err(Error::Parse { line, msg: format!("bad key {key:?}") });
            }
            if let Some(prev) = entries.iter().find(|e| e.section == section && e.key == key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {key:?} (first on line {})", prev.line),
                });
            }
            entries.push(Entry {
                section: section.clone(),
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        Ok(ConfigFile { entries })
    }

    pub fn get(&self, section: Option<&str>, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.section.as_deref() == section && e.key == key)
    }

    pub fn section<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| e.section.as_deref() == Some(name))
    }

    /// Render entries back to text, grouped by section in first-seen order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current: Option<&str> = None;
        let mut first = true;
        for e in &self.entries {
            if first || e.section.as_deref() != current {
                if let Some(s) = &e.section {
                    if !first {
                        out.push('\n');
                    }
                    out.push_str(&format!("[{s}]\n"));
                }
                current = e.section.as_deref();
                first = false;
            }
            out.push_str(&format!("{} = {}\n", e.key, e.value));
        }
        out
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// Split a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::arg(format!("override {s:?} is not key=value")))?;
    let key = k.trim();
    if !is_ident(key) {
        return Err(Error::arg(format!("bad key {key:?}")));
    }
    Ok((key.to_string(), v.trim().to_string()))
}
