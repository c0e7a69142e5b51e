//! The `key = value` text format shared by manifests, scheme files and run
//! configurations.
//!
//! One entry per line. Blank lines and lines starting with `#` are ignored,
//! as is anything after a ` #` on a value line. Keys are unique.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{hexfloat, Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvDocument {
    path: PathBuf,
    entries: Vec<(String, String, usize)>,
    index: HashMap<String, usize>,
}

impl KvDocument {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut doc = KvDocument {
            path: origin.to_path_buf(),
            ..Default::default()
        };
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(doc.error(line_no, format!("expected `key = value`, found `{line}`")));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(doc.error(line_no, "empty key".to_string()));
            }
            if doc.index.contains_key(key) {
                return Err(doc.error(line_no, format!("duplicate key `{key}`")));
            }
            doc.index.insert(key.to_string(), doc.entries.len());
            doc.entries
                .push((key.to_string(), value.trim().to_string(), line_no));
        }
        Ok(doc)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.entries[i].1.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| self.error(0, format!("missing key `{key}`")))
    }

    pub fn parse_value<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| self.error(self.line_of(key), format!("`{key}`: {e}")))
    }

    pub fn parse_opt<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if self.contains(key) {
            self.parse_value(key).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Reads a real written as hex-float or decimal.
    pub fn real(&self, key: &str) -> Result<f64> {
        let raw = self.require(key)?;
        hexfloat::parse(raw).ok_or_else(|| {
            self.error(self.line_of(key), format!("`{key}`: not a number: `{raw}`"))
        })
    }

    pub fn real_opt(&self, key: &str) -> Result<Option<f64>> {
        if self.contains(key) {
            self.real(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(self.error(
                self.line_of(key),
                format!("`{key}`: expected true/false, found `{other}`"),
            )),
        }
    }

    /// Comma-separated list; an empty value is an empty list.
    pub fn list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                item.trim().parse().map_err(|e| {
                    self.error(self.line_of(key), format!("`{key}`: `{}`: {e}", item.trim()))
                })
            })
            .collect()
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.index.get(key).map_or(0, |&i| self.entries[i].2)
    }

    pub fn error(&self, line: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message,
        }
    }
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    match line.find(" #").or_else(|| line.find("\t#")) {
        Some(pos) => &line[..pos],
        None => line,
    }
}

/// Accumulates entries in insertion order and renders them as text.
#[derive(Debug, Default, Clone)]
pub struct KvWriter {
    out: String,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        for line in text.lines() {
            self.out.push_str("# ");
            self.out.push_str(line);
            self.out.push('\n');
        }
        self
    }

    pub fn entry(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.out.push_str(&format!("{key} = {value}\n"));
        self
    }

    /// Writes a real as hex-float with its decimal value as a trailing comment.
    pub fn real(&mut self, key: &str, value: f64) -> &mut Self {
        if value.is_finite() {
            self.out
                .push_str(&format!("{key} = {} # {value:e}\n", hexfloat::format(value)));
        } else {
            self.entry(key, hexfloat::format(value));
        }
        self
    }

    pub fn list<T: Display>(&mut self, key: &str, items: &[T]) -> &mut Self {
        let joined = items
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        self.entry(key, joined)
    }

    pub fn finish(&self) -> String {
        self.out.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Result<KvDocument> {
        KvDocument::parse(text, Path::new("test.txt"))
    }

    #[test]
    fn parses_entries_and_comments() {
        let d = doc("# header\nversion = 1\n\nshape_1 = 4, 4, 2 # trailing\nname = a=b\n").unwrap();
        assert_eq!(d.get("version"), Some("1"));
        assert_eq!(d.list::<usize>("shape_1").unwrap(), vec![4, 4, 2]);
        assert_eq!(d.get("name"), Some("a=b"));
        assert_eq!(d.keys().collect::<Vec<_>>(), ["version", "shape_1", "name"]);
    }

    #[test]
    fn rejects_duplicates_and_bare_lines() {
        let err = doc("a = 1\na = 2\n").unwrap_err();
        assert!(err.to_string().contains("test.txt:2"), "{err}");
        assert!(doc("just words\n").is_err());
        assert!(doc(" = 3\n").is_err());
    }

    #[test]
    fn reals_round_trip_through_writer() {
        let mut w = KvWriter::new();
        w.real("x", 0.1f32 as f64).real("y", f64::INFINITY).entry("flag", true);
        let d = doc(&w.finish()).unwrap();
        assert_eq!(d.real("x").unwrap().to_bits(), (0.1f32 as f64).to_bits());
        assert_eq!(d.real("y").unwrap(), f64::INFINITY);
        assert!(d.bool("flag").unwrap());
        assert!(d.real("missing").is_err());
    }
}
