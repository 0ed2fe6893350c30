//! Flat `key = value` text files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored.  Keys
//! are unique; values are kept verbatim (trimmed).  Serialization sorts keys,
//! so `serialize(parse(text))` is a fixed point after one round.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(line_no, format!("expected `key = value`, got `{line}`")));
            };
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::parse(line_no, format!("invalid key `{key}`")));
            }
            if entries.insert(key.to_string(), (v.trim().to_string(), line_no)).is_some() {
                return Err(Error::parse(line_no, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, (v, _)) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(_, l)| *l)
    }

    /// Parsed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| located(*line, format!("cannot parse `{v}` for key `{key}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::InvalidArgument(format!("missing key `{key}`")))
    }

    /// Whitespace-separated numbers; exactly `n` of them.
    pub fn floats(&self, key: &str, n: usize) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let line = self.line(key);
        let parts: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(str::parse::<f64>).collect();
        match parts {
            Ok(p) if p.len() == n => Ok(Some(p)),
            Ok(p) => Err(located(line, format!("key `{key}` needs {n} numbers, got {}", p.len()))),
            Err(_) => Err(located(line, format!("key `{key}` has a non-numeric entry"))),
        }
    }

    /// Whitespace-separated numbers, at least one.
    pub fn float_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let parts: std::result::Result<Vec<f64>, _> = v.split_whitespace().map(str::parse::<f64>).collect();
        match parts {
            Ok(p) if !p.is_empty() => Ok(Some(p)),
            _ => Err(located(self.line(key), format!("key `{key}` needs a list of numbers"))),
        }
    }

    /// Error naming the line of the first key not in `known`.
    pub fn reject_unknown(&self, known: impl Fn(&str) -> bool) -> Result<()> {
        match self.entries.iter().find(|(k, _)| !known(k)) {
            Some((k, (_, line))) => Err(Error::parse(*line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

/// Entries added with [`KvDoc::set`] have no line; they come from flags.
fn located(line: usize, message: String) -> Error {
    if line == 0 {
        Error::InvalidArgument(format!("{message} (command-line override)"))
    } else {
        Error::parse(line, message)
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_floats(vs: &[f64]) -> String {
    vs.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let doc = KvDoc::parse("# comment\nb = 2 # trailing\n\na=hello world\n").unwrap();
        assert_eq!(doc.get::<i32>("b").unwrap(), Some(2));
        assert_eq!(doc.raw("a"), Some("hello world"));
        let once = doc.serialize();
        let twice = KvDoc::parse(&once).unwrap().serialize();
        assert_eq!(once, twice);
    }

    #[test]
    fn errors_name_the_line() {
        let e = KvDoc::parse("a = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = KvDoc::parse("a = 1\na = 2\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let doc = KvDoc::parse("x = 1\ny = abc\n").unwrap();
        assert!(matches!(doc.get::<f64>("y"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(doc.floats("x", 2), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn floats_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, -2.5e-12, 1e300] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
