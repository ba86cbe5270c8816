//! Flat `key = value` config files with `[section]` headers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const SECTIONS: [&str; 5] = ["data", "model", "train", "entropy", "audit"];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |d: &str| Error::Config(format!("config line {}: {d}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(bad(&format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let s = section.as_deref().ok_or_else(|| bad("key outside a section"))?;
            c.set(&format!("{s}.{}", k.trim()), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets `section.key`.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        let (s, k) = dotted
            .split_once('.')
            .filter(|(s, k)| SECTIONS.contains(s) && !k.is_empty())
            .ok_or_else(|| Error::Config(format!("config keys look like section.key with a section in {SECTIONS:?}, got {dotted:?}")))?;
        self.sections.entry(s.to_string()).or_default().insert(k.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `section.key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, dotted: &str) -> Option<&str> {
        let (s, k) = dotted.split_once('.')?;
        self.sections.get(s)?.get(k).map(String::as_str)
    }

    pub fn section(&self, s: &str) -> impl Iterator<Item = (&str, &str)> {
        self.sections.get(s).into_iter().flatten().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn remove(&mut self, dotted: &str) -> Option<String> {
        let (s, k) = dotted.split_once('.')?;
        self.sections.get_mut(s)?.remove(k)
    }

    /// Every key as `section.key`.
    pub fn flatten(&self) -> BTreeMap<String, String> {
        self.sections.iter().flat_map(|(s, kv)| kv.iter().map(move |(k, v)| (format!("{s}.{k}"), v.clone()))).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (s, kv) in &self.sections {
            writeln!(out, "[{s}]").unwrap();
            for (k, v) in kv {
                writeln!(out, "{k} = {v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_override_round_trip() {
        let mut c = Config::parse("# run\n[model]\nfamily = eem  # inline\nd_model=64\n\n[train]\ntotal_steps = 10\n").unwrap();
        assert_eq!(c.get("model.family"), Some("eem"));
        c.apply_overrides(&["train.total_steps=20", "data.corpus = x.txt"]).unwrap();
        assert_eq!(c.get("train.total_steps"), Some("20"));
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.section("model").count(), 2);
    }

    #[test]
    fn rejects_malformed() {
        assert!(Config::parse("family = eem\n").is_err());
        assert!(Config::parse("[bogus]\n").is_err());
        assert!(Config::parse("[model]\nno equals\n").is_err());
        assert!(Config::default().apply_overrides(&["model.x"]).is_err());
        assert!(Config::default().apply_overrides(&["nosection=1"]).is_err());
    }
}
