//! Line-oriented `key = value` files. Blank lines and `#` comments are
//! skipped; later keys override earlier ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type KeyValues = BTreeMap<String, String>;

pub fn parse(text: &str, origin: &str) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, i + 1, "expected `key = value`"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(origin, i + 1, "empty key"));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<KeyValues> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

pub fn render<K: AsRef<str>, V: AsRef<str>>(pairs: impl IntoIterator<Item = (K, V)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| format!("{} = {}\n", k.as_ref(), v.as_ref()))
        .collect()
}

pub fn write<K: AsRef<str>, V: AsRef<str>>(path: &Path, pairs: impl IntoIterator<Item = (K, V)>) -> Result<()> {
    fs::write(path, render(pairs)).map_err(|e| Error::io(path, e))
}
