//! Versioned JSON reports (`schema: "mvm/1"`), CSV plot data and the timing
//! sidecar. Floats are written with 17 significant digits.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::Formatter;
use serde_json::{Map, Value};

use crate::CliError;

pub const SCHEMA: &str = "mvm/1";

struct Float17;

impl Formatter for Float17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }
}

pub fn to_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Float17);
    value.serialize(&mut ser).expect("in-memory JSON serialization");
    out.push(b'\n');
    out
}

pub fn float_or_null(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

/// Assembles `{schema, command, <fields>, config, records}`.
pub fn document<C: Serialize>(
    command: &str,
    fields: Map<String, Value>,
    config: Option<&C>,
    records: Vec<Value>,
) -> Value {
    let mut doc = Map::new();
    doc.insert("schema".into(), SCHEMA.into());
    doc.insert("command".into(), command.into());
    for (k, v) in fields {
        doc.insert(k, v);
    }
    if let Some(c) = config {
        doc.insert("config".into(), serde_json::to_value(c).expect("config serializes"));
    }
    doc.insert("records".into(), Value::Array(records));
    Value::Object(doc)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    write_file(path, &to_bytes(value))
}

/// `r.json` -> `r.meta.json`.
pub fn meta_path(out: &Path) -> PathBuf {
    out.with_extension("meta.json")
}

/// `r.json` -> `r.<suffix>`.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        let cols: Vec<String> = row.iter().map(|x| mvm_core::hjb::format_float(*x)).collect();
        text.push_str(&cols.join(","));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn weight_header(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("p_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_digits() {
        let text = String::from_utf8(to_bytes(&serde_json::json!({"x": 0.1, "n": 3, "y": f64::NAN}))).unwrap();
        assert_eq!(text, "{\"n\":3,\"x\":1.0000000000000001e-1,\"y\":null}\n");
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["x"].as_f64(), Some(0.1));
    }

    #[test]
    fn empty_result_set_has_empty_records() {
        let doc = document::<()>("validate", Map::new(), None, Vec::new());
        let text = String::from_utf8(to_bytes(&doc)).unwrap();
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["schema"], "mvm/1");
        assert_eq!(back["records"], Value::Array(Vec::new()));
    }
}
