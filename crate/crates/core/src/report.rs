//! Byte-stable CSV and JSON emission.
//!
//! Floats are always written as `{:.16e}` (17 significant digits), which is valid
//! in both formats and independent of locale. Non-finite values become `NaN`/`inf`
//! in CSV and `null` in JSON.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};

pub const SCHEMA_ID: &str = "hydrolimit.report";
pub const SCHEMA_VERSION: u32 = 1;
/// JSON schema every report validates against.
pub const SCHEMA: &str = include_str!("../schemas/report.schema.json");

pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}
impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}
impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.into())
    }
}
impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) => fmt17(*x),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Comma-separated, LF-terminated table; an empty `rows` gives a header-only file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Table {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(Cell::render).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.render().as_bytes())
    }
}

/// One acceptance predicate evaluated by a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable bound, e.g. "<= 1e-8".
    pub bound: String,
    pub pass: bool,
}

impl Check {
    pub fn le(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: format!("<= {limit:e}"),
            pass: value <= limit,
        }
    }
    pub fn ge(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: format!(">= {limit:e}"),
            pass: value >= limit,
        }
    }
    pub fn gt(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            value,
            bound: format!("> {limit:e}"),
            pass: value > limit,
        }
    }
    pub fn holds(name: &str, ok: bool) -> Self {
        Check {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            bound: "true".into(),
            pass: ok,
        }
    }
}

/// Versioned envelope written as `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Report<C: Serialize, R: Serialize> {
    pub schema: &'static str,
    pub schema_version: u32,
    pub command: String,
    pub config: C,
    pub results: R,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl<C: Serialize, R: Serialize> Report<C, R> {
    pub fn new(command: &str, config: C, results: R, checks: Vec<Check>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Report {
            schema: SCHEMA_ID,
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            config,
            results,
            checks,
            pass,
        }
    }
}

/// Pretty JSON with every float in 17-significant-digit exponent form.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fixed17(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, to_json(value)?.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

struct Fixed17<'a>(PrettyFormatter<'a>);

impl Formatter for Fixed17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        w.write_all(fmt17(value).as_bytes())
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(w, value as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format() {
        assert_eq!(fmt17(1.0), "1.0000000000000000e0");
        assert_eq!(fmt17(-0.1), "-1.0000000000000001e-1");
        assert_eq!(fmt17(f64::NAN), "NaN");
        let x = 0.1 + 0.2;
        assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn csv_header_only_and_quoting() {
        let t = Table::new(&["a", "b"]);
        assert_eq!(t.render(), "a,b\n");
        let mut t = Table::new(&["k", "x"]);
        t.push(vec!["p,q".into(), 2.5.into()]);
        assert_eq!(t.render(), "k,x\n\"p,q\",2.5000000000000000e0\n");
    }

    #[test]
    fn json_floats_and_nan() {
        let s = to_json(&serde_json::json!({"x": 0.5, "n": 3, "v": [f64::NAN]})).unwrap();
        assert!(s.contains("\"x\": 5.0000000000000000e-1"));
        assert!(s.contains("\"n\": 3"));
        assert!(s.contains("null"));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["x"].as_f64(), Some(0.5));
    }
}
