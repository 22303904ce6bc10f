//! JSON and CSV emission. Floats carry 17 significant digits so values
//! round-trip exactly; non-finite values become `null` (JSON) or `NA` (CSV).

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde_json::{json, Number, Value};

use crate::error::{CliError, Result};

pub fn fmt17(x: f64) -> String {
    if x == 0.0 {
        // keep the sign of negative zero out of the output
        return "0.0000000000000000e0".into();
    }
    format!("{x:.16e}")
}

pub fn num(x: f64) -> Value {
    if x.is_finite() {
        Value::Number(Number::from_str(&fmt17(x)).expect("formatted float is a JSON number"))
    } else {
        Value::Null
    }
}

pub fn nums<'a>(xs: impl IntoIterator<Item = &'a f64>) -> Value {
    Value::Array(xs.into_iter().map(|&x| num(x)).collect())
}

/// Row-major nested arrays.
pub fn matrix(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| nums(m.row(i).iter())).collect())
}

/// Metadata block embedded in every JSON result. There is deliberately no
/// timestamp, so equal inputs give byte-identical files.
pub fn metadata(command: &str, seed: Option<u64>, nagq: usize, parameterization: Option<&str>) -> Value {
    json!({
        "tool": "glmm-deriv",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "nAGQ": nagq,
        "parameterization": parameterization,
    })
}

/// Writes pretty JSON to `path`, or stdout for `-`.
pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write_text(path, text.as_bytes())
}

fn write_text(path: &Path, bytes: &[u8]) -> Result<()> {
    let res = if path.as_os_str() == "-" {
        std::io::stdout().lock().write_all(bytes)
    } else {
        std::fs::write(path, bytes)
    };
    res.map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Matrix as CSV with a header row.
pub fn write_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(header).map_err(io)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|&x| if x.is_finite() { fmt17(x) } else { "NA".into() }))
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    write_text(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, -0.0] {
            let s = fmt17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let v = num(x);
            let back: f64 = serde_json::from_value(v.clone()).unwrap();
            assert_eq!(back, x, "{v}");
        }
        assert_eq!(fmt17(0.1), "1.0000000000000001e-1");
        assert_eq!(num(f64::NAN), Value::Null);
    }

    #[test]
    fn json_text_keeps_the_digits() {
        let text = serde_json::to_string(&json!({ "x": num(0.1) })).unwrap();
        assert_eq!(text, r#"{"x":1.0000000000000001e-1}"#);
    }
}
