//! Versioned JSON model files. Numbers are written in scientific notation
//! with 17 significant digits so parameters survive a save/load round trip
//! bit-exactly; fields are emitted in a fixed order so identical models
//! produce identical bytes.

use ndarray::{Array1, Array2};
use serde_json::Value;

use crate::{EcaError, Result};

pub const FORMAT_VERSION: u64 = 1;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct JsonWriter {
    buf: String,
    first_in_scope: Vec<bool>,
}

impl JsonWriter {
    pub fn new() -> Self {
        let mut w = JsonWriter {
            buf: String::new(),
            first_in_scope: vec![true],
        };
        w.buf.push('{');
        w
    }

    fn sep(&mut self) {
        if let Some(first) = self.first_in_scope.last_mut() {
            if *first {
                *first = false;
            } else {
                self.buf.push(',');
            }
        }
    }

    pub fn field_u64(&mut self, name: &str, v: u64) {
        self.sep();
        self.buf.push_str(&format!("\"{name}\":{v}"));
    }

    pub fn field_str(&mut self, name: &str, v: &str) {
        self.sep();
        self.buf.push_str(&format!("\"{name}\":\"{v}\""));
    }

    pub fn field_f64(&mut self, name: &str, v: f64) {
        self.sep();
        self.buf.push_str(&format!("\"{name}\":{}", fmt_f64(v)));
    }

    pub fn field_matrix(&mut self, name: &str, a: &Array2<f64>) {
        self.sep();
        self.buf.push_str(&format!("\"{name}\":"));
        self.matrix(a);
    }

    pub fn field_vector(&mut self, name: &str, a: &[f64]) {
        self.sep();
        self.buf.push_str(&format!("\"{name}\":["));
        for (i, v) in a.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push_str(&fmt_f64(*v));
        }
        self.buf.push(']');
    }

    fn matrix(&mut self, a: &Array2<f64>) {
        self.buf.push('[');
        for (i, row) in a.rows().into_iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push('[');
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    self.buf.push(',');
                }
                self.buf.push_str(&fmt_f64(*v));
            }
            self.buf.push(']');
        }
        self.buf.push(']');
    }

    /// Open a named array of objects; the closure writes each element.
    pub fn field_array_of<T>(&mut self, name: &str, items: &[T], mut each: impl FnMut(&mut Self, &T)) {
        self.sep();
        self.buf.push_str(&format!("\"{name}\":["));
        for (i, item) in items.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push('{');
            self.first_in_scope.push(true);
            each(self, item);
            self.first_in_scope.pop();
            self.buf.push('}');
        }
        self.buf.push(']');
    }

    pub fn field_object(&mut self, name: &str, fill: impl FnOnce(&mut Self)) {
        self.sep();
        self.buf.push_str(&format!("\"{name}\":{{"));
        self.first_in_scope.push(true);
        fill(self);
        self.first_in_scope.pop();
        self.buf.push('}');
    }

    pub fn field_null(&mut self, name: &str) {
        self.sep();
        self.buf.push_str(&format!("\"{name}\":null"));
    }

    pub fn finish(mut self) -> String {
        self.buf.push('}');
        self.buf.push('\n');
        self.buf
    }
}

pub fn parse_document(text: &str) -> Result<Value> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| EcaError::Format(format!("not a valid model file: {e}")))?;
    let version = get_u64(&v, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(EcaError::Format(format!(
            "unsupported format_version {version}; this build reads version {FORMAT_VERSION}"
        )));
    }
    Ok(v)
}

pub fn get_u64(v: &Value, name: &str) -> Result<u64> {
    v.get(name)
        .and_then(Value::as_u64)
        .ok_or_else(|| EcaError::Format(format!("missing or non-integer field '{name}'")))
}

pub fn get_f64(v: &Value, name: &str) -> Result<f64> {
    v.get(name)
        .and_then(Value::as_f64)
        .ok_or_else(|| EcaError::Format(format!("missing or non-numeric field '{name}'")))
}

pub fn get_str<'a>(v: &'a Value, name: &str) -> Result<&'a str> {
    v.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| EcaError::Format(format!("missing or non-string field '{name}'")))
}

pub fn get_matrix(v: &Value, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let arr = v
        .get(name)
        .and_then(Value::as_array)
        .ok_or_else(|| EcaError::Format(format!("missing matrix field '{name}'")))?;
    if arr.len() != rows {
        return Err(EcaError::Format(format!(
            "matrix '{name}' has {} rows, expected {rows}",
            arr.len()
        )));
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for (i, row) in arr.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| EcaError::Format(format!("matrix '{name}' row {i} is not an array")))?;
        if row.len() != cols {
            return Err(EcaError::Format(format!(
                "matrix '{name}' row {i} has {} entries, expected {cols}",
                row.len()
            )));
        }
        for (j, cell) in row.iter().enumerate() {
            out[[i, j]] = cell.as_f64().ok_or_else(|| {
                EcaError::Format(format!("matrix '{name}' entry ({i},{j}) is not a number"))
            })?;
        }
    }
    Ok(out)
}

pub fn get_vector(v: &Value, name: &str, len: usize) -> Result<Array1<f64>> {
    let arr = v
        .get(name)
        .and_then(Value::as_array)
        .ok_or_else(|| EcaError::Format(format!("missing vector field '{name}'")))?;
    if arr.len() != len {
        return Err(EcaError::Format(format!(
            "vector '{name}' has {} entries, expected {len}",
            arr.len()
        )));
    }
    let mut out = Array1::<f64>::zeros(len);
    for (i, cell) in arr.iter().enumerate() {
        out[i] = cell
            .as_f64()
            .ok_or_else(|| EcaError::Format(format!("vector '{name}' entry {i} is not a number")))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip_bit_exactly() {
        for &v in &[
            0.1,
            -1.0 / 3.0,
            std::f64::consts::PI,
            1e-300,
            6.02e23,
            -0.0,
            1.0000000000000002,
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "{s}");
        }
    }

    #[test]
    fn writer_produces_valid_json() {
        let mut w = JsonWriter::new();
        w.field_u64("format_version", FORMAT_VERSION);
        w.field_f64("chi", 10.0);
        w.field_matrix("P", &Array2::<f64>::eye(2));
        let text = w.finish();
        let doc = parse_document(&text).unwrap();
        assert_eq!(get_f64(&doc, "chi").unwrap(), 10.0);
        assert_eq!(get_matrix(&doc, "P", 2, 2).unwrap(), Array2::<f64>::eye(2));
    }
}
