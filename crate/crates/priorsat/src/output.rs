//! Deterministic text output: 17-significant-digit decimal numbers and a
//! small insertion-ordered JSON writer, so identical runs produce
//! byte-identical artifacts.

use std::fmt::Write as _;

/// Decimal with 17 significant digits; round-trips every f64 exactly.
pub fn g17(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{x:.16e}")
}

/// JSON value preserving object key order.
#[derive(Debug, Clone)]
pub enum JsonValue {
    Null,
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<JsonValue>),
    Obj(Vec<(String, JsonValue)>),
}

impl JsonValue {
    pub fn obj() -> Self {
        JsonValue::Obj(Vec::new())
    }

    pub fn push(&mut self, key: &str, value: JsonValue) -> &mut Self {
        if let JsonValue::Obj(fields) = self {
            fields.push((key.to_string(), value));
        } else {
            panic!("push on non-object JSON value");
        }
        self
    }

    pub fn to_pretty(&self) -> String {
        let mut out = String::new();
        self.write(&mut out, 0);
        out.push('\n');
        out
    }

    fn write(&self, out: &mut String, indent: usize) {
        match self {
            JsonValue::Null => out.push_str("null"),
            JsonValue::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            JsonValue::Int(i) => {
                let _ = write!(out, "{i}");
            }
            JsonValue::Num(x) => {
                if x.is_finite() {
                    out.push_str(&g17(*x));
                } else {
                    // JSON has no literals for these; emit as strings.
                    let _ = write!(out, "\"{}\"", g17(*x));
                }
            }
            JsonValue::Str(s) => write_escaped(out, s),
            JsonValue::Arr(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    push_indent(out, indent + 1);
                    item.write(out, indent + 1);
                }
                out.push('\n');
                push_indent(out, indent);
                out.push(']');
            }
            JsonValue::Obj(fields) => {
                if fields.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push('{');
                for (i, (key, value)) in fields.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    push_indent(out, indent + 1);
                    write_escaped(out, key);
                    out.push_str(": ");
                    value.write(out, indent + 1);
                }
                out.push('\n');
                push_indent(out, indent);
                out.push('}');
            }
        }
    }
}

fn push_indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn write_escaped(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Convenience constructors.
pub fn jnum(x: f64) -> JsonValue {
    JsonValue::Num(x)
}
pub fn jint(i: i64) -> JsonValue {
    JsonValue::Int(i)
}
pub fn jstr(s: impl Into<String>) -> JsonValue {
    JsonValue::Str(s.into())
}
pub fn jbool(b: bool) -> JsonValue {
    JsonValue::Bool(b)
}
pub fn jvec(xs: &[f64]) -> JsonValue {
    JsonValue::Arr(xs.iter().map(|x| jnum(*x)).collect())
}
