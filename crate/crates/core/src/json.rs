//! Canonical JSON: UTF-8, object keys sorted, no insignificant whitespace.

use serde::Serialize;
use serde_json::Value;

pub fn to_canonical_vec<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    let mut out = String::new();
    write_value(&v, &mut out);
    out.into_bytes()
}

/// Canonical form followed by a newline, for files meant to be read by people.
pub fn to_canonical_file<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut v = to_canonical_vec(value);
    v.push(b'\n');
    v
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string key"));
                out.push(':');
                write_value(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}
