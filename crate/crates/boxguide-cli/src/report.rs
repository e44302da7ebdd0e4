//! Deterministic report serialization: floats rounded to a fixed number of
//! significant digits, keys emitted in sorted order, so identical plans
//! produce byte-identical files.

use serde_json::Value;

/// Rounds to `digits` significant decimal digits. Non-finite values and zero
/// pass through unchanged.
pub fn round_sig(v: f64, digits: i32) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let mag = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits - 1 - mag);
    (v * scale).round() / scale
}

/// Recursively rounds every number in a JSON tree to 10 significant digits.
pub fn round_json(value: &mut Value) {
    match value {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if !n.is_i64() && !n.is_u64() {
                    if let Some(rounded) = serde_json::Number::from_f64(round_sig(f, 10)) {
                        *value = Value::Number(rounded);
                    }
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_json),
        Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Pretty JSON with sorted keys and rounded floats, ending in a newline.
pub fn deterministic_json(value: &Value) -> String {
    let mut v = value.clone();
    round_json(&mut v);
    // serde_json's default map is a BTreeMap, so object keys are sorted.
    let mut s = serde_json::to_string_pretty(&v).expect("json serialization");
    s.push('\n');
    s
}

/// A float formatted for the CSV table: rounded, rendered in the shortest
/// round-trip form.
pub fn csv_float(v: f64) -> String {
    format!("{}", round_sig(v, 10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn rounding_keeps_ten_digits() {
        assert_eq!(round_sig(0.123456789012345, 10), 0.1234567890);
        assert_eq!(round_sig(-98765.43210987654, 10), -98765.43211);
        assert_eq!(round_sig(0.0, 10), 0.0);
        assert!(round_sig(f64::INFINITY, 10).is_infinite());
    }

    #[test]
    fn json_keys_are_sorted_and_floats_rounded() {
        let v = json!({"zeta": 0.123456789012345, "alpha": [1.0000000000001, 2]});
        let s = deterministic_json(&v);
        let alpha = s.find("alpha").unwrap();
        let zeta = s.find("zeta").unwrap();
        assert!(alpha < zeta);
        assert!(s.contains("0.123456789"));
        assert!(!s.contains("0.123456789012345"));
    }

    #[test]
    fn identical_values_produce_identical_bytes() {
        let v = json!({"a": 1.0 / 3.0, "b": {"c": [2.0f64.sqrt()]}});
        assert_eq!(deterministic_json(&v), deterministic_json(&v));
    }
}
