//! Value snapshots carried by trace records.
//!
//! Tensor-like values never carry element data: they are reduced to a
//! [`Value::Digest`] holding a content hash together with shape and dtype.
//! Two digests compare equal iff their hash strings are equal; the hash
//! preimage includes shape and dtype, so equal hashes imply equal metadata.

use std::collections::BTreeMap;
use std::fmt;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

/// Number of digest bytes kept (hex-encoded to twice as many characters).
pub const DIGEST_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "WireValue", into = "WireValue")]
pub enum Value {
    Int(i64),
    Float(OrderedFloat<f64>),
    Str(String),
    Bool(bool),
    None,
    Digest {
        digest: String,
        shape: Vec<u64>,
        dtype: String,
    },
    Struct(BTreeMap<String, Value>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Int,
    Float,
    Str,
    Bool,
    None,
    Digest,
    Struct,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "k", rename_all = "lowercase")]
enum WireValue {
    Int { v: i64 },
    Float { v: f64 },
    Str { v: String },
    Bool { v: bool },
    None,
    Digest { d: String, shape: Vec<u64>, dtype: String },
    Struct { v: BTreeMap<String, Value> },
}

impl From<WireValue> for Value {
    fn from(w: WireValue) -> Self {
        match w {
            WireValue::Int { v } => Value::Int(v),
            WireValue::Float { v } => Value::Float(OrderedFloat(v)),
            WireValue::Str { v } => Value::Str(v),
            WireValue::Bool { v } => Value::Bool(v),
            WireValue::None => Value::None,
            WireValue::Digest { d, shape, dtype } => Value::Digest {
                digest: d,
                shape,
                dtype,
            },
            WireValue::Struct { v } => Value::Struct(v),
        }
    }
}

impl From<Value> for WireValue {
    fn from(v: Value) -> Self {
        match v {
            Value::Int(v) => WireValue::Int { v },
            Value::Float(v) => WireValue::Float { v: v.0 },
            Value::Str(v) => WireValue::Str { v },
            Value::Bool(v) => WireValue::Bool { v },
            Value::None => WireValue::None,
            Value::Digest {
                digest,
                shape,
                dtype,
            } => WireValue::Digest {
                d: digest,
                shape,
                dtype,
            },
            Value::Struct(v) => WireValue::Struct { v },
        }
    }
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Int(_) => ValueKind::Int,
            Value::Float(_) => ValueKind::Float,
            Value::Str(_) => ValueKind::Str,
            Value::Bool(_) => ValueKind::Bool,
            Value::None => ValueKind::None,
            Value::Digest { .. } => ValueKind::Digest,
            Value::Struct(_) => ValueKind::Struct,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Value::None)
    }

    pub fn is_digest(&self) -> bool {
        matches!(self, Value::Digest { .. })
    }

    /// The scalar view of this value, if it has one. Digests and structs do not.
    pub fn as_scalar(&self) -> Option<Scalar> {
        match self {
            Value::Int(v) => Some(Scalar::Int(*v)),
            Value::Float(v) => Some(Scalar::Float(*v)),
            Value::Str(v) => Some(Scalar::Str(v.clone())),
            Value::Bool(v) => Some(Scalar::Bool(*v)),
            Value::None => Some(Scalar::Null),
            Value::Digest { .. } | Value::Struct(_) => None,
        }
    }

    pub fn digest(digest: impl Into<String>, shape: Vec<u64>, dtype: impl Into<String>) -> Self {
        Value::Digest {
            digest: digest.into(),
            shape,
            dtype: dtype.into(),
        }
    }

    /// Projects a named attribute out of a structured value.
    ///
    /// Digests expose `shape` (rendered as `[d0,d1,..]`) and `dtype`; structs
    /// expose their fields, with dotted paths descending into nested values.
    pub fn attribute(&self, path: &str) -> Option<Value> {
        let (head, rest) = match path.split_once('.') {
            Some((h, r)) => (h, Some(r)),
            None => (path, None),
        };
        match self {
            Value::Digest { shape, dtype, .. } if rest.is_none() => match head {
                "shape" => Some(Value::Str(shape_text(shape))),
                "dtype" => Some(Value::Str(dtype.clone())),
                _ => None,
            },
            Value::Struct(fields) => {
                let field = fields.get(head)?;
                match rest {
                    None => Some(field.clone()),
                    Some(rest) => field.attribute(rest),
                }
            }
            _ => None,
        }
    }

    /// Attribute paths that [`Value::attribute`] resolves on this value
    /// (one level of struct nesting).
    pub fn attribute_paths(&self) -> Vec<String> {
        match self {
            Value::Digest { .. } => vec!["dtype".to_string(), "shape".to_string()],
            Value::Struct(fields) => {
                let mut out = Vec::new();
                for (name, field) in fields {
                    match field {
                        Value::Digest { .. } => {
                            out.push(format!("{name}.dtype"));
                            out.push(format!("{name}.shape"));
                        }
                        Value::Struct(_) => {}
                        _ => out.push(name.clone()),
                    }
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{}", v.0),
            Value::Str(v) => write!(f, "{v:?}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::None => f.write_str("None"),
            Value::Digest {
                digest,
                shape,
                dtype,
            } => {
                let short = &digest[..digest.len().min(8)];
                write!(f, "<{dtype}{} #{short}>", shape_text(shape))
            }
            Value::Struct(fields) => {
                f.write_str("{")?;
                for (i, (k, v)) in fields.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}: {v}")?;
                }
                f.write_str("}")
            }
        }
    }
}

pub fn shape_text(shape: &[u64]) -> String {
    let dims: Vec<String> = shape.iter().map(u64::to_string).collect();
    format!("[{}]", dims.join(","))
}

/// Plain JSON scalar used for meta variables and condition values.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Null,
    Bool(bool),
    Int(i64),
    Float(OrderedFloat<f64>),
    Str(String),
}

impl Scalar {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Scalar::Int(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<Scalar> for Value {
    fn from(s: Scalar) -> Self {
        match s {
            Scalar::Null => Value::None,
            Scalar::Bool(v) => Value::Bool(v),
            Scalar::Int(v) => Value::Int(v),
            Scalar::Float(v) => Value::Float(v),
            Scalar::Str(v) => Value::Str(v),
        }
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Null => f.write_str("None"),
            Scalar::Bool(v) => write!(f, "{v}"),
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Float(v) => write!(f, "{}", v.0),
            Scalar::Str(v) => write!(f, "{v:?}"),
        }
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(n * 2);
    for b in bytes.iter().take(n) {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Content digest of a dense array.
///
/// SHA-256 over `"trainvar-digest-v1\0" ‖ dtype ‖ "\0" ‖ rank (u64 LE) ‖
/// dims (u64 LE each) ‖ raw element bytes`, truncated to the first
/// [`DIGEST_BYTES`] bytes and lower-case hex encoded. Instrumentation shims
/// must reproduce this byte-for-byte.
pub fn content_digest(shape: &[u64], dtype: &str, raw: &[u8]) -> Value {
    let mut h = Sha256::new();
    h.update(b"trainvar-digest-v1\0");
    h.update(dtype.as_bytes());
    h.update(b"\0");
    h.update((shape.len() as u64).to_le_bytes());
    for d in shape {
        h.update(d.to_le_bytes());
    }
    h.update(raw);
    let out = h.finalize();
    Value::Digest {
        digest: hex_prefix(&out, DIGEST_BYTES),
        shape: shape.to_vec(),
        dtype: dtype.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_shape_of_digest() {
        let v = Value::digest("ab12", vec![2, 3], "float32");
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"{"k":"digest","d":"ab12","shape":[2,3],"dtype":"float32"}"#);
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn wire_shape_of_scalars() {
        assert_eq!(serde_json::to_string(&Value::Int(3)).unwrap(), r#"{"k":"int","v":3}"#);
        assert_eq!(serde_json::to_string(&Value::None).unwrap(), r#"{"k":"none"}"#);
        let st = Value::Struct(BTreeMap::from([("a".to_string(), Value::Bool(true))]));
        assert_eq!(
            serde_json::to_string(&st).unwrap(),
            r#"{"k":"struct","v":{"a":{"k":"bool","v":true}}}"#
        );
    }

    #[test]
    fn scalar_untagged_roundtrip() {
        let m: BTreeMap<String, Scalar> =
            serde_json::from_str(r#"{"a":1,"b":1.5,"c":"x","d":true,"e":null}"#).unwrap();
        assert_eq!(m["a"], Scalar::Int(1));
        assert_eq!(m["b"], Scalar::Float(OrderedFloat(1.5)));
        assert_eq!(m["c"], Scalar::Str("x".into()));
        assert_eq!(m["d"], Scalar::Bool(true));
        assert_eq!(m["e"], Scalar::Null);
    }

    #[test]
    fn digest_attributes() {
        let v = Value::digest("ff", vec![8, 3], "bfloat16");
        assert_eq!(v.attribute("shape"), Some(Value::Str("[8,3]".into())));
        assert_eq!(v.attribute("dtype"), Some(Value::Str("bfloat16".into())));
        assert_eq!(v.attribute("grad"), None);
        let st = Value::Struct(BTreeMap::from([("pixels".to_string(), v.clone())]));
        assert_eq!(st.attribute("pixels.shape"), Some(Value::Str("[8,3]".into())));
        assert_eq!(st.attribute_paths(), vec!["pixels.dtype", "pixels.shape"]);
    }

    #[test]
    fn content_digest_covers_shape_and_values() {
        let raw = [1u8, 2, 3, 4, 5, 6, 7, 8];
        let a = content_digest(&[2, 4], "uint8", &raw);
        let b = content_digest(&[2, 4], "uint8", &raw);
        let c = content_digest(&[4, 2], "uint8", &raw);
        let d = content_digest(&[2, 4], "int8", &raw);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        match a {
            Value::Digest { digest, .. } => assert_eq!(digest.len(), DIGEST_BYTES * 2),
            _ => unreachable!(),
        }
    }
}
