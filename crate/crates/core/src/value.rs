//! Typed scalar values shared by API stubs, edge predicates and session
//! bindings.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    String,
    Integer,
    /// Seconds since the Unix epoch.
    Timestamp,
    Number,
    Boolean,
}

impl ValueType {
    pub fn admits(self, v: &Value) -> bool {
        matches!(
            (self, v),
            (ValueType::String, Value::Str(_))
                | (ValueType::Integer | ValueType::Timestamp, Value::Int(_))
                | (ValueType::Number, Value::Int(_) | Value::Float(_))
                | (ValueType::Boolean, Value::Bool(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    pub fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("cannot apply {op} to {left} and {right}")]
pub struct TypeMismatch {
    pub left: &'static str,
    pub op: &'static str,
    pub right: &'static str,
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Float(_) => "number",
            Value::Str(_) => "string",
        }
    }

    /// Text form used when matching stub patterns.
    pub fn render(&self) -> String {
        match self {
            Value::Bool(b) => b.to_string(),
            Value::Int(i) => i.to_string(),
            Value::Float(f) => f.to_string(),
            Value::Str(s) => s.clone(),
        }
    }

    /// `self <op> rhs`. Booleans support only equality; numbers compare
    /// numerically across integer and float; strings compare lexicographically.
    pub fn compare(&self, op: CmpOp, rhs: &Value) -> Result<bool, TypeMismatch> {
        let mismatch = || TypeMismatch {
            left: self.type_name(),
            op: op.as_str(),
            right: rhs.type_name(),
        };
        let ord = match (self, rhs) {
            (Value::Bool(a), Value::Bool(b)) => {
                return match op {
                    CmpOp::Eq => Ok(a == b),
                    CmpOp::Ne => Ok(a != b),
                    _ => Err(mismatch()),
                }
            }
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Int(_) | Value::Float(_), Value::Int(_) | Value::Float(_)) => {
                match self.as_f64().partial_cmp(&rhs.as_f64()) {
                    Some(o) => o,
                    None => return Ok(op == CmpOp::Ne),
                }
            }
            (Value::Str(a), Value::Str(b)) => a.cmp(b),
            _ => return Err(mismatch()),
        };
        Ok(op.holds(ord))
    }

    fn as_f64(&self) -> f64 {
        match self {
            Value::Int(i) => *i as f64,
            Value::Float(f) => *f,
            _ => f64::NAN,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => write!(f, "{s:?}"),
            other => f.write_str(&other.render()),
        }
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_string())
    }
}
