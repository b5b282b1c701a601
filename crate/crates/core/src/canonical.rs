//! Canonical text encoding used for every digest, signature and file format.
//!
//! The grammar is a strict subset of JSON:
//!
//! * objects with double-quoted keys sorted bytewise ascending, no duplicates;
//! * strings with backslash escapes for `"`, `\`, `\n`, `\r`, `\t` and
//!   `\u00xx` for every other control character (including DEL);
//! * unsigned integers in decimal without leading zeros;
//! * lists in square brackets;
//! * no whitespace outside strings.
//!
//! Byte fields are carried as lowercase hex strings by the callers. The parser
//! accepts exactly the bytes the writer produces, so every value has one
//! encoding and `encode(parse(b)) == b` for every accepted `b`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Errors raised while decoding canonical text or mapping it onto domain types.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CanonicalError {
    #[error("input is not valid UTF-8")]
    InvalidUtf8,
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: &'static str },
    #[error("{context}: missing field `{field}`")]
    MissingField { context: &'static str, field: String },
    #[error("{context}: unexpected field `{field}`")]
    UnexpectedField { context: &'static str, field: String },
    #[error("{context}: field `{field}` has the wrong type")]
    WrongType { context: &'static str, field: String },
    #[error("{context}: invalid value for `{field}`: {reason}")]
    InvalidValue {
        context: &'static str,
        field: String,
        reason: String,
    },
}

/// A canonical value tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Int(u64),
    Str(String),
    List(Vec<Value>),
    Object(BTreeMap<String, Value>),
}

impl Value {
    pub fn object() -> ObjectBuilder {
        ObjectBuilder::default()
    }

    pub fn str(s: impl Into<String>) -> Value {
        Value::Str(s.into())
    }

    /// Build an object from a string map.
    pub fn string_map(map: &BTreeMap<String, String>) -> Value {
        Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), Value::Str(v.clone())))
                .collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_text().into_bytes()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        write_value(&mut out, self);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Value, CanonicalError> {
        let text = std::str::from_utf8(bytes).map_err(|_| CanonicalError::InvalidUtf8)?;
        Self::parse_str(text)
    }

    pub fn parse_str(text: &str) -> Result<Value, CanonicalError> {
        let mut parser = Parser {
            bytes: text.as_bytes(),
            pos: 0,
        };
        let value = parser.value(0)?;
        if parser.pos != parser.bytes.len() {
            return Err(parser.error("trailing bytes after value"));
        }
        Ok(value)
    }
}

/// Fluent object construction; later inserts replace earlier ones.
#[derive(Debug, Default)]
pub struct ObjectBuilder {
    map: BTreeMap<String, Value>,
}

impl ObjectBuilder {
    pub fn field(mut self, key: &str, value: Value) -> Self {
        self.map.insert(key.to_string(), value);
        self
    }

    pub fn str(self, key: &str, value: impl Into<String>) -> Self {
        self.field(key, Value::Str(value.into()))
    }

    pub fn int(self, key: &str, value: u64) -> Self {
        self.field(key, Value::Int(value))
    }

    pub fn opt_str(self, key: &str, value: Option<&str>) -> Self {
        match value {
            Some(v) => self.str(key, v),
            None => self,
        }
    }

    pub fn build(self) -> Value {
        Value::Object(self.map)
    }
}

/// Types with a canonical value representation.
pub trait Canonical: Sized {
    fn to_value(&self) -> Value;
    fn from_value(value: Value) -> Result<Self, CanonicalError>;

    fn to_canonical_bytes(&self) -> Vec<u8> {
        self.to_value().to_bytes()
    }

    fn to_canonical_string(&self) -> String {
        self.to_value().to_text()
    }

    fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, CanonicalError> {
        Self::from_value(Value::parse(bytes)?)
    }

    fn from_canonical_str(text: &str) -> Result<Self, CanonicalError> {
        Self::from_value(Value::parse_str(text)?)
    }
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Int(n) => {
            let _ = write!(out, "{n}");
        }
        Value::Str(s) => write_string(out, s),
        Value::List(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(out, k);
                out.push(':');
                write_value(out, v);
            }
            out.push('}');
        }
    }
}

fn write_string(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if needs_unicode_escape(c) => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn needs_unicode_escape(c: char) -> bool {
    (c < ' ' && !matches!(c, '\n' | '\r' | '\t')) || c == '\u{7f}'
}

const MAX_DEPTH: usize = 64;

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: &'static str) -> CanonicalError {
        CanonicalError::Syntax {
            offset: self.pos,
            message,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, b: u8, message: &'static str) -> Result<(), CanonicalError> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(message))
        }
    }

    fn value(&mut self, depth: usize) -> Result<Value, CanonicalError> {
        if depth > MAX_DEPTH {
            return Err(self.error("nesting too deep"));
        }
        match self.peek() {
            Some(b'{') => self.object(depth),
            Some(b'[') => self.list(depth),
            Some(b'"') => Ok(Value::Str(self.string()?)),
            Some(b'0'..=b'9') => self.integer(),
            Some(_) => Err(self.error("unexpected byte")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn object(&mut self, depth: usize) -> Result<Value, CanonicalError> {
        self.pos += 1;
        let mut map = BTreeMap::new();
        if self.peek() == Some(b'}') {
            self.pos += 1;
            return Ok(Value::Object(map));
        }
        let mut last: Option<String> = None;
        loop {
            if self.peek() != Some(b'"') {
                return Err(self.error("expected object key"));
            }
            let key_at = self.pos;
            let key = self.string()?;
            if let Some(prev) = &last {
                if prev.as_bytes() >= key.as_bytes() {
                    return Err(CanonicalError::Syntax {
                        offset: key_at,
                        message: "object keys not strictly ascending",
                    });
                }
            }
            self.expect(b':', "expected `:`")?;
            let value = self.value(depth + 1)?;
            last = Some(key.clone());
            map.insert(key, value);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {
                    self.pos += 1;
                    return Ok(Value::Object(map));
                }
                _ => return Err(self.error("expected `,` or `}`")),
            }
        }
    }

    fn list(&mut self, depth: usize) -> Result<Value, CanonicalError> {
        self.pos += 1;
        let mut items = Vec::new();
        if self.peek() == Some(b']') {
            self.pos += 1;
            return Ok(Value::List(items));
        }
        loop {
            items.push(self.value(depth + 1)?);
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b']') => {
                    self.pos += 1;
                    return Ok(Value::List(items));
                }
                _ => return Err(self.error("expected `,` or `]`")),
            }
        }
    }

    fn integer(&mut self) -> Result<Value, CanonicalError> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        let digits = &self.bytes[start..self.pos];
        if digits.len() > 1 && digits[0] == b'0' {
            return Err(CanonicalError::Syntax {
                offset: start,
                message: "leading zero in integer",
            });
        }
        // digits are ASCII
        let text = std::str::from_utf8(digits).expect("ascii digits");
        text.parse::<u64>()
            .map(Value::Int)
            .map_err(|_| CanonicalError::Syntax {
                offset: start,
                message: "integer out of range",
            })
    }

    fn string(&mut self) -> Result<String, CanonicalError> {
        self.pos += 1;
        let mut out = String::new();
        loop {
            let rest = &self.bytes[self.pos..];
            // Copy the longest run of plain characters in one go.
            let run = rest
                .iter()
                .position(|&b| b == b'"' || b == b'\\' || b < 0x20 || b == 0x7f)
                .ok_or_else(|| self.error("unterminated string"))?;
            // The input is a &str, and the stop bytes are ASCII, so the run is
            // on a char boundary.
            out.push_str(std::str::from_utf8(&rest[..run]).expect("utf-8 input"));
            self.pos += run;
            match self.bytes[self.pos] {
                b'"' => {
                    self.pos += 1;
                    return Ok(out);
                }
                b'\\' => {
                    self.pos += 1;
                    let c = match self.peek() {
                        Some(b'"') => '"',
                        Some(b'\\') => '\\',
                        Some(b'n') => '\n',
                        Some(b'r') => '\r',
                        Some(b't') => '\t',
                        Some(b'u') => {
                            let hex = self
                                .bytes
                                .get(self.pos + 1..self.pos + 5)
                                .ok_or_else(|| self.error("truncated unicode escape"))?;
                            if !hex.iter().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
                                return Err(self.error("unicode escape must be lowercase hex"));
                            }
                            let code = u32::from_str_radix(
                                std::str::from_utf8(hex).expect("ascii hex"),
                                16,
                            )
                            .expect("validated hex");
                            let c = char::from_u32(code)
                                .ok_or_else(|| self.error("invalid code point"))?;
                            if !needs_unicode_escape(c) {
                                return Err(self.error("non-canonical unicode escape"));
                            }
                            self.pos += 4;
                            c
                        }
                        _ => return Err(self.error("invalid escape")),
                    };
                    self.pos += 1;
                    out.push(c);
                }
                _ => return Err(self.error("unescaped control character")),
            }
        }
    }
}

/// Consuming accessor over an object's fields; rejects leftovers on `finish`.
#[derive(Debug)]
pub struct Fields {
    context: &'static str,
    map: BTreeMap<String, Value>,
}

impl Fields {
    pub fn new(value: Value, context: &'static str) -> Result<Self, CanonicalError> {
        match value {
            Value::Object(map) => Ok(Fields { context, map }),
            _ => Err(CanonicalError::WrongType {
                context,
                field: "<root>".into(),
            }),
        }
    }

    fn missing(&self, field: &str) -> CanonicalError {
        CanonicalError::MissingField {
            context: self.context,
            field: field.to_string(),
        }
    }

    fn wrong(&self, field: &str) -> CanonicalError {
        CanonicalError::WrongType {
            context: self.context,
            field: field.to_string(),
        }
    }

    pub fn invalid(&self, field: &str, reason: impl Into<String>) -> CanonicalError {
        CanonicalError::InvalidValue {
            context: self.context,
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub fn take(&mut self, field: &str) -> Result<Value, CanonicalError> {
        self.map.remove(field).ok_or_else(|| self.missing(field))
    }

    pub fn take_opt(&mut self, field: &str) -> Option<Value> {
        self.map.remove(field)
    }

    pub fn str(&mut self, field: &str) -> Result<String, CanonicalError> {
        match self.take(field)? {
            Value::Str(s) => Ok(s),
            _ => Err(self.wrong(field)),
        }
    }

    pub fn opt_str(&mut self, field: &str) -> Result<Option<String>, CanonicalError> {
        match self.take_opt(field) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s)),
            Some(_) => Err(self.wrong(field)),
        }
    }

    pub fn u64(&mut self, field: &str) -> Result<u64, CanonicalError> {
        match self.take(field)? {
            Value::Int(n) => Ok(n),
            _ => Err(self.wrong(field)),
        }
    }

    pub fn list(&mut self, field: &str) -> Result<Vec<Value>, CanonicalError> {
        match self.take(field)? {
            Value::List(items) => Ok(items),
            _ => Err(self.wrong(field)),
        }
    }

    pub fn object(&mut self, field: &str) -> Result<Fields, CanonicalError> {
        let context = self.context;
        match self.take(field)? {
            Value::Object(map) => Ok(Fields { context, map }),
            _ => Err(self.wrong(field)),
        }
    }

    pub fn string_map(&mut self, field: &str) -> Result<BTreeMap<String, String>, CanonicalError> {
        match self.take(field)? {
            Value::Object(map) => map
                .into_iter()
                .map(|(k, v)| match v {
                    Value::Str(s) => Ok((k, s)),
                    _ => Err(self.wrong(field)),
                })
                .collect(),
            _ => Err(self.wrong(field)),
        }
    }

    pub fn string_list(&mut self, field: &str) -> Result<Vec<String>, CanonicalError> {
        self.list(field)?
            .into_iter()
            .map(|v| match v {
                Value::Str(s) => Ok(s),
                _ => Err(self.wrong(field)),
            })
            .collect()
    }

    /// Remaining (unconsumed) entries, for maps with free-form keys.
    pub fn into_remaining(self) -> BTreeMap<String, Value> {
        self.map
    }

    pub fn finish(self) -> Result<(), CanonicalError> {
        match self.map.into_keys().next() {
            None => Ok(()),
            Some(field) => Err(CanonicalError::UnexpectedField {
                context: self.context,
                field,
            }),
        }
    }
}
