//! Canonical binary encoding.
//!
//! Every structure that is signed, MAC'd, hashed, or exchanged over the wire
//! serializes through this module, so a value has exactly one byte
//! representation. Integers are big-endian, variable-length fields carry a
//! u32 length prefix, maps are encoded in ascending key order.

use thiserror::Error;

/// Hard cap on any single length-prefixed field; prevents allocation bombs
/// when decoding untrusted input.
pub const MAX_FIELD_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated")]
    Truncated,
    #[error("trailing bytes after value")]
    Trailing,
    #[error("invalid tag {0}")]
    BadTag(u16),
    #[error("length {0} exceeds field limit")]
    OverlongField(usize),
    #[error("invalid utf-8 in string field")]
    BadUtf8,
    #[error("bad magic")]
    BadMagic,
    #[error("map keys not strictly ascending")]
    UnsortedMap,
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    /// Fixed-width field: written raw, no length prefix.
    pub fn put_fixed(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// Variable-length field: u32 big-endian length then the bytes.
    pub fn put_bytes(&mut self, v: &[u8]) {
        debug_assert!(v.len() <= MAX_FIELD_LEN);
        self.put_u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn put_str(&mut self, v: &str) {
        self.put_bytes(v.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn get_u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn get_u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn get_fixed<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn get_bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.get_u32()? as usize;
        if len > MAX_FIELD_LEN {
            return Err(WireError::OverlongField(len));
        }
        Ok(self.take(len)?.to_vec())
    }

    pub fn get_str(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.get_bytes()?).map_err(|_| WireError::BadUtf8)
    }

    /// Asserts the whole input was consumed; call after decoding a top-level value.
    pub fn expect_end(&self) -> Result<(), WireError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(WireError::Trailing)
        }
    }
}

/// Types with a canonical byte representation.
pub trait Wire: Sized {
    fn encode(&self, w: &mut Writer);
    fn decode(r: &mut Reader) -> Result<Self, WireError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode(&mut r)?;
        r.expect_end()?;
        Ok(v)
    }
}

pub fn encode_vec<T: Wire>(w: &mut Writer, items: &[T]) {
    w.put_u32(items.len() as u32);
    for it in items {
        it.encode(w);
    }
}

pub fn decode_vec<T: Wire>(r: &mut Reader) -> Result<Vec<T>, WireError> {
    let n = r.get_u32()? as usize;
    if n > MAX_FIELD_LEN {
        return Err(WireError::OverlongField(n));
    }
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        out.push(T::decode(r)?);
    }
    Ok(out)
}

pub fn encode_opt<T: Wire>(w: &mut Writer, v: &Option<T>) {
    match v {
        None => w.put_u8(0),
        Some(x) => {
            w.put_u8(1);
            x.encode(w);
        }
    }
}

pub fn decode_opt<T: Wire>(r: &mut Reader) -> Result<Option<T>, WireError> {
    match r.get_u8()? {
        0 => Ok(None),
        1 => Ok(Some(T::decode(r)?)),
        t => Err(WireError::BadTag(t as u16)),
    }
}

/// String-keyed map in strictly ascending key order. Decoding rejects
/// unsorted input so re-encoding is always byte-identical.
pub fn encode_str_map(w: &mut Writer, map: &std::collections::BTreeMap<String, Vec<u8>>) {
    w.put_u32(map.len() as u32);
    for (k, v) in map {
        w.put_str(k);
        w.put_bytes(v);
    }
}

pub fn decode_str_map(
    r: &mut Reader,
) -> Result<std::collections::BTreeMap<String, Vec<u8>>, WireError> {
    let n = r.get_u32()? as usize;
    if n > MAX_FIELD_LEN {
        return Err(WireError::OverlongField(n));
    }
    let mut map = std::collections::BTreeMap::new();
    let mut last: Option<String> = None;
    for _ in 0..n {
        let k = r.get_str()?;
        if let Some(prev) = &last {
            if *prev >= k {
                return Err(WireError::UnsortedMap);
            }
        }
        let v = r.get_bytes()?;
        last = Some(k.clone());
        map.insert(k, v);
    }
    Ok(map)
}
