//! Canonical binary encoding shared by every party.
//!
//! Layout rules, applied recursively:
//!
//! * integers are fixed-width big-endian (`u8`, `u16`, `u32`, `u64`, `i64`, `i128`);
//! * `bool` is one byte, `0x00` or `0x01`, anything else is rejected;
//! * byte strings and UTF-8 strings are a `u32` length followed by the bytes;
//! * sequences are a `u32` element count followed by the elements;
//! * maps are a `u32` entry count followed by `(key, value)` pairs whose keys
//!   are strictly increasing in their encoded byte order;
//! * options are a tag byte (`0x00` none, `0x01` some) followed by the value.
//!
//! A decoder must consume its input exactly. Trailing bytes, unsorted or
//! duplicate map keys and out-of-range tags are all errors, so every value
//! has exactly one encoding and `encode(decode(b)) == b` whenever decoding
//! succeeds.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("{0} trailing bytes after value")]
    Trailing(usize),
    #[error("invalid tag {tag:#04x} for {what}")]
    InvalidTag { what: &'static str, tag: u8 },
    #[error("string is not valid UTF-8")]
    Utf8,
    #[error("map keys not strictly increasing")]
    UnsortedMap,
    #[error("invalid value: {0}")]
    Invalid(&'static str),
}

pub type DecodeResult<T> = Result<T, DecodeError>;

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i128(&mut self, v: i128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(len_u32(v.len()));
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn seq<T>(&mut self, items: &[T], mut f: impl FnMut(&mut Self, &T)) -> &mut Self {
        self.u32(len_u32(items.len()));
        for item in items {
            f(self, item);
        }
        self
    }

    pub fn option<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) -> &mut Self {
        match v {
            None => self.u8(0),
            Some(inner) => {
                self.u8(1);
                f(self, inner);
                self
            }
        }
    }

    pub fn str_map(&mut self, map: &BTreeMap<String, String>) -> &mut Self {
        // Entries are ordered by encoded key (length prefix first), which
        // differs from BTreeMap's lexicographic order.
        let mut entries: Vec<(Vec<u8>, &String)> = map
            .iter()
            .map(|(k, v)| {
                let mut w = Writer::new();
                w.str(k);
                (w.into_bytes(), v)
            })
            .collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        self.u32(len_u32(entries.len()));
        for (key, value) in entries {
            self.buf.extend_from_slice(&key);
            self.str(value);
        }
        self
    }

    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }
}

fn len_u32(len: usize) -> u32 {
    u32::try_from(len).expect("encoded length exceeds u32::MAX")
}

#[derive(Debug, Clone)]
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

    pub fn finish(&self) -> DecodeResult<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }

    fn take(&mut self, n: usize) -> DecodeResult<&'a [u8]> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> DecodeResult<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> DecodeResult<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> DecodeResult<u16> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> DecodeResult<u32> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> DecodeResult<u64> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn i64(&mut self) -> DecodeResult<i64> {
        Ok(i64::from_be_bytes(self.array()?))
    }

    pub fn i128(&mut self) -> DecodeResult<i128> {
        Ok(i128::from_be_bytes(self.array()?))
    }

    pub fn bool(&mut self) -> DecodeResult<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::InvalidTag { what: "bool", tag }),
        }
    }

    pub fn bytes(&mut self) -> DecodeResult<Vec<u8>> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub fn fixed<const N: usize>(&mut self) -> DecodeResult<[u8; N]> {
        let v = self.bytes()?;
        v.try_into().map_err(|_| DecodeError::Invalid("fixed-length field has wrong length"))
    }

    pub fn str(&mut self) -> DecodeResult<String> {
        String::from_utf8(self.bytes()?).map_err(|_| DecodeError::Utf8)
    }

    pub fn seq<T>(&mut self, mut f: impl FnMut(&mut Self) -> DecodeResult<T>) -> DecodeResult<Vec<T>> {
        let count = self.u32()? as usize;
        // every element takes at least one byte
        if count > self.remaining() {
            return Err(DecodeError::Truncated);
        }
        (0..count).map(|_| f(self)).collect()
    }

    pub fn option<T>(&mut self, f: impl FnOnce(&mut Self) -> DecodeResult<T>) -> DecodeResult<Option<T>> {
        match self.u8()? {
            0 => Ok(None),
            1 => f(self).map(Some),
            tag => Err(DecodeError::InvalidTag { what: "option", tag }),
        }
    }

    pub fn str_map(&mut self) -> DecodeResult<BTreeMap<String, String>> {
        let count = self.u32()? as usize;
        if count > self.remaining() {
            return Err(DecodeError::Truncated);
        }
        let mut map = BTreeMap::new();
        let mut prev: Option<&'a [u8]> = None;
        for _ in 0..count {
            let start = self.pos;
            let key = self.str()?;
            let key_enc = &self.buf[start..self.pos];
            if prev.is_some_and(|p| p >= key_enc) {
                return Err(DecodeError::UnsortedMap);
            }
            prev = Some(key_enc);
            let value = self.str()?;
            map.insert(key, value);
        }
        Ok(map)
    }
}

/// Types with a single canonical byte representation.
pub trait Canonical: Sized {
    fn write(&self, w: &mut Writer);
    fn read(r: &mut Reader<'_>) -> DecodeResult<Self>;

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.into_bytes()
    }

    fn decode(bytes: &[u8]) -> DecodeResult<Self> {
        let mut r = Reader::new(bytes);
        let v = Self::read(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_trailing_bytes() {
        let mut w = Writer::new();
        w.u32(7).u8(1);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.finish(), Err(DecodeError::Trailing(1)));
    }

    #[test]
    fn rejects_bad_bool_and_option_tags() {
        assert!(matches!(Reader::new(&[2]).bool(), Err(DecodeError::InvalidTag { .. })));
        assert!(matches!(
            Reader::new(&[7]).option(|r| r.u8()),
            Err(DecodeError::InvalidTag { .. })
        ));
    }

    #[test]
    fn huge_length_prefix_is_truncation_not_allocation() {
        let bytes = [0xff, 0xff, 0xff, 0xff, 0x00];
        assert_eq!(Reader::new(&bytes).bytes(), Err(DecodeError::Truncated));
        assert_eq!(Reader::new(&bytes).seq(|r| r.u8()), Err(DecodeError::Truncated));
    }

    #[test]
    fn map_keys_must_be_sorted_and_unique() {
        let mut w = Writer::new();
        w.u32(2).str("b").str("1").str("a").str("2");
        assert_eq!(Reader::new(&w.into_bytes()).str_map(), Err(DecodeError::UnsortedMap));
        let mut w = Writer::new();
        w.u32(2).str("a").str("1").str("a").str("2");
        assert_eq!(Reader::new(&w.into_bytes()).str_map(), Err(DecodeError::UnsortedMap));
    }

    proptest! {
        #[test]
        fn str_map_reencodes_identically(map in proptest::collection::btree_map(".{0,6}", ".{0,6}", 0..8)) {
            let mut w = Writer::new();
            w.str_map(&map);
            let bytes = w.into_bytes();
            let mut r = Reader::new(&bytes);
            let back = r.str_map().unwrap();
            r.finish().unwrap();
            prop_assert_eq!(&back, &map);
            let mut w2 = Writer::new();
            w2.str_map(&back);
            prop_assert_eq!(w2.into_bytes(), bytes);
        }
    }
}
