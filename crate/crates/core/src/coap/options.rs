use std::fmt;

use crate::addr::Endpoint;

use super::CodecError;

pub const IF_MATCH: u16 = 1;
pub const URI_HOST: u16 = 3;
pub const ETAG: u16 = 4;
pub const OBSERVE: u16 = 6;
pub const URI_PORT: u16 = 7;
pub const URI_PATH: u16 = 11;
pub const CONTENT_FORMAT: u16 = 12;
pub const MAX_AGE: u16 = 14;
pub const URI_QUERY: u16 = 15;
pub const BLOCK2: u16 = 23;
pub const BLOCK1: u16 = 27;

/// Binding options live in the experimental range and are elective (even
/// numbers), so receivers that don't understand them can skip them.
pub const BIND_DEST_ADDR: u16 = 2048;
pub const BIND_DEST_RESOURCE: u16 = 2050;
pub const BIND_PMIN: u16 = 2052;
pub const BIND_PMAX: u16 = 2054;

/// Elective option carrying the counter a recovered observe relationship
/// resumes from. Only needed for counter 1, which the Observe option cannot
/// carry in a request because 1 means deregister.
pub const OBSERVE_RESUME: u16 = 65000;

/// Largest observe value that fits the 3-byte option.
pub const MAX_OBSERVE: u32 = 0x00FF_FFFF;

/// Longest option value the delta/length encoding can express.
pub const MAX_OPTION_LEN: usize = 65535 + 269;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoapOption {
    pub number: u16,
    pub value: Vec<u8>,
}

/// Options kept sorted by number. Repeated options keep their insertion
/// order, which is the order they appear on the wire.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Options(Vec<CoapOption>);

/// Minimal big-endian encoding of an unsigned option value; zero is empty.
pub fn encode_uint(v: u32) -> Vec<u8> {
    let bytes = v.to_be_bytes();
    let skip = bytes.iter().take_while(|b| **b == 0).count();
    bytes[skip..].to_vec()
}

pub fn decode_uint(bytes: &[u8]) -> Option<u32> {
    if bytes.len() > 4 {
        return None;
    }
    Some(bytes.iter().fold(0u32, |acc, b| (acc << 8) | u32::from(*b)))
}

impl Options {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CoapOption> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Appends after any existing option with the same number.
    pub fn push(&mut self, number: u16, value: Vec<u8>) {
        let at = self.0.partition_point(|o| o.number <= number);
        self.0.insert(at, CoapOption { number, value });
    }

    pub fn remove(&mut self, number: u16) {
        self.0.retain(|o| o.number != number);
    }

    pub fn set(&mut self, number: u16, value: Vec<u8>) {
        self.remove(number);
        self.push(number, value);
    }

    pub fn get(&self, number: u16) -> Option<&[u8]> {
        self.0.iter().find(|o| o.number == number).map(|o| o.value.as_slice())
    }

    pub fn get_all(&self, number: u16) -> impl Iterator<Item = &[u8]> {
        self.0
            .iter()
            .filter(move |o| o.number == number)
            .map(|o| o.value.as_slice())
    }

    pub fn contains(&self, number: u16) -> bool {
        self.get(number).is_some()
    }

    fn get_uint(&self, number: u16) -> Option<u32> {
        self.get(number).and_then(decode_uint)
    }

    fn get_text(&self, number: u16) -> Option<String> {
        self.get(number).map(|v| String::from_utf8_lossy(v).into_owned())
    }

    pub fn uri_path(&self) -> Vec<String> {
        self.get_all(URI_PATH)
            .map(|v| String::from_utf8_lossy(v).into_owned())
            .collect()
    }

    /// The Uri-Path segments joined as `/a/b`; `/` when there are none.
    pub fn path(&self) -> String {
        format!("/{}", self.uri_path().join("/"))
    }

    pub fn set_path(&mut self, path: &str) {
        self.remove(URI_PATH);
        for seg in path.split('/').filter(|s| !s.is_empty()) {
            self.push(URI_PATH, seg.as_bytes().to_vec());
        }
    }

    pub fn uri_query(&self) -> Vec<String> {
        self.get_all(URI_QUERY)
            .map(|v| String::from_utf8_lossy(v).into_owned())
            .collect()
    }

    pub fn add_query(&mut self, query: &str) {
        self.push(URI_QUERY, query.as_bytes().to_vec());
    }

    /// Value of the first `key=value` query item with the given key.
    pub fn query_value(&self, key: &str) -> Option<String> {
        self.uri_query()
            .into_iter()
            .find_map(|q| q.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v.to_string()))
    }

    pub fn observe(&self) -> Option<u32> {
        self.get(OBSERVE).filter(|v| v.len() <= 3).and_then(decode_uint)
    }

    pub fn set_observe(&mut self, value: u32) {
        self.set(OBSERVE, encode_uint(value & MAX_OBSERVE));
    }

    /// Observe value for a registration that resumes at `counter`.
    pub fn set_resume_counter(&mut self, counter: u32) {
        if counter == 1 {
            self.set_observe(0);
            self.set(OBSERVE_RESUME, encode_uint(1));
        } else {
            self.remove(OBSERVE_RESUME);
            self.set_observe(counter);
        }
    }

    /// Counter a registration asks to resume from: the Observe value, or the
    /// resume option when that is present.
    pub fn resume_counter(&self) -> Option<u32> {
        let obs = self.observe()?;
        Some(match self.get(OBSERVE_RESUME).filter(|v| v.len() <= 3) {
            Some(v) if obs == 0 => decode_uint(v).unwrap_or(0),
            _ => obs,
        })
    }

    pub fn max_age(&self) -> Option<u32> {
        self.get_uint(MAX_AGE)
    }

    pub fn set_max_age(&mut self, secs: u32) {
        self.set(MAX_AGE, encode_uint(secs));
    }

    pub fn content_format(&self) -> Option<u16> {
        self.get(CONTENT_FORMAT)
            .filter(|v| v.len() <= 2)
            .and_then(decode_uint)
            .map(|v| v as u16)
    }

    pub fn set_content_format(&mut self, cf: u16) {
        self.set(CONTENT_FORMAT, encode_uint(u32::from(cf)));
    }

    pub fn block1(&self) -> Option<Block> {
        self.get(BLOCK1)
            .filter(|v| v.len() <= 3)
            .and_then(decode_uint)
            .and_then(Block::from_value)
    }

    pub fn set_block1(&mut self, block: Block) {
        self.set(BLOCK1, encode_uint(block.value()));
    }

    /// All four binding options must be present and well-formed.
    pub fn binding(&self) -> Option<BindingInfo> {
        let dest = self.get_text(BIND_DEST_ADDR)?.parse().ok()?;
        let resource = self.get_text(BIND_DEST_RESOURCE)?;
        let pmin = self.get_uint(BIND_PMIN)?;
        let pmax = self.get_uint(BIND_PMAX)?;
        BindingInfo::new(dest, resource, pmin, pmax).ok()
    }

    pub fn has_binding_options(&self) -> bool {
        [BIND_DEST_ADDR, BIND_DEST_RESOURCE, BIND_PMIN, BIND_PMAX]
            .iter()
            .any(|n| self.contains(*n))
    }

    pub fn set_binding(&mut self, b: &BindingInfo) {
        self.set(BIND_DEST_ADDR, b.dest.to_string().into_bytes());
        self.set(BIND_DEST_RESOURCE, b.dest_resource.clone().into_bytes());
        self.set(BIND_PMIN, encode_uint(b.pmin));
        self.set(BIND_PMAX, encode_uint(b.pmax));
    }

    /// Checks format limits of the options this crate interprets.
    pub(crate) fn validate(&self) -> Result<(), CodecError> {
        for opt in &self.0 {
            let len = opt.value.len();
            let limit = match opt.number {
                OBSERVE | OBSERVE_RESUME | BLOCK1 | BLOCK2 => 3,
                CONTENT_FORMAT => 2,
                MAX_AGE | BIND_PMIN | BIND_PMAX => 4,
                URI_PATH | URI_QUERY => 255,
                _ => MAX_OPTION_LEN,
            };
            if len > limit {
                return Err(CodecError::InvariantViolation(format!(
                    "option {} value is {len} bytes, limit {limit}",
                    opt.number
                )));
            }
            if opt.number == BLOCK1 && self.block1().is_none() {
                return Err(CodecError::InvariantViolation(
                    "block1 uses reserved size exponent 7".into(),
                ));
            }
        }
        if self.has_binding_options() && self.binding().is_none() {
            return Err(CodecError::InvariantViolation(
                "incomplete or inconsistent binding options".into(),
            ));
        }
        Ok(())
    }
}

impl FromIterator<(u16, Vec<u8>)> for Options {
    fn from_iter<T: IntoIterator<Item = (u16, Vec<u8>)>>(iter: T) -> Self {
        let mut opts = Options::new();
        for (n, v) in iter {
            opts.push(n, v);
        }
        opts
    }
}

/// Block1/Block2 option value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Block {
    pub num: u32,
    pub more: bool,
    /// Size exponent: block size is `2^(szx + 4)`, `szx` in 0..=6.
    pub szx: u8,
}

impl Block {
    pub fn new(num: u32, more: bool, size: usize) -> Option<Self> {
        let szx = Self::szx_for(size)?;
        (num < (1 << 20)).then_some(Self { num, more, szx })
    }

    pub fn szx_for(size: usize) -> Option<u8> {
        (0u8..=6).find(|s| 1usize << (s + 4) == size)
    }

    pub fn size(&self) -> usize {
        1 << (self.szx + 4)
    }

    pub fn value(&self) -> u32 {
        (self.num << 4) | (u32::from(self.more) << 3) | u32::from(self.szx)
    }

    pub fn from_value(v: u32) -> Option<Self> {
        let szx = (v & 0x7) as u8;
        (szx != 7).then_some(Self {
            num: v >> 4,
            more: v & 0x8 != 0,
            szx,
        })
    }
}

/// Where a bound node should push its resource changes, and how often.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BindingInfo {
    pub dest: Endpoint,
    pub dest_resource: String,
    /// Seconds.
    pub pmin: u32,
    /// Seconds.
    pub pmax: u32,
}

impl BindingInfo {
    pub fn new(dest: Endpoint, dest_resource: impl Into<String>, pmin: u32, pmax: u32) -> Result<Self, CodecError> {
        let dest_resource = dest_resource.into();
        if dest_resource.is_empty() {
            return Err(CodecError::InvariantViolation(
                "binding destination resource is empty".into(),
            ));
        }
        if pmin > pmax {
            return Err(CodecError::InvariantViolation(format!(
                "binding pmin {pmin} exceeds pmax {pmax}"
            )));
        }
        Ok(Self {
            dest,
            dest_resource,
            pmin,
            pmax,
        })
    }
}

impl fmt::Display for BindingInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{} pmin={} pmax={}",
            self.dest, self.dest_resource, self.pmin, self.pmax
        )
    }
}
