//! The subset of CoAP (RFC 7252 framing, Observe, Block1 and the binding
//! options) that the gateway inspects and the simulated nodes speak.

mod classify;
mod options;

use std::fmt;

use thiserror::Error;

pub use classify::{classify, InteractionKind};
pub use options::*;

/// Resource on the gateway that booting nodes register with.
pub const REGISTRATION_PATH: &str = "/sd/register";

pub const MAX_TOKEN_LEN: usize = 8;

const VERSION: u8 = 1;
const PAYLOAD_MARKER: u8 = 0xFF;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
    #[error("message violates an invariant: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageType {
    Con = 0,
    Non = 1,
    Ack = 2,
    Rst = 3,
}

impl MessageType {
    fn from_bits(bits: u8) -> Self {
        match bits & 0x3 {
            0 => Self::Con,
            1 => Self::Non,
            2 => Self::Ack,
            _ => Self::Rst,
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Con => "CON",
            Self::Non => "NON",
            Self::Ack => "ACK",
            Self::Rst => "RST",
        })
    }
}

/// Request method or response code, `class.detail` packed in one byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Code(pub u8);

impl Code {
    pub const EMPTY: Code = Code(0x00);
    pub const GET: Code = Code(0x01);
    pub const POST: Code = Code(0x02);
    pub const PUT: Code = Code(0x03);
    pub const DELETE: Code = Code(0x04);
    pub const CREATED: Code = Code::response(2, 1);
    pub const DELETED: Code = Code::response(2, 2);
    pub const CHANGED: Code = Code::response(2, 4);
    pub const CONTENT: Code = Code::response(2, 5);
    pub const CONTINUE: Code = Code::response(2, 31);
    pub const BAD_REQUEST: Code = Code::response(4, 0);
    pub const NOT_FOUND: Code = Code::response(4, 4);
    pub const METHOD_NOT_ALLOWED: Code = Code::response(4, 5);
    pub const REQUEST_ENTITY_INCOMPLETE: Code = Code::response(4, 8);
    pub const INTERNAL_SERVER_ERROR: Code = Code::response(5, 0);

    pub const fn response(class: u8, detail: u8) -> Code {
        Code((class << 5) | (detail & 0x1F))
    }

    pub fn class(self) -> u8 {
        self.0 >> 5
    }

    pub fn detail(self) -> u8 {
        self.0 & 0x1F
    }

    pub fn is_empty(self) -> bool {
        self == Self::EMPTY
    }

    pub fn is_request(self) -> bool {
        self.class() == 0 && !self.is_empty()
    }

    pub fn is_response(self) -> bool {
        (2..=5).contains(&self.class())
    }

    pub fn is_success(self) -> bool {
        self.class() == 2
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::EMPTY => f.write_str("EMPTY"),
            Self::GET => f.write_str("GET"),
            Self::POST => f.write_str("POST"),
            Self::PUT => f.write_str("PUT"),
            Self::DELETE => f.write_str("DELETE"),
            c => write!(f, "{}.{:02}", c.class(), c.detail()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    pub msg_type: MessageType,
    pub code: Code,
    pub mid: u16,
    pub token: Vec<u8>,
    pub options: Options,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(msg_type: MessageType, code: Code, mid: u16) -> Self {
        Self {
            msg_type,
            code,
            mid,
            token: Vec::new(),
            options: Options::new(),
            payload: Vec::new(),
        }
    }

    pub fn request(msg_type: MessageType, method: Code, mid: u16, path: &str) -> Self {
        let mut m = Self::new(msg_type, method, mid);
        m.options.set_path(path);
        m
    }

    pub fn empty_ack(mid: u16) -> Self {
        Self::new(MessageType::Ack, Code::EMPTY, mid)
    }

    pub fn reset(mid: u16) -> Self {
        Self::new(MessageType::Rst, Code::EMPTY, mid)
    }

    /// Piggybacked response in an ACK for `req`.
    pub fn piggybacked(req: &Message, code: Code) -> Self {
        let mut m = Self::new(MessageType::Ack, code, req.mid);
        m.token = req.token.clone();
        m
    }

    pub fn with_token(mut self, token: impl Into<Vec<u8>>) -> Self {
        self.token = token.into();
        self
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }

    pub fn with_observe(mut self, value: u32) -> Self {
        self.options.set_observe(value);
        self
    }

    pub fn path(&self) -> String {
        self.options.path()
    }

    pub fn is_confirmable(&self) -> bool {
        self.msg_type == MessageType::Con
    }

    pub fn check_invariants(&self) -> Result<(), CodecError> {
        if self.token.len() > MAX_TOKEN_LEN {
            return Err(CodecError::InvariantViolation(format!(
                "token is {} bytes",
                self.token.len()
            )));
        }
        if self.code.is_empty() && (!self.token.is_empty() || !self.payload.is_empty() || !self.options.is_empty()) {
            return Err(CodecError::InvariantViolation(
                "empty message carries token, options or payload".into(),
            ));
        }
        self.options.validate()
    }

    pub fn encode(&self) -> Result<Vec<u8>, CodecError> {
        encode(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        decode(bytes)
    }

    /// One-line human summary used in traces.
    pub fn summary(&self) -> String {
        let mut s = format!("{} {} mid={}", self.msg_type, self.code, self.mid);
        if !self.token.is_empty() {
            s.push_str(&format!(" tok={}", hex::encode(&self.token)));
        }
        if let Some(obs) = self.options.observe() {
            s.push_str(&format!(" obs={obs}"));
        }
        if let Some(b) = self.options.block1() {
            s.push_str(&format!(" b1={}/{}/{}", b.num, u8::from(b.more), b.size()));
        }
        let path = self.options.uri_path();
        if !path.is_empty() {
            s.push_str(&format!(" /{}", path.join("/")));
        }
        for q in self.options.uri_query() {
            s.push_str(&format!(" ?{q}"));
        }
        if !self.payload.is_empty() {
            s.push_str(&format!(" len={}", self.payload.len()));
        }
        s
    }
}

fn nibble(value: usize) -> (u8, Option<Vec<u8>>) {
    match value {
        0..=12 => (value as u8, None),
        13..=268 => (13, Some(vec![(value - 13) as u8])),
        _ => (14, Some(((value - 269) as u16).to_be_bytes().to_vec())),
    }
}

/// Serializes `msg` into an RFC 7252 frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, CodecError> {
    msg.check_invariants()?;
    let mut out = Vec::with_capacity(4 + msg.token.len() + msg.payload.len() + 16);
    out.push((VERSION << 6) | ((msg.msg_type as u8) << 4) | msg.token.len() as u8);
    out.push(msg.code.0);
    out.extend_from_slice(&msg.mid.to_be_bytes());
    out.extend_from_slice(&msg.token);

    let mut last = 0u16;
    for opt in msg.options.iter() {
        let (d, d_ext) = nibble(usize::from(opt.number - last));
        let (l, l_ext) = nibble(opt.value.len());
        out.push((d << 4) | l);
        out.extend(d_ext.into_iter().flatten());
        out.extend(l_ext.into_iter().flatten());
        out.extend_from_slice(&opt.value);
        last = opt.number;
    }
    if !msg.payload.is_empty() {
        out.push(PAYLOAD_MARKER);
        out.extend_from_slice(&msg.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or(CodecError::MalformedFrame(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn extended(&mut self, n: u8) -> Result<usize, CodecError> {
        Ok(match n {
            13 => usize::from(self.take(1, "truncated option extension")?[0]) + 13,
            14 => {
                let b = self.take(2, "truncated option extension")?;
                usize::from(u16::from_be_bytes([b[0], b[1]])) + 269
            }
            15 => return Err(CodecError::MalformedFrame("reserved option nibble 15")),
            n => usize::from(n),
        })
    }
}

/// Parses a frame. Unknown options are kept verbatim.
pub fn decode(bytes: &[u8]) -> Result<Message, CodecError> {
    if bytes.len() < 4 {
        return Err(CodecError::MalformedFrame("shorter than the 4-byte header"));
    }
    if bytes[0] >> 6 != VERSION {
        return Err(CodecError::MalformedFrame("unsupported version"));
    }
    let tkl = usize::from(bytes[0] & 0x0F);
    if tkl > MAX_TOKEN_LEN {
        return Err(CodecError::MalformedFrame("token length above 8"));
    }
    let msg_type = MessageType::from_bits(bytes[0] >> 4);
    let code = Code(bytes[1]);
    let mid = u16::from_be_bytes([bytes[2], bytes[3]]);
    let mut r = Reader { buf: bytes, pos: 4 };
    let token = r.take(tkl, "truncated token")?.to_vec();

    let mut options = Options::new();
    let mut number = 0usize;
    let mut payload = Vec::new();
    while r.pos < bytes.len() {
        let head = bytes[r.pos];
        r.pos += 1;
        if head == PAYLOAD_MARKER {
            if r.pos == bytes.len() {
                return Err(CodecError::MalformedFrame("payload marker without payload"));
            }
            payload = bytes[r.pos..].to_vec();
            break;
        }
        let delta = r.extended(head >> 4)?;
        let len = r.extended(head & 0x0F)?;
        number += delta;
        if number > usize::from(u16::MAX) {
            return Err(CodecError::MalformedFrame("option number overflow"));
        }
        let value = r.take(len, "truncated option value")?.to_vec();
        options.push(number as u16, value);
    }

    if code.is_empty() && (tkl != 0 || !options.is_empty() || !payload.is_empty()) {
        return Err(CodecError::MalformedFrame("empty message with content"));
    }
    Ok(Message {
        msg_type,
        code,
        mid,
        token,
        options,
        payload,
    })
}

/// Confirmable registration a node sends to the gateway right after boot.
/// The node's address travels as the packet source.
pub fn registration_request(mid: u16, token: Vec<u8>) -> Message {
    Message::request(MessageType::Con, Code::POST, mid, REGISTRATION_PATH).with_token(token)
}

/// Per-endpoint message ID source. Seeded at boot so each lifetime starts in
/// a fresh region of the MID space.
#[derive(Debug, Clone)]
pub struct MidAllocator {
    next: u16,
}

impl MidAllocator {
    pub fn new(seed: u16) -> Self {
        Self { next: seed }
    }

    pub fn next_mid(&mut self) -> u16 {
        let mid = self.next;
        self.next = self.next.wrapping_add(1);
        mid
    }

    pub fn peek(&self) -> u16 {
        self.next
    }
}
