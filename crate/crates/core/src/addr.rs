//! IPv6 endpoints and prefixes used for direction decisions at the gateway.

use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use thiserror::Error;

/// Default CoAP UDP port.
pub const COAP_PORT: u16 = 5683;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AddrParseError {
    #[error("invalid IPv6 address `{0}`")]
    Address(String),
    #[error("invalid port in `{0}`")]
    Port(String),
    #[error("invalid prefix `{0}`")]
    Prefix(String),
}

/// An (address, port) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub addr: Ipv6Addr,
    pub port: u16,
}

impl Endpoint {
    pub const fn new(addr: Ipv6Addr, port: u16) -> Self {
        Self { addr, port }
    }

    pub const fn coap(addr: Ipv6Addr) -> Self {
        Self::new(addr, COAP_PORT)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]:{}", self.addr, self.port)
    }
}

/// Accepts `[addr]:port`, `addr` (port defaults to 5683) or `[addr]`.
impl FromStr for Endpoint {
    type Err = AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(rest) = s.strip_prefix('[') {
            let (addr, tail) = rest
                .split_once(']')
                .ok_or_else(|| AddrParseError::Address(s.to_string()))?;
            let addr = addr.parse().map_err(|_| AddrParseError::Address(s.to_string()))?;
            let port = match tail.strip_prefix(':') {
                Some(p) => p.parse().map_err(|_| AddrParseError::Port(s.to_string()))?,
                None if tail.is_empty() => COAP_PORT,
                None => return Err(AddrParseError::Port(s.to_string())),
            };
            Ok(Self::new(addr, port))
        } else {
            let addr = s.parse().map_err(|_| AddrParseError::Address(s.to_string()))?;
            Ok(Self::coap(addr))
        }
    }
}

/// An IPv6 prefix such as `aaaa::/64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Prefix {
    network: Ipv6Addr,
    len: u8,
}

impl Prefix {
    pub fn new(network: Ipv6Addr, len: u8) -> Result<Self, AddrParseError> {
        if len > 128 {
            return Err(AddrParseError::Prefix(format!("{network}/{len}")));
        }
        let masked = u128::from(network) & Self::mask(len);
        Ok(Self {
            network: Ipv6Addr::from(masked),
            len,
        })
    }

    fn mask(len: u8) -> u128 {
        if len == 0 {
            0
        } else {
            u128::MAX << (128 - u32::from(len))
        }
    }

    pub fn contains(&self, addr: &Ipv6Addr) -> bool {
        u128::from(*addr) & Self::mask(self.len) == u128::from(self.network)
    }

    pub fn prefix_len(&self) -> u8 {
        self.len
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.len)
    }
}

impl FromStr for Prefix {
    type Err = AddrParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s.split_once('/').ok_or_else(|| AddrParseError::Prefix(s.to_string()))?;
        let addr = addr.parse().map_err(|_| AddrParseError::Prefix(s.to_string()))?;
        let len = len.parse().map_err(|_| AddrParseError::Prefix(s.to_string()))?;
        Self::new(addr, len)
    }
}
