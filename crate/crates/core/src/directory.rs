//! The State Directory: replayable dynamic-state entries maintained purely
//! from intercepted packets and their direction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv6Addr;

use log::debug;
use thiserror::Error;

use crate::addr::Endpoint;
use crate::coap::{classify, BindingInfo, Block, InteractionKind, Message, MessageType};
use crate::time::SimTime;

/// CoAP default; the node gives up on a notification after this many retries.
pub const MAX_RETRANSMIT: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntryType {
    Put = 2,
    Observe = 5,
    Bind = 6,
    Deploy = 7,
}

impl EntryType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            2 => Some(Self::Put),
            5 => Some(Self::Observe),
            6 => Some(Self::Bind),
            7 => Some(Self::Deploy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryId(pub u64);

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// How runtime-deployed modules are remembered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum DeployMode {
    /// Keep only the filename; the node reloads the module from its flash.
    #[default]
    FilenameOnly,
    /// Keep every block so the whole transfer can be replayed.
    BlockCapture,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeployInfo {
    pub filename: String,
    pub loader_path: String,
    /// Block size exponent of the original transfer.
    pub szx: u8,
    /// Present only in block-capture mode.
    pub blocks: Option<Vec<Vec<u8>>>,
}

impl DeployInfo {
    pub fn image(&self) -> Option<Vec<u8>> {
        self.blocks.as_ref().map(|b| b.concat())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SdEntry {
    pub id: EntryId,
    pub entry_type: EntryType,
    pub client: Endpoint,
    pub server: Endpoint,
    pub uri_path: String,
    pub token: Vec<u8>,
    /// Last MID seen for this exchange.
    pub mid: u16,
    pub observe_counter: u32,
    pub retransmit_counter: u8,
    pub value: Vec<u8>,
    pub content_format: Option<u16>,
    pub binding: Option<BindingInfo>,
    pub deploy: Option<DeployInfo>,
    pub created_at: SimTime,
    pub updated_at: SimTime,
}

impl SdEntry {
    fn log_line(&self) -> String {
        format!(
            "Type = {} Client {} Server {}{} obs <{}> mid <{}> ret <{}>",
            self.entry_type.code(),
            self.client,
            self.server,
            self.uri_path,
            self.observe_counter,
            self.mid,
            self.retransmit_counter
        )
    }
}

/// Outcome of running one packet through the directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SdEffect {
    Created(EntryId),
    Updated(EntryId),
    Removed(EntryId),
    NoEffect,
}

impl SdEffect {
    pub fn entry(&self) -> Option<EntryId> {
        match *self {
            SdEffect::Created(id) | SdEffect::Updated(id) | SdEffect::Removed(id) => Some(id),
            SdEffect::NoEffect => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationOutcome {
    /// Seen before or not, the node has entries: recovery must run.
    KnownWithState,
    KnownEmpty,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdConfig {
    pub deploy_mode: DeployMode,
    pub max_retransmit: u8,
}

impl Default for SdConfig {
    fn default() -> Self {
        Self {
            deploy_mode: DeployMode::FilenameOnly,
            max_retransmit: MAX_RETRANSMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct StagedTransfer {
    szx: u8,
    blocks: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateDirectory {
    config: SdConfig,
    entries: BTreeMap<EntryId, SdEntry>,
    registered: BTreeSet<Ipv6Addr>,
    /// Block-capture transfers still in flight, by (client, server, filename).
    staging: BTreeMap<(Endpoint, Endpoint, String), StagedTransfer>,
    next_id: u64,
}

impl Default for StateDirectory {
    fn default() -> Self {
        Self::new(SdConfig::default())
    }
}

impl StateDirectory {
    pub fn new(config: SdConfig) -> Self {
        Self {
            config,
            entries: BTreeMap::new(),
            registered: BTreeSet::new(),
            staging: BTreeMap::new(),
            next_id: 0,
        }
    }

    pub fn config(&self) -> &SdConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: EntryId) -> Option<&SdEntry> {
        self.entries.get(&id)
    }

    /// All entries in creation order.
    pub fn entries(&self) -> impl Iterator<Item = &SdEntry> {
        self.entries.values()
    }

    pub fn is_registered(&self, addr: &Ipv6Addr) -> bool {
        self.registered.contains(addr)
    }

    /// Entries stored for one node, oldest first.
    pub fn entries_for_server(&self, server: &Ipv6Addr) -> Vec<SdEntry> {
        let mut out: Vec<SdEntry> = self
            .entries
            .values()
            .filter(|e| e.server.addr == *server)
            .cloned()
            .collect();
        out.sort_by_key(|e| (e.created_at, e.id));
        out
    }

    /// Records the node as associated and reports whether it needs recovery.
    pub fn register_node(&mut self, node: Ipv6Addr) -> RegistrationOutcome {
        let known = !self.registered.insert(node);
        let has_state = self.entries.values().any(|e| e.server.addr == node);
        let outcome = match (has_state, known) {
            (true, _) => RegistrationOutcome::KnownWithState,
            (false, true) => RegistrationOutcome::KnownEmpty,
            (false, false) => RegistrationOutcome::New,
        };
        match outcome {
            RegistrationOutcome::KnownWithState => {
                debug!("Server Registration Request from [{node}]. Recover Existing State Information.")
            }
            _ => debug!("Server Registration Request from [{node}]. State Information not found"),
        }
        outcome
    }

    fn find(&self, pred: impl Fn(&SdEntry) -> bool) -> Option<EntryId> {
        self.entries.values().find(|e| pred(e)).map(|e| e.id)
    }

    fn create(&mut self, mut entry: SdEntry, now: SimTime) -> SdEffect {
        let id = EntryId(self.next_id);
        self.next_id += 1;
        entry.id = id;
        entry.created_at = now;
        entry.updated_at = now;
        debug!("SD: created {}", entry.log_line());
        self.entries.insert(id, entry);
        SdEffect::Created(id)
    }

    fn remove(&mut self, id: EntryId) -> SdEffect {
        if let Some(e) = self.entries.remove(&id) {
            debug!("SD: removed {}", e.log_line());
        }
        SdEffect::Removed(id)
    }

    fn blank(entry_type: EntryType, client: Endpoint, server: Endpoint, msg: &Message) -> SdEntry {
        SdEntry {
            id: EntryId(0),
            entry_type,
            client,
            server,
            uri_path: msg.path(),
            token: msg.token.clone(),
            mid: msg.mid,
            observe_counter: 0,
            retransmit_counter: 0,
            value: Vec::new(),
            content_format: None,
            binding: None,
            deploy: None,
            created_at: SimTime::ZERO,
            updated_at: SimTime::ZERO,
        }
    }

    /// Packet travelling from the external network towards node `dst`.
    pub fn intercept_from_internet(&mut self, msg: &Message, src: Endpoint, dst: Endpoint, now: SimTime) -> SdEffect {
        let path = msg.path();
        match classify(msg) {
            InteractionKind::PutRequest => {
                match self.find(|e| e.entry_type == EntryType::Put && e.server == dst && e.uri_path == path) {
                    Some(id) => {
                        let e = self.entries.get_mut(&id).expect("found");
                        e.client = src;
                        e.token = msg.token.clone();
                        e.mid = msg.mid;
                        e.value = msg.payload.clone();
                        e.content_format = msg.options.content_format();
                        e.updated_at = now;
                        debug!("SD: updated {}", e.log_line());
                        SdEffect::Updated(id)
                    }
                    None => {
                        let mut e = Self::blank(EntryType::Put, src, dst, msg);
                        e.value = msg.payload.clone();
                        e.content_format = msg.options.content_format();
                        self.create(e, now)
                    }
                }
            }
            InteractionKind::ObserveRegister => {
                match self.find(|e| {
                    e.entry_type == EntryType::Observe && e.client == src && e.server == dst && e.uri_path == path
                }) {
                    Some(id) => {
                        let e = self.entries.get_mut(&id).expect("found");
                        e.token = msg.token.clone();
                        e.mid = msg.mid;
                        e.retransmit_counter = 0;
                        e.updated_at = now;
                        debug!("SD: refreshed {}", e.log_line());
                        SdEffect::Updated(id)
                    }
                    None => {
                        debug!("SD: New Obs relationship from client {src} to server <{dst}{path}>.");
                        self.create(Self::blank(EntryType::Observe, src, dst, msg), now)
                    }
                }
            }
            InteractionKind::ObserveDeregister => self
                .find(|e| {
                    e.entry_type == EntryType::Observe && e.client == src && e.server == dst && e.uri_path == path
                })
                .map_or(SdEffect::NoEffect, |id| self.remove(id)),
            InteractionKind::BindingRequest => {
                let binding = msg.options.binding();
                match self.find(|e| {
                    e.entry_type == EntryType::Bind && e.server == dst && e.uri_path == path && e.binding == binding
                }) {
                    Some(id) => {
                        let e = self.entries.get_mut(&id).expect("found");
                        e.client = src;
                        e.token = msg.token.clone();
                        e.mid = msg.mid;
                        e.updated_at = now;
                        SdEffect::Updated(id)
                    }
                    None => {
                        let mut e = Self::blank(EntryType::Bind, src, dst, msg);
                        e.binding = binding;
                        self.create(e, now)
                    }
                }
            }
            InteractionKind::DeployBlock => self.deploy_block(msg, src, dst, now),
            InteractionKind::AckSignal => {
                match self.find(|e| {
                    e.entry_type == EntryType::Observe
                        && e.client == src
                        && e.server == dst
                        && e.mid == msg.mid
                        && e.retransmit_counter > 0
                }) {
                    Some(id) => {
                        let e = self.entries.get_mut(&id).expect("found");
                        e.retransmit_counter = 0;
                        e.updated_at = now;
                        SdEffect::Updated(id)
                    }
                    None => SdEffect::NoEffect,
                }
            }
            InteractionKind::ResetSignal => self.reset(msg, src, dst),
            _ => SdEffect::NoEffect,
        }
    }

    fn reset(&mut self, msg: &Message, from: Endpoint, to: Endpoint) -> SdEffect {
        self.find(|e| {
            e.entry_type == EntryType::Observe
                && e.mid == msg.mid
                && ((e.client == from && e.server == to) || (e.server == from && e.client == to))
        })
        .map_or(SdEffect::NoEffect, |id| self.remove(id))
    }

    fn deploy_block(&mut self, msg: &Message, src: Endpoint, dst: Endpoint, now: SimTime) -> SdEffect {
        let Some(block) = msg.options.block1() else {
            return SdEffect::NoEffect;
        };
        let Some(filename) = msg.options.query_value("file").filter(|f| !f.is_empty()) else {
            return SdEffect::NoEffect;
        };
        let blocks = match self.config.deploy_mode {
            DeployMode::FilenameOnly => {
                if block.more {
                    return SdEffect::NoEffect;
                }
                None
            }
            DeployMode::BlockCapture => match self.stage_block(block, msg, src, dst, &filename) {
                Some(blocks) => Some(blocks),
                None => return SdEffect::NoEffect,
            },
        };
        let info = DeployInfo {
            filename: filename.clone(),
            loader_path: msg.path(),
            szx: block.szx,
            blocks,
        };
        match self.find(|e| {
            e.entry_type == EntryType::Deploy
                && e.server == dst
                && e.deploy.as_ref().is_some_and(|d| d.filename == filename)
        }) {
            Some(id) => {
                let e = self.entries.get_mut(&id).expect("found");
                e.client = src;
                e.token = msg.token.clone();
                e.mid = msg.mid;
                e.uri_path = info.loader_path.clone();
                e.deploy = Some(info);
                e.updated_at = now;
                SdEffect::Updated(id)
            }
            None => {
                let mut e = Self::blank(EntryType::Deploy, src, dst, msg);
                e.deploy = Some(info);
                self.create(e, now)
            }
        }
    }

    /// Returns the full block list once the final block arrives in sequence.
    fn stage_block(
        &mut self,
        block: Block,
        msg: &Message,
        src: Endpoint,
        dst: Endpoint,
        filename: &str,
    ) -> Option<Vec<Vec<u8>>> {
        let key = (src, dst, filename.to_string());
        if block.num == 0 {
            self.staging.insert(
                key.clone(),
                StagedTransfer {
                    szx: block.szx,
                    blocks: Vec::new(),
                },
            );
        }
        let staged = self.staging.get_mut(&key)?;
        let expected = staged.blocks.len() as u32;
        if block.num < expected {
            // retransmitted block
            return None;
        }
        if block.num > expected || block.szx != staged.szx {
            self.staging.remove(&key);
            return None;
        }
        staged.blocks.push(msg.payload.clone());
        if block.more {
            return None;
        }
        self.staging.remove(&key).map(|s| s.blocks)
    }

    /// Packet travelling from node `src` out of the LLN.
    pub fn intercept_from_lln(&mut self, msg: &Message, src: Endpoint, dst: Endpoint, now: SimTime) -> SdEffect {
        match classify(msg) {
            InteractionKind::Notification => {
                let Some(obs) = msg.options.observe() else {
                    return SdEffect::NoEffect;
                };
                let Some(id) = self.find(|e| {
                    e.entry_type == EntryType::Observe && e.server == src && e.client == dst && e.token == msg.token
                }) else {
                    return SdEffect::NoEffect;
                };
                let max = self.config.max_retransmit;
                let e = self.entries.get_mut(&id).expect("found");
                if msg.mid == e.mid {
                    if msg.msg_type != MessageType::Con {
                        return SdEffect::NoEffect;
                    }
                    e.retransmit_counter += 1;
                    e.updated_at = now;
                    if e.retransmit_counter >= max {
                        return self.remove(id);
                    }
                    return SdEffect::Updated(id);
                }
                e.observe_counter = obs;
                e.mid = msg.mid;
                e.retransmit_counter = 0;
                e.updated_at = now;
                debug!("SD: notification {}", e.log_line());
                SdEffect::Updated(id)
            }
            InteractionKind::ResetSignal => self.reset(msg, src, dst),
            _ => SdEffect::NoEffect,
        }
    }

    /// Tab-separated snapshot, one entry per line, in creation order.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            out.push_str(&snapshot_line(e));
            out.push('\n');
        }
        out
    }
}

fn opt_or_dash<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn snapshot_line(e: &SdEntry) -> String {
    let binding = e
        .binding
        .as_ref()
        .map(|b| format!("{}|{}|{}|{}", b.dest, b.dest_resource, b.pmin, b.pmax));
    let deploy = e.deploy.as_ref().map(|d| {
        let blocks = d.blocks.as_ref().map_or_else(
            || "-".to_string(),
            |b| b.iter().map(hex::encode).collect::<Vec<_>>().join(","),
        );
        format!("{}|{}|{}|{}", d.filename, d.loader_path, d.szx, blocks)
    });
    [
        e.id.0.to_string(),
        e.entry_type.code().to_string(),
        e.client.to_string(),
        e.server.to_string(),
        e.uri_path.clone(),
        hex::encode(&e.token),
        e.mid.to_string(),
        e.observe_counter.to_string(),
        e.retransmit_counter.to_string(),
        hex::encode(&e.value),
        opt_or_dash(e.content_format),
        opt_or_dash(binding),
        opt_or_dash(deploy),
        e.created_at.micros().to_string(),
        e.updated_at.micros().to_string(),
    ]
    .join("\t")
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("snapshot line {line}: {reason}")]
pub struct SnapshotError {
    pub line: usize,
    pub reason: String,
}

/// Parses the output of [`StateDirectory::snapshot`].
pub fn parse_snapshot(text: &str) -> Result<Vec<SdEntry>, SnapshotError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l).map_err(|reason| SnapshotError { line: i + 1, reason }))
        .collect()
}

fn parse_line(line: &str) -> Result<SdEntry, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 15 {
        return Err(format!("expected 15 fields, found {}", f.len()));
    }
    fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
        s.parse().map_err(|_| format!("bad {what} `{s}`"))
    }
    fn hexs(s: &str, what: &str) -> Result<Vec<u8>, String> {
        hex::decode(s).map_err(|_| format!("bad {what} `{s}`"))
    }
    let entry_type =
        EntryType::from_code(num(f[1], "entry type")?).ok_or_else(|| format!("unknown entry type {}", f[1]))?;
    let binding = match f[11] {
        "-" => None,
        s => {
            let p: Vec<&str> = s.split('|').collect();
            if p.len() != 4 {
                return Err(format!("bad binding `{s}`"));
            }
            let dest = p[0].parse().map_err(|e| format!("{e}"))?;
            Some(BindingInfo::new(dest, p[1], num(p[2], "pmin")?, num(p[3], "pmax")?).map_err(|e| e.to_string())?)
        }
    };
    let deploy = match f[12] {
        "-" => None,
        s => {
            let p: Vec<&str> = s.split('|').collect();
            if p.len() != 4 {
                return Err(format!("bad deploy `{s}`"));
            }
            let blocks = match p[3] {
                "-" => None,
                b => Some(b.split(',').map(|x| hexs(x, "block")).collect::<Result<Vec<_>, _>>()?),
            };
            Some(DeployInfo {
                filename: p[0].to_string(),
                loader_path: p[1].to_string(),
                szx: num(p[2], "szx")?,
                blocks,
            })
        }
    };
    Ok(SdEntry {
        id: EntryId(num(f[0], "id")?),
        entry_type,
        client: f[2].parse().map_err(|e| format!("{e}"))?,
        server: f[3].parse().map_err(|e| format!("{e}"))?,
        uri_path: f[4].to_string(),
        token: hexs(f[5], "token")?,
        mid: num(f[6], "mid")?,
        observe_counter: num(f[7], "observe counter")?,
        retransmit_counter: num(f[8], "retransmit counter")?,
        value: hexs(f[9], "value")?,
        content_format: match f[10] {
            "-" => None,
            s => Some(num(s, "content format")?),
        },
        binding,
        deploy,
        created_at: SimTime(num(f[13], "created_at")?),
        updated_at: SimTime(num(f[14], "updated_at")?),
    })
}
