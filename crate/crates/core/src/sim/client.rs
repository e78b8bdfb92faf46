use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::addr::Endpoint;
use crate::coap::{BindingInfo, Block, Code, Message, MessageType, MidAllocator};
use crate::time::SimTime;

use super::{ClientId, Ctx, Frame, Timer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientTimer {
    Retransmit { mid: u16, attempt: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub node: Endpoint,
    pub path: String,
    pub token: Vec<u8>,
    pub last_mid: Option<u16>,
    pub last_observe: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedNotification {
    pub at: SimTime,
    pub from: Endpoint,
    pub path: String,
    pub token: Vec<u8>,
    pub mid: u16,
    pub msg_type: MessageType,
    pub observe: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivedResponse {
    pub at: SimTime,
    pub from: Endpoint,
    pub code: Code,
    pub mid: u16,
    pub token: Vec<u8>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
struct PendingRequest {
    dst: Endpoint,
    bytes: Vec<u8>,
    attempt: u8,
    timeout: SimTime,
}

#[derive(Debug, Clone)]
struct Transfer {
    dst: Endpoint,
    loader: String,
    filename: String,
    blocks: Vec<Vec<u8>>,
    size: usize,
    next: usize,
}

/// External CoAP endpoint driven by scenario commands.
#[derive(Debug, Clone)]
pub struct Client {
    id: ClientId,
    name: String,
    endpoint: Endpoint,
    mids: MidAllocator,
    silent: bool,
    pending: BTreeMap<u16, PendingRequest>,
    observations: Vec<Observation>,
    transfers: BTreeMap<Vec<u8>, Transfer>,
    seen_con: BTreeSet<(Endpoint, u16)>,
    tokens: BTreeSet<Vec<u8>>,
    notifications: Vec<ReceivedNotification>,
    responses: Vec<ReceivedResponse>,
    inbox: Vec<(SimTime, Frame)>,
    failures: Vec<(SimTime, u16)>,
    completed_deploys: Vec<(SimTime, String)>,
}

impl Client {
    pub fn new(id: ClientId, name: &str, endpoint: Endpoint, mid_seed: u16) -> Self {
        Self {
            id,
            name: name.to_string(),
            endpoint,
            mids: MidAllocator::new(mid_seed),
            silent: false,
            pending: BTreeMap::new(),
            observations: Vec::new(),
            transfers: BTreeMap::new(),
            seen_con: BTreeSet::new(),
            tokens: BTreeSet::new(),
            notifications: Vec::new(),
            responses: Vec::new(),
            inbox: Vec::new(),
            failures: Vec::new(),
            completed_deploys: Vec::new(),
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn endpoint(&self) -> Endpoint {
        self.endpoint
    }

    pub fn set_silent(&mut self, silent: bool) {
        self.silent = silent;
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn notifications(&self) -> &[ReceivedNotification] {
        &self.notifications
    }

    pub fn responses(&self) -> &[ReceivedResponse] {
        &self.responses
    }

    /// Every frame delivered to this client, in arrival order.
    pub fn inbox(&self) -> &[(SimTime, Frame)] {
        &self.inbox
    }

    /// Requests that exhausted their retransmissions, by MID.
    pub fn failures(&self) -> &[(SimTime, u16)] {
        &self.failures
    }

    pub fn completed_deploys(&self) -> &[(SimTime, String)] {
        &self.completed_deploys
    }

    fn fresh_token(&mut self, ctx: &mut Ctx<'_>) -> Vec<u8> {
        loop {
            let t: [u8; 2] = ctx.rng.gen();
            if self.tokens.insert(t.to_vec()) {
                return t.to_vec();
            }
        }
    }

    fn send(&mut self, dst: Endpoint, msg: &Message, ctx: &mut Ctx<'_>) {
        let bytes = match msg.encode() {
            Ok(b) => b,
            Err(e) => {
                ctx.log("ERROR", format!("{} cannot encode: {e}", self.name));
                return;
            }
        };
        if msg.msg_type == MessageType::Con {
            let timeout = ctx.draw_ack_timeout();
            self.pending.insert(
                msg.mid,
                PendingRequest {
                    dst,
                    bytes: bytes.clone(),
                    attempt: 0,
                    timeout,
                },
            );
            ctx.timer(
                ctx.now + timeout,
                Timer::Client(
                    self.id,
                    ClientTimer::Retransmit {
                        mid: msg.mid,
                        attempt: 0,
                    },
                ),
            );
        }
        ctx.send(Frame {
            src: self.endpoint,
            dst,
            bytes,
        });
    }

    fn reply(&self, dst: Endpoint, msg: &Message, ctx: &mut Ctx<'_>) {
        ctx.send(Frame {
            src: self.endpoint,
            dst,
            bytes: msg.encode().expect("empty messages encode"),
        });
    }

    pub fn put(&mut self, node: Endpoint, path: &str, value: Vec<u8>, t: MessageType, ctx: &mut Ctx<'_>) {
        let token = self.fresh_token(ctx);
        let m = Message::request(t, Code::PUT, self.mids.next_mid(), path)
            .with_token(token)
            .with_payload(value);
        self.send(node, &m, ctx);
    }

    pub fn get(&mut self, node: Endpoint, path: &str, ctx: &mut Ctx<'_>) {
        let token = self.fresh_token(ctx);
        let m = Message::request(MessageType::Con, Code::GET, self.mids.next_mid(), path).with_token(token);
        self.send(node, &m, ctx);
    }

    pub fn observe(&mut self, node: Endpoint, path: &str, ctx: &mut Ctx<'_>) {
        let token = match self.observations.iter().find(|o| o.node == node && o.path == path) {
            Some(o) => o.token.clone(),
            None => {
                let token = self.fresh_token(ctx);
                self.observations.push(Observation {
                    node,
                    path: path.to_string(),
                    token: token.clone(),
                    last_mid: None,
                    last_observe: None,
                });
                token
            }
        };
        let m = Message::request(MessageType::Con, Code::GET, self.mids.next_mid(), path)
            .with_token(token)
            .with_observe(0);
        self.send(node, &m, ctx);
    }

    pub fn deregister(&mut self, node: Endpoint, path: &str, ctx: &mut Ctx<'_>) {
        let token = match self.observations.iter().position(|o| o.node == node && o.path == path) {
            Some(i) => self.observations.remove(i).token,
            None => self.fresh_token(ctx),
        };
        let m = Message::request(MessageType::Con, Code::GET, self.mids.next_mid(), path)
            .with_token(token)
            .with_observe(1);
        self.send(node, &m, ctx);
    }

    /// Rejects the last notification of an observation, ending it.
    pub fn reset(&mut self, node: Endpoint, path: &str, ctx: &mut Ctx<'_>) {
        let Some(i) = self.observations.iter().position(|o| o.node == node && o.path == path) else {
            return;
        };
        let o = self.observations.remove(i);
        if let Some(mid) = o.last_mid {
            self.reply(node, &Message::reset(mid), ctx);
        }
    }

    pub fn bind(&mut self, node: Endpoint, path: &str, binding: &BindingInfo, ctx: &mut Ctx<'_>) {
        let token = self.fresh_token(ctx);
        let mut m = Message::request(MessageType::Con, Code::GET, self.mids.next_mid(), path)
            .with_token(token)
            .with_observe(0);
        m.options.set_binding(binding);
        self.send(node, &m, ctx);
    }

    /// Starts a block-wise upload of `image` to the node's loader.
    pub fn deploy(
        &mut self,
        node: Endpoint,
        loader: &str,
        filename: &str,
        image: &[u8],
        block_size: usize,
        ctx: &mut Ctx<'_>,
    ) {
        if Block::szx_for(block_size).is_none() {
            ctx.log("ERROR", format!("{} invalid block size {block_size}", self.name));
            return;
        }
        let mut blocks: Vec<Vec<u8>> = image.chunks(block_size).map(<[u8]>::to_vec).collect();
        if blocks.is_empty() {
            blocks.push(Vec::new());
        }
        let token = self.fresh_token(ctx);
        self.transfers.insert(
            token.clone(),
            Transfer {
                dst: node,
                loader: loader.to_string(),
                filename: filename.to_string(),
                blocks,
                size: block_size,
                next: 0,
            },
        );
        self.send_block(&token, ctx);
    }

    fn send_block(&mut self, token: &[u8], ctx: &mut Ctx<'_>) {
        let Some(t) = self.transfers.get_mut(token) else { return };
        let i = t.next;
        t.next += 1;
        let more = i + 1 < t.blocks.len();
        let mut m = Message::request(MessageType::Con, Code::POST, self.mids.next_mid(), &t.loader)
            .with_token(token.to_vec())
            .with_payload(t.blocks[i].clone());
        m.options.add_query(&format!("file={}", t.filename));
        m.options
            .set_block1(Block::new(i as u32, more, t.size).expect("checked size"));
        let dst = t.dst;
        self.send(dst, &m, ctx);
    }

    fn advance_transfer(&mut self, msg: &Message, ctx: &mut Ctx<'_>) {
        let Some(t) = self.transfers.get(&msg.token) else {
            return;
        };
        if msg.code == Code::CONTINUE && t.next < t.blocks.len() {
            let token = msg.token.clone();
            self.send_block(&token, ctx);
            return;
        }
        let t = self.transfers.remove(&msg.token).expect("present");
        if msg.code.is_success() {
            self.completed_deploys.push((ctx.now, t.filename));
        }
    }

    pub fn on_timer(&mut self, timer: ClientTimer, ctx: &mut Ctx<'_>) {
        let ClientTimer::Retransmit { mid, attempt } = timer;
        let max = ctx.max_retransmit();
        let Some(p) = self.pending.get_mut(&mid) else { return };
        if p.attempt != attempt {
            return;
        }
        if p.attempt >= max {
            self.pending.remove(&mid);
            self.failures.push((ctx.now, mid));
            ctx.log("GIVEUP", format!("{} mid={mid}", self.name));
            return;
        }
        p.attempt += 1;
        p.timeout = SimTime(p.timeout.0 * 2);
        let frame = Frame {
            src: self.endpoint,
            dst: p.dst,
            bytes: p.bytes.clone(),
        };
        let (at, attempt) = (ctx.now + p.timeout, p.attempt);
        ctx.send(frame);
        ctx.timer(at, Timer::Client(self.id, ClientTimer::Retransmit { mid, attempt }));
    }

    pub fn receive(&mut self, frame: Frame, ctx: &mut Ctx<'_>) {
        self.inbox.push((ctx.now, frame.clone()));
        if self.silent {
            return;
        }
        let Ok(msg) = Message::decode(&frame.bytes) else { return };
        let src = frame.src;
        match msg.msg_type {
            MessageType::Ack => {
                if self.pending.remove(&msg.mid).is_some() && !msg.code.is_empty() {
                    self.record_response(&msg, src, ctx.now);
                    self.advance_transfer(&msg, ctx);
                }
            }
            MessageType::Rst => {
                self.pending.remove(&msg.mid);
            }
            MessageType::Con | MessageType::Non => {
                let con = msg.msg_type == MessageType::Con;
                if msg.code.is_request() {
                    if con {
                        let ack = Message::piggybacked(&msg, Code::CHANGED);
                        self.reply(src, &ack, ctx);
                    }
                    return;
                }
                let duplicate = con && !self.seen_con.insert((src, msg.mid));
                let known = self
                    .observations
                    .iter()
                    .position(|o| o.token == msg.token && o.node.addr == src.addr);
                match (known, msg.options.observe()) {
                    (Some(i), obs) => {
                        if !duplicate {
                            let o = &mut self.observations[i];
                            o.last_mid = Some(msg.mid);
                            match obs {
                                Some(v) => {
                                    o.last_observe = Some(v);
                                    let path = o.path.clone();
                                    self.notifications.push(ReceivedNotification {
                                        at: ctx.now,
                                        from: src,
                                        path,
                                        token: msg.token.clone(),
                                        mid: msg.mid,
                                        msg_type: msg.msg_type,
                                        observe: v,
                                        payload: msg.payload.clone(),
                                    });
                                }
                                None => self.record_response(&msg, src, ctx.now),
                            }
                        }
                        if con {
                            self.reply(src, &Message::empty_ack(msg.mid), ctx);
                        }
                    }
                    (None, Some(_)) => {
                        // Nobody asked for this: tell the sender to stop.
                        self.reply(src, &Message::reset(msg.mid), ctx);
                    }
                    (None, None) => {
                        if !duplicate {
                            self.record_response(&msg, src, ctx.now);
                            self.advance_transfer(&msg, ctx);
                        }
                        if con {
                            self.reply(src, &Message::empty_ack(msg.mid), ctx);
                        }
                    }
                }
            }
        }
    }

    fn record_response(&mut self, msg: &Message, from: Endpoint, at: SimTime) {
        self.responses.push(ReceivedResponse {
            at,
            from,
            code: msg.code,
            mid: msg.mid,
            token: msg.token.clone(),
            payload: msg.payload.clone(),
        });
    }
}
