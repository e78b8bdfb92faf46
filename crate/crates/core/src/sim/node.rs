use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv6Addr;

use rand::Rng;

use crate::addr::Endpoint;
use crate::coap::{self, BindingInfo, Code, Message, MessageType, MidAllocator};
use crate::time::SimTime;

use super::link::LinkModel;
use super::{Ctx, Frame, Timer};

pub const DEFAULT_LOADER_PATH: &str = "/loader";
pub const DEFAULT_MAX_AGE: u32 = 60;

/// Message type used for observe notifications.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum NotificationPolicy {
    /// The response to a (re)registration is NON, later notifications CON.
    #[default]
    FirstNonThenCon,
    AllCon,
    AllNon,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub addr: Ipv6Addr,
    pub link: LinkModel,
    /// Resource values a fresh boot starts from.
    pub defaults: BTreeMap<String, Vec<u8>>,
    /// Initial contents of persistent storage.
    pub flash: BTreeMap<String, Vec<u8>>,
    pub loader_path: String,
    pub max_age: u32,
    pub policy: NotificationPolicy,
}

impl NodeConfig {
    pub fn new(addr: Ipv6Addr, link: LinkModel) -> Self {
        Self {
            addr,
            link,
            defaults: BTreeMap::new(),
            flash: BTreeMap::new(),
            loader_path: DEFAULT_LOADER_PATH.to_string(),
            max_age: DEFAULT_MAX_AGE,
            policy: NotificationPolicy::default(),
        }
    }

    pub fn with_resource(mut self, path: &str, value: impl Into<Vec<u8>>) -> Self {
        self.defaults.insert(path.to_string(), value.into());
        self
    }

    pub fn with_flash(mut self, file: &str, image: impl Into<Vec<u8>>) -> Self {
        self.flash.insert(file.to_string(), image.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeStatus {
    Down,
    /// Registration sent, waiting for the gateway's ACK; no other traffic served.
    Booting,
    Up,
    /// Registration never acknowledged.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observer {
    pub client: Endpoint,
    pub path: String,
    pub token: Vec<u8>,
    pub counter: u32,
    pub max_age: u32,
    pub last_mid: Option<u16>,
    pub retransmit_count: u8,
    notified: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeBinding {
    pub binding: BindingInfo,
    pub source: String,
    last_sent: Option<SimTime>,
    generation: u32,
    pmin_armed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeTimer {
    Boot { epoch: u32 },
    Registration { epoch: u32, attempt: u8 },
    Retransmit { epoch: u32, mid: u16, attempt: u8 },
    BindingPmin { epoch: u32, idx: usize },
    BindingPmax { epoch: u32, idx: usize, generation: u32 },
}

#[derive(Debug, Clone)]
struct PendingCon {
    dst: Endpoint,
    bytes: Vec<u8>,
    attempt: u8,
    timeout: SimTime,
    observer: Option<(Endpoint, String)>,
}

#[derive(Debug, Clone)]
struct Registration {
    mid: u16,
    bytes: Vec<u8>,
    first_sent: SimTime,
    attempt: u8,
    timeout: SimTime,
}

#[derive(Debug, Clone)]
struct Upload {
    szx: u8,
    next: u32,
    data: Vec<u8>,
}

/// Boot-time association with the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssociationRecord {
    pub epoch: u32,
    pub sent_at: SimTime,
    pub acked_at: Option<SimTime>,
    pub retransmissions: u8,
}

impl AssociationRecord {
    pub fn delay(&self) -> Option<SimTime> {
        self.acked_at.map(|a| a - self.sent_at)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentNotification {
    pub at: SimTime,
    pub epoch: u32,
    pub client: Endpoint,
    pub path: String,
    pub mid: u16,
    pub msg_type: MessageType,
    pub observe: u32,
    pub retransmission: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalReason {
    Deregistered,
    Reset,
    RetransmitLimit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObserverRemoval {
    pub at: SimTime,
    pub client: Endpoint,
    pub path: String,
    pub last_mid: Option<u16>,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ObserverState {
    pub client: Endpoint,
    pub path: String,
    pub token: Vec<u8>,
    pub counter: u32,
}

/// The node's interaction-created state, without MIDs, timers or epochs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DynamicState {
    pub put_values: BTreeMap<String, Vec<u8>>,
    pub observers: BTreeSet<ObserverState>,
    pub bindings: BTreeSet<(String, BindingInfo)>,
    pub loaded_modules: BTreeSet<String>,
}

/// A constrained CoAP server whose interaction state lives in volatile memory.
#[derive(Debug, Clone)]
pub struct VirtualNode {
    cfg: NodeConfig,
    gateway: Endpoint,
    flash: BTreeMap<String, Vec<u8>>,
    boot_epoch: u32,
    status: NodeStatus,

    resources: BTreeMap<String, Vec<u8>>,
    put_values: BTreeMap<String, Vec<u8>>,
    observers: Vec<Observer>,
    bindings: Vec<NodeBinding>,
    loaded_modules: BTreeSet<String>,
    uploads: BTreeMap<(Endpoint, String), Upload>,
    pending: BTreeMap<u16, PendingCon>,
    dedup: BTreeMap<(Endpoint, u16), Option<Vec<u8>>>,
    mids: MidAllocator,
    registration: Option<Registration>,

    associations: Vec<AssociationRecord>,
    removals: Vec<ObserverRemoval>,
    sent_notifications: Vec<SentNotification>,
}

impl VirtualNode {
    pub fn new(cfg: NodeConfig, gateway: Endpoint) -> Self {
        Self {
            flash: cfg.flash.clone(),
            resources: cfg.defaults.clone(),
            cfg,
            gateway,
            boot_epoch: 0,
            status: NodeStatus::Down,
            put_values: BTreeMap::new(),
            observers: Vec::new(),
            bindings: Vec::new(),
            loaded_modules: BTreeSet::new(),
            uploads: BTreeMap::new(),
            pending: BTreeMap::new(),
            dedup: BTreeMap::new(),
            mids: MidAllocator::new(0),
            registration: None,
            associations: Vec::new(),
            removals: Vec::new(),
            sent_notifications: Vec::new(),
        }
    }

    pub fn addr(&self) -> Ipv6Addr {
        self.cfg.addr
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::coap(self.cfg.addr)
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn link(&self) -> &LinkModel {
        &self.cfg.link
    }

    pub fn status(&self) -> NodeStatus {
        self.status
    }

    pub fn boot_epoch(&self) -> u32 {
        self.boot_epoch
    }

    pub fn resources(&self) -> &BTreeMap<String, Vec<u8>> {
        &self.resources
    }

    pub fn resource(&self, path: &str) -> Option<&[u8]> {
        self.resources.get(path).map(Vec::as_slice)
    }

    pub fn observers(&self) -> &[Observer] {
        &self.observers
    }

    pub fn bindings(&self) -> &[NodeBinding] {
        &self.bindings
    }

    pub fn loaded_modules(&self) -> &BTreeSet<String> {
        &self.loaded_modules
    }

    pub fn flash(&self) -> &BTreeMap<String, Vec<u8>> {
        &self.flash
    }

    pub fn associations(&self) -> &[AssociationRecord] {
        &self.associations
    }

    pub fn removals(&self) -> &[ObserverRemoval] {
        &self.removals
    }

    pub fn sent_notifications(&self) -> &[SentNotification] {
        &self.sent_notifications
    }

    pub fn dynamic_state(&self) -> DynamicState {
        DynamicState {
            put_values: self.put_values.clone(),
            observers: self
                .observers
                .iter()
                .map(|o| ObserverState {
                    client: o.client,
                    path: o.path.clone(),
                    token: o.token.clone(),
                    counter: o.counter,
                })
                .collect(),
            bindings: self
                .bindings
                .iter()
                .map(|b| (b.source.clone(), b.binding.clone()))
                .collect(),
            loaded_modules: self.loaded_modules.clone(),
        }
    }

    fn reset_volatile(&mut self) {
        self.resources = self.cfg.defaults.clone();
        self.put_values.clear();
        self.observers.clear();
        self.bindings.clear();
        self.loaded_modules.clear();
        self.uploads.clear();
        self.pending.clear();
        self.dedup.clear();
        self.registration = None;
    }

    fn send(&self, ctx: &mut Ctx<'_>, dst: Endpoint, msg: &Message) {
        match msg.encode() {
            Ok(bytes) => ctx.send(Frame {
                src: self.endpoint(),
                dst,
                bytes,
            }),
            Err(e) => ctx.log("ERROR", format!("{} cannot encode: {e}", self.cfg.addr)),
        }
    }

    /// Starts a new lifetime: volatile state reset, registration sent, all
    /// other traffic blocked until the gateway acknowledges.
    pub fn boot(&mut self, ctx: &mut Ctx<'_>) {
        self.boot_epoch += 1;
        self.reset_volatile();
        self.mids = MidAllocator::new(ctx.rng.gen());
        let mid = self.mids.next_mid();
        let token: [u8; 2] = ctx.rng.gen();
        let msg = coap::registration_request(mid, token.to_vec());
        let bytes = msg.encode().expect("registration encodes");
        let timeout = ctx.draw_ack_timeout();
        ctx.log("BOOT", format!("{} epoch={}", self.cfg.addr, self.boot_epoch));
        self.status = NodeStatus::Booting;
        self.registration = Some(Registration {
            mid,
            bytes: bytes.clone(),
            first_sent: ctx.now,
            attempt: 0,
            timeout,
        });
        self.associations.push(AssociationRecord {
            epoch: self.boot_epoch,
            sent_at: ctx.now,
            acked_at: None,
            retransmissions: 0,
        });
        ctx.send(Frame {
            src: self.endpoint(),
            dst: self.gateway,
            bytes,
        });
        ctx.timer(
            ctx.now + timeout,
            Timer::Node(
                self.cfg.addr,
                NodeTimer::Registration {
                    epoch: self.boot_epoch,
                    attempt: 0,
                },
            ),
        );
    }

    /// Loses all volatile state and stays silent for `downtime`, then boots.
    pub fn crash(&mut self, downtime: SimTime, ctx: &mut Ctx<'_>) {
        if self.status == NodeStatus::Down {
            return;
        }
        ctx.log(
            "CRASH",
            format!("{} downtime={}ms", self.cfg.addr, downtime.as_millis_f64()),
        );
        self.status = NodeStatus::Down;
        self.reset_volatile();
        ctx.timer(
            ctx.now + downtime,
            Timer::Node(self.cfg.addr, NodeTimer::Boot { epoch: self.boot_epoch }),
        );
    }

    pub fn on_timer(&mut self, timer: NodeTimer, ctx: &mut Ctx<'_>) {
        match timer {
            NodeTimer::Boot { epoch } => {
                if epoch == self.boot_epoch && self.status == NodeStatus::Down {
                    self.boot(ctx);
                }
            }
            NodeTimer::Registration { epoch, attempt } => {
                if epoch != self.boot_epoch || self.status != NodeStatus::Booting {
                    return;
                }
                let max = ctx.max_retransmit();
                let Some(reg) = self.registration.as_mut() else { return };
                if reg.attempt != attempt {
                    return;
                }
                if reg.attempt >= max {
                    self.status = NodeStatus::Stalled;
                    ctx.log("STALL", format!("{} registration unacknowledged", self.cfg.addr));
                    return;
                }
                reg.attempt += 1;
                reg.timeout = SimTime(reg.timeout.0 * 2);
                let (bytes, at, attempt) = (reg.bytes.clone(), ctx.now + reg.timeout, reg.attempt);
                if let Some(rec) = self.associations.last_mut() {
                    rec.retransmissions = attempt;
                }
                ctx.send(Frame {
                    src: self.endpoint(),
                    dst: self.gateway,
                    bytes,
                });
                ctx.timer(
                    at,
                    Timer::Node(self.cfg.addr, NodeTimer::Registration { epoch, attempt }),
                );
            }
            NodeTimer::Retransmit { epoch, mid, attempt } => {
                if epoch == self.boot_epoch && self.status == NodeStatus::Up {
                    self.retransmit(mid, attempt, ctx);
                }
            }
            NodeTimer::BindingPmin { epoch, idx } => {
                if epoch == self.boot_epoch && self.status == NodeStatus::Up && idx < self.bindings.len() {
                    self.bindings[idx].pmin_armed = false;
                    self.send_binding(idx, ctx);
                }
            }
            NodeTimer::BindingPmax { epoch, idx, generation } => {
                if epoch == self.boot_epoch
                    && self.status == NodeStatus::Up
                    && self.bindings.get(idx).is_some_and(|b| b.generation == generation)
                {
                    self.send_binding(idx, ctx);
                }
            }
        }
    }

    fn retransmit(&mut self, mid: u16, attempt: u8, ctx: &mut Ctx<'_>) {
        let max = ctx.max_retransmit();
        let Some(p) = self.pending.get_mut(&mid) else { return };
        if p.attempt != attempt {
            return;
        }
        if p.attempt >= max {
            self.pending.remove(&mid);
            return;
        }
        p.attempt += 1;
        p.timeout = SimTime(p.timeout.0 * 2);
        let (dst, bytes, attempt, at) = (p.dst, p.bytes.clone(), p.attempt, ctx.now + p.timeout);
        let observer = p.observer.clone();
        ctx.send(Frame {
            src: self.endpoint(),
            dst,
            bytes: bytes.clone(),
        });
        if let Some((client, path)) = observer {
            if let Some(o) = self.observers.iter_mut().find(|o| o.client == client && o.path == path) {
                o.retransmit_count = attempt;
                self.sent_notifications.push(SentNotification {
                    at: ctx.now,
                    epoch: self.boot_epoch,
                    client,
                    path: path.clone(),
                    mid,
                    msg_type: MessageType::Con,
                    observe: o.counter,
                    retransmission: attempt,
                });
            }
            if attempt >= max {
                // Last retry is out: the relationship is given up now.
                self.pending.remove(&mid);
                self.remove_observer(&client, &path, RemovalReason::RetransmitLimit, ctx);
                return;
            }
        }
        ctx.timer(
            at,
            Timer::Node(
                self.cfg.addr,
                NodeTimer::Retransmit {
                    epoch: self.boot_epoch,
                    mid,
                    attempt,
                },
            ),
        );
    }

    fn remove_observer(&mut self, client: &Endpoint, path: &str, reason: RemovalReason, ctx: &mut Ctx<'_>) {
        if let Some(i) = self
            .observers
            .iter()
            .position(|o| o.client == *client && o.path == path)
        {
            let o = self.observers.remove(i);
            self.pending
                .retain(|_, p| p.observer.as_ref() != Some(&(*client, path.to_string())));
            ctx.log(
                "OBS-DEL",
                format!(
                    "{} {} {} {:?} last_mid={:?}",
                    self.cfg.addr, client, path, reason, o.last_mid
                ),
            );
            self.removals.push(ObserverRemoval {
                at: ctx.now,
                client: *client,
                path: path.to_string(),
                last_mid: o.last_mid,
                reason,
            });
        }
    }

    pub fn receive(&mut self, frame: Frame, ctx: &mut Ctx<'_>) {
        match self.status {
            NodeStatus::Down | NodeStatus::Stalled => {
                ctx.log("DROP", format!("{} not running, from {}", self.cfg.addr, frame.src));
                return;
            }
            _ => {}
        }
        let Ok(msg) = Message::decode(&frame.bytes) else {
            ctx.log("DROP", format!("{} malformed frame from {}", self.cfg.addr, frame.src));
            return;
        };
        if self.status == NodeStatus::Booting {
            let acked = msg.msg_type == MessageType::Ack
                && frame.src == self.gateway
                && self.registration.as_ref().is_some_and(|r| r.mid == msg.mid);
            if !acked {
                ctx.log(
                    "BLOCKED",
                    format!("{} booting, ignores {}", self.cfg.addr, msg.summary()),
                );
                return;
            }
            let reg = self.registration.take().expect("checked");
            self.status = NodeStatus::Up;
            if let Some(rec) = self.associations.last_mut() {
                rec.acked_at = Some(ctx.now);
            }
            ctx.log(
                "UP",
                format!(
                    "{} epoch={} association={}ms",
                    self.cfg.addr,
                    self.boot_epoch,
                    (ctx.now - reg.first_sent).as_millis_f64()
                ),
            );
            return;
        }

        match msg.msg_type {
            MessageType::Ack | MessageType::Rst => self.on_ack_or_reset(&msg, frame.src, ctx),
            _ if msg.code.is_request() => self.on_request(&msg, frame.src, ctx),
            MessageType::Con => self.send(ctx, frame.src, &Message::empty_ack(msg.mid)),
            _ => {}
        }
    }

    fn on_ack_or_reset(&mut self, msg: &Message, src: Endpoint, ctx: &mut Ctx<'_>) {
        let is_reset = msg.msg_type == MessageType::Rst;
        if let Some(p) = self.pending.remove(&msg.mid) {
            if let Some((client, path)) = p.observer {
                if is_reset {
                    self.remove_observer(&client, &path, RemovalReason::Reset, ctx);
                } else if let Some(o) = self.observers.iter_mut().find(|o| o.client == client && o.path == path) {
                    o.retransmit_count = 0;
                }
            }
            return;
        }
        if is_reset {
            let hit = self
                .observers
                .iter()
                .find(|o| o.client == src && o.last_mid == Some(msg.mid))
                .map(|o| (o.client, o.path.clone()));
            if let Some((client, path)) = hit {
                self.remove_observer(&client, &path, RemovalReason::Reset, ctx);
            }
        }
    }

    fn on_request(&mut self, msg: &Message, src: Endpoint, ctx: &mut Ctx<'_>) {
        if let Some(cached) = self.dedup.get(&(src, msg.mid)) {
            if let Some(bytes) = cached.clone() {
                ctx.send(Frame {
                    src: self.endpoint(),
                    dst: src,
                    bytes,
                });
            }
            return;
        }
        let replies = self.handle_request(msg, src, ctx);
        let first = replies.first().and_then(|m| m.encode().ok());
        self.dedup.insert((src, msg.mid), first);
        for r in &replies {
            self.send(ctx, src, r);
        }
    }

    fn reply(&mut self, req: &Message, code: Code) -> Message {
        if req.is_confirmable() {
            Message::piggybacked(req, code)
        } else {
            Message::new(MessageType::Non, code, self.mids.next_mid()).with_token(req.token.clone())
        }
    }

    /// Serves one request and returns the messages to send back, in order.
    pub fn handle_request(&mut self, msg: &Message, src: Endpoint, ctx: &mut Ctx<'_>) -> Vec<Message> {
        let path = msg.path();
        if path == self.cfg.loader_path {
            return vec![self.loader(msg, src)];
        }
        let Some(value) = self.resources.get(&path).cloned() else {
            return vec![self.reply(msg, Code::NOT_FOUND)];
        };
        match msg.code {
            Code::GET => match msg.options.observe() {
                None => vec![self.reply(msg, Code::CONTENT).with_payload(value)],
                Some(obs) => {
                    if let Some(binding) = msg.options.binding() {
                        self.add_binding(binding, &path, ctx);
                        vec![self.reply(msg, Code::CONTENT).with_payload(value)]
                    } else if obs == 1 {
                        self.remove_observer(&src, &path, RemovalReason::Deregistered, ctx);
                        vec![self.reply(msg, Code::CONTENT).with_payload(value)]
                    } else {
                        let start = msg.options.resume_counter().unwrap_or(obs);
                        let idx = self.add_observer(src, &path, msg.token.clone(), start, ctx);
                        let mut out = Vec::new();
                        if msg.is_confirmable() {
                            out.push(Message::empty_ack(msg.mid));
                        }
                        out.push(self.notification(idx, true, ctx));
                        out
                    }
                }
            },
            Code::PUT => {
                self.resources.insert(path.clone(), msg.payload.clone());
                self.put_values.insert(path, msg.payload.clone());
                vec![self.reply(msg, Code::CHANGED)]
            }
            _ => vec![self.reply(msg, Code::METHOD_NOT_ALLOWED)],
        }
    }

    fn add_observer(&mut self, client: Endpoint, path: &str, token: Vec<u8>, obs: u32, ctx: &mut Ctx<'_>) -> usize {
        let obs = obs & coap::MAX_OBSERVE;
        if let Some(i) = self.observers.iter().position(|o| o.client == client && o.path == path) {
            let key = (client, path.to_string());
            self.pending.retain(|_, p| p.observer.as_ref() != Some(&key));
            let o = &mut self.observers[i];
            o.token = token;
            o.counter = o.counter.max(obs);
            o.retransmit_count = 0;
            o.notified = false;
            ctx.log(
                "OBS-REFRESH",
                format!("{} {} {} counter={}", self.cfg.addr, client, path, o.counter),
            );
            return i;
        }
        // A nonzero observe value in the registration resumes that counter.
        self.observers.push(Observer {
            client,
            path: path.to_string(),
            token,
            counter: obs,
            max_age: self.cfg.max_age,
            last_mid: None,
            retransmit_count: 0,
            notified: false,
        });
        ctx.log(
            "OBS-ADD",
            format!("{} {} {} counter={}", self.cfg.addr, client, path, obs),
        );
        self.observers.len() - 1
    }

    /// Builds the next notification for `observers[idx]`, arming retransmission
    /// if it is confirmable.
    fn notification(&mut self, idx: usize, registration: bool, ctx: &mut Ctx<'_>) -> Message {
        let policy = self.cfg.policy;
        let mid = self.mids.next_mid();
        let o = &mut self.observers[idx];
        let msg_type = match policy {
            NotificationPolicy::AllCon => MessageType::Con,
            NotificationPolicy::AllNon => MessageType::Non,
            NotificationPolicy::FirstNonThenCon if !o.notified => MessageType::Non,
            NotificationPolicy::FirstNonThenCon => MessageType::Con,
        };
        o.notified = true;
        o.last_mid = Some(mid);
        o.retransmit_count = 0;
        let value = self.resources.get(&o.path).cloned().unwrap_or_default();
        let mut m = Message::new(msg_type, Code::CONTENT, mid)
            .with_token(o.token.clone())
            .with_observe(o.counter)
            .with_payload(value);
        if registration {
            m.options.set_content_format(0);
        }
        m.options.set_max_age(o.max_age);
        let (client, path, counter) = (o.client, o.path.clone(), o.counter);
        self.sent_notifications.push(SentNotification {
            at: ctx.now,
            epoch: self.boot_epoch,
            client,
            path: path.clone(),
            mid,
            msg_type,
            observe: counter,
            retransmission: 0,
        });
        if msg_type == MessageType::Con {
            let key = (client, path);
            self.pending.retain(|_, p| p.observer.as_ref() != Some(&key));
            let timeout = ctx.draw_ack_timeout();
            self.pending.insert(
                mid,
                PendingCon {
                    dst: client,
                    bytes: m.encode().expect("notification encodes"),
                    attempt: 0,
                    timeout,
                    observer: Some(key),
                },
            );
            ctx.timer(
                ctx.now + timeout,
                Timer::Node(
                    self.cfg.addr,
                    NodeTimer::Retransmit {
                        epoch: self.boot_epoch,
                        mid,
                        attempt: 0,
                    },
                ),
            );
        }
        m
    }

    /// Sensor-side change of a resource. Observers of `path` are notified with
    /// their counter advanced by `step`; bindings on `path` fire.
    pub fn change_resource(&mut self, path: &str, value: Vec<u8>, step: u32, ctx: &mut Ctx<'_>) {
        if self.status != NodeStatus::Up {
            ctx.log("DROP", format!("{} change of {path} while not running", self.cfg.addr));
            return;
        }
        if !self.resources.contains_key(path) {
            ctx.log("ERROR", format!("{} has no resource {path}", self.cfg.addr));
            return;
        }
        self.resources.insert(path.to_string(), value);
        self.notify_observers(path, step, ctx);
        let idxs: Vec<usize> = (0..self.bindings.len())
            .filter(|i| self.bindings[*i].source == path)
            .collect();
        for i in idxs {
            self.fire_binding(i, ctx);
        }
    }

    pub fn notify_observers(&mut self, path: &str, step: u32, ctx: &mut Ctx<'_>) {
        let idxs: Vec<usize> = (0..self.observers.len())
            .filter(|i| self.observers[*i].path == path)
            .collect();
        for i in idxs {
            let o = &mut self.observers[i];
            o.counter = (o.counter + step) & coap::MAX_OBSERVE;
            let client = o.client;
            let m = self.notification(i, false, ctx);
            self.send(ctx, client, &m);
        }
    }

    fn add_binding(&mut self, binding: BindingInfo, source: &str, ctx: &mut Ctx<'_>) {
        if self.bindings.iter().any(|b| b.binding == binding && b.source == source) {
            return;
        }
        ctx.log("BIND", format!("{} {} -> {}", self.cfg.addr, source, binding));
        self.bindings.push(NodeBinding {
            binding,
            source: source.to_string(),
            last_sent: None,
            generation: 0,
            pmin_armed: false,
        });
        self.arm_pmax(self.bindings.len() - 1, ctx);
    }

    fn arm_pmax(&self, idx: usize, ctx: &mut Ctx<'_>) {
        let b = &self.bindings[idx];
        if b.binding.pmax > 0 {
            ctx.timer(
                ctx.now + SimTime::from_secs(u64::from(b.binding.pmax)),
                Timer::Node(
                    self.cfg.addr,
                    NodeTimer::BindingPmax {
                        epoch: self.boot_epoch,
                        idx,
                        generation: b.generation,
                    },
                ),
            );
        }
    }

    fn fire_binding(&mut self, idx: usize, ctx: &mut Ctx<'_>) {
        let b = &mut self.bindings[idx];
        let earliest = b.last_sent.map(|t| t + SimTime::from_secs(u64::from(b.binding.pmin)));
        match earliest {
            Some(at) if at > ctx.now => {
                if !b.pmin_armed {
                    b.pmin_armed = true;
                    ctx.timer(
                        at,
                        Timer::Node(
                            self.cfg.addr,
                            NodeTimer::BindingPmin {
                                epoch: self.boot_epoch,
                                idx,
                            },
                        ),
                    );
                }
            }
            _ => self.send_binding(idx, ctx),
        }
    }

    /// Bindings push the source value as a PUT to the destination.
    fn send_binding(&mut self, idx: usize, ctx: &mut Ctx<'_>) {
        let value = self
            .resources
            .get(&self.bindings[idx].source)
            .cloned()
            .unwrap_or_default();
        let mid = self.mids.next_mid();
        let b = &mut self.bindings[idx];
        b.last_sent = Some(ctx.now);
        b.generation += 1;
        let dest = b.binding.dest;
        let m = Message::request(MessageType::Non, Code::PUT, mid, &b.binding.dest_resource).with_payload(value);
        self.send(ctx, dest, &m);
        self.arm_pmax(idx, ctx);
    }

    fn loader(&mut self, msg: &Message, src: Endpoint) -> Message {
        let file = msg.options.query_value("file").filter(|f| !f.is_empty());
        match (msg.code, msg.options.block1()) {
            (Code::PUT | Code::POST, Some(block)) => {
                let Some(file) = file else {
                    return self.reply(msg, Code::BAD_REQUEST);
                };
                let key = (src, file.clone());
                if block.num == 0 {
                    self.uploads.insert(
                        key.clone(),
                        Upload {
                            szx: block.szx,
                            next: 0,
                            data: Vec::new(),
                        },
                    );
                }
                let in_sequence = self
                    .uploads
                    .get(&key)
                    .is_some_and(|u| u.next == block.num && u.szx == block.szx);
                if !in_sequence {
                    self.uploads.remove(&key);
                    return self.reply(msg, Code::REQUEST_ENTITY_INCOMPLETE);
                }
                let up = self.uploads.get_mut(&key).expect("checked");
                up.data.extend_from_slice(&msg.payload);
                up.next += 1;
                let code = if block.more {
                    Code::CONTINUE
                } else {
                    let up = self.uploads.remove(&key).expect("checked");
                    // Stored persistently first, then relocated into memory.
                    self.flash.insert(file.clone(), up.data);
                    self.loaded_modules.insert(file);
                    Code::CHANGED
                };
                let mut r = self.reply(msg, code);
                r.options.set_block1(block);
                r
            }
            (Code::POST, None) => match file {
                Some(f) if self.flash.contains_key(&f) => {
                    self.loaded_modules.insert(f);
                    self.reply(msg, Code::CREATED)
                }
                _ => self.reply(msg, Code::BAD_REQUEST),
            },
            (Code::GET, _) => {
                let names: Vec<&str> = self.loaded_modules.iter().map(String::as_str).collect();
                let payload = names.join(",").into_bytes();
                self.reply(msg, Code::CONTENT).with_payload(payload)
            }
            _ => self.reply(msg, Code::METHOD_NOT_ALLOWED),
        }
    }
}
