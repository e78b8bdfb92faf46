//! Deterministic discrete-event model of clients, gateway and LLN nodes.
//!
//! All randomness comes from one seeded generator drawn in event order, so a
//! seed fully determines a run.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv6Addr;

use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::addr::Endpoint;
use crate::coap::{BindingInfo, Message, MessageType};
use crate::gateway::{Gateway, GatewayConfig, GatewayTimer, Ingress};
use crate::time::SimTime;

pub mod client;
pub mod link;
pub mod node;

pub use client::{Client, ClientTimer, Observation, ReceivedNotification, ReceivedResponse};
pub use link::{DelayRange, LinkModel, Rdc};
pub use node::{
    AssociationRecord, DynamicState, NodeConfig, NodeStatus, NodeTimer, NotificationPolicy, ObserverRemoval,
    ObserverState, RemovalReason, SentNotification, VirtualNode,
};

pub type SimRng = rand_chacha::ChaCha8Rng;

pub const DEFAULT_INTERNET_DELAY: SimTime = SimTime::from_millis(10);
pub const ACK_TIMEOUT: SimTime = SimTime::from_secs(2);
pub const ACK_RANDOM_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub bytes: Vec<u8>,
}

impl Frame {
    pub fn summary(&self) -> String {
        match Message::decode(&self.bytes) {
            Ok(m) => format!("{} -> {} {}", self.src, self.dst, m.summary()),
            Err(_) => format!("{} -> {} <{} undecodable bytes>", self.src, self.dst, self.bytes.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub usize);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Entity {
    Gateway,
    Node(Ipv6Addr),
    Client(ClientId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    Node(Ipv6Addr, NodeTimer),
    Client(ClientId, ClientTimer),
    Gateway(GatewayTimer),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(Frame),
    Timer { at: SimTime, timer: Timer },
}

/// CoAP transmission parameters shared by every endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoapTiming {
    pub ack_timeout: SimTime,
    pub random_factor: f64,
    pub max_retransmit: u8,
}

impl Default for CoapTiming {
    fn default() -> Self {
        Self {
            ack_timeout: ACK_TIMEOUT,
            random_factor: ACK_RANDOM_FACTOR,
            max_retransmit: crate::directory::MAX_RETRANSMIT,
        }
    }
}

/// Text trace, one line per event when enabled.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    enabled: bool,
    lines: Vec<String>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            lines: Vec::new(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, now: SimTime, kind: &str, text: &str) {
        if self.enabled {
            self.lines.push(format!("{now:>12} {kind:<11} {text}"));
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

/// What an entity sees while handling one event. Sends and timers are
/// collected and applied by the simulation afterwards.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub rng: &'a mut SimRng,
    timing: CoapTiming,
    trace: &'a mut Trace,
    actions: Vec<Action>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: SimTime, rng: &'a mut SimRng, timing: CoapTiming, trace: &'a mut Trace) -> Self {
        Self {
            now,
            rng,
            timing,
            trace,
            actions: Vec::new(),
        }
    }

    pub fn send(&mut self, frame: Frame) {
        self.actions.push(Action::Send(frame));
    }

    pub fn timer(&mut self, at: SimTime, timer: Timer) {
        self.actions.push(Action::Timer { at, timer });
    }

    pub fn log(&mut self, kind: &str, text: impl AsRef<str>) {
        self.trace.record(self.now, kind, text.as_ref());
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_enabled()
    }

    /// Initial retransmission timeout, uniform in
    /// `[ACK_TIMEOUT, ACK_TIMEOUT * ACK_RANDOM_FACTOR]`.
    pub fn draw_ack_timeout(&mut self) -> SimTime {
        let lo = self.timing.ack_timeout.0;
        let hi = (lo as f64 * self.timing.random_factor) as u64;
        if hi <= lo {
            return self.timing.ack_timeout;
        }
        SimTime(self.rng.gen_range(lo..=hi))
    }

    pub fn max_retransmit(&self) -> u8 {
        self.timing.max_retransmit
    }

    pub fn take_actions(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.actions)
    }
}

/// Scripted stimulus applied at a scheduled time.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Put {
        client: ClientId,
        node: Ipv6Addr,
        path: String,
        value: Vec<u8>,
        confirmable: bool,
    },
    Get {
        client: ClientId,
        node: Ipv6Addr,
        path: String,
    },
    Observe {
        client: ClientId,
        node: Ipv6Addr,
        path: String,
    },
    Deregister {
        client: ClientId,
        node: Ipv6Addr,
        path: String,
    },
    /// RST the last notification of an observation.
    Reset {
        client: ClientId,
        node: Ipv6Addr,
        path: String,
    },
    Bind {
        client: ClientId,
        node: Ipv6Addr,
        path: String,
        binding: BindingInfo,
    },
    Deploy {
        client: ClientId,
        node: Ipv6Addr,
        loader: String,
        filename: String,
        image: Vec<u8>,
        block_size: usize,
    },
    /// A silent client receives but never answers.
    Silence {
        client: ClientId,
        silent: bool,
    },
    Crash {
        node: Ipv6Addr,
        downtime: SimTime,
    },
    Change {
        node: Ipv6Addr,
        path: String,
        value: Vec<u8>,
        step: u32,
    },
    Boot {
        node: Ipv6Addr,
    },
}

#[derive(Debug, Clone)]
enum Event {
    Deliver { to: Entity, ingress: Ingress, frame: Frame },
    Timer(Timer),
    Command(Command),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub gateway: GatewayConfig,
    /// One-way delay between an external client and the gateway.
    pub internet: DelayRange,
    pub timing: CoapTiming,
    pub trace: bool,
}

impl SimConfig {
    pub fn new(seed: u64, gateway: GatewayConfig) -> Self {
        Self {
            seed,
            gateway,
            internet: DelayRange::fixed(DEFAULT_INTERNET_DELAY),
            timing: CoapTiming::default(),
            trace: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("node address {0} is outside the LLN prefix")]
    OutsidePrefix(Ipv6Addr),
    #[error("gateway endpoint {0} must be outside the LLN prefix")]
    GatewayInPrefix(Endpoint),
    #[error("duplicate node {0}")]
    DuplicateNode(Ipv6Addr),
    #[error("client endpoint {0} collides with another entity")]
    DuplicateClient(Endpoint),
}

#[derive(Debug)]
pub struct Simulation {
    now: SimTime,
    seq: u64,
    queue: BTreeMap<(SimTime, u64), Event>,
    rng: SimRng,
    timing: CoapTiming,
    internet: DelayRange,
    trace: Trace,
    gateway: Gateway,
    nodes: BTreeMap<Ipv6Addr, VirtualNode>,
    clients: Vec<Client>,
    /// Latest scheduled arrival per directed link; later sends never overtake.
    fifo: BTreeMap<(Entity, Entity), SimTime>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        if cfg.gateway.lln_prefix.contains(&cfg.gateway.endpoint.addr) {
            return Err(SimError::GatewayInPrefix(cfg.gateway.endpoint));
        }
        Ok(Self {
            now: SimTime::ZERO,
            seq: 0,
            queue: BTreeMap::new(),
            rng: SimRng::seed_from_u64(cfg.seed),
            timing: cfg.timing,
            internet: cfg.internet,
            trace: Trace::new(cfg.trace),
            gateway: Gateway::new(cfg.gateway),
            nodes: BTreeMap::new(),
            clients: Vec::new(),
            fifo: BTreeMap::new(),
        })
    }

    /// Adds a node, powered off until a `Boot` command.
    pub fn add_node(&mut self, cfg: NodeConfig) -> Result<Ipv6Addr, SimError> {
        let addr = cfg.addr;
        if !self.gateway.config().lln_prefix.contains(&addr) {
            return Err(SimError::OutsidePrefix(addr));
        }
        if self.nodes.contains_key(&addr) {
            return Err(SimError::DuplicateNode(addr));
        }
        let node = VirtualNode::new(cfg, self.gateway.config().endpoint);
        self.nodes.insert(addr, node);
        Ok(addr)
    }

    pub fn add_client(&mut self, name: &str, endpoint: Endpoint) -> Result<ClientId, SimError> {
        if self.gateway.config().lln_prefix.contains(&endpoint.addr)
            || endpoint == self.gateway.config().endpoint
            || self.clients.iter().any(|c| c.endpoint() == endpoint)
        {
            return Err(SimError::DuplicateClient(endpoint));
        }
        let id = ClientId(self.clients.len());
        let mid_seed = self.rng.gen();
        self.clients.push(Client::new(id, name, endpoint, mid_seed));
        Ok(id)
    }

    pub fn schedule(&mut self, at: SimTime, cmd: Command) {
        self.push(at, Event::Command(cmd));
    }

    fn push(&mut self, at: SimTime, ev: Event) {
        self.queue.insert((at.max(self.now), self.seq), ev);
        self.seq += 1;
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn node(&self, addr: &Ipv6Addr) -> Option<&VirtualNode> {
        self.nodes.get(addr)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &VirtualNode> {
        self.nodes.values()
    }

    pub fn client(&self, id: ClientId) -> &Client {
        &self.clients[id.0]
    }

    pub fn clients(&self) -> &[Client] {
        &self.clients
    }

    pub fn client_by_name(&self, name: &str) -> Option<&Client> {
        self.clients.iter().find(|c| c.name() == name)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Processes every event due at or before `until`, then advances the
    /// clock to `until`.
    pub fn run_until(&mut self, until: SimTime) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > until {
                break;
            }
            let ((at, _), ev) = entry.remove_entry();
            self.now = at;
            self.dispatch(ev);
        }
        self.now = self.now.max(until);
    }

    fn dispatch(&mut self, ev: Event) {
        let mut ctx = Ctx::new(self.now, &mut self.rng, self.timing, &mut self.trace);
        let origin = match ev {
            Event::Deliver { to, ingress, frame } => {
                ctx.log("RX", format!("{} {}", entity_name(to), frame.summary()));
                match to {
                    Entity::Gateway => self.gateway.forward(frame, ingress, &mut ctx),
                    Entity::Node(a) => {
                        if let Some(n) = self.nodes.get_mut(&a) {
                            n.receive(frame, &mut ctx);
                        }
                    }
                    Entity::Client(id) => self.clients[id.0].receive(frame, &mut ctx),
                }
                to
            }
            Event::Timer(t) => match t {
                Timer::Node(a, nt) => {
                    if let Some(n) = self.nodes.get_mut(&a) {
                        n.on_timer(nt, &mut ctx);
                    }
                    Entity::Node(a)
                }
                Timer::Client(id, ct) => {
                    self.clients[id.0].on_timer(ct, &mut ctx);
                    Entity::Client(id)
                }
                Timer::Gateway(gt) => {
                    self.gateway.on_timer(gt, &mut ctx);
                    Entity::Gateway
                }
            },
            Event::Command(cmd) => {
                ctx.log("CMD", format!("{cmd:?}"));
                apply_command(cmd, &mut self.nodes, &mut self.clients, &mut ctx)
            }
        };
        let actions = ctx.take_actions();
        for a in actions {
            match a {
                Action::Send(frame) => self.transmit(origin, frame),
                Action::Timer { at, timer } => self.push(at, Event::Timer(timer)),
            }
        }
    }

    fn route(&self, from: Entity, dst: &Endpoint) -> Option<(Entity, LinkRoute)> {
        let prefix = &self.gateway.config().lln_prefix;
        match from {
            Entity::Client(_) => Some((Entity::Gateway, LinkRoute::Internet)),
            Entity::Gateway => {
                if prefix.contains(&dst.addr) {
                    let n = self.nodes.get(&dst.addr)?;
                    Some((Entity::Node(dst.addr), LinkRoute::Lln(*n.link())))
                } else {
                    let c = self.clients.iter().find(|c| c.endpoint() == *dst)?;
                    Some((Entity::Client(c.id()), LinkRoute::Internet))
                }
            }
            Entity::Node(a) => {
                let own = *self.nodes.get(&a)?.link();
                if prefix.contains(&dst.addr) && dst.addr != a {
                    let peer = self.nodes.get(&dst.addr)?;
                    let hops = own.hops + peer.link().hops;
                    Some((Entity::Node(dst.addr), LinkRoute::Lln(own.with_hops(hops))))
                } else {
                    Some((Entity::Gateway, LinkRoute::Lln(own)))
                }
            }
        }
    }

    fn transmit(&mut self, from: Entity, frame: Frame) {
        let Some((to, route)) = self.route(from, &frame.dst) else {
            self.trace.record(
                self.now,
                "NOROUTE",
                &format!("{} {}", entity_name(from), frame.summary()),
            );
            return;
        };
        let delay = match route {
            LinkRoute::Internet => Some(self.internet.sample(&mut self.rng)),
            LinkRoute::Lln(link) => link.traverse(&mut self.rng),
        };
        let Some(delay) = delay else {
            self.trace
                .record(self.now, "LOSS", &format!("{} {}", entity_name(from), frame.summary()));
            return;
        };
        let fifo = self.fifo.entry((from, to)).or_insert(SimTime::ZERO);
        let arrival = (self.now + delay).max(*fifo);
        *fifo = arrival;
        if self.trace.is_enabled() {
            self.trace.record(
                self.now,
                "TX",
                &format!("{} {} arrives={}", entity_name(from), frame.summary(), arrival),
            );
        }
        let ingress = match from {
            Entity::Node(_) => Ingress::Lln,
            _ => Ingress::External,
        };
        self.push(arrival, Event::Deliver { to, ingress, frame });
    }
}

#[derive(Debug, Clone, Copy)]
enum LinkRoute {
    Internet,
    Lln(LinkModel),
}

fn entity_name(e: Entity) -> String {
    match e {
        Entity::Gateway => "gw".to_string(),
        Entity::Node(a) => format!("node[{a}]"),
        Entity::Client(id) => id.to_string(),
    }
}

fn apply_command(
    cmd: Command,
    nodes: &mut BTreeMap<Ipv6Addr, VirtualNode>,
    clients: &mut [Client],
    ctx: &mut Ctx<'_>,
) -> Entity {
    let node_ep = |a: Ipv6Addr| Endpoint::coap(a);
    match cmd {
        Command::Put {
            client,
            node,
            path,
            value,
            confirmable,
        } => {
            let t = if confirmable {
                MessageType::Con
            } else {
                MessageType::Non
            };
            clients[client.0].put(node_ep(node), &path, value, t, ctx);
            Entity::Client(client)
        }
        Command::Get { client, node, path } => {
            clients[client.0].get(node_ep(node), &path, ctx);
            Entity::Client(client)
        }
        Command::Observe { client, node, path } => {
            clients[client.0].observe(node_ep(node), &path, ctx);
            Entity::Client(client)
        }
        Command::Deregister { client, node, path } => {
            clients[client.0].deregister(node_ep(node), &path, ctx);
            Entity::Client(client)
        }
        Command::Reset { client, node, path } => {
            clients[client.0].reset(node_ep(node), &path, ctx);
            Entity::Client(client)
        }
        Command::Bind {
            client,
            node,
            path,
            binding,
        } => {
            clients[client.0].bind(node_ep(node), &path, &binding, ctx);
            Entity::Client(client)
        }
        Command::Deploy {
            client,
            node,
            loader,
            filename,
            image,
            block_size,
        } => {
            clients[client.0].deploy(node_ep(node), &loader, &filename, &image, block_size, ctx);
            Entity::Client(client)
        }
        Command::Silence { client, silent } => {
            clients[client.0].set_silent(silent);
            Entity::Client(client)
        }
        Command::Crash { node, downtime } => {
            if let Some(n) = nodes.get_mut(&node) {
                n.crash(downtime, ctx);
            }
            Entity::Node(node)
        }
        Command::Change {
            node,
            path,
            value,
            step,
        } => {
            if let Some(n) = nodes.get_mut(&node) {
                n.change_resource(&path, value, step, ctx);
            }
            Entity::Node(node)
        }
        Command::Boot { node } => {
            if let Some(n) = nodes.get_mut(&node) {
                if n.status() == NodeStatus::Down {
                    n.boot(ctx);
                }
            }
            Entity::Node(node)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Owns what a [`Ctx`] borrows, for driving one entity by hand.
    pub struct TestCtx {
        pub now: SimTime,
        pub rng: SimRng,
        pub trace: Trace,
    }

    impl TestCtx {
        pub fn new(seed: u64) -> Self {
            Self {
                now: SimTime::ZERO,
                rng: SimRng::seed_from_u64(seed),
                trace: Trace::new(false),
            }
        }

        pub fn ctx(&mut self) -> Ctx<'_> {
            Ctx::new(self.now, &mut self.rng, CoapTiming::default(), &mut self.trace)
        }
    }
}
