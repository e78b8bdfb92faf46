//! Plain-text scenario files.
//!
//! ```text
//! coapsd-scenario 1
//! name demo
//! seed 7
//! gateway [cccc::1]:5683
//! prefix aaaa::/64
//! node n2 aaaa::2 hops=3 rdc=nullrdc
//! resource n2 /a/lb 0
//! client c1 [cccc::3]:50824
//! at 0 boot n2
//! at 1000 put c1 n2 /a/lb 10
//! at 2000 assert lb-set resource n2 /a/lb 10
//! ```
//!
//! Times are simulated milliseconds (fractions allowed down to 1 µs). Values
//! are taken literally, `hex:...` gives raw bytes and `""` the empty value.
//! Declarations may appear anywhere; events are ordered by time, file order
//! breaking ties.

use std::collections::BTreeMap;
use std::net::Ipv6Addr;

use thiserror::Error;

use crate::addr::{Endpoint, Prefix};
use crate::coap::BindingInfo;
use crate::directory::DeployMode;
use crate::gateway::GatewayConfig;
use crate::sim::{ClientId, Command, DelayRange, LinkModel, NodeConfig, NodeStatus, NotificationPolicy, Rdc};
use crate::time::SimTime;

pub const FORMAT_HEADER: &str = "coapsd-scenario";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        message: message.into(),
    })
}

#[derive(Debug, Clone)]
pub struct NodeDecl {
    pub name: String,
    pub config: NodeConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientDecl {
    pub name: String,
    pub endpoint: Endpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Check {
    /// Entry types stored for the node, oldest first.
    SdTypes {
        node: Ipv6Addr,
        types: Vec<u8>,
    },
    SdCount(usize),
    /// Observe entry's counter and retransmit counter, or its absence.
    SdObserve {
        client: ClientId,
        node: Ipv6Addr,
        path: String,
        expect: Option<(u32, u8)>,
    },
    Resource {
        node: Ipv6Addr,
        path: String,
        value: Vec<u8>,
    },
    Observer {
        node: Ipv6Addr,
        path: String,
        client: Option<ClientId>,
    },
    /// Observe values of the node's notifications in its current lifetime,
    /// retransmissions excluded.
    Notified {
        node: Ipv6Addr,
        path: String,
        values: Vec<u32>,
    },
    /// Observe values the client has received for the path.
    ClientObs {
        client: ClientId,
        node: Ipv6Addr,
        path: String,
        values: Vec<u32>,
    },
    Status {
        node: Ipv6Addr,
        status: NodeStatus,
    },
    Loaded {
        node: Ipv6Addr,
        file: String,
    },
    StateEqual {
        node: Ipv6Addr,
        label: String,
    },
    Recovered {
        node: Ipv6Addr,
    },
    BootEpoch {
        node: Ipv6Addr,
        epoch: u32,
    },
    Trace(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub check: Check,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventAction {
    Command(Command),
    /// Records the node's dynamic state under a label.
    Snapshot {
        label: String,
        node: Ipv6Addr,
    },
    Assert(Assertion),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    pub at: SimTime,
    /// Source line, 0 for programmatically built scenarios.
    pub line: usize,
    pub action: EventAction,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub gateway: GatewayConfig,
    pub internet: DelayRange,
    pub nodes: Vec<NodeDecl>,
    pub clients: Vec<ClientDecl>,
    pub events: Vec<ScenarioEvent>,
    /// Run until here; defaults to a minute past the last event.
    pub end: Option<SimTime>,
}

pub const DEFAULT_GATEWAY: &str = "[cccc::1]:5683";
pub const DEFAULT_PREFIX: &str = "aaaa::/64";

impl Scenario {
    pub fn new(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            seed,
            gateway: GatewayConfig::new(
                DEFAULT_GATEWAY.parse().expect("valid"),
                DEFAULT_PREFIX.parse().expect("valid"),
            ),
            internet: DelayRange::fixed(crate::sim::DEFAULT_INTERNET_DELAY),
            nodes: Vec::new(),
            clients: Vec::new(),
            events: Vec::new(),
            end: None,
        }
    }

    pub fn add_node(&mut self, name: &str, config: NodeConfig) -> Ipv6Addr {
        let addr = config.addr;
        self.nodes.push(NodeDecl {
            name: name.to_string(),
            config,
        });
        addr
    }

    pub fn add_client(&mut self, name: &str, endpoint: Endpoint) -> ClientId {
        self.clients.push(ClientDecl {
            name: name.to_string(),
            endpoint,
        });
        ClientId(self.clients.len() - 1)
    }

    /// Appends an event, keeping events ordered by time.
    pub fn at(&mut self, at: SimTime, action: EventAction) {
        let i = self.events.partition_point(|e| e.at <= at);
        self.events.insert(i, ScenarioEvent { at, line: 0, action });
    }

    pub fn command(&mut self, at: SimTime, cmd: Command) {
        self.at(at, EventAction::Command(cmd));
    }

    pub fn end_time(&self) -> SimTime {
        self.end
            .unwrap_or_else(|| self.events.last().map_or(SimTime::ZERO, |e| e.at) + SimTime::from_secs(60))
    }

    pub fn assertion_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.action, EventAction::Assert(_)))
            .count()
    }
}

pub fn parse_value(s: &str) -> Result<Vec<u8>, String> {
    if s == "\"\"" {
        return Ok(Vec::new());
    }
    match s.strip_prefix("hex:") {
        Some(h) => hex::decode(h).map_err(|e| format!("bad hex value: {e}")),
        None => Ok(s.as_bytes().to_vec()),
    }
}

/// Milliseconds, optionally fractional, to simulated time.
pub fn parse_millis(s: &str) -> Result<SimTime, String> {
    let ms: f64 = s.parse().map_err(|_| format!("bad time `{s}`"))?;
    if !ms.is_finite() || ms < 0.0 {
        return Err(format!("time must be a nonnegative number of ms, got `{s}`"));
    }
    Ok(SimTime((ms * 1000.0).round() as u64))
}

fn parse_ms_range(s: &str) -> Result<DelayRange, String> {
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (parse_millis(a)?, parse_millis(b)?);
            if a > b {
                return Err(format!("empty delay range `{s}`"));
            }
            Ok(DelayRange::new(a, b))
        }
        None => Ok(DelayRange::fixed(parse_millis(s)?)),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad list item `{p}`")))
        .collect()
}

fn parse_policy(s: &str) -> Result<NotificationPolicy, String> {
    match s {
        "first-non" => Ok(NotificationPolicy::FirstNonThenCon),
        "con" => Ok(NotificationPolicy::AllCon),
        "non" => Ok(NotificationPolicy::AllNon),
        _ => Err(format!("unknown notification policy `{s}`")),
    }
}

fn parse_status(s: &str) -> Result<NodeStatus, String> {
    match s {
        "up" => Ok(NodeStatus::Up),
        "down" => Ok(NodeStatus::Down),
        "booting" => Ok(NodeStatus::Booting),
        "stalled" => Ok(NodeStatus::Stalled),
        _ => Err(format!("unknown node status `{s}`")),
    }
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(format!("expected on/off, got `{s}`")),
    }
}

/// `key=value` options after the positional arguments.
fn options<'a>(words: &[&'a str]) -> Result<BTreeMap<&'a str, &'a str>, String> {
    words
        .iter()
        .map(|w| {
            w.split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{w}`"))
        })
        .collect()
}

struct Names {
    nodes: BTreeMap<String, Ipv6Addr>,
    clients: BTreeMap<String, ClientId>,
}

impl Names {
    fn node(&self, s: &str) -> Result<Ipv6Addr, String> {
        self.nodes
            .get(s)
            .copied()
            .ok_or_else(|| format!("undeclared node `{s}`"))
    }

    fn client(&self, s: &str) -> Result<ClientId, String> {
        self.clients
            .get(s)
            .copied()
            .ok_or_else(|| format!("undeclared client `{s}`"))
    }
}

fn want(words: &[&str], n: usize, usage: &str) -> Result<(), String> {
    if words.len() < n {
        return Err(format!("usage: {usage}"));
    }
    Ok(())
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            (
                i + 1,
                l.split('#').next().unwrap_or("").split_whitespace().collect::<Vec<_>>(),
            )
        })
        .filter(|(_, w)| !w.is_empty())
        .collect();

    let Some((first_line, header)) = lines.first() else {
        return err(1, format!("missing `{FORMAT_HEADER} {FORMAT_VERSION}` header"));
    };
    if header.len() != 2 || header[0] != FORMAT_HEADER {
        return err(
            *first_line,
            format!("expected `{FORMAT_HEADER} {FORMAT_VERSION}` header"),
        );
    }
    if header[1] != FORMAT_VERSION.to_string() {
        return err(*first_line, format!("unsupported scenario version {}", header[1]));
    }

    let mut sc = Scenario::new("scenario", 0);
    let mut policy = NotificationPolicy::default();
    let mut policy_overrides: Vec<(usize, Option<NotificationPolicy>)> = Vec::new();
    let mut names = Names {
        nodes: BTreeMap::new(),
        clients: BTreeMap::new(),
    };
    let mut events: Vec<(usize, &Vec<&str>)> = Vec::new();
    let mut node_extras: Vec<(usize, &Vec<&str>)> = Vec::new();

    // Declarations first, so events may refer to anything in the file.
    for (line, w) in &lines[1..] {
        let line = *line;
        let r: Result<(), String> = (|| {
            match w[0] {
                "at" => events.push((line, w)),
                "resource" | "flash" => node_extras.push((line, w)),
                "name" => {
                    want(w, 2, "name <id>")?;
                    sc.name = w[1].to_string();
                }
                "seed" => {
                    want(w, 2, "seed <u64>")?;
                    sc.seed = w[1].parse().map_err(|_| format!("bad seed `{}`", w[1]))?;
                }
                "gateway" => {
                    want(w, 2, "gateway <endpoint>")?;
                    sc.gateway.endpoint = w[1].parse().map_err(|e| format!("{e}"))?;
                }
                "prefix" => {
                    want(w, 2, "prefix <addr/len>")?;
                    sc.gateway.lln_prefix = w[1].parse::<Prefix>().map_err(|e| format!("{e}"))?;
                }
                "intercept" => {
                    want(w, 2, "intercept on|off")?;
                    sc.gateway.intercept = parse_on_off(w[1])?;
                }
                "deploy-mode" => {
                    want(w, 2, "deploy-mode filename|blocks")?;
                    sc.gateway.sd.deploy_mode = match w[1] {
                        "filename" => DeployMode::FilenameOnly,
                        "blocks" => DeployMode::BlockCapture,
                        o => return Err(format!("unknown deploy mode `{o}`")),
                    };
                }
                "pacing-ms" => {
                    want(w, 2, "pacing-ms <ms>")?;
                    sc.gateway.pacing_gap = parse_millis(w[1])?;
                }
                "internet-ms" => {
                    want(w, 2, "internet-ms <ms>|<min..max>")?;
                    sc.internet = parse_ms_range(w[1])?;
                }
                "policy" => {
                    want(w, 2, "policy first-non|con|non")?;
                    policy = parse_policy(w[1])?;
                }
                "end-ms" => {
                    want(w, 2, "end-ms <ms>")?;
                    sc.end = Some(parse_millis(w[1])?);
                }
                "node" => {
                    want(
                        w,
                        3,
                        "node <name> <addr> [hops=N] [rdc=R] [loss=P] [delay-ms=a..b] [loader=/p] [policy=P]",
                    )?;
                    if names.nodes.contains_key(w[1]) {
                        return Err(format!("node `{}` declared twice", w[1]));
                    }
                    let addr: Ipv6Addr = w[2].parse().map_err(|_| format!("bad address `{}`", w[2]))?;
                    let opts = options(&w[3..])?;
                    let hops: u32 = opts.get("hops").map_or(Ok(1), |s| s.parse().map_err(|_| "bad hops"))?;
                    if hops == 0 {
                        return Err("hops must be at least 1".into());
                    }
                    let rdc: Rdc = opts.get("rdc").map_or(Ok(Rdc::NullRdc), |s| s.parse())?;
                    let mut link = LinkModel::new(hops, rdc);
                    if let Some(l) = opts.get("loss") {
                        let p: f64 = l.parse().map_err(|_| format!("bad loss `{l}`"))?;
                        if !(0.0..1.0).contains(&p) {
                            return Err("loss must be in [0, 1)".into());
                        }
                        link = link.with_loss(p);
                    }
                    if let Some(d) = opts.get("delay-ms") {
                        link = link.with_per_hop(parse_ms_range(d)?);
                    }
                    let mut cfg = NodeConfig::new(addr, link);
                    if let Some(l) = opts.get("loader") {
                        cfg.loader_path = l.to_string();
                    }
                    let over = opts.get("policy").map(|p| parse_policy(p)).transpose()?;
                    for k in opts.keys() {
                        if !["hops", "rdc", "loss", "delay-ms", "loader", "policy"].contains(k) {
                            return Err(format!("unknown node option `{k}`"));
                        }
                    }
                    policy_overrides.push((sc.nodes.len(), over));
                    names.nodes.insert(w[1].to_string(), addr);
                    sc.add_node(w[1], cfg);
                }
                "client" => {
                    want(w, 3, "client <name> <endpoint>")?;
                    if names.clients.contains_key(w[1]) {
                        return Err(format!("client `{}` declared twice", w[1]));
                    }
                    let ep: Endpoint = w[2].parse().map_err(|e| format!("{e}"))?;
                    let id = sc.add_client(w[1], ep);
                    names.clients.insert(w[1].to_string(), id);
                }
                other => return Err(format!("unknown directive `{other}`")),
            }
            Ok(())
        })();
        r.map_err(|message| ParseError { line, message })?;
    }

    for (i, over) in policy_overrides {
        sc.nodes[i].config.policy = over.unwrap_or(policy);
    }
    for (line, w) in node_extras {
        let r: Result<(), String> = (|| {
            want(w, 4, &format!("{} <node> <key> <value>", w[0]))?;
            let addr = names.node(w[1])?;
            let value = parse_value(w[3])?;
            let cfg = &mut sc
                .nodes
                .iter_mut()
                .find(|n| n.config.addr == addr)
                .expect("declared")
                .config;
            if w[0] == "resource" {
                cfg.defaults.insert(w[2].to_string(), value);
            } else {
                cfg.flash.insert(w[2].to_string(), value);
            }
            Ok(())
        })();
        r.map_err(|message| ParseError { line, message })?;
    }

    let loader_of = |sc: &Scenario, addr: Ipv6Addr| {
        sc.nodes
            .iter()
            .find(|n| n.config.addr == addr)
            .map(|n| n.config.loader_path.clone())
            .expect("declared")
    };

    let mut parsed = Vec::with_capacity(events.len());
    for (line, w) in events {
        let r: Result<ScenarioEvent, String> = (|| {
            want(w, 3, "at <ms> <event> ...")?;
            let at = parse_millis(w[1])?;
            let e = &w[2..];
            let action = match e[0] {
                "boot" => {
                    want(e, 2, "boot <node>")?;
                    EventAction::Command(Command::Boot {
                        node: names.node(e[1])?,
                    })
                }
                "crash" => {
                    want(e, 3, "crash <node> <downtime-ms>")?;
                    EventAction::Command(Command::Crash {
                        node: names.node(e[1])?,
                        downtime: parse_millis(e[2])?,
                    })
                }
                "put" => {
                    want(e, 5, "put <client> <node> <path> <value> [non]")?;
                    let confirmable = match e.get(5) {
                        None | Some(&"con") => true,
                        Some(&"non") => false,
                        Some(o) => return Err(format!("expected con/non, got `{o}`")),
                    };
                    EventAction::Command(Command::Put {
                        client: names.client(e[1])?,
                        node: names.node(e[2])?,
                        path: e[3].to_string(),
                        value: parse_value(e[4])?,
                        confirmable,
                    })
                }
                "get" | "observe" | "deregister" | "reset" => {
                    want(e, 4, &format!("{} <client> <node> <path>", e[0]))?;
                    let (client, node, path) = (names.client(e[1])?, names.node(e[2])?, e[3].to_string());
                    EventAction::Command(match e[0] {
                        "get" => Command::Get { client, node, path },
                        "observe" => Command::Observe { client, node, path },
                        "deregister" => Command::Deregister { client, node, path },
                        _ => Command::Reset { client, node, path },
                    })
                }
                "bind" => {
                    want(
                        e,
                        8,
                        "bind <client> <node> <path> <dest-endpoint> <dest-path> <pmin> <pmax>",
                    )?;
                    let dest: Endpoint = e[4].parse().map_err(|x| format!("{x}"))?;
                    let pmin: u32 = e[6].parse().map_err(|_| "bad pmin")?;
                    let pmax: u32 = e[7].parse().map_err(|_| "bad pmax")?;
                    let binding = BindingInfo::new(dest, e[5], pmin, pmax).map_err(|x| x.to_string())?;
                    EventAction::Command(Command::Bind {
                        client: names.client(e[1])?,
                        node: names.node(e[2])?,
                        path: e[3].to_string(),
                        binding,
                    })
                }
                "deploy" => {
                    want(e, 5, "deploy <client> <node> <file> <image> [block=N]")?;
                    let opts = options(&e[5..])?;
                    let block_size = opts
                        .get("block")
                        .map_or(Ok(DEFAULT_BLOCK_SIZE), |b| b.parse().map_err(|_| "bad block size"))?;
                    if crate::coap::Block::szx_for(block_size).is_none() {
                        return Err(format!("block size {block_size} is not 16..1024 and a power of two"));
                    }
                    let node = names.node(e[2])?;
                    EventAction::Command(Command::Deploy {
                        client: names.client(e[1])?,
                        node,
                        loader: loader_of(&sc, node),
                        filename: e[3].to_string(),
                        image: parse_value(e[4])?,
                        block_size,
                    })
                }
                "silence" => {
                    want(e, 3, "silence <client> on|off")?;
                    EventAction::Command(Command::Silence {
                        client: names.client(e[1])?,
                        silent: parse_on_off(e[2])?,
                    })
                }
                "change" => {
                    want(e, 4, "change <node> <path> <value> [step=N]")?;
                    let opts = options(&e[4..])?;
                    let step = opts.get("step").map_or(Ok(1), |s| s.parse().map_err(|_| "bad step"))?;
                    EventAction::Command(Command::Change {
                        node: names.node(e[1])?,
                        path: e[2].to_string(),
                        value: parse_value(e[3])?,
                        step,
                    })
                }
                "snapshot" => {
                    want(e, 3, "snapshot <label> <node>")?;
                    EventAction::Snapshot {
                        label: e[1].to_string(),
                        node: names.node(e[2])?,
                    }
                }
                "assert" => {
                    want(e, 3, "assert <name> <check> ...")?;
                    EventAction::Assert(Assertion {
                        name: e[1].to_string(),
                        check: parse_check(&e[2..], &names, w)?,
                    })
                }
                other => return Err(format!("unknown event `{other}`")),
            };
            Ok(ScenarioEvent { at, line, action })
        })();
        parsed.push(r.map_err(|message| ParseError { line, message })?);
    }
    parsed.sort_by_key(|e| e.at);
    sc.events = parsed;
    Ok(sc)
}

fn parse_check(c: &[&str], names: &Names, whole: &[&str]) -> Result<Check, String> {
    let n = |i: usize| names.node(c[i]);
    Ok(match c[0] {
        "sd-types" => {
            want(c, 3, "sd-types <node> <t,t,...>|-")?;
            Check::SdTypes {
                node: n(1)?,
                types: parse_list(c[2])?,
            }
        }
        "sd-count" => {
            want(c, 2, "sd-count <n>")?;
            Check::SdCount(c[1].parse().map_err(|_| "bad count")?)
        }
        "sd-observe" => {
            want(c, 5, "sd-observe <client> <node> <path> <obs> <ret> | absent")?;
            let expect = if c[4] == "absent" {
                None
            } else {
                want(c, 6, "sd-observe <client> <node> <path> <obs> <ret>")?;
                Some((
                    c[4].parse().map_err(|_| "bad obs")?,
                    c[5].parse().map_err(|_| "bad ret")?,
                ))
            };
            Check::SdObserve {
                client: names.client(c[1])?,
                node: n(2)?,
                path: c[3].to_string(),
                expect,
            }
        }
        "resource" => {
            want(c, 4, "resource <node> <path> <value>")?;
            Check::Resource {
                node: n(1)?,
                path: c[2].to_string(),
                value: parse_value(c[3])?,
            }
        }
        "observer" => {
            want(c, 4, "observer <node> <path> <client>|none")?;
            Check::Observer {
                node: n(1)?,
                path: c[2].to_string(),
                client: if c[3] == "none" {
                    None
                } else {
                    Some(names.client(c[3])?)
                },
            }
        }
        "notified" => {
            want(c, 4, "notified <node> <path> <v,v,...>|-")?;
            Check::Notified {
                node: n(1)?,
                path: c[2].to_string(),
                values: parse_list(c[3])?,
            }
        }
        "client-obs" => {
            want(c, 5, "client-obs <client> <node> <path> <v,v,...>|-")?;
            Check::ClientObs {
                client: names.client(c[1])?,
                node: n(2)?,
                path: c[3].to_string(),
                values: parse_list(c[4])?,
            }
        }
        "status" => {
            want(c, 3, "status <node> up|down|booting|stalled")?;
            Check::Status {
                node: n(1)?,
                status: parse_status(c[2])?,
            }
        }
        "loaded" => {
            want(c, 3, "loaded <node> <file>")?;
            Check::Loaded {
                node: n(1)?,
                file: c[2].to_string(),
            }
        }
        "state-equal" => {
            want(c, 3, "state-equal <node> <label>")?;
            Check::StateEqual {
                node: n(1)?,
                label: c[2].to_string(),
            }
        }
        "recovered" => {
            want(c, 2, "recovered <node>")?;
            Check::Recovered { node: n(1)? }
        }
        "boot-epoch" => {
            want(c, 3, "boot-epoch <node> <n>")?;
            Check::BootEpoch {
                node: n(1)?,
                epoch: c[2].parse().map_err(|_| "bad epoch")?,
            }
        }
        "trace" => {
            want(c, 2, "trace <text>")?;
            // everything after `trace`, single-spaced
            let start = whole.iter().position(|w| *w == "trace").expect("present") + 1;
            Check::Trace(whole[start..].join(" "))
        }
        other => return Err(format!("unknown check `{other}`")),
    })
}
