//! Border router between the external network and the LLN. Forwards every
//! packet unchanged, keeps the state directory current as packets pass, and
//! replays stored state when a node re-registers.

use std::collections::BTreeMap;
use std::net::Ipv6Addr;
use std::time::{Duration, Instant};

use crate::addr::{Endpoint, Prefix};
use crate::coap::{self, Code, Message, MessageType, MidAllocator};
use crate::directory::{EntryType, RegistrationOutcome, SdConfig, SdEffect, StateDirectory};
use crate::recovery::{build_plan, ExecCommand, PlanExecution, RecoveryReport, DEFAULT_PACING_GAP};
use crate::sim::{Ctx, Frame, Timer};
use crate::time::SimTime;

/// How long a response to a replayed request may still be swallowed.
pub const SUPPRESSION_LIFETIME: SimTime = SimTime::from_secs(247);

/// Side of the gateway a packet arrived on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ingress {
    External,
    Lln,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub endpoint: Endpoint,
    pub lln_prefix: Prefix,
    /// With interception off the gateway is a plain router that still
    /// acknowledges registrations.
    pub intercept: bool,
    pub sd: SdConfig,
    pub pacing_gap: SimTime,
    pub suppression_lifetime: SimTime,
}

impl GatewayConfig {
    pub fn new(endpoint: Endpoint, lln_prefix: Prefix) -> Self {
        Self {
            endpoint,
            lln_prefix,
            intercept: true,
            sd: SdConfig::default(),
            pacing_gap: DEFAULT_PACING_GAP,
            suppression_lifetime: SUPPRESSION_LIFETIME,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatewayTimer {
    ReplayTimeout { run: u64, step: usize, attempt: u8 },
    ReplayPacing { run: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectRecord {
    pub at: SimTime,
    pub ingress: Ingress,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub msg_type: MessageType,
    pub mid: u16,
    pub effect: SdEffect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistrationRecord {
    pub at: SimTime,
    pub node: Ipv6Addr,
    pub outcome: RegistrationOutcome,
}

#[derive(Debug, Clone)]
struct Matcher {
    node: Endpoint,
    client: Endpoint,
    /// `None` swallows only the ACK and lets later responses through.
    token: Option<Vec<u8>>,
    mid: u16,
    expires: SimTime,
}

#[derive(Debug, Clone)]
struct Run {
    id: u64,
    exec: PlanExecution,
}

#[derive(Debug, Clone)]
pub struct Gateway {
    cfg: GatewayConfig,
    sd: StateDirectory,
    mids: MidAllocator,
    runs: BTreeMap<Ipv6Addr, Run>,
    next_run: u64,
    matchers: Vec<Matcher>,
    registration_acks: BTreeMap<(Endpoint, u16), Vec<u8>>,
    reports: Vec<RecoveryReport>,
    registrations: Vec<RegistrationRecord>,
    effects: Vec<EffectRecord>,
    egress: Vec<(SimTime, Frame)>,
    intercept_times: Vec<Duration>,
    suppressed: usize,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Self {
        Self {
            sd: StateDirectory::new(cfg.sd),
            cfg,
            mids: MidAllocator::new(0x4000),
            runs: BTreeMap::new(),
            next_run: 0,
            matchers: Vec::new(),
            registration_acks: BTreeMap::new(),
            reports: Vec::new(),
            registrations: Vec::new(),
            effects: Vec::new(),
            egress: Vec::new(),
            intercept_times: Vec::new(),
            suppressed: 0,
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn directory(&self) -> &StateDirectory {
        &self.sd
    }

    /// Finished (or aborted) recovery runs in completion order.
    pub fn reports(&self) -> &[RecoveryReport] {
        &self.reports
    }

    pub fn registrations(&self) -> &[RegistrationRecord] {
        &self.registrations
    }

    /// Directory effect of every intercepted packet, in arrival order.
    pub fn effects(&self) -> &[EffectRecord] {
        &self.effects
    }

    /// Frames the gateway sent towards the external network.
    pub fn egress(&self) -> &[(SimTime, Frame)] {
        &self.egress
    }

    /// Wall-clock time spent in directory interception, one sample per packet.
    pub fn intercept_times(&self) -> &[Duration] {
        &self.intercept_times
    }

    pub fn suppressed(&self) -> usize {
        self.suppressed
    }

    pub fn recovery_in_progress(&self) -> bool {
        !self.runs.is_empty()
    }

    pub fn forward(&mut self, frame: Frame, ingress: Ingress, ctx: &mut Ctx<'_>) {
        let msg = Message::decode(&frame.bytes).ok();

        if frame.dst == self.cfg.endpoint {
            match msg {
                Some(m) if ingress == Ingress::Lln && is_registration(&m) => self.on_registration(&m, frame.src, ctx),
                Some(m) if ingress == Ingress::Lln => {
                    self.replay_progress(&m, frame.src, ctx);
                    if m.msg_type == MessageType::Con {
                        self.send(ctx, self.cfg.endpoint, frame.src, &Message::empty_ack(m.mid));
                    }
                }
                _ => ctx.log("GW-DROP", format!("addressed to gateway: {}", frame.summary())),
            }
            return;
        }

        let dst_in_lln = self.cfg.lln_prefix.contains(&frame.dst.addr);
        match ingress {
            Ingress::External if !dst_in_lln => {
                ctx.log("GW-DROP", format!("not for the LLN: {}", frame.summary()));
                return;
            }
            Ingress::Lln if dst_in_lln => {
                ctx.log("GW-DROP", format!("LLN-internal: {}", frame.summary()));
                return;
            }
            _ => {}
        }

        if let Some(m) = &msg {
            if self.cfg.intercept {
                let started = Instant::now();
                let effect = match ingress {
                    Ingress::External => self.sd.intercept_from_internet(m, frame.src, frame.dst, ctx.now),
                    Ingress::Lln => self.sd.intercept_from_lln(m, frame.src, frame.dst, ctx.now),
                };
                self.intercept_times.push(started.elapsed());
                if effect != SdEffect::NoEffect {
                    ctx.log("SD", format!("{effect:?} by {}", m.summary()));
                }
                self.effects.push(EffectRecord {
                    at: ctx.now,
                    ingress,
                    src: frame.src,
                    dst: frame.dst,
                    msg_type: m.msg_type,
                    mid: m.mid,
                    effect,
                });
            }
            if ingress == Ingress::Lln {
                self.replay_progress(m, frame.src, ctx);
                if self.suppress(m, &frame, ctx) {
                    return;
                }
            }
        }

        if ingress == Ingress::Lln {
            self.egress.push((ctx.now, frame.clone()));
        }
        ctx.send(frame);
    }

    /// Swallows responses to replayed requests so the spoofed client never
    /// sees them. Returns true if `msg` was consumed.
    fn suppress(&mut self, msg: &Message, frame: &Frame, ctx: &mut Ctx<'_>) -> bool {
        let now = ctx.now;
        self.matchers.retain(|m| m.expires > now);
        let hit = self.matchers.iter().position(|m| {
            if m.node != frame.src || m.client != frame.dst {
                return false;
            }
            match msg.msg_type {
                MessageType::Ack | MessageType::Rst => m.mid == msg.mid,
                _ => msg.code.is_response() && m.token.as_ref() == Some(&msg.token),
            }
        });
        let Some(i) = hit else { return false };
        // An empty ACK announces a separate response; wait for it.
        let done = self.matchers[i].token.is_none() || !(msg.msg_type == MessageType::Ack && msg.code.is_empty());
        if done {
            self.matchers.remove(i);
        }
        if msg.msg_type == MessageType::Con {
            // Acknowledge on the client's behalf so the node stops retrying.
            self.send(ctx, frame.dst, frame.src, &Message::empty_ack(msg.mid));
        }
        self.suppressed += 1;
        ctx.log("SUPPRESS", msg.summary());
        true
    }

    fn send(&self, ctx: &mut Ctx<'_>, src: Endpoint, dst: Endpoint, msg: &Message) {
        match msg.encode() {
            Ok(bytes) => ctx.send(Frame { src, dst, bytes }),
            Err(e) => ctx.log("ERROR", format!("gateway cannot encode: {e}")),
        }
    }

    fn on_registration(&mut self, msg: &Message, src: Endpoint, ctx: &mut Ctx<'_>) {
        if let Some(bytes) = self.registration_acks.get(&(src, msg.mid)) {
            ctx.send(Frame {
                src: self.cfg.endpoint,
                dst: src,
                bytes: bytes.clone(),
            });
            return;
        }
        let ack = Message::piggybacked(msg, Code::CREATED);
        let bytes = ack.encode().expect("registration ACK encodes");
        self.registration_acks.insert((src, msg.mid), bytes.clone());
        ctx.send(Frame {
            src: self.cfg.endpoint,
            dst: src,
            bytes,
        });

        let node = src.addr;
        if let Some(run) = self.runs.remove(&node) {
            let mut run = run;
            let report = run.exec.abort(ctx.now);
            ctx.log("ABORT", format!("recovery of {node} superseded"));
            self.reports.push(report);
        }
        if !self.cfg.intercept {
            return;
        }
        let outcome = self.sd.register_node(node);
        self.registrations.push(RegistrationRecord {
            at: ctx.now,
            node,
            outcome,
        });
        let entries = self.sd.entries_for_server(&node);
        ctx.log("REGISTER", format!("{node} {outcome:?} entries={}", entries.len()));
        let plan = build_plan(node, &entries, self.cfg.endpoint, &mut self.mids, self.cfg.pacing_gap);
        // No draw for an empty plan: a crash-free run must consume the same
        // random stream with interception on or off.
        let timeout = if plan.is_empty() {
            SimTime::ZERO
        } else {
            ctx.draw_ack_timeout()
        };
        let (exec, cmds) = PlanExecution::start(plan, ctx.now, ctx.max_retransmit(), timeout);
        let id = self.next_run;
        self.next_run += 1;
        self.runs.insert(node, Run { id, exec });
        self.apply(node, cmds, ctx);
    }

    fn replay_progress(&mut self, msg: &Message, src: Endpoint, ctx: &mut Ctx<'_>) {
        if !matches!(msg.msg_type, MessageType::Ack | MessageType::Rst) {
            return;
        }
        let node = src.addr;
        let Some(run) = self.runs.get_mut(&node) else { return };
        let cmds = run.exec.on_response(msg.mid, ctx.now);
        self.apply(node, cmds, ctx);
    }

    pub fn on_timer(&mut self, timer: GatewayTimer, ctx: &mut Ctx<'_>) {
        let run_id = match timer {
            GatewayTimer::ReplayTimeout { run, .. } | GatewayTimer::ReplayPacing { run } => run,
        };
        let Some((&node, _)) = self.runs.iter().find(|(_, r)| r.id == run_id) else {
            return;
        };
        let cmds = match timer {
            GatewayTimer::ReplayTimeout { step, attempt, .. } => {
                let run = self.runs.get_mut(&node).expect("found");
                run.exec.on_timeout(step, attempt, ctx.now)
            }
            GatewayTimer::ReplayPacing { .. } => {
                let timeout = ctx.draw_ack_timeout();
                let run = self.runs.get_mut(&node).expect("found");
                run.exec.send_next(ctx.now, timeout)
            }
        };
        self.apply(node, cmds, ctx);
    }

    fn apply(&mut self, node: Ipv6Addr, cmds: Vec<ExecCommand>, ctx: &mut Ctx<'_>) {
        for cmd in cmds {
            let Some(run) = self.runs.get(&node) else { return };
            let id = run.id;
            match cmd {
                ExecCommand::Send { step, attempt } => {
                    let s = run.exec.plan().steps[step].clone();
                    if attempt == 0 && s.suppress_response {
                        self.matchers.push(Matcher {
                            node: s.destination,
                            client: s.spoofed_source,
                            // The re-registration response is an ordinary
                            // notification for the real client.
                            token: (s.entry_type != EntryType::Observe).then(|| s.message.token.clone()),
                            mid: s.message.mid,
                            expires: ctx.now + self.cfg.suppression_lifetime,
                        });
                    }
                    ctx.log(
                        "REPLAY",
                        format!(
                            "{:?} as {} attempt={attempt}: {}",
                            s.entry_type,
                            s.spoofed_source,
                            s.message.summary()
                        ),
                    );
                    self.send(ctx, s.spoofed_source, s.destination, &s.message);
                }
                ExecCommand::ArmTimeout { step, attempt, at } => ctx.timer(
                    at,
                    Timer::Gateway(GatewayTimer::ReplayTimeout { run: id, step, attempt }),
                ),
                ExecCommand::ArmPacing { at } => ctx.timer(at, Timer::Gateway(GatewayTimer::ReplayPacing { run: id })),
                ExecCommand::Finished(report) => {
                    ctx.log(
                        "RECOVERED",
                        format!(
                            "{node} steps={} timed_out={} delay={}ms",
                            report.outcomes.len(),
                            report.timed_out(),
                            report.delay().as_millis_f64()
                        ),
                    );
                    self.runs.remove(&node);
                    self.reports.push(report);
                }
            }
        }
    }
}

fn is_registration(m: &Message) -> bool {
    m.msg_type == MessageType::Con && m.code == Code::POST && m.path() == coap::REGISTRATION_PATH
}
