//! Turning stored directory entries into a paced replay that rebuilds a
//! rebooted node's dynamic state.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::net::Ipv6Addr;

use crate::addr::Endpoint;
use crate::coap::{Block, Code, Message, MessageType, MidAllocator};
use crate::directory::{EntryId, EntryType, SdEntry};
use crate::time::SimTime;

/// Default spacing between replay injections.
pub const DEFAULT_PACING_GAP: SimTime = SimTime::from_millis(50);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayStep {
    pub entry: EntryId,
    pub entry_type: EntryType,
    pub message: Message,
    pub spoofed_source: Endpoint,
    pub destination: Endpoint,
    pub suppress_response: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryPlan {
    pub node: Ipv6Addr,
    pub steps: Vec<ReplayStep>,
    pub pacing_gap: SimTime,
}

impl RecoveryPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One replay step per entry, oldest entry first. Client-originated state
/// (PUT, observe) is replayed from the client's own endpoint; bindings and
/// deployments come from the gateway. Fresh MIDs are drawn from `mids`.
pub fn build_plan(
    node: Ipv6Addr,
    entries: &[SdEntry],
    gateway: Endpoint,
    mids: &mut MidAllocator,
    pacing_gap: SimTime,
) -> RecoveryPlan {
    let mut ordered: Vec<&SdEntry> = entries.iter().filter(|e| e.server.addr == node).collect();
    ordered.sort_by_key(|e| (e.created_at, e.id));

    let mut steps = Vec::with_capacity(ordered.len());
    for e in ordered {
        let step = |message: Message, source: Endpoint| ReplayStep {
            entry: e.id,
            entry_type: e.entry_type,
            message,
            spoofed_source: source,
            destination: e.server,
            suppress_response: true,
        };
        match e.entry_type {
            EntryType::Put => {
                let mut m = Message::request(MessageType::Con, Code::PUT, mids.next_mid(), &e.uri_path)
                    .with_token(e.token.clone())
                    .with_payload(e.value.clone());
                if let Some(cf) = e.content_format {
                    m.options.set_content_format(cf);
                }
                steps.push(step(m, e.client));
            }
            EntryType::Observe => {
                let mut m = Message::request(MessageType::Con, Code::GET, mids.next_mid(), &e.uri_path)
                    .with_token(e.token.clone());
                m.options.set_resume_counter(e.observe_counter);
                steps.push(step(m, e.client));
            }
            EntryType::Bind => {
                let Some(binding) = &e.binding else { continue };
                let mut m = Message::request(MessageType::Con, Code::GET, mids.next_mid(), &e.uri_path)
                    .with_token(e.token.clone())
                    .with_observe(0);
                m.options.set_binding(binding);
                steps.push(step(m, gateway));
            }
            EntryType::Deploy => {
                let Some(d) = &e.deploy else { continue };
                let query = format!("file={}", d.filename);
                match &d.blocks {
                    None => {
                        let mut m = Message::request(MessageType::Con, Code::POST, mids.next_mid(), &d.loader_path)
                            .with_token(e.token.clone());
                        m.options.add_query(&query);
                        steps.push(step(m, gateway));
                    }
                    Some(blocks) => {
                        let size = 1usize << (d.szx + 4);
                        for (i, data) in blocks.iter().enumerate() {
                            let more = i + 1 < blocks.len();
                            let mut m = Message::request(MessageType::Con, Code::POST, mids.next_mid(), &d.loader_path)
                                .with_token(e.token.clone())
                                .with_payload(data.clone());
                            m.options.add_query(&query);
                            m.options
                                .set_block1(Block::new(i as u32, more, size).expect("stored szx"));
                            steps.push(step(m, gateway));
                        }
                    }
                }
            }
        }
    }
    RecoveryPlan {
        node,
        steps,
        pacing_gap,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Pending,
    Acked { at: SimTime, attempts: u8 },
    TimedOut { at: SimTime },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    pub node: Ipv6Addr,
    pub started_at: SimTime,
    pub finished_at: SimTime,
    pub outcomes: Vec<StepOutcome>,
    /// Directory entries the plan was built from.
    pub states: usize,
    /// A newer registration from the same node cut this run short.
    pub aborted: bool,
}

impl RecoveryReport {
    /// Registration receipt to the last step's ACK (or final timeout).
    pub fn delay(&self) -> SimTime {
        self.finished_at.saturating_sub(self.started_at)
    }

    pub fn all_acked(&self) -> bool {
        !self.aborted && self.outcomes.iter().all(|o| matches!(o, StepOutcome::Acked { .. }))
    }

    pub fn timed_out(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, StepOutcome::TimedOut { .. }))
            .count()
    }
}

/// What the driver of a [`PlanExecution`] must do next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecCommand {
    /// Transmit `plan.steps[step]` (attempt 0 is the first transmission).
    Send {
        step: usize,
        attempt: u8,
    },
    /// Call [`PlanExecution::on_timeout`] at `at` unless the step was acked.
    ArmTimeout {
        step: usize,
        attempt: u8,
        at: SimTime,
    },
    /// Call [`PlanExecution::send_next`] at `at`.
    ArmPacing {
        at: SimTime,
    },
    Finished(RecoveryReport),
}

/// Confirmable, strictly sequential execution of a plan: each step is sent,
/// retried with exponential back-off, and the next one follows `pacing_gap`
/// after the previous step settled.
#[derive(Debug, Clone)]
pub struct PlanExecution {
    plan: RecoveryPlan,
    started_at: SimTime,
    outcomes: Vec<StepOutcome>,
    current: usize,
    attempt: u8,
    timeout: SimTime,
    max_retransmit: u8,
    finished: bool,
}

impl PlanExecution {
    pub fn start(
        plan: RecoveryPlan,
        now: SimTime,
        max_retransmit: u8,
        initial_timeout: SimTime,
    ) -> (Self, Vec<ExecCommand>) {
        let mut exec = Self {
            outcomes: vec![StepOutcome::Pending; plan.steps.len()],
            plan,
            started_at: now,
            current: 0,
            attempt: 0,
            timeout: initial_timeout,
            max_retransmit,
            finished: false,
        };
        let cmds = if exec.plan.steps.is_empty() {
            exec.finished = true;
            vec![ExecCommand::Finished(exec.report(now, false))]
        } else {
            exec.send_current(now, initial_timeout)
        };
        (exec, cmds)
    }

    pub fn plan(&self) -> &RecoveryPlan {
        &self.plan
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Step currently awaiting its ACK.
    pub fn in_flight(&self) -> Option<(usize, &ReplayStep)> {
        if self.finished || self.outcomes.get(self.current) != Some(&StepOutcome::Pending) {
            return None;
        }
        self.plan.steps.get(self.current).map(|s| (self.current, s))
    }

    fn send_current(&mut self, now: SimTime, initial_timeout: SimTime) -> Vec<ExecCommand> {
        self.attempt = 0;
        self.timeout = initial_timeout;
        vec![
            ExecCommand::Send {
                step: self.current,
                attempt: 0,
            },
            ExecCommand::ArmTimeout {
                step: self.current,
                attempt: 0,
                at: now + initial_timeout,
            },
        ]
    }

    fn report(&self, now: SimTime, aborted: bool) -> RecoveryReport {
        RecoveryReport {
            node: self.plan.node,
            started_at: self.started_at,
            finished_at: now,
            outcomes: self.outcomes.clone(),
            states: {
                let mut ids: Vec<EntryId> = self.plan.steps.iter().map(|s| s.entry).collect();
                ids.dedup();
                ids.len()
            },
            aborted,
        }
    }

    fn settle(&mut self, outcome: StepOutcome, now: SimTime) -> Vec<ExecCommand> {
        self.outcomes[self.current] = outcome;
        if self.current + 1 == self.plan.steps.len() {
            self.finished = true;
            vec![ExecCommand::Finished(self.report(now, false))]
        } else {
            vec![ExecCommand::ArmPacing {
                at: now + self.plan.pacing_gap,
            }]
        }
    }

    /// An ACK or response with `mid` reached the gateway.
    pub fn on_response(&mut self, mid: u16, now: SimTime) -> Vec<ExecCommand> {
        match self.in_flight() {
            Some((_, step)) if step.message.mid == mid => {
                let attempts = self.attempt + 1;
                self.settle(StepOutcome::Acked { at: now, attempts }, now)
            }
            _ => Vec::new(),
        }
    }

    pub fn on_timeout(&mut self, step: usize, attempt: u8, now: SimTime) -> Vec<ExecCommand> {
        if self.in_flight().map(|(i, _)| i) != Some(step) || attempt != self.attempt {
            return Vec::new();
        }
        if self.attempt < self.max_retransmit {
            self.attempt += 1;
            self.timeout = SimTime(self.timeout.0 * 2);
            vec![
                ExecCommand::Send {
                    step,
                    attempt: self.attempt,
                },
                ExecCommand::ArmTimeout {
                    step,
                    attempt: self.attempt,
                    at: now + self.timeout,
                },
            ]
        } else {
            self.settle(StepOutcome::TimedOut { at: now }, now)
        }
    }

    pub fn send_next(&mut self, now: SimTime, initial_timeout: SimTime) -> Vec<ExecCommand> {
        if self.finished || self.outcomes[self.current] == StepOutcome::Pending {
            return Vec::new();
        }
        self.current += 1;
        self.send_current(now, initial_timeout)
    }

    pub fn abort(&mut self, now: SimTime) -> RecoveryReport {
        self.finished = true;
        self.report(now, true)
    }
}

/// A network that answers replay transmissions; `None` means no ACK ever
/// comes back for that transmission.
pub trait ReplayNetwork {
    fn transmit(&mut self, step: &ReplayStep, attempt: u8, now: SimTime) -> Option<SimTime>;
}

/// Runs a plan to completion against `network` with a fixed initial
/// retransmission timeout.
pub fn execute_plan(
    plan: RecoveryPlan,
    network: &mut impl ReplayNetwork,
    now: SimTime,
    max_retransmit: u8,
    initial_timeout: SimTime,
) -> RecoveryReport {
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    enum Wake {
        Ack(u16),
        Timeout(usize, u8),
        Pacing,
    }

    let (mut exec, mut cmds) = PlanExecution::start(plan, now, max_retransmit, initial_timeout);
    let mut queue: BinaryHeap<Reverse<(SimTime, u64, Wake)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut clock = now;
    loop {
        for cmd in cmds.drain(..) {
            let mut push = |at: SimTime, w: Wake| {
                queue.push(Reverse((at, seq, w)));
                seq += 1;
            };
            match cmd {
                ExecCommand::Send { step, attempt } => {
                    let s = &exec.plan().steps[step];
                    if let Some(at) = network.transmit(s, attempt, clock) {
                        push(at, Wake::Ack(s.message.mid));
                    }
                }
                ExecCommand::ArmTimeout { step, attempt, at } => push(at, Wake::Timeout(step, attempt)),
                ExecCommand::ArmPacing { at } => push(at, Wake::Pacing),
                ExecCommand::Finished(report) => return report,
            }
        }
        let Some(Reverse((at, _, wake))) = queue.pop() else {
            return exec.abort(clock);
        };
        clock = at;
        cmds = match wake {
            Wake::Ack(mid) => exec.on_response(mid, clock),
            Wake::Timeout(step, attempt) => exec.on_timeout(step, attempt, clock),
            Wake::Pacing => exec.send_next(clock, initial_timeout),
        };
    }
}
