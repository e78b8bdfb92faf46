//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::net::Ipv6Addr;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};

use coapsd::coap::{BindingInfo, Message, MessageType};
use coapsd::directory::{DeployMode, EntryType, SdEffect, SdEntry};
use coapsd::gateway::Ingress;
use coapsd::harness::{self, CanonicalParams, Execution, Metric, RunOptions, Scenario, SweepSpec};
use coapsd::sim::{ClientId, Command, LinkModel, NodeConfig, NodeStatus, Rdc, RemovalReason, SimRng, Simulation};
use coapsd::{Endpoint, SimTime};

use common::{client_ep, node_addr, sim_config};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn ms(v: u64) -> SimTime {
    SimTime::from_millis(v)
}

fn secs(v: u64) -> SimTime {
    SimTime::from_secs(v)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 fig12_19 reboot replay", c1_reference_scenario),
        ("2 observe counter lifecycle", c2_observe_lifecycle),
        ("3 retransmit-limit eviction agrees", c3_retransmit_eviction),
        ("4 randomized state restoration", c4_restoration_oracle),
        ("5 delay vs hops and RDC", c5_hops_rdc_sweep),
        ("6 delay vs state count", c6_state_count_sweep),
        ("7 interception transparency", c7_transparency),
        ("8 codec round-trip and robustness", c8_codec),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let started = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = started.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS criterion {name} ({took:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({took:.2}s): {detail}");
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all 8 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 8 criteria failed");
        ExitCode::FAILURE
    }
}

fn observe_entry<'a>(sim: &'a Simulation, client: Endpoint, node: Ipv6Addr, path: &str) -> Option<&'a SdEntry> {
    sim.gateway().directory().entries().find(|e| {
        e.entry_type == EntryType::Observe && e.client == client && e.server.addr == node && e.uri_path == path
    })
}

fn c1_reference_scenario() -> Outcome {
    let text = harness::bundled("fig12_19").ok_or("bundled scenario missing")?;
    let sc = harness::parse_scenario(text).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let out = harness::run(&sc, &RunOptions::default()).map_err(|e| e.to_string())?;
    let wall = started.elapsed();
    if let Some(f) = out.first_failure() {
        return Err(format!("assertion {} at {}: {}", f.name, f.at, f.detail));
    }
    ensure!(wall < Duration::from_secs(5), "took {wall:?}");

    let addr: Ipv6Addr = "aaaa::c30c:0:0:2".parse().unwrap();
    let lb = client_ep(0, 50824);
    let m = client_ep(0, 33513);
    let btn = client_ep(0, 52808);
    let sim = &out.sim;
    let node = sim.node(&addr).ok_or("node missing")?;
    ensure!(node.boot_epoch() == 2, "boot epoch {}", node.boot_epoch());
    let types: Vec<u8> = sim
        .gateway()
        .directory()
        .entries_for_server(&addr)
        .iter()
        .map(|e| e.entry_type.code())
        .collect();
    ensure!(types == [2, 2, 5], "SD types {types:?}");
    ensure!(node.resource("/a/lb") == Some(b"10".as_slice()), "/a/lb not restored");
    ensure!(node.resource("/a/m") == Some(b"3".as_slice()), "/a/m not restored");
    let obs: Vec<Endpoint> = node
        .observers()
        .iter()
        .filter(|o| o.path == "/gpio/btn")
        .map(|o| o.client)
        .collect();
    ensure!(obs == [btn], "observer is {obs:?}, expected {btn}");
    let entries = sim.gateway().directory().entries_for_server(&addr);
    ensure!(
        entries[0].client == lb && entries[1].client == m,
        "PUT entries attributed wrongly"
    );

    let fresh: Vec<_> = node
        .sent_notifications()
        .iter()
        .filter(|n| n.retransmission == 0)
        .collect();
    let before: Vec<_> = fresh.iter().filter(|n| n.epoch == 1).collect();
    let after: Vec<_> = fresh.iter().filter(|n| n.epoch == 2).collect();
    let values: Vec<u32> = after.iter().map(|n| n.observe).collect();
    let kinds: Vec<MessageType> = after.iter().map(|n| n.msg_type).collect();
    ensure!(values == [10, 11, 12], "post-reboot observe values {values:?}");
    ensure!(
        kinds == [MessageType::Non, MessageType::Con, MessageType::Con],
        "post-reboot types {kinds:?}"
    );
    let mids: Vec<u16> = after.iter().map(|n| n.mid).collect();
    ensure!(
        mids.windows(2).all(|w| w[1] == w[0].wrapping_add(1)),
        "post-reboot MIDs not consecutive: {mids:?}"
    );
    let last_before = before.last().ok_or("no notifications before the crash")?.mid;
    ensure!(
        mids[0] != last_before.wrapping_add(1),
        "MID counter continued across reboot ({last_before} -> {})",
        mids[0]
    );
    let client = sim.client_by_name("btn").ok_or("client btn missing")?;
    let got: Vec<u32> = client.notifications().iter().map(|n| n.observe).collect();
    ensure!(got.ends_with(&[10, 11, 12]), "client saw {got:?}");
    Ok(format!(
        "{} assertions, types {types:?}, notified {values:?} {kinds:?} mids {mids:?}, {:.0} ms wall",
        out.assertions.len(),
        wall.as_secs_f64() * 1e3
    ))
}

fn lifecycle_sim(seed: u64) -> (Simulation, Ipv6Addr, ClientId) {
    let mut sim = Simulation::new(sim_config(seed)).unwrap();
    let addr = sim
        .add_node(NodeConfig::new(node_addr(2), LinkModel::new(2, Rdc::NullRdc)).with_resource("/gpio/btn", "0"))
        .unwrap();
    let c = sim.add_client("c", client_ep(0, 52808)).unwrap();
    sim.schedule(SimTime::ZERO, Command::Boot { node: addr });
    sim.schedule(
        secs(1),
        Command::Observe {
            client: c,
            node: addr,
            path: "/gpio/btn".into(),
        },
    );
    (sim, addr, c)
}

fn change(sim: &mut Simulation, at: SimTime, node: Ipv6Addr, step: u32) {
    sim.schedule(
        at,
        Command::Change {
            node,
            path: "/gpio/btn".into(),
            value: format!("{step}").into_bytes(),
            step,
        },
    );
}

fn c2_observe_lifecycle() -> Outcome {
    let (mut sim, addr, c) = lifecycle_sim(7);
    let ep = sim.client(c).endpoint();
    let mut seen = Vec::new();
    sim.run_until(secs(4));
    let e = observe_entry(&sim, ep, addr, "/gpio/btn").ok_or("no observe entry after registration")?;
    seen.push((e.observe_counter, e.retransmit_counter));
    for (i, step) in [12, 8, 24].into_iter().enumerate() {
        let t = secs(5 + 5 * i as u64);
        change(&mut sim, t, addr, step);
        sim.run_until(t + secs(4));
        let e = observe_entry(&sim, ep, addr, "/gpio/btn").ok_or("observe entry vanished")?;
        seen.push((e.observe_counter, e.retransmit_counter));
    }
    ensure!(
        seen == [(0, 0), (12, 0), (20, 0), (44, 0)],
        "SD (obs, ret) sequence {seen:?}"
    );
    sim.schedule(
        secs(25),
        Command::Deregister {
            client: c,
            node: addr,
            path: "/gpio/btn".into(),
        },
    );
    sim.run_until(secs(30));
    ensure!(
        observe_entry(&sim, ep, addr, "/gpio/btn").is_none(),
        "deregister left the SD entry"
    );
    let node = sim.node(&addr).unwrap();
    ensure!(node.observers().is_empty(), "deregister left the node observer");

    let (mut sim, addr, c) = lifecycle_sim(8);
    change(&mut sim, secs(5), addr, 3);
    sim.schedule(
        secs(10),
        Command::Reset {
            client: c,
            node: addr,
            path: "/gpio/btn".into(),
        },
    );
    sim.run_until(secs(9));
    ensure!(
        observe_entry(&sim, ep, addr, "/gpio/btn").map(|e| e.observe_counter) == Some(3),
        "counter before reset"
    );
    sim.run_until(secs(15));
    ensure!(
        observe_entry(&sim, ep, addr, "/gpio/btn").is_none(),
        "RST left the SD entry"
    );
    let node = sim.node(&addr).unwrap();
    ensure!(
        node.removals().iter().any(|r| r.reason == RemovalReason::Reset) && node.observers().is_empty(),
        "RST left the node observer"
    );
    Ok(format!(
        "counters {:?}; deregister and RST both evict",
        seen.iter().map(|s| s.0).collect::<Vec<_>>()
    ))
}

fn c3_retransmit_eviction() -> Outcome {
    let mut evicted = 0;
    for seed in 0..100u64 {
        let mut sim = Simulation::new(sim_config(seed)).unwrap();
        let rdc = if seed % 2 == 0 { Rdc::NullRdc } else { Rdc::ContikiMac };
        let addr = sim
            .add_node(
                NodeConfig::new(node_addr(2), LinkModel::new(1 + (seed % 4) as u32, rdc))
                    .with_resource("/gpio/btn", "0"),
            )
            .unwrap();
        let c = sim.add_client("c", client_ep(0, 52808)).unwrap();
        let ep = sim.client(c).endpoint();
        sim.schedule(SimTime::ZERO, Command::Boot { node: addr });
        sim.schedule(
            secs(1),
            Command::Observe {
                client: c,
                node: addr,
                path: "/gpio/btn".into(),
            },
        );
        sim.schedule(
            secs(6),
            Command::Silence {
                client: c,
                silent: true,
            },
        );
        change(&mut sim, secs(7), addr, 1);
        sim.run_until(secs(200));

        let node = sim.node(&addr).unwrap();
        let removals: Vec<_> = node.removals().iter().collect();
        ensure!(removals.len() == 1, "seed {seed}: node removals {removals:?}");
        let r = removals[0];
        ensure!(
            r.reason == RemovalReason::RetransmitLimit,
            "seed {seed}: reason {:?}",
            r.reason
        );
        let m = r.last_mid.ok_or(format!("seed {seed}: removal without MID"))?;
        let sends: Vec<_> = node.sent_notifications().iter().filter(|n| n.mid == m).collect();
        let attempts: Vec<u8> = sends.iter().map(|n| n.retransmission).collect();
        ensure!(
            attempts == [0, 1, 2, 3, 4],
            "seed {seed}: transmissions of {m}: {attempts:?}"
        );
        ensure!(
            sends[4].at == r.at,
            "seed {seed}: node removed at {} not at the 4th retransmission",
            r.at
        );

        let sightings: Vec<_> = sim
            .gateway()
            .effects()
            .iter()
            .filter(|e| e.ingress == Ingress::Lln && e.mid == m && e.msg_type == MessageType::Con)
            .collect();
        ensure!(
            sightings.len() == 5,
            "seed {seed}: SD saw MID {m} {} times",
            sightings.len()
        );
        ensure!(
            sightings[..4].iter().all(|e| matches!(e.effect, SdEffect::Updated(_)))
                && matches!(sightings[4].effect, SdEffect::Removed(_)),
            "seed {seed}: SD effects {:?}",
            sightings.iter().map(|e| e.effect).collect::<Vec<_>>()
        );
        ensure!(
            sightings[4].at >= sends[4].at && sightings[3].at < sends[4].at,
            "seed {seed}: SD removal not caused by the 4th retransmission"
        );
        ensure!(
            observe_entry(&sim, ep, addr, "/gpio/btn").is_none(),
            "seed {seed}: SD entry left"
        );
        ensure!(node.observers().is_empty(), "seed {seed}: node observer left");
        evicted += 1;
    }
    Ok(format!("{evicted}/100 seeds evict on the same 4th retransmission"))
}

#[derive(Debug, Clone)]
enum Op {
    Put(usize, usize, bool),
    Observe(usize, String),
    Change(usize),
    Deregister(usize, String),
    Reset(usize, String),
    Bind(usize, usize, u32),
    Deploy(usize, usize, usize),
}

fn random_ops(rng: &mut SimRng) -> Vec<Op> {
    let obs_path = |rng: &mut SimRng| {
        if rng.gen_bool(0.6) {
            format!("/s/{}", rng.gen_range(0..2))
        } else {
            format!("/r/{}", rng.gen_range(0..4))
        }
    };
    (0..rng.gen_range(4..=14))
        .map(|_| match rng.gen_range(0..14) {
            0..=2 => Op::Put(rng.gen_range(0..3), rng.gen_range(0..4), rng.gen_bool(0.8)),
            3..=5 => Op::Observe(rng.gen_range(0..3), obs_path(rng)),
            6..=8 => Op::Change(rng.gen_range(0..2)),
            9 => Op::Deregister(rng.gen_range(0..3), obs_path(rng)),
            10 => Op::Reset(rng.gen_range(0..3), obs_path(rng)),
            11 => Op::Bind(rng.gen_range(0..3), rng.gen_range(0..2), rng.gen_range(0..3)),
            _ => Op::Deploy(
                rng.gen_range(0..3),
                rng.gen_range(0..3),
                [16, 32, 64][rng.gen_range(0..3)],
            ),
        })
        .collect()
}

fn c4_restoration_oracle() -> Outcome {
    const RUNS: u64 = 120;
    let mut block_runs = 0;
    let mut entry_total = 0;
    for seed in 0..RUNS {
        let mut rng = SimRng::seed_from_u64(0xC4 ^ (seed << 8));
        let mode = if seed % 3 == 0 {
            DeployMode::BlockCapture
        } else {
            DeployMode::FilenameOnly
        };
        if mode == DeployMode::BlockCapture {
            block_runs += 1;
        }
        let mut cfg = sim_config(seed);
        cfg.gateway.sd.deploy_mode = mode;
        cfg.trace = std::env::var_os("COAPSD_ACCEPTANCE_TRACE").is_some();
        let mut sim = Simulation::new(cfg).unwrap();
        let rdc = if rng.gen_bool(0.5) {
            Rdc::NullRdc
        } else {
            Rdc::ContikiMac
        };
        let mut a = NodeConfig::new(node_addr(2), LinkModel::new(rng.gen_range(1..=4), rdc));
        for i in 0..4 {
            a = a.with_resource(&format!("/r/{i}"), format!("d{i}"));
        }
        for j in 0..2 {
            a = a.with_resource(&format!("/s/{j}"), "0");
        }
        let a = sim.add_node(a.with_flash("base.ko", b"resident".to_vec())).unwrap();
        let b = sim
            .add_node(
                NodeConfig::new(node_addr(3), LinkModel::new(rng.gen_range(1..=3), rdc)).with_resource("/a/led", "off"),
            )
            .unwrap();
        let clients: Vec<ClientId> = (0..3)
            .map(|i| sim.add_client(&format!("c{i}"), client_ep(i, 40000 + i)).unwrap())
            .collect();
        sim.schedule(SimTime::ZERO, Command::Boot { node: a });
        sim.schedule(SimTime::ZERO, Command::Boot { node: b });

        let ops = random_ops(&mut rng);
        let mut t = secs(5);
        let mut counter = 0u32;
        for op in &ops {
            let cmd = match op.clone() {
                Op::Put(c, r, con) => Command::Put {
                    client: clients[c],
                    node: a,
                    path: format!("/r/{r}"),
                    value: format!("v{}", rng.gen_range(0..1000)).into_bytes(),
                    confirmable: con,
                },
                Op::Observe(c, path) => Command::Observe {
                    client: clients[c],
                    node: a,
                    path,
                },
                Op::Change(j) => {
                    counter += 1;
                    Command::Change {
                        node: a,
                        path: format!("/s/{j}"),
                        value: format!("{counter}").into_bytes(),
                        step: rng.gen_range(1..6),
                    }
                }
                Op::Deregister(c, path) => Command::Deregister {
                    client: clients[c],
                    node: a,
                    path,
                },
                Op::Reset(c, path) => Command::Reset {
                    client: clients[c],
                    node: a,
                    path,
                },
                Op::Bind(c, j, pmin) => Command::Bind {
                    client: clients[c],
                    node: a,
                    path: format!("/s/{j}"),
                    binding: BindingInfo::new(Endpoint::coap(b), "/a/led", pmin, 3600).unwrap(),
                },
                Op::Deploy(c, f, block) => {
                    let len = rng.gen_range(1..=160);
                    Command::Deploy {
                        client: clients[c],
                        node: a,
                        loader: "/loader".into(),
                        filename: format!("mod{f}.ko"),
                        image: (0..len).map(|_| rng.gen()).collect(),
                        block_size: block,
                    }
                }
            };
            sim.schedule(t, cmd);
            t = t + secs(20);
        }
        let quiet = t + secs(30);
        sim.run_until(quiet);
        let node = sim.node(&a).unwrap();
        ensure!(
            node.status() == NodeStatus::Up,
            "seed {seed}: node A not up before crash"
        );
        let before = node.dynamic_state();
        entry_total += sim.gateway().directory().entries_for_server(&a).len();

        sim.schedule(
            quiet,
            Command::Crash {
                node: a,
                downtime: secs(2),
            },
        );
        sim.run_until(quiet + secs(300));
        let node = sim.node(&a).unwrap();
        ensure!(node.boot_epoch() == 2, "seed {seed}: node did not reboot");
        let report = sim
            .gateway()
            .reports()
            .iter()
            .rfind(|r| r.node == a)
            .ok_or(format!("seed {seed}: no recovery report"))?;
        ensure!(report.all_acked(), "seed {seed}: recovery incomplete {report:?}");
        let after = node.dynamic_state();
        ensure!(
            before == after,
            "seed {seed} ({mode:?}, ops {ops:?}):\n before {before:?}\n after  {after:?}\n{}{}",
            sim.gateway().directory().snapshot(),
            sim.trace().render()
        );
    }
    Ok(format!(
        "{RUNS} sequences ({block_runs} in block-capture mode), {entry_total} SD entries, all restored exactly"
    ))
}

fn c5_hops_rdc_sweep() -> Outcome {
    let reps = 30;
    let mut points = Vec::new();
    for rdc in [Rdc::NullRdc, Rdc::ContikiMac] {
        for hops in 1..=5 {
            points.push(CanonicalParams {
                hops,
                rdc,
                state_count: 3,
            });
        }
    }
    let res = harness::sweep(&SweepSpec { points, reps, seed: 1 }, Execution::default()).map_err(|e| e.to_string())?;
    let flagged = res.runs.iter().filter(|r| !r.recovered).count();
    ensure!(flagged == 0, "{flagged} runs had replay timeouts");
    let mean = |i: usize, m| res.mean(i, m);
    let mut lines = Vec::new();
    for (k, rdc) in ["nullrdc", "contikimac"].iter().enumerate() {
        let assoc: Vec<f64> = (0..5).map(|h| mean(k * 5 + h, Metric::AssociationDelay)).collect();
        let rec: Vec<f64> = (0..5).map(|h| mean(k * 5 + h, Metric::RecoveryDelay)).collect();
        ensure!(
            assoc.windows(2).all(|w| w[1] > w[0]),
            "{rdc} association means not increasing: {assoc:?}"
        );
        ensure!(
            rec.windows(2).all(|w| w[1] > w[0]),
            "{rdc} recovery means not increasing: {rec:?}"
        );
        lines.push(format!("{rdc} assoc {assoc:.1?} rec {rec:.1?}"));
    }
    for h in 0..5 {
        for m in [Metric::AssociationDelay, Metric::RecoveryDelay] {
            ensure!(
                mean(5 + h, m) > mean(h, m),
                "hops {}: contikimac {m} {:.1} <= nullrdc {:.1}",
                h + 1,
                mean(5 + h, m),
                mean(h, m)
            );
        }
    }
    let a3 = mean(2, Metric::AssociationDelay);
    let r3 = mean(2, Metric::RecoveryDelay);
    ensure!(a3 < 100.0, "3-hop nullrdc association {a3:.1} ms");
    ensure!(r3 < 1000.0, "3-hop nullrdc recovery {r3:.1} ms");
    Ok(format!("{} runs; {}", res.runs.len(), lines.join("; ")))
}

fn c6_state_count_sweep() -> Outcome {
    let reps = 30;
    let points: Vec<CanonicalParams> = (1..=3)
        .map(|s| CanonicalParams {
            hops: 3,
            rdc: Rdc::NullRdc,
            state_count: s,
        })
        .collect();
    let res = harness::sweep(&SweepSpec { points, reps, seed: 6 }, Execution::default()).map_err(|e| e.to_string())?;
    let means: Vec<f64> = (0..3).map(|i| res.mean(i, Metric::RecoveryDelay)).collect();
    ensure!(means.windows(2).all(|w| w[1] >= w[0]), "recovery means {means:?}");
    for i in 0..3 {
        ensure!(
            res.point(i).iter().all(|r| r.states == i + 1 && r.recovered),
            "state count {} runs replayed the wrong number of states",
            i + 1
        );
    }
    let monotone = (0..reps)
        .filter(|&rep| {
            let d: Vec<f64> = (0..3).map(|i| res.point(i)[rep].recovery_ms).collect();
            d[0] <= d[1] && d[1] <= d[2]
        })
        .count();
    ensure!(monotone >= 28, "only {monotone}/{reps} seed-paired runs monotone");
    Ok(format!("means {means:.1?} ms; {monotone}/{reps} paired runs monotone"))
}

fn transparency_scenario(mode: DeployMode) -> Scenario {
    let mut sc = Scenario::new("transparency", 77);
    sc.gateway.sd.deploy_mode = mode;
    let a = sc.add_node(
        "a",
        NodeConfig::new(node_addr(2), LinkModel::new(3, Rdc::ContikiMac))
            .with_resource("/a/lb", "0")
            .with_resource("/gpio/btn", "0")
            .with_flash("fw.ko", b"stored".to_vec()),
    );
    let b = sc.add_node(
        "b",
        NodeConfig::new(node_addr(3), LinkModel::new(2, Rdc::ContikiMac)).with_resource("/a/led", "off"),
    );
    let c0 = sc.add_client("c0", client_ep(0, 50824));
    let c1 = sc.add_client("c1", client_ep(1, 52808));
    let btn = || "/gpio/btn".to_string();
    sc.command(ms(0), Command::Boot { node: a });
    sc.command(ms(0), Command::Boot { node: b });
    sc.command(
        secs(3),
        Command::Put {
            client: c0,
            node: a,
            path: "/a/lb".into(),
            value: b"10".to_vec(),
            confirmable: true,
        },
    );
    sc.command(
        secs(6),
        Command::Observe {
            client: c1,
            node: a,
            path: btn(),
        },
    );
    sc.command(
        secs(8),
        Command::Observe {
            client: c0,
            node: a,
            path: btn(),
        },
    );
    sc.command(
        secs(10),
        Command::Change {
            node: a,
            path: btn(),
            value: b"1".to_vec(),
            step: 1,
        },
    );
    sc.command(
        secs(14),
        Command::Bind {
            client: c0,
            node: a,
            path: btn(),
            binding: BindingInfo::new(Endpoint::coap(b), "/a/led", 0, 3600).unwrap(),
        },
    );
    sc.command(
        secs(18),
        Command::Change {
            node: a,
            path: btn(),
            value: b"2".to_vec(),
            step: 1,
        },
    );
    sc.command(
        secs(22),
        Command::Deploy {
            client: c1,
            node: a,
            loader: "/loader".into(),
            filename: "fw.ko".into(),
            image: (0..100u8).collect(),
            block_size: 32,
        },
    );
    sc.command(
        secs(40),
        Command::Get {
            client: c0,
            node: a,
            path: "/a/lb".into(),
        },
    );
    sc.command(
        secs(44),
        Command::Put {
            client: c1,
            node: a,
            path: "/a/lb".into(),
            value: b"7".to_vec(),
            confirmable: false,
        },
    );
    sc.command(
        secs(48),
        Command::Reset {
            client: c1,
            node: a,
            path: btn(),
        },
    );
    sc.command(
        secs(50),
        Command::Change {
            node: a,
            path: btn(),
            value: b"3".to_vec(),
            step: 2,
        },
    );
    sc.command(
        secs(56),
        Command::Deregister {
            client: c0,
            node: a,
            path: btn(),
        },
    );
    sc.command(
        secs(60),
        Command::Change {
            node: a,
            path: btn(),
            value: b"4".to_vec(),
            step: 1,
        },
    );
    sc
}

type Wire = (Endpoint, Endpoint, Vec<u8>);

fn wire(frames: &[(SimTime, coapsd::sim::Frame)]) -> Vec<Wire> {
    frames.iter().map(|(_, f)| (f.src, f.dst, f.bytes.clone())).collect()
}

fn c7_transparency() -> Outcome {
    let mut packets = 0;
    let mut overhead = Vec::new();
    for mode in [DeployMode::FilenameOnly, DeployMode::BlockCapture] {
        let sc = transparency_scenario(mode);
        let run = |intercept| {
            harness::run(
                &sc,
                &RunOptions {
                    intercept: Some(intercept),
                    measure_overhead: true,
                    ..RunOptions::default()
                },
            )
        };
        let on = run(true).map_err(|e| e.to_string())?;
        let off = run(false).map_err(|e| e.to_string())?;
        let (g_on, g_off) = (wire(on.sim.gateway().egress()), wire(off.sim.gateway().egress()));
        ensure!(!g_on.is_empty(), "{mode:?}: nothing left the LLN");
        ensure!(
            g_on == g_off,
            "{mode:?}: gateway egress differs ({} vs {} frames)",
            g_on.len(),
            g_off.len()
        );
        let mut inboxes = BTreeMap::new();
        for (x, y) in on.sim.clients().iter().zip(off.sim.clients()) {
            ensure!(
                wire(x.inbox()) == wire(y.inbox()),
                "{mode:?}: inbox of {} differs",
                x.name()
            );
            inboxes.insert(x.name().to_string(), x.inbox().len());
        }
        let node = on.sim.node(&node_addr(2)).unwrap();
        ensure!(node.loaded_modules().contains("fw.ko"), "{mode:?}: deploy did not load");
        ensure!(
            on.sim.gateway().suppressed() == 0,
            "{mode:?}: gateway suppressed traffic"
        );
        ensure!(
            !on.sim.gateway().directory().is_empty(),
            "{mode:?}: SD recorded nothing"
        );
        ensure!(
            off.sim.gateway().directory().is_empty(),
            "{mode:?}: SD populated with interception off"
        );
        let times = on.sim.gateway().intercept_times();
        packets += times.len();
        overhead.extend(times.iter().map(|d| d.as_secs_f64() * 1e6));
    }
    let mean_us = overhead.iter().sum::<f64>() / overhead.len().max(1) as f64;
    ensure!(packets > 0, "no packets intercepted");
    ensure!(mean_us < 1000.0, "mean interception time {mean_us:.1} us");
    Ok(format!(
        "{packets} intercepted packets byte-identical to forwarding; mean {mean_us:.2} us per packet"
    ))
}

fn c8_codec() -> Outcome {
    let mut rng = SimRng::seed_from_u64(8);
    for i in 0..10_000 {
        let m = common::random_message(&mut rng);
        m.check_invariants()
            .map_err(|e| format!("generator produced invalid message {i}: {e}"))?;
        let bytes = m.encode().map_err(|e| format!("message {i}: encode failed: {e}"))?;
        let back = Message::decode(&bytes).map_err(|e| format!("message {i}: decode failed: {e}"))?;
        ensure!(back == m, "message {i} changed in round trip:\n {m:?}\n {back:?}");
        ensure!(
            back.encode().as_deref() == Ok(bytes.as_slice()),
            "message {i}: re-encode differs"
        );
    }
    let mut decoded = 0;
    for _ in 0..10_000 {
        let len = rng.gen_range(0..64);
        let mut bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        if len > 0 && rng.gen_bool(0.7) {
            // Keep the version bits valid so the parser gets past the header.
            bytes[0] = (bytes[0] & 0x3F) | 0x40;
        }
        let r = panic::catch_unwind(|| Message::decode(&bytes));
        match r {
            Ok(Ok(m)) => {
                decoded += 1;
                let _ = m.encode();
            }
            Ok(Err(_)) => {}
            Err(_) => return Err(format!("decoder panicked on {}", hex::encode(&bytes))),
        }
    }
    Ok(format!(
        "10000 messages round-trip; 10000 random frames ({decoded} parsed) without panic"
    ))
}
