mod common;

use std::net::Ipv6Addr;

use coapsd::directory::EntryType;
use coapsd::recovery::StepOutcome;
use coapsd::sim::{ClientId, Command, LinkModel, NodeConfig, NodeStatus, Rdc, Simulation};
use coapsd::SimTime;

use common::{client_ep, node_addr, sim_config};

fn secs(s: u64) -> SimTime {
    SimTime::from_secs(s)
}

fn ms(v: u64) -> SimTime {
    SimTime::from_millis(v)
}

/// Node with three resources, a client that PUTs all of them.
fn three_puts(seed: u64, link: LinkModel) -> (Simulation, Ipv6Addr, ClientId) {
    let mut sim = Simulation::new(sim_config(seed)).unwrap();
    let mut cfg = NodeConfig::new(node_addr(2), link);
    for i in 0..3 {
        cfg = cfg.with_resource(&format!("/s/{i}"), "0");
    }
    let addr = sim.add_node(cfg).unwrap();
    let c = sim.add_client("c", client_ep(0, 50824)).unwrap();
    sim.schedule(SimTime::ZERO, Command::Boot { node: addr });
    for i in 0..3u64 {
        sim.schedule(
            secs(5 + 5 * i),
            Command::Put {
                client: c,
                node: addr,
                path: format!("/s/{i}"),
                value: format!("v{i}").into_bytes(),
                confirmable: true,
            },
        );
    }
    (sim, addr, c)
}

#[test]
fn crash_during_recovery_aborts_and_restarts() {
    let (mut sim, addr, _) = three_puts(3, LinkModel::new(4, Rdc::ContikiMac));
    sim.run_until(secs(30));
    let before = sim.node(&addr).unwrap().dynamic_state();
    sim.schedule(
        secs(30),
        Command::Crash {
            node: addr,
            downtime: secs(1),
        },
    );
    sim.run_until(secs(31));
    // Wait for the registration, then crash again while replays are in flight.
    while !sim.gateway().recovery_in_progress() {
        let t = sim.now() + ms(5);
        sim.run_until(t);
        assert!(t < secs(60), "recovery never started");
    }
    let t = sim.now() + ms(1);
    sim.schedule(
        t,
        Command::Crash {
            node: addr,
            downtime: secs(1),
        },
    );
    sim.run_until(secs(200));

    let node = sim.node(&addr).unwrap();
    assert_eq!(node.boot_epoch(), 3);
    assert_eq!(node.dynamic_state(), before);
    let reports: Vec<_> = sim.gateway().reports().iter().filter(|r| r.node == addr).collect();
    let cut = &reports[reports.len() - 2];
    assert!(!cut.all_acked(), "interrupted run reported as complete: {cut:?}");
    assert!(reports.last().unwrap().all_acked());
    assert_eq!(sim.gateway().directory().len(), 3);
}

#[test]
fn lost_registration_is_retransmitted() {
    let mut retried = 0;
    for seed in 0..40 {
        let (mut sim, addr, _) = three_puts(seed, LinkModel::new(3, Rdc::NullRdc).with_loss(0.15));
        sim.schedule(
            secs(40),
            Command::Crash {
                node: addr,
                downtime: secs(1),
            },
        );
        sim.run_until(secs(400));
        let node = sim.node(&addr).unwrap();
        let assoc = node.associations().iter().find(|a| a.epoch == 2).unwrap();
        assert!(assoc.acked_at.is_some(), "seed {seed}: node never re-associated");
        assert_eq!(node.status(), NodeStatus::Up);
        if assoc.retransmissions > 0 {
            retried += 1;
            assert!(
                assoc.delay().unwrap() > ms(2000),
                "a retransmitted registration waits a full timeout"
            );
        }
        let report = sim.gateway().reports().iter().rfind(|r| r.node == addr).unwrap();
        if report.all_acked() {
            let stored = sim.gateway().directory().entries_for_server(&addr);
            for e in stored.iter().filter(|e| e.entry_type == EntryType::Put) {
                assert_eq!(node.resource(&e.uri_path), Some(e.value.as_slice()), "seed {seed}");
            }
        }
    }
    assert!(retried > 0, "no seed lost a registration");
}

#[test]
fn put_in_flight_at_crash_is_replayed() {
    let (mut sim, addr, c) = three_puts(5, LinkModel::new(3, Rdc::ContikiMac));
    sim.run_until(secs(30));
    // The PUT passes the gateway (and is stored) but the node is down when it arrives.
    sim.schedule(
        secs(30),
        Command::Put {
            client: c,
            node: addr,
            path: "/s/1".into(),
            value: b"late".to_vec(),
            confirmable: true,
        },
    );
    sim.schedule(
        secs(30) + ms(11),
        Command::Crash {
            node: addr,
            downtime: secs(2),
        },
    );
    sim.run_until(secs(120));
    let node = sim.node(&addr).unwrap();
    assert_eq!(node.boot_epoch(), 2);
    assert_eq!(node.resource("/s/1"), Some(b"late".as_slice()));
    let e = sim
        .gateway()
        .directory()
        .entries_for_server(&addr)
        .into_iter()
        .find(|e| e.uri_path == "/s/1")
        .unwrap();
    assert_eq!(e.value, b"late");
}

#[test]
fn unanswered_replays_time_out_and_state_is_kept() {
    let (mut sim, addr, _) = three_puts(9, LinkModel::new(2, Rdc::NullRdc));
    sim.run_until(secs(30));
    sim.schedule(
        secs(30),
        Command::Crash {
            node: addr,
            downtime: secs(1),
        },
    );
    sim.run_until(secs(31));
    while !sim.gateway().recovery_in_progress() {
        let t = sim.now() + ms(1);
        sim.run_until(t);
    }
    // Down long enough for every replay attempt to expire.
    let t = sim.now() + ms(1);
    sim.schedule(
        t,
        Command::Crash {
            node: addr,
            downtime: secs(120),
        },
    );
    sim.run_until(secs(140));
    assert!(sim.gateway().recovery_in_progress());
    assert_eq!(sim.gateway().directory().len(), 3, "timeouts must not drop state");

    sim.run_until(secs(400));
    // The reboot cut the stalled run short after its first step gave up.
    let stalled = sim
        .gateway()
        .reports()
        .iter()
        .find(|r| r.node == addr && r.timed_out() > 0)
        .expect("a run with timed-out steps");
    assert!(stalled.aborted && !stalled.all_acked());
    assert!(matches!(stalled.outcomes[0], StepOutcome::TimedOut { .. }));
    let last = sim.gateway().reports().iter().rfind(|r| r.node == addr).unwrap();
    assert!(last.all_acked());
    let node = sim.node(&addr).unwrap();
    assert_eq!(node.resource("/s/2"), Some(b"v2".as_slice()));
}

#[test]
fn nodes_outside_the_prefix_are_rejected() {
    let mut sim = Simulation::new(sim_config(1)).unwrap();
    let outside: Ipv6Addr = "bbbb::2".parse().unwrap();
    assert!(sim
        .add_node(NodeConfig::new(outside, LinkModel::new(1, Rdc::NullRdc)))
        .is_err());
}
