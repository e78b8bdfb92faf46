//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::net::Ipv6Addr;

use rand::Rng;

use coapsd::coap::{self, BindingInfo, Block, Code, Message, MessageType};
use coapsd::gateway::GatewayConfig;
use coapsd::sim::{SimConfig, SimRng};
use coapsd::Endpoint;

pub const GATEWAY: &str = "[cccc::1]:5683";
pub const PREFIX: &str = "aaaa::/64";

pub fn gateway_config() -> GatewayConfig {
    GatewayConfig::new(GATEWAY.parse().unwrap(), PREFIX.parse().unwrap())
}

pub fn sim_config(seed: u64) -> SimConfig {
    SimConfig::new(seed, gateway_config())
}

pub fn node_addr(i: u16) -> Ipv6Addr {
    Ipv6Addr::new(0xaaaa, 0, 0, 0, 0xc30c, 0, 0, i)
}

pub fn client_ep(i: u16, port: u16) -> Endpoint {
    Endpoint::new(Ipv6Addr::new(0xcccc, 0, 0, 0, 0, 0, 0, 3 + i), port)
}

/// Option numbers the codec checks; random "other" options avoid them.
const INTERPRETED: [u16; 13] = [
    coap::OBSERVE_RESUME,
    coap::OBSERVE,
    coap::URI_PATH,
    coap::CONTENT_FORMAT,
    coap::MAX_AGE,
    coap::URI_QUERY,
    coap::BLOCK2,
    coap::BLOCK1,
    coap::BIND_DEST_ADDR,
    coap::BIND_DEST_RESOURCE,
    coap::BIND_PMIN,
    coap::BIND_PMAX,
    0,
];

fn bytes(rng: &mut SimRng, max: usize) -> Vec<u8> {
    // Bias towards short values but reach the 13 and 269 length extensions.
    let len = match rng.gen_range(0..10) {
        0 => rng.gen_range(0..=max),
        1..=3 => rng.gen_range(0..=14.min(max)),
        _ => rng.gen_range(0..=4.min(max)),
    };
    (0..len).map(|_| rng.gen()).collect()
}

fn segment(rng: &mut SimRng) -> String {
    let len = rng.gen_range(1..12);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// A message that satisfies the codec's invariants.
pub fn random_message(rng: &mut SimRng) -> Message {
    let msg_type = match rng.gen_range(0..4) {
        0 => MessageType::Con,
        1 => MessageType::Non,
        2 => MessageType::Ack,
        _ => MessageType::Rst,
    };
    let mid = rng.gen();
    if rng.gen_ratio(1, 8) {
        return Message::new(msg_type, Code::EMPTY, mid);
    }
    let code = loop {
        let c = Code(rng.gen());
        if !c.is_empty() {
            break c;
        }
    };
    let mut m = Message::new(msg_type, code, mid);
    let tkl = rng.gen_range(0..=coap::MAX_TOKEN_LEN);
    m.token = (0..tkl).map(|_| rng.gen()).collect();
    if rng.gen_bool(0.5) {
        let segs: Vec<String> = (0..rng.gen_range(1..4)).map(|_| segment(rng)).collect();
        m.options.set_path(&segs.join("/"));
    }
    if rng.gen_bool(0.3) {
        m.options.set_observe(rng.gen_range(0..=coap::MAX_OBSERVE));
    }
    if rng.gen_bool(0.2) {
        m.options.set_content_format(rng.gen());
    }
    if rng.gen_bool(0.2) {
        m.options.set_max_age(rng.gen());
    }
    if rng.gen_bool(0.2) {
        let size = 16usize << rng.gen_range(0..=6);
        m.options
            .set_block1(Block::new(rng.gen_range(0..(1 << 20)), rng.gen(), size).unwrap());
    }
    if rng.gen_bool(0.2) {
        m.options.add_query(&format!("file={}", segment(rng)));
    }
    if rng.gen_bool(0.15) {
        let pmin = rng.gen_range(0..100);
        let b = BindingInfo::new(
            client_ep(rng.gen_range(0..10), rng.gen()),
            format!("/{}", segment(rng)),
            pmin,
            pmin + rng.gen_range(0..10_000),
        )
        .unwrap();
        m.options.set_binding(&b);
    }
    for _ in 0..rng.gen_range(0..4) {
        let number = loop {
            let n = if rng.gen_bool(0.5) {
                rng.gen_range(1..64)
            } else {
                rng.gen()
            };
            if !INTERPRETED.contains(&n) {
                break n;
            }
        };
        m.options.push(number, bytes(rng, 400));
    }
    if rng.gen_bool(0.6) {
        m.payload = bytes(rng, 600);
        if m.payload.is_empty() {
            m.payload.push(rng.gen());
        }
    }
    m
}
