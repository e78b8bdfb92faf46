mod common;

use proptest::prelude::*;

use coapsd::coap::{self, classify, Block, Code, CodecError, InteractionKind, Message, MessageType};

fn message() -> impl Strategy<Value = Message> {
    let ty = prop_oneof![
        Just(MessageType::Con),
        Just(MessageType::Non),
        Just(MessageType::Ack),
        Just(MessageType::Rst)
    ];
    let other = (1u16..=u16::MAX).prop_filter("interpreted option", |n| {
        ![6, 11, 12, 14, 15, 23, 27, 2048, 2050, 2052, 2054, coap::OBSERVE_RESUME].contains(n)
    });
    (
        ty,
        1u8..=255,
        any::<u16>(),
        proptest::collection::vec(any::<u8>(), 0..=8),
        proptest::collection::vec("[a-z0-9]{1,12}", 0..4),
        proptest::option::of(0u32..=coap::MAX_OBSERVE),
        proptest::collection::vec((other, proptest::collection::vec(any::<u8>(), 0..300)), 0..4),
        proptest::collection::vec(any::<u8>(), 0..200),
    )
        .prop_map(|(ty, code, mid, token, segs, obs, opts, payload)| {
            let mut m = Message::new(ty, Code(code), mid)
                .with_token(token)
                .with_payload(payload);
            m.options.set_path(&segs.join("/"));
            if let Some(o) = obs {
                m.options.set_observe(o);
            }
            for (n, v) in opts {
                m.options.push(n, v);
            }
            m
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn encode_decode_round_trip(m in message()) {
        let bytes = m.encode().unwrap();
        let back = Message::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn decoder_total_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
        if let Ok(m) = Message::decode(&bytes) {
            // Whatever decodes must classify without panicking too.
            let _ = classify(&m);
        }
    }

    #[test]
    fn truncated_frames_are_rejected_or_shorter(m in message(), cut in any::<prop::sample::Index>()) {
        let bytes = m.encode().unwrap();
        let at = cut.index(bytes.len());
        if let Ok(short) = Message::decode(&bytes[..at]) {
            prop_assert_ne!(short, m);
        }
    }

    #[test]
    fn block_values_round_trip(num in 0u32..(1 << 20), more in any::<bool>(), szx in 0u8..=6) {
        let b = Block::new(num, more, 16 << szx).unwrap();
        prop_assert_eq!(Block::from_value(b.value()), Some(b));
        let mut m = Message::request(MessageType::Con, Code::POST, 1, "/loader");
        m.options.set_block1(b);
        let back = Message::decode(&m.encode().unwrap()).unwrap();
        prop_assert_eq!(back.options.block1(), Some(b));
        prop_assert_eq!(classify(&back), InteractionKind::DeployBlock);
    }

    #[test]
    fn resume_counter_round_trip(counter in 0u32..=coap::MAX_OBSERVE) {
        let mut m = Message::request(MessageType::Con, Code::GET, 1, "/s").with_token(vec![1]);
        m.options.set_resume_counter(counter);
        let back = Message::decode(&m.encode().unwrap()).unwrap();
        prop_assert_eq!(back.options.resume_counter(), Some(counter));
        prop_assert_eq!(classify(&back), InteractionKind::ObserveRegister);
    }
}

#[test]
fn generated_messages_round_trip() {
    use rand::SeedableRng;
    let mut rng = coapsd::sim::SimRng::seed_from_u64(99);
    for _ in 0..2000 {
        let m = common::random_message(&mut rng);
        assert_eq!(Message::decode(&m.encode().unwrap()).unwrap(), m);
    }
}

#[test]
fn invariant_violations_refuse_to_encode() {
    let long_token = Message::new(MessageType::Con, Code::GET, 1).with_token(vec![0; 9]);
    assert!(matches!(long_token.encode(), Err(CodecError::InvariantViolation(_))));
    let empty_with_payload = Message::new(MessageType::Ack, Code::EMPTY, 1).with_payload(vec![1]);
    assert!(matches!(
        empty_with_payload.encode(),
        Err(CodecError::InvariantViolation(_))
    ));
    let mut bad_block = Message::request(MessageType::Con, Code::POST, 1, "/loader");
    bad_block.options.push(coap::BLOCK1, vec![0x0F]);
    assert!(matches!(bad_block.encode(), Err(CodecError::InvariantViolation(_))));
    let mut half_binding = Message::request(MessageType::Con, Code::GET, 1, "/s");
    half_binding.options.push(coap::BIND_PMIN, vec![1]);
    assert!(matches!(half_binding.encode(), Err(CodecError::InvariantViolation(_))));
}

#[test]
fn malformed_frames_are_errors() {
    for bytes in [
        &[][..],
        &[0x40, 0x01, 0x00][..],
        &[0x00, 0x01, 0x00, 0x01][..],
        &[0x49, 0x01, 0x00, 0x01][..],
        &[0x40, 0x01, 0x00, 0x01, 0xFF][..],
        &[0x40, 0x01, 0x00, 0x01, 0xF0][..],
        &[0x40, 0x01, 0x00, 0x01, 0x13, 0x61][..],
        &[0x41, 0x00, 0x00, 0x01, 0xAA][..],
    ] {
        assert!(
            matches!(Message::decode(bytes), Err(CodecError::MalformedFrame(_))),
            "{bytes:02x?}"
        );
    }
}
