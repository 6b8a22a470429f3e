//! Packets under `tests/corpus/mqtt`, written by `gen_mqtt_corpus.py`.

use std::path::PathBuf;

use acc_core::mqtt::{decode_packet, encode_packet, MqttError, Packet};
use serde_json::{json, Value};

fn corpus() -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../tests/corpus/mqtt/packets.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn describe(p: &Packet) -> Value {
    match p {
        Packet::Connect(c) => json!({
            "type": "connect",
            "client_id": c.client_id,
            "keep_alive_s": c.keep_alive_s,
            "clean_session": c.clean_session,
            "username": c.username,
            "password_hex": c.password.as_ref().map(hex::encode),
        }),
        Packet::ConnAck(a) => json!({
            "type": "connack",
            "session_present": a.session_present,
            "return_code": a.return_code,
        }),
        Packet::Publish(p) => json!({"type": "publish", "topic": p.topic, "payload_hex": hex::encode(&p.payload)}),
        Packet::Subscribe(s) => json!({"type": "subscribe", "packet_id": s.packet_id, "filters": s.filters}),
        Packet::SubAck(a) => json!({"type": "suback", "packet_id": a.packet_id, "return_codes": a.return_codes}),
        Packet::PingReq => json!({"type": "pingreq"}),
        Packet::PingResp => json!({"type": "pingresp"}),
        Packet::Disconnect => json!({"type": "disconnect"}),
    }
}

#[test]
fn valid_packets_decode_and_reencode_identically() {
    let c = corpus();
    let valid = c["valid"].as_array().unwrap();
    assert!(valid.len() >= 19);
    for case in valid {
        let name = case["name"].as_str().unwrap();
        let bytes = hex::decode(case["hex"].as_str().unwrap()).unwrap();
        let p = decode_packet(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(describe(&p), case["packet"], "{name}");
        assert_eq!(encode_packet(&p).unwrap(), bytes, "{name}");
    }
}

#[test]
fn invalid_packets_raise_their_error_class() {
    let c = corpus();
    for case in c["invalid"].as_array().unwrap() {
        let name = case["name"].as_str().unwrap();
        let bytes = hex::decode(case["hex"].as_str().unwrap()).unwrap();
        let class = match decode_packet(&bytes) {
            Err(MqttError::MalformedPacket(_)) => "malformed",
            Err(MqttError::UnsupportedType(_)) => "unsupported",
            other => panic!("{name}: {other:?}"),
        };
        assert_eq!(class, case["error"], "{name}");
    }
}
