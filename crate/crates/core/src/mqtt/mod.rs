//! MQTT 3.1.1 subset: QoS 0 publish/subscribe over TCP.
//!
//! Supported packets are CONNECT, CONNACK, PUBLISH, SUBSCRIBE, SUBACK,
//! PINGREQ, PINGRESP and DISCONNECT. No retained messages, wills or
//! persistent sessions. Byte layouts are in `docs/mqtt-subset.md`.

mod broker;
mod client;
mod codec;
mod topic;

pub use broker::{broker_dispatch, Broker, BrokerHandle, BrokerLimits, BrokerStats, Subscription};
pub use client::{ClientOptions, MqttClient, Publisher};
pub use codec::{
    decode_packet, encode_packet, packet_len, ConnAck, Connect, Packet, PacketKind, Publish, SubAck, Subscribe,
    CONNACK_ACCEPTED, CONNACK_NOT_AUTHORIZED, CONNACK_SERVER_UNAVAILABLE, MAX_REMAINING_LENGTH, SUBACK_FAILURE,
};
pub use topic::{topic_matches, validate_filter, validate_topic};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MqttError {
    #[error("malformed packet: {0}")]
    MalformedPacket(&'static str),
    #[error("unsupported packet: {0}")]
    UnsupportedType(&'static str),
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("invalid topic name {0:?}")]
    InvalidTopic(String),
    #[error("packet of {0} bytes exceeds the limit")]
    PacketTooLarge(usize),
    #[error("connection refused with return code {0}")]
    ConnectionRefused(u8),
    #[error("connection closed")]
    Closed,
    #[error("timed out")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MqttError {
    fn from(e: std::io::Error) -> Self {
        MqttError::Io(e.to_string())
    }
}

/// Telemetry topic of a house.
pub fn telemetry_topic(house_id: &str) -> String {
    format!("acc/{house_id}/telemetry")
}

/// Control topic of a house.
pub fn control_topic(house_id: &str) -> String {
    format!("acc/{house_id}/control")
}

pub const TELEMETRY_FILTER: &str = "acc/+/telemetry";
pub const STATUS_TOPIC: &str = "acc/ops/status";

/// Extracts `<house>` from `acc/<house>/telemetry`.
pub fn house_of_topic(topic: &str) -> Option<&str> {
    let rest = topic.strip_prefix("acc/")?;
    let (house, tail) = rest.split_once('/')?;
    (!house.is_empty() && !tail.contains('/')).then_some(house)
}
