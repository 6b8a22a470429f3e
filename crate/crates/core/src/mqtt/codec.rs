use super::topic::{validate_filter, validate_topic};
use super::MqttError;

pub const MAX_REMAINING_LENGTH: usize = 268_435_455;

pub const CONNACK_ACCEPTED: u8 = 0x00;
pub const CONNACK_SERVER_UNAVAILABLE: u8 = 0x03;
pub const CONNACK_NOT_AUTHORIZED: u8 = 0x05;
pub const SUBACK_FAILURE: u8 = 0x80;

const PROTOCOL_NAME: &[u8] = b"MQTT";
const PROTOCOL_LEVEL: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketKind {
    Connect,
    ConnAck,
    Publish,
    Subscribe,
    SubAck,
    PingReq,
    PingResp,
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Connect {
    pub client_id: String,
    pub keep_alive_s: u16,
    pub clean_session: bool,
    pub username: Option<String>,
    pub password: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConnAck {
    pub session_present: bool,
    pub return_code: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscribe {
    pub packet_id: u16,
    pub filters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubAck {
    pub packet_id: u16,
    pub return_codes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect(Connect),
    ConnAck(ConnAck),
    Publish(Publish),
    Subscribe(Subscribe),
    SubAck(SubAck),
    PingReq,
    PingResp,
    Disconnect,
}

impl Packet {
    pub fn kind(&self) -> PacketKind {
        match self {
            Packet::Connect(_) => PacketKind::Connect,
            Packet::ConnAck(_) => PacketKind::ConnAck,
            Packet::Publish(_) => PacketKind::Publish,
            Packet::Subscribe(_) => PacketKind::Subscribe,
            Packet::SubAck(_) => PacketKind::SubAck,
            Packet::PingReq => PacketKind::PingReq,
            Packet::PingResp => PacketKind::PingResp,
            Packet::Disconnect => PacketKind::Disconnect,
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &[u8]) -> Result<(), MqttError> {
    let len = u16::try_from(s.len()).map_err(|_| MqttError::MalformedPacket("string longer than 65535 bytes"))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s);
    Ok(())
}

fn put_remaining_length(out: &mut Vec<u8>, mut len: usize) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if len == 0 {
            break;
        }
    }
}

pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, MqttError> {
    let mut body = Vec::new();
    let header = match packet {
        Packet::Connect(c) => {
            put_str(&mut body, PROTOCOL_NAME)?;
            body.push(PROTOCOL_LEVEL);
            let mut flags = 0u8;
            if c.clean_session {
                flags |= 0x02;
            }
            if c.username.is_some() {
                flags |= 0x80;
            }
            if c.password.is_some() {
                if c.username.is_none() {
                    return Err(MqttError::MalformedPacket("password without username"));
                }
                flags |= 0x40;
            }
            body.push(flags);
            body.extend_from_slice(&c.keep_alive_s.to_be_bytes());
            put_str(&mut body, c.client_id.as_bytes())?;
            if let Some(u) = &c.username {
                put_str(&mut body, u.as_bytes())?;
            }
            if let Some(p) = &c.password {
                put_str(&mut body, p)?;
            }
            0x10
        }
        Packet::ConnAck(a) => {
            body.push(u8::from(a.session_present));
            body.push(a.return_code);
            0x20
        }
        Packet::Publish(p) => {
            validate_topic(&p.topic)?;
            put_str(&mut body, p.topic.as_bytes())?;
            body.extend_from_slice(&p.payload);
            0x30
        }
        Packet::Subscribe(s) => {
            if s.filters.is_empty() {
                return Err(MqttError::MalformedPacket("SUBSCRIBE without filters"));
            }
            if s.packet_id == 0 {
                return Err(MqttError::MalformedPacket("packet identifier 0"));
            }
            body.extend_from_slice(&s.packet_id.to_be_bytes());
            for f in &s.filters {
                validate_filter(f)?;
                put_str(&mut body, f.as_bytes())?;
                body.push(0);
            }
            0x82
        }
        Packet::SubAck(a) => {
            body.extend_from_slice(&a.packet_id.to_be_bytes());
            body.extend_from_slice(&a.return_codes);
            0x90
        }
        Packet::PingReq => 0xC0,
        Packet::PingResp => 0xD0,
        Packet::Disconnect => 0xE0,
    };
    if body.len() > MAX_REMAINING_LENGTH {
        return Err(MqttError::PacketTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 5);
    out.push(header);
    put_remaining_length(&mut out, body.len());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Total size of the packet at the start of `buf`, or `None` when the fixed
/// header itself is incomplete.
pub fn packet_len(buf: &[u8]) -> Result<Option<usize>, MqttError> {
    if buf.is_empty() {
        return Ok(None);
    }
    let mut len = 0usize;
    let mut multiplier = 1usize;
    for i in 0..4 {
        let Some(&byte) = buf.get(1 + i) else {
            return Ok(None);
        };
        len += usize::from(byte & 0x7F) * multiplier;
        if byte & 0x80 == 0 {
            if i > 0 && byte == 0 {
                return Err(MqttError::MalformedPacket("non-minimal remaining length"));
            }
            return Ok(Some(1 + i + 1 + len));
        }
        multiplier *= 128;
    }
    Err(MqttError::MalformedPacket("remaining length longer than 4 bytes"))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MqttError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or(MqttError::MalformedPacket("truncated packet"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, MqttError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MqttError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn bytes(&mut self) -> Result<&'a [u8], MqttError> {
        let len = self.u16()?;
        self.take(usize::from(len))
    }

    fn string(&mut self) -> Result<String, MqttError> {
        let raw = self.bytes()?;
        let s = std::str::from_utf8(raw).map_err(|_| MqttError::MalformedPacket("invalid UTF-8 string"))?;
        if s.contains('\0') {
            return Err(MqttError::MalformedPacket("NUL in string"));
        }
        Ok(s.to_string())
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }

    fn finished(&self) -> Result<(), MqttError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(MqttError::MalformedPacket("trailing bytes in packet"))
        }
    }
}

/// Decodes one complete packet; `buf` must hold exactly that packet.
pub fn decode_packet(buf: &[u8]) -> Result<Packet, MqttError> {
    let total = packet_len(buf)?.ok_or(MqttError::MalformedPacket("truncated fixed header"))?;
    if total != buf.len() {
        return Err(MqttError::MalformedPacket(if total > buf.len() {
            "truncated packet"
        } else {
            "bytes after packet end"
        }));
    }
    let header = buf[0];
    let body_start = 1 + varint_len(buf)?;
    let mut c = Cursor {
        buf: &buf[body_start..],
        pos: 0,
    };
    let (kind, flags) = (header >> 4, header & 0x0F);
    let expect_flags = |want: u8| {
        if flags == want {
            Ok(())
        } else {
            Err(MqttError::MalformedPacket("invalid fixed header flags"))
        }
    };
    let packet = match kind {
        1 => {
            expect_flags(0)?;
            if c.bytes()? != PROTOCOL_NAME {
                return Err(MqttError::MalformedPacket("unknown protocol name"));
            }
            if c.u8()? != PROTOCOL_LEVEL {
                return Err(MqttError::UnsupportedType("protocol level other than 3.1.1"));
            }
            let cf = c.u8()?;
            if cf & 0x01 != 0 {
                return Err(MqttError::MalformedPacket("reserved connect flag set"));
            }
            if cf & 0x3C != 0 {
                return Err(MqttError::UnsupportedType("will messages"));
            }
            if cf & 0x40 != 0 && cf & 0x80 == 0 {
                return Err(MqttError::MalformedPacket("password without username"));
            }
            let keep_alive_s = c.u16()?;
            let client_id = c.string()?;
            let username = if cf & 0x80 != 0 { Some(c.string()?) } else { None };
            let password = if cf & 0x40 != 0 {
                Some(c.bytes()?.to_vec())
            } else {
                None
            };
            Packet::Connect(Connect {
                client_id,
                keep_alive_s,
                clean_session: cf & 0x02 != 0,
                username,
                password,
            })
        }
        2 => {
            expect_flags(0)?;
            let ack_flags = c.u8()?;
            if ack_flags & 0xFE != 0 {
                return Err(MqttError::MalformedPacket("reserved CONNACK flags set"));
            }
            Packet::ConnAck(ConnAck {
                session_present: ack_flags & 1 != 0,
                return_code: c.u8()?,
            })
        }
        3 => {
            if flags & 0x06 != 0 {
                return Err(MqttError::UnsupportedType("PUBLISH with QoS > 0"));
            }
            if flags & 0x08 != 0 {
                return Err(MqttError::MalformedPacket("DUP set on QoS 0 PUBLISH"));
            }
            if flags & 0x01 != 0 {
                return Err(MqttError::UnsupportedType("retained PUBLISH"));
            }
            let topic = c.string()?;
            validate_topic(&topic).map_err(|_| MqttError::MalformedPacket("invalid topic name"))?;
            Packet::Publish(Publish {
                topic,
                payload: c.rest().to_vec(),
            })
        }
        8 => {
            expect_flags(0x02)?;
            let packet_id = c.u16()?;
            if packet_id == 0 {
                return Err(MqttError::MalformedPacket("packet identifier 0"));
            }
            let mut filters = Vec::new();
            while c.pos < c.buf.len() {
                // Filter syntax is the broker's call: it answers 0x80.
                let f = c.string()?;
                if c.u8()? > 2 {
                    return Err(MqttError::MalformedPacket("invalid requested QoS"));
                }
                filters.push(f);
            }
            if filters.is_empty() {
                return Err(MqttError::MalformedPacket("SUBSCRIBE without filters"));
            }
            Packet::Subscribe(Subscribe { packet_id, filters })
        }
        9 => {
            expect_flags(0)?;
            let packet_id = c.u16()?;
            Packet::SubAck(SubAck {
                packet_id,
                return_codes: c.rest().to_vec(),
            })
        }
        12 => {
            expect_flags(0)?;
            Packet::PingReq
        }
        13 => {
            expect_flags(0)?;
            Packet::PingResp
        }
        14 => {
            expect_flags(0)?;
            Packet::Disconnect
        }
        0 | 15 => return Err(MqttError::MalformedPacket("reserved packet type")),
        _ => return Err(MqttError::UnsupportedType("packet type outside the supported subset")),
    };
    c.finished()?;
    Ok(packet)
}

fn varint_len(buf: &[u8]) -> Result<usize, MqttError> {
    buf[1..]
        .iter()
        .take(4)
        .position(|b| b & 0x80 == 0)
        .map(|i| i + 1)
        .ok_or(MqttError::MalformedPacket("bad remaining length"))
}

/// Reads whole packets from a byte stream, enforcing a size limit.
pub(crate) struct PacketReader<R> {
    inner: R,
    buf: Vec<u8>,
    max_packet: usize,
}

impl<R: tokio::io::AsyncRead + Unpin> PacketReader<R> {
    pub(crate) fn new(inner: R, max_packet: usize) -> Self {
        PacketReader {
            inner,
            buf: Vec::with_capacity(1024),
            max_packet,
        }
    }

    /// Next packet, `Ok(None)` on a clean end of stream. Cancel-safe.
    pub(crate) async fn next(&mut self) -> Result<Option<Packet>, MqttError> {
        use tokio::io::AsyncReadExt;
        loop {
            if let Some(len) = packet_len(&self.buf)? {
                if len > self.max_packet {
                    return Err(MqttError::PacketTooLarge(len));
                }
                if self.buf.len() >= len {
                    let packet = decode_packet(&self.buf[..len]);
                    self.buf.drain(..len);
                    return packet.map(Some);
                }
            }
            let mut chunk = [0u8; 4096];
            let n = self.inner.read(&mut chunk).await?;
            if n == 0 {
                return if self.buf.is_empty() {
                    Ok(None)
                } else {
                    Err(MqttError::MalformedPacket("connection closed mid-packet"))
                };
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }
}
