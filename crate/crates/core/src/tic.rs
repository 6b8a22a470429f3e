//! Encoder and decoder for TIC frames, the serial "Télé-Information Client"
//! output of Linky meters.
//!
//! A frame is `STX (LF group CR)+ ETX`. Inside a group the fields are
//! separated by HT (standard mode) or SP (historic mode) and the last byte
//! before CR is a 6-bit checksum: `(sum(span) & 0x3F) + 0x20`.
//!
//! The checksum span differs between the two modes:
//!
//! * historic: `label SP value` (the separator in front of the checksum is
//!   not summed);
//! * standard: `label HT [timestamp HT] value HT` (the trailing separator
//!   is summed).
//!
//! See `docs/tic-format.md` for the byte-level layout.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STX: u8 = 0x02;
pub const ETX: u8 = 0x03;
pub const LF: u8 = 0x0A;
pub const CR: u8 = 0x0D;
pub const HT: u8 = 0x09;
pub const SP: u8 = 0x20;

pub const MAX_LABEL_LEN: usize = 8;
pub const MAX_VALUE_LEN: usize = 98;
pub const TIMESTAMP_LEN: usize = 13;
const MAX_DIGITS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TicMode {
    #[default]
    Standard,
    Historic,
}

impl TicMode {
    pub fn separator(self) -> u8 {
        match self {
            TicMode::Standard => HT,
            TicMode::Historic => SP,
        }
    }
}

impl fmt::Display for TicMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TicMode::Standard => f.write_str("standard"),
            TicMode::Historic => f.write_str("historic"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TicError {
    #[error("framing error at byte {offset}: {reason}")]
    Framing { offset: usize, reason: &'static str },
    #[error("checksum mismatch in group {label:?} at byte {offset}: expected {expected:#04x}, found {found:#04x}")]
    Checksum {
        label: String,
        offset: usize,
        expected: u8,
        found: u8,
    },
    #[error("invalid label {label:?} at byte {offset}")]
    BadLabel { label: String, offset: usize },
    #[error("invalid value for {label:?} at byte {offset}")]
    BadValue { label: String, offset: usize },
    #[error("invalid group {label:?}: {reason}")]
    InvalidGroup { label: String, reason: &'static str },
    #[error("frame has no groups")]
    EmptyFrame,
    #[error("missing label {0}")]
    MissingLabel(&'static str),
    #[error("non-numeric value {value:?} for {label}")]
    NonNumeric { label: String, value: String },
}

/// One information group: `label`, optional horodate, `value` and checksum.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TicGroup {
    pub label: String,
    pub timestamp: Option<String>,
    pub value: String,
    pub checksum: u8,
}

impl TicGroup {
    /// Builds a group with an unset checksum; [`TicFrame::new`] and the
    /// serializer fill it in.
    pub fn new(label: impl Into<String>, value: impl Into<String>) -> Self {
        TicGroup {
            label: label.into(),
            timestamp: None,
            value: value.into(),
            checksum: 0,
        }
    }

    pub fn with_timestamp(mut self, timestamp: impl Into<String>) -> Self {
        self.timestamp = Some(timestamp.into());
        self
    }

    /// The bytes covered by the checksum for `mode`.
    pub fn checksum_span(&self, mode: TicMode) -> Vec<u8> {
        let sep = mode.separator();
        let mut span = Vec::with_capacity(self.label.len() + self.value.len() + 20);
        span.extend_from_slice(self.label.as_bytes());
        span.push(sep);
        if let Some(ts) = &self.timestamp {
            span.extend_from_slice(ts.as_bytes());
            span.push(sep);
        }
        span.extend_from_slice(self.value.as_bytes());
        if mode == TicMode::Standard {
            span.push(sep);
        }
        span
    }

    pub fn expected_checksum(&self, mode: TicMode) -> u8 {
        compute_checksum(&self.checksum_span(mode))
    }

    fn validate(&self, mode: TicMode) -> Result<(), TicError> {
        let invalid = |reason| TicError::InvalidGroup {
            label: self.label.clone(),
            reason,
        };
        if !is_valid_label(self.label.as_bytes()) {
            return Err(invalid("label must be 1..8 chars of [A-Z0-9+-]"));
        }
        if self.value.len() > MAX_VALUE_LEN {
            return Err(invalid("value longer than 98 bytes"));
        }
        if !is_valid_value(self.value.as_bytes(), mode) {
            return Err(invalid("value contains a control or non-ASCII byte"));
        }
        if let Some(ts) = &self.timestamp {
            if mode == TicMode::Historic {
                return Err(invalid("historic groups carry no timestamp"));
            }
            if !is_valid_timestamp(ts.as_bytes()) {
                return Err(invalid("timestamp must be a season flag and 12 digits"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TicFrame {
    pub mode: TicMode,
    pub groups: Vec<TicGroup>,
}

impl TicFrame {
    /// Builds a frame and computes every group checksum.
    pub fn new(mode: TicMode, mut groups: Vec<TicGroup>) -> Self {
        for g in &mut groups {
            g.checksum = g.expected_checksum(mode);
        }
        TicFrame { mode, groups }
    }

    pub fn get(&self, label: &str) -> Option<&TicGroup> {
        self.groups.iter().find(|g| g.label == label)
    }

    pub fn value(&self, label: &str) -> Option<&str> {
        self.get(label).map(|g| g.value.as_str())
    }
}

/// Decoded meter registers carried by a frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeterReading {
    pub meter_id: String,
    pub apparent_power_va: u64,
    pub injected_apparent_power_va: u64,
    pub energy_consumed_wh: u64,
    pub energy_injected_wh: u64,
    pub tariff_label: String,
}

/// `(sum(span) & 0x3F) + 0x20`. Always in `[0x20, 0x5F]`.
pub fn compute_checksum(span: &[u8]) -> u8 {
    let sum = span.iter().fold(0u8, |acc, b| acc.wrapping_add(*b));
    (sum & 0x3F) + 0x20
}

fn is_valid_label(label: &[u8]) -> bool {
    !label.is_empty()
        && label.len() <= MAX_LABEL_LEN
        && label
            .iter()
            .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || *b == b'+' || *b == b'-')
}

fn is_valid_value(value: &[u8], mode: TicMode) -> bool {
    // The historic separator is SP, which stays legal inside a value: the
    // label never contains SP so the first separator is unambiguous.
    let _ = mode;
    value.iter().all(|b| (0x20..0x7F).contains(b))
}

fn is_valid_timestamp(ts: &[u8]) -> bool {
    ts.len() == TIMESTAMP_LEN
        && matches!(ts[0], b'E' | b'e' | b'H' | b'h' | b' ')
        && ts[1..].iter().all(u8::is_ascii_digit)
}

/// Parses exactly one frame from the start of `raw`.
///
/// Returns the frame and the bytes following ETX, which are left untouched.
pub fn parse_frame(raw: &[u8], mode: TicMode) -> Result<(TicFrame, &[u8]), TicError> {
    let framing = |offset, reason| TicError::Framing { offset, reason };
    if raw.first() != Some(&STX) {
        return Err(framing(0, "frame does not start with STX"));
    }
    let mut pos = 1;
    let mut groups = Vec::new();
    loop {
        match raw.get(pos) {
            None => return Err(framing(pos, "truncated frame, missing ETX")),
            Some(&ETX) => {
                pos += 1;
                break;
            }
            Some(&LF) => {}
            Some(_) => return Err(framing(pos, "expected LF or ETX")),
        }
        let start = pos + 1;
        let mut end = start;
        loop {
            match raw.get(end) {
                None => return Err(framing(end, "truncated group, missing CR")),
                Some(&CR) => break,
                Some(&STX) | Some(&ETX) | Some(&LF) => {
                    return Err(framing(end, "unexpected frame delimiter inside group"))
                }
                Some(_) => end += 1,
            }
        }
        groups.push(parse_group(&raw[start..end], start, mode)?);
        pos = end + 1;
    }
    if groups.is_empty() {
        return Err(TicError::EmptyFrame);
    }
    Ok((TicFrame { mode, groups }, &raw[pos..]))
}

fn parse_group(body: &[u8], offset: usize, mode: TicMode) -> Result<TicGroup, TicError> {
    let sep = mode.separator();
    // body = fields SEP checksum
    if body.len() < 4 {
        return Err(TicError::Framing {
            offset,
            reason: "group too short",
        });
    }
    let checksum = body[body.len() - 1];
    if body[body.len() - 2] != sep {
        return Err(TicError::Framing {
            offset: offset + body.len() - 2,
            reason: "missing separator before checksum",
        });
    }
    let fields = &body[..body.len() - 2];
    let label_end = fields.iter().position(|b| *b == sep).ok_or(TicError::Framing {
        offset,
        reason: "missing separator after label",
    })?;
    let label_bytes = &fields[..label_end];
    let rest = &fields[label_end + 1..];
    let (ts_bytes, value_bytes) = match mode {
        TicMode::Historic => (None, rest),
        TicMode::Standard => match rest.iter().position(|b| *b == sep) {
            Some(i) => (Some(&rest[..i]), &rest[i + 1..]),
            None => (None, rest),
        },
    };

    let mut span = Vec::with_capacity(body.len());
    span.extend_from_slice(fields);
    if mode == TicMode::Standard {
        span.push(sep);
    }
    let label_lossy = String::from_utf8_lossy(label_bytes).into_owned();
    let expected = compute_checksum(&span);
    if expected != checksum {
        return Err(TicError::Checksum {
            label: label_lossy,
            offset: offset + body.len() - 1,
            expected,
            found: checksum,
        });
    }
    if !is_valid_label(label_bytes) {
        return Err(TicError::BadLabel {
            label: label_lossy,
            offset,
        });
    }
    let value_offset = offset + fields.len() - value_bytes.len();
    if value_bytes.len() > MAX_VALUE_LEN || !is_valid_value(value_bytes, mode) {
        return Err(TicError::BadValue {
            label: label_lossy,
            offset: value_offset,
        });
    }
    let timestamp = match ts_bytes {
        Some(ts) if is_valid_timestamp(ts) => Some(ascii(ts)),
        Some(_) => {
            return Err(TicError::BadValue {
                label: label_lossy,
                offset: offset + label_end + 1,
            })
        }
        None => None,
    };
    Ok(TicGroup {
        label: ascii(label_bytes),
        timestamp,
        value: ascii(value_bytes),
        checksum,
    })
}

fn ascii(bytes: &[u8]) -> String {
    // Callers only pass validated printable ASCII.
    bytes.iter().map(|b| *b as char).collect()
}

/// Encodes a frame, recomputing every checksum.
pub fn serialize_frame(frame: &TicFrame) -> Result<Vec<u8>, TicError> {
    if frame.groups.is_empty() {
        return Err(TicError::EmptyFrame);
    }
    let sep = frame.mode.separator();
    let mut out = Vec::with_capacity(frame.groups.len() * 24 + 2);
    out.push(STX);
    for g in &frame.groups {
        g.validate(frame.mode)?;
        out.push(LF);
        out.extend_from_slice(g.label.as_bytes());
        out.push(sep);
        if let Some(ts) = &g.timestamp {
            out.extend_from_slice(ts.as_bytes());
            out.push(sep);
        }
        out.extend_from_slice(g.value.as_bytes());
        out.push(sep);
        out.push(g.expected_checksum(frame.mode));
        out.push(CR);
    }
    out.push(ETX);
    Ok(out)
}

fn parse_number(label: &str, value: &str) -> Result<u64, TicError> {
    let non_numeric = || TicError::NonNumeric {
        label: label.to_string(),
        value: value.to_string(),
    };
    if value.is_empty() || value.len() > MAX_DIGITS || !value.bytes().all(|b| b.is_ascii_digit()) {
        return Err(non_numeric());
    }
    value.parse().map_err(|_| non_numeric())
}

fn optional_number(frame: &TicFrame, label: &str) -> Result<Option<u64>, TicError> {
    frame.value(label).map(|v| parse_number(label, v)).transpose()
}

/// Maps the supported label subset onto a [`MeterReading`]. Unknown labels
/// are ignored.
pub fn extract_reading(frame: &TicFrame) -> Result<MeterReading, TicError> {
    match frame.mode {
        TicMode::Standard => {
            let meter_id = frame.value("ADSC").ok_or(TicError::MissingLabel("ADSC"))?;
            let consumed = optional_number(frame, "EAST")?.ok_or(TicError::MissingLabel("EAST"))?;
            let tariff = frame.value("LTARF").or_else(|| frame.value("NGTF")).unwrap_or("");
            Ok(MeterReading {
                meter_id: meter_id.to_string(),
                apparent_power_va: optional_number(frame, "SINSTS")?.unwrap_or(0),
                injected_apparent_power_va: optional_number(frame, "SINSTI")?.unwrap_or(0),
                energy_consumed_wh: consumed,
                energy_injected_wh: optional_number(frame, "EAIT")?.unwrap_or(0),
                tariff_label: tariff.trim().to_string(),
            })
        }
        TicMode::Historic => {
            let meter_id = frame.value("ADCO").ok_or(TicError::MissingLabel("ADCO"))?;
            let base = optional_number(frame, "BASE")?;
            let hchc = optional_number(frame, "HCHC")?;
            let hchp = optional_number(frame, "HCHP")?;
            let consumed = match (base, hchc, hchp) {
                (Some(b), _, _) => b,
                (None, None, None) => return Err(TicError::MissingLabel("BASE")),
                (None, c, p) => c.unwrap_or(0) + p.unwrap_or(0),
            };
            Ok(MeterReading {
                meter_id: meter_id.to_string(),
                apparent_power_va: optional_number(frame, "PAPP")?.unwrap_or(0),
                injected_apparent_power_va: 0,
                energy_consumed_wh: consumed,
                energy_injected_wh: 0,
                tariff_label: frame.value("PTEC").unwrap_or("").trim_end_matches('.').to_string(),
            })
        }
    }
}

/// Splits a continuous TIC byte stream into frames.
///
/// Bytes before the first STX are discarded, as a meter line joined
/// mid-frame would produce.
#[derive(Debug, Default)]
pub struct FrameStream {
    buf: Vec<u8>,
}

impl FrameStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Returns the next complete frame (or its decoding error), `None` when
    /// more bytes are needed.
    pub fn next_frame(&mut self, mode: TicMode) -> Option<Result<TicFrame, TicError>> {
        let start = self.buf.iter().position(|b| *b == STX)?;
        let end = start + self.buf[start..].iter().position(|b| *b == ETX)?;
        let result = parse_frame(&self.buf[start..=end], mode).map(|(f, _)| f);
        self.buf.drain(..=end);
        Some(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(mode: TicMode) -> TicFrame {
        let id = match mode {
            TicMode::Standard => "ADSC",
            TicMode::Historic => "ADCO",
        };
        let energy = match mode {
            TicMode::Standard => "EAST",
            TicMode::Historic => "BASE",
        };
        TicFrame::new(
            mode,
            vec![TicGroup::new(id, "031762120032"), TicGroup::new(energy, "000012345")],
        )
    }

    #[test]
    fn checksum_single_space() {
        assert_eq!(compute_checksum(&[0x20]), 0x40);
    }

    #[test]
    fn checksum_of_standard_east_group() {
        // Independent byte sum: sum(b"EAST\t000012345\t") & 0x3F + 0x20.
        assert_eq!(compute_checksum(b"EAST\t000012345\t"), 0x5E);
        let g = TicGroup::new("EAST", "000012345");
        assert_eq!(g.expected_checksum(TicMode::Standard), 0x5E);
    }

    #[test]
    fn checksum_of_historic_group_excludes_trailing_separator() {
        assert_eq!(compute_checksum(b"ADCO 031762120032"), 0x32);
        let g = TicGroup::new("ADCO", "031762120032");
        assert_eq!(g.expected_checksum(TicMode::Historic), 0x32);
    }

    #[test]
    fn serialized_layout_starts_with_stx_lf() {
        let f = TicFrame::new(TicMode::Standard, vec![TicGroup::new("EAST", "000000000")]);
        let bytes = serialize_frame(&f).unwrap();
        assert_eq!(&bytes[..2], &[STX, LF]);
        assert_eq!(*bytes.last().unwrap(), ETX);
        assert_eq!(&bytes[2..6], b"EAST");
    }

    #[test]
    fn round_trip_both_modes() {
        for mode in [TicMode::Standard, TicMode::Historic] {
            let f = sample(mode);
            let bytes = serialize_frame(&f).unwrap();
            let (back, rest) = parse_frame(&bytes, mode).unwrap();
            assert_eq!(back, f);
            assert!(rest.is_empty());
        }
    }

    #[test]
    fn round_trip_with_timestamp() {
        let f = TicFrame::new(
            TicMode::Standard,
            vec![
                TicGroup::new("ADSC", "041876097467"),
                TicGroup::new("DATE", "").with_timestamp("H250101120000"),
                TicGroup::new("SMAXSN", "02210").with_timestamp("E240715113045"),
            ],
        );
        let bytes = serialize_frame(&f).unwrap();
        assert_eq!(parse_frame(&bytes, TicMode::Standard).unwrap().0, f);
    }

    #[test]
    fn flipped_checksum_names_group() {
        let f = sample(TicMode::Standard);
        let mut bytes = serialize_frame(&f).unwrap();
        let cr = bytes.iter().rposition(|b| *b == CR).unwrap();
        bytes[cr - 1] ^= 0x01;
        match parse_frame(&bytes, TicMode::Standard) {
            Err(TicError::Checksum { label, .. }) => assert_eq!(label, "EAST"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn missing_stx_is_framing_error() {
        let bytes = serialize_frame(&sample(TicMode::Standard)).unwrap();
        assert!(matches!(
            parse_frame(&bytes[1..], TicMode::Standard),
            Err(TicError::Framing { offset: 0, .. })
        ));
    }

    #[test]
    fn missing_etx_is_framing_error() {
        let bytes = serialize_frame(&sample(TicMode::Standard)).unwrap();
        assert!(matches!(
            parse_frame(&bytes[..bytes.len() - 1], TicMode::Standard),
            Err(TicError::Framing { .. })
        ));
    }

    #[test]
    fn trailing_bytes_are_remainder() {
        let mut bytes = serialize_frame(&sample(TicMode::Historic)).unwrap();
        bytes.extend_from_slice(&[STX, LF, b'X']);
        let (_, rest) = parse_frame(&bytes, TicMode::Historic).unwrap();
        assert_eq!(rest, &[STX, LF, b'X']);
    }

    #[test]
    fn bad_label_rejected_by_serializer() {
        let f = TicFrame::new(TicMode::Standard, vec![TicGroup::new("bad!", "1")]);
        assert!(matches!(serialize_frame(&f), Err(TicError::InvalidGroup { .. })));
    }

    #[test]
    fn bad_label_on_wire_with_valid_checksum() {
        let sep = HT;
        let mut body = b"ea".to_vec();
        body.push(sep);
        body.extend_from_slice(b"1");
        body.push(sep);
        let chk = compute_checksum(&body);
        let mut raw = vec![STX, LF];
        raw.extend_from_slice(&body);
        raw.push(chk);
        raw.extend_from_slice(&[CR, ETX]);
        assert!(matches!(
            parse_frame(&raw, TicMode::Standard),
            Err(TicError::BadLabel { .. })
        ));
    }

    #[test]
    fn control_byte_in_value_rejected() {
        // Historic separator leaves room for a control byte inside the value.
        let body = b"BASE 00\x0112".to_vec();
        let chk = compute_checksum(&body);
        let mut raw = vec![STX, LF];
        raw.extend_from_slice(&body);
        raw.extend_from_slice(&[SP, chk, CR, ETX]);
        assert!(matches!(
            parse_frame(&raw, TicMode::Historic),
            Err(TicError::BadValue { .. })
        ));
    }

    #[test]
    fn timestamp_rejected_in_historic_mode() {
        let f = TicFrame::new(
            TicMode::Historic,
            vec![TicGroup::new("DATE", "").with_timestamp("H250101120000")],
        );
        assert!(serialize_frame(&f).is_err());
    }

    #[test]
    fn extract_standard_reading() {
        let f = TicFrame::new(
            TicMode::Standard,
            vec![
                TicGroup::new("ADSC", "041876097467"),
                TicGroup::new("EAST", "000012345"),
                TicGroup::new("SINSTS", "00750"),
                TicGroup::new("LTARF", "HP"),
                TicGroup::new("VTIC", "02"),
            ],
        );
        let r = extract_reading(&f).unwrap();
        assert_eq!(r.energy_consumed_wh, 12345);
        assert_eq!(r.apparent_power_va, 750);
        assert_eq!(r.energy_injected_wh, 0);
        assert_eq!(r.injected_apparent_power_va, 0);
        assert_eq!(r.tariff_label, "HP");
    }

    #[test]
    fn extract_falls_back_to_ngtf() {
        let f = TicFrame::new(
            TicMode::Standard,
            vec![
                TicGroup::new("ADSC", "1"),
                TicGroup::new("EAST", "5"),
                TicGroup::new("NGTF", "     BASE       "),
            ],
        );
        assert_eq!(extract_reading(&f).unwrap().tariff_label, "BASE");
    }

    #[test]
    fn extract_missing_east() {
        let f = TicFrame::new(TicMode::Standard, vec![TicGroup::new("ADSC", "1")]);
        assert_eq!(extract_reading(&f), Err(TicError::MissingLabel("EAST")));
    }

    #[test]
    fn extract_non_numeric_and_too_long() {
        for v in ["12a", "1234567890123", ""] {
            let f = TicFrame::new(
                TicMode::Standard,
                vec![TicGroup::new("ADSC", "1"), TicGroup::new("EAST", v)],
            );
            assert!(matches!(extract_reading(&f), Err(TicError::NonNumeric { .. })), "{v}");
        }
    }

    #[test]
    fn extract_historic_hchc_hchp() {
        let f = TicFrame::new(
            TicMode::Historic,
            vec![
                TicGroup::new("ADCO", "031762120032"),
                TicGroup::new("HCHC", "000001000"),
                TicGroup::new("HCHP", "000002000"),
                TicGroup::new("PTEC", "HP.."),
                TicGroup::new("PAPP", "00420"),
            ],
        );
        let r = extract_reading(&f).unwrap();
        assert_eq!(r.energy_consumed_wh, 3000);
        assert_eq!(r.apparent_power_va, 420);
        assert_eq!(r.tariff_label, "HP");
    }

    #[test]
    fn frame_stream_splits_and_skips_garbage() {
        let a = serialize_frame(&sample(TicMode::Standard)).unwrap();
        let mut s = FrameStream::new();
        s.push(b"\x0d\x03junk");
        s.push(&a[..5]);
        assert!(s.next_frame(TicMode::Standard).is_none());
        s.push(&a[5..]);
        s.push(&a);
        assert!(s.next_frame(TicMode::Standard).unwrap().is_ok());
        assert!(s.next_frame(TicMode::Standard).unwrap().is_ok());
        assert!(s.next_frame(TicMode::Standard).is_none());
    }
}
