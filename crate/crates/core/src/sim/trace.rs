use std::fmt::Write as _;
use std::io;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EventKind, EventPayload, SimEvent, SimTime};

/// One processed event, in pop order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: EventPayload,
}

impl From<&SimEvent> for TraceRecord {
    fn from(ev: &SimEvent) -> Self {
        TraceRecord { time: ev.timestamp, seq: ev.seq, kind: ev.kind, payload: ev.payload.clone() }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("missing `#hash=` footer")]
    MissingFooter,
    #[error("hash mismatch: footer {expected}, content {actual}")]
    HashMismatch { expected: String, actual: String },
}

/// Append-only log of processed events.
///
/// The export format is one `timestamp_ns,seq,kind,payload_json` line per
/// record followed by `#hash=<sha256 hex of all preceding bytes>`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventTrace {
    records: Vec<TraceRecord>,
}

impl EventTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    /// Appends every record of `other`, which must continue this trace's order.
    pub fn append(&mut self, other: EventTrace) {
        debug_assert!(match (self.records.last(), other.records.first()) {
            (Some(a), Some(b)) => (a.time, a.seq) < (b.time, b.seq),
            _ => true,
        });
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn body(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48);
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.time.as_nanos(), r.seq, r.kind, r.payload.to_json());
        }
        out
    }

    /// Hex SHA-256 of the export body (everything before the footer).
    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }

    pub fn to_export_string(&self) -> String {
        let mut body = self.body();
        let hash = hex::encode(Sha256::digest(body.as_bytes()));
        body.push_str("#hash=");
        body.push_str(&hash);
        body.push('\n');
        body
    }

    pub fn write_export<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(self.to_export_string().as_bytes())
    }

    /// Parses an exported trace, verifying the hash footer.
    pub fn parse_export(text: &str) -> Result<EventTrace, TraceError> {
        let footer_at = text.rfind("#hash=").ok_or(TraceError::MissingFooter)?;
        let (body, footer) = text.split_at(footer_at);
        let expected = footer["#hash=".len()..].trim().to_string();
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if expected != actual {
            return Err(TraceError::HashMismatch { expected, actual });
        }
        let mut trace = EventTrace::new();
        for (idx, line) in body.lines().enumerate() {
            let line_no = idx + 1;
            let bad = |msg: String| TraceError::Malformed { line: line_no, msg };
            let mut parts = line.splitn(4, ',');
            let (Some(t), Some(seq), Some(kind), Some(json)) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected 4 fields".into()));
            };
            trace.push(TraceRecord {
                time: SimTime(t.parse().map_err(|e| bad(format!("timestamp: {e}")))?),
                seq: seq.parse().map_err(|e| bad(format!("seq: {e}")))?,
                kind: kind.parse().map_err(bad)?,
                payload: serde_json::from_str(json).map_err(|e| bad(format!("payload: {e}")))?,
            });
        }
        Ok(trace)
    }
}

impl<'a> IntoIterator for &'a EventTrace {
    type Item = &'a TraceRecord;
    type IntoIter = std::slice::Iter<'a, TraceRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EventTrace {
        let mut t = EventTrace::new();
        t.push(TraceRecord {
            time: SimTime(0),
            seq: 0,
            kind: EventKind::RequestArrival,
            payload: EventPayload::default().request(1).tokens(32),
        });
        t.push(TraceRecord {
            time: SimTime(1500),
            seq: 1,
            kind: EventKind::RequestComplete,
            payload: EventPayload::default().request(1),
        });
        t
    }

    #[test]
    fn export_format() {
        let text = sample().to_export_string();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], r#"0,0,REQUEST_ARRIVAL,{"request":1,"tokens":32}"#);
        assert_eq!(lines[1], r#"1500,1,REQUEST_COMPLETE,{"request":1}"#);
        assert_eq!(lines[2], format!("#hash={}", sample().hash_hex()));
    }

    #[test]
    fn parse_round_trip_and_tamper_detection() {
        let text = sample().to_export_string();
        assert_eq!(EventTrace::parse_export(&text).unwrap(), sample());
        let tampered = text.replacen("1500", "1501", 1);
        assert!(matches!(EventTrace::parse_export(&tampered), Err(TraceError::HashMismatch { .. })));
        assert!(matches!(EventTrace::parse_export("0,0,REQUEST_ARRIVAL,{}\n"), Err(TraceError::MissingFooter)));
    }

    #[test]
    fn empty_trace_hash_is_sha256_of_empty() {
        assert_eq!(EventTrace::new().hash_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
