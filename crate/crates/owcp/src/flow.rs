//! Canonical flow records, sanitization, and line-delimited file I/O.
//!
//! A [`FlowRecord`] is one bidirectional flow: the ordered packets with their
//! signed lengths and (possibly empty) post-handshake payload bytes, plus the
//! background metadata (destination tuple, SNI, certificate digest) that the
//! background-similarity filter consumes. Flow files are UTF-8 with one JSON
//! object per line; this is the ingestion boundary of the whole pipeline —
//! capture reassembly and pcap parsing happen upstream of it.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Packet direction within a bidirectional flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Client to server, rendered `+`.
    Outbound,
    /// Server to client, rendered `-`.
    Inbound,
}

impl Direction {
    /// Sign character used by the packet-length tokens and the wire format.
    pub fn sign(self) -> char {
        match self {
            Direction::Outbound => '+',
            Direction::Inbound => '-',
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.sign())
    }
}

/// One packet as seen by the feature pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketView {
    pub direction: Direction,
    /// Wire length in bytes, at least 1.
    pub length_bytes: u32,
    /// Post-handshake record bytes; may be empty (pure ACKs etc.).
    pub payload: Vec<u8>,
}

/// Non-feature background metadata kept for background-similarity filtering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundMeta {
    pub dst_ip: String,
    pub dst_port: u16,
    pub sni: Option<String>,
    pub cert_digest: Option<String>,
}

impl BackgroundMeta {
    /// The `{dst_ip, dst_port}` tuple as a single index key.
    pub fn dst_tuple(&self) -> String {
        format!("{}:{}", self.dst_ip, self.dst_port)
    }
}

/// One bidirectional flow with label and background metadata.
///
/// `sanitized` is transient provenance (set by [`sanitize`], never written to
/// disk) and is excluded from equality.
#[derive(Debug, Clone)]
pub struct FlowRecord {
    pub flow_id: String,
    /// App-class label; empty for unlabeled/open-world test flows.
    pub label: String,
    pub packets: Vec<PacketView>,
    pub background: BackgroundMeta,
    pub sanitized: bool,
}

impl PartialEq for FlowRecord {
    fn eq(&self, other: &Self) -> bool {
        self.flow_id == other.flow_id
            && self.label == other.label
            && self.packets == other.packets
            && self.background == other.background
    }
}

impl Eq for FlowRecord {}

impl FlowRecord {
    /// True when the label string is empty.
    pub fn is_unlabeled(&self) -> bool {
        self.label.is_empty()
    }

    /// Total payload bytes across all packets.
    pub fn payload_bytes(&self) -> usize {
        self.packets.iter().map(|p| p.payload.len()).sum()
    }
}

// Wire representation: one JSON object per line, flat keys.
#[derive(Serialize, Deserialize)]
struct WirePacket {
    dir: String,
    len: u32,
    payload_hex: String,
}

#[derive(Serialize, Deserialize)]
struct WireFlow {
    flow_id: String,
    label: String,
    packets: Vec<WirePacket>,
    dst_ip: String,
    dst_port: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sni: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cert_digest: Option<String>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Parse one wire-format line into a validated [`FlowRecord`].
pub fn flow_from_line(text: &str, line: usize) -> Result<FlowRecord> {
    let wire: WireFlow =
        serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))?;
    if wire.packets.is_empty() {
        return Err(parse_err(line, "flow must contain at least one packet"));
    }
    let mut packets = Vec::with_capacity(wire.packets.len());
    for (i, p) in wire.packets.iter().enumerate() {
        let direction = match p.dir.as_str() {
            "+" => Direction::Outbound,
            "-" => Direction::Inbound,
            other => {
                return Err(parse_err(
                    line,
                    format!("packet {i}: dir must be \"+\" or \"-\", got {other:?}"),
                ))
            }
        };
        if p.len == 0 {
            return Err(parse_err(line, format!("packet {i}: len must be >= 1")));
        }
        let payload = hex::decode(&p.payload_hex)
            .map_err(|e| parse_err(line, format!("packet {i}: bad payload_hex: {e}")))?;
        if payload.len() > p.len as usize {
            return Err(parse_err(
                line,
                format!(
                    "packet {i}: payload has {} bytes but len is {}",
                    payload.len(),
                    p.len
                ),
            ));
        }
        packets.push(PacketView {
            direction,
            length_bytes: p.len,
            payload,
        });
    }
    Ok(FlowRecord {
        flow_id: wire.flow_id,
        label: wire.label,
        packets,
        background: BackgroundMeta {
            dst_ip: wire.dst_ip,
            dst_port: wire.dst_port,
            sni: wire.sni,
            cert_digest: wire.cert_digest,
        },
        sanitized: false,
    })
}

/// Render one flow as its wire-format line (no trailing newline).
pub fn flow_to_line(flow: &FlowRecord) -> String {
    let wire = WireFlow {
        flow_id: flow.flow_id.clone(),
        label: flow.label.clone(),
        packets: flow
            .packets
            .iter()
            .map(|p| WirePacket {
                dir: p.direction.sign().to_string(),
                len: p.length_bytes,
                payload_hex: hex::encode(&p.payload),
            })
            .collect(),
        dst_ip: flow.background.dst_ip.clone(),
        dst_port: flow.background.dst_port,
        sni: flow.background.sni.clone(),
        cert_digest: flow.background.cert_digest.clone(),
    };
    serde_json::to_string(&wire).expect("flow serialization cannot fail")
}

/// Load a line-delimited flow file, preserving input order.
///
/// Rejects duplicate flow ids, naming both offending lines. Blank lines are
/// ignored; an empty file yields an empty list.
pub fn load_flows(path: impl AsRef<Path>) -> Result<Vec<FlowRecord>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut flows = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let flow = flow_from_line(&text, line_no)?;
        if let Some(&first) = seen.get(&flow.flow_id) {
            return Err(Error::DuplicateFlowId {
                id: flow.flow_id,
                first_line: first,
                second_line: line_no,
            });
        }
        seen.insert(flow.flow_id.clone(), line_no);
        flows.push(flow);
    }
    Ok(flows)
}

/// Write flows in the wire format, one object per line.
pub fn write_flows(flows: &[FlowRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    for flow in flows {
        writeln!(out, "{}", flow_to_line(flow))?;
    }
    out.flush()?;
    Ok(())
}

/// Strip a configured header prefix from every packet payload.
///
/// Payloads are expected to arrive as post-handshake record bytes already, so
/// the default prefix length is 0 and this is the identity. A non-zero prefix
/// shortens each payload by that many bytes (clamping to empty). The operation
/// is idempotent: an already-sanitized record passes through unchanged.
/// Background metadata is retained — it is non-feature input for the
/// background-similarity filter, never for the encoder.
pub fn sanitize(flow: &FlowRecord, strip_prefix: usize) -> FlowRecord {
    if flow.sanitized {
        return flow.clone();
    }
    let packets = flow
        .packets
        .iter()
        .map(|p| PacketView {
            direction: p.direction,
            length_bytes: p.length_bytes,
            payload: p.payload[p.payload.len().min(strip_prefix)..].to_vec(),
        })
        .collect();
    FlowRecord {
        flow_id: flow.flow_id.clone(),
        label: flow.label.clone(),
        packets,
        background: flow.background.clone(),
        sanitized: true,
    }
}

/// Corpus-level sanity report; informational only, never an error.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    /// Flow count per label, sorted by label.
    pub label_counts: std::collections::BTreeMap<String, usize>,
    /// Flows whose packets carry no payload bytes at all.
    pub zero_payload_flows: Vec<String>,
    /// Flows without an SNI.
    pub missing_sni: usize,
    /// Flows without a certificate digest.
    pub missing_cert: usize,
    /// Flows with an empty label.
    pub unlabeled: usize,
}

/// Summarize a corpus: per-label counts, zero-payload flows, missing
/// SNI/certificate metadata, unlabeled flows.
pub fn validate_corpus(flows: &[FlowRecord]) -> ValidationReport {
    let mut report = ValidationReport::default();
    for flow in flows {
        if flow.is_unlabeled() {
            report.unlabeled += 1;
        } else {
            *report.label_counts.entry(flow.label.clone()).or_insert(0) += 1;
        }
        if flow.payload_bytes() == 0 {
            report.zero_payload_flows.push(flow.flow_id.clone());
        }
        if flow.background.sni.is_none() {
            report.missing_sni += 1;
        }
        if flow.background.cert_digest.is_none() {
            report.missing_cert += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::NamedTempFile;

    fn sample_flow(id: &str, label: &str) -> FlowRecord {
        FlowRecord {
            flow_id: id.to_string(),
            label: label.to_string(),
            packets: vec![
                PacketView {
                    direction: Direction::Outbound,
                    length_bytes: 328,
                    payload: vec![0x1a, 0x2b, 0x03, 0x45, 0x62, 0xaa],
                },
                PacketView {
                    direction: Direction::Inbound,
                    length_bytes: 1074,
                    payload: vec![0xde, 0xad, 0xbe, 0xef],
                },
            ],
            background: BackgroundMeta {
                dst_ip: "1.2.3.4".to_string(),
                dst_port: 443,
                sni: Some("app.example".to_string()),
                cert_digest: None,
            },
            sanitized: false,
        }
    }

    #[test]
    fn load_preserves_order() {
        let flows = vec![
            sample_flow("f1", "a"),
            sample_flow("f2", "a"),
            sample_flow("f3", "b"),
        ];
        let file = NamedTempFile::new().unwrap();
        write_flows(&flows, file.path()).unwrap();
        let loaded = load_flows(file.path()).unwrap();
        assert_eq!(loaded, flows);
    }

    #[test]
    fn duplicate_id_names_both_lines() {
        let file = NamedTempFile::new().unwrap();
        let flows = vec![
            sample_flow("f1", "a"),
            sample_flow("dup", "a"),
            sample_flow("f3", "b"),
            sample_flow("f4", "b"),
            sample_flow("dup", "b"),
        ];
        write_flows(&flows, file.path()).unwrap();
        let err = load_flows(file.path()).unwrap_err();
        match err {
            Error::DuplicateFlowId {
                id,
                first_line,
                second_line,
            } => {
                assert_eq!(id, "dup");
                assert_eq!(first_line, 2);
                assert_eq!(second_line, 5);
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_list() {
        let file = NamedTempFile::new().unwrap();
        let loaded = load_flows(file.path()).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let file = NamedTempFile::new().unwrap();
        std::fs::write(
            file.path(),
            format!("{}\nnot json\n", flow_to_line(&sample_flow("f1", "a"))),
        )
        .unwrap();
        match load_flows(file.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn payload_longer_than_len_rejected() {
        let mut flow = sample_flow("f1", "a");
        flow.packets[0].length_bytes = 2;
        let line = flow_to_line(&flow);
        assert!(flow_from_line(&line, 1).is_err());
    }

    #[test]
    fn sanitize_zero_prefix_is_identity() {
        let flow = sample_flow("f1", "a");
        assert_eq!(sanitize(&flow, 0), flow);
    }

    #[test]
    fn sanitize_strips_prefix_bytes() {
        let mut flow = sample_flow("f1", "a");
        flow.packets[0].payload = (0u8..20).collect();
        flow.packets[1].payload = (0u8..16).collect();
        flow.packets.push(PacketView {
            direction: Direction::Outbound,
            length_bytes: 60,
            payload: (0u8..15).collect(),
        });
        let cleaned = sanitize(&flow, 14);
        assert_eq!(cleaned.packets[0].payload, (14u8..20).collect::<Vec<_>>());
        assert_eq!(cleaned.packets[1].payload, (14u8..16).collect::<Vec<_>>());
        assert_eq!(cleaned.packets[2].payload, vec![14u8]);
    }

    #[test]
    fn sanitize_clamps_short_payload() {
        let mut flow = sample_flow("f1", "a");
        flow.packets[0].payload = vec![1, 2, 3];
        let cleaned = sanitize(&flow, 14);
        assert!(cleaned.packets[0].payload.is_empty());
    }

    #[test]
    fn sanitize_is_idempotent() {
        let mut flow = sample_flow("f1", "a");
        flow.packets[0].payload = (0u8..40).collect();
        let once = sanitize(&flow, 14);
        let twice = sanitize(&once, 14);
        assert_eq!(once, twice);
        assert_eq!(once.packets[0].payload, twice.packets[0].payload);
    }

    #[test]
    fn validation_report_counts() {
        let mut flows = vec![
            sample_flow("f1", "a"),
            sample_flow("f2", "a"),
            sample_flow("f3", "b"),
            sample_flow("f4", ""),
        ];
        for p in &mut flows[2].packets {
            p.payload.clear();
        }
        let report = validate_corpus(&flows);
        assert_eq!(report.label_counts.get("a"), Some(&2));
        assert_eq!(report.label_counts.get("b"), Some(&1));
        assert_eq!(report.unlabeled, 1);
        assert_eq!(report.zero_payload_flows, vec!["f3".to_string()]);
        assert_eq!(report.missing_cert, 4);
        assert_eq!(report.missing_sni, 0);
    }
}
