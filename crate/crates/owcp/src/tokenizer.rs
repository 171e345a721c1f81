//! Frequency-ordered coding dictionary and flow-to-sequence encoding.
//!
//! A flow becomes one fixed-length token sequence
//!
//! ```text
//! CLS, np_0 .. np_{M*32-1}, SEP, pl_0 .. pl_{N-1}
//! ```
//!
//! The NP region holds the non-plaintext payload tokens: the first 64 payload
//! bytes of each of the first `M` payload-bearing packets, grouped two bytes
//! per token (an odd trailing byte is dropped). The PL region holds the first
//! `N` signed packet lengths, `+` for client→server and `-` for
//! server→client. Both regions are PAD-filled when the flow runs short and
//! truncated when it runs long, so the sequence length is always
//! `M*64/2 + N + 2`.
//!
//! Packets with no payload contribute nothing to the NP region (they do not
//! consume one of the `M` slots) but still count toward the PL region.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{Direction, FlowRecord};

/// Start-of-input marker.
pub const CLS: u32 = 0;
/// Separator between the NP and PL regions.
pub const SEP: u32 = 1;
/// Padding marker.
pub const PAD: u32 = 2;
/// Unregistered-token marker.
pub const UNK: u32 = 3;

const NUM_SPECIALS: usize = 4;
const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["CLS", "SEP", "PAD", "UNK"];
/// Payload bytes inspected per packet for the NP region.
pub const NP_WINDOW_BYTES: usize = 64;
/// NP tokens contributed by one packet window.
pub const NP_TOKENS_PER_PACKET: usize = NP_WINDOW_BYTES / 2;

/// Render a payload byte pair as its dictionary token, e.g. `1a2b`.
pub fn np_token(pair: [u8; 2]) -> String {
    hex::encode(pair)
}

/// Render a signed packet length as its dictionary token, e.g. `+328`.
pub fn pl_token(signed_len: i64) -> String {
    format!("{signed_len:+}")
}

/// Signed wire length of one packet.
pub fn signed_length(direction: Direction, length_bytes: u32) -> i64 {
    match direction {
        Direction::Outbound => i64::from(length_bytes),
        Direction::Inbound => -i64::from(length_bytes),
    }
}

/// The coding dictionary: four specials plus the most frequent payload-pair
/// and signed-length tokens of the training corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// NP window count the dictionary was built with.
    pub m: usize,
    /// PL length count the dictionary was built with.
    pub n: usize,
    np: HashMap<[u8; 2], u32>,
    pl: HashMap<i64, u32>,
    /// id → token string, specials first; defines the file layout.
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Total id count `V` (specials included).
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Encoded sequence length for this dictionary's `(M, N)`.
    pub fn seq_len(&self) -> usize {
        self.m * NP_TOKENS_PER_PACKET + self.n + 2
    }

    /// Dictionary id of a payload byte pair, `UNK` when unregistered.
    pub fn np_id(&self, pair: [u8; 2]) -> u32 {
        self.np.get(&pair).copied().unwrap_or(UNK)
    }

    /// Dictionary id of a signed packet length, `UNK` when unregistered.
    pub fn pl_id(&self, signed_len: i64) -> u32 {
        self.pl.get(&signed_len).copied().unwrap_or(UNK)
    }

    /// Token string for an id (specials by name).
    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Write the dictionary as line-delimited `token<TAB>id`, specials first.
    ///
    /// The layout is deterministic: building twice from the same corpus and
    /// configuration produces byte-identical files.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path.as_ref())?);
        for (id, token) in self.tokens.iter().enumerate() {
            writeln!(out, "{token}\t{id}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Load a dictionary written by [`Vocabulary::save`].
    ///
    /// `m` and `n` are not part of the file and must match the values the
    /// dictionary was built with.
    pub fn load(path: impl AsRef<Path>, m: usize, n: usize) -> Result<Self> {
        let reader = BufReader::new(File::open(path.as_ref())?);
        let mut tokens = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let text = line?;
            if text.is_empty() {
                continue;
            }
            let (token, id_str) = text.split_once('\t').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "expected token<TAB>id".to_string(),
            })?;
            let id: usize = id_str.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad id {id_str:?}"),
            })?;
            if id != tokens.len() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("ids must be dense and ascending; expected {}", tokens.len()),
                });
            }
            tokens.push(token.to_string());
        }
        if tokens.len() < NUM_SPECIALS
            || tokens[..NUM_SPECIALS] != SPECIAL_NAMES.map(String::from)
        {
            return Err(Error::Parse {
                line: 1,
                msg: "vocabulary must start with CLS, SEP, PAD, UNK".to_string(),
            });
        }
        Self::from_tokens(tokens, m, n)
    }

    fn from_tokens(tokens: Vec<String>, m: usize, n: usize) -> Result<Self> {
        let mut np = HashMap::new();
        let mut pl = HashMap::new();
        for (id, token) in tokens.iter().enumerate().skip(NUM_SPECIALS) {
            if token.starts_with('+') || token.starts_with('-') {
                let v: i64 = token.parse().map_err(|_| Error::Parse {
                    line: id + 1,
                    msg: format!("bad length token {token:?}"),
                })?;
                pl.insert(v, id as u32);
            } else {
                let bytes = hex::decode(token).map_err(|_| Error::Parse {
                    line: id + 1,
                    msg: format!("bad payload token {token:?}"),
                })?;
                if bytes.len() != 2 {
                    return Err(Error::Parse {
                        line: id + 1,
                        msg: format!("payload token must be two bytes, got {token:?}"),
                    });
                }
                np.insert([bytes[0], bytes[1]], id as u32);
            }
        }
        Ok(Self { m, n, np, pl, tokens })
    }
}

/// Iterate the NP byte-pair tokens of a flow: first 64 payload bytes of each
/// of the first `m` payload-bearing packets, two bytes per token.
fn np_pairs(flow: &FlowRecord, m: usize) -> impl Iterator<Item = [u8; 2]> + '_ {
    flow.packets
        .iter()
        .filter(|p| !p.payload.is_empty())
        .take(m)
        .flat_map(|p| {
            let window = &p.payload[..p.payload.len().min(NP_WINDOW_BYTES)];
            window.chunks_exact(2).map(|c| [c[0], c[1]])
        })
}

/// Iterate the first `n` signed packet lengths of a flow.
fn pl_lengths(flow: &FlowRecord, n: usize) -> impl Iterator<Item = i64> + '_ {
    flow.packets
        .iter()
        .take(n)
        .map(|p| signed_length(p.direction, p.length_bytes))
}

/// Build the coding dictionary from a corpus.
///
/// Counts NP and PL token occurrences over the regions that encoding will
/// actually read, keeps the `max_vocab - 4` most frequent (ties broken by
/// lexicographic token order), and assigns ids in descending frequency after
/// the four specials. Everything else maps to `UNK` at encode time.
pub fn build_vocab(
    flows: &[FlowRecord],
    max_vocab: usize,
    m: usize,
    n: usize,
) -> Result<Vocabulary> {
    if max_vocab < 5 {
        return Err(Error::Config(format!(
            "max_vocab must be at least 5 (4 specials + 1 token), got {max_vocab}"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for flow in flows {
        for pair in np_pairs(flow, m) {
            *counts.entry(np_token(pair)).or_insert(0) += 1;
        }
        for len in pl_lengths(flow, n) {
            *counts.entry(pl_token(len)).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab - NUM_SPECIALS);

    let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(tokens, m, n)
}

/// Which token regions to populate; ablations blank one region with PAD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionMask {
    pub np: bool,
    pub pl: bool,
}

impl Default for RegionMask {
    fn default() -> Self {
        Self { np: true, pl: true }
    }
}

/// One encoded flow: fixed-length id sequence plus region fill counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Non-PAD tokens in the NP region.
    pub np_len_used: usize,
    /// Non-PAD tokens in the PL region.
    pub pl_len_used: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True at positions that carry a real token (everything but PAD);
    /// the attention mask of the encoder.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD).collect()
    }
}

/// Encode one flow against a dictionary, with optional region blanking.
pub fn encode_flow_masked(
    flow: &FlowRecord,
    vocab: &Vocabulary,
    regions: RegionMask,
) -> TokenSequence {
    let np_slots = vocab.m * NP_TOKENS_PER_PACKET;
    let mut ids = Vec::with_capacity(vocab.seq_len());
    ids.push(CLS);

    let mut np_len_used = 0;
    if regions.np {
        for pair in np_pairs(flow, vocab.m).take(np_slots) {
            ids.push(vocab.np_id(pair));
            np_len_used += 1;
        }
    }
    ids.resize(1 + np_slots, PAD);
    ids.push(SEP);

    let mut pl_len_used = 0;
    if regions.pl {
        for len in pl_lengths(flow, vocab.n) {
            ids.push(vocab.pl_id(len));
            pl_len_used += 1;
        }
    }
    ids.resize(vocab.seq_len(), PAD);

    TokenSequence {
        ids,
        np_len_used,
        pl_len_used,
    }
}

/// Encode one flow against a dictionary (both regions populated).
pub fn encode_flow(flow: &FlowRecord, vocab: &Vocabulary) -> TokenSequence {
    encode_flow_masked(flow, vocab, RegionMask::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{BackgroundMeta, PacketView};
    use tempfile::NamedTempFile;

    fn flow_with(packets: Vec<PacketView>) -> FlowRecord {
        FlowRecord {
            flow_id: "f".to_string(),
            label: "a".to_string(),
            packets,
            background: BackgroundMeta {
                dst_ip: "1.2.3.4".to_string(),
                dst_port: 443,
                sni: None,
                cert_digest: None,
            },
            sanitized: false,
        }
    }

    fn packet(direction: Direction, len: u32, payload: Vec<u8>) -> PacketView {
        PacketView {
            direction,
            length_bytes: len,
            payload,
        }
    }

    #[test]
    fn np_pairs_match_reference_example() {
        let flow = flow_with(vec![packet(
            Direction::Outbound,
            100,
            vec![0x1a, 0x2b, 0x03, 0x45, 0x62, 0xaa],
        )]);
        let pairs: Vec<String> = np_pairs(&flow, 6).map(np_token).collect();
        assert_eq!(pairs, vec!["1a2b", "0345", "62aa"]);
    }

    #[test]
    fn pl_tokens_match_reference_example() {
        let flow = flow_with(vec![
            packet(Direction::Outbound, 328, vec![]),
            packet(Direction::Inbound, 1074, vec![]),
            packet(Direction::Inbound, 180, vec![]),
            packet(Direction::Outbound, 328, vec![]),
        ]);
        let tokens: Vec<String> = pl_lengths(&flow, 128).map(pl_token).collect();
        assert_eq!(tokens, vec!["+328", "-1074", "-180", "+328"]);
    }

    #[test]
    fn default_dims_give_length_322() {
        let flow = flow_with(vec![packet(Direction::Outbound, 40, vec![1, 2])]);
        let vocab = build_vocab(std::slice::from_ref(&flow), 100, 6, 128).unwrap();
        assert_eq!(vocab.seq_len(), 322);
        let seq = encode_flow(&flow, &vocab);
        assert_eq!(seq.len(), 322);
        assert_eq!(seq.ids[0], CLS);
        assert_eq!(seq.ids[1 + 6 * 32], SEP);
    }

    #[test]
    fn frequency_order_assigns_lower_ids() {
        // "1a2b" appears 10x, "0345" 5x.
        let mut packets = Vec::new();
        for _ in 0..10 {
            packets.push(packet(Direction::Outbound, 10, vec![0x1a, 0x2b]));
        }
        for _ in 0..5 {
            packets.push(packet(Direction::Outbound, 10, vec![0x03, 0x45]));
        }
        let flow = flow_with(packets);
        // m large enough to see all packets; n = 0 avoids length tokens.
        let vocab = build_vocab(std::slice::from_ref(&flow), 100, 32, 0).unwrap();
        assert!(vocab.np_id([0x1a, 0x2b]) < vocab.np_id([0x03, 0x45]));
    }

    #[test]
    fn ties_break_lexicographically() {
        let flow = flow_with(vec![
            packet(Direction::Outbound, 10, vec![0xbb, 0x01]),
            packet(Direction::Outbound, 10, vec![0xaa, 0x02]),
        ]);
        let vocab = build_vocab(std::slice::from_ref(&flow), 100, 8, 0).unwrap();
        assert!(vocab.np_id([0xaa, 0x02]) < vocab.np_id([0xbb, 0x01]));
    }

    #[test]
    fn capacity_keeps_only_top_tokens() {
        // 5 distinct tokens, room for 2.
        let flow = flow_with(vec![
            packet(Direction::Outbound, 10, vec![0x01, 0x01, 0x01, 0x01]),
            packet(Direction::Outbound, 10, vec![0x02, 0x02, 0x02, 0x02]),
            packet(Direction::Outbound, 10, vec![0x03, 0x03]),
            packet(Direction::Outbound, 10, vec![0x04, 0x04]),
            packet(Direction::Outbound, 10, vec![0x05, 0x05]),
        ]);
        let vocab = build_vocab(std::slice::from_ref(&flow), 6, 8, 0).unwrap();
        assert_eq!(vocab.size(), 6);
        assert_eq!(vocab.np_id([0x01, 0x01]), 4);
        assert_eq!(vocab.np_id([0x02, 0x02]), 5);
        assert_eq!(vocab.np_id([0x03, 0x03]), UNK);
    }

    #[test]
    fn max_vocab_below_specials_rejected() {
        let flow = flow_with(vec![packet(Direction::Outbound, 10, vec![1, 2])]);
        assert!(matches!(
            build_vocab(std::slice::from_ref(&flow), 4, 6, 128),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_payload_flow_pads_np_region() {
        let train = flow_with(vec![packet(Direction::Outbound, 10, vec![1, 2])]);
        let vocab = build_vocab(std::slice::from_ref(&train), 100, 6, 128).unwrap();
        let empty = flow_with(vec![packet(Direction::Outbound, 52, vec![])]);
        let seq = encode_flow(&empty, &vocab);
        assert_eq!(seq.len(), 322);
        assert_eq!(seq.np_len_used, 0);
        assert!(seq.ids[1..1 + 192].iter().all(|&id| id == PAD));
        assert_eq!(seq.pl_len_used, 1);
    }

    #[test]
    fn odd_trailing_byte_dropped() {
        let flow = flow_with(vec![packet(Direction::Outbound, 10, vec![1, 2, 3])]);
        let vocab = build_vocab(std::slice::from_ref(&flow), 100, 6, 0).unwrap();
        let seq = encode_flow(&flow, &vocab);
        assert_eq!(seq.np_len_used, 1);
    }

    #[test]
    fn payloadless_packets_do_not_consume_np_slots() {
        let flow = flow_with(vec![
            packet(Direction::Outbound, 52, vec![]),
            packet(Direction::Outbound, 100, vec![0x1a, 0x2b]),
        ]);
        // m = 1: the empty packet is skipped, the payload packet used.
        let vocab = build_vocab(std::slice::from_ref(&flow), 100, 1, 4).unwrap();
        let seq = encode_flow(&flow, &vocab);
        assert_eq!(seq.np_len_used, 1);
        assert_eq!(seq.ids[1], vocab.np_id([0x1a, 0x2b]));
        // Both packets still count for PL.
        assert_eq!(seq.pl_len_used, 2);
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let train = flow_with(vec![packet(Direction::Outbound, 10, vec![1, 2])]);
        let vocab = build_vocab(std::slice::from_ref(&train), 100, 6, 128).unwrap();
        let unseen = flow_with(vec![packet(Direction::Inbound, 999, vec![9, 9])]);
        let seq = encode_flow(&unseen, &vocab);
        assert_eq!(seq.ids[1], UNK);
        assert_eq!(seq.ids[1 + 192 + 1], UNK);
    }

    #[test]
    fn region_masking_blanks_with_pad() {
        let flow = flow_with(vec![packet(Direction::Outbound, 10, vec![1, 2, 3, 4])]);
        let vocab = build_vocab(std::slice::from_ref(&flow), 100, 2, 8).unwrap();
        let no_np = encode_flow_masked(&flow, &vocab, RegionMask { np: false, pl: true });
        assert_eq!(no_np.np_len_used, 0);
        assert!(no_np.ids[1..1 + 64].iter().all(|&id| id == PAD));
        assert_eq!(no_np.pl_len_used, 1);
        let no_pl = encode_flow_masked(&flow, &vocab, RegionMask { np: true, pl: false });
        assert_eq!(no_pl.pl_len_used, 0);
        assert_eq!(no_pl.np_len_used, 2);
        assert_eq!(no_np.len(), vocab.seq_len());
    }

    #[test]
    fn vocab_file_round_trips_and_is_stable() {
        let flow = flow_with(vec![
            packet(Direction::Outbound, 328, vec![0x1a, 0x2b, 0x03, 0x45]),
            packet(Direction::Inbound, 1074, vec![0xde, 0xad]),
        ]);
        let vocab = build_vocab(std::slice::from_ref(&flow), 100, 6, 128).unwrap();
        let f1 = NamedTempFile::new().unwrap();
        let f2 = NamedTempFile::new().unwrap();
        vocab.save(f1.path()).unwrap();
        let rebuilt = build_vocab(std::slice::from_ref(&flow), 100, 6, 128).unwrap();
        rebuilt.save(f2.path()).unwrap();
        let b1 = std::fs::read(f1.path()).unwrap();
        let b2 = std::fs::read(f2.path()).unwrap();
        assert_eq!(b1, b2);
        assert!(b1.starts_with(b"CLS\t0\nSEP\t1\nPAD\t2\nUNK\t3\n"));
        let loaded = Vocabulary::load(f1.path(), 6, 128).unwrap();
        assert_eq!(loaded, vocab);
    }
}
