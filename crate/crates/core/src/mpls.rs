//! MPLS label-stack entries and the ICMP multi-part extension structure that
//! carries them in time-exceeded replies (RFC 4884 / RFC 4950).
//!
//! ```text
//!  0                   1                   2                   3
//!  0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |Version|      (Reserved)       |           Checksum            |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |             Length            |   Class-Num   |   C-Type      |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                Label                  | TC  |S|       TTL     |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! ```

use alloc::vec::Vec;

pub const EXTENSION_VERSION: u8 = 2;
pub const MPLS_STACK_CLASS: u8 = 1;
pub const MPLS_STACK_CTYPE: u8 = 1;

const EXT_HEADER_LEN: usize = 4;
const OBJ_HEADER_LEN: usize = 4;

pub const MAX_LABEL: u32 = (1 << 20) - 1;
pub const MAX_TC: u8 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LabelError {
    #[error("label {0} does not fit in 20 bits")]
    Label(u32),
    #[error("traffic class {0} does not fit in 3 bits")]
    TrafficClass(u8),
}

/// One label-stack entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "RawEntry", into = "RawEntry"))]
pub struct MplsLabelEntry {
    label: u32,
    tc: u8,
    bottom_of_stack: bool,
    ttl: u8,
}

impl MplsLabelEntry {
    pub fn new(label: u32, tc: u8, bottom_of_stack: bool, ttl: u8) -> Result<Self, LabelError> {
        if label > MAX_LABEL {
            return Err(LabelError::Label(label));
        }
        if tc > MAX_TC {
            return Err(LabelError::TrafficClass(tc));
        }
        Ok(Self {
            label,
            tc,
            bottom_of_stack,
            ttl,
        })
    }

    pub fn label(&self) -> u32 {
        self.label
    }

    pub fn tc(&self) -> u8 {
        self.tc
    }

    pub fn bottom_of_stack(&self) -> bool {
        self.bottom_of_stack
    }

    pub fn ttl(&self) -> u8 {
        self.ttl
    }

    /// Returns a copy with the bottom-of-stack bit replaced.
    pub fn with_bottom_of_stack(self, bottom_of_stack: bool) -> Self {
        Self {
            bottom_of_stack,
            ..self
        }
    }

    /// Big-endian `(label << 12) | (tc << 9) | (bos << 8) | ttl`.
    pub fn encode(&self) -> [u8; 4] {
        let word = (self.label << 12)
            | (u32::from(self.tc) << 9)
            | (u32::from(self.bottom_of_stack) << 8)
            | u32::from(self.ttl);
        word.to_be_bytes()
    }

    /// Every 32-bit word is a valid entry, so decoding cannot fail.
    pub fn decode(bytes: [u8; 4]) -> Self {
        let word = u32::from_be_bytes(bytes);
        Self {
            label: word >> 12,
            tc: ((word >> 9) & 0x7) as u8,
            bottom_of_stack: (word >> 8) & 1 == 1,
            ttl: (word & 0xff) as u8,
        }
    }
}

/// Free-standing form of [`MplsLabelEntry::encode`].
pub fn encode_mpls_entry(e: &MplsLabelEntry) -> [u8; 4] {
    e.encode()
}

#[cfg(feature = "serde")]
#[derive(serde::Serialize, serde::Deserialize)]
struct RawEntry {
    label: u32,
    tc: u8,
    bos: bool,
    ttl: u8,
}

#[cfg(feature = "serde")]
impl TryFrom<RawEntry> for MplsLabelEntry {
    type Error = LabelError;

    fn try_from(raw: RawEntry) -> Result<Self, Self::Error> {
        MplsLabelEntry::new(raw.label, raw.tc, raw.bos, raw.ttl)
    }
}

#[cfg(feature = "serde")]
impl From<MplsLabelEntry> for RawEntry {
    fn from(e: MplsLabelEntry) -> Self {
        RawEntry {
            label: e.label,
            tc: e.tc,
            bos: e.bottom_of_stack,
            ttl: e.ttl,
        }
    }
}

/// Why an extension region could not be trusted. The hop keeps an empty
/// label list; the trace itself continues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MalformedExtension {
    #[error("extension truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("unsupported extension version {0}")]
    Version(u8),
    #[error("extension checksum mismatch")]
    Checksum,
    #[error("MPLS object payload of {0} bytes is not a whole number of entries")]
    ObjectLength(usize),
    #[error("bottom-of-stack bit not set on exactly the last entry")]
    BottomOfStack,
}

/// RFC 1071 one's-complement sum, folded and inverted.
pub fn internet_checksum(data: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u32::from(u16::from_be_bytes([c[0], c[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(*last) << 8;
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Parses the extension region of a time-exceeded message and returns every
/// MPLS label entry in stack order. Objects of other classes are skipped.
pub fn parse_icmp_extensions(raw: &[u8]) -> Result<Vec<MplsLabelEntry>, MalformedExtension> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    if raw.len() < EXT_HEADER_LEN {
        return Err(MalformedExtension::Truncated { offset: 0 });
    }
    let version = raw[0] >> 4;
    if version != EXTENSION_VERSION {
        return Err(MalformedExtension::Version(version));
    }
    let checksum = u16::from_be_bytes([raw[2], raw[3]]);
    // a zero checksum means the sender did not compute one
    if checksum != 0 && internet_checksum(raw) != 0 {
        return Err(MalformedExtension::Checksum);
    }

    let mut labels = Vec::new();
    let mut offset = EXT_HEADER_LEN;
    while offset < raw.len() {
        if raw.len() - offset < OBJ_HEADER_LEN {
            return Err(MalformedExtension::Truncated { offset });
        }
        let obj_len = usize::from(u16::from_be_bytes([raw[offset], raw[offset + 1]]));
        if obj_len < OBJ_HEADER_LEN || offset + obj_len > raw.len() {
            return Err(MalformedExtension::Truncated { offset });
        }
        let class = raw[offset + 2];
        let ctype = raw[offset + 3];
        if class == MPLS_STACK_CLASS && ctype == MPLS_STACK_CTYPE {
            let payload = &raw[offset + OBJ_HEADER_LEN..offset + obj_len];
            if !payload.len().is_multiple_of(4) {
                return Err(MalformedExtension::ObjectLength(payload.len()));
            }
            labels.extend(
                payload
                    .chunks_exact(4)
                    .map(|c| MplsLabelEntry::decode([c[0], c[1], c[2], c[3]])),
            );
        }
        offset += obj_len;
    }

    if let Some((last, rest)) = labels.split_last() {
        if !last.bottom_of_stack || rest.iter().any(|e| e.bottom_of_stack) {
            return Err(MalformedExtension::BottomOfStack);
        }
    }
    Ok(labels)
}

/// Builds a version-2 extension region holding one MPLS label-stack object,
/// with the checksum filled in. An empty stack yields an empty region.
pub fn build_icmp_extensions(stack: &[MplsLabelEntry]) -> Vec<u8> {
    if stack.is_empty() {
        return Vec::new();
    }
    let obj_len = OBJ_HEADER_LEN + 4 * stack.len();
    let mut out = Vec::with_capacity(EXT_HEADER_LEN + obj_len);
    out.extend_from_slice(&[EXTENSION_VERSION << 4, 0, 0, 0]);
    out.extend_from_slice(&(obj_len as u16).to_be_bytes());
    out.push(MPLS_STACK_CLASS);
    out.push(MPLS_STACK_CTYPE);
    for e in stack {
        out.extend_from_slice(&e.encode());
    }
    let sum = internet_checksum(&out);
    out[2..4].copy_from_slice(&sum.to_be_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(label: u32, tc: u8, bos: bool, ttl: u8) -> MplsLabelEntry {
        MplsLabelEntry::new(label, tc, bos, ttl).unwrap()
    }

    #[test]
    fn fixed_vectors() {
        assert_eq!(entry(0, 0, false, 0).encode(), [0, 0, 0, 0]);
        assert_eq!(entry(0xFFFFF, 7, true, 255).encode(), [0xff; 4]);
        // (16 << 12) | (1 << 8) | 1
        assert_eq!(entry(16, 0, true, 1).encode(), [0x00, 0x01, 0x01, 0x01]);
    }

    #[test]
    fn rejects_out_of_range_fields() {
        assert_eq!(
            MplsLabelEntry::new(1 << 20, 0, false, 0),
            Err(LabelError::Label(1 << 20))
        );
        assert_eq!(
            MplsLabelEntry::new(0, 8, false, 0),
            Err(LabelError::TrafficClass(8))
        );
    }

    #[test]
    fn empty_region_has_no_labels() {
        assert_eq!(parse_icmp_extensions(&[]), Ok(Vec::new()));
    }

    #[test]
    fn single_entry_object() {
        // header, zero checksum, object(len 8, class 1, ctype 1), entry 00 01 01 01
        let raw = [0x20, 0, 0, 0, 0, 8, 1, 1, 0x00, 0x01, 0x01, 0x01];
        assert_eq!(parse_icmp_extensions(&raw), Ok(alloc::vec![entry(16, 0, true, 1)]));
    }

    #[test]
    fn version_guard() {
        let raw = [0x30, 0, 0, 0, 0, 8, 1, 1, 0x00, 0x01, 0x01, 0x01];
        assert_eq!(parse_icmp_extensions(&raw), Err(MalformedExtension::Version(3)));
    }

    #[test]
    fn checksum_verified_when_present() {
        let mut raw = build_icmp_extensions(&[entry(16, 0, true, 1)]);
        assert_ne!(&raw[2..4], &[0, 0]);
        assert!(parse_icmp_extensions(&raw).is_ok());
        raw[9] ^= 0x10;
        assert_eq!(parse_icmp_extensions(&raw), Err(MalformedExtension::Checksum));
    }

    #[test]
    fn truncated_object() {
        let raw = [0x20, 0, 0, 0, 0, 12, 1, 1, 0x00, 0x01, 0x01, 0x01];
        assert_eq!(
            parse_icmp_extensions(&raw),
            Err(MalformedExtension::Truncated { offset: 4 })
        );
        assert_eq!(
            parse_icmp_extensions(&[0x20, 0]),
            Err(MalformedExtension::Truncated { offset: 0 })
        );
        assert_eq!(
            parse_icmp_extensions(&[0x20, 0, 0, 0, 0, 8]),
            Err(MalformedExtension::Truncated { offset: 4 })
        );
    }

    #[test]
    fn ragged_mpls_payload() {
        let raw = [0x20, 0, 0, 0, 0, 7, 1, 1, 0x00, 0x01, 0x01];
        assert_eq!(
            parse_icmp_extensions(&raw),
            Err(MalformedExtension::ObjectLength(3))
        );
    }

    #[test]
    fn bottom_of_stack_rule() {
        let raw = [0x20, 0, 0, 0, 0, 8, 1, 1, 0x00, 0x01, 0x00, 0x01];
        assert_eq!(
            parse_icmp_extensions(&raw),
            Err(MalformedExtension::BottomOfStack)
        );
    }

    #[test]
    fn skips_foreign_objects() {
        let mut raw = alloc::vec![0x20, 0, 0, 0];
        // interface information object, class 2
        raw.extend_from_slice(&[0, 8, 2, 0x0c, 9, 9, 9, 9]);
        raw.extend_from_slice(&[0, 12, 1, 1]);
        raw.extend_from_slice(&entry(300, 2, false, 7).encode());
        raw.extend_from_slice(&entry(17, 0, true, 7).encode());
        assert_eq!(
            parse_icmp_extensions(&raw),
            Ok(alloc::vec![entry(300, 2, false, 7), entry(17, 0, true, 7)])
        );
    }

    fn arb_entry() -> impl Strategy<Value = MplsLabelEntry> {
        (0..=MAX_LABEL, 0..=MAX_TC, any::<bool>(), any::<u8>())
            .prop_map(|(l, tc, s, t)| entry(l, tc, s, t))
    }

    proptest! {
        #[test]
        fn codec_bijection(e in arb_entry()) {
            prop_assert_eq!(MplsLabelEntry::decode(e.encode()), e);
        }

        #[test]
        fn decode_encode_is_identity_on_words(w in any::<u32>()) {
            prop_assert_eq!(MplsLabelEntry::decode(w.to_be_bytes()).encode(), w.to_be_bytes());
        }

        #[test]
        fn built_regions_parse_back(stack in proptest::collection::vec(arb_entry(), 1..8)) {
            let n = stack.len();
            let stack: Vec<_> = stack
                .into_iter()
                .enumerate()
                .map(|(i, e)| e.with_bottom_of_stack(i + 1 == n))
                .collect();
            prop_assert_eq!(parse_icmp_extensions(&build_icmp_extensions(&stack)), Ok(stack));
        }

        #[test]
        fn parser_never_panics(raw in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = parse_icmp_extensions(&raw);
        }
    }
}
