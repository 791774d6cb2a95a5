//! Group-XOR parity chunk coding with CRC-32 erasure marking.
//!
//! An update of `d` weights is cut into `ceil(d / B)` data chunks of `B`
//! little-endian `f32`s (the last one zero-padded). Data chunks are grouped
//! `G` at a time and each group gets one parity chunk holding the bytewise
//! XOR of its members, so any single erasure per group can be rebuilt.
//!
//! Wire layout of one chunk (all integers little-endian):
//!
//! ```text
//! d: u32 | round: u32 | client_id: u16 | B: u32 | G: u32 |
//! chunk_index: u32 | is_parity: u8 | crc32: u32 | payload: 4*B bytes
//! ```
//!
//! Data chunks occupy indices `0..n_data`, the parity chunk of group `g`
//! sits at `n_data + g`. The CRC is IEEE 802.3 CRC-32 over the payload.

use std::ops::Range;

use crate::error::{EmarError, Result};
use crate::update::ModelUpdate;

pub const CHUNK_HEADER_LEN: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FecGeometry {
    pub dim: usize,
    pub block_len: usize,
    pub group_size: usize,
    pub round: u32,
    pub client_id: u16,
}

impl FecGeometry {
    pub fn new(dim: usize, block_len: usize, group_size: usize) -> Result<Self> {
        if block_len == 0 {
            return Err(EmarError::invalid("chunk length B must be at least 1"));
        }
        if group_size < 2 {
            return Err(EmarError::invalid("parity group size G must be at least 2"));
        }
        if dim == 0 {
            return Err(EmarError::invalid("cannot chunk an empty update"));
        }
        Ok(Self {
            dim,
            block_len,
            group_size,
            round: 0,
            client_id: 0,
        })
    }

    pub fn for_update(update: &ModelUpdate, block_len: usize, group_size: usize) -> Result<Self> {
        let mut g = Self::new(update.dim(), block_len, group_size)?;
        g.round = update.round;
        g.client_id = update.client_id;
        Ok(g)
    }

    pub fn num_data(&self) -> usize {
        self.dim.div_ceil(self.block_len)
    }

    pub fn num_groups(&self) -> usize {
        self.num_data().div_ceil(self.group_size)
    }

    pub fn num_chunks(&self) -> usize {
        self.num_data() + self.num_groups()
    }

    pub fn payload_len(&self) -> usize {
        4 * self.block_len
    }

    pub fn is_parity(&self, chunk: usize) -> bool {
        chunk >= self.num_data()
    }

    /// Data chunks belonging to group `g`.
    pub fn group_members(&self, g: usize) -> Range<usize> {
        let start = g * self.group_size;
        start..(start + self.group_size).min(self.num_data())
    }

    pub fn group_of(&self, data_chunk: usize) -> usize {
        data_chunk / self.group_size
    }

    pub fn parity_index(&self, g: usize) -> usize {
        self.num_data() + g
    }

    /// Weight indices carried by a data chunk.
    pub fn value_range(&self, data_chunk: usize) -> Range<usize> {
        let start = data_chunk * self.block_len;
        start..(start + self.block_len).min(self.dim)
    }

    pub fn chunk_of_index(&self, index: usize) -> usize {
        index / self.block_len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkHeader {
    pub dim: u32,
    pub round: u32,
    pub client_id: u16,
    pub block_len: u32,
    pub group_size: u32,
    pub chunk_index: u32,
    pub is_parity: bool,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub header: ChunkHeader,
    pub payload: Vec<u8>,
}

impl Chunk {
    fn new(geometry: &FecGeometry, index: usize, payload: Vec<u8>) -> Self {
        let header = ChunkHeader {
            dim: geometry.dim as u32,
            round: geometry.round,
            client_id: geometry.client_id,
            block_len: geometry.block_len as u32,
            group_size: geometry.group_size as u32,
            chunk_index: index as u32,
            is_parity: geometry.is_parity(index),
            crc32: crc32fast::hash(&payload),
        };
        Self { header, payload }
    }

    pub fn index(&self) -> usize {
        self.header.chunk_index as usize
    }

    pub fn crc_ok(&self) -> bool {
        crc32fast::hash(&self.payload) == self.header.crc32
    }

    /// Recompute the CRC over the current payload.
    pub fn restamp(&mut self) {
        self.header.crc32 = crc32fast::hash(&self.payload);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(CHUNK_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&h.dim.to_le_bytes());
        out.extend_from_slice(&h.round.to_le_bytes());
        out.extend_from_slice(&h.client_id.to_le_bytes());
        out.extend_from_slice(&h.block_len.to_le_bytes());
        out.extend_from_slice(&h.group_size.to_le_bytes());
        out.extend_from_slice(&h.chunk_index.to_le_bytes());
        out.push(h.is_parity as u8);
        out.extend_from_slice(&h.crc32.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHUNK_HEADER_LEN {
            return Err(EmarError::Protocol(format!(
                "chunk header needs {CHUNK_HEADER_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let is_parity = match bytes[22] {
            0 => false,
            1 => true,
            other => {
                return Err(EmarError::Protocol(format!("bad parity flag {other}")));
            }
        };
        let header = ChunkHeader {
            dim: u32_at(0),
            round: u32_at(4),
            client_id: u16::from_le_bytes([bytes[8], bytes[9]]),
            block_len: u32_at(10),
            group_size: u32_at(14),
            chunk_index: u32_at(18),
            is_parity,
            crc32: u32_at(23),
        };
        let payload = bytes[CHUNK_HEADER_LEN..].to_vec();
        if payload.len() != 4 * header.block_len as usize {
            return Err(EmarError::Protocol(format!(
                "payload of {} bytes does not match B={}",
                payload.len(),
                header.block_len
            )));
        }
        Ok(Self { header, payload })
    }

    /// Payload reinterpreted as `f32`s.
    pub fn floats(&self) -> Vec<f32> {
        self.payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

/// An encoded update: data chunks followed by one parity chunk per group.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedUpdate {
    pub geometry: FecGeometry,
    pub chunks: Vec<Chunk>,
}

impl ChunkedUpdate {
    pub fn data_chunks(&self) -> &[Chunk] {
        &self.chunks[..self.geometry.num_data()]
    }

    pub fn parity_chunks(&self) -> &[Chunk] {
        &self.chunks[self.geometry.num_data()..]
    }

    pub fn checksums(&self) -> Vec<u32> {
        self.chunks.iter().map(|c| c.header.crc32).collect()
    }

    /// Replace the data payloads by those of `values` and restamp their CRCs,
    /// keeping the parity chunks computed from the original data.
    pub fn with_data_values(&self, values: &[f32]) -> Result<ChunkedUpdate> {
        if values.len() != self.geometry.dim {
            return Err(EmarError::DimensionMismatch {
                expected: self.geometry.dim,
                actual: values.len(),
            });
        }
        let mut out = self.clone();
        for c in 0..self.geometry.num_data() {
            out.chunks[c] = Chunk::new(&self.geometry, c, data_payload(&self.geometry, values, c));
        }
        Ok(out)
    }
}

fn data_payload(geometry: &FecGeometry, values: &[f32], chunk: usize) -> Vec<u8> {
    let mut payload = vec![0u8; geometry.payload_len()];
    for (slot, v) in payload
        .chunks_exact_mut(4)
        .zip(&values[geometry.value_range(chunk)])
    {
        slot.copy_from_slice(&v.to_le_bytes());
    }
    payload
}

fn xor_into(acc: &mut [u8], other: &[u8]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a ^= b;
    }
}

pub fn fec_encode(
    update: &ModelUpdate,
    block_len: usize,
    group_size: usize,
) -> Result<ChunkedUpdate> {
    let geometry = FecGeometry::for_update(update, block_len, group_size)?;
    let mut chunks: Vec<Chunk> = (0..geometry.num_data())
        .map(|c| Chunk::new(&geometry, c, data_payload(&geometry, &update.values, c)))
        .collect();
    for g in 0..geometry.num_groups() {
        let mut parity = vec![0u8; geometry.payload_len()];
        for c in geometry.group_members(g) {
            xor_into(&mut parity, &chunks[c].payload);
        }
        chunks.push(Chunk::new(&geometry, geometry.parity_index(g), parity));
    }
    Ok(ChunkedUpdate { geometry, chunks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupStatus {
    /// Every data chunk and the parity chunk arrived intact.
    Intact,
    /// Every data chunk arrived but the parity chunk did not.
    ParityLost,
    /// Exactly one data chunk was rebuilt from parity.
    Recovered,
    /// Two or more chunks are missing; the group could not be rebuilt.
    Unrecovered,
}

/// Result of decoding a received chunk list.
#[derive(Debug, Clone)]
pub struct FecDecoded {
    pub geometry: FecGeometry,
    /// Decoded weights; entries of unrecovered chunks are zero.
    pub values: Vec<f32>,
    /// Data payloads after recovery (`None` when unrecovered).
    pub data: Vec<Option<Vec<u8>>>,
    /// Parity payloads as received (`None` when erased).
    pub parity: Vec<Option<Vec<u8>>>,
    /// Chunk indices (data or parity) that were lost or failed their CRC.
    pub erased: Vec<usize>,
    /// Data chunks rebuilt from parity.
    pub recovered: Vec<usize>,
    /// Data chunks that could not be rebuilt.
    pub unrecovered: Vec<usize>,
    pub groups: Vec<GroupStatus>,
}

impl FecDecoded {
    pub fn is_complete(&self) -> bool {
        self.unrecovered.is_empty()
    }

    /// Weight index ranges of the unrecovered data chunks.
    pub fn unrecovered_ranges(&self) -> Vec<Range<usize>> {
        self.unrecovered
            .iter()
            .map(|&c| self.geometry.value_range(c))
            .collect()
    }

    pub fn to_update(&self) -> ModelUpdate {
        ModelUpdate::new(
            self.values.clone(),
            self.geometry.round,
            self.geometry.client_id,
        )
    }

    /// True when group `g` arrived intact and its data XORs to its parity.
    pub fn group_verifies(&self, g: usize) -> bool {
        if self.groups[g] != GroupStatus::Intact {
            return false;
        }
        let Some(parity) = &self.parity[g] else {
            return false;
        };
        let mut acc = parity.clone();
        for c in self.geometry.group_members(g) {
            match &self.data[c] {
                Some(p) => xor_into(&mut acc, p),
                None => return false,
            }
        }
        acc.iter().all(|&b| b == 0)
    }

    /// Rebuild data chunk `chunk` from its group's parity and the other
    /// members, as floats. Requires the parity and every other member.
    pub fn rebuild_from_parity(&self, chunk: usize) -> Option<Vec<f32>> {
        let g = self.geometry.group_of(chunk);
        let mut acc = self.parity[g].clone()?;
        for c in self.geometry.group_members(g) {
            if c != chunk {
                xor_into(&mut acc, self.data[c].as_ref()?);
            }
        }
        let len = self.geometry.value_range(chunk).len();
        Some(
            acc.chunks_exact(4)
                .take(len)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        )
    }
}

fn check_header(geometry: &FecGeometry, position: usize, chunk: &Chunk) -> Result<()> {
    let h = &chunk.header;
    let consistent = h.dim as usize == geometry.dim
        && h.block_len as usize == geometry.block_len
        && h.group_size as usize == geometry.group_size
        && h.round == geometry.round
        && h.client_id == geometry.client_id
        && h.chunk_index as usize == position
        && h.is_parity == geometry.is_parity(position)
        && chunk.payload.len() == geometry.payload_len();
    if consistent {
        Ok(())
    } else {
        Err(EmarError::Protocol(format!(
            "chunk at position {position} carries a header inconsistent with the session geometry"
        )))
    }
}

/// Decode `received` (one slot per chunk index, `None` = erased). Chunks
/// whose CRC fails are treated as erasures; groups with one erasure are
/// rebuilt from parity.
pub fn fec_decode(geometry: &FecGeometry, received: &[Option<Chunk>]) -> Result<FecDecoded> {
    if received.len() != geometry.num_chunks() {
        return Err(EmarError::Protocol(format!(
            "expected {} chunk slots, got {}",
            geometry.num_chunks(),
            received.len()
        )));
    }
    let mut erased = Vec::new();
    let mut payloads: Vec<Option<Vec<u8>>> = Vec::with_capacity(received.len());
    for (pos, slot) in received.iter().enumerate() {
        match slot {
            Some(chunk) => {
                check_header(geometry, pos, chunk)?;
                if chunk.crc_ok() {
                    payloads.push(Some(chunk.payload.clone()));
                } else {
                    erased.push(pos);
                    payloads.push(None);
                }
            }
            None => {
                erased.push(pos);
                payloads.push(None);
            }
        }
    }
    let n_data = geometry.num_data();
    let parity: Vec<Option<Vec<u8>>> = payloads.split_off(n_data);
    let mut data = payloads;

    let mut recovered = Vec::new();
    let mut unrecovered = Vec::new();
    let mut groups = Vec::with_capacity(geometry.num_groups());
    for g in 0..geometry.num_groups() {
        let missing: Vec<usize> = geometry
            .group_members(g)
            .filter(|&c| data[c].is_none())
            .collect();
        let status = match (missing.len(), parity[g].is_some()) {
            (0, true) => GroupStatus::Intact,
            (0, false) => GroupStatus::ParityLost,
            (1, true) => {
                let lost = missing[0];
                let mut acc = parity[g].clone().unwrap();
                for c in geometry.group_members(g) {
                    if c != lost {
                        xor_into(&mut acc, data[c].as_ref().unwrap());
                    }
                }
                data[lost] = Some(acc);
                recovered.push(lost);
                GroupStatus::Recovered
            }
            _ => {
                unrecovered.extend(missing);
                GroupStatus::Unrecovered
            }
        };
        groups.push(status);
    }

    let mut values = vec![0.0f32; geometry.dim];
    for (c, payload) in data.iter().enumerate() {
        if let Some(p) = payload {
            let range = geometry.value_range(c);
            for (v, b) in values[range].iter_mut().zip(p.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap());
            }
        }
    }
    Ok(FecDecoded {
        geometry: *geometry,
        values,
        data,
        parity,
        erased,
        recovered,
        unrecovered,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_update(d: usize, seed: u64) -> ModelUpdate {
        let mut rng = crate::rng::rng_from_seed(seed);
        ModelUpdate::new(
            (0..d).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect(),
            4,
            9,
        )
    }

    fn all_received(c: &ChunkedUpdate) -> Vec<Option<Chunk>> {
        c.chunks.iter().cloned().map(Some).collect()
    }

    #[test]
    fn small_geometry_parity_is_xor() {
        let u = ModelUpdate::new(vec![1.0, 2.0, 3.0, 4.0], 0, 0);
        let enc = fec_encode(&u, 2, 2).unwrap();
        assert_eq!(enc.data_chunks().len(), 2);
        assert_eq!(enc.parity_chunks().len(), 1);
        let expected: Vec<u8> = enc.chunks[0]
            .payload
            .iter()
            .zip(&enc.chunks[1].payload)
            .map(|(a, b)| a ^ b)
            .collect();
        assert_eq!(enc.parity_chunks()[0].payload, expected);
    }

    #[test]
    fn zero_group_has_zero_parity() {
        let u = ModelUpdate::new(vec![0.0; 16], 0, 0);
        let enc = fec_encode(&u, 4, 4).unwrap();
        assert!(enc.parity_chunks()[0].payload.iter().all(|&b| b == 0));
    }

    #[test]
    fn rejects_bad_geometry() {
        let u = random_update(8, 0);
        assert!(fec_encode(&u, 0, 2).is_err());
        assert!(fec_encode(&u, 2, 1).is_err());
    }

    #[test]
    fn single_erasure_is_rebuilt_byte_exactly() {
        let u = random_update(100, 1);
        let enc = fec_encode(&u, 8, 4).unwrap();
        let mut rx = all_received(&enc);
        rx[5] = None;
        let dec = fec_decode(&enc.geometry, &rx).unwrap();
        assert_eq!(dec.recovered, vec![5]);
        assert!(dec.is_complete());
        assert_eq!(dec.values, u.values);
    }

    #[test]
    fn two_erasures_in_one_group_are_reported() {
        let u = random_update(100, 2);
        let enc = fec_encode(&u, 8, 4).unwrap();
        let mut rx = all_received(&enc);
        rx[4] = None;
        rx[6] = None;
        let dec = fec_decode(&enc.geometry, &rx).unwrap();
        assert_eq!(dec.unrecovered, vec![4, 6]);
        assert_eq!(dec.unrecovered_ranges(), vec![32..40, 48..56]);
        assert_eq!(dec.groups[1], GroupStatus::Unrecovered);
        assert!(dec.values[32..40].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crc_failure_counts_as_erasure() {
        let u = random_update(64, 3);
        let enc = fec_encode(&u, 8, 8).unwrap();
        let mut rx = all_received(&enc);
        if let Some(c) = rx[2].as_mut() {
            c.payload[0] ^= 0x40;
        }
        let dec = fec_decode(&enc.geometry, &rx).unwrap();
        assert_eq!(dec.erased, vec![2]);
        assert_eq!(dec.values, u.values);
    }

    #[test]
    fn inconsistent_header_is_a_protocol_error() {
        let u = random_update(64, 3);
        let enc = fec_encode(&u, 8, 8).unwrap();
        let mut rx = all_received(&enc);
        rx.swap(0, 1);
        assert!(matches!(
            fec_decode(&enc.geometry, &rx),
            Err(EmarError::Protocol(_))
        ));
        assert!(fec_decode(&enc.geometry, &rx[1..]).is_err());
    }

    #[test]
    fn chunk_wire_round_trip() {
        let u = random_update(10, 4);
        let enc = fec_encode(&u, 4, 2).unwrap();
        for c in &enc.chunks {
            let bytes = c.to_bytes();
            assert_eq!(bytes.len(), CHUNK_HEADER_LEN + 16);
            assert_eq!(&Chunk::from_bytes(&bytes).unwrap(), c);
        }
        assert!(Chunk::from_bytes(&[0u8; 5]).is_err());
    }

    #[test]
    fn crc_is_ieee() {
        // Standard check value of CRC-32/ISO-HDLC.
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn group_verification_detects_silent_corruption() {
        let u = random_update(64, 5);
        let enc = fec_encode(&u, 8, 4).unwrap();
        let mut tampered = u.values.clone();
        tampered[3] = 42.0;
        let sent = enc.with_data_values(&tampered).unwrap();
        let dec = fec_decode(&enc.geometry, &all_received(&sent)).unwrap();
        assert!(!dec.group_verifies(0));
        assert!(dec.group_verifies(1));
        assert_eq!(dec.rebuild_from_parity(0).unwrap(), u.values[0..8].to_vec());
    }

    proptest! {
        #[test]
        fn decode_with_at_most_one_erasure_per_group_is_exact(
            d in 1usize..300, b in 1usize..20, g in 2usize..6, seed in any::<u64>(), pick in any::<u64>()
        ) {
            let u = random_update(d, seed);
            let enc = fec_encode(&u, b, g).unwrap();
            let geo = enc.geometry;
            let mut rx = all_received(&enc);
            let mut r = crate::rng::rng_from_seed(pick);
            for grp in 0..geo.num_groups() {
                let members: Vec<usize> = geo.group_members(grp).chain([geo.parity_index(grp)]).collect();
                if r.random_bool(0.7) {
                    let victim = members[r.random_range(0..members.len())];
                    rx[victim] = None;
                }
            }
            let dec = fec_decode(&geo, &rx).unwrap();
            prop_assert!(dec.is_complete());
            let got: Vec<u32> = dec.values.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = u.values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
