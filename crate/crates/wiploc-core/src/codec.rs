//! Collision-tolerant identifier codec.
//!
//! Each transmitter owns one row of a binary Walsh-Hadamard codebook of
//! order `2^k`. Its identifier is first protected by a simplex block code
//! (the Hadamard matrix with the constant first column removed), then every
//! FEC bit is spread to a full chip block: the transmitter's own code for a
//! one bit, its bitwise complement for a zero bit. Distinct rows disagree in
//! exactly half their chips, so a receiver can correlate a (possibly
//! collided) chip stream against every code in turn and recover several
//! identifiers from a single reception.
//!
//! With the defaults (`k = 4`) a message is 15 FEC bits of 16 chips each:
//! 240 chips, serialized as 30 bytes.
//!
//! ```
//! use wiploc_core::codec::{FecCodebook, OrthogonalCodebook, decode, encode};
//!
//! let orth = OrthogonalCodebook::new(4).unwrap();
//! let fec = FecCodebook::new(4).unwrap();
//! let payload = encode(5, &orth, &fec).unwrap();
//! let hits = decode(&payload, &orth, &fec).unwrap();
//! assert_eq!(hits.len(), 1);
//! assert_eq!((hits[0].id, hits[0].distance), (5, 0));
//! ```

use crate::error::{Error, Result};

/// Inclusive bounds on the codebook order exponent.
pub const MIN_K: u32 = 1;
pub const MAX_K: u32 = 8;

// ---------------------------------------------------------------------------
// Codebooks
// ---------------------------------------------------------------------------

/// Binary Walsh-Hadamard codebook of order `2^k`: `2^k` codes of `2^k`
/// chips, pairwise Hamming distance exactly `2^(k-1)`, code 0 all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalCodebook {
    k: u32,
    codes: Vec<Vec<bool>>,
}

impl OrthogonalCodebook {
    /// Builds the order-`2^k` codebook. `k` must lie in `MIN_K..=MAX_K`.
    pub fn new(k: u32) -> Result<Self> {
        if !(MIN_K..=MAX_K).contains(&k) {
            return Err(Error::InvalidParameter(format!(
                "codebook order exponent k must be in {MIN_K}..={MAX_K}, got {k}"
            )));
        }
        let n = 1usize << k;
        // Sylvester construction: entry (i, j) of the +/-1 matrix is
        // (-1)^popcount(i & j); mapping -1 to 0 gives the binary chip.
        let codes = (0..n)
            .map(|i| (0..n).map(|j| (i & j).count_ones() % 2 == 0).collect())
            .collect();
        Ok(OrthogonalCodebook { k, codes })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Number of codes (equals the chips per code).
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Chips of code `index`.
    pub fn code(&self, index: usize) -> Result<&[bool]> {
        self.codes
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidParameter(format!(
                "code index {index} out of range (codebook holds {})",
                self.codes.len()
            )))
    }

    /// Chips per spread block.
    pub fn block_len(&self) -> usize {
        self.codes.len()
    }
}

/// Simplex code derived from the order-`2^k` codebook by deleting the
/// constant first chip column: `2^k` codewords of `2^k - 1` bits, pairwise
/// Hamming distance exactly `2^(k-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FecCodebook {
    k: u32,
    codewords: Vec<Vec<bool>>,
}

impl FecCodebook {
    /// Builds the codebook. Requires `k >= 2` (order 2 would leave
    /// one-bit codewords with no error tolerance).
    pub fn new(k: u32) -> Result<Self> {
        if !(2..=MAX_K).contains(&k) {
            return Err(Error::InvalidParameter(format!(
                "FEC order exponent k must be in 2..={MAX_K}, got {k}"
            )));
        }
        let orth = OrthogonalCodebook::new(k)?;
        let codewords = orth
            .codes
            .iter()
            .map(|code| code[1..].to_vec())
            .collect();
        Ok(FecCodebook { k, codewords })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    /// Number of codewords.
    pub fn len(&self) -> usize {
        self.codewords.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Codeword bit length (`2^k - 1`).
    pub fn word_len(&self) -> usize {
        (1 << self.k) - 1
    }

    /// Minimum (and only) pairwise distance, `2^(k-1)`.
    pub fn min_distance(&self) -> usize {
        1 << (self.k - 1)
    }

    pub fn codeword(&self, index: usize) -> Result<&[bool]> {
        self.codewords
            .get(index)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidParameter(format!(
                "codeword index {index} out of range (codebook holds {})",
                self.codewords.len()
            )))
    }
}

// ---------------------------------------------------------------------------
// Payload
// ---------------------------------------------------------------------------

/// A chip stream as transmitted over the air. For the default codebooks the
/// length is 15 blocks of 16 chips = 240 chips = 30 bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Payload {
    chips: Vec<bool>,
}

impl Payload {
    /// Wraps a raw chip vector.
    pub fn from_chips(chips: Vec<bool>) -> Self {
        Payload { chips }
    }

    pub fn chips(&self) -> &[bool] {
        &self.chips
    }

    pub fn chips_mut(&mut self) -> &mut [bool] {
        &mut self.chips
    }

    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }

    /// Packs chips into bytes, first chip in the most significant bit.
    /// The chip count must be a multiple of 8.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.chips.len().is_multiple_of(8) {
            return Err(Error::MalformedPayload {
                expected: self.chips.len().next_multiple_of(8),
                got: self.chips.len(),
            });
        }
        Ok(self
            .chips
            .chunks(8)
            .map(|byte| byte.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b)))
            .collect())
    }

    /// Unpacks bytes into chips, most significant bit first.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let chips = bytes
            .iter()
            .flat_map(|&byte| (0..8).rev().map(move |bit| (byte >> bit) & 1 == 1))
            .collect();
        Payload { chips }
    }

    /// Lowercase hex of the packed bytes (60 characters for the defaults).
    pub fn to_hex(&self) -> Result<String> {
        Ok(self
            .to_bytes()?
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    /// Parses lowercase or uppercase hex into a payload.
    pub fn from_hex(hex: &str) -> Result<Self> {
        let hex = hex.trim();
        if !hex.len().is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "hex payload must have an even number of digits, got {}",
                hex.len()
            )));
        }
        let bytes = (0..hex.len() / 2)
            .map(|i| {
                u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| {
                    Error::InvalidParameter(format!(
                        "invalid hex digit in payload near position {}",
                        2 * i
                    ))
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Payload::from_bytes(&bytes))
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// One accepted identifier from a decode scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeResult {
    pub id: usize,
    /// Hamming distance between the despread word and the identifier's FEC
    /// codeword. Always strictly less than half the code distance.
    pub distance: usize,
}

/// Result of correlating a payload against a single code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Despread {
    /// Recovered FEC word, one bit per block.
    pub word: Vec<bool>,
    /// Per-block Hamming distance between received chips and the code.
    pub block_distances: Vec<usize>,
}

/// Spreads identifier `id` into a full chip payload: for each bit of the
/// FEC codeword, the transmitter's code (bit one) or its complement (bit
/// zero).
pub fn encode(id: usize, orth: &OrthogonalCodebook, fec: &FecCodebook) -> Result<Payload> {
    if orth.k() != fec.k() {
        return Err(Error::InvalidParameter(format!(
            "codebook orders differ: spreading k={}, FEC k={}",
            orth.k(),
            fec.k()
        )));
    }
    let code = orth.code(id)?;
    let word = fec.codeword(id)?;
    let chips = word
        .iter()
        .flat_map(|&bit| code.iter().map(move |&chip| chip == bit))
        .collect();
    Ok(Payload::from_chips(chips))
}

/// Correlates `payload` against code `index`, recovering one bit per block.
///
/// A block at distance below half the block length decodes as one, above
/// half as zero; the equidistant case also decodes as zero so that the
/// result is deterministic.
pub fn despread(
    payload: &Payload,
    index: usize,
    orth: &OrthogonalCodebook,
) -> Result<Despread> {
    let code = orth.code(index)?;
    let block = orth.block_len();
    if payload.is_empty() || !payload.len().is_multiple_of(block) {
        return Err(Error::MalformedPayload {
            expected: block * (payload.len() / block).max(1),
            got: payload.len(),
        });
    }
    let half = block / 2;
    let mut word = Vec::with_capacity(payload.len() / block);
    let mut block_distances = Vec::with_capacity(payload.len() / block);
    for chunk in payload.chips().chunks(block) {
        let dist = chunk.iter().zip(code).filter(|(a, b)| a != b).count();
        word.push(dist < half);
        block_distances.push(dist);
    }
    Ok(Despread { word, block_distances })
}

/// Scans `payload` against every code in the codebook and returns all
/// identifiers whose despread word lands strictly inside half the FEC code
/// distance, in ascending identifier order. A collided stream can yield
/// several results; a stream that matches nothing yields an empty list.
pub fn decode(
    payload: &Payload,
    orth: &OrthogonalCodebook,
    fec: &FecCodebook,
) -> Result<Vec<DecodeResult>> {
    if orth.k() != fec.k() {
        return Err(Error::InvalidParameter(format!(
            "codebook orders differ: spreading k={}, FEC k={}",
            orth.k(),
            fec.k()
        )));
    }
    let expected = fec.word_len() * orth.block_len();
    if payload.len() != expected {
        return Err(Error::MalformedPayload { expected, got: payload.len() });
    }
    let accept_below = fec.min_distance() / 2;
    let mut hits = Vec::new();
    for id in 0..fec.len() {
        let Despread { word, .. } = despread(payload, id, orth)?;
        let distance = word
            .iter()
            .zip(fec.codeword(id)?)
            .filter(|(a, b)| a != b)
            .count();
        if distance < accept_below {
            hits.push(DecodeResult { id, distance });
        }
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hamming(a: &[bool], b: &[bool]) -> usize {
        a.iter().zip(b).filter(|(x, y)| x != y).count()
    }

    fn chips_str(code: &[bool]) -> String {
        code.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    #[test]
    fn order_two_codebook() {
        let orth = OrthogonalCodebook::new(1).unwrap();
        assert_eq!(chips_str(orth.code(0).unwrap()), "11");
        assert_eq!(chips_str(orth.code(1).unwrap()), "10");
    }

    #[test]
    fn k_out_of_range_rejected() {
        assert!(OrthogonalCodebook::new(0).is_err());
        assert!(OrthogonalCodebook::new(9).is_err());
        assert!(FecCodebook::new(1).is_err());
    }

    #[test]
    fn default_codebook_shape_and_distances() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        assert_eq!(orth.len(), 16);
        assert!(orth.code(0).unwrap().iter().all(|&c| c));
        for i in 0..16 {
            assert_eq!(orth.code(i).unwrap().len(), 16);
            for j in (i + 1)..16 {
                assert_eq!(
                    hamming(orth.code(i).unwrap(), orth.code(j).unwrap()),
                    8,
                    "codes {i} and {j} must disagree in exactly half their chips"
                );
            }
        }
    }

    #[test]
    fn fec_codebook_shape_and_distances() {
        let fec = FecCodebook::new(4).unwrap();
        assert_eq!(fec.len(), 16);
        assert_eq!(fec.word_len(), 15);
        assert_eq!(fec.min_distance(), 8);
        for i in 0..16 {
            for j in (i + 1)..16 {
                assert_eq!(hamming(fec.codeword(i).unwrap(), fec.codeword(j).unwrap()), 8);
            }
        }

        let small = FecCodebook::new(2).unwrap();
        assert_eq!(small.len(), 4);
        assert_eq!(small.word_len(), 3);
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_eq!(hamming(small.codeword(i).unwrap(), small.codeword(j).unwrap()), 2);
            }
        }
    }

    #[test]
    fn encode_id_zero_is_all_ones() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let fec = FecCodebook::new(4).unwrap();
        let payload = encode(0, &orth, &fec).unwrap();
        assert_eq!(payload.len(), 240);
        assert!(payload.chips().iter().all(|&c| c));
        assert_eq!(payload.to_hex().unwrap(), "f".repeat(60));
    }

    #[test]
    fn encode_rejects_out_of_range_id() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let fec = FecCodebook::new(4).unwrap();
        assert!(encode(16, &orth, &fec).is_err());
    }

    #[test]
    fn byte_and_hex_round_trip() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let fec = FecCodebook::new(4).unwrap();
        for id in 0..16 {
            let payload = encode(id, &orth, &fec).unwrap();
            let bytes = payload.to_bytes().unwrap();
            assert_eq!(bytes.len(), 30);
            assert_eq!(Payload::from_bytes(&bytes), payload);
            let hex = payload.to_hex().unwrap();
            assert_eq!(hex.len(), 60);
            assert_eq!(Payload::from_hex(&hex).unwrap(), payload);
        }
    }

    #[test]
    fn despread_clean_blocks() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let code5: Vec<bool> = orth.code(5).unwrap().to_vec();

        // One block equal to the code itself: bit one at distance zero.
        let d = despread(&Payload::from_chips(code5.clone()), 5, &orth).unwrap();
        assert_eq!(d.word, vec![true]);
        assert_eq!(d.block_distances, vec![0]);

        // The complemented block: bit zero at full distance.
        let inverted: Vec<bool> = code5.iter().map(|&c| !c).collect();
        let d = despread(&Payload::from_chips(inverted), 5, &orth).unwrap();
        assert_eq!(d.word, vec![false]);
        assert_eq!(d.block_distances, vec![16]);
    }

    #[test]
    fn despread_survives_three_chip_flips() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let mut block: Vec<bool> = orth.code(5).unwrap().to_vec();
        for chip in block.iter_mut().take(3) {
            *chip = !*chip;
        }
        let d = despread(&Payload::from_chips(block), 5, &orth).unwrap();
        assert_eq!(d.word, vec![true]);
        assert_eq!(d.block_distances, vec![3]);
    }

    #[test]
    fn despread_tie_decodes_as_zero() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let mut block: Vec<bool> = orth.code(3).unwrap().to_vec();
        for chip in block.iter_mut().take(8) {
            *chip = !*chip;
        }
        let d = despread(&Payload::from_chips(block), 3, &orth).unwrap();
        assert_eq!(d.block_distances, vec![8]);
        assert_eq!(d.word, vec![false]);
    }

    #[test]
    fn despread_rejects_partial_blocks() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        assert!(despread(&Payload::from_chips(vec![true; 17]), 0, &orth).is_err());
        assert!(despread(&Payload::from_chips(Vec::new()), 0, &orth).is_err());
    }

    #[test]
    fn exhaustive_round_trip_single_hit() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let fec = FecCodebook::new(4).unwrap();
        for id in 0..16 {
            let payload = encode(id, &orth, &fec).unwrap();
            let hits = decode(&payload, &orth, &fec).unwrap();
            assert_eq!(hits, vec![DecodeResult { id, distance: 0 }]);
        }
    }

    #[test]
    fn clean_payload_never_matches_wrong_codes() {
        // A clean payload for one identifier despreads to the all-zero word
        // under every other code (each block sits exactly on the decision
        // boundary), which stays far outside the acceptance radius.
        let orth = OrthogonalCodebook::new(4).unwrap();
        let fec = FecCodebook::new(4).unwrap();
        for id in 0..16 {
            let payload = encode(id, &orth, &fec).unwrap();
            for other in (0..16).filter(|&o| o != id) {
                let d = despread(&payload, other, &orth).unwrap();
                assert!(d.block_distances.iter().all(|&dist| dist == 8));
                assert!(d.word.iter().all(|&bit| !bit));
                let dist = d
                    .word
                    .iter()
                    .zip(fec.codeword(other).unwrap())
                    .filter(|(a, b)| a != b)
                    .count();
                assert!(dist >= 4, "id {other} must not fall inside the acceptance radius");
            }
        }
    }

    #[test]
    fn decode_rejects_wrong_length() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let fec = FecCodebook::new(4).unwrap();
        assert!(decode(&Payload::from_chips(vec![true; 239]), &orth, &fec).is_err());
    }

    #[test]
    fn decode_rejects_mismatched_codebooks() {
        let orth = OrthogonalCodebook::new(4).unwrap();
        let fec = FecCodebook::new(3).unwrap();
        assert!(decode(&Payload::from_chips(vec![true; 240]), &orth, &fec).is_err());
        assert!(encode(0, &orth, &fec).is_err());
    }
}
