//! Lossless coding of quantized feature maps with canonical Huffman codes.
//!
//! A codebook is built per feature map from that map's own histogram and
//! shipped in the stream header as code lengths only; canonical code
//! assignment makes the reconstruction unambiguous and the header byte
//! layout platform-independent.
//!
//! Stream layout (all multi-byte integers little-endian):
//!
//! | field        | size        | value                                  |
//! |--------------|-------------|----------------------------------------|
//! | magic        | 4 bytes     | `CATC`                                 |
//! | version      | u8          | 1                                      |
//! | bit width    | u8          | quantizer bits `b`                     |
//! | L            | u16         | number of symbols                      |
//! | code lengths | L x u8      | 0 = symbol absent                      |
//! | N            | u64         | payload symbol count                   |
//! | payload      | var         | MSB-first bits, zero-padded to a byte  |

mod bitio;

use crate::entropy::Histogram;
use bitio::{BitReader, BitWriter};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CATC";
pub const VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("cannot build a codebook from an empty histogram")]
    EmptyHistogram,
    #[error("symbol {0} has no code in this codebook")]
    SymbolNotInCodebook(u16),
    #[error("bad magic {0:?}, expected \"CATC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported stream version {0}")]
    UnsupportedVersion(u8),
    #[error("stream header truncated: need {needed} bytes, have {available}")]
    TruncatedHeader { needed: usize, available: usize },
    #[error("payload truncated: ran out of bits after {decoded} of {expected} symbols")]
    TruncatedPayload { decoded: u64, expected: u64 },
    #[error("invalid code at bit {bit}: no symbol within {max_len} bits")]
    InvalidCode { bit: u64, max_len: u8 },
    #[error("nonzero padding bits after the payload")]
    NonzeroPadding,
    #[error("code lengths are not canonical-constructible: {0}")]
    NonCanonicalLengths(String),
    #[error("rate undefined for an empty stream (N = 0)")]
    UndefinedRate,
}

/// Prefix code determined entirely by per-symbol code lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct HuffmanCodebook {
    code_lengths: Vec<u8>,
    /// Canonical code bits per symbol (valid where length > 0).
    codes: Vec<u64>,
}

impl HuffmanCodebook {
    /// Optimal prefix code for a histogram.
    ///
    /// Merge-queue ties break on (count, lowest contained symbol) so the
    /// resulting lengths, and therefore the canonical header bytes, are
    /// identical on every platform. A histogram with a single present
    /// symbol gets code length 1: a zero-length code cannot be framed.
    pub fn from_histogram(h: &Histogram) -> Result<Self, CodecError> {
        if h.total() == 0 {
            return Err(CodecError::EmptyHistogram);
        }
        let counts = h.counts();
        let present: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
        let mut code_lengths = vec![0u8; counts.len()];

        if present.len() == 1 {
            code_lengths[present[0]] = 1;
            return Self::from_lengths(code_lengths);
        }

        // Nodes: leaves first, then merges. parent[] links childless roots.
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
        struct Key {
            count: u64,
            lowest_symbol: usize,
            node: usize,
        }
        let mut parent: Vec<Option<usize>> = vec![None; present.len()];
        let mut heap = std::collections::BinaryHeap::new();
        for (node, &sym) in present.iter().enumerate() {
            heap.push(std::cmp::Reverse(Key {
                count: counts[sym],
                lowest_symbol: sym,
                node,
            }));
        }
        let mut children: Vec<(usize, usize)> = Vec::new();
        while heap.len() > 1 {
            let a = heap.pop().unwrap().0;
            let b = heap.pop().unwrap().0;
            let merged = parent.len();
            parent.push(None);
            parent[a.node] = Some(merged);
            parent[b.node] = Some(merged);
            children.push((a.node, b.node));
            heap.push(std::cmp::Reverse(Key {
                count: a.count + b.count,
                lowest_symbol: a.lowest_symbol.min(b.lowest_symbol),
                node: merged,
            }));
        }
        // Depth of each leaf = chain length to the root.
        for (node, &sym) in present.iter().enumerate() {
            let mut depth = 0u8;
            let mut cur = node;
            while let Some(p) = parent[cur] {
                depth += 1;
                cur = p;
            }
            code_lengths[sym] = depth;
        }
        let _ = children;
        Self::from_lengths(code_lengths)
    }

    /// Reconstruct the canonical code from lengths alone.
    ///
    /// Rejects length sets that are not exactly a prefix-code profile:
    /// the Kraft sum must equal one, except for the single-symbol case
    /// which must use length 1.
    pub fn from_lengths(code_lengths: Vec<u8>) -> Result<Self, CodecError> {
        let present: Vec<usize> = (0..code_lengths.len())
            .filter(|&i| code_lengths[i] > 0)
            .collect();
        if present.is_empty() {
            return Err(CodecError::NonCanonicalLengths(
                "no symbol has a code".into(),
            ));
        }
        if present.len() == 1 {
            if code_lengths[present[0]] != 1 {
                return Err(CodecError::NonCanonicalLengths(format!(
                    "single present symbol must have length 1, got {}",
                    code_lengths[present[0]]
                )));
            }
        } else {
            let max_len = *code_lengths.iter().max().unwrap() as u32;
            // Exact integer Kraft sum: sum of 2^(max-len) must equal 2^max.
            let mut kraft: u128 = 0;
            for &len in code_lengths.iter().filter(|&&l| l > 0) {
                kraft += 1u128 << (max_len - len as u32);
            }
            if kraft != 1u128 << max_len {
                return Err(CodecError::NonCanonicalLengths(format!(
                    "Kraft sum is {kraft}/2^{max_len}, expected exactly 1"
                )));
            }
        }

        // Canonical assignment: sort by (length, symbol); codes count up,
        // shifting left at each length increase.
        let mut order = present.clone();
        order.sort_by_key(|&s| (code_lengths[s], s));
        let mut codes = vec![0u64; code_lengths.len()];
        let mut code: u64 = 0;
        let mut prev_len = code_lengths[order[0]];
        for &sym in &order {
            code <<= code_lengths[sym] - prev_len;
            codes[sym] = code;
            code += 1;
            prev_len = code_lengths[sym];
        }
        Ok(HuffmanCodebook { code_lengths, codes })
    }

    pub fn num_symbols(&self) -> usize {
        self.code_lengths.len()
    }

    pub fn code_lengths(&self) -> &[u8] {
        &self.code_lengths
    }

    pub fn code(&self, symbol: u16) -> Option<(u64, u8)> {
        let len = *self.code_lengths.get(symbol as usize)?;
        (len > 0).then(|| (self.codes[symbol as usize], len))
    }

    /// Mean code length in bits under the given histogram.
    pub fn expected_length(&self, h: &Histogram) -> f64 {
        let mut bits = 0u64;
        for (sym, &c) in h.counts().iter().enumerate() {
            bits += c * self.code_lengths[sym] as u64;
        }
        bits as f64 / h.total() as f64
    }

    /// Kraft sum over present symbols (1.0 for every complete code).
    pub fn kraft_sum(&self) -> f64 {
        self.code_lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| (2f64).powi(-(l as i32)))
            .sum()
    }
}

/// One encoded feature map: self-describing header plus packed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStream {
    bits: u8,
    code_lengths: Vec<u8>,
    num_values: u64,
    payload: Vec<u8>,
    payload_bits: u64,
}

impl EncodedStream {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn num_values(&self) -> u64 {
        self.num_values
    }

    pub fn payload_bits(&self) -> u64 {
        self.payload_bits
    }

    /// Header size in bytes once serialized.
    pub fn header_bytes(&self) -> usize {
        4 + 1 + 1 + 2 + self.code_lengths.len() + 8
    }

    pub fn codebook(&self) -> Result<HuffmanCodebook, CodecError> {
        HuffmanCodebook::from_lengths(self.code_lengths.clone())
    }

    /// Measured rate in bits per value, header excluded.
    pub fn measured_rate(&self) -> Result<f64, CodecError> {
        if self.num_values == 0 {
            return Err(CodecError::UndefinedRate);
        }
        Ok(self.payload_bits as f64 / self.num_values as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_bytes() + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.bits);
        out.extend_from_slice(&(self.code_lengths.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.code_lengths);
        out.extend_from_slice(&self.num_values.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parse and fully validate a serialized stream, returning it with the
    /// decoded symbols.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Vec<u16>), CodecError> {
        let need = |n: usize, have: usize| {
            if have < n {
                Err(CodecError::TruncatedHeader { needed: n, available: have })
            } else {
                Ok(())
            }
        };
        need(8, bytes.len())?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CodecError::BadMagic(magic));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(CodecError::UnsupportedVersion(version));
        }
        let bits = bytes[5];
        let num_symbols = u16::from_le_bytes(bytes[6..8].try_into().unwrap()) as usize;
        need(8 + num_symbols + 8, bytes.len())?;
        let code_lengths = bytes[8..8 + num_symbols].to_vec();
        let n_off = 8 + num_symbols;
        let num_values = u64::from_le_bytes(bytes[n_off..n_off + 8].try_into().unwrap());
        let payload = bytes[n_off + 8..].to_vec();

        let mut stream = EncodedStream {
            bits,
            code_lengths,
            num_values,
            payload,
            payload_bits: 0,
        };
        let symbols = stream.decode_internal()?;
        Ok((stream, symbols))
    }

    /// Decode the payload back into symbols; exact inverse of [`encode`].
    pub fn decode(&self) -> Result<Vec<u16>, CodecError> {
        let mut copy = self.clone();
        copy.decode_internal()
    }

    fn decode_internal(&mut self) -> Result<Vec<u16>, CodecError> {
        let cb = HuffmanCodebook::from_lengths(self.code_lengths.clone())?;
        // Canonical decoding tables per length.
        let max_len = *cb.code_lengths().iter().max().unwrap();
        let mut order: Vec<u16> = (0..cb.num_symbols() as u16)
            .filter(|&s| cb.code_lengths()[s as usize] > 0)
            .collect();
        order.sort_by_key(|&s| (cb.code_lengths()[s as usize], s));
        let mut first_code = vec![0u64; max_len as usize + 1];
        let mut first_index = vec![0usize; max_len as usize + 1];
        let mut count = vec![0u64; max_len as usize + 1];
        for &s in &order {
            count[cb.code_lengths()[s as usize] as usize] += 1;
        }
        {
            let mut code = 0u64;
            let mut index = 0usize;
            for len in 1..=max_len as usize {
                first_code[len] = code;
                first_index[len] = index;
                code = (code + count[len]) << 1;
                index += count[len] as usize;
            }
        }

        let mut reader = BitReader::new(&self.payload);
        let mut out = Vec::with_capacity(self.num_values as usize);
        for decoded in 0..self.num_values {
            let mut code = 0u64;
            let mut len = 0u8;
            let symbol = loop {
                let Some(bit) = reader.next_bit() else {
                    return Err(CodecError::TruncatedPayload {
                        decoded,
                        expected: self.num_values,
                    });
                };
                code = (code << 1) | bit as u64;
                len += 1;
                let l = len as usize;
                if count[l] > 0 && code >= first_code[l] && code - first_code[l] < count[l] {
                    break order[first_index[l] + (code - first_code[l]) as usize];
                }
                if len >= max_len {
                    return Err(CodecError::InvalidCode {
                        bit: reader.bits_read(),
                        max_len,
                    });
                }
            };
            out.push(symbol);
        }
        if !reader.rest_is_zero() {
            return Err(CodecError::NonzeroPadding);
        }
        self.payload_bits = reader.bits_read();
        Ok(out)
    }
}

/// Encode a symbol sequence against a codebook.
///
/// `bits` is the quantizer bit width recorded in the header for rate
/// accounting; it does not affect the coding itself.
pub fn encode(
    symbols: &[u16],
    cb: &HuffmanCodebook,
    bits: u8,
) -> Result<EncodedStream, CodecError> {
    let mut writer = BitWriter::new();
    for &s in symbols {
        let (code, len) = cb.code(s).ok_or(CodecError::SymbolNotInCodebook(s))?;
        writer.write(code, len);
    }
    let payload_bits = writer.bits_written();
    Ok(EncodedStream {
        bits,
        code_lengths: cb.code_lengths().to_vec(),
        num_values: symbols.len() as u64,
        payload: writer.into_bytes(),
        payload_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(counts: &[u64]) -> Histogram {
        Histogram::new(counts.to_vec())
    }

    #[test]
    fn dyadic_source_meets_entropy() {
        let h = hist(&[2, 1, 1]);
        let cb = HuffmanCodebook::from_histogram(&h).unwrap();
        let mut lens = cb.code_lengths().to_vec();
        lens.sort();
        assert_eq!(lens, vec![1, 2, 2]);
        assert_eq!(cb.expected_length(&h), 1.5);
    }

    #[test]
    fn single_symbol_gets_length_one() {
        let h = hist(&[0, 7, 0]);
        let cb = HuffmanCodebook::from_histogram(&h).unwrap();
        assert_eq!(cb.code_lengths(), &[0, 1, 0]);
        assert_eq!(cb.expected_length(&h), 1.0);
    }

    #[test]
    fn four_symbol_expected_length() {
        // probs 0.4 / 0.3 / 0.2 / 0.1.
        let h = hist(&[4, 3, 2, 1]);
        let cb = HuffmanCodebook::from_histogram(&h).unwrap();
        assert!((cb.expected_length(&h) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn empty_histogram_rejected() {
        assert_eq!(
            HuffmanCodebook::from_histogram(&hist(&[0, 0])),
            Err(CodecError::EmptyHistogram)
        );
    }

    #[test]
    fn kraft_equality_for_multi_symbol_codebooks() {
        for counts in [
            vec![5u64, 3, 2],
            vec![1, 1, 1, 1, 1, 1, 1],
            vec![100, 1, 1, 7, 0, 13],
        ] {
            let cb = HuffmanCodebook::from_histogram(&hist(&counts)).unwrap();
            assert!((cb.kraft_sum() - 1.0).abs() < 1e-12, "{counts:?}");
        }
    }

    #[test]
    fn prefix_free() {
        let cb = HuffmanCodebook::from_histogram(&hist(&[9, 5, 5, 2, 1, 1])).unwrap();
        let codes: Vec<(u64, u8)> = (0..6).filter_map(|s| cb.code(s)).collect();
        for (i, &(ca, la)) in codes.iter().enumerate() {
            for (j, &(cb_, lb)) in codes.iter().enumerate() {
                if i == j {
                    continue;
                }
                if la <= lb {
                    assert_ne!(ca, cb_ >> (lb - la), "code {i} prefixes code {j}");
                }
            }
        }
    }

    #[test]
    fn deterministic_header_bytes() {
        let h = hist(&[3, 3, 2, 2, 2]);
        let a = encode(&[0, 1, 2], &HuffmanCodebook::from_histogram(&h).unwrap(), 3).unwrap();
        let b = encode(&[0, 1, 2], &HuffmanCodebook::from_histogram(&h).unwrap(), 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn empty_sequence_header_only() {
        let cb = HuffmanCodebook::from_histogram(&hist(&[1, 1])).unwrap();
        let s = encode(&[], &cb, 1).unwrap();
        assert_eq!(s.num_values(), 0);
        assert_eq!(s.payload_bits(), 0);
        assert_eq!(s.to_bytes().len(), s.header_bytes());
        let (parsed, symbols) = EncodedStream::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(symbols, Vec::<u16>::new());
        assert_eq!(parsed.measured_rate(), Err(CodecError::UndefinedRate));
    }

    #[test]
    fn single_symbol_stream_is_one_bit_per_value() {
        let cb = HuffmanCodebook::from_histogram(&hist(&[0, 42])).unwrap();
        let symbols = vec![1u16; 42];
        let s = encode(&symbols, &cb, 4).unwrap();
        assert_eq!(s.payload_bits(), 42);
        assert_eq!(s.measured_rate().unwrap(), 1.0);
        assert_eq!(s.decode().unwrap(), symbols);
    }

    #[test]
    fn payload_bits_equal_sum_of_code_lengths() {
        let h = hist(&[5, 4, 3, 2, 1]);
        let cb = HuffmanCodebook::from_histogram(&h).unwrap();
        let symbols: Vec<u16> = vec![0, 1, 2, 3, 4, 0, 0, 1, 2, 0];
        let s = encode(&symbols, &cb, 3).unwrap();
        let expected: u64 = symbols
            .iter()
            .map(|&sym| cb.code_lengths()[sym as usize] as u64)
            .sum();
        assert_eq!(s.payload_bits(), expected);
    }

    #[test]
    fn rate_of_dyadic_stream() {
        let h = hist(&[2, 1, 1]);
        let cb = HuffmanCodebook::from_histogram(&h).unwrap();
        let s = encode(&[0, 0, 1, 2], &cb, 2).unwrap();
        assert_eq!(s.measured_rate().unwrap(), 1.5);
    }

    #[test]
    fn encode_rejects_symbol_without_code() {
        let cb = HuffmanCodebook::from_histogram(&hist(&[1, 0, 1])).unwrap();
        assert_eq!(
            encode(&[1], &cb, 2),
            Err(CodecError::SymbolNotInCodebook(1))
        );
    }

    #[test]
    fn roundtrip_identity() {
        let h = hist(&[7, 1, 3, 2, 9, 4]);
        let cb = HuffmanCodebook::from_histogram(&h).unwrap();
        let symbols: Vec<u16> = (0..200).map(|i| ((i * 7 + i * i) % 6) as u16).collect();
        let s = encode(&symbols, &cb, 3).unwrap();
        let bytes = s.to_bytes();
        let (parsed, decoded) = EncodedStream::from_bytes(&bytes).unwrap();
        assert_eq!(decoded, symbols);
        assert_eq!(parsed.to_bytes(), bytes);
        assert_eq!(parsed.payload_bits(), s.payload_bits());
    }

    #[test]
    fn malformed_streams_rejected() {
        let h = hist(&[5, 3, 1]);
        let cb = HuffmanCodebook::from_histogram(&h).unwrap();
        let symbols: Vec<u16> = vec![0, 1, 2, 0, 1, 0];
        let good = encode(&symbols, &cb, 2).unwrap().to_bytes();

        // Corrupted magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            EncodedStream::from_bytes(&bad),
            Err(CodecError::BadMagic(_))
        ));

        // Unsupported version.
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            EncodedStream::from_bytes(&bad),
            Err(CodecError::UnsupportedVersion(9))
        ));

        // Truncated header.
        assert!(matches!(
            EncodedStream::from_bytes(&good[..6]),
            Err(CodecError::TruncatedHeader { .. })
        ));

        // Truncated payload.
        let bad = &good[..good.len() - 1];
        assert!(matches!(
            EncodedStream::from_bytes(bad),
            Err(CodecError::TruncatedPayload { .. })
        ));

        // Nonzero pad bits.
        let mut bad = good.clone();
        let last = bad.len() - 1;
        bad[last] |= 1;
        assert!(matches!(
            EncodedStream::from_bytes(&bad),
            Err(CodecError::NonzeroPadding)
        ));

        // Non-canonical lengths: oversubscribed Kraft sum.
        let mut bad = good.clone();
        bad[8] = 1;
        bad[9] = 1;
        bad[10] = 1;
        assert!(matches!(
            EncodedStream::from_bytes(&bad),
            Err(CodecError::NonCanonicalLengths(_))
        ));
    }
}
