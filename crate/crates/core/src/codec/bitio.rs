//! MSB-first bit packing.

/// Packs bits most-significant-first into bytes, zero-padding the tail.
#[derive(Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_pos: u32,
    bits_written: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter::default()
    }

    /// Append the low `len` bits of `code`, most significant bit first.
    pub fn write(&mut self, code: u64, len: u8) {
        debug_assert!(len as u32 <= 64);
        for i in (0..len).rev() {
            let bit = ((code >> i) & 1) as u8;
            if self.bit_pos == 0 {
                self.bytes.push(0);
            }
            let last = self.bytes.last_mut().unwrap();
            *last |= bit << (7 - self.bit_pos);
            self.bit_pos = (self.bit_pos + 1) % 8;
        }
        self.bits_written += len as u64;
    }

    pub fn bits_written(&self) -> u64 {
        self.bits_written
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Reads bits most-significant-first from a byte slice.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    cursor: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, cursor: 0 }
    }

    /// Next bit, or `None` past the end of the buffer.
    pub fn next_bit(&mut self) -> Option<u8> {
        let byte = (self.cursor / 8) as usize;
        if byte >= self.bytes.len() {
            return None;
        }
        let bit = (self.bytes[byte] >> (7 - (self.cursor % 8))) & 1;
        self.cursor += 1;
        Some(bit)
    }

    pub fn bits_read(&self) -> u64 {
        self.cursor
    }

    /// True when every bit from the cursor to the end of the buffer is zero.
    pub fn rest_is_zero(&self) -> bool {
        let mut cursor = self.cursor;
        while cursor % 8 != 0 {
            let byte = (cursor / 8) as usize;
            if byte >= self.bytes.len() {
                return true;
            }
            if (self.bytes[byte] >> (7 - (cursor % 8))) & 1 != 0 {
                return false;
            }
            cursor += 1;
        }
        self.bytes[(cursor / 8) as usize..].iter().all(|&b| b == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bits() {
        let mut w = BitWriter::new();
        w.write(0b101, 3);
        w.write(0b1, 1);
        w.write(0b00110, 5);
        assert_eq!(w.bits_written(), 9);
        let bytes = w.into_bytes();
        assert_eq!(bytes.len(), 2);
        // 1011 0011 | 0_______
        assert_eq!(bytes[0], 0b1011_0011);
        assert_eq!(bytes[1], 0b0000_0000);

        let mut r = BitReader::new(&bytes);
        let got: Vec<u8> = (0..9).map(|_| r.next_bit().unwrap()).collect();
        assert_eq!(got, vec![1, 0, 1, 1, 0, 0, 1, 1, 0]);
        assert!(r.rest_is_zero());
    }

    #[test]
    fn detects_nonzero_tail() {
        let bytes = [0b1000_0001u8];
        let mut r = BitReader::new(&bytes);
        r.next_bit();
        assert!(!r.rest_is_zero());
        for _ in 0..7 {
            r.next_bit();
        }
        assert!(r.next_bit().is_none());
    }
}
