//! Byte-oriented range coder with 16-bit frequency tables.
//!
//! The encoder follows the classic LZMA carry-propagating scheme (64-bit
//! `low`, 32-bit `range`, one cached byte). The leading byte that scheme
//! always emits is zero and is not stored.

use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Encodes the sub-interval `[start, start + freq)` of `2^bits`.
    pub fn encode_freq(&mut self, start: u32, freq: u32, bits: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << bits);
        let r = self.range >> bits;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Encodes symbol `sym` under a cumulative table (`cdf[0] = 0`,
    /// `cdf[n] = 2^16`, strictly increasing).
    pub fn encode(&mut self, cdf: &[u32], sym: usize) {
        self.encode_freq(cdf[sym], cdf[sym + 1] - cdf[sym], PRECISION_BITS);
    }

    /// Writes `bits` raw bits (at most 16) of `value`.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= PRECISION_BITS && value < 1 << bits);
        if bits > 0 {
            self.encode_freq(value, 1, bits);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out[0], 0);
        self.out.remove(0);
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Decode(format!(
                "range-coded payload of {} bytes is shorter than the 4-byte preamble",
                data.len()
            )));
        }
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Decode(format!("payload truncated at byte {}", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    fn target(&self, bits: u32) -> Result<(u32, u32)> {
        let r = self.range >> bits;
        let v = self.code / r;
        if v >= 1 << bits {
            return Err(Error::Decode("corrupt payload: code outside range".into()));
        }
        Ok((r, v))
    }

    pub fn decode(&mut self, cdf: &[u32]) -> Result<usize> {
        let (r, v) = self.target(PRECISION_BITS)?;
        // Largest s with cdf[s] <= v.
        let sym = cdf.partition_point(|&c| c <= v) - 1;
        if sym + 1 >= cdf.len() {
            return Err(Error::Decode("corrupt payload: symbol past table".into()));
        }
        self.code -= r * cdf[sym];
        self.range = r * (cdf[sym + 1] - cdf[sym]);
        self.normalize()?;
        Ok(sym)
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        if bits == 0 {
            return Ok(0);
        }
        let (r, v) = self.target(bits)?;
        self.code -= r * v;
        self.range = r;
        self.normalize()?;
        Ok(v)
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_cdf(n: u32) -> Vec<u32> {
        (0..=n).map(|i| i * TOTAL_FREQ / n).collect()
    }

    #[test]
    fn round_trip_mixed_symbols_and_bits() {
        let cdf = uniform_cdf(7);
        let mut enc = RangeEncoder::new();
        for i in 0..500u32 {
            enc.encode(&cdf, (i * 5 % 7) as usize);
            enc.encode_bits(i % 8, 3);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for i in 0..500u32 {
            assert_eq!(dec.decode(&cdf).unwrap(), (i * 5 % 7) as usize);
            assert_eq!(dec.decode_bits(3).unwrap(), i % 8);
        }
        assert_eq!(dec.bytes_consumed(), bytes.len());
    }

    #[test]
    fn carry_propagation_round_trip() {
        // Highly skewed table pushes `low` near the top repeatedly.
        let cdf = vec![0, 1, TOTAL_FREQ];
        let syms: Vec<usize> = (0..20_000).map(|i| if i % 97 == 0 { 0 } else { 1 }).collect();
        let mut enc = RangeEncoder::new();
        for &s in &syms {
            enc.encode(&cdf, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &s in &syms {
            assert_eq!(dec.decode(&cdf).unwrap(), s);
        }
    }

    #[test]
    fn truncated_payload_errors() {
        let cdf = uniform_cdf(256);
        let mut enc = RangeEncoder::new();
        for i in 0..100 {
            enc.encode(&cdf, i);
        }
        let bytes = enc.finish();
        let cut = &bytes[..bytes.len() / 2];
        let mut dec = RangeDecoder::new(cut).unwrap();
        let res: Result<Vec<usize>> = (0..100).map(|_| dec.decode(&cdf)).collect();
        assert!(matches!(res, Err(Error::Decode(_))));
        assert!(RangeDecoder::new(&bytes[..2]).is_err());
    }
}
