//! Quantized frequency tables over a window of integer symbols plus an
//! escape symbol, and the symbol-level encode/decode loops built on them.

use crate::entropy::range_coder::{RangeDecoder, RangeEncoder, TOTAL_FREQ};
use crate::error::{Error, Result};

/// Largest magnitude of a codable symbol.
pub const SYMBOL_MIN: i32 = -(1 << 15);
pub const SYMBOL_MAX: i32 = (1 << 15) - 1;
/// Largest half-width of a table window around its center.
pub const MAX_HALF_WIDTH: i32 = 255;

/// Cumulative frequencies for the symbols `offset..offset + n` followed by one
/// escape symbol that carries anything outside the window.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolTable {
    offset: i32,
    cdf: Vec<u32>,
}

impl SymbolTable {
    /// Builds a table from probabilities of the in-window symbols plus the
    /// mass left for the escape symbol. Every entry receives frequency ≥ 1.
    pub fn from_pmf(offset: i32, pmf: &[f64], escape_mass: f64) -> Result<Self> {
        let n = pmf.len() + 1;
        if pmf.is_empty() || n as u32 > TOTAL_FREQ / 2 {
            return Err(Error::Encode(format!("table with {} symbols", pmf.len())));
        }
        let mut p: Vec<f64> = pmf.iter().copied().chain(std::iter::once(escape_mass)).collect();
        for v in p.iter_mut() {
            if !v.is_finite() || *v < 0.0 {
                *v = 0.0;
            }
        }
        let total: f64 = p.iter().sum();
        let spare = (TOTAL_FREQ - n as u32) as f64;
        let mut freq: Vec<u32> = if total > 0.0 {
            p.iter().map(|&v| 1 + (v / total * spare).floor() as u32).collect()
        } else {
            vec![1; n]
        };
        let assigned: u32 = freq.iter().sum();
        let largest = (0..n).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        freq[largest] += TOTAL_FREQ - assigned;
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, TOTAL_FREQ);
        Ok(SymbolTable { offset, cdf })
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Number of in-window symbols (the escape is not counted).
    pub fn window(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    fn escape_index(&self) -> usize {
        self.cdf.len() - 2
    }

    /// Probability the coder assigns to `v` (escape mass for values outside
    /// the window, ignoring the bypass bits).
    pub fn coded_probability(&self, v: i32) -> f64 {
        let i = self.index_of(v).unwrap_or(self.escape_index());
        (self.cdf[i + 1] - self.cdf[i]) as f64 / TOTAL_FREQ as f64
    }

    fn index_of(&self, v: i32) -> Option<usize> {
        let i = v as i64 - self.offset as i64;
        (i >= 0 && (i as usize) < self.window()).then_some(i as usize)
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i32) -> Result<()> {
        if !(SYMBOL_MIN..=SYMBOL_MAX).contains(&v) {
            return Err(Error::Encode(format!(
                "symbol {v} outside [{SYMBOL_MIN}, {SYMBOL_MAX}]"
            )));
        }
        match self.index_of(v) {
            Some(i) => enc.encode(&self.cdf, i),
            None => {
                enc.encode(&self.cdf, self.escape_index());
                let (below, dist) = if v < self.offset {
                    (true, (self.offset - 1 - v) as u32)
                } else {
                    (false, (v - self.offset - self.window() as i32) as u32)
                };
                enc.encode_bits(below as u32, 1);
                // Elias-gamma style: bit length, then the bits below the top one.
                let x = dist + 1;
                let len = 32 - x.leading_zeros();
                enc.encode_bits(len - 1, 5);
                enc.encode_bits(x & ((1 << (len - 1)) - 1), len - 1);
            }
        }
        Ok(())
    }

    pub fn decode(&self, dec: &mut RangeDecoder<'_>) -> Result<i32> {
        let i = dec.decode(&self.cdf)?;
        if i < self.window() {
            return Ok(self.offset + i as i32);
        }
        let below = dec.decode_bits(1)? == 1;
        let len = dec.decode_bits(5)? + 1;
        if len > 17 {
            return Err(Error::Decode(format!("escape length {len} out of range")));
        }
        let x = (1u32 << (len - 1)) | dec.decode_bits(len - 1)?;
        let dist = (x - 1) as i64;
        let v = if below {
            self.offset as i64 - 1 - dist
        } else {
            self.offset as i64 + self.window() as i64 + dist
        };
        if v < SYMBOL_MIN as i64 || v > SYMBOL_MAX as i64 {
            return Err(Error::Decode(format!("escaped symbol {v} out of range")));
        }
        Ok(v as i32)
    }
}

/// Supplies the table for symbol `index`, given every symbol coded before it.
pub trait CdfProvider {
    fn table(&mut self, index: usize, previous: &[i32]) -> Result<&SymbolTable>;
}

/// One table for every symbol.
impl CdfProvider for SymbolTable {
    fn table(&mut self, _: usize, _: &[i32]) -> Result<&SymbolTable> {
        Ok(self)
    }
}

/// Channel-major symbols with one table per channel.
pub struct ChannelTables {
    pub tables: Vec<SymbolTable>,
    pub per_channel: usize,
}

impl CdfProvider for ChannelTables {
    fn table(&mut self, index: usize, _: &[i32]) -> Result<&SymbolTable> {
        self.tables
            .get(index / self.per_channel.max(1))
            .ok_or_else(|| Error::Contract(format!("no table for symbol {index}")))
    }
}

/// Range-codes `symbols` in order. An empty list yields an empty payload.
pub fn range_encode(symbols: &[i32], provider: &mut impl CdfProvider) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut enc = RangeEncoder::new();
    for (i, &v) in symbols.iter().enumerate() {
        provider.table(i, &symbols[..i])?.encode(&mut enc, v)?;
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`].
pub fn range_decode(
    bytes: &[u8],
    provider: &mut impl CdfProvider,
    count: usize,
) -> Result<Vec<i32>> {
    if count == 0 {
        if !bytes.is_empty() {
            return Err(Error::Decode(format!(
                "{} payload bytes for zero symbols",
                bytes.len()
            )));
        }
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let v = provider.table(i, &out)?.decode(&mut dec)?;
        out.push(v);
    }
    Ok(out)
}

/// Window `[lo, hi]` of half-width at most [`MAX_HALF_WIDTH`] around `center`,
/// clipped to the codable symbol range.
pub fn window_around(center: i32, half_width: i32) -> (i32, i32) {
    let hw = half_width.clamp(1, MAX_HALF_WIDTH);
    let c = center.clamp(SYMBOL_MIN + hw, SYMBOL_MAX - hw);
    (c - hw, c + hw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> SymbolTable {
        SymbolTable::from_pmf(-2, &[0.1, 0.2, 0.4, 0.2, 0.1], 1e-3).unwrap()
    }

    #[test]
    fn cdf_is_strictly_increasing_and_full() {
        let t = SymbolTable::from_pmf(0, &[1.0, 0.0, 1e-30, 0.5], 0.0).unwrap();
        assert_eq!(*t.cdf().last().unwrap(), TOTAL_FREQ);
        assert!(t.cdf().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn empty_list_has_empty_payload() {
        let t = table();
        let mut p = t.clone();
        let bytes = range_encode(&[], &mut p).unwrap();
        assert!(bytes.is_empty());
        assert!(range_decode(&bytes, &mut p, 0).unwrap().is_empty());
    }

    #[test]
    fn escapes_round_trip_at_extremes() {
        let t = table();
        let syms = vec![0, 2, 3, -3, SYMBOL_MAX, SYMBOL_MIN, 1000, -1000, -2];
        let mut p = t.clone();
        let bytes = range_encode(&syms, &mut p).unwrap();
        assert_eq!(range_decode(&bytes, &mut p, syms.len()).unwrap(), syms);
    }

    #[test]
    fn out_of_range_symbol_is_encode_error() {
        let t = table();
        let mut p = t.clone();
        assert!(matches!(
            range_encode(&[SYMBOL_MAX + 1], &mut p),
            Err(Error::Encode(_))
        ));
    }

    #[test]
    fn corrupt_bytes_never_panic() {
        let t = table();
        let mut p = t.clone();
        let syms: Vec<i32> = (0..300).map(|i| (i % 7) - 3).collect();
        let bytes = range_encode(&syms, &mut p).unwrap();
        for k in 0..bytes.len() {
            let mut b = bytes.clone();
            b[k] ^= 0xA5;
            let _ = range_decode(&b, &mut p, syms.len());
        }
        let _ = range_decode(&[0xFF; 8], &mut p, 100);
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_symbols(syms in proptest::collection::vec(-40i32..40, 0..200),
                                        center in -5i32..5, hw in 1i32..10) {
            let (lo, hi) = window_around(center, hw);
            let pmf: Vec<f64> = (lo..=hi).map(|k| (-((k - center) as f64).powi(2) / 8.0).exp()).collect();
            let t = SymbolTable::from_pmf(lo, &pmf, 1e-4).unwrap();
            let mut p = t.clone();
            let bytes = range_encode(&syms, &mut p).unwrap();
            prop_assert_eq!(range_decode(&bytes, &mut p, syms.len()).unwrap(), syms);
        }
    }
}
