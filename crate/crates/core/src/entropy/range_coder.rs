//! Byte-oriented range coder over 16-bit fixed-point CDFs.
//!
//! 32-bit range with carry propagation through a cached byte and a run of
//! pending `0xFF` bytes. All arithmetic is integer, so streams are identical
//! on every platform. The leading byte of the classic formulation is always
//! zero and is not written; trailing zero bytes of the final flush are dropped
//! and implied by the decoder.

use super::cdf::{QuantizedCdf, CDF_PRECISION, CDF_TOTAL};
use crate::error::CoderError;

const TOP: u32 = 1 << 24;

/// How far past the end of the buffer a valid stream may be read.
const MAX_IMPLIED_BYTES: usize = 8;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: usize, cdf: &QuantizedCdf) -> Result<(), CoderError> {
        let (start, end) = cdf.interval(symbol).ok_or(CoderError::SymbolOutOfRange {
            symbol,
            alphabet: cdf.symbols(),
        })?;
        if end <= start {
            return Err(CoderError::ZeroMass(symbol));
        }
        let r = self.range >> CDF_PRECISION;
        self.low += r as u64 * start as u64;
        self.range = if end == CDF_TOTAL {
            self.range - r * start
        } else {
            r * (end - start)
        };
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            self.skip_first = false;
            debug_assert_eq!(byte, 0);
        } else {
            self.out.push(byte);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Pick the value in [low, low + range) with the most trailing zero bits.
        let end = self.low + self.range as u64;
        for k in (0..=32).rev() {
            let mask = (1u64 << k) - 1;
            let v = (self.low + mask) & !mask;
            if v < end {
                self.low = v;
                break;
            }
        }
        let before = self.out.len();
        for _ in 0..5 {
            self.shift_low();
        }
        while self.out.len() > before && self.out.last() == Some(&0) {
            self.out.pop();
        }
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
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut d = Self {
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

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = if self.pos < self.data.len() {
            self.data[self.pos]
        } else if self.pos < self.data.len() + MAX_IMPLIED_BYTES {
            0
        } else {
            return Err(CoderError::Truncated);
        };
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize, CoderError> {
        let r = self.range >> CDF_PRECISION;
        let target = (self.code / r).min(CDF_TOTAL - 1);
        let symbol = cdf.lookup(target);
        let (start, end) = cdf.interval(symbol).ok_or(CoderError::Corrupt)?;
        self.code -= r * start;
        self.range = if end == CDF_TOTAL {
            self.range - r * start
        } else {
            r * (end - start)
        };
        if self.code >= self.range {
            return Err(CoderError::Corrupt);
        }
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes of the buffer consumed so far (may exceed its length by the implied tail).
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Encodes `symbols[i]` with `cdfs[i]`.
pub fn range_encode(symbols: &[usize], cdfs: &[&QuantizedCdf]) -> Result<Vec<u8>, CoderError> {
    if symbols.len() != cdfs.len() {
        return Err(CoderError::MalformedCdf(format!(
            "{} symbols but {} tables",
            symbols.len(),
            cdfs.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols; `cdfs` must match the tables used to encode.
pub fn range_decode(bytes: &[u8], cdfs: &[&QuantizedCdf], count: usize) -> Result<Vec<usize>, CoderError> {
    if cdfs.len() < count {
        return Err(CoderError::MalformedCdf(format!("{count} symbols but {} tables", cdfs.len())));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    cdfs[..count].iter().map(|cdf| dec.decode(cdf)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize) -> QuantizedCdf {
        QuantizedCdf::from_pmf(&vec![1.0; n]).unwrap()
    }

    #[test]
    fn empty_input() {
        let bytes = range_encode(&[], &[]).unwrap();
        assert!(bytes.is_empty());
        assert!(range_decode(&bytes, &[], 0).unwrap().is_empty());
    }

    #[test]
    fn uniform_bytes_cost_eight_bits() {
        let cdf = uniform(256);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let symbols: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..256)).collect();
        let tables = vec![&cdf; symbols.len()];
        let bytes = range_encode(&symbols, &tables).unwrap();
        assert!(bytes.len() >= 9_996 && bytes.len() <= 10_006, "{}", bytes.len());
        assert_eq!(range_decode(&bytes, &tables, symbols.len()).unwrap(), symbols);
    }

    #[test]
    fn near_certain_symbol_is_nearly_free() {
        let cdf = QuantizedCdf::from_cumulative(vec![0, CDF_TOTAL - 1, CDF_TOTAL]).unwrap();
        let symbols = vec![0usize; 1000];
        let tables = vec![&cdf; 1000];
        let bytes = range_encode(&symbols, &tables).unwrap();
        // Entropy is 1000 * log2(65536 / 65535) ~ 22 bits.
        assert!(bytes.len() <= 30, "{}", bytes.len());
        assert_eq!(range_decode(&bytes, &tables, 1000).unwrap(), symbols);

        // Same check with the likely symbol placed last in the table.
        let cdf = QuantizedCdf::from_cumulative(vec![0, 1, CDF_TOTAL]).unwrap();
        let symbols = vec![1usize; 1000];
        let tables = vec![&cdf; 1000];
        let bytes = range_encode(&symbols, &tables).unwrap();
        assert!(bytes.len() <= 30, "{}", bytes.len());
        assert_eq!(range_decode(&bytes, &tables, 1000).unwrap(), symbols);
    }

    #[test]
    fn rejects_symbols_outside_support() {
        let cdf = uniform(4);
        let err = range_encode(&[4], &[&cdf]).unwrap_err();
        assert_eq!(err, CoderError::SymbolOutOfRange { symbol: 4, alphabet: 4 });
    }

    #[test]
    fn truncated_stream_is_detected() {
        let cdf = uniform(256);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let symbols: Vec<usize> = (0..500).map(|_| rng.random_range(0..256)).collect();
        let tables = vec![&cdf; symbols.len()];
        let bytes = range_encode(&symbols, &tables).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(range_decode(cut, &tables, symbols.len()).is_err());
    }

    #[test]
    fn garbage_never_panics() {
        let cdf = QuantizedCdf::gaussian(0.0, 0.3, 255).unwrap();
        let tables = vec![&cdf; 2000];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let len = rng.random_range(0..64);
            let junk: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let _ = range_decode(&junk, &tables, 2000);
        }
    }

    #[test]
    fn length_tracks_ideal_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tables: Vec<QuantizedCdf> = (0..3000)
            .map(|_| QuantizedCdf::gaussian(rng.random_range(-5.0..5.0), rng.random_range(0.04..8.0), 255).unwrap())
            .collect();
        let symbols: Vec<usize> = tables
            .iter()
            .map(|t| {
                let target = rng.random_range(0..CDF_TOTAL);
                t.lookup(target)
            })
            .collect();
        let ideal: f64 = symbols.iter().zip(&tables).map(|(&s, t)| t.cost(s)).sum();
        let refs: Vec<&QuantizedCdf> = tables.iter().collect();
        let bytes = range_encode(&symbols, &refs).unwrap();
        let actual = bytes.len() as f64 * 8.0;
        // Overhead: <= 32 bits of flush plus a small per-symbol precision loss.
        assert!(actual <= ideal + 32.0 + 2.0 * 3000.0 * 2f64.powi(-8), "{actual} vs {ideal}");
        assert_eq!(range_decode(&bytes, &refs, symbols.len()).unwrap(), symbols);
    }

    proptest! {
        #[test]
        fn round_trip(
            weights in proptest::collection::vec(0.0f64..10.0, 1..40),
            picks in proptest::collection::vec(0usize..1000, 0..300),
        ) {
            let cdf = QuantizedCdf::from_pmf(&weights).unwrap();
            let symbols: Vec<usize> = picks.iter().map(|p| p % weights.len()).collect();
            let tables = vec![&cdf; symbols.len()];
            let bytes = range_encode(&symbols, &tables).unwrap();
            prop_assert_eq!(range_decode(&bytes, &tables, symbols.len()).unwrap(), symbols);
        }
    }
}
