//! Binary arithmetic coder over integer frequency tables with a 62-bit
//! interval, plus the bit-level I/O it writes through.

use crate::error::{Error, Result};

/// Denominator of every coded distribution.
pub const TOTAL_BITS: u32 = 20;
pub const TOTAL: u64 = 1 << TOTAL_BITS;

const PRECISION: u32 = 62;
const TOP: u64 = (1 << PRECISION) - 1;
const HALF: u64 = 1 << (PRECISION - 1);
const QUARTER: u64 = 1 << (PRECISION - 2);

/// Cumulative integer distribution: symbol `s` owns `[cum[s], cum[s + 1])`
/// out of [`TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqTable {
    cum: Vec<u64>,
}

impl FreqTable {
    /// Requantizes logits to integer frequencies summing to [`TOTAL`], each
    /// at least one. Counts are rounded to nearest so the coded distribution
    /// stays unbiased; the rounding residue goes to the most likely symbol.
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        Ok(Self::with_log_norm(logits)?.0)
    }

    /// [`FreqTable::from_logits`] plus the log partition function of the
    /// logits, so `logits[t] - norm` is the model's log probability of `t`.
    pub fn with_log_norm(logits: &[f32]) -> Result<(Self, f64)> {
        let v = logits.len();
        if v == 0 || v as u64 >= TOTAL / 2 {
            return Err(Error::Config(format!("cannot code an alphabet of {v} symbols")));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let p: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
        let z: f64 = p.iter().sum();
        let scale = TOTAL as f64 / z;
        let mut f: Vec<u64> = p.iter().map(|x| ((x * scale + 0.5) as u64).max(1)).collect();
        let top = (0..v).fold(0, |b, i| if f[i] > f[b] { i } else { b });
        let sum: u64 = f.iter().sum();
        if sum <= TOTAL {
            f[top] += TOTAL - sum;
        } else if f[top] > sum - TOTAL {
            f[top] -= sum - TOTAL;
        } else {
            // Pathological rounding excess: reserve the floors first.
            let spare = (TOTAL - v as u64) as f64;
            f = p.iter().map(|x| 1 + (x / z * spare).floor() as u64).collect();
            let sum: u64 = f.iter().sum();
            f[top] += TOTAL - sum;
        }
        Ok((Self::from_freqs(&f), max + z.ln()))
    }

    pub fn from_freqs(f: &[u64]) -> Self {
        let mut cum = Vec::with_capacity(f.len() + 1);
        cum.push(0);
        for &x in f {
            cum.push(cum.last().unwrap() + x);
        }
        debug_assert_eq!(*cum.last().unwrap(), TOTAL);
        Self { cum }
    }

    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn freq(&self, s: usize) -> u64 {
        self.cum[s + 1] - self.cum[s]
    }

    /// Ideal code length of `s`, in bits.
    pub fn bits(&self, s: usize) -> f64 {
        TOTAL_BITS as f64 - (self.freq(s) as f64).log2()
    }

    fn find(&self, target: u64) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

#[derive(Default, Debug)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bit: bool) {
        if self.bits % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bits % 8);
        }
        self.bits += 1;
    }

    /// Writes the low `n` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, n: u32) {
        for i in (0..n).rev() {
            self.push((value >> i) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    /// Bytes with the final byte zero-padded.
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    limit: u64,
}

impl<'a> BitReader<'a> {
    /// Reads at most `limit` bits; past that, reads yield zeros.
    pub fn new(bytes: &'a [u8], limit: u64) -> Self {
        Self {
            bytes,
            pos: 0,
            limit: limit.min(bytes.len() as u64 * 8),
        }
    }

    pub fn bit(&mut self) -> bool {
        let b = self.pos < self.limit && self.bytes[(self.pos / 8) as usize] & (0x80 >> (self.pos % 8)) != 0;
        self.pos += 1;
        b
    }

    pub fn bits(&mut self, n: u32) -> u64 {
        (0..n).fold(0, |acc, _| (acc << 1) | u64::from(self.bit()))
    }

    pub fn position(&self) -> u64 {
        self.pos
    }
}

pub struct ArithEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Default for ArithEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArithEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            high: TOP,
            pending: 0,
            out: BitWriter::new(),
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    pub fn encode(&mut self, table: &FreqTable, s: usize) {
        let range = (self.high - self.low + 1) as u128;
        let (lo, hi) = (table.cum[s] as u128, table.cum[s + 1] as u128);
        self.high = self.low + (range * hi / TOTAL as u128) as u64 - 1;
        self.low += (range * lo / TOTAL as u128) as u64;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    /// Flushes two disambiguating bits; a reader padding with zeros lands
    /// inside the final interval.
    pub fn finish(mut self) -> BitWriter {
        self.pending += 1;
        self.emit(self.low >= QUARTER);
        self.out
    }

    pub fn bit_len(&self) -> u64 {
        self.out.bit_len()
    }
}

pub struct ArithDecoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    input: BitReader<'a>,
}

impl<'a> ArithDecoder<'a> {
    pub fn new(mut input: BitReader<'a>) -> Self {
        let value = input.bits(PRECISION);
        Self { low: 0, high: TOP, value, input }
    }

    pub fn decode(&mut self, table: &FreqTable) -> usize {
        let range = (self.high - self.low + 1) as u128;
        let offset = (self.value - self.low) as u128;
        let target = (((offset + 1) * TOTAL as u128 - 1) / range) as u64;
        let s = table.find(target.min(TOTAL - 1));
        let (lo, hi) = (table.cum[s] as u128, table.cum[s + 1] as u128);
        self.high = self.low + (range * hi / TOTAL as u128) as u64 - 1;
        self.low += (range * lo / TOTAL as u128) as u64;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < HALF + QUARTER {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | u64::from(self.input.bit());
        }
        s
    }

    /// Bits consumed beyond the initial fill.
    pub fn position(&self) -> u64 {
        self.input.position()
    }
}
