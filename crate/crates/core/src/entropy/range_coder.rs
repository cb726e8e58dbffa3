//! Integer range coder with carry propagation through a cached byte and a
//! run of pending `0xFF` bytes.
//!
//! Frequencies are given with a fixed 16-bit total. The symbol whose
//! interval ends at the total takes whatever range the truncated division
//! left over, so no code space is wasted at the top.
//!
//! The flush writes a single byte of the final interval and drops trailing
//! zero bytes; the decoder reads past the end as zeros.

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
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
            pending: 0,
            started: false,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[start, start + freq)` of `TOTAL`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * start as u64;
        if start + freq == TOTAL {
            self.range -= r * start;
        } else {
            self.range = r * freq;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            if self.started {
                self.out.push(self.cache.wrapping_add(carry));
            } else {
                // The very first cached byte is always zero; it is not stored.
                debug_assert_eq!(self.cache.wrapping_add(carry), 0);
                self.started = true;
            }
            for _ in 0..self.pending {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = (self.low >> 24) as u8;
        } else {
            self.pending += 1;
        }
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Smallest multiple of 2^24 at or above `low`; it lies inside the
        // interval because the range never drops below 2^24.
        self.low = (self.low + (TOP as u64 - 1)) & !(TOP as u64 - 1);
        self.shift_low();
        self.shift_low();
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            buf,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.buf.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Decodes one symbol against the cumulative table `cum` (length
    /// `symbols + 1`, `cum[0] = 0`, last entry `TOTAL`).
    pub fn decode(&mut self, cum: &[u32]) -> usize {
        let r = self.range >> PRECISION_BITS;
        let v = (self.code / r).min(TOTAL - 1);
        let s = cum.partition_point(|&c| c <= v) - 1;
        let (start, end) = (cum[s], cum[s + 1]);
        self.code -= r * start;
        if end == TOTAL {
            self.range -= r * start;
        } else {
            self.range = r * (end - start);
        }
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
        s
    }

    /// Bytes consumed so far, counting implicit zeros past the end.
    pub fn position(&self) -> usize {
        self.pos
    }
}
