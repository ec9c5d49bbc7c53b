//! 32-bit range coder with carry propagation, an adaptive order-0 byte model and an
//! adaptive binary model.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

/// Maximum total frequency of a [`ByteModel`]; keeps `range / total >= 2^8`.
const MAX_TOTAL: u32 = 1 << 16;
const INCREMENT: u32 = 32;

const BIT_MODEL_BITS: u32 = 11;
const BIT_MODEL_ONE: u16 = 1 << BIT_MODEL_BITS;
const BIT_ADAPT_SHIFT: u32 = 5;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    accounted: usize,
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
            accounted: 0,
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
        self.accounted += 1;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0 && cum + freq <= total && total <= MAX_TOTAL);
        let r = self.range / total;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        self.normalize();
    }

    pub fn encode_bit(&mut self, model: &mut BitModel, bit: bool) {
        let bound = (self.range >> BIT_MODEL_BITS) * model.p0 as u32;
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        model.update(bit);
        self.normalize();
    }

    pub fn encode_byte(&mut self, model: &mut ByteModel, symbol: u8) {
        let (cum, freq) = model.range_of(symbol);
        self.encode(cum, freq, model.total());
        model.update(symbol);
    }

    /// Bytes the coder has committed to so far, counted independently of the buffer.
    pub fn accounted_len(&self) -> usize {
        self.accounted
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        debug_assert_eq!(self.out.len(), self.accounted);
        self.out
    }
}

pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
    overrun: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < 5 {
            return Err(Error::Protocol(format!(
                "range-coded stream too short ({} bytes)",
                input.len()
            )));
        }
        let mut d = RangeDecoder {
            input,
            pos: 0,
            range: u32::MAX,
            code: 0,
            overrun: false,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> u8 {
        match self.input.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.overrun = true;
                0
            }
        }
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
    }

    pub fn decode_bit(&mut self, model: &mut BitModel) -> bool {
        let bound = (self.range >> BIT_MODEL_BITS) * model.p0 as u32;
        let bit = self.code >= bound;
        if bit {
            self.code -= bound;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        model.update(bit);
        self.normalize();
        bit
    }

    pub fn decode_byte(&mut self, model: &mut ByteModel) -> u8 {
        let total = model.total();
        let r = self.range / total;
        let target = (self.code / r).min(total - 1);
        let (symbol, cum, freq) = model.find(target);
        self.code -= r * cum;
        self.range = r * freq;
        model.update(symbol);
        self.normalize();
        symbol
    }

    /// Fails if the decoder had to read past the end of its input.
    pub fn check(&self) -> Result<()> {
        if self.overrun {
            return Err(Error::Protocol("range-coded stream ended early".into()));
        }
        Ok(())
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

/// Adaptive binary probability (of a zero bit), 11-bit precision.
#[derive(Debug, Clone, Copy)]
pub struct BitModel {
    p0: u16,
}

impl Default for BitModel {
    fn default() -> Self {
        BitModel {
            p0: BIT_MODEL_ONE / 2,
        }
    }
}

impl BitModel {
    fn update(&mut self, bit: bool) {
        if bit {
            self.p0 -= self.p0 >> BIT_ADAPT_SHIFT;
        } else {
            self.p0 += (BIT_MODEL_ONE - self.p0) >> BIT_ADAPT_SHIFT;
        }
    }
}

/// Adaptive order-0 frequency model over 256 symbols backed by a Fenwick tree.
#[derive(Debug, Clone)]
pub struct ByteModel {
    freq: [u32; 256],
    tree: [u32; 257],
    total: u32,
}

impl Default for ByteModel {
    fn default() -> Self {
        Self::new()
    }
}

impl ByteModel {
    pub fn new() -> Self {
        let mut m = ByteModel {
            freq: [1; 256],
            tree: [0; 257],
            total: 256,
        };
        m.rebuild();
        m
    }

    fn rebuild(&mut self) {
        self.tree = [0; 257];
        for i in 0..256 {
            let mut j = i + 1;
            while j <= 256 {
                self.tree[j] += self.freq[i];
                j += j & j.wrapping_neg();
            }
        }
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    fn prefix(&self, symbol: usize) -> u32 {
        let mut sum = 0;
        let mut j = symbol;
        while j > 0 {
            sum += self.tree[j];
            j &= j - 1;
        }
        sum
    }

    fn range_of(&self, symbol: u8) -> (u32, u32) {
        (self.prefix(symbol as usize), self.freq[symbol as usize])
    }

    /// Symbol whose cumulative range contains `target`.
    fn find(&self, target: u32) -> (u8, u32, u32) {
        let mut pos = 0usize;
        let mut rem = target;
        let mut step = 256;
        while step > 0 {
            let next = pos + step;
            if next <= 256 && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        (pos as u8, target - rem, self.freq[pos])
    }

    fn update(&mut self, symbol: u8) {
        let s = symbol as usize;
        self.freq[s] += INCREMENT;
        self.total += INCREMENT;
        if self.total > MAX_TOTAL {
            self.total = 0;
            for f in self.freq.iter_mut() {
                *f = (*f + 1) / 2;
                self.total += *f;
            }
            self.rebuild();
        } else {
            let mut j = s + 1;
            while j <= 256 {
                self.tree[j] += INCREMENT;
                j += j & j.wrapping_neg();
            }
        }
    }
}
