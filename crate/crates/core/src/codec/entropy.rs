//! Adaptive order-0 arithmetic coding with a 32-bit range coder.
//!
//! Stream layout: `u32` symbol count (little-endian), then the coder bytes.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

/// Symbol frequencies in a Fenwick tree; every count starts at 1.
struct AdaptiveModel {
    tree: Vec<u32>,
    counts: Vec<u32>,
    total: u32,
    limit: u32,
}

impl AdaptiveModel {
    fn new(alphabet: usize) -> Self {
        let mut m = AdaptiveModel {
            tree: vec![0; alphabet + 1],
            counts: vec![1; alphabet],
            total: 0,
            limit: (1u32 << 16).max(2 * alphabet as u32),
        };
        m.rebuild();
        m
    }

    fn rebuild(&mut self) {
        self.tree.iter_mut().for_each(|t| *t = 0);
        for i in 0..self.counts.len() {
            let c = self.counts[i];
            self.add(i, c);
        }
        self.total = self.counts.iter().sum();
    }

    fn add(&mut self, sym: usize, delta: u32) {
        let mut i = sym + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Cumulative count of symbols `< sym`.
    fn cum(&self, sym: usize) -> u32 {
        let mut i = sym;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i &= i - 1;
        }
        s
    }

    /// Symbol whose interval contains `target`, and its start.
    fn find(&self, target: u32) -> (usize, u32) {
        let n = self.counts.len();
        let mut pos = 0;
        let mut rem = target;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        (pos, target - rem)
    }

    fn update(&mut self, sym: usize) {
        self.counts[sym] += 1;
        self.add(sym, 1);
        self.total += 1;
        if self.total > self.limit {
            for c in &mut self.counts {
                *c = (*c + 1) / 2;
            }
            self.rebuild();
        }
    }
}

struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Encoder {
    fn new(out: Vec<u8>) -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out,
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

    fn encode(&mut self, start: u32, size: u32, total: u32) {
        let r = self.range / total;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

struct Decoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Decoder {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Container("truncated entropy stream".into()))?;
        self.pos += 1;
        Ok(b)
    }

    fn target(&mut self, total: u32) -> (u32, u32) {
        let r = self.range / total;
        ((self.code / r).min(total - 1), r)
    }

    fn consume(&mut self, start: u32, size: u32, r: u32) -> Result<()> {
        self.code = self.code.wrapping_sub(start * r);
        self.range = size * r;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }
}

/// Codes symbols drawn from `0..alphabet`.
pub fn encode_symbols(symbols: &[u32], alphabet: usize) -> Vec<u8> {
    assert!(alphabet >= 1 && alphabet <= 1 << 17, "alphabet {alphabet}");
    let mut out = Vec::with_capacity(symbols.len() / 2 + 16);
    out.extend_from_slice(&(symbols.len() as u32).to_le_bytes());
    let mut model = AdaptiveModel::new(alphabet);
    let mut enc = Encoder::new(out);
    for &s in symbols {
        let s = s as usize;
        assert!(s < alphabet, "symbol {s} outside alphabet {alphabet}");
        enc.encode(model.cum(s), model.counts[s], model.total);
        model.update(s);
    }
    enc.finish()
}

/// Inverse of [`encode_symbols`]; returns the symbols and bytes consumed.
pub fn decode_symbols(bytes: &[u8], alphabet: usize) -> Result<(Vec<u32>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Container("truncated symbol count".into()));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    // every symbol costs at least a few bits only after the first; bound the
    // allocation by what the stream could plausibly hold
    let mut out = Vec::with_capacity(n.min(bytes.len() * 64));
    let mut model = AdaptiveModel::new(alphabet);
    let mut dec = Decoder::new(&bytes[4..])?;
    for _ in 0..n {
        let (target, r) = dec.target(model.total);
        let (sym, start) = model.find(target);
        if sym >= alphabet {
            return Err(Error::Container("corrupt entropy stream".into()));
        }
        dec.consume(start, model.counts[sym], r)?;
        model.update(sym);
        out.push(sym as u32);
    }
    Ok((out, 4 + dec.pos))
}

/// Signed `b`-bit integers in `+-(2^(b-1) - 1)` over a `2^b - 1` alphabet.
pub fn entropy_encode(ints: &[i32], bits: u8) -> Vec<u8> {
    let q = super::quant::qmax(bits);
    let syms: Vec<u32> = ints
        .iter()
        .map(|&v| {
            assert!(v.abs() <= q, "{v} outside {bits}-bit range");
            (v + q) as u32
        })
        .collect();
    encode_symbols(&syms, (2 * q + 1) as usize)
}

pub fn entropy_decode(bytes: &[u8], bits: u8) -> Result<(Vec<i32>, usize)> {
    let q = super::quant::qmax(bits);
    let (syms, used) = decode_symbols(bytes, (2 * q + 1) as usize)?;
    Ok((syms.into_iter().map(|s| s as i32 - q).collect(), used))
}
