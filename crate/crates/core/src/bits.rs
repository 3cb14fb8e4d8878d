//! Bit-packed ±1 tensors.
//!
//! Values are packed with the channel axis innermost: every spatial position
//! `(n, y, x)` owns `ceil(c / 64)` consecutive words, and channel `j` lives in
//! bit `j % 64` of word `j / 64`. Bit 1 encodes +1, bit 0 encodes -1. Bits past
//! the last channel are always zero.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};

pub const WORD_BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape,
    blocks: usize,
    words: Vec<u64>,
}

pub fn blocks_for(channels: usize) -> usize {
    channels.div_ceil(WORD_BITS)
}

/// Number of meaningful bits in channel block `block` of a `channels`-wide tensor.
#[inline]
pub fn valid_bits(channels: usize, block: usize) -> u32 {
    (channels - block * WORD_BITS).min(WORD_BITS) as u32
}

impl BitTensor {
    /// Builds a tensor from a predicate: `true` means +1.
    pub fn from_fn(shape: Shape, mut bit: impl FnMut(usize, usize, usize, usize) -> bool) -> Self {
        let blocks = blocks_for(shape.c);
        let mut words = vec![0u64; shape.n * shape.h * shape.w * blocks];
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        if bit(n, c, y, x) {
                            let pixel = (n * shape.h + y) * shape.w + x;
                            words[pixel * blocks + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
                        }
                    }
                }
            }
        }
        BitTensor { shape, blocks, words }
    }

    /// Wraps raw words, rejecting non-canonical pad bits.
    pub fn from_words(shape: Shape, words: Vec<u64>) -> Result<Self> {
        let blocks = blocks_for(shape.c);
        let expected = shape.n * shape.h * shape.w * blocks;
        if words.len() != expected {
            return Err(Error::shape("BitTensor::from_words", expected, words.len()));
        }
        if blocks > 0 {
            let tail = valid_bits(shape.c, blocks - 1);
            if tail < WORD_BITS as u32 {
                let pad_mask = !((1u64 << tail) - 1);
                if let Some(i) = words
                    .chunks(blocks)
                    .position(|px| px[blocks - 1] & pad_mask != 0)
                {
                    return Err(Error::shape("BitTensor pad bits", 0, format!("pixel {i}")));
                }
            }
        }
        Ok(BitTensor { shape, blocks, words })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// The `blocks()` words of spatial position `(n, y, x)`.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[u64] {
        let p = (n * self.shape.h + y) * self.shape.w + x;
        &self.words[p * self.blocks..(p + 1) * self.blocks]
    }

    #[inline]
    pub fn bit(&self, n: usize, c: usize, y: usize, x: usize) -> bool {
        (self.pixel(n, y, x)[c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn value(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        if self.bit(n, c, y, x) {
            1.0
        } else {
            -1.0
        }
    }
}

/// Packs a tensor whose entries are exactly +1.0 or -1.0.
pub fn pack(t: &FloatTensor) -> Result<BitTensor> {
    if let Some((index, &value)) = t
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 1.0 && v != -1.0)
    {
        return Err(Error::NonBinaryInput { index, value });
    }
    Ok(BitTensor::from_fn(t.shape(), |n, c, y, x| t.at(n, c, y, x) == 1.0))
}

/// Packs `Sign(t)`, with `Sign(0) = -1`.
pub fn pack_sign(t: &FloatTensor) -> BitTensor {
    BitTensor::from_fn(t.shape(), |n, c, y, x| t.at(n, c, y, x) > 0.0)
}

pub fn unpack(b: &BitTensor) -> FloatTensor {
    let s = b.shape();
    let mut data = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    data.push(b.value(n, c, y, x));
                }
            }
        }
    }
    FloatTensor::from_raw(s, data)
}
