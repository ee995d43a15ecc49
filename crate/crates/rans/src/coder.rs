//! Byte-renormalized rANS with a 32-bit state.
//!
//! Symbols are turned into a forward list of `(start, freq, scale)` operations,
//! which the encoder pushes in reverse so the decoder pops them in order.
//! Out-of-support values are sent as the escape slot followed by raw bits:
//! one direction bit, then the overflow magnitude in 4-bit chunks each
//! followed by a continuation bit.

use crate::cdf::CdfTableSet;
use crate::{CoderError, Result};

/// Lower bound of the normalized state interval `[RANS_L, RANS_L << 8)`.
pub const RANS_L: u32 = 1 << 16;

const CHUNK_BITS: u32 = 4;
/// Enough chunks for any 32-bit magnitude; bounds decoding on corrupt input.
const MAX_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Op {
    start: u32,
    freq: u32,
    scale: u32,
}

impl Op {
    fn raw(value: u32, bits: u32) -> Self {
        Op {
            start: value,
            freq: 1,
            scale: bits,
        }
    }
}

fn push_ops(ops: &mut Vec<Op>, tables: &CdfTableSet, table: usize, value: i32) {
    let cdf = tables.cdf(table);
    let scale = tables.precision();
    let slot = tables.code(table, value);
    ops.push(Op {
        start: cdf[slot],
        freq: cdf[slot + 1] - cdf[slot],
        scale,
    });
    if slot + 1 != tables.slots(table) {
        return;
    }
    let support = tables.support(table);
    let (below, mut magnitude) = if value < *support.start() {
        (1, (*support.start() as i64 - 1 - value as i64) as u64)
    } else {
        (0, (value as i64 - *support.end() as i64 - 1) as u64)
    };
    ops.push(Op::raw(below, 1));
    loop {
        let chunk = (magnitude & ((1 << CHUNK_BITS) - 1)) as u32;
        magnitude >>= CHUNK_BITS;
        ops.push(Op::raw(chunk, CHUNK_BITS));
        ops.push(Op::raw((magnitude != 0) as u32, 1));
        if magnitude == 0 {
            break;
        }
    }
}

fn check_ids(table_ids: &[u32], tables: &CdfTableSet) -> Result<()> {
    if let Some(&bad) = table_ids.iter().find(|&&t| t as usize >= tables.len()) {
        return Err(CoderError::TableId {
            id: bad,
            count: tables.len(),
        });
    }
    Ok(())
}

/// Encodes `symbols[i]` with table `table_ids[i]`.
pub fn encode(symbols: &[i32], table_ids: &[u32], tables: &CdfTableSet) -> Result<Vec<u8>> {
    if symbols.len() != table_ids.len() {
        return Err(CoderError::LengthMismatch {
            symbols: symbols.len(),
            ids: table_ids.len(),
        });
    }
    check_ids(table_ids, tables)?;

    let mut ops = Vec::with_capacity(symbols.len());
    for (&s, &t) in symbols.iter().zip(table_ids) {
        push_ops(&mut ops, tables, t as usize, s);
    }

    let mut out = Vec::with_capacity(ops.len() / 2 + 4);
    let mut state = RANS_L;
    for op in ops.iter().rev() {
        let x_max = ((RANS_L >> op.scale) << 8) * op.freq;
        while state >= x_max {
            out.push(state as u8);
            state >>= 8;
        }
        state = ((state / op.freq) << op.scale) + (state % op.freq) + op.start;
    }
    out.extend_from_slice(&state.to_le_bytes());
    out.reverse();
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    state: u32,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        let head = bytes.get(..4).ok_or(CoderError::Truncated)?;
        let state = u32::from_be_bytes(head.try_into().unwrap());
        if !(RANS_L..RANS_L << 8).contains(&state) {
            return Err(CoderError::Corrupt("initial state out of range"));
        }
        Ok(Self {
            bytes,
            pos: 4,
            state,
        })
    }

    fn peek(&self, scale: u32) -> u32 {
        self.state & ((1 << scale) - 1)
    }

    fn advance(&mut self, start: u32, freq: u32, scale: u32) -> Result<()> {
        let slot = self.peek(scale);
        self.state = freq * (self.state >> scale) + slot - start;
        while self.state < RANS_L {
            let b = *self.bytes.get(self.pos).ok_or(CoderError::Truncated)?;
            self.pos += 1;
            self.state = (self.state << 8) | b as u32;
        }
        Ok(())
    }

    fn raw(&mut self, bits: u32) -> Result<u32> {
        let v = self.peek(bits);
        self.advance(v, 1, bits)?;
        Ok(v)
    }
}

/// Forward decoder that pulls one symbol at a time, for callers whose table
/// choice depends on previously decoded values.
pub struct RansDecoder<'a> {
    reader: Reader<'a>,
}

impl<'a> RansDecoder<'a> {
    pub fn new(stream: &'a [u8]) -> Result<Self> {
        Ok(Self {
            reader: Reader::new(stream)?,
        })
    }

    pub fn decode_one(&mut self, tables: &CdfTableSet, table: u32) -> Result<i32> {
        if table as usize >= tables.len() {
            return Err(CoderError::TableId {
                id: table,
                count: tables.len(),
            });
        }
        let t = table as usize;
        let reader = &mut self.reader;
        let precision = tables.precision();
        let slot = tables.lookup(t, reader.peek(precision));
        let cdf = tables.cdf(t);
        reader.advance(cdf[slot], cdf[slot + 1] - cdf[slot], precision)?;
        if slot + 1 != tables.slots(t) {
            return Ok(tables.offset(t) + slot as i32);
        }
        let below = reader.raw(1)? == 1;
        let mut magnitude = 0u64;
        let mut chunks = 0;
        loop {
            if chunks == MAX_CHUNKS {
                return Err(CoderError::Corrupt("bypass magnitude too long"));
            }
            magnitude |= (reader.raw(CHUNK_BITS)? as u64) << (CHUNK_BITS as usize * chunks);
            chunks += 1;
            if reader.raw(1)? == 0 {
                break;
            }
        }
        let support = tables.support(t);
        let value = if below {
            *support.start() as i64 - 1 - magnitude as i64
        } else {
            *support.end() as i64 + 1 + magnitude as i64
        };
        i32::try_from(value).map_err(|_| CoderError::Corrupt("bypass value overflows"))
    }

    /// Checks that the stream ended exactly where the encoder stopped.
    pub fn finish(self) -> Result<()> {
        if self.reader.state != RANS_L {
            return Err(CoderError::Corrupt("final state mismatch"));
        }
        if self.reader.pos != self.reader.bytes.len() {
            return Err(CoderError::Corrupt("trailing bytes after final symbol"));
        }
        Ok(())
    }
}

/// Decodes `n` symbols; `table_ids` must match the encoder's.
pub fn decode(stream: &[u8], table_ids: &[u32], tables: &CdfTableSet, n: usize) -> Result<Vec<i32>> {
    if table_ids.len() != n {
        return Err(CoderError::LengthMismatch {
            symbols: n,
            ids: table_ids.len(),
        });
    }
    check_ids(table_ids, tables)?;

    let mut decoder = RansDecoder::new(stream)?;
    let out = table_ids
        .iter()
        .map(|&t| decoder.decode_one(tables, t))
        .collect::<Result<Vec<_>>>()?;
    decoder.finish()?;
    Ok(out)
}

/// Ideal code length in bits of `symbols` under the quantized tables,
/// bypass payload included.
pub fn ideal_bits(symbols: &[i32], table_ids: &[u32], tables: &CdfTableSet) -> f64 {
    let mut ops = Vec::new();
    for (&s, &t) in symbols.iter().zip(table_ids) {
        push_ops(&mut ops, tables, t as usize, s);
    }
    ops.iter()
        .map(|op| op.scale as f64 - (op.freq as f64).log2())
        .sum()
}
