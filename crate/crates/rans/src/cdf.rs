//! Quantized cumulative frequency tables shared by the encoder and decoder.
//!
//! Every table covers a contiguous run of symbol values `offset ..= offset + n - 2`
//! followed by one escape slot (index `n - 1`) that routes out-of-support values
//! to the bypass coder.

use crate::{CoderError, Result};

/// Fixed-point precision of every table, in bits.
pub const PRECISION: u32 = 16;

/// A set of quantized CDFs, one per scale bin or per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTableSet {
    cdfs: Vec<Vec<u32>>,
    offsets: Vec<i32>,
    lengths: Vec<u32>,
    precision: u32,
}

/// The same tables as flat primitive buffers, the layout used across the
/// native coder boundary and inside checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatTables {
    /// Concatenated CDFs; table `i` occupies `lengths[i] + 1` entries.
    pub cdfs: Vec<u32>,
    pub offsets: Vec<i32>,
    pub lengths: Vec<u32>,
    pub precision: u32,
}

impl CdfTableSet {
    /// Builds a table set from per-table CDFs and validates every invariant.
    pub fn new(cdfs: Vec<Vec<u32>>, offsets: Vec<i32>, precision: u32) -> Result<Self> {
        if cdfs.len() != offsets.len() {
            return Err(CoderError::InvalidTable(format!(
                "{} cdfs but {} offsets",
                cdfs.len(),
                offsets.len()
            )));
        }
        let lengths = cdfs.iter().map(|c| c.len().saturating_sub(1) as u32).collect();
        let set = Self {
            cdfs,
            offsets,
            lengths,
            precision,
        };
        set.validate()?;
        Ok(set)
    }

    /// Quantizes one real-valued PMF per table. `pmfs[i]` must already contain
    /// the escape slot's mass as its last entry.
    pub fn from_pmfs(pmfs: &[Vec<f64>], offsets: Vec<i32>, precision: u32) -> Result<Self> {
        let cdfs = pmfs
            .iter()
            .map(|p| quantize_pmf(p, precision))
            .collect::<Result<Vec<_>>>()?;
        Self::new(cdfs, offsets, precision)
    }

    pub fn from_flat(flat: &FlatTables) -> Result<Self> {
        if flat.offsets.len() != flat.lengths.len() {
            return Err(CoderError::InvalidTable(
                "offsets and lengths differ in count".into(),
            ));
        }
        let mut cdfs = Vec::with_capacity(flat.lengths.len());
        let mut pos = 0usize;
        for &len in &flat.lengths {
            let end = pos + len as usize + 1;
            let Some(cdf) = flat.cdfs.get(pos..end) else {
                return Err(CoderError::InvalidTable("flat cdf buffer too short".into()));
            };
            cdfs.push(cdf.to_vec());
            pos = end;
        }
        if pos != flat.cdfs.len() {
            return Err(CoderError::InvalidTable("trailing entries in flat cdf buffer".into()));
        }
        Self::new(cdfs, flat.offsets.clone(), flat.precision)
    }

    pub fn flatten(&self) -> FlatTables {
        FlatTables {
            cdfs: self.cdfs.iter().flatten().copied().collect(),
            offsets: self.offsets.clone(),
            lengths: self.lengths.clone(),
            precision: self.precision,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.precision == 0 || self.precision > PRECISION {
            return Err(CoderError::InvalidTable(format!(
                "precision {} outside 1..={PRECISION}",
                self.precision
            )));
        }
        let total = 1u32 << self.precision;
        for (i, cdf) in self.cdfs.iter().enumerate() {
            if cdf.len() < 2 {
                return Err(CoderError::InvalidTable(format!("table {i} has no slots")));
            }
            if cdf[0] != 0 || *cdf.last().unwrap() != total {
                return Err(CoderError::InvalidTable(format!(
                    "table {i} must span 0..={total}"
                )));
            }
            if cdf.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CoderError::InvalidTable(format!(
                    "table {i} is not strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cdfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdfs.is_empty()
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn cdf(&self, table: usize) -> &[u32] {
        &self.cdfs[table]
    }

    pub fn offset(&self, table: usize) -> i32 {
        self.offsets[table]
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    /// Number of slots in a table, escape slot included.
    pub fn slots(&self, table: usize) -> usize {
        self.lengths[table] as usize
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }

    /// Range of symbol values coded directly (without bypass) by `table`.
    pub fn support(&self, table: usize) -> std::ops::RangeInclusive<i32> {
        let lo = self.offsets[table];
        lo..=lo + self.slots(table) as i32 - 2
    }

    /// Maps a symbol value to its slot, or the escape slot when out of support.
    pub fn code(&self, table: usize, value: i32) -> usize {
        let slots = self.slots(table);
        let rel = value as i64 - self.offsets[table] as i64;
        if rel >= 0 && rel < slots as i64 - 1 {
            rel as usize
        } else {
            slots - 1
        }
    }

    /// Finds the slot whose cumulative interval contains `cum`.
    pub fn lookup(&self, table: usize, cum: u32) -> usize {
        let cdf = &self.cdfs[table];
        cdf.partition_point(|&c| c <= cum) - 1
    }

    /// Quantized probability of a slot.
    pub fn slot_probability(&self, table: usize, slot: usize) -> f64 {
        let cdf = &self.cdfs[table];
        (cdf[slot + 1] - cdf[slot]) as f64 / (1u64 << self.precision) as f64
    }
}

/// Real-valued frequencies summing to `2^precision` with every slot at least
/// one unit: slots that would fall below the floor are pinned to it and the
/// remaining mass is rescaled over the others until nothing else drops below.
pub fn floored_frequencies(pmf: &[f64], precision: u32) -> Vec<f64> {
    let n = pmf.len();
    let total = (1u64 << precision) as f64;
    let sum: f64 = pmf.iter().sum();
    let base: Vec<f64> = if sum > 0.0 {
        pmf.iter().map(|p| p / sum).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    let mut pinned = vec![false; n];
    loop {
        let free_mass: f64 = (0..n).filter(|&i| !pinned[i]).map(|i| base[i]).sum();
        let budget = total - pinned.iter().filter(|&&p| p).count() as f64;
        let scale = if free_mass > 0.0 { budget / free_mass } else { 0.0 };
        let mut changed = false;
        for i in 0..n {
            if !pinned[i] && base[i] * scale < 1.0 {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return (0..n)
                .map(|i| if pinned[i] { 1.0 } else { base[i] * scale })
                .collect();
        }
    }
}

/// Quantizes a PMF to integer frequencies summing to `2^precision`, every
/// slot receiving at least one unit.
///
/// Largest-remainder rounding of [`floored_frequencies`]: each slot ends up
/// within one unit of its floored, renormalized share.
pub fn quantize_pmf(pmf: &[f64], precision: u32) -> Result<Vec<u32>> {
    let n = pmf.len();
    let total = 1u64 << precision;
    if n == 0 || n as u64 > total {
        return Err(CoderError::InvalidTable(format!(
            "cannot quantize {n} slots at {precision} bits"
        )));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(CoderError::InvalidTable("pmf has negative or non-finite mass".into()));
    }
    let target = floored_frequencies(pmf, precision);
    let mut freq: Vec<u64> = target.iter().map(|t| (t.floor() as u64).max(1)).collect();
    let assigned: u64 = freq.iter().sum();
    let remainder: Vec<f64> = (0..n).map(|i| target[i] - freq[i] as f64).collect();
    let mut order: Vec<usize> = (0..n).collect();
    if assigned < total {
        order.sort_by(|&a, &b| remainder[b].total_cmp(&remainder[a]).then(a.cmp(&b)));
        for k in 0..(total - assigned) as usize {
            freq[order[k % n]] += 1;
        }
    } else if assigned > total {
        // Only reachable through rounding noise in the floored targets.
        order.retain(|&i| freq[i] > 1);
        order.sort_by(|&a, &b| remainder[a].total_cmp(&remainder[b]).then(a.cmp(&b)));
        let mut excess = assigned - total;
        let mut k = 0;
        while excess > 0 {
            let i = order[k % order.len()];
            if freq[i] > 1 {
                freq[i] -= 1;
                excess -= 1;
            }
            k += 1;
        }
    }

    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u64;
    cdf.push(0);
    for f in freq {
        acc += f;
        cdf.push(acc as u32);
    }
    debug_assert_eq!(acc, total);
    Ok(cdf)
}
