//! Batched slot store for cached keys, values and interaction keys.
//!
//! One buffer holds one layer. Storage is `[batch][capacity][width]`; the
//! first `extent` slots of every row form the block attention reads, and
//! `valid` marks which of them hold live tokens. Freed slots are refilled
//! leftmost first. When the longest row's live count drops below
//! `min_load_factor · extent` the rows are compacted and the allocation is
//! trimmed to the new extent.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_MIN_LOAD_FACTOR: f64 = 0.9;
pub const DEFAULT_GROWTH_FACTOR: f64 = 2.0;
const NO_POSITION: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheOp {
    Push,
    Remove,
    Compact,
}

/// Buffer geometry after one operation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSample {
    pub op: CacheOp,
    pub extent: usize,
    pub capacity: usize,
    pub max_kept: usize,
    pub load_factor: f64,
}

#[derive(Clone, Debug)]
pub struct KvCacheBuffer<T> {
    batch: usize,
    width: usize,
    capacity: usize,
    extent: usize,
    storage: Vec<T>,
    valid: Vec<bool>,
    positions: Vec<u32>,
    kept: Vec<usize>,
    /// No free slot exists left of `cursor[b]` in row `b`.
    cursor: Vec<usize>,
    min_load_factor: f64,
    growth_factor: f64,
    poison: bool,
    history: Option<Vec<LoadSample>>,
}

/// Read-only view of the live block returned by [`KvCacheBuffer::get`].
#[derive(Clone, Copy, Debug)]
pub struct KvView<'a, T> {
    data: &'a [T],
    valid: &'a [bool],
    positions: &'a [u32],
    batch: usize,
    extent: usize,
    capacity: usize,
    width: usize,
}

impl<'a, T: Scalar> KvView<'a, T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row `b`'s block: `extent` slots of `width` values each, contiguous.
    pub fn row(&self, b: usize) -> &'a [T] {
        let start = b * self.capacity * self.width;
        &self.data[start..start + self.extent * self.width]
    }

    /// Validity of row `b`'s `extent` slots.
    pub fn mask(&self, b: usize) -> &'a [bool] {
        let start = b * self.capacity;
        &self.valid[start..start + self.extent]
    }

    /// Position ids of row `b`'s slots ([`u32::MAX`] for empty slots).
    pub fn positions(&self, b: usize) -> &'a [u32] {
        let start = b * self.capacity;
        &self.positions[start..start + self.extent]
    }

    /// Payload of a live slot; `None` for holes and padding.
    pub fn slot(&self, b: usize, slot: usize) -> Option<&'a [T]> {
        if slot < self.extent && self.mask(b)[slot] {
            Some(&self.row(b)[slot * self.width..(slot + 1) * self.width])
        } else {
            None
        }
    }
}

impl<T: Scalar> KvCacheBuffer<T> {
    pub fn new(batch: usize, width: usize) -> Result<Self> {
        Self::with_params(batch, width, 0, DEFAULT_MIN_LOAD_FACTOR, DEFAULT_GROWTH_FACTOR)
    }

    pub fn with_params(
        batch: usize,
        width: usize,
        initial_capacity: usize,
        min_load_factor: f64,
        growth_factor: f64,
    ) -> Result<Self> {
        if batch == 0 || width == 0 {
            return Err(Error::Cache("batch and width must be positive".into()));
        }
        if !(min_load_factor > 0.0 && min_load_factor <= 1.0) {
            return Err(Error::Cache(format!("min_load_factor {min_load_factor} not in (0, 1]")));
        }
        if !(growth_factor > 1.0 && growth_factor.is_finite()) {
            return Err(Error::Cache(format!("growth_factor {growth_factor} must exceed 1")));
        }
        Ok(Self {
            batch,
            width,
            capacity: initial_capacity,
            extent: 0,
            storage: vec![T::zero(); batch * initial_capacity * width],
            valid: vec![false; batch * initial_capacity],
            positions: vec![NO_POSITION; batch * initial_capacity],
            kept: vec![0; batch],
            cursor: vec![0; batch],
            min_load_factor,
            growth_factor,
            poison: false,
            history: None,
        })
    }

    /// Overwrite freed slots with NaN so stray reads surface in outputs.
    pub fn set_poison(&mut self, on: bool) {
        self.poison = on;
    }

    /// Start recording a [`LoadSample`] after every operation.
    pub fn record_history(&mut self) {
        self.history.get_or_insert_with(Vec::new);
    }

    pub fn history(&self) -> &[LoadSample] {
        self.history.as_deref().unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn kept(&self, b: usize) -> usize {
        self.kept[b]
    }

    pub fn max_kept(&self) -> usize {
        self.kept.iter().copied().max().unwrap_or(0)
    }

    /// Longest row's live count over the extent; 1 when empty.
    pub fn load_factor(&self) -> f64 {
        if self.extent == 0 {
            1.0
        } else {
            self.max_kept() as f64 / self.extent as f64
        }
    }

    /// Bytes of allocated slot storage.
    pub fn bytes(&self) -> usize {
        self.storage.len() * std::mem::size_of::<T>()
    }

    pub fn get(&self) -> KvView<'_, T> {
        KvView {
            data: &self.storage,
            valid: &self.valid,
            positions: &self.positions,
            batch: self.batch,
            extent: self.extent,
            capacity: self.capacity,
            width: self.width,
        }
    }

    /// Inserts one token per active row at its leftmost free slot.
    ///
    /// `tokens` is `[batch × width]`; `positions` gives each token's sequence
    /// position. Rows with `active[b] == false` are skipped. Returns the slot
    /// each row's token landed in.
    pub fn push(&mut self, tokens: &[T], positions: &[u32], active: Option<&[bool]>) -> Result<Vec<Option<usize>>> {
        if tokens.len() != self.batch * self.width || positions.len() != self.batch {
            return Err(Error::Cache(format!(
                "push expects {}x{} values and {} positions, got {} and {}",
                self.batch,
                self.width,
                self.batch,
                tokens.len(),
                positions.len()
            )));
        }
        if active.is_some_and(|a| a.len() != self.batch) {
            return Err(Error::Cache("active flags must have one entry per row".into()));
        }
        let mut slots = Vec::with_capacity(self.batch);
        for b in 0..self.batch {
            if active.is_some_and(|a| !a[b]) {
                slots.push(None);
                continue;
            }
            let slot = self.free_slot(b);
            if slot == self.capacity {
                self.grow();
            }
            let base = b * self.capacity;
            self.valid[base + slot] = true;
            self.positions[base + slot] = positions[b];
            let dst = (base + slot) * self.width;
            self.storage[dst..dst + self.width].copy_from_slice(&tokens[b * self.width..(b + 1) * self.width]);
            self.kept[b] += 1;
            self.cursor[b] = slot + 1;
            self.extent = self.extent.max(slot + 1);
            slots.push(Some(slot));
        }
        self.note(CacheOp::Push);
        Ok(slots)
    }

    fn free_slot(&self, b: usize) -> usize {
        let base = b * self.capacity;
        (self.cursor[b]..self.capacity)
            .find(|&s| !self.valid[base + s])
            .unwrap_or(self.capacity)
    }

    fn grow(&mut self) {
        let target = ((self.capacity as f64 * self.growth_factor).ceil() as usize).max(self.capacity + 1);
        self.relayout(target, false);
    }

    /// Copies every row into a buffer of `new_capacity` slots, optionally
    /// packing live slots to the front in their current order.
    fn relayout(&mut self, new_capacity: usize, pack: bool) {
        let w = self.width;
        let mut storage = vec![T::zero(); self.batch * new_capacity * w];
        let mut valid = vec![false; self.batch * new_capacity];
        let mut positions = vec![NO_POSITION; self.batch * new_capacity];
        for b in 0..self.batch {
            let (old, new) = (b * self.capacity, b * new_capacity);
            let mut dst = 0;
            for s in 0..self.extent.min(self.capacity) {
                if pack && !self.valid[old + s] {
                    continue;
                }
                valid[new + dst] = self.valid[old + s];
                positions[new + dst] = self.positions[old + s];
                storage[(new + dst) * w..(new + dst + 1) * w]
                    .copy_from_slice(&self.storage[(old + s) * w..(old + s + 1) * w]);
                dst += 1;
            }
            if pack {
                self.cursor[b] = dst;
            }
        }
        self.storage = storage;
        self.valid = valid;
        self.positions = positions;
        self.capacity = new_capacity;
    }

    /// Invalidates the slots marked in `drop_mask` (`[batch × extent]`).
    ///
    /// Returns whether the buffer was compacted. Dropping a slot that is not
    /// live is an error and leaves the buffer untouched.
    pub fn remove(&mut self, drop_mask: &[bool]) -> Result<bool> {
        let e = self.extent;
        if drop_mask.len() != self.batch * e {
            return Err(Error::Cache(format!(
                "drop mask has {} entries, expected {}x{}",
                drop_mask.len(),
                self.batch,
                e
            )));
        }
        for b in 0..self.batch {
            for s in 0..e {
                if drop_mask[b * e + s] && !self.valid[b * self.capacity + s] {
                    return Err(Error::Cache(format!("row {b} slot {s} dropped but not live")));
                }
            }
        }
        for b in 0..self.batch {
            let base = b * self.capacity;
            for s in 0..e {
                if drop_mask[b * e + s] {
                    self.valid[base + s] = false;
                    self.positions[base + s] = NO_POSITION;
                    if self.poison {
                        self.storage[(base + s) * self.width..(base + s + 1) * self.width].fill(T::nan());
                    }
                    self.kept[b] -= 1;
                    self.cursor[b] = self.cursor[b].min(s);
                }
            }
        }
        while self.extent > 0 && (0..self.batch).all(|b| !self.valid[b * self.capacity + self.extent - 1]) {
            self.extent -= 1;
        }
        self.note(CacheOp::Remove);
        if self.load_factor() < self.min_load_factor {
            self.compact();
            return Ok(true);
        }
        Ok(false)
    }

    /// Packs each row's live slots to the front, preserving order, and trims
    /// the allocation to the longest row.
    pub fn compact(&mut self) {
        let target = self.max_kept();
        self.relayout(target, true);
        self.extent = target;
        self.note(CacheOp::Compact);
    }

    /// Overwrites every non-live slot with `value`.
    pub fn scribble_free_slots(&mut self, value: T) {
        for (i, &v) in self.valid.iter().enumerate() {
            if !v {
                self.storage[i * self.width..(i + 1) * self.width].fill(value);
            }
        }
    }

    fn note(&mut self, op: CacheOp) {
        let sample = LoadSample {
            op,
            extent: self.extent,
            capacity: self.capacity,
            max_kept: self.max_kept(),
            load_factor: self.load_factor(),
        };
        if let Some(h) = self.history.as_mut() {
            h.push(sample);
        }
    }

    /// Validity map as CSV: one line per row, `extent` 0/1 columns.
    pub fn write_validity_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let view = self.get();
        for b in 0..self.batch {
            let line: Vec<&str> = view.mask(b).iter().map(|&v| if v { "1" } else { "0" }).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "index,op,extent,capacity,max_kept,load_factor")?;
        for (i, s) in self.history().iter().enumerate() {
            let op = match s.op {
                CacheOp::Push => "push",
                CacheOp::Remove => "remove",
                CacheOp::Compact => "compact",
            };
            writeln!(out, "{i},{op},{},{},{},{}", s.extent, s.capacity, s.max_kept, s.load_factor)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok(batch: usize, width: usize, v: f32) -> Vec<f32> {
        (0..batch * width).map(|i| v + i as f32 * 0.01).collect()
    }

    #[test]
    fn fresh_and_first_push() {
        let mut c = KvCacheBuffer::<f32>::new(1, 2).unwrap();
        assert_eq!(c.get().extent(), 0);
        assert_eq!(c.push(&tok(1, 2, 1.0), &[0], None).unwrap(), vec![Some(0)]);
        assert_eq!(c.extent(), 1);
        for i in 1..3 {
            c.push(&tok(1, 2, 1.0 + i as f32), &[i], None).unwrap();
        }
        assert_eq!(c.get().mask(0), &[true, true, true]);
    }

    #[test]
    fn push_fills_leftmost_hole() {
        let mut c = KvCacheBuffer::<f32>::with_params(1, 1, 0, 0.5, 2.0).unwrap();
        for i in 0..4 {
            c.push(&[i as f32], &[i], None).unwrap();
        }
        c.remove(&[false, true, false, false]).unwrap();
        assert_eq!(c.get().mask(0), &[true, false, true, true]);
        assert_eq!(c.push(&[9.0], &[4], None).unwrap(), vec![Some(1)]);
        assert_eq!(c.extent(), 4);
        assert_eq!(c.get().slot(0, 1), Some(&[9.0][..]));
    }

    #[test]
    fn growth_preserves_contents() {
        let mut c = KvCacheBuffer::<f32>::with_params(2, 3, 4, 0.9, 2.0).unwrap();
        for i in 0..4 {
            c.push(&tok(2, 3, i as f32), &[i, i], None).unwrap();
        }
        let before: Vec<Vec<f32>> = (0..2).map(|b| c.get().row(b).to_vec()).collect();
        c.push(&tok(2, 3, 7.0), &[4, 4], None).unwrap();
        assert_eq!(c.capacity(), 8);
        for (b, prev) in before.iter().enumerate() {
            assert_eq!(&c.get().row(b)[..12], prev.as_slice());
        }
    }

    #[test]
    fn compaction_on_low_load_factor() {
        let mut c = KvCacheBuffer::<f32>::with_params(1, 1, 10, 0.9, 2.0).unwrap();
        for i in 0..10 {
            c.push(&[i as f32], &[i], None).unwrap();
        }
        let mut drop = vec![false; 10];
        drop[2] = true;
        drop[5] = true;
        assert!(c.remove(&drop).unwrap());
        assert_eq!(c.extent(), 8);
        assert_eq!(c.capacity(), 8);
        assert_eq!(c.load_factor(), 1.0);
        assert_eq!(c.get().row(0), &[0.0, 1.0, 3.0, 4.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(c.get().positions(0), &[0, 1, 3, 4, 6, 7, 8, 9]);
    }

    #[test]
    fn zero_mask_is_a_no_op() {
        let mut c = KvCacheBuffer::<f32>::new(2, 1).unwrap();
        c.push(&[1.0, 2.0], &[0, 0], None).unwrap();
        let snapshot = c.clone();
        assert!(!c.remove(&[false, false]).unwrap());
        assert_eq!(c.get().row(0), snapshot.get().row(0));
        assert_eq!(c.extent(), 1);
    }

    #[test]
    fn errors() {
        let mut c = KvCacheBuffer::<f32>::new(2, 2).unwrap();
        assert!(c.push(&[1.0; 3], &[0, 0], None).is_err());
        c.push(&[1.0; 4], &[0, 0], Some(&[true, false])).unwrap();
        assert!(c.remove(&[false]).is_err());
        assert!(matches!(c.remove(&[false, true]), Err(Error::Cache(_))));
        assert_eq!(c.kept(0), 1);
        assert!(KvCacheBuffer::<f32>::with_params(1, 1, 0, 1.5, 2.0).is_err());
    }

    #[test]
    fn skipped_rows_do_not_grow() {
        let mut c = KvCacheBuffer::<f32>::new(2, 1).unwrap();
        c.push(&[1.0, 2.0], &[0, 0], Some(&[true, false])).unwrap();
        c.push(&[1.0, 2.0], &[1, 1], Some(&[true, false])).unwrap();
        assert_eq!((c.kept(0), c.kept(1)), (2, 0));
        assert_eq!(c.get().mask(1), &[false, false]);
    }

    #[test]
    fn poison_marks_freed_slots() {
        let mut c = KvCacheBuffer::<f32>::with_params(1, 2, 0, 0.1, 2.0).unwrap();
        c.set_poison(true);
        c.push(&[1.0, 2.0], &[0], None).unwrap();
        c.push(&[3.0, 4.0], &[1], None).unwrap();
        c.remove(&[true, false]).unwrap();
        assert!(c.get().row(0)[..2].iter().all(|v| v.is_nan()));
        assert_eq!(c.get().slot(0, 0), None);
    }

    #[test]
    fn history_and_bytes() {
        let mut c = KvCacheBuffer::<f32>::with_params(3, 5, 4, 0.9, 2.0).unwrap();
        c.record_history();
        c.push(&[0.0; 15], &[0; 3], None).unwrap();
        assert_eq!(c.bytes(), 4 * 5 * 4 * 3);
        assert_eq!(c.history().len(), 1);
        assert_eq!(c.history()[0].op, CacheOp::Push);
    }

    proptest! {
        #[test]
        fn load_factor_holds(ops in proptest::collection::vec((any::<bool>(), any::<u64>()), 1..200)) {
            let mut c = KvCacheBuffer::<f32>::new(3, 1).unwrap();
            for (i, (push, bits)) in ops.into_iter().enumerate() {
                if push || c.extent() == 0 {
                    c.push(&[i as f32; 3], &[i as u32; 3], None).unwrap();
                } else {
                    let e = c.extent();
                    let view = c.get();
                    let mask: Vec<bool> = (0..3 * e)
                        .map(|k| view.mask(k / e)[k % e] && (bits >> (k % 64)) & 1 == 1)
                        .collect();
                    c.remove(&mask).unwrap();
                }
                prop_assert!(c.extent() == 0 || c.load_factor() >= 0.9);
                prop_assert!(c.extent() <= c.capacity());
                for b in 0..3 {
                    prop_assert_eq!(c.get().mask(b).iter().filter(|&&v| v).count(), c.kept(b));
                }
            }
        }
    }
}
