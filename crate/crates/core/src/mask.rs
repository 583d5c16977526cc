//! Dense point-membership masks.

use crate::error::{shape_err, Result};

/// Membership flags over the `N` points of one frame, stored as a bitset.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PointMask {
    len: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for PointMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PointMask")
            .field("len", &self.len)
            .field("count", &self.count())
            .finish()
    }
}

impl PointMask {
    pub fn new(len: usize) -> Self {
        PointMask {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn full(len: usize) -> Self {
        let mut mask = PointMask {
            len,
            words: vec![u64::MAX; len.div_ceil(64)],
        };
        mask.clear_tail();
        mask
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = PointMask::new(len);
        for i in indices {
            mask.insert(i);
        }
        mask
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut mask = PointMask::new(len);
        for i in 0..len {
            if f(i) {
                mask.insert(i);
            }
        }
        mask
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// Number of member points.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i >> 6] & (1u64 << (i & 63)) != 0
    }

    #[inline]
    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len, "index {i} out of mask range {}", self.len);
        self.words[i >> 6] |= 1u64 << (i & 63);
    }

    #[inline]
    pub fn remove(&mut self, i: usize) {
        assert!(i < self.len, "index {i} out of mask range {}", self.len);
        self.words[i >> 6] &= !(1u64 << (i & 63));
    }

    pub fn set(&mut self, i: usize, value: bool) {
        if value {
            self.insert(i)
        } else {
            self.remove(i)
        }
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    /// Indices of member points in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let bit = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + bit)
            })
        })
    }

    pub fn intersection_count(&self, other: &PointMask) -> Result<usize> {
        self.check_len(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_count(&self, other: &PointMask) -> Result<usize> {
        self.check_len(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    pub fn union_with(&mut self, other: &PointMask) -> Result<()> {
        self.check_len(other)?;
        self.words
            .iter_mut()
            .zip(&other.words)
            .for_each(|(a, b)| *a |= b);
        Ok(())
    }

    pub fn intersect_with(&mut self, other: &PointMask) -> Result<()> {
        self.check_len(other)?;
        self.words
            .iter_mut()
            .zip(&other.words)
            .for_each(|(a, b)| *a &= b);
        Ok(())
    }

    /// Removes every member of `other` from `self`.
    pub fn subtract(&mut self, other: &PointMask) -> Result<()> {
        self.check_len(other)?;
        self.words
            .iter_mut()
            .zip(&other.words)
            .for_each(|(a, b)| *a &= !b);
        Ok(())
    }

    pub fn is_subset_of(&self, other: &PointMask) -> Result<bool> {
        self.check_len(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0))
    }

    pub fn is_disjoint(&self, other: &PointMask) -> Result<bool> {
        Ok(self.intersection_count(other)? == 0)
    }

    /// Restricts the mask to the points listed in `keep` (new index = position in `keep`).
    pub fn select(&self, keep: &[usize]) -> PointMask {
        PointMask::from_fn(keep.len(), |j| self.contains(keep[j]))
    }

    fn check_len(&self, other: &PointMask) -> Result<()> {
        if self.len != other.len {
            return Err(shape_err(format!(
                "mask lengths differ: {} vs {}",
                self.len, other.len
            )));
        }
        Ok(())
    }

    fn clear_tail(&mut self) {
        let rem = self.len & 63;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

/// Intersection over union of two masks; 0 when both are empty.
pub fn mask_iou(a: &PointMask, b: &PointMask) -> Result<f64> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    let inter = a.intersection_count(b)?;
    Ok(inter as f64 / union as f64)
}
