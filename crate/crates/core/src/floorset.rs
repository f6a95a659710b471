//! Sorted disjoint half-open intervals of floor indices.
//!
//! A `FloorSet` always lives at one stage of a construction; its intervals
//! are kept in canonical form: sorted, non-empty, pairwise disjoint, with
//! adjacent runs merged.

use std::fmt;

use num_bigint::BigInt;
use num_traits::{Signed, Zero};
use serde::ser::{Serialize, SerializeStruct, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FloorSet {
    stage: usize,
    intervals: Vec<(BigInt, BigInt)>,
}

/// `{"stage": j, "intervals": [["a", "b"], ...]}` with decimal strings.
impl Serialize for FloorSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let ivs: Vec<[String; 2]> = self
            .intervals
            .iter()
            .map(|(a, b)| [a.to_string(), b.to_string()])
            .collect();
        let mut st = s.serialize_struct("FloorSet", 2)?;
        st.serialize_field("stage", &self.stage)?;
        st.serialize_field("intervals", &ivs)?;
        st.end()
    }
}

impl FloorSet {
    pub fn empty(stage: usize) -> Self {
        FloorSet {
            stage,
            intervals: Vec::new(),
        }
    }

    /// The run `[lo, hi)`; empty when `hi <= lo`.
    pub fn range(stage: usize, lo: impl Into<BigInt>, hi: impl Into<BigInt>) -> Self {
        Self::from_intervals(stage, [(lo.into(), hi.into())])
    }

    pub fn singleton(stage: usize, floor: impl Into<BigInt>) -> Self {
        let f = floor.into();
        let next = &f + 1;
        Self::from_intervals(stage, [(f, next)])
    }

    pub fn from_floors<I, T>(stage: usize, floors: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<BigInt>,
    {
        Self::from_intervals(
            stage,
            floors.into_iter().map(|f| {
                let f = f.into();
                let g = &f + 1;
                (f, g)
            }),
        )
    }

    /// Builds a canonical set from arbitrary (possibly overlapping, unsorted)
    /// half-open intervals.
    pub fn from_intervals<I>(stage: usize, raw: I) -> Self
    where
        I: IntoIterator<Item = (BigInt, BigInt)>,
    {
        let mut v: Vec<(BigInt, BigInt)> = raw.into_iter().filter(|(a, b)| a < b).collect();
        v.sort();
        let mut merged: Vec<(BigInt, BigInt)> = Vec::with_capacity(v.len());
        for (a, b) in v {
            match merged.last_mut() {
                Some(last) if a <= last.1 => {
                    if b > last.1 {
                        last.1 = b;
                    }
                }
                _ => merged.push((a, b)),
            }
        }
        FloorSet {
            stage,
            intervals: merged,
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn intervals(&self) -> &[(BigInt, BigInt)] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Number of floors.
    pub fn len(&self) -> BigInt {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn min(&self) -> Option<&BigInt> {
        self.intervals.first().map(|(a, _)| a)
    }

    /// One past the largest floor.
    pub fn end(&self) -> Option<&BigInt> {
        self.intervals.last().map(|(_, b)| b)
    }

    pub fn contains(&self, floor: &BigInt) -> bool {
        let idx = self.intervals.partition_point(|(_, b)| b <= floor);
        self.intervals
            .get(idx)
            .is_some_and(|(a, b)| a <= floor && floor < b)
    }

    pub fn is_canonical(&self) -> bool {
        self.intervals.iter().all(|(a, b)| a < b)
            && self.intervals.windows(2).all(|w| w[0].1 < w[1].0)
    }

    /// Re-labels the stage without touching the floors. Used when a set is
    /// known to occupy the bottom of a taller tower unchanged.
    pub fn with_stage(mut self, stage: usize) -> Self {
        self.stage = stage;
        self
    }

    pub fn translate(&self, by: &BigInt) -> Self {
        FloorSet {
            stage: self.stage,
            intervals: self
                .intervals
                .iter()
                .map(|(a, b)| (a + by, b + by))
                .collect(),
        }
    }

    pub fn union(&self, other: &FloorSet) -> Self {
        self.check_stage(other);
        Self::from_intervals(
            self.stage,
            self.intervals
                .iter()
                .chain(other.intervals.iter())
                .cloned(),
        )
    }

    pub fn intersection(&self, other: &FloorSet) -> Self {
        self.check_stage(other);
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.intervals.len() && j < other.intervals.len() {
            let (a0, a1) = &self.intervals[i];
            let (b0, b1) = &other.intervals[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                out.push((lo.clone(), hi.clone()));
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        FloorSet {
            stage: self.stage,
            intervals: out,
        }
    }

    pub fn difference(&self, other: &FloorSet) -> Self {
        self.check_stage(other);
        let mut out = Vec::new();
        let mut j = 0;
        for (a, b) in &self.intervals {
            let mut cur = a.clone();
            while j < other.intervals.len() && other.intervals[j].1 <= cur {
                j += 1;
            }
            let mut k = j;
            while k < other.intervals.len() && other.intervals[k].0 < *b {
                let (c, d) = &other.intervals[k];
                if *c > cur {
                    out.push((cur.clone(), c.clone()));
                }
                if *d > cur {
                    cur = d.clone();
                }
                k += 1;
            }
            if cur < *b {
                out.push((cur, b.clone()));
            }
        }
        FloorSet {
            stage: self.stage,
            intervals: out,
        }
    }

    /// Restriction to `[lo, hi)`.
    pub fn restrict(&self, lo: &BigInt, hi: &BigInt) -> Self {
        self.intersection(&FloorSet::range(self.stage, lo.clone(), hi.clone()))
    }

    /// Number of floors inside `[lo, hi)`.
    pub fn count_in(&self, lo: &BigInt, hi: &BigInt) -> BigInt {
        if lo >= hi {
            return BigInt::zero();
        }
        let start = self.intervals.partition_point(|(_, b)| b <= lo);
        let mut total = BigInt::zero();
        for (a, b) in &self.intervals[start..] {
            if a >= hi {
                break;
            }
            let l = a.max(lo);
            let h = b.min(hi);
            if l < h {
                total += h - l;
            }
        }
        total
    }

    /// Number of floors `x` with `x` in `self` and `x + shift` in `other`.
    pub fn shifted_overlap(&self, shift: &BigInt, other: &FloorSet) -> BigInt {
        let mut total = BigInt::zero();
        let mut j = 0;
        for (a, b) in &self.intervals {
            let (sa, sb) = (a + shift, b + shift);
            while j < other.intervals.len() && other.intervals[j].1 <= sa {
                j += 1;
            }
            let mut k = j;
            while k < other.intervals.len() && other.intervals[k].0 < sb {
                let (c, d) = &other.intervals[k];
                let l = (&sa).max(c);
                let h = (&sb).min(d);
                if l < h {
                    total += h - l;
                }
                k += 1;
            }
        }
        total
    }

    /// Iterates individual floors. Only sensible for small sets.
    pub fn floors(&self) -> impl Iterator<Item = BigInt> + '_ {
        self.intervals.iter().flat_map(|(a, b)| {
            let mut cur = a.clone();
            std::iter::from_fn(move || {
                if cur < *b {
                    let out = cur.clone();
                    cur += 1;
                    Some(out)
                } else {
                    None
                }
            })
        })
    }

    pub fn has_negative(&self) -> bool {
        self.min().is_some_and(|m| m.is_negative())
    }

    fn check_stage(&self, other: &FloorSet) {
        assert_eq!(
            self.stage, other.stage,
            "floor sets from different stages cannot be combined"
        );
    }
}

impl fmt::Display for FloorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (a, b)) in self.intervals.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "[{a},{b})")?;
        }
        write!(f, "}}@{}", self.stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn dense(fs: &FloorSet) -> BTreeSet<i64> {
        fs.floors().map(|f| i64::try_from(f).unwrap()).collect()
    }

    #[test]
    fn merges_adjacent_runs() {
        let fs = FloorSet::from_floors(2, [0, 1, 3]);
        assert_eq!(fs.intervals().len(), 2);
        assert_eq!(fs.len(), BigInt::from(3));
        assert!(fs.contains(&BigInt::from(3)));
        assert!(!fs.contains(&BigInt::from(2)));
    }

    #[test]
    fn empty_range_is_dropped() {
        assert!(FloorSet::range(1, 4, 4).is_empty());
        assert!(FloorSet::range(1, 5, 2).is_empty());
    }

    #[test]
    fn shifted_overlap_counts_matches() {
        let a = FloorSet::from_floors(2, [0, 1, 3]);
        assert_eq!(a.shifted_overlap(&BigInt::from(1), &a), BigInt::from(1));
        assert_eq!(a.shifted_overlap(&BigInt::from(3), &a), BigInt::from(1));
        assert_eq!(a.shifted_overlap(&BigInt::from(0), &a), BigInt::from(3));
    }

    fn arb_set() -> impl Strategy<Value = FloorSet> {
        prop::collection::vec((0i64..60, 0i64..6), 0..8).prop_map(|v| {
            FloorSet::from_intervals(
                0,
                v.into_iter()
                    .map(|(a, l)| (BigInt::from(a), BigInt::from(a + l))),
            )
        })
    }

    proptest! {
        #[test]
        fn algebra_is_canonical_and_matches_dense(a in arb_set(), b in arb_set(), t in -20i64..20) {
            let (da, db) = (dense(&a), dense(&b));
            let u = a.union(&b);
            let i = a.intersection(&b);
            let d = a.difference(&b);
            let s = a.translate(&BigInt::from(t));
            for x in [&u, &i, &d, &s] {
                prop_assert!(x.is_canonical());
            }
            prop_assert_eq!(dense(&u), da.union(&db).cloned().collect::<BTreeSet<_>>());
            prop_assert_eq!(dense(&i), da.intersection(&db).cloned().collect::<BTreeSet<_>>());
            prop_assert_eq!(dense(&d), da.difference(&db).cloned().collect::<BTreeSet<_>>());
            prop_assert_eq!(dense(&s), da.iter().map(|x| x + t).collect::<BTreeSet<_>>());
            let overlap = da.iter().filter(|x| db.contains(&(*x + t))).count();
            prop_assert_eq!(a.shifted_overlap(&BigInt::from(t), &b), BigInt::from(overlap));
            let (lo, hi) = (BigInt::from(10), BigInt::from(40));
            let inside = da.iter().filter(|x| (10..40).contains(*x)).count();
            prop_assert_eq!(a.count_in(&lo, &hi), BigInt::from(inside));
        }
    }
}
