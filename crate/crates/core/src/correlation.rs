//! Exact correlations `μ(T^n A ∩ B)` and multi-fold intersections.
//!
//! Counts are never obtained by lifting sets to a deep stage. Instead, a
//! stage-`L` count of aligned floors is written as a sum of stage-`L-1`
//! counts over the column pairs whose relative shift still fits inside the
//! smaller tower, and the recursion is memoized on `(level, shifts)`.
//!
//! A stage-`L` count only sees orbits that stay inside tower `L`, so it is a
//! lower bound. Points whose orbit leaves the tower are bounded by counting
//! floors near the top (or bottom) of the tower, which gives the upper bound.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::floorset::FloorSet;
use crate::ratio::{self, Rational};
use crate::tower::{lift_floor_set, Construction};

pub const DEFAULT_MAX_STAGE: usize = 48;
/// Largest tower the dense oracle will enumerate.
pub const DENSE_BUDGET: usize = 1 << 24;
/// Largest lag distribution kept in memory.
pub const DEFAULT_MAX_SUPPORT: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorrelationValue {
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub lo: Rational,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub hi: Rational,
    pub exact: bool,
}

impl CorrelationValue {
    pub fn exact(v: Rational) -> Self {
        CorrelationValue {
            lo: v.clone(),
            hi: v,
            exact: true,
        }
    }

    pub fn bounds(lo: Rational, hi: Rational) -> Self {
        let exact = lo == hi;
        CorrelationValue { lo, hi, exact }
    }

    pub fn width(&self) -> Rational {
        &self.hi - &self.lo
    }

    /// `n,lo,hi,exact` with rationals as `p/q`.
    pub fn csv_row(&self, n: &BigInt) -> String {
        format!(
            "{n},{},{},{}",
            ratio::fmt_ratio(&self.lo),
            ratio::fmt_ratio(&self.hi),
            self.exact
        )
    }
}

pub const CSV_HEADER: &str = "n,lo,hi,exact";

/// `μ(⋂_i T^{shift_i} set_i)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionQuery {
    pub terms: Vec<(BigInt, FloorSet)>,
}

impl IntersectionQuery {
    pub fn new(terms: Vec<(BigInt, FloorSet)>) -> Self {
        IntersectionQuery { terms }
    }

    pub fn pair(n: impl Into<BigInt>, a: &FloorSet, b: &FloorSet) -> Self {
        Self::new(vec![(n.into(), a.clone()), (BigInt::zero(), b.clone())])
    }
}

/// Query normalized for counting: sets lifted to a common base stage,
/// anchor (largest shift) first, and the remaining shifts expressed as
/// forward offsets from the anchor.
#[derive(Debug, Clone)]
struct Prepared {
    id: usize,
    base: usize,
    sets: Vec<FloorSet>,
    deltas: Vec<BigInt>,
}

type Key = (usize, usize, Vec<BigInt>);

/// Counting engine with a shared memo. Safe to share between threads.
#[derive(Debug)]
pub struct CorrelationEngine {
    construction: Arc<Construction>,
    max_stage: usize,
    max_support: usize,
    ids: Mutex<HashMap<Vec<FloorSet>, usize>>,
    cache: Mutex<HashMap<Key, BigInt>>,
}

/// Exact lag counts `#{a ∈ A, b ∈ B : b - a = n}` at a certifying stage.
#[derive(Debug, Clone)]
pub struct ExactLags {
    pub stage: usize,
    pub floor_measure: Rational,
    pub window: BigInt,
    pub counts: BTreeMap<BigInt, BigInt>,
}

impl ExactLags {
    pub fn value(&self, n: &BigInt) -> Rational {
        let c = self.counts.get(n).cloned().unwrap_or_default();
        Rational::from_integer(c) * &self.floor_measure
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LagCensus {
    pub stage: usize,
    pub r: usize,
    pub found: u64,
    pub expected: u64,
}

impl CorrelationEngine {
    pub fn new(construction: Arc<Construction>) -> Self {
        CorrelationEngine {
            construction,
            max_stage: DEFAULT_MAX_STAGE,
            max_support: DEFAULT_MAX_SUPPORT,
            ids: Mutex::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_max_stage(mut self, max_stage: usize) -> Self {
        self.max_stage = max_stage;
        self
    }

    pub fn with_max_support(mut self, max_support: usize) -> Self {
        self.max_support = max_support;
        self
    }

    pub fn construction(&self) -> &Arc<Construction> {
        &self.construction
    }

    pub fn max_stage(&self) -> usize {
        self.max_stage
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache poisoned").len()
    }

    fn prepare(&self, q: &IntersectionQuery) -> Result<Prepared> {
        if q.terms.is_empty() {
            return Err(Error::InvalidSpec("empty intersection query".into()));
        }
        let base = q.terms.iter().map(|(_, s)| s.stage()).max().unwrap_or(1);
        let anchor = q
            .terms
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .0.cmp(&y.1 .0).then(y.0.cmp(&x.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let n_anchor = &q.terms[anchor].0;
        let mut sets = vec![lift_floor_set(&self.construction, &q.terms[anchor].1, base)?];
        let mut deltas = Vec::new();
        for (k, (n, s)) in q.terms.iter().enumerate() {
            if k != anchor {
                sets.push(lift_floor_set(&self.construction, s, base)?);
                deltas.push(n_anchor - n);
            }
        }
        let h = self.construction.height(base)?;
        for s in &sets {
            if s.has_negative() || s.end().is_some_and(|e| *e > h) {
                return Err(Error::InvalidSpec(format!("{s} is not inside tower {base}")));
            }
        }
        let id = {
            let mut ids = self.ids.lock().expect("id table poisoned");
            let next = ids.len();
            *ids.entry(sets.clone()).or_insert(next)
        };
        Ok(Prepared {
            id,
            base,
            sets,
            deltas,
        })
    }

    /// `#{a ∈ S_0 : a + δ_k ∈ S_k for all k}` with all sets lifted to `level`.
    fn count(&self, p: &Prepared, level: usize, delta: &[BigInt]) -> Result<BigInt> {
        let h = self.construction.height(level)?;
        let zero = BigInt::zero();
        let hi = delta.iter().fold(&zero, |m, d| m.max(d));
        let lo = delta.iter().fold(&zero, |m, d| m.min(d));
        if hi - lo >= h {
            return Ok(BigInt::zero());
        }
        if level == p.base {
            let mut s = p.sets[0].clone();
            for (k, d) in delta.iter().enumerate() {
                s = s.intersection(&p.sets[k + 1].translate(&-d));
                if s.is_empty() {
                    break;
                }
            }
            return Ok(s.len());
        }
        let key = (p.id, level, delta.to_vec());
        if let Some(v) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(v.clone());
        }
        let below = level - 1;
        let q = self.construction.offsets(below)?;
        let hb = self.construction.height(below)?;
        let mut total = BigInt::zero();
        'column: for qi in &q {
            let mut choices: Vec<Vec<BigInt>> = Vec::with_capacity(delta.len());
            for d in delta {
                let target = d + qi;
                let lo = &target - &hb;
                let hi = &target + &hb;
                let start = q.partition_point(|x| *x <= lo);
                let c: Vec<BigInt> = q[start..]
                    .iter()
                    .take_while(|x| **x < hi)
                    .map(|x| &target - x)
                    .collect();
                if c.is_empty() {
                    continue 'column;
                }
                choices.push(c);
            }
            let mut idx = vec![0usize; choices.len()];
            loop {
                let combo: Vec<BigInt> = idx
                    .iter()
                    .zip(&choices)
                    .map(|(&i, c)| c[i].clone())
                    .collect();
                total += self.count(p, below, &combo)?;
                let mut k = 0;
                while k < idx.len() {
                    idx[k] += 1;
                    if idx[k] < choices[k].len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == idx.len() {
                    break;
                }
            }
        }
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(key, total.clone());
        Ok(total)
    }

    /// Floors of `set` (a base-stage set lifted to `level`) inside `[lo, hi)`.
    fn range_count(
        &self,
        set: &FloorSet,
        base: usize,
        level: usize,
        lo: &BigInt,
        hi: &BigInt,
    ) -> Result<BigInt> {
        let h = self.construction.height(level)?;
        let lo = lo.max(&BigInt::zero()).clone();
        let hi = hi.min(&h).clone();
        if lo >= hi {
            return Ok(BigInt::zero());
        }
        if level == base {
            return Ok(set.count_in(&lo, &hi));
        }
        if lo.is_zero() && hi == h {
            return Ok(set.len() * self.construction.copy_count(base, level)?);
        }
        let mut total = BigInt::zero();
        for qi in self.construction.offsets(level - 1)? {
            total += self.range_count(set, base, level - 1, &(&lo - &qi), &(&hi - &qi))?;
        }
        Ok(total)
    }

    /// The within-tower lower bound at stage `level`.
    pub fn lower_bound_at(&self, q: &IntersectionQuery, level: usize) -> Result<Rational> {
        let p = self.prepare(q)?;
        if level < p.base {
            return Err(Error::StageMismatch {
                expected: p.base,
                found: level,
            });
        }
        let c = self.count(&p, level, &p.deltas)?;
        Ok(Rational::from_integer(c) * self.construction.floor_measure(level)?)
    }

    /// Certified bounds at a single stage.
    pub fn bounds_at(&self, q: &IntersectionQuery, level: usize) -> Result<CorrelationValue> {
        let p = self.prepare(q)?;
        self.bounds_prepared(&p, level)
    }

    fn bounds_prepared(&self, p: &Prepared, level: usize) -> Result<CorrelationValue> {
        let fm0 = self.construction.floor_measure(p.base)?;
        let cap = p
            .sets
            .iter()
            .map(|s| Rational::from_integer(s.len()) * &fm0)
            .min()
            .unwrap_or_default();
        let fm = self.construction.floor_measure(level)?;
        let lo = Rational::from_integer(self.count(p, level, &p.deltas)?) * &fm;
        let big = p.deltas.iter().max().cloned().unwrap_or_default();
        if !big.is_positive() {
            return Ok(CorrelationValue::exact(lo));
        }
        let h = self.construction.height(level)?;
        let top = self.range_count(&p.sets[0], p.base, level, &(&h - &big), &h)?;
        if top.is_zero() {
            return Ok(CorrelationValue::exact(lo));
        }
        let mut bottoms = BigInt::zero();
        for (k, d) in p.deltas.iter().enumerate() {
            if d.is_positive() {
                bottoms += self.range_count(&p.sets[k + 1], p.base, level, &BigInt::zero(), d)?;
            }
        }
        let unresolved = top.min(bottoms);
        let hi = ratio::min(&(&lo + Rational::from_integer(unresolved) * &fm), &cap);
        let hi = if hi < lo { lo.clone() } else { hi };
        Ok(CorrelationValue::bounds(lo, hi))
    }

    /// Iterates stages until the value is certified exact or the bracket is
    /// narrower than `eps`. With `eps = 0` only an exact answer is accepted.
    pub fn multi_intersection(&self, q: &IntersectionQuery, eps: &Rational) -> Result<CorrelationValue> {
        let p = self.prepare(q)?;
        let mut last = None;
        for level in p.base..=self.max_stage.max(p.base) {
            let v = match self.bounds_prepared(&p, level) {
                Ok(v) => v,
                Err(Error::StageUnavailable(_)) => break,
                Err(e) => return Err(e),
            };
            if v.exact || (eps.is_positive() && v.width() <= *eps) {
                return Ok(v);
            }
            last = Some(v);
        }
        let detail = match last {
            Some(v) => format!(
                "bracket [{}, {}] after stage budget",
                ratio::fmt_ratio(&v.lo),
                ratio::fmt_ratio(&v.hi)
            ),
            None => "no stage evaluated".into(),
        };
        if eps.is_positive() {
            Err(Error::BudgetExceeded(detail))
        } else {
            Err(Error::NonmonotoneSpacers(detail))
        }
    }

    /// `μ(T^n A ∩ B)`.
    pub fn correlation(
        &self,
        n: &BigInt,
        a: &FloorSet,
        b: &FloorSet,
        eps: &Rational,
    ) -> Result<CorrelationValue> {
        self.multi_intersection(&IntersectionQuery::pair(n.clone(), a, b), eps)
    }

    /// `c_n = μ(T^n X_1 ∩ X_1)`.
    pub fn autocorrelation(&self, n: &BigInt, eps: &Rational) -> Result<CorrelationValue> {
        let x1 = self.construction.x1();
        self.correlation(n, &x1, &x1, eps)
    }

    /// Exact lag counts for `|n| <= window`, at the first stage where no
    /// floor of `A` or `B` sits within `window` of the top of the tower.
    pub fn exact_lags(&self, a: &FloorSet, b: &FloorSet, window: &BigInt) -> Result<ExactLags> {
        let base = a.stage().max(b.stage());
        let a = lift_floor_set(&self.construction, a, base)?;
        let b = lift_floor_set(&self.construction, b, base)?;
        let mut stage = None;
        for level in base..=self.max_stage.max(base) {
            let h = match self.construction.height(level) {
                Ok(h) => h,
                Err(Error::StageUnavailable(_)) => break,
                Err(e) => return Err(e),
            };
            if h <= *window {
                continue;
            }
            let lo = &h - window;
            if self.range_count(&a, base, level, &lo, &h)?.is_zero()
                && self.range_count(&b, base, level, &lo, &h)?.is_zero()
            {
                stage = Some(level);
                break;
            }
        }
        let Some(stage) = stage else {
            return Err(Error::NotExact(format!(
                "no stage up to {} certifies lags |n| <= {window}",
                self.max_stage
            )));
        };
        let counts = self.lag_distribution(&a, &b, stage, Some(window))?;
        Ok(ExactLags {
            stage,
            floor_measure: self.construction.floor_measure(stage)?,
            window: window.clone(),
            counts,
        })
    }

    /// Within-tower lag counts `#{(a, b) : b - a = n}` at `stage`, optionally
    /// restricted to `|n| <= window`.
    pub fn lag_distribution(
        &self,
        a: &FloorSet,
        b: &FloorSet,
        stage: usize,
        window: Option<&BigInt>,
    ) -> Result<BTreeMap<BigInt, BigInt>> {
        let base = a.stage().max(b.stage());
        if stage < base {
            return Err(Error::StageMismatch {
                expected: base,
                found: stage,
            });
        }
        let a = lift_floor_set(&self.construction, a, base)?;
        let b = lift_floor_set(&self.construction, b, base)?;
        let pairs = a.len() * b.len();
        if pairs > BigInt::from(self.max_support) {
            return Err(Error::BudgetExceeded(format!("{pairs} base floor pairs")));
        }
        match self.small_lag_distribution(&a, &b, base, stage, window)? {
            Some(dist) => Ok(dist),
            None => self.big_lag_distribution(&a, &b, base, stage, window),
        }
    }

    fn big_lag_distribution(
        &self,
        a: &FloorSet,
        b: &FloorSet,
        base: usize,
        stage: usize,
        window: Option<&BigInt>,
    ) -> Result<BTreeMap<BigInt, BigInt>> {
        let mut dist: BTreeMap<BigInt, BigInt> = BTreeMap::new();
        let bf: Vec<BigInt> = b.floors().collect();
        for x in a.floors() {
            for y in &bf {
                *dist.entry(y - &x).or_default() += 1;
            }
        }
        for level in base..stage {
            let q = self.construction.offsets(level)?;
            let mut diffs: BTreeMap<BigInt, u64> = BTreeMap::new();
            for qi in &q {
                for qj in &q {
                    *diffs.entry(qj - qi).or_default() += 1;
                }
            }
            let last = level + 1 == stage;
            let mut next: BTreeMap<BigInt, BigInt> = BTreeMap::new();
            for (m, c) in &dist {
                for (d, mult) in &diffs {
                    let lag = m + d;
                    if last && window.is_some_and(|w| lag.abs() > *w) {
                        continue;
                    }
                    *next.entry(lag).or_default() += c * BigInt::from(*mult);
                }
                if next.len() > self.max_support {
                    return Err(Error::BudgetExceeded(format!(
                        "lag distribution beyond {} entries at stage {}",
                        self.max_support,
                        level + 1
                    )));
                }
            }
            dist = next;
        }
        if let Some(w) = window {
            dist.retain(|n, _| n.abs() <= *w);
        }
        Ok(dist)
    }

    /// Same convolution on machine integers, sorting and merging instead of
    /// map inserts. `None` when heights or counts could overflow.
    fn small_lag_distribution(
        &self,
        a: &FloorSet,
        b: &FloorSet,
        base: usize,
        stage: usize,
        window: Option<&BigInt>,
    ) -> Result<Option<BTreeMap<BigInt, BigInt>>> {
        let fits = |n: &BigInt| n.to_i128().filter(|v| v.abs() < 1 << 125);
        if fits(&self.construction.height(stage)?).is_none() {
            return Ok(None);
        }
        let window = match window {
            Some(w) => match fits(w) {
                Some(v) => Some(v),
                None => return Ok(None),
            },
            None => None,
        };
        let bf: Vec<i128> = b.floors().filter_map(|y| y.to_i128()).collect();
        let mut dist: Vec<(i128, u128)> = Vec::new();
        for x in a.floors() {
            let x = x.to_i128().expect("floor below tower height");
            dist.extend(bf.iter().map(|y| (y - x, 1)));
        }
        merge_counts(&mut dist);
        let mut pairs: u128 = (a.len() * b.len()).to_u128().expect("checked against max_support");
        for level in base..stage {
            let q: Vec<i128> = self
                .construction
                .offsets(level)?
                .iter()
                .map(|v| v.to_i128().expect("offset below tower height"))
                .collect();
            let r = q.len() as u128;
            pairs = match pairs.checked_mul(r * r) {
                Some(p) if p < 1 << 120 => p,
                _ => return Ok(None),
            };
            let mut diffs: Vec<(i128, u128)> =
                q.iter().flat_map(|qi| q.iter().map(move |qj| (qj - qi, 1))).collect();
            merge_counts(&mut diffs);
            let last = level + 1 == stage;
            let mut next = Vec::new();
            for &(m, c) in &dist {
                for &(d, mult) in &diffs {
                    let lag = m + d;
                    if last && window.is_some_and(|w| lag.abs() > w) {
                        continue;
                    }
                    next.push((lag, c * mult));
                }
                if next.len() > 4 * self.max_support {
                    merge_counts(&mut next);
                    if next.len() > self.max_support {
                        break;
                    }
                }
            }
            merge_counts(&mut next);
            if next.len() > self.max_support {
                return Err(Error::BudgetExceeded(format!(
                    "lag distribution beyond {} entries at stage {}",
                    self.max_support,
                    level + 1
                )));
            }
            dist = next;
        }
        Ok(Some(
            dist.into_iter()
                .filter(|(n, _)| window.is_none_or(|w| n.abs() <= w))
                .map(|(n, c)| (BigInt::from(n), BigInt::from(c)))
                .collect(),
        ))
    }

    /// `Σ_{|n| < h_m} c_n^{2d}` computed exactly.
    pub fn power_sum(&self, d: u32, m: usize) -> Result<Rational> {
        if d == 0 {
            return Err(Error::InvalidSpec("power_sum needs d >= 1".into()));
        }
        let h = self.construction.height(m)?;
        let x1 = self.construction.x1();
        let lags = self.exact_lags(&x1, &x1, &(h - 1))?;
        let mut total = BigInt::zero();
        for c in lags.counts.values() {
            total += num_traits::pow(c.clone(), 2 * d as usize);
        }
        Ok(Rational::from_integer(total) * ratio::pow(&lags.floor_measure, 2 * d))
    }

    /// Positive lags `h_j < n <= h_{j+1}` with `c_n = 1/r_j`, against the
    /// Sidon prediction `(r_j^2 - r_j) / 2`.
    pub fn lag_census(&self, j: usize) -> Result<LagCensus> {
        let r = self.construction.params(j)?.r;
        let hj = self.construction.height(j)?;
        let hn = self.construction.height(j + 1)?;
        let x1 = self.construction.x1();
        let lags = self.exact_lags(&x1, &x1, &hn)?;
        let target = Rational::new(BigInt::one(), BigInt::from(r));
        let found = lags
            .counts
            .keys()
            .filter(|n| **n > hj && **n <= hn)
            .filter(|n| lags.value(n) == target)
            .count() as u64;
        Ok(LagCensus {
            stage: j,
            r,
            found,
            expected: ((r * r - r) / 2) as u64,
        })
    }
}

fn merge_counts(v: &mut Vec<(i128, u128)>) {
    v.sort_unstable_by_key(|e| e.0);
    let mut out: Vec<(i128, u128)> = Vec::with_capacity(v.len());
    for &(k, c) in v.iter() {
        match out.last_mut() {
            Some(last) if last.0 == k => last.1 += c,
            _ => out.push((k, c)),
        }
    }
    *v = out;
}

/// Independent dense check: steps `T` floor by floor on tower `max_stage`
/// (floor `k` goes to `k + 1`, the top floor has no image) and measures
/// `T^n A ∩ B`.
pub fn brute_force_oracle(
    c: &Construction,
    max_stage: usize,
    n: &BigInt,
    a: &FloorSet,
    b: &FloorSet,
) -> Result<Rational> {
    let h = c.height(max_stage)?;
    let h = h
        .to_usize()
        .filter(|h| *h <= DENSE_BUDGET)
        .ok_or_else(|| Error::TooLarge(format!("h_{max_stage} = {h}")))?;
    let dense = |s: &FloorSet| -> Result<Vec<bool>> {
        let lifted = lift_floor_set(c, s, max_stage)?;
        let mut v = vec![false; h];
        for f in lifted.floors() {
            let i = f
                .to_usize()
                .filter(|i| *i < h)
                .ok_or_else(|| Error::InvalidSpec(format!("floor {f} outside tower")))?;
            v[i] = true;
        }
        Ok(v)
    };
    let (mut moving, fixed) = if n.is_negative() {
        (dense(b)?, dense(a)?)
    } else {
        (dense(a)?, dense(b)?)
    };
    let steps = n.abs();
    let mut done = BigInt::zero();
    while done < steps {
        if !moving.iter().any(|x| *x) {
            break;
        }
        for k in (1..h).rev() {
            moving[k] = moving[k - 1];
        }
        moving[0] = false;
        done += 1;
    }
    let hits = moving.iter().zip(&fixed).filter(|(x, y)| **x && **y).count();
    Ok(Rational::from_integer(BigInt::from(hits)) * c.floor_measure(max_stage)?)
}
