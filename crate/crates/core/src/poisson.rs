//! Cylinder events of the Poisson suspension: exact measures and a Monte
//! Carlo cross-check.
//!
//! The Poisson measure of `⋂ C(A_i, k_i)` is a finite sum over the Boolean
//! atoms of the sets `A_i` times `e^{-μ(⋃ A_i)}`, so exact values are kept as
//! `c · e^{-s}` with rational `c` and `s`.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::floorset::FloorSet;
use crate::ratio::{self, Rational};
use crate::tower::{lift_floor_set, measure_of, Construction};

pub const MAX_EVENTS: usize = 12;
pub const MAX_TOTAL_COUNT: u32 = 12;
/// Samples per RNG substream. Fixed so results do not depend on `jobs`.
pub const MC_CHUNK: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CylinderEvent {
    pub set: FloorSet,
    pub count: u32,
}

impl CylinderEvent {
    pub fn new(set: FloorSet, count: u32) -> Self {
        CylinderEvent { set, count }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CylinderConjunction {
    pub events: Vec<CylinderEvent>,
}

impl CylinderConjunction {
    pub fn new(events: Vec<CylinderEvent>) -> Self {
        CylinderConjunction { events }
    }

    fn stage(&self) -> usize {
        self.events.iter().map(|e| e.set.stage()).max().unwrap_or(1)
    }

    fn lifted(&self, c: &Construction, stage: usize) -> Result<Vec<FloorSet>> {
        self.events
            .iter()
            .map(|e| lift_floor_set(c, &e.set, stage))
            .collect()
    }
}

/// `coeff · e^{-exponent}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExactExp {
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub coeff: Rational,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub exponent: Rational,
}

impl ExactExp {
    pub fn new(coeff: Rational, exponent: Rational) -> Self {
        ExactExp { coeff, exponent }
    }

    pub fn approx(&self) -> f64 {
        ratio::to_f64(&self.coeff) * (-ratio::to_f64(&self.exponent)).exp()
    }

    pub fn mul(&self, other: &ExactExp) -> ExactExp {
        ExactExp {
            coeff: &self.coeff * &other.coeff,
            exponent: &self.exponent + &other.exponent,
        }
    }
}

/// Floor measure of every Boolean atom `⋂_{i ∈ mask} A_i ∖ ⋃_{i ∉ mask} A_i`
/// with nonzero mask, found by sweeping interval endpoints.
fn atoms(sets: &[FloorSet]) -> BTreeMap<u32, BigInt> {
    let mut edges: Vec<(BigInt, usize, bool)> = Vec::new();
    for (i, s) in sets.iter().enumerate() {
        for (a, b) in s.intervals() {
            edges.push((a.clone(), i, true));
            edges.push((b.clone(), i, false));
        }
    }
    edges.sort_by(|x, y| x.0.cmp(&y.0));
    let mut out = BTreeMap::new();
    let mut mask = 0u32;
    let mut prev: Option<BigInt> = None;
    for (x, i, open) in edges {
        if let Some(p) = &prev {
            if mask != 0 && x > *p {
                *out.entry(mask).or_insert_with(BigInt::zero) += &x - p;
            }
        }
        if open {
            mask |= 1 << i;
        } else {
            mask &= !(1 << i);
        }
        prev = Some(x);
    }
    out
}

fn factorial(n: u32) -> BigInt {
    (1..=n).fold(BigInt::one(), |acc, k| acc * k)
}

/// Sums `∏_a μ(a)^{m_a} / m_a!` over atom count vectors meeting every `k_i`.
fn enumerate(atoms: &[(u32, Rational)], remaining: &mut [u32], idx: usize) -> Rational {
    if idx == atoms.len() {
        return if remaining.iter().all(|r| *r == 0) {
            Rational::one()
        } else {
            Rational::zero()
        };
    }
    let (mask, mu) = &atoms[idx];
    let members: Vec<usize> = (0..remaining.len()).filter(|i| mask & (1 << i) != 0).collect();
    // later atoms must still be able to absorb what this one leaves
    let cap = members.iter().map(|&i| remaining[i]).min().unwrap_or(0);
    let mut total = Rational::zero();
    let mut term = Rational::one();
    for m in 0..=cap {
        if m > 0 {
            term = term * mu / Rational::from_integer(BigInt::from(m));
        }
        for &i in &members {
            remaining[i] -= m;
        }
        let rest = enumerate(atoms, remaining, idx + 1);
        for &i in &members {
            remaining[i] += m;
        }
        if !rest.is_zero() {
            total += &term * rest;
        }
    }
    total
}

pub fn cylinder_measure(c: &Construction, conj: &CylinderConjunction) -> Result<ExactExp> {
    if conj.events.is_empty() {
        return Err(Error::InvalidSpec("empty cylinder conjunction".into()));
    }
    if conj.events.len() > MAX_EVENTS {
        return Err(Error::CombinatorialBudget(format!(
            "{} events, at most {MAX_EVENTS}",
            conj.events.len()
        )));
    }
    let total: u32 = conj.events.iter().map(|e| e.count).sum();
    if total > MAX_TOTAL_COUNT {
        return Err(Error::CombinatorialBudget(format!(
            "total count {total}, at most {MAX_TOTAL_COUNT}"
        )));
    }
    let stage = conj.stage();
    let sets = conj.lifted(c, stage)?;
    let fm = c.floor_measure(stage)?;
    let atoms: Vec<(u32, Rational)> = atoms(&sets)
        .into_iter()
        .map(|(m, n)| (m, Rational::from_integer(n) * &fm))
        .collect();
    let union: Rational = atoms.iter().map(|(_, mu)| mu.clone()).sum();
    let mut remaining: Vec<u32> = conj.events.iter().map(|e| e.count).collect();
    let coeff = enumerate(&atoms, &mut remaining, 0);
    Ok(ExactExp::new(coeff, union))
}

/// `∏ μ(A_i)^{k_i} / k_i! · e^{-μ(A_i)}`, valid for pairwise disjoint sets.
pub fn disjoint_product(c: &Construction, conj: &CylinderConjunction) -> Result<ExactExp> {
    let mut out = ExactExp::new(Rational::one(), Rational::zero());
    for e in &conj.events {
        let mu = measure_of(c, &e.set)?;
        let coeff = ratio::pow(&mu, e.count) / Rational::from_integer(factorial(e.count));
        out = out.mul(&ExactExp::new(coeff, mu));
    }
    Ok(out)
}

/// Swap of two equal-width floor runs `[a, a + w)` and `[b, b + w)` of one
/// stage, extended to later stages copy by copy. An involution preserving μ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FloorSwap {
    pub stage: usize,
    #[serde(serialize_with = "ratio::ser_int")]
    pub a: BigInt,
    #[serde(serialize_with = "ratio::ser_int")]
    pub b: BigInt,
    #[serde(serialize_with = "ratio::ser_int")]
    pub width: BigInt,
}

impl FloorSwap {
    pub fn new(stage: usize, a: impl Into<BigInt>, b: impl Into<BigInt>, width: impl Into<BigInt>) -> Result<Self> {
        let s = FloorSwap {
            stage,
            a: a.into(),
            b: b.into(),
            width: width.into(),
        };
        let (lo, hi) = if s.a <= s.b { (&s.a, &s.b) } else { (&s.b, &s.a) };
        if s.width <= BigInt::zero() || lo + &s.width > *hi {
            return Err(Error::InvalidSpec("swap runs must be disjoint and nonempty".into()));
        }
        Ok(s)
    }

    pub fn first(&self) -> FloorSet {
        FloorSet::range(self.stage, self.a.clone(), &self.a + &self.width)
    }

    pub fn second(&self) -> FloorSet {
        FloorSet::range(self.stage, self.b.clone(), &self.b + &self.width)
    }

    /// `R(B) = (B ∖ U) ∪ ((B ∩ E) + δ) ∪ ((B ∩ E') - δ)` with `U = E ∪ E'`.
    pub fn apply(&self, c: &Construction, set: &FloorSet) -> Result<FloorSet> {
        let stage = set.stage().max(self.stage);
        let b = lift_floor_set(c, set, stage)?;
        let e = lift_floor_set(c, &self.first(), stage)?;
        let re = lift_floor_set(c, &self.second(), stage)?;
        let delta = &self.b - &self.a;
        let u = e.union(&re);
        let moved_up = b.intersection(&e).translate(&delta);
        let moved_down = b.intersection(&re).translate(&-&delta);
        Ok(b.difference(&u).union(&moved_up).union(&moved_down))
    }
}

#[derive(Debug, Clone)]
pub enum BaseMap {
    Power(BigInt),
    Swap(FloorSwap),
}

/// `T^n A` as a floor set: the first stage at which every floor of the
/// lifted set stays inside the tower after `n` steps.
pub fn image_under_power(
    c: &Construction,
    set: &FloorSet,
    n: &BigInt,
    max_stage: usize,
) -> Result<FloorSet> {
    if n.is_zero() {
        return Ok(set.clone());
    }
    for stage in set.stage()..=max_stage.max(set.stage()) {
        let h = match c.height(stage) {
            Ok(h) => h,
            Err(Error::StageUnavailable(_)) => break,
            Err(e) => return Err(e),
        };
        let lifted = lift_floor_set(c, set, stage)?;
        let shifted = lifted.translate(n);
        let inside = !shifted.has_negative() && shifted.end().is_none_or(|e| *e <= h);
        if inside {
            return Ok(shifted);
        }
    }
    Err(Error::Unresolvable(format!("T^{n} of {set} within {max_stage} stages")))
}

pub fn image_conjunction(
    c: &Construction,
    conj: &CylinderConjunction,
    map: &BaseMap,
    max_stage: usize,
) -> Result<CylinderConjunction> {
    let events = conj
        .events
        .iter()
        .map(|e| {
            let set = match map {
                BaseMap::Power(n) => image_under_power(c, &e.set, n, max_stage)?,
                BaseMap::Swap(r) => r.apply(c, &e.set)?,
            };
            Ok(CylinderEvent::new(set, e.count))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CylinderConjunction::new(events))
}

/// Finitely many points in a truncated region: `(floor, offset in [0, 1))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Configuration {
    pub stage: usize,
    #[serde(serialize_with = "ser_points")]
    pub points: Vec<(BigInt, f64)>,
}

fn ser_points<S: serde::Serializer>(
    v: &[(BigInt, f64)],
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|(f, o)| (f.to_string(), o)))
}

impl Configuration {
    pub fn count_in(&self, set: &FloorSet) -> usize {
        self.points.iter().filter(|(f, _)| set.contains(f)).count()
    }
}

/// Poisson number of points, each uniform over the region's floors.
pub fn sample_configuration<R: Rng>(
    c: &Construction,
    region: &FloorSet,
    rng: &mut R,
) -> Result<Configuration> {
    let floors = region
        .len()
        .to_u64()
        .ok_or_else(|| Error::TooLarge(format!("region {region}")))?;
    let mass = ratio::to_f64(&measure_of(c, region)?);
    let mut points = Vec::new();
    if floors > 0 && mass > 0.0 {
        let n = Poisson::new(mass)
            .map_err(|e| Error::InvalidSpec(format!("poisson mean {mass}: {e}")))?
            .sample(rng) as u64;
        for _ in 0..n {
            let idx = rng.random_range(0..floors);
            points.push((nth_floor(region, idx), rng.random::<f64>()));
        }
    }
    Ok(Configuration {
        stage: region.stage(),
        points,
    })
}

fn nth_floor(region: &FloorSet, mut idx: u64) -> BigInt {
    for (a, b) in region.intervals() {
        let len = (b - a).to_u64().unwrap_or(u64::MAX);
        if idx < len {
            return a + idx;
        }
        idx -= len;
    }
    unreachable!("index within region size")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub samples: u64,
    pub seed: u64,
}

/// Fraction of sampled configurations satisfying every count. Samples are
/// split into fixed chunks, chunk `i` drawing from ChaCha8 stream `i`, so the
/// result is the same for any number of worker threads.
pub fn mc_estimate(
    c: &Construction,
    conj: &CylinderConjunction,
    region: &FloorSet,
    samples: u64,
    seed: u64,
    jobs: usize,
) -> Result<McEstimate> {
    let stage = conj.stage().max(region.stage());
    let region = lift_floor_set(c, region, stage)?;
    let sets = conj.lifted(c, stage)?;
    for s in &sets {
        if !s.difference(&region).is_empty() {
            return Err(Error::RegionTooSmall(format!("{s} not inside {region}")));
        }
    }
    let counts: Vec<usize> = conj.events.iter().map(|e| e.count as usize).collect();
    let chunks = samples.div_ceil(MC_CHUNK);
    let run_chunk = |chunk: u64| -> Result<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk);
        let n = MC_CHUNK.min(samples - chunk * MC_CHUNK);
        let mut hits = 0;
        for _ in 0..n {
            let cfg = sample_configuration(c, &region, &mut rng)?;
            if sets.iter().zip(&counts).all(|(s, k)| cfg.count_in(s) == *k) {
                hits += 1;
            }
        }
        Ok(hits)
    };
    let jobs = jobs.max(1).min(chunks.max(1) as usize);
    let hits: u64 = if jobs == 1 {
        (0..chunks).map(run_chunk).sum::<Result<u64>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|w| {
                    let run_chunk = &run_chunk;
                    scope.spawn(move || {
                        (w as u64..chunks)
                            .step_by(jobs)
                            .map(run_chunk)
                            .sum::<Result<u64>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sampler thread panicked"))
                .sum::<Result<u64>>()
        })?
    };
    let n = samples.max(1) as f64;
    let p = hits as f64 / n;
    Ok(McEstimate {
        estimate: p,
        stderr: (p * (1.0 - p) / n).sqrt(),
        samples,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoissonReport {
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub coeff: Rational,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub exponent: Rational,
    pub approx: f64,
    pub mc: Option<McEstimate>,
}

impl PoissonReport {
    pub fn new(exact: &ExactExp, mc: Option<McEstimate>) -> Self {
        PoissonReport {
            coeff: exact.coeff.clone(),
            exponent: exact.exponent.clone(),
            approx: exact.approx(),
            mc,
        }
    }
}
