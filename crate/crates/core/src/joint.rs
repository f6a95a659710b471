//! Two joint experiments on one rank-one map `σ`.
//!
//! Divergence: `T = PσP⁻¹` where `P` permutes spacer floors so that
//! `T^{q(n)} A` equals `σ^{p(n)} A` on even stage windows and misses it on odd
//! ones, making the averages of `μ(σ^{p(n)}A ∩ T^{q(n)}A)` oscillate.
//!
//! Repulsion: `S = R⁻¹TR` for a swap `R` of two floors `E`, `RE`, measured on
//! the Poisson cylinder `D = C(E,0) ∩ C(RE,1)`.

use std::collections::BTreeSet;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::correlation::CorrelationEngine;
use crate::error::{Error, Result};
use crate::floorset::FloorSet;
use crate::poisson::{
    cylinder_measure, image_under_power, CylinderConjunction, CylinderEvent, ExactExp, FloorSwap,
};
use crate::ratio::{self, Rational};
use crate::sidon::{check_sidon, CnuDescriptor, CnuRule};
use crate::spectral::product_rhs;
use crate::tower::{lift_floor_set, measure_of, Construction, ConstructionSpec, StageParams};

type Iv = (i128, i128);

/// Integer polynomial `c0 + c1 n + c2 n² + ...` with nonnegative
/// coefficients, so values and consecutive gaps are nondecreasing in `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntPoly {
    pub coeffs: Vec<i128>,
}

impl IntPoly {
    pub fn new(coeffs: Vec<i128>) -> Self {
        IntPoly { coeffs }
    }

    pub fn eval(&self, n: i128) -> Option<i128> {
        self.coeffs
            .iter()
            .rev()
            .try_fold(0i128, |acc, c| acc.checked_mul(n)?.checked_add(*c))
    }

    fn at(&self, n: i128) -> Result<i128> {
        self.eval(n)
            .ok_or_else(|| Error::TooLarge(format!("{} at n = {n}", self.describe())))
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (k, c) in self.coeffs.iter().enumerate().rev() {
            if *c == 0 {
                continue;
            }
            let coef = if *c == 1 && k > 0 { String::new() } else { c.to_string() };
            parts.push(match k {
                0 => coef,
                1 => format!("{coef}n"),
                _ => format!("{coef}n^{k}"),
            });
        }
        if parts.is_empty() {
            "0".into()
        } else {
            parts.join("+")
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.coeffs.iter().any(|c| *c < 0) {
            return Err(Error::InvalidSpec(format!("{name}: negative coefficient")));
        }
        if self.coeffs.iter().skip(1).all(|c| *c == 0) {
            return Err(Error::InvalidSpec(format!("{name}: not increasing")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SequencePair {
    pub p: IntPoly,
    pub q: IntPoly,
}

impl SequencePair {
    pub fn new(p: IntPoly, q: IntPoly) -> Result<Self> {
        p.validate("p")?;
        q.validate("q")?;
        Ok(SequencePair { p, q })
    }

    /// `p(n) = 2n² + n`, `q(n) = 2n² + 2n`.
    pub fn default_pair() -> Self {
        SequencePair {
            p: IntPoly::new(vec![0, 1, 2]),
            q: IntPoly::new(vec![0, 2, 2]),
        }
    }

    fn max_at(&self, n: i128) -> Result<i128> {
        Ok(self.p.at(n)?.max(self.q.at(n)?))
    }

    fn min_gap(&self, n: i128) -> Result<i128> {
        Ok((self.p.at(n + 1)? - self.p.at(n)?).min(self.q.at(n + 1)? - self.q.at(n)?))
    }
}

/// Least `n` in `[lo, hi]` with `pred(n)`, for a monotone predicate.
fn first_true(lo: i128, hi: i128, pred: impl Fn(i128) -> Result<bool>) -> Result<Option<i128>> {
    if lo > hi || !pred(hi)? {
        return Ok(None);
    }
    let (mut a, mut b) = (lo, hi);
    while a < b {
        let mid = a + (b - a) / 2;
        if pred(mid)? {
            b = mid;
        } else {
            a = mid + 1;
        }
    }
    Ok(Some(a))
}

/// Largest `n` in `[lo, hi]` with `f(n) <= x`, for nondecreasing `f`.
fn last_le(lo: i128, hi: i128, x: i128, f: impl Fn(i128) -> i128) -> Option<i128> {
    if lo > hi || f(lo) > x {
        return None;
    }
    let (mut a, mut b) = (lo, hi);
    while a < b {
        let mid = a + (b - a + 1) / 2;
        if f(mid) <= x {
            a = mid;
        } else {
            b = mid - 1;
        }
    }
    Some(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowRule {
    /// `2h_j < p(n), q(n) < h_{j+1} - 4h_j` and consecutive gaps at least `2h_j`.
    Gapped,
    /// Value bounds only; pieces may then collide.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageWindow {
    pub j: usize,
    pub lo: i128,
    pub hi: i128,
}

impl StageWindow {
    pub fn even(&self) -> bool {
        self.j.is_multiple_of(2)
    }

    pub fn len(&self) -> i128 {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        self.hi < self.lo
    }

    pub fn contains(&self, n: i128) -> bool {
        (self.lo..=self.hi).contains(&n)
    }
}

/// `π_j` on the spacer zone `[2h_j, h_{j+1})` of tower `j + 1`. Piece `n`
/// moves `[q(n), q(n) + 2h_j)` onto `[p(n), ...)` for even `j` and onto
/// `[p(n) + 2h_j, ...)` for odd `j`; the rest of the zone is matched in
/// order. Pieces are generated on demand.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalPermutation {
    pub stage: usize,
    pub width: i128,
    pub zone: Iv,
    pub window: StageWindow,
    #[serde(skip)]
    seqs: SequencePair,
}

impl IntervalPermutation {
    fn source(&self, n: i128) -> i128 {
        self.seqs.q.eval(n).expect("window values fit")
    }

    fn target(&self, n: i128) -> i128 {
        let p = self.seqs.p.eval(n).expect("window values fit");
        if self.window.even() {
            p
        } else {
            p + self.width
        }
    }

    pub fn pieces(&self) -> impl Iterator<Item = (Iv, i128)> + '_ {
        (self.window.lo..=self.window.hi).map(|n| {
            let s = self.source(n);
            ((s, s + self.width), self.target(n) - s)
        })
    }

    /// Gaps of the sequences are nondecreasing, so the first pair and the
    /// two ends certify every piece.
    fn verify(&self) -> Result<()> {
        let (lo, hi) = (self.window.lo, self.window.hi);
        let collide = |a: i128, b: i128| Error::PieceCollision {
            stage: self.stage,
            first: a as u64,
            second: b as u64,
        };
        if lo < hi
            && (self.source(lo) + self.width > self.source(lo + 1)
                || self.target(lo) + self.width > self.target(lo + 1))
        {
            return Err(collide(lo, lo + 1));
        }
        let inside = |x: i128| x >= self.zone.0 && x + self.width <= self.zone.1;
        for n in [lo, hi] {
            if !inside(self.source(n)) || !inside(self.target(n)) {
                return Err(Error::InfeasibleWindow {
                    stage: self.stage,
                    reason: format!("piece {n} leaves the spacer zone"),
                });
            }
        }
        Ok(())
    }

    /// Translation applied at `x` and the end of the run sharing it.
    fn run(&self, x: i128, inverse: bool) -> Iv {
        let (src, dst): (&dyn Fn(i128) -> i128, &dyn Fn(i128) -> i128) = if inverse {
            (&|n| self.target(n), &|n| self.source(n))
        } else {
            (&|n| self.source(n), &|n| self.target(n))
        };
        let (lo, hi, w, z0) = (self.window.lo, self.window.hi, self.width, self.zone.0);
        let below = last_le(lo, hi, x, src);
        if let Some(n) = below {
            if x < src(n) + w {
                return (dst(n) - src(n), src(n) + w);
            }
        }
        let passed = below.map_or(0, |n| n - lo + 1);
        let rank = x - z0 - passed * w;
        let before = last_le(lo, hi, rank, |n| dst(n) - z0 - (n - lo) * w).map_or(0, |n| n - lo + 1);
        let y = z0 + rank + before * w;
        let count = hi - lo + 1;
        let next_src = if passed < count { src(lo + passed) } else { self.zone.1 };
        let next_dst = if before < count { dst(lo + before) } else { self.zone.1 };
        let len = (next_src - x).min(next_dst - y);
        (y - x, x + len)
    }
}

/// Spacer rule for `σ`: `r_j = 2`, `s_j = (0, s)` with `s` the least value
/// with `s > max{p(jh_j), q(jh_j)}` and `h_{j+1} > max{p, q}(jh_j) + 4h_j`.
/// Katok stages use `r = 2j` and spacers `0` then `1`.
pub fn build_sigma(
    seqs: &SequencePair,
    h1: i128,
    stages: usize,
    katok: &BTreeSet<usize>,
) -> Result<ConstructionSpec> {
    let (_, params) = sigma_params(seqs, h1, stages, katok)?;
    Ok(ConstructionSpec::explicit(
        BigInt::from(h1),
        params
            .into_iter()
            .map(|s| StageParams::new(s.into_iter().map(BigInt::from)))
            .collect(),
    ))
}

fn sigma_params(
    seqs: &SequencePair,
    h1: i128,
    stages: usize,
    katok: &BTreeSet<usize>,
) -> Result<(Vec<i128>, Vec<Vec<i128>>)> {
    if h1 < 1 {
        return Err(Error::InvalidSpec("h1 must be positive".into()));
    }
    let too_large = || Error::TooLarge("sigma heights overflow i128".into());
    let mut heights = vec![h1];
    let mut params = Vec::new();
    for j in 1..=stages {
        let h = heights[j - 1];
        let s: Vec<i128> = if katok.contains(&j) {
            (1..=2 * j).map(|i| i128::from(i > j)).collect()
        } else {
            let m = seqs.max_at((j as i128).checked_mul(h).ok_or_else(too_large)?)?;
            vec![0, m.checked_add(2 * h + 1).ok_or_else(too_large)?]
        };
        let next = (s.len() as i128)
            .checked_mul(h)
            .and_then(|x| x.checked_add(s.iter().sum()))
            .ok_or_else(too_large)?;
        heights.push(next);
        params.push(s);
    }
    Ok((heights, params))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockBound {
    pub j: usize,
    pub n: i128,
    /// `N_{j-1} / N_j`.
    #[serde(serialize_with = "ratio::ser_ratio_opt")]
    pub ratio: Option<Rational>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedStage {
    pub j: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceScenario {
    pub seqs: SequencePair,
    pub h1: i128,
    pub heights: Vec<i128>,
    pub spacers: Vec<Vec<i128>>,
    pub katok: BTreeSet<usize>,
    pub rule: WindowRule,
    pub block_bounds: Vec<BlockBound>,
    pub windows: Vec<StageWindow>,
    pub skipped: Vec<SkippedStage>,
    pub perms: Vec<IntervalPermutation>,
    /// `A`, a subset of `X_1`.
    pub a: Vec<Iv>,
    #[serde(skip)]
    construction: Arc<Construction>,
    #[serde(skip)]
    offsets: Vec<Vec<i128>>,
}

impl DivergenceScenario {
    pub fn build(
        seqs: SequencePair,
        h1: i128,
        stages: usize,
        katok: BTreeSet<usize>,
        rule: WindowRule,
    ) -> Result<Self> {
        let (heights, spacers) = sigma_params(&seqs, h1, stages, &katok)?;
        let construction = Arc::new(Construction::new(build_sigma(&seqs, h1, stages, &katok)?)?);
        let mut sc = DivergenceScenario {
            seqs,
            h1,
            heights,
            spacers,
            katok,
            rule,
            block_bounds: Vec::new(),
            windows: Vec::new(),
            skipped: Vec::new(),
            perms: Vec::new(),
            a: vec![(0, h1)],
            construction,
            offsets: Vec::new(),
        };
        sc.offsets = (1..=sc.spacers.len()).map(|j| sc.compute_offsets(j)).collect();
        let mut prev: Option<i128> = None;
        for j in 1..=stages {
            if sc.katok.contains(&j) {
                sc.skipped.push(SkippedStage {
                    j,
                    reason: "katok stage".into(),
                });
                continue;
            }
            let n = sc.block_bound(j)?;
            sc.block_bounds.push(BlockBound {
                j,
                n,
                ratio: prev.filter(|_| n > 0).map(|m| ratio::rat(0, 1) + Rational::new(m.into(), n.into())),
            });
            prev = Some(n);
            match sc.window(j, n) {
                Ok(w) => sc.windows.push(w),
                Err(Error::InfeasibleWindow { reason, .. }) => {
                    sc.skipped.push(SkippedStage { j, reason });
                }
                Err(e) => return Err(e),
            }
        }
        for w in sc.windows.clone() {
            let perm = sc.build_pi(&w)?;
            sc.perms.push(perm);
        }
        Ok(sc)
    }

    pub fn default_scenario() -> Result<Self> {
        Self::build(SequencePair::default_pair(), 1, 4, BTreeSet::new(), WindowRule::Gapped)
    }

    pub fn construction(&self) -> &Arc<Construction> {
        &self.construction
    }

    /// Number of stages with a built tower on top (`h_{stages+1}` known).
    pub fn stages(&self) -> usize {
        self.spacers.len()
    }

    pub fn height(&self, j: usize) -> i128 {
        self.heights[j - 1]
    }

    pub fn floor_measure(&self, j: usize) -> Rational {
        let cols: i128 = self.spacers[..j - 1].iter().map(|s| s.len() as i128).product();
        Rational::new(BigInt::one(), BigInt::from(self.h1 * cols))
    }

    pub fn measure_a(&self) -> Rational {
        let floors: i128 = self.a.iter().map(|(x, y)| y - x).sum();
        Rational::from_integer(floors.into()) * self.floor_measure(1)
    }

    /// `N_j = max{n : p(n), q(n) < h_{j+1} - 4h_j}`, 0 when no `n >= 1` qualifies.
    pub fn block_bound(&self, j: usize) -> Result<i128> {
        let bound = self.height(j + 1) - 4 * self.height(j);
        let fits = |n: i128| Ok::<_, Error>(self.seqs.max_at(n)? < bound);
        if bound <= 0 || !fits(1)? {
            return Ok(0);
        }
        // p(n) >= n, so n = bound is already out
        Ok(first_true(1, bound, |n| Ok(!fits(n)?))?.map_or(bound, |n| n - 1))
    }

    fn window(&self, j: usize, n_max: i128) -> Result<StageWindow> {
        let w = 2 * self.height(j);
        let infeasible = |reason: String| Error::InfeasibleWindow { stage: j, reason };
        if n_max < 1 {
            return Err(infeasible(format!("no n with p(n), q(n) < h_{} - 4h_{j}", j + 1)));
        }
        let values = |n: i128| Ok::<_, Error>(self.seqs.p.at(n)? > w && self.seqs.q.at(n)? > w);
        let lo = match self.rule {
            WindowRule::Literal => first_true(1, n_max, values)?,
            WindowRule::Gapped => {
                let both = |n: i128| Ok(values(n)? && self.seqs.min_gap(n)? >= w);
                match first_true(1, n_max - 1, both)? {
                    Some(n) => Some(n),
                    None if values(n_max)? => Some(n_max),
                    None => None,
                }
            }
        };
        match lo {
            Some(lo) => Ok(StageWindow { j, lo, hi: n_max }),
            None => Err(infeasible(format!(
                "no n <= {n_max} with p(n), q(n) > {w} and gaps >= {w}"
            ))),
        }
    }

    pub fn build_pi(&self, window: &StageWindow) -> Result<IntervalPermutation> {
        let j = window.j;
        let perm = IntervalPermutation {
            stage: j,
            width: 2 * self.height(j),
            zone: (2 * self.height(j), self.height(j + 1)),
            window: window.clone(),
            seqs: self.seqs.clone(),
        };
        perm.verify()?;
        Ok(perm)
    }

    fn perm(&self, j: usize) -> Option<&IntervalPermutation> {
        self.perms.iter().find(|p| p.stage == j)
    }

    pub fn window_of(&self, n: i128) -> Option<&StageWindow> {
        self.windows.iter().find(|w| w.contains(n))
    }

    fn offsets(&self, j: usize) -> &[i128] {
        &self.offsets[j - 1]
    }

    fn compute_offsets(&self, j: usize) -> Vec<i128> {
        let h = self.height(j);
        let mut acc = 0;
        self.spacers[j - 1]
            .iter()
            .map(|s| {
                let q = acc;
                acc += h + s;
                q
            })
            .collect()
    }

    /// Translation of `P` (or `P⁻¹`) at floor `x` of tower `stage`, with the
    /// end of the run on which it is constant.
    fn run_at(&self, stage: usize, x: i128, inverse: bool) -> Result<Iv> {
        let h = self.height(stage);
        if x < 0 || x >= h {
            return Err(Error::OrbitExit(format!("floor {x} outside tower {stage}")));
        }
        if stage == 1 {
            return Ok((0, h));
        }
        let k = stage - 1;
        let hk = self.height(k);
        let q = self.offsets(k);
        let i = q.partition_point(|qi| *qi <= x) - 1;
        if x < q[i] + hk {
            let (d, end) = self.run_at(k, x - q[i], inverse)?;
            return Ok((d, end + q[i]));
        }
        if let Some(perm) = self.perm(k) {
            if x >= perm.zone.0 {
                return Ok(perm.run(x, inverse));
            }
        }
        Ok((0, q.get(i + 1).copied().unwrap_or(h)))
    }

    fn map_into(&self, stage: usize, ivs: &[Iv], inverse: bool, out: &mut Vec<Iv>) -> Result<()> {
        out.clear();
        let mut run: Option<(i128, i128, i128)> = None;
        for &(a, b) in ivs {
            let mut x = a;
            while x < b {
                let (start, end, d) = match run {
                    Some(r) if r.0 <= x && x < r.1 => r,
                    _ => {
                        let (d, end) = self.run_at(stage, x, inverse)?;
                        (x, end, d)
                    }
                };
                run = Some((start, end, d));
                let m = b.min(end);
                out.push((x + d, m + d));
                x = m;
            }
        }
        normalize(out);
        Ok(())
    }

    fn lift(&self, ivs: &[Iv], from: usize, to: usize) -> Vec<Iv> {
        let mut cur = ivs.to_vec();
        for l in from..to {
            let q = self.offsets(l);
            let mut next: Vec<Iv> = q
                .iter()
                .flat_map(|qi| cur.iter().map(move |(a, b)| (a + qi, b + qi)))
                .collect();
            normalize(&mut next);
            cur = next;
        }
        cur
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.heights.len() {
            return Err(Error::StageUnavailable(stage));
        }
        Ok(())
    }

    /// `P σ^q P⁻¹ A` at tower `stage`.
    pub fn conjugated_image(&self, a: &FloorSet, q: &BigInt, stage: usize) -> Result<FloorSet> {
        self.check_stage(stage)?;
        if a.stage() > stage {
            return Err(Error::StageMismatch {
                expected: stage,
                found: a.stage(),
            });
        }
        let ivs = to_ivs(a)?;
        let q = q
            .to_i128()
            .ok_or_else(|| Error::TooLarge(format!("exponent {q}")))?;
        let lifted = self.lift(&ivs, a.stage(), stage);
        Ok(from_ivs(stage, &self.conjugate(&lifted, q, stage)?))
    }

    fn conjugate(&self, ivs: &[Iv], q: i128, stage: usize) -> Result<Vec<Iv>> {
        let mut pulled = Vec::new();
        self.map_into(stage, ivs, true, &mut pulled)?;
        for iv in pulled.iter_mut() {
            *iv = (iv.0 + q, iv.1 + q);
        }
        let mut out = Vec::new();
        self.map_into(stage, &pulled, false, &mut out)?;
        Ok(out)
    }

    /// `σ^p A` and `T^q A` at the first tower holding both.
    fn term_sets(&self, n: i128) -> Result<(usize, Vec<Iv>, Vec<Iv>)> {
        let p = self.seqs.p.at(n)?;
        let q = self.seqs.q.at(n)?;
        for stage in 1..=self.heights.len() {
            let h = self.height(stage);
            let a = self.lift(&self.a, 1, stage);
            let sigma: Vec<Iv> = a.iter().map(|(x, y)| (x + p, y + p)).collect();
            if sigma.last().is_some_and(|iv| iv.1 > h) {
                continue;
            }
            match self.conjugate(&a, q, stage) {
                Ok(t) => return Ok((stage, sigma, t)),
                Err(Error::OrbitExit(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::OrbitExit(format!(
            "n = {n}: σ^{p} A or T^{q} A leaves tower {}",
            self.heights.len()
        )))
    }

    pub fn base_term(&self, n: i128) -> Result<Rational> {
        let (stage, s, t) = self.term_sets(n)?;
        Ok(Rational::from_integer(overlap(&s, &t).into()) * self.floor_measure(stage))
    }

    /// `μ_∘(C(σ^p A, 0) ∩ C(T^q A, 0))`.
    pub fn poisson_term(&self, n: i128) -> Result<ExactExp> {
        let (stage, s, t) = self.term_sets(n)?;
        let conj = CylinderConjunction::new(vec![
            CylinderEvent::new(from_ivs(stage, &s), 0),
            CylinderEvent::new(from_ivs(stage, &t), 0),
        ]);
        cylinder_measure(&self.construction, &conj)
    }

    /// Checks the window identities for every `n` of every window: equality
    /// `T^{q(n)}A = σ^{p(n)}A` on even stages, disjointness on odd ones.
    pub fn verify_windows(&self, jobs: usize) -> Result<Vec<WindowCheck>> {
        self.windows.iter().map(|w| self.verify_window(w, jobs)).collect()
    }

    pub fn verify_window(&self, w: &StageWindow, jobs: usize) -> Result<WindowCheck> {
        let stage = w.j + 1;
        let a = self.lift(&self.a, 1, stage);
        let mut pulled = Vec::new();
        self.map_into(stage, &a, true, &mut pulled)?;
        let check_range = |lo: i128, hi: i128| -> Result<(u64, Option<i128>)> {
            let (mut shifted, mut image) = (Vec::new(), Vec::new());
            let mut holds = 0u64;
            let mut first_failure = None;
            for n in lo..=hi {
                let (p, q) = (self.seqs.p.at(n)?, self.seqs.q.at(n)?);
                shifted.clear();
                shifted.extend(pulled.iter().map(|(x, y)| (x + q, y + q)));
                self.map_into(stage, &shifted, false, &mut image)?;
                let ok = if w.even() {
                    image.len() == a.len()
                        && image.iter().zip(&a).all(|(u, v)| u.0 == v.0 + p && u.1 == v.1 + p)
                } else {
                    let sigma: Vec<Iv> = a.iter().map(|(x, y)| (x + p, y + p)).collect();
                    overlap(&image, &sigma) == 0
                };
                if ok {
                    holds += 1;
                } else if first_failure.is_none() {
                    first_failure = Some(n);
                }
            }
            Ok((holds, first_failure))
        };
        let parts = split_range(w.lo, w.hi, jobs.max(1));
        let results: Vec<Result<(u64, Option<i128>)>> = if parts.len() == 1 {
            vec![check_range(w.lo, w.hi)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = parts
                    .iter()
                    .map(|&(lo, hi)| {
                        let f = &check_range;
                        s.spawn(move || f(lo, hi))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("verifier thread panicked"))
                    .collect()
            })
        };
        let mut holds = 0;
        let mut first_failure = None;
        for r in results {
            let (h, f) = r?;
            holds += h;
            first_failure = first_failure.or(f);
        }
        Ok(WindowCheck {
            j: w.j,
            even: w.even(),
            lo: w.lo,
            hi: w.hi,
            checked: w.len() as u64,
            holds,
            first_failure,
        })
    }

    /// Terms and running averages for `n = 1..=n_max`.
    pub fn average_series(&self, n_max: i128, level: Level, jobs: usize) -> Result<Vec<SeriesRow>> {
        if n_max < 1 {
            return Ok(Vec::new());
        }
        let eval = |lo: i128, hi: i128| -> Result<Vec<(i128, Term)>> {
            (lo..=hi)
                .map(|n| {
                    Ok((
                        n,
                        match level {
                            Level::Base => Term::Base(self.base_term(n)?),
                            Level::Poisson => Term::Poisson(self.poisson_term(n)?),
                        },
                    ))
                })
                .collect()
        };
        let parts = split_range(1, n_max, jobs.max(1));
        let chunks: Vec<Result<Vec<(i128, Term)>>> = std::thread::scope(|s| {
            let handles: Vec<_> = parts
                .iter()
                .map(|&(lo, hi)| {
                    let f = &eval;
                    s.spawn(move || f(lo, hi))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("series thread panicked"))
                .collect()
        });
        let mut rows = Vec::with_capacity(n_max as usize);
        let mut exact_sum = Rational::zero();
        let mut approx_sum = 0.0;
        for chunk in chunks {
            for (n, term) in chunk? {
                let (p, q) = (self.seqs.p.at(n)?, self.seqs.q.at(n)?);
                let (running_exact, running_approx) = match &term {
                    Term::Base(v) => {
                        exact_sum += v;
                        let avg = &exact_sum / Rational::from_integer(n.into());
                        let f = ratio::to_f64(&avg);
                        (Some(avg), f)
                    }
                    Term::Poisson(e) => {
                        approx_sum += e.approx();
                        (None, approx_sum / n as f64)
                    }
                };
                rows.push(SeriesRow {
                    n,
                    p,
                    q,
                    term,
                    running_exact,
                    running_approx,
                });
            }
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Base,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WindowCheck {
    pub j: usize,
    pub even: bool,
    pub lo: i128,
    pub hi: i128,
    pub checked: u64,
    pub holds: u64,
    pub first_failure: Option<i128>,
}

impl WindowCheck {
    pub fn all_hold(&self) -> bool {
        self.holds == self.checked
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Base(Rational),
    Poisson(ExactExp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub n: i128,
    pub p: i128,
    pub q: i128,
    pub term: Term,
    pub running_exact: Option<Rational>,
    pub running_approx: f64,
}

pub const SERIES_CSV_HEADER: &str = "n,p_n,q_n,term_lo,term_hi,running_avg";

impl SeriesRow {
    /// Base-level rows are exact `p/q`; Poisson rows give the term as
    /// `c*exp(-s)` and the running average to 12 decimals.
    pub fn csv_row(&self) -> String {
        let (lo, hi, avg) = match &self.term {
            Term::Base(v) => {
                let v = ratio::fmt_ratio(v);
                let avg = self.running_exact.as_ref().map(ratio::fmt_ratio).unwrap_or_default();
                (v.clone(), v, avg)
            }
            Term::Poisson(e) => {
                let v = format!(
                    "{}*exp(-{})",
                    ratio::fmt_ratio(&e.coeff),
                    ratio::fmt_ratio(&e.exponent)
                );
                (v.clone(), v, format!("{:.12}", self.running_approx))
            }
        };
        format!("{},{},{},{lo},{hi},{avg}", self.n, self.p, self.q)
    }
}

fn split_range(lo: i128, hi: i128, parts: usize) -> Vec<Iv> {
    let len = hi - lo + 1;
    let parts = (parts as i128).clamp(1, len.max(1));
    let step = (len + parts - 1) / parts;
    (0..parts)
        .map(|k| (lo + k * step, (lo + (k + 1) * step - 1).min(hi)))
        .filter(|(a, b)| a <= b)
        .collect()
}

fn normalize(ivs: &mut Vec<Iv>) {
    ivs.sort_unstable();
    let mut out: Vec<Iv> = Vec::with_capacity(ivs.len());
    for &(a, b) in ivs.iter() {
        if a >= b {
            continue;
        }
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    *ivs = out;
}

fn overlap(a: &[Iv], b: &[Iv]) -> i128 {
    let (mut i, mut k, mut total) = (0, 0, 0);
    while i < a.len() && k < b.len() {
        let lo = a[i].0.max(b[k].0);
        let hi = a[i].1.min(b[k].1);
        if lo < hi {
            total += hi - lo;
        }
        if a[i].1 < b[k].1 {
            i += 1;
        } else {
            k += 1;
        }
    }
    total
}

fn to_ivs(fs: &FloorSet) -> Result<Vec<Iv>> {
    fs.intervals()
        .iter()
        .map(|(a, b)| match (a.to_i128(), b.to_i128()) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::TooLarge(format!("floor set {fs}"))),
        })
        .collect()
}

fn from_ivs(stage: usize, ivs: &[Iv]) -> FloorSet {
    FloorSet::from_intervals(
        stage,
        ivs.iter().map(|(a, b)| (BigInt::from(*a), BigInt::from(*b))),
    )
}

/// `E`, `RE` two floors of `X_1` swapped by `R`; `U = E ∪ RE`.
#[derive(Debug, Clone)]
pub struct RepulsionScenario {
    construction: Arc<Construction>,
    pub swap: FloorSwap,
    pub tensor: u32,
    pub max_stage: usize,
}

impl RepulsionScenario {
    pub fn new(construction: Arc<Construction>, swap: FloorSwap, max_stage: usize) -> Result<Self> {
        let x1 = construction.x1();
        if swap.stage != 1 || !swap.first().union(&swap.second()).difference(&x1).is_empty() {
            return Err(Error::InvalidSpec("E and RE must be floors of X_1".into()));
        }
        Ok(RepulsionScenario {
            construction,
            swap,
            tensor: 4,
            max_stage,
        })
    }

    /// `C(1)` with base 2 and `h_1 = 2`, `E = {0}`, `RE = {1}`, verified
    /// Sidon through `stages`.
    pub fn default_c1(stages: usize) -> Result<Self> {
        let desc = CnuDescriptor::new(Rational::one(), 2)?;
        let c = Arc::new(Construction::new(ConstructionSpec::rule(2, CnuRule { desc }))?);
        if let Some(v) = check_sidon(&c, stages)?.into_iter().find(|v| !v.sidon) {
            return Err(Error::NotSidon(format!("stage {}", v.stage)));
        }
        Self::new(c, FloorSwap::new(1, 0, 1, 1)?, stages + 2)
    }

    pub fn construction(&self) -> &Arc<Construction> {
        &self.construction
    }

    pub fn e(&self) -> FloorSet {
        self.swap.first()
    }

    pub fn re(&self) -> FloorSet {
        self.swap.second()
    }

    pub fn u(&self) -> FloorSet {
        self.e().union(&self.re())
    }

    fn image(&self, set: &FloorSet, n: &BigInt) -> Result<FloorSet> {
        image_under_power(&self.construction, set, n, self.max_stage)
    }

    /// `μ(T^n U ∩ U)`.
    pub fn overlap(&self, n: &BigInt) -> Result<Rational> {
        let tu = self.image(&self.u(), n)?;
        let u = lift_floor_set(&self.construction, &self.u(), tu.stage())?;
        measure_of(&self.construction, &tu.intersection(&u))
    }

    /// `μ_∘(Ŝ^n D ∩ T̂^n D)`. Applying `R̂` turns it into
    /// `μ_∘(T̂^n R̂D ∩ R̂T̂^n D)`, which only needs forward images:
    /// `C(T^n RE, 0) ∩ C(T^n E, 1) ∩ C(R T^n E, 0) ∩ C(R T^n RE, 1)`.
    pub fn repulsion_measure(&self, n: &BigInt) -> Result<ExactExp> {
        let f = self.image(&self.e(), n)?;
        let g = self.image(&self.re(), n)?;
        let stage = f.stage().max(g.stage());
        let f = lift_floor_set(&self.construction, &f, stage)?;
        let g = lift_floor_set(&self.construction, &g, stage)?;
        let rf = self.swap.apply(&self.construction, &f)?;
        let rg = self.swap.apply(&self.construction, &g)?;
        let conj = CylinderConjunction::new(vec![
            CylinderEvent::new(g, 0),
            CylinderEvent::new(f, 1),
            CylinderEvent::new(rf, 0),
            CylinderEvent::new(rg, 1),
        ]);
        cylinder_measure(&self.construction, &conj)
    }

    /// Lags `0 <= n <= n_max` with `T^n U ∩ U` nonempty.
    pub fn support(&self, n_max: &BigInt) -> Result<Vec<BigInt>> {
        let engine = CorrelationEngine::new(self.construction.clone()).with_max_stage(self.max_stage);
        let u = self.u();
        let lags = engine.exact_lags(&u, &u, n_max)?;
        Ok(lags
            .counts
            .iter()
            .filter(|(n, c)| !n.is_negative() && !c.is_zero())
            .map(|(n, _)| n.clone())
            .collect())
    }

    pub fn repulsion_summability(&self, n_max: &BigInt) -> Result<SummabilityReport> {
        let mut rows = Vec::new();
        let mut fitted: Option<Rational> = None;
        for n in self.support(n_max)? {
            let overlap = self.overlap(&n)?;
            let value = self.repulsion_measure(&n)?;
            if !value.coeff.is_zero() {
                let ratio = &value.coeff / &overlap;
                if fitted.as_ref().is_none_or(|c| ratio > *c) {
                    fitted = Some(ratio);
                }
            }
            rows.push(RepulsionRow { n, overlap, value });
        }
        // value ≤ c·e^{-s}·μ with c e^{-s} ≤ c since s ≥ 0
        let constant = fitted.unwrap_or_else(Rational::zero);
        let bound_holds = rows.iter().all(|r| r.value.coeff <= &constant * &r.overlap);
        let mut overlap4 = Rational::zero();
        let mut partial = Vec::with_capacity(rows.len());
        let mut tensor_sum = 0.0;
        for r in &rows {
            overlap4 += ratio::pow(&r.overlap, 4);
            partial.push(overlap4.clone());
            tensor_sum += r.value.approx().powi(self.tensor as i32);
        }
        let mut m = 1;
        while self.construction.height(m)? <= *n_max {
            m += 1;
        }
        let product = product_rhs(&self.construction, m, 2)?;
        let c = ratio::to_f64(&constant);
        let tensor_target = c.powi(self.tensor as i32) * ratio::to_f64(&overlap4);
        Ok(SummabilityReport {
            n_max: n_max.clone(),
            stage: m,
            last_nonzero: rows.iter().rev().find(|r| !r.value.coeff.is_zero()).map(|r| r.n.clone()),
            monotone: partial.windows(2).all(|w| w[0] <= w[1]),
            overlap4_sum: overlap4.clone(),
            product_bound: product.clone(),
            within_product: overlap4 <= product,
            fitted_const: constant,
            bound_holds,
            tensor_sum,
            tensor_target,
            rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepulsionRow {
    #[serde(serialize_with = "ratio::ser_int")]
    pub n: BigInt,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub overlap: Rational,
    pub value: ExactExp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummabilityReport {
    #[serde(serialize_with = "ratio::ser_int")]
    pub n_max: BigInt,
    /// Least `m` with `h_m > n_max`; the product bound runs over `j < m`.
    pub stage: usize,
    #[serde(serialize_with = "ratio::ser_int_opt")]
    pub last_nonzero: Option<BigInt>,
    pub monotone: bool,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub overlap4_sum: Rational,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub product_bound: Rational,
    pub within_product: bool,
    /// Least `C` with `coeff(n) <= C·μ(T^n U ∩ U)` over the computed lags.
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub fitted_const: Rational,
    pub bound_holds: bool,
    pub tensor_sum: f64,
    pub tensor_target: f64,
    pub rows: Vec<RepulsionRow>,
}

impl SummabilityReport {
    /// Largest repulsion value (approximate) on each lag window
    /// `(h_j, h_{j+1}]`, `j = 1..`.
    pub fn window_maxima(&self, c: &Construction) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        for j in 1..self.stage {
            let (lo, hi) = (c.height(j)?, c.height(j + 1)?);
            let best = self
                .rows
                .iter()
                .filter(|r| r.n > lo && r.n <= hi)
                .map(|r| r.value.approx())
                .fold(0.0, f64::max);
            out.push((j, best));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::IntersectionQuery;
    use crate::ratio::rat;
    use proptest::prelude::*;

    fn small() -> DivergenceScenario {
        DivergenceScenario::build(
            SequencePair::default_pair(),
            1,
            3,
            BTreeSet::new(),
            WindowRule::Gapped,
        )
        .unwrap()
    }

    #[test]
    fn sigma_schedule() {
        let sc = small();
        assert_eq!(sc.heights, vec![1, 9, 721, 9364349]);
        assert_eq!(sc.spacers[0], vec![0, 7]);
        let w: Vec<(usize, i128, i128)> = sc.windows.iter().map(|w| (w.j, w.lo, w.hi)).collect();
        assert_eq!(w, vec![(1, 1, 1), (2, 4, 18), (3, 360, 2163)]);
        let katok = build_sigma(&SequencePair::default_pair(), 1, 3, &BTreeSet::from([2])).unwrap();
        let c = Construction::new(katok).unwrap();
        assert_eq!(c.params(2).unwrap(), StageParams::new([0, 0, 1, 1]));
    }

    #[test]
    fn literal_pair_from_examples() {
        let pair = SequencePair::new(IntPoly::new(vec![0, 2]), IntPoly::new(vec![0, 3])).unwrap();
        let sc = DivergenceScenario::build(pair, 2, 2, BTreeSet::new(), WindowRule::Gapped).unwrap();
        // s_1(2) = max{p(2), q(2)} + 2h_1 + 1 = 11
        assert_eq!(sc.heights[1], 15);
        assert_eq!(sc.block_bounds[0].n, 2);
        // gaps 2 and 3 never reach 2h_j, leaving single-index windows at best
        assert_eq!(sc.skipped.len(), 1);
        assert_eq!((sc.windows[0].j, sc.windows[0].lo, sc.windows[0].hi), (2, 30, 30));
    }

    #[test]
    fn literal_windows_collide() {
        let err = DivergenceScenario::build(
            SequencePair::default_pair(),
            1,
            3,
            BTreeSet::new(),
            WindowRule::Literal,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PieceCollision { stage: 2, first: 3, second: 4 }));
    }

    #[test]
    fn block_bounds_grow() {
        let sc = small();
        let n: Vec<i128> = sc.block_bounds.iter().map(|b| b.n).collect();
        assert!(n.windows(2).all(|w| w[0] <= w[1]));
        for b in &sc.block_bounds {
            assert!(b.n >= b.j as i128 * sc.height(b.j));
            if b.j > 1 {
                assert!(sc.block_bounds[b.j - 2].n < sc.height(b.j));
            }
        }
        assert_eq!(sc.block_bounds[1].ratio, Some(rat(1, 18)));
    }

    #[test]
    fn weak_limit_half() {
        let sc = small();
        let engine = CorrelationEngine::new(sc.construction().clone());
        let x1 = sc.construction().x1();
        for j in 1..=3 {
            let q = IntersectionQuery::pair(sc.height(j), &x1, &x1);
            let v = engine.multi_intersection(&q, &rat(0, 1)).unwrap();
            assert_eq!(v.lo, rat(1, 2), "stage {j}");
        }
    }

    #[test]
    fn permutation_is_a_bijection() {
        let sc = small();
        for perm in &sc.perms {
            let (z0, z1) = perm.zone;
            let mut images = Vec::new();
            let mut x = z0;
            while x < z1 {
                let (d, end) = perm.run(x, false);
                assert!(end > x && end <= z1);
                images.push((x + d, end + d));
                for y in [x, end - 1] {
                    let (back, _) = perm.run(y + d, true);
                    assert_eq!(y + d + back, y);
                }
                x = end;
            }
            images.sort();
            assert_eq!(images[0].0, z0);
            assert_eq!(images.last().unwrap().1, z1);
            assert!(images.windows(2).all(|w| w[0].1 == w[1].0), "stage {}", perm.stage);
        }
    }

    #[test]
    fn window_identities() {
        let sc = small();
        for check in sc.verify_windows(2).unwrap() {
            assert!(check.all_hold(), "{check:?}");
        }
        let c = sc.construction();
        let a = FloorSet::range(1, 0, 1);
        assert_eq!(sc.conjugated_image(&a, &BigInt::zero(), 3).unwrap(), lift_floor_set(c, &a, 3).unwrap());
        // even stage: T^{q(n)} A = A + p(n); odd stage: A + p(n) + 2h_j
        let p = |n| sc.seqs.p.eval(n).unwrap();
        let q = |n| BigInt::from(sc.seqs.q.eval(n).unwrap());
        let a3 = lift_floor_set(c, &a, 3).unwrap();
        assert_eq!(sc.conjugated_image(&a, &q(5), 3).unwrap(), a3.translate(&BigInt::from(p(5))));
        let a4 = lift_floor_set(c, &a, 4).unwrap();
        assert_eq!(
            sc.conjugated_image(&a, &q(400), 4).unwrap(),
            a4.translate(&BigInt::from(p(400) + 2 * 721))
        );
    }

    #[test]
    fn identity_below_zone() {
        let sc = small();
        for perm in &sc.perms {
            let j = perm.stage;
            assert_eq!(perm.zone.0, 2 * sc.height(j));
            let h = sc.height(j);
            for x in 0..perm.zone.0.min(64) {
                let top = sc.run_at(j + 1, x, false).unwrap().0;
                assert_eq!(top, sc.run_at(j, x % h, false).unwrap().0);
            }
        }
    }

    #[test]
    fn terms_on_windows() {
        let sc = small();
        let mu = sc.measure_a();
        assert_eq!(mu, rat(1, 1));
        assert_eq!(sc.base_term(10).unwrap(), mu);
        assert_eq!(sc.base_term(400).unwrap(), rat(0, 1));
        assert_eq!(sc.poisson_term(10).unwrap(), ExactExp::new(rat(1, 1), rat(1, 1)));
        assert_eq!(sc.poisson_term(400).unwrap(), ExactExp::new(rat(1, 1), rat(2, 1)));
    }

    #[test]
    fn averages_oscillate() {
        let sc = small();
        let rows = sc.average_series(2163, Level::Base, 4).unwrap();
        let at = |n: usize| rows[n - 1].running_exact.clone().unwrap();
        let b = &sc.block_bounds;
        // every n before the window may miss, every n inside it hits (even) or misses (odd)
        let w = &sc.windows;
        assert!(at(18) >= rat(1, 1) - Rational::new((w[1].lo - 1).into(), b[1].n.into()));
        assert!(at(2163) <= Rational::new((w[2].lo - 1).into(), b[2].n.into()));
        assert!(ratio::to_f64(&at(18)) >= 0.8);
        assert!(ratio::to_f64(&at(2163)) <= 0.2);
        let poisson = sc.average_series(40, Level::Poisson, 1).unwrap();
        for r in &poisson {
            if let (Some(w), Term::Poisson(e)) = (sc.window_of(r.n), &r.term) {
                let expect = if w.even() { rat(1, 1) } else { rat(2, 1) };
                assert_eq!(e, &ExactExp::new(rat(1, 1), expect));
            }
        }
        assert!(rows[9].csv_row().starts_with("10,210,220,1/1,1/1,"));
    }

    #[test]
    fn copy_uniformity() {
        let sc = small();
        let c = sc.construction();
        let a = FloorSet::range(1, 0, 1);
        for n in [3i128, 7, 12] {
            let q = BigInt::from(sc.seqs.q.eval(n).unwrap());
            let low = sc.conjugated_image(&a, &q, 3).unwrap();
            let high = sc.conjugated_image(&a, &q, 4).unwrap();
            assert_eq!(lift_floor_set(c, &low, 4).unwrap(), high);
        }
    }

    #[test]
    fn orbit_exit() {
        let sc = small();
        let a = FloorSet::range(1, 0, 1);
        assert!(matches!(
            sc.conjugated_image(&a, &BigInt::from(5000), 3),
            Err(Error::OrbitExit(_))
        ));
    }

    #[test]
    fn repulsion_examples() {
        let rs = RepulsionScenario::default_c1(3).unwrap();
        // n = 0: μ(RE) e^{-μ(U)} with μ(E) = μ(RE) = 1/2
        assert_eq!(
            rs.repulsion_measure(&BigInt::zero()).unwrap(),
            ExactExp::new(rat(1, 2), rat(1, 1))
        );
        // T^2 U misses U
        assert_eq!(rs.overlap(&BigInt::from(2)).unwrap(), rat(0, 1));
        assert!(rs.repulsion_measure(&BigInt::from(2)).unwrap().coeff.is_zero());
        // lag h_1 + s_1(1) = 7 at stage 2
        assert_eq!(
            rs.repulsion_measure(&BigInt::from(7)).unwrap(),
            ExactExp::new(rat(1, 4), rat(1, 1))
        );
    }

    #[test]
    fn summability_small() {
        let rs = RepulsionScenario::default_c1(3).unwrap();
        let h3 = rs.construction().height(3).unwrap();
        let rep = rs.repulsion_summability(&h3).unwrap();
        assert!(rep.bound_holds && rep.monotone && rep.within_product);
        assert!(rep.rows.len() > 3);
        assert!(rep.tensor_sum <= rep.tensor_target + 1e-12);
    }

    proptest! {
        #[test]
        fn conjugation_preserves_size(n in 1i128..300, lo in 0i128..9, w in 1i128..4) {
            let sc = small();
            let q = sc.seqs.q.eval(n).unwrap();
            let set = FloorSet::range(2, lo, (lo + w).min(9));
            if let Ok(img) = sc.conjugated_image(&set, &BigInt::from(q), 4) {
                let lifted = lift_floor_set(sc.construction(), &set, 4).unwrap();
                prop_assert_eq!(img.len(), lifted.len());
            }
        }
    }
}
