//! Norm diagnostics for the lag polynomials `Q_j`, `P_k` and the lag-product
//! identity for Sidon towers.
//!
//! `F` is the indicator of `X_1^{×d}` and `S = T^{⊗d}`, so every inner
//! product `⟨S^a F, S^b F⟩` is the scalar `c_{a-b}^d`. Norms are therefore
//! sums of powers of single correlations and never touch `d`-dimensional sets.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::Serialize;

use crate::correlation::{CorrelationEngine, CorrelationValue, IntersectionQuery};
use crate::error::{Error, Result};
use crate::ratio::{self, Rational};
use crate::sidon::{check_sidon, CnuDescriptor};
use crate::tower::Construction;

/// Inner products evaluated by one `pk_norm` call are refused beyond this.
pub const DEFAULT_PAIR_CAP: u64 = 1 << 22;

/// Exponents of `Q_j`: `q(i,j) - q(i',j)` for every ordered pair `i ≠ i'`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LagFamily {
    pub j: usize,
    #[serde(serialize_with = "ratio::ser_int_vec")]
    pub lags: Vec<BigInt>,
    /// `(i, i')`, 1-based, for each lag.
    pub pairs: Vec<(usize, usize)>,
}

impl LagFamily {
    pub fn new(c: &Construction, j: usize) -> Result<Self> {
        let q = c.offsets(j)?;
        let mut lags = Vec::with_capacity(q.len() * (q.len() - 1));
        let mut pairs = Vec::with_capacity(lags.capacity());
        for (i, qi) in q.iter().enumerate() {
            for (k, qk) in q.iter().enumerate() {
                if i != k {
                    lags.push(qi - qk);
                    pairs.push((i + 1, k + 1));
                }
            }
        }
        Ok(LagFamily { j, lags, pairs })
    }
}

/// Stages `start .. start + n_eff` of block `k`, all cut into `r` columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PkBlock {
    pub k: usize,
    pub start: usize,
    #[serde(serialize_with = "ratio::ser_int")]
    pub r: BigInt,
    /// Untruncated `N_k`.
    #[serde(serialize_with = "ratio::ser_int")]
    pub n_k: BigInt,
    /// Stages actually summed.
    pub n_eff: usize,
}

impl PkBlock {
    /// Block `k` of a `C(ν)` descriptor, truncated to at most `cap` stages.
    pub fn from_descriptor(desc: &CnuDescriptor, k: usize, cap: usize) -> Result<Self> {
        let mut upto = 1;
        let block = loop {
            let blocks = desc.blocks(upto)?;
            if let Some(b) = blocks.into_iter().find(|b| b.k == k) {
                break b;
            }
            upto = upto.saturating_mul(2);
        };
        let n = usize::try_from(&block.len).unwrap_or(usize::MAX).max(1);
        Ok(PkBlock {
            k,
            start: block.start,
            r: block.r,
            n_eff: n.min(cap.max(1)),
            n_k: block.len,
        })
    }

    pub fn stages(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.n_eff
    }

    pub fn truncated(&self) -> bool {
        BigInt::from(self.n_eff) < self.n_k
    }

    /// `a_k = (r - 1) r^(1 - d)`.
    pub fn a_k(&self, d: u32) -> Rational {
        let r = Rational::from_integer(self.r.clone());
        (&r - Rational::one()) / ratio::pow(&r, d - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decomposition {
    /// `(a_k N)^{-2} ‖(G_k - a_k N) F‖²`.
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub variance_lo: Rational,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub variance_hi: Rational,
    /// `(a_k N)^{-2} ‖G_k (1 - F)‖²`.
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub outside_lo: Rational,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub outside_hi: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PkNormReport {
    pub k: usize,
    pub d: u32,
    pub p: u32,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub a_k: Rational,
    #[serde(serialize_with = "ratio::ser_int")]
    pub n_k: BigInt,
    pub n_eff: usize,
    pub truncated: bool,
    /// `‖P_k(S)F - F‖²` for `p = 1`, `‖P_k(S^p)F‖²` otherwise.
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub dist_lo: Rational,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub dist_hi: Rational,
    pub exact: bool,
    /// Every off-diagonal `c_{p(ℓ-ℓ')}` is certified zero.
    pub cross_terms_vanish: bool,
    /// `(a_k N)^{-2} (r² - r) N`.
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub closed_form: Rational,
    pub decomposition: Option<Decomposition>,
}

impl PkNormReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.k,
            self.d,
            self.p,
            ratio::fmt_ratio(&self.a_k),
            self.n_eff,
            ratio::fmt_ratio(&self.dist_lo),
            ratio::fmt_ratio(&self.dist_hi)
        )
    }
}

pub const PK_CSV_HEADER: &str = "k,d,p,a_k,N_k_effective,dist_lo,dist_hi";

/// Interval sum with nonnegative entries raised to `d`.
#[derive(Debug, Clone, Default)]
struct Bracket {
    lo: Rational,
    hi: Rational,
}

impl Bracket {
    fn add_power(&mut self, v: &CorrelationValue, d: u32, weight: &Rational) {
        let lo = ratio::pow(&v.lo, d) * weight;
        let hi = ratio::pow(&v.hi, d) * weight;
        if weight.is_negative() {
            self.lo += hi;
            self.hi += lo;
        } else {
            self.lo += lo;
            self.hi += hi;
        }
    }

    fn add(&mut self, x: &Rational) {
        self.lo += x;
        self.hi += x;
    }

    fn scale(&mut self, s: &Rational) {
        self.lo *= s;
        self.hi *= s;
    }
}

/// Number of inner products `pk_norm` evaluates: the distinct lag differences.
pub fn pk_cost(c: &Construction, block: &PkBlock) -> Result<u64> {
    Ok(lag_differences(c, block, 1)?.len() as u64)
}

fn block_lags(c: &Construction, block: &PkBlock) -> Result<Vec<BigInt>> {
    let mut lags = Vec::new();
    for j in block.stages() {
        lags.extend(LagFamily::new(c, j)?.lags);
    }
    Ok(lags)
}

fn lag_differences(c: &Construction, block: &PkBlock, p: u32) -> Result<BTreeMap<BigInt, u64>> {
    let lags = block_lags(c, block)?;
    let mut diffs = BTreeMap::new();
    for a in &lags {
        for b in &lags {
            *diffs.entry((a - b) * p).or_insert(0u64) += 1;
        }
    }
    Ok(diffs)
}

/// `‖P_k(S^p)F - [p = 1] F‖²`, exact when every correlation certifies and
/// otherwise a certified interval. `eps` bounds the width of each
/// uncertified correlation.
pub fn pk_norm(
    engine: &CorrelationEngine,
    block: &PkBlock,
    d: u32,
    p: u32,
    eps: &Rational,
    decompose: bool,
    pair_cap: u64,
) -> Result<PkNormReport> {
    if d == 0 || p == 0 {
        return Err(Error::InvalidSpec("pk_norm needs d >= 1 and p >= 1".into()));
    }
    let c = engine.construction();
    for j in block.stages() {
        let r = c.params(j)?.r;
        if BigInt::from(r) != block.r {
            return Err(Error::InvalidSpec(format!(
                "stage {j} has r = {r}, block expects {}",
                block.r
            )));
        }
    }
    let lags = block_lags(c, block)?;
    let m = lags.len() as u64;
    if m.saturating_mul(m) > pair_cap {
        return Err(Error::BudgetExceeded(format!(
            "{m} lags need {} inner products, cap {pair_cap}",
            m.saturating_mul(m)
        )));
    }
    let diffs = lag_differences(c, block, p)?;
    let a_k = block.a_k(d);
    let an = &a_k * BigInt::from(block.n_eff);
    let inv2 = Rational::one() / (&an * &an);

    let mut total = Bracket::default();
    let mut cross_vanish = true;
    let mut exact = true;
    for (n, mult) in &diffs {
        let v = engine.autocorrelation(n, eps)?;
        exact &= v.exact;
        if !n.is_zero() && !(v.exact && v.lo.is_zero()) {
            cross_vanish = false;
        }
        total.add_power(&v, d, &Rational::from_integer(BigInt::from(*mult)));
    }
    total.scale(&inv2);
    if p == 1 {
        let mut linear = Bracket::default();
        let w = -Rational::from_integer(BigInt::from(2)) / &an;
        for l in &lags {
            let v = engine.autocorrelation(l, eps)?;
            exact &= v.exact;
            linear.add_power(&v, d, &w);
        }
        total.lo += linear.lo;
        total.hi += linear.hi;
        total.add(&Rational::one());
    }
    let zero = Rational::zero();
    let decomposition = if decompose {
        Some(decompose_block(engine, &lags, d, &an, eps)?)
    } else {
        None
    };
    Ok(PkNormReport {
        k: block.k,
        d,
        p,
        a_k,
        n_k: block.n_k.clone(),
        n_eff: block.n_eff,
        truncated: block.truncated(),
        dist_lo: if total.lo < zero { zero.clone() } else { total.lo },
        dist_hi: total.hi,
        exact,
        cross_terms_vanish: cross_vanish,
        closed_form: &inv2 * BigInt::from(m),
        decomposition,
    })
}

/// Splits `G_k F` into its part on `X_1^{×d}` and its part outside, using
/// `⟨F S^ℓ F, F S^ℓ' F⟩ = μ(X_1 ∩ T^ℓ X_1 ∩ T^ℓ' X_1)^d`.
fn decompose_block(
    engine: &CorrelationEngine,
    lags: &[BigInt],
    d: u32,
    an: &Rational,
    eps: &Rational,
) -> Result<Decomposition> {
    let x1 = engine.construction().x1();
    let one = Rational::one();
    let mut inside = Bracket::default();
    let mut full = Bracket::default();
    for a in lags {
        for b in lags {
            let q = IntersectionQuery::new(vec![
                (BigInt::zero(), x1.clone()),
                (a.clone(), x1.clone()),
                (b.clone(), x1.clone()),
            ]);
            inside.add_power(&engine.multi_intersection(&q, eps)?, d, &one);
            full.add_power(&engine.autocorrelation(&(a - b), eps)?, d, &one);
        }
    }
    let mut linear = Bracket::default();
    let w = -Rational::from_integer(BigInt::from(2)) * an;
    for l in lags {
        linear.add_power(&engine.autocorrelation(l, eps)?, d, &w);
    }
    let inv2 = one / (an * an);
    let mut variance = Bracket {
        lo: &inside.lo + &linear.lo + an * an,
        hi: &inside.hi + &linear.hi + an * an,
    };
    variance.scale(&inv2);
    let mut outside = Bracket {
        lo: &full.lo - &inside.hi,
        hi: &full.hi - &inside.lo,
    };
    outside.scale(&inv2);
    Ok(Decomposition {
        variance_lo: variance.lo,
        variance_hi: variance.hi,
        outside_lo: outside.lo,
        outside_hi: outside.hi,
    })
}

/// Mean of the distance brackets of several `pk_norm` reports, a simple
/// stand-in for the repeated average `R_N`.
pub fn repeated_average(reports: &[PkNormReport]) -> Option<(Rational, Rational)> {
    if reports.is_empty() {
        return None;
    }
    let n = Rational::from_integer(BigInt::from(reports.len()));
    let lo: Rational = reports.iter().map(|r| r.dist_lo.clone()).sum();
    let hi: Rational = reports.iter().map(|r| r.dist_hi.clone()).sum();
    Some((lo / &n, hi / n))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LemmaViolation {
    pub first: (usize, usize),
    pub second: (usize, usize),
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub measure: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LemmaReport {
    pub j: usize,
    pub holds: bool,
    pub pairs_checked: usize,
    pub violations: Vec<LemmaViolation>,
}

/// `μ(T^ℓ X_1 ∩ T^ℓ' X_1 ∖ X_1)` for two lags. Returns the exact value, or
/// a positive certified lower bound when the value cannot be pinned down
/// but is known to be nonzero. Points counted at a stage with both orbits
/// inside the tower and a floor outside `X_1` really are in the set, so the
/// difference of the two stage counts is a lower bound.
fn outside_overlap(engine: &CorrelationEngine, a: &BigInt, b: &BigInt) -> Result<Rational> {
    let x1 = engine.construction().x1();
    let both = IntersectionQuery::new(vec![(a.clone(), x1.clone()), (b.clone(), x1.clone())]);
    let inside = IntersectionQuery::new(vec![
        (a.clone(), x1.clone()),
        (b.clone(), x1.clone()),
        (BigInt::zero(), x1),
    ]);
    for level in 1..=engine.max_stage() {
        let (u, v) = match (engine.bounds_at(&both, level), engine.bounds_at(&inside, level)) {
            (Ok(u), Ok(v)) => (u, v),
            (Err(Error::StageUnavailable(_)), _) | (_, Err(Error::StageUnavailable(_))) => break,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let lo = &u.lo - &v.lo;
        if (u.exact && v.exact) || lo.is_positive() {
            return Ok(lo);
        }
    }
    Err(Error::NotExact(format!("overlap of lags {a} and {b} outside X_1")))
}

/// For every two distinct ordered column pairs, the translates of `X_1` by
/// their lags must not meet outside `X_1`.
pub fn lemma_disjointness_check(engine: &CorrelationEngine, j: usize) -> Result<LemmaReport> {
    let fam = LagFamily::new(engine.construction(), j)?;
    let mut violations = Vec::new();
    let mut checked = 0;
    for x in 0..fam.lags.len() {
        for y in x + 1..fam.lags.len() {
            checked += 1;
            let m = outside_overlap(engine, &fam.lags[x], &fam.lags[y])?;
            if m.is_positive() {
                violations.push(LemmaViolation {
                    first: fam.pairs[x],
                    second: fam.pairs[y],
                    measure: m,
                });
            }
        }
    }
    Ok(LemmaReport {
        j,
        holds: violations.is_empty(),
        pairs_checked: checked,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndicatorSupportReport {
    pub j: usize,
    pub d: u32,
    /// `(1 - F) Q_j(S) F` takes only the values 0 and 1.
    pub values_01: bool,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub support_measure: Rational,
    #[serde(serialize_with = "ratio::ser_int")]
    pub bound: BigInt,
    pub passes: bool,
}

/// Off `X_1^{×d}` two translates overlap in measure `a^d - b^d`, where `a`
/// and `b` are their one-dimensional overlaps with and without `X_1`; that
/// vanishes iff `a = b`, so the `{0,1}` test is the same for every `d`.
pub fn indicator_support_check(
    engine: &CorrelationEngine,
    j: usize,
    d: u32,
) -> Result<IndicatorSupportReport> {
    let c = engine.construction();
    let verdict = check_sidon(c, j)?.pop().expect("one verdict per stage");
    if !verdict.sidon {
        return Err(Error::NotSidon(format!("stage {j}")));
    }
    let lemma = lemma_disjointness_check(engine, j)?;
    let fam = LagFamily::new(c, j)?;
    let zero = Rational::zero();
    let mut support = Rational::zero();
    for l in &fam.lags {
        let v = engine.autocorrelation(l, &zero)?;
        support += Rational::one() - ratio::pow(&v.lo, d);
    }
    let r = BigInt::from(c.params(j)?.r);
    let bound = &r * &r - &r;
    let passes = lemma.holds && support < Rational::from_integer(bound.clone());
    Ok(IndicatorSupportReport {
        j,
        d,
        values_01: lemma.holds,
        support_measure: support,
        bound,
        passes,
    })
}

/// `∏_{j=1}^{m-1} (1 + (r_j² - r_j) / r_j^{2d})`.
pub fn product_rhs(c: &Construction, m: usize, d: u32) -> Result<Rational> {
    let mut acc = Rational::one();
    for j in 1..m {
        let r = Rational::from_integer(BigInt::from(c.params(j)?.r));
        acc *= Rational::one() + (&r * &r - &r) / ratio::pow(&r, 2 * d);
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verify41Report {
    pub m: usize,
    pub d: u32,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub lhs: Rational,
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub rhs: Rational,
    pub equal: bool,
}

/// Compares `Σ_{|n| < h_m} c_n^{2d}` with the product formula.
pub fn verify_41(engine: &CorrelationEngine, m: usize, d: u32) -> Result<Verify41Report> {
    let lhs = engine.power_sum(d, m)?;
    let rhs = product_rhs(engine.construction(), m, d)?;
    Ok(Verify41Report {
        m,
        d,
        equal: lhs == rhs,
        lhs,
        rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratio::rat;
    use crate::sidon::{generate_cnu, SidonConstantRule, Psi};
    use crate::tower::{lift_floor_set, ConstantRule, ConstructionSpec, StageParams};
    use std::sync::Arc;

    fn engine(spec: ConstructionSpec) -> CorrelationEngine {
        CorrelationEngine::new(Arc::new(Construction::new(spec).unwrap()))
    }

    fn sidon_r(r: usize) -> CorrelationEngine {
        engine(ConstructionSpec::rule(
            1,
            SidonConstantRule {
                r,
                psi: Psi::default(),
            },
        ))
    }

    #[test]
    fn lag_family_shape() {
        let e = sidon_r(3);
        let f = LagFamily::new(e.construction(), 2).unwrap();
        assert_eq!(f.lags.len(), 6);
        for l in &f.lags {
            assert!(f.lags.contains(&-l));
        }
    }

    #[test]
    fn product_examples() {
        let e = engine(ConstructionSpec::rule(1, ConstantRule(StageParams::new([2, 4, 8]))));
        let c = e.construction();
        assert_eq!(product_rhs(c, 1, 1).unwrap(), rat(1, 1));
        assert_eq!(product_rhs(c, 3, 1).unwrap(), rat(25, 9));
        assert_eq!(product_rhs(c, 3, 2).unwrap(), rat(87 * 87, 81 * 81));
    }

    #[test]
    fn verify_41_small() {
        let e = sidon_r(3);
        for m in 1..=4 {
            for d in 1..=2 {
                let rep = verify_41(&e, m, d).unwrap();
                assert!(rep.equal, "m={m} d={d}: {} vs {}", rep.lhs, rep.rhs);
            }
        }
        assert_eq!(verify_41(&e, 2, 1).unwrap().lhs, rat(5, 3));
    }

    #[test]
    fn lemma_r2_holds_r3_fails() {
        let two = sidon_r(2);
        for j in 1..=3 {
            assert!(lemma_disjointness_check(&two, j).unwrap().holds);
        }
        // with three columns T^{q2} moves column 3 and T^{q3} moves column 2
        // to the same floors above the tower
        let three = sidon_r(3);
        let rep = lemma_disjointness_check(&three, 1).unwrap();
        assert!(!rep.holds);
        assert_eq!(rep.pairs_checked, 15);
        let chacon = engine(ConstructionSpec::chacon());
        assert!(!lemma_disjointness_check(&chacon, 1).unwrap().holds);
    }

    #[test]
    fn support_check() {
        let two = sidon_r(2);
        let rep = indicator_support_check(&two, 1, 1).unwrap();
        assert!(rep.values_01 && rep.passes);
        // lags ±q(2) each hit X_1 with c = 1/2
        assert_eq!(rep.support_measure, rat(1, 1));
        let chacon = engine(ConstructionSpec::chacon());
        assert!(matches!(
            indicator_support_check(&chacon, 2, 1),
            Err(Error::NotSidon(_))
        ));
    }

    /// Lag values from pairwise differences of lifted X_1 floors, certified
    /// by the tall last spacer of the schedule.
    fn dense_c(c: &Construction, stage: usize, n: &BigInt) -> Rational {
        let x1 = lift_floor_set(c, &c.x1(), stage).unwrap();
        let floors: Vec<BigInt> = x1.floors().collect();
        let mut hits = 0;
        for a in &floors {
            for b in &floors {
                if b - a == *n {
                    hits += 1;
                }
            }
        }
        Rational::from_integer(BigInt::from(hits)) * c.floor_measure(stage).unwrap()
    }

    #[test]
    fn pk_norm_matches_dense_expansion() {
        let desc = CnuDescriptor::new(rat(2, 1), 3).unwrap();
        let e = CorrelationEngine::new(Arc::new(Construction::new(generate_cnu(&desc, 3).unwrap()).unwrap()));
        let c = e.construction().clone();
        let block = PkBlock::from_descriptor(&desc, 1, 2).unwrap();
        assert_eq!((block.n_eff, block.n_k.clone(), block.truncated()), (2, BigInt::from(9), true));
        let rep = pk_norm(&e, &block, 1, 1, &rat(0, 1), false, DEFAULT_PAIR_CAP).unwrap();
        assert!(rep.exact);

        let lags = block_lags(&c, &block).unwrap();
        let an = block.a_k(1) * BigInt::from(block.n_eff);
        let mut expect = Rational::one();
        for a in &lags {
            for b in &lags {
                expect += dense_c(&c, 5, &(a - b)) / (&an * &an);
            }
            expect -= dense_c(&c, 5, a) * BigInt::from(2) / &an;
        }
        assert_eq!(rep.dist_lo, expect);
        assert_eq!(rep.dist_hi, expect);
    }

    #[test]
    fn p2_closed_form_and_cost_cap() {
        let desc = CnuDescriptor::new(rat(2, 1), 3).unwrap();
        let e = CorrelationEngine::new(Arc::new(Construction::new(generate_cnu(&desc, 3).unwrap()).unwrap()));
        let block = PkBlock::from_descriptor(&desc, 1, 2).unwrap();
        let rep = pk_norm(&e, &block, 2, 2, &rat(0, 1), false, DEFAULT_PAIR_CAP).unwrap();
        assert!(rep.cross_terms_vanish);
        assert_eq!(rep.dist_lo, rep.closed_form);
        assert!(matches!(
            pk_norm(&e, &block, 2, 2, &rat(0, 1), false, 10),
            Err(Error::BudgetExceeded(_))
        ));
        assert!(pk_cost(e.construction(), &block).unwrap() > 0);
    }

    #[test]
    fn decomposition_adds_up() {
        let desc = CnuDescriptor::new(rat(2, 1), 3).unwrap();
        let e = CorrelationEngine::new(Arc::new(Construction::new(generate_cnu(&desc, 3).unwrap()).unwrap()));
        let block = PkBlock::from_descriptor(&desc, 1, 1).unwrap();
        let rep = pk_norm(&e, &block, 1, 1, &rat(0, 1), true, DEFAULT_PAIR_CAP).unwrap();
        let dec = rep.decomposition.unwrap();
        // F-part and outside part are orthogonal
        assert_eq!(&dec.variance_lo + &dec.outside_lo, rep.dist_lo);
        assert!(!dec.variance_lo.is_negative() && !dec.outside_lo.is_negative());
    }
}
