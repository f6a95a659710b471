//! Sidon verification, class `C(ν)` schedules and tensor-power phases.

use num_bigint::BigInt;
use num_integer::Roots;
use num_traits::{One, Signed, ToPrimitive};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ratio::{self, Rational};
use crate::tower::{join, Construction, ConstructionSpec, StageParams, StageRule};

/// Per-stage outcome of the column-confinement test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SidonVerdict {
    pub stage: usize,
    pub sidon: bool,
    /// Smallest gap between distinct positive offset differences.
    #[serde(serialize_with = "ratio::ser_int_opt")]
    pub min_gap: Option<BigInt>,
    #[serde(serialize_with = "ratio::ser_int")]
    pub required_gap: BigInt,
    /// Two column pairs `(i, i')` whose lag windows overlap, 1-based.
    pub witness: Option<((usize, usize), (usize, usize))>,
}

/// For `h_j < m <= h_{j+1}`, `T^m` moves part of column `i'` onto column `i`
/// only if `|m - (q(i) - q(i'))| < h_j`. Two column pairs can both be hit by
/// one lag when their differences are closer than `2 h_j - 1` and the shared
/// lags reach above `h_j`. This is the
/// pairwise form of confinement, which is what the lag-product identity uses.
pub fn check_sidon(c: &Construction, upto: usize) -> Result<Vec<SidonVerdict>> {
    let mut out = Vec::with_capacity(upto);
    for j in 1..=upto {
        let h = c.height(j)?;
        let q = c.offsets(j)?;
        let mut diffs: Vec<(BigInt, (usize, usize))> = Vec::new();
        for a in 0..q.len() {
            for b in 0..a {
                diffs.push((&q[a] - &q[b], (a + 1, b + 1)));
            }
        }
        diffs.sort();
        let hn = c.height(j + 1)?;
        let required = BigInt::from(2) * &h - 1;
        let mut min_gap: Option<BigInt> = None;
        let mut witness = None;
        for w in diffs.windows(2) {
            let gap = &w[1].0 - &w[0].0;
            // shared lags of the two windows, restricted to h_j < m <= h_{j+1}
            let lo = (&w[1].0 - &h + 1i32).max(&h + 1i32);
            let hi = (&w[0].0 + &h - 1i32).min(hn.clone());
            if lo <= hi && witness.is_none() {
                witness = Some((w[0].1, w[1].1));
            }
            if min_gap.as_ref().is_none_or(|m| gap < *m) {
                min_gap = Some(gap);
            }
        }
        out.push(SidonVerdict {
            stage: j,
            sidon: witness.is_none(),
            min_gap,
            required_gap: required,
            witness,
        });
    }
    Ok(out)
}

/// Growth witness `ψ(j) = slope·j + intercept`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Psi {
    pub slope: u64,
    pub intercept: u64,
}

impl Default for Psi {
    fn default() -> Self {
        Psi {
            slope: 1,
            intercept: 1,
        }
    }
}

impl Psi {
    pub fn at(&self, j: usize) -> BigInt {
        BigInt::from(self.slope) * BigInt::from(j) + BigInt::from(self.intercept)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CnuDescriptor {
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub nu: Rational,
    /// Block rule `r_{j(k)} = base^(k^2)`.
    pub base: u32,
    pub psi: Psi,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    pub k: usize,
    /// First stage of the block, `j(k)`.
    pub start: usize,
    #[serde(serialize_with = "ratio::ser_int")]
    pub r: BigInt,
    /// `N_k = ⌊r^ν⌋`, saturated at `usize::MAX`.
    #[serde(serialize_with = "ratio::ser_int")]
    pub len: BigInt,
}

impl CnuDescriptor {
    pub fn new(nu: Rational, base: u32) -> Result<Self> {
        let d = CnuDescriptor {
            nu,
            base,
            psi: Psi::default(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu.is_negative() {
            return Err(Error::InvalidDescriptor(format!(
                "nu = {} is negative",
                ratio::fmt_ratio(&self.nu)
            )));
        }
        if self.base < 2 {
            return Err(Error::InvalidDescriptor(format!("base {} < 2", self.base)));
        }
        if self.psi.slope == 0 {
            return Err(Error::InvalidDescriptor("psi must tend to infinity".into()));
        }
        Ok(())
    }

    pub fn block_r(&self, k: usize) -> BigInt {
        num_traits::pow(BigInt::from(self.base), k * k)
    }

    /// `⌊r^ν⌋` for rational `ν = p/q`, as the integer `q`-th root of `r^p`.
    pub fn block_len(&self, r: &BigInt) -> Result<BigInt> {
        let p = self
            .nu
            .numer()
            .to_usize()
            .ok_or_else(|| Error::InvalidDescriptor("nu numerator too large".into()))?;
        let q = self
            .nu
            .denom()
            .to_u32()
            .ok_or_else(|| Error::InvalidDescriptor("nu denominator too large".into()))?;
        if r.bits().saturating_mul(p as u64) > 1 << 24 {
            return Err(Error::TooLarge(format!("block length r^nu with r = {r}")));
        }
        Ok(Roots::nth_root(&num_traits::pow(r.clone(), p), q))
    }

    /// Blocks covering stages `1..=upto`.
    pub fn blocks(&self, upto: usize) -> Result<Vec<Block>> {
        let mut out = Vec::new();
        let mut start = 1usize;
        let mut k = 1;
        while start <= upto {
            let r = self.block_r(k);
            // a block too long to write down outlasts any stage we can build
            let len = match self.block_len(&r) {
                Err(Error::TooLarge(_)) => BigInt::from(usize::MAX),
                other => other?,
            };
            out.push(Block {
                k,
                start,
                r,
                len: len.clone(),
            });
            let step = len.to_usize().unwrap_or(usize::MAX).max(1);
            start = start.saturating_add(step);
            k += 1;
        }
        Ok(out)
    }

    /// Block containing stage `j`.
    pub fn block_of(&self, j: usize) -> Result<Block> {
        self.blocks(j)?
            .into_iter()
            .rev()
            .find(|b| b.start <= j)
            .ok_or_else(|| Error::InvalidDescriptor(format!("no block for stage {j}")))
    }
}

/// Spacers with `s(1) > ψ h` and `s(i+1) > ψ s(i)`, padded so the column
/// gaps `h + s(i)` are super-increasing with slack `2h`. That makes every
/// offset difference at least `2h` away from every other one.
pub fn cnu_spacers(h: &BigInt, r: usize, psi: &BigInt) -> Vec<BigInt> {
    let mut s = Vec::with_capacity(r);
    let mut cur = psi * h + BigInt::one();
    for i in 1..=r {
        s.push(cur.clone());
        cur = psi * &cur + BigInt::from(i + 1) * h + BigInt::one();
    }
    s
}

#[derive(Debug, Clone)]
pub struct CnuRule {
    pub desc: CnuDescriptor,
}

impl StageRule for CnuRule {
    fn params(&self, j: usize, height: &BigInt) -> StageParams {
        let r = self
            .desc
            .block_of(j)
            .map(|b| b.r)
            .expect("validated descriptor has a block for every stage");
        let r = r.to_usize().expect("cut count fits in memory");
        StageParams::new(cnu_spacers(height, r, &self.desc.psi.at(j)))
    }

    fn describe(&self) -> String {
        format!(
            "cnu(nu={}, base={}, psi={}j+{})",
            ratio::fmt_ratio(&self.desc.nu),
            self.desc.base,
            self.desc.psi.slope,
            self.desc.psi.intercept
        )
    }
}

/// A `C(ν)` schedule with `h_1 = 1`, verified Sidon and ψ-growing over the
/// first `stages` stages.
pub fn generate_cnu(desc: &CnuDescriptor, stages: usize) -> Result<ConstructionSpec> {
    desc.validate()?;
    desc.blocks(stages.max(1))?;
    let spec = ConstructionSpec::rule(1, CnuRule { desc: desc.clone() });
    let c = Construction::new(spec.clone())?;
    if let Some(bad) = check_sidon(&c, stages)?.into_iter().find(|v| !v.sidon) {
        return Err(Error::InternalInvariant(format!(
            "generated schedule not Sidon at stage {}",
            bad.stage
        )));
    }
    let g = check_growth(&c, &desc.psi, stages)?;
    if let Some(j) = g.first_failure {
        return Err(Error::InternalInvariant(format!(
            "generated schedule fails growth at stage {j}"
        )));
    }
    Ok(spec)
}

/// Schedule with a fixed cut count and the same spacer rule as `C(ν)`.
#[derive(Debug, Clone)]
pub struct SidonConstantRule {
    pub r: usize,
    pub psi: Psi,
}

impl StageRule for SidonConstantRule {
    fn params(&self, j: usize, height: &BigInt) -> StageParams {
        StageParams::new(cnu_spacers(height, self.r, &self.psi.at(j)))
    }

    fn describe(&self) -> String {
        format!("sidon(r={})", self.r)
    }
}

/// Explicit cut-count profile, one entry per stage, with growth spacers.
#[derive(Debug, Clone)]
pub struct SidonProfileRule {
    pub rs: Vec<usize>,
    pub psi: Psi,
}

impl StageRule for SidonProfileRule {
    fn params(&self, j: usize, height: &BigInt) -> StageParams {
        let r = self.rs[(j - 1) % self.rs.len()];
        StageParams::new(cnu_spacers(height, r, &self.psi.at(j)))
    }

    fn describe(&self) -> String {
        let rs: Vec<BigInt> = self.rs.iter().map(|r| BigInt::from(*r)).collect();
        format!("sidon-profile(r={})", join(&rs))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GrowthReport {
    pub ok: bool,
    pub first_failure: Option<usize>,
}

/// `h_j ≪ s_j(1) ≪ … ≪ s_j(r_j)` with `a ≪ b` meaning `b > ψ(j) a`.
pub fn check_growth(c: &Construction, psi: &Psi, upto: usize) -> Result<GrowthReport> {
    for j in 1..=upto {
        let p = c.params(j)?;
        let f = psi.at(j);
        let mut prev = c.height(j)?;
        for s in &p.spacers {
            if *s <= &f * &prev {
                return Ok(GrowthReport {
                    ok: false,
                    first_failure: Some(j),
                });
            }
            prev = s.clone();
        }
    }
    Ok(GrowthReport {
        ok: true,
        first_failure: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recurrence {
    Conservative,
    Dissipative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spectrum {
    Singular,
    AbsolutelyContinuous,
    NotClassified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PowerPhase {
    pub d: u32,
    pub recurrence: Recurrence,
    pub spectrum: Spectrum,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PhaseReport {
    #[serde(serialize_with = "ratio::ser_ratio")]
    pub nu: Rational,
    pub powers: Vec<PowerPhase>,
}

impl PhaseReport {
    pub fn get(&self, d: u32) -> Option<&PowerPhase> {
        self.powers.iter().find(|p| p.d == d)
    }
}

/// Conservative iff `ν >= d - 1`; singular iff `ν >= 2d - 2`.
pub fn classify_tensor_powers(nu: &Rational, d_max: u32) -> PhaseReport {
    let powers = (1..=d_max)
        .map(|d| {
            let d_big = Rational::from_integer(BigInt::from(d));
            let one = Rational::one();
            let recurrence = if *nu >= &d_big - &one {
                Recurrence::Conservative
            } else {
                Recurrence::Dissipative
            };
            let spectrum = if *nu >= &d_big * BigInt::from(2) - BigInt::from(2) {
                Spectrum::Singular
            } else {
                Spectrum::AbsolutelyContinuous
            };
            PowerPhase {
                d,
                recurrence,
                spectrum,
            }
        })
        .collect();
    PhaseReport {
        nu: nu.clone(),
        powers,
    }
}

/// `a_k = (r - 1) r^(1 - d)` and `N_k = ⌊r^ν⌋` for the block containing `j`.
pub fn block_constants(desc: &CnuDescriptor, k: usize, d: u32) -> Result<(Rational, BigInt)> {
    let r = desc.block_r(k);
    let a = Rational::new(&r - 1, BigInt::one()) / ratio::pow(&Rational::from_integer(r.clone()), d - 1);
    Ok((a, desc.block_len(&r)?))
}
