//! Stage-by-stage rank-one towers.
//!
//! Stage `j` is a tower of `h_j` floors. It is cut into `r_j` columns,
//! `s_j(i)` spacer floors go on top of column `i`, and the columns are
//! stacked left to right to form tower `j + 1`. Column `i` of tower `j`
//! starts at floor `q(i, j)` of tower `j + 1`.
//!
//! Measures are normalized so that the stage-1 tower `X_1` has measure 1.

use std::fmt;
use std::sync::{Arc, RwLock};

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::floorset::FloorSet;
use crate::ratio::Rational;

/// Lift results above this many intervals are refused.
pub const DEFAULT_LIFT_CAP: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageParams {
    pub r: usize,
    #[serde(serialize_with = "crate::ratio::ser_int_vec")]
    pub spacers: Vec<BigInt>,
}

impl StageParams {
    pub fn new<T: Into<BigInt>>(spacers: impl IntoIterator<Item = T>) -> Self {
        let spacers: Vec<BigInt> = spacers.into_iter().map(Into::into).collect();
        StageParams {
            r: spacers.len(),
            spacers,
        }
    }

    pub fn validate(&self, j: usize) -> Result<()> {
        if self.r < 2 {
            return Err(Error::InvalidSpec(format!("stage {j}: r = {} < 2", self.r)));
        }
        if self.spacers.len() != self.r {
            return Err(Error::InvalidSpec(format!(
                "stage {j}: {} spacers for r = {}",
                self.spacers.len(),
                self.r
            )));
        }
        if let Some(s) = self.spacers.iter().find(|s| s.is_negative()) {
            return Err(Error::InvalidSpec(format!("stage {j}: negative spacer {s}")));
        }
        Ok(())
    }

    pub fn spacer_total(&self) -> BigInt {
        self.spacers.iter().sum()
    }

    pub fn min_spacer(&self) -> BigInt {
        self.spacers.iter().min().cloned().unwrap_or_default()
    }
}

/// A deterministic generator for stage parameters. The rule sees the stage
/// index and the current tower height, since most schedules of interest
/// scale their spacers with `h_j`.
pub trait StageRule: Send + Sync + fmt::Debug {
    fn params(&self, j: usize, height: &BigInt) -> StageParams;
    fn describe(&self) -> String;
}

/// The same cut-and-spacer pattern at every stage (Chacon-style).
#[derive(Debug, Clone)]
pub struct ConstantRule(pub StageParams);

impl StageRule for ConstantRule {
    fn params(&self, _j: usize, _height: &BigInt) -> StageParams {
        self.0.clone()
    }

    fn describe(&self) -> String {
        format!("constant(r={}, s={})", self.0.r, join(&self.0.spacers))
    }
}

/// `s_j(i) = base_i * factor^(j-1)`, so `base` is the stage-1 spacer vector.
#[derive(Debug, Clone)]
pub struct GeometricRule {
    pub base: Vec<BigInt>,
    pub factor: BigInt,
}

impl StageRule for GeometricRule {
    fn params(&self, j: usize, _height: &BigInt) -> StageParams {
        let scale = num_traits::pow(self.factor.clone(), j - 1);
        StageParams::new(self.base.iter().map(|b| b * &scale))
    }

    fn describe(&self) -> String {
        format!(
            "geometric(r={}, base={}, factor={})",
            self.base.len(),
            join(&self.base),
            self.factor
        )
    }
}

pub(crate) fn join(v: &[BigInt]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone)]
pub enum Schedule {
    /// Stage `j` uses entry `j - 1`; nothing beyond the list exists.
    Explicit(Vec<StageParams>),
    Rule(Arc<dyn StageRule>),
}

#[derive(Debug, Clone)]
pub struct ConstructionSpec {
    pub h1: BigInt,
    pub schedule: Schedule,
}

impl ConstructionSpec {
    pub fn explicit(h1: impl Into<BigInt>, stages: Vec<StageParams>) -> Self {
        ConstructionSpec {
            h1: h1.into(),
            schedule: Schedule::Explicit(stages),
        }
    }

    pub fn rule(h1: impl Into<BigInt>, rule: impl StageRule + 'static) -> Self {
        ConstructionSpec {
            h1: h1.into(),
            schedule: Schedule::Rule(Arc::new(rule)),
        }
    }

    /// Chacon's transformation: `h1 = 1`, three columns, one spacer on the middle one.
    pub fn chacon() -> Self {
        Self::rule(1, ConstantRule(StageParams::new([0, 1, 0])))
    }

    pub fn validate(&self) -> Result<()> {
        if self.h1 < BigInt::one() {
            return Err(Error::InvalidSpec(format!("h1 = {} < 1", self.h1)));
        }
        if let Schedule::Explicit(stages) = &self.schedule {
            for (i, p) in stages.iter().enumerate() {
                p.validate(i + 1)?;
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match &self.schedule {
            Schedule::Explicit(st) => format!("explicit(h1={}, stages={})", self.h1, st.len()),
            Schedule::Rule(r) => format!("h1={}; {}", self.h1, r.describe()),
        }
    }
}

/// Lazily-built stage data: height, floor measure, parameters and offsets.
#[derive(Debug, Clone)]
pub struct Tower {
    pub j: usize,
    pub h: BigInt,
    pub floor_measure: Rational,
    /// Parameters used to build stage `j + 1`, when the schedule has them.
    pub params: Option<StageParams>,
    pub offsets: Option<Vec<BigInt>>,
}

/// A construction whose stages are evaluated on demand and memoized, so
/// rule evaluation happens exactly once per stage index.
#[derive(Debug)]
pub struct Construction {
    spec: ConstructionSpec,
    towers: RwLock<Vec<Arc<Tower>>>,
}

impl Construction {
    pub fn new(spec: ConstructionSpec) -> Result<Self> {
        spec.validate()?;
        let c = Construction {
            spec,
            towers: RwLock::new(Vec::new()),
        };
        c.tower(1)?;
        Ok(c)
    }

    pub fn spec(&self) -> &ConstructionSpec {
        &self.spec
    }

    pub fn h1(&self) -> &BigInt {
        &self.spec.h1
    }

    /// Highest stage whose tower can be built, if the schedule is finite.
    pub fn max_stage(&self) -> Option<usize> {
        match &self.spec.schedule {
            Schedule::Explicit(st) => Some(st.len() + 1),
            Schedule::Rule(_) => None,
        }
    }

    fn eval_params(&self, j: usize, h: &BigInt) -> Result<Option<StageParams>> {
        let p = match &self.spec.schedule {
            Schedule::Explicit(st) => st.get(j - 1).cloned(),
            Schedule::Rule(rule) => Some(rule.params(j, h)),
        };
        if let Some(p) = &p {
            p.validate(j)?;
        }
        Ok(p)
    }

    pub fn tower(&self, j: usize) -> Result<Arc<Tower>> {
        if j == 0 {
            return Err(Error::StageUnavailable(0));
        }
        if let Some(t) = self.towers.read().expect("tower cache poisoned").get(j - 1) {
            return Ok(t.clone());
        }
        let mut towers = self.towers.write().expect("tower cache poisoned");
        while towers.len() < j {
            let next = match towers.last() {
                None => {
                    let h = self.spec.h1.clone();
                    let params = self.eval_params(1, &h)?;
                    let offsets = params.as_ref().map(|p| offsets(&h, p));
                    Tower {
                        j: 1,
                        floor_measure: Rational::new(BigInt::one(), h.clone()),
                        h,
                        params,
                        offsets,
                    }
                }
                Some(prev) => {
                    let Some(pp) = &prev.params else {
                        return Err(Error::StageUnavailable(prev.j + 1));
                    };
                    let h = &prev.h * BigInt::from(pp.r) + pp.spacer_total();
                    let jn = prev.j + 1;
                    let params = self.eval_params(jn, &h)?;
                    let offs = params.as_ref().map(|p| offsets(&h, p));
                    Tower {
                        j: jn,
                        floor_measure: &prev.floor_measure / BigInt::from(pp.r),
                        h,
                        params,
                        offsets: offs,
                    }
                }
            };
            towers.push(Arc::new(next));
        }
        Ok(towers[j - 1].clone())
    }

    pub fn height(&self, j: usize) -> Result<BigInt> {
        Ok(self.tower(j)?.h.clone())
    }

    pub fn floor_measure(&self, j: usize) -> Result<Rational> {
        Ok(self.tower(j)?.floor_measure.clone())
    }

    pub fn params(&self, j: usize) -> Result<StageParams> {
        self.tower(j)?
            .params
            .clone()
            .ok_or(Error::StageUnavailable(j + 1))
    }

    pub fn offsets(&self, j: usize) -> Result<Vec<BigInt>> {
        self.tower(j)?
            .offsets
            .clone()
            .ok_or(Error::StageUnavailable(j + 1))
    }

    /// `X_1` as a floor set of stage 1.
    pub fn x1(&self) -> FloorSet {
        FloorSet::range(1, 0, self.spec.h1.clone())
    }

    /// Starting floors, inside tower `to`, of every copy of tower `from`.
    pub fn copy_offsets(&self, from: usize, to: usize) -> Result<Vec<BigInt>> {
        if from > to {
            return Err(Error::StageMismatch {
                expected: from,
                found: to,
            });
        }
        let mut offs = vec![BigInt::zero()];
        for l in from..to {
            let q = self.offsets(l)?;
            if offs.len().saturating_mul(q.len()) > DEFAULT_LIFT_CAP {
                return Err(Error::BudgetExceeded(format!(
                    "copies of tower {from} inside tower {to}"
                )));
            }
            offs = q
                .iter()
                .flat_map(|qi| offs.iter().map(move |o| qi + o))
                .collect();
        }
        offs.sort();
        Ok(offs)
    }

    /// Number of copies of tower `from` inside tower `to`.
    pub fn copy_count(&self, from: usize, to: usize) -> Result<BigInt> {
        let mut n = BigInt::one();
        for l in from..to {
            n *= BigInt::from(self.params(l)?.r);
        }
        Ok(n)
    }
}

/// `q(i, j) = (i - 1) h_j + s_j(1) + ... + s_j(i - 1)`.
pub fn offsets(h: &BigInt, params: &StageParams) -> Vec<BigInt> {
    let mut out = Vec::with_capacity(params.r);
    let mut acc = BigInt::zero();
    for i in 0..params.r {
        out.push(acc.clone());
        acc += h + &params.spacers[i];
    }
    out
}

/// A fully materialized stage: height, floor measure, the `X_1` floors and
/// (once the next parameters are known) the column offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageState {
    pub j: usize,
    #[serde(serialize_with = "crate::ratio::ser_int")]
    pub h: BigInt,
    #[serde(serialize_with = "crate::ratio::ser_ratio")]
    pub floor_measure: Rational,
    pub x1_floors: FloorSet,
    #[serde(serialize_with = "crate::ratio::ser_int_vec")]
    pub q_offsets: Vec<BigInt>,
}

impl StageState {
    pub fn q_offsets(&self, params: &StageParams) -> Vec<BigInt> {
        offsets(&self.h, params)
    }
}

/// Stage 1 of a construction: a single tower of `h1` floors, all of them in `X_1`.
pub fn new_construction(spec: &ConstructionSpec) -> Result<StageState> {
    spec.validate()?;
    Ok(StageState {
        j: 1,
        h: spec.h1.clone(),
        floor_measure: Rational::new(BigInt::one(), spec.h1.clone()),
        x1_floors: FloorSet::range(1, 0, spec.h1.clone()),
        q_offsets: Vec::new(),
    })
}

pub fn q_offsets(state: &StageState, params: &StageParams) -> Vec<BigInt> {
    state.q_offsets(params)
}

/// Cuts, adds spacers and stacks: stage `j` becomes stage `j + 1`.
pub fn extend_stage(state: &StageState, params: &StageParams) -> Result<StageState> {
    params.validate(state.j)?;
    let q = offsets(&state.h, params);
    let h_next = &state.h * BigInt::from(params.r) + params.spacer_total();
    let copies: Vec<FloorSet> = q
        .iter()
        .map(|qi| state.x1_floors.translate(qi).with_stage(state.j + 1))
        .collect();
    let mut raw = Vec::new();
    for c in &copies {
        raw.extend(c.intervals().iter().cloned());
    }
    let x1 = FloorSet::from_intervals(state.j + 1, raw);
    let expected = state.x1_floors.len() * BigInt::from(params.r);
    if x1.len() != expected || x1.end().is_some_and(|e| *e > h_next) {
        return Err(Error::InternalInvariant(format!(
            "column images overlap while extending stage {}",
            state.j
        )));
    }
    Ok(StageState {
        j: state.j + 1,
        h: h_next,
        floor_measure: &state.floor_measure / BigInt::from(params.r),
        x1_floors: x1,
        q_offsets: Vec::new(),
    })
}

/// Total measure of a floor set at the stage it lives in.
pub fn floorset_measure(fs: &FloorSet, state: &StageState) -> Result<Rational> {
    if fs.stage() != state.j {
        return Err(Error::StageMismatch {
            expected: state.j,
            found: fs.stage(),
        });
    }
    Ok(Rational::from_integer(fs.len()) * &state.floor_measure)
}

/// Measure of a floor set using the lazily built construction.
pub fn measure_of(c: &Construction, fs: &FloorSet) -> Result<Rational> {
    Ok(Rational::from_integer(fs.len()) * c.floor_measure(fs.stage())?)
}

/// Re-expresses a stage-`j` floor set as stage-`to` floors.
pub fn lift_floor_set(c: &Construction, fs: &FloorSet, to: usize) -> Result<FloorSet> {
    lift_floor_set_capped(c, fs, to, DEFAULT_LIFT_CAP)
}

pub fn lift_floor_set_capped(
    c: &Construction,
    fs: &FloorSet,
    to: usize,
    cap: usize,
) -> Result<FloorSet> {
    let from = fs.stage();
    if from > to {
        return Err(Error::StageMismatch {
            expected: to,
            found: from,
        });
    }
    let mut cur = fs.clone();
    for l in from..to {
        let q = c.offsets(l)?;
        if cur.intervals().len().saturating_mul(q.len()) > cap {
            return Err(Error::BudgetExceeded(format!(
                "lifting {} intervals from stage {l} to {}",
                cur.intervals().len(),
                l + 1
            )));
        }
        let raw: Vec<(BigInt, BigInt)> = q
            .iter()
            .flat_map(|qi| cur.intervals().iter().map(move |(a, b)| (a + qi, b + qi)))
            .collect();
        cur = FloorSet::from_intervals(l + 1, raw);
    }
    Ok(cur)
}

/// Stage index as a small integer, for report fields.
pub fn height_u128(h: &BigInt) -> Option<u128> {
    h.to_u128()
}
