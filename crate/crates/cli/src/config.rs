//! Line-based experiment configuration.
//!
//! ```text
//! # schedule
//! h1 = 1
//! stage 1: r=3 s=2,4,8
//! stage 2: r=2 s=0,40
//! rule = cnu(nu=2, base=3)
//!
//! [poisson]
//! event = 1:0 k=0
//! event = 1:1 k=1
//! ```
//!
//! A schedule is either explicit `stage` lines (numbered from 1) or one
//! `rule`. Section keys may repeat; single-valued lookups take the last one.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use rankone::ratio::{self, Rational};
use rankone::sidon::{CnuDescriptor, CnuRule, Psi, SidonConstantRule, SidonProfileRule};
use rankone::tower::{ConstantRule, GeometricRule};
use rankone::{ConstructionSpec, Error, FloorSet, Result, StageParams};

#[derive(Debug, Clone, PartialEq)]
pub enum RuleSpec {
    Cnu(CnuDescriptor),
    Sidon { r: usize },
    SidonProfile { rs: Vec<usize> },
    Constant(Vec<BigInt>),
    Geometric { base: Vec<BigInt>, factor: BigInt },
    Chacon,
}

impl RuleSpec {
    pub fn canonical(&self) -> String {
        let list = |v: &[BigInt]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        match self {
            RuleSpec::Cnu(d) => format!("cnu(nu={}, base={})", ratio::fmt_ratio(&d.nu), d.base),
            RuleSpec::Sidon { r } => format!("sidon(r={r})"),
            RuleSpec::SidonProfile { rs } => format!(
                "sidon-profile(r={})",
                rs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            ),
            RuleSpec::Constant(s) => format!("constant(s={})", list(s)),
            RuleSpec::Geometric { base, factor } => {
                format!("geometric(base={}, factor={factor})", list(base))
            }
            RuleSpec::Chacon => "chacon".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub h1: Option<BigInt>,
    pub stages: Vec<StageParams>,
    pub rule: Option<RuleSpec>,
    pub sections: BTreeMap<String, Vec<(String, String)>>,
}

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn int<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| perr(line, format!("{what}: expected an integer, got `{}`", s.trim())))
}

fn int_list<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<Vec<T>> {
    s.split(',').map(|x| int(x, line, what)).collect()
}

/// `key=value` arguments, where a value may itself contain commas:
/// `base=2,4,8, factor=4`.
fn rule_args(body: &str, line: usize) -> Result<BTreeMap<String, String>> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    let mut last: Option<String> = None;
    for tok in body.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match tok.split_once('=') {
            Some((k, v)) => {
                let k = k.trim().to_string();
                out.insert(k.clone(), v.trim().to_string());
                last = Some(k);
            }
            None => {
                let k = last
                    .as_ref()
                    .ok_or_else(|| perr(line, format!("rule argument `{tok}` has no key")))?;
                let v = out.get_mut(k).expect("key inserted");
                v.push(',');
                v.push_str(tok);
            }
        }
    }
    Ok(out)
}

fn parse_rule(text: &str, line: usize) -> Result<RuleSpec> {
    let text = text.trim();
    if text == "chacon" {
        return Ok(RuleSpec::Chacon);
    }
    let (name, rest) = text
        .split_once('(')
        .ok_or_else(|| perr(line, format!("unknown rule `{text}`")))?;
    let body = rest
        .strip_suffix(')')
        .ok_or_else(|| perr(line, "rule is missing `)`"))?;
    let args = rule_args(body, line)?;
    let arg = |k: &str| {
        args.get(k)
            .map(String::as_str)
            .ok_or_else(|| perr(line, format!("rule `{name}` needs `{k}=`")))
    };
    Ok(match name.trim() {
        "cnu" => {
            let nu = ratio::parse_ratio(arg("nu")?).map_err(|e| perr(line, e.to_string()))?;
            let mut d = CnuDescriptor::new(nu, int(arg("base")?, line, "base")?)
                .map_err(|e| perr(line, e.to_string()))?;
            if let Some(v) = args.get("psi") {
                let v: Vec<u64> = int_list(v, line, "psi")?;
                if v.len() != 2 {
                    return Err(perr(line, "psi takes slope,intercept"));
                }
                d.psi = Psi {
                    slope: v[0],
                    intercept: v[1],
                };
                d.validate().map_err(|e| perr(line, e.to_string()))?;
            }
            RuleSpec::Cnu(d)
        }
        "sidon" => RuleSpec::Sidon {
            r: int(arg("r")?, line, "r")?,
        },
        "sidon-profile" => RuleSpec::SidonProfile {
            rs: int_list(arg("r")?, line, "r")?,
        },
        "constant" => RuleSpec::Constant(int_list(arg("s")?, line, "s")?),
        "geometric" => RuleSpec::Geometric {
            base: int_list(arg("base")?, line, "base")?,
            factor: int(arg("factor")?, line, "factor")?,
        },
        other => return Err(perr(line, format!("unknown rule `{other}`"))),
    })
}

fn parse_stage(rest: &str, line: usize, expected: usize) -> Result<StageParams> {
    let (num, body) = rest
        .split_once(':')
        .ok_or_else(|| perr(line, "expected `stage <j>: r=<int> s=<list>`"))?;
    let j: usize = int(num, line, "stage index")?;
    if j != expected {
        return Err(perr(line, format!("stage {j} out of order, expected stage {expected}")));
    }
    let mut r: Option<usize> = None;
    let mut s: Option<Vec<BigInt>> = None;
    for tok in body.split_whitespace() {
        match tok.split_once('=') {
            Some(("r", v)) => r = Some(int(v, line, "r")?),
            Some(("s", v)) => s = Some(int_list(v, line, "s")?),
            _ => return Err(perr(line, format!("unexpected `{tok}`"))),
        }
    }
    let s = s.ok_or_else(|| perr(line, "stage line needs s="))?;
    let params = StageParams::new(s);
    if let Some(r) = r {
        if r != params.r {
            return Err(perr(line, format!("r={r} but {} spacers", params.r)));
        }
    }
    params.validate(j).map_err(|e| perr(line, e.to_string()))?;
    Ok(params)
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| perr(line, "section header is missing `]`"))?
                    .trim();
                if name.is_empty() {
                    return Err(perr(line, "empty section name"));
                }
                cfg.sections.entry(name.to_string()).or_default();
                section = Some(name.to_string());
                continue;
            }
            if let Some(sec) = &section {
                let (k, v) = content
                    .split_once('=')
                    .ok_or_else(|| perr(line, "expected `key = value`"))?;
                cfg.sections
                    .get_mut(sec)
                    .expect("section created")
                    .push((k.trim().to_string(), v.trim().to_string()));
                continue;
            }
            if let Some(rest) = content.strip_prefix("stage ") {
                let p = parse_stage(rest, line, cfg.stages.len() + 1)?;
                cfg.stages.push(p);
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| perr(line, format!("unrecognized line `{content}`")))?;
            match k.trim() {
                "h1" => cfg.h1 = Some(int(v, line, "h1")?),
                "rule" => cfg.rule = Some(parse_rule(v, line)?),
                other => return Err(perr(line, format!("unknown key `{other}` outside a section"))),
            }
        }
        if cfg.rule.is_some() && !cfg.stages.is_empty() {
            return Err(perr(0, "give either stage lines or a rule, not both"));
        }
        Ok(cfg)
    }

    pub fn construction_spec(&self) -> Result<Option<ConstructionSpec>> {
        let h1 = || self.h1.clone().unwrap_or_else(|| BigInt::from(1));
        let spec = match &self.rule {
            Some(rule) => {
                let h = h1();
                Some(match rule {
                    RuleSpec::Cnu(d) => ConstructionSpec::rule(h, CnuRule { desc: d.clone() }),
                    RuleSpec::Sidon { r } => ConstructionSpec::rule(
                        h,
                        SidonConstantRule {
                            r: *r,
                            psi: Psi::default(),
                        },
                    ),
                    RuleSpec::SidonProfile { rs } => ConstructionSpec::rule(
                        h,
                        SidonProfileRule {
                            rs: rs.clone(),
                            psi: Psi::default(),
                        },
                    ),
                    RuleSpec::Constant(s) => {
                        ConstructionSpec::rule(h, ConstantRule(StageParams::new(s.clone())))
                    }
                    RuleSpec::Geometric { base, factor } => ConstructionSpec::rule(
                        h,
                        GeometricRule {
                            base: base.clone(),
                            factor: factor.clone(),
                        },
                    ),
                    RuleSpec::Chacon if self.h1.is_none() => ConstructionSpec::chacon(),
                    RuleSpec::Chacon => {
                        ConstructionSpec::rule(h, ConstantRule(StageParams::new([0, 1, 0])))
                    }
                })
            }
            None if !self.stages.is_empty() || self.h1.is_some() => {
                Some(ConstructionSpec::explicit(h1(), self.stages.clone()))
            }
            None => None,
        };
        if let Some(s) = &spec {
            s.validate()?;
        }
        Ok(spec)
    }

    pub fn descriptor(&self) -> Option<&CnuDescriptor> {
        match &self.rule {
            Some(RuleSpec::Cnu(d)) => Some(d),
            _ => None,
        }
    }

    /// Schedule lines in canonical form, as written to manifests.
    pub fn schedule_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(h) = &self.h1 {
            out.push(format!("h1 = {h}"));
        }
        for (i, p) in self.stages.iter().enumerate() {
            let s: Vec<String> = p.spacers.iter().map(ToString::to_string).collect();
            out.push(format!("stage {}: r={} s={}", i + 1, p.r, s.join(",")));
        }
        if let Some(r) = &self.rule {
            out.push(format!("rule = {}", r.canonical()));
        }
        out
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)?
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, section: &str, key: &str) -> Vec<&str> {
        self.sections
            .get(section)
            .map(|kv| kv.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn section_keys(&self, section: &str) -> Vec<&str> {
        self.sections
            .get(section)
            .map(|kv| kv.iter().map(|(k, _)| k.as_str()).collect())
            .unwrap_or_default()
    }
}

fn value_err(what: &str, v: &str) -> Error {
    Error::InvalidSpec(format!("{what}: cannot parse `{v}`"))
}

/// `<stage>:<item>,<item>` with items `a..b` (half-open) or a single floor.
pub fn parse_floorset(v: &str) -> Result<FloorSet> {
    let (stage, items) = v.split_once(':').ok_or_else(|| value_err("floor set", v))?;
    let stage: usize = stage.trim().parse().map_err(|_| value_err("floor set stage", v))?;
    if stage == 0 {
        return Err(value_err("floor set stage", v));
    }
    let mut ivs = Vec::new();
    for item in items.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let big = |s: &str| s.trim().parse::<BigInt>().map_err(|_| value_err("floor", v));
        match item.split_once("..") {
            Some((a, b)) => ivs.push((big(a)?, big(b)?)),
            None => {
                let a = big(item)?;
                ivs.push((a.clone(), a + 1));
            }
        }
    }
    Ok(FloorSet::from_intervals(stage, ivs))
}

/// Comma list of integers and ranges `a..b` (half-open) or `a..=b`.
pub fn parse_lags(v: &str, cap: usize) -> Result<Vec<BigInt>> {
    let mut out = Vec::new();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let big = |s: &str| s.trim().parse::<BigInt>().map_err(|_| value_err("lags", v));
        let (lo, hi) = if let Some((a, b)) = item.split_once("..=") {
            (big(a)?, big(b)? + 1)
        } else if let Some((a, b)) = item.split_once("..") {
            (big(a)?, big(b)?)
        } else {
            let a = big(item)?;
            (a.clone(), a + 1)
        };
        let mut n = lo;
        while n < hi {
            if out.len() >= cap {
                return Err(Error::BudgetExceeded(format!("more than {cap} lags")));
            }
            out.push(n.clone());
            n += 1;
        }
    }
    Ok(out)
}

pub fn parse_rational(what: &str, v: &str) -> Result<Rational> {
    ratio::parse_ratio(v.trim()).map_err(|_| value_err(what, v))
}

pub fn parse_num<T: std::str::FromStr>(what: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| value_err(what, v))
}

pub fn parse_list<T: std::str::FromStr>(what: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(what, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rankone::ratio::rat;

    #[test]
    fn explicit_schedule() {
        let cfg = Config::parse("h1 = 1 # base\nstage 1: r=3 s=2,4,8\nstage 2: s=1,1,1\n").unwrap();
        assert_eq!(cfg.stages.len(), 2);
        let c = rankone::Construction::new(cfg.construction_spec().unwrap().unwrap()).unwrap();
        assert_eq!(c.height(2).unwrap(), BigInt::from(17));
        assert_eq!(cfg.schedule_lines()[1], "stage 1: r=3 s=2,4,8");
    }

    #[test]
    fn rules() {
        let cfg = Config::parse("rule = cnu(nu=3/2, base=3)").unwrap();
        assert_eq!(cfg.descriptor().unwrap().nu, rat(3, 2));
        let cfg = Config::parse("rule = geometric(base=2,4,8, factor=4)").unwrap();
        assert_eq!(
            cfg.rule,
            Some(RuleSpec::Geometric {
                base: vec![2.into(), 4.into(), 8.into()],
                factor: 4.into()
            })
        );
        assert_eq!(cfg.schedule_lines(), vec!["rule = geometric(base=2,4,8, factor=4)"]);
        assert!(Config::parse("rule = chacon").unwrap().construction_spec().unwrap().is_some());
    }

    #[test]
    fn sections() {
        let cfg = Config::parse("[poisson]\nevent = 1:0 k=0\nevent = 1:1 k=1\nregion = 1:0..2\n").unwrap();
        assert_eq!(cfg.get_all("poisson", "event"), vec!["1:0 k=0", "1:1 k=1"]);
        assert_eq!(cfg.get("poisson", "region"), Some("1:0..2"));
        assert!(cfg.construction_spec().unwrap().is_none());
    }

    #[test]
    fn errors_carry_lines() {
        let e = Config::parse("h1 = 1\nstage 2: s=1,2").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = Config::parse("\n\nstage 1: r=3 s=1,2").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        assert!(matches!(Config::parse("wat").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(
            Config::parse("rule = cnu(nu=1)").unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn values() {
        let fs = parse_floorset("2:0..3,7").unwrap();
        assert_eq!(fs, FloorSet::from_intervals(2, vec![(0.into(), 3.into()), (7.into(), 8.into())]));
        let lags = parse_lags("-2..=1,5", 100).unwrap();
        assert_eq!(lags, vec![(-2).into(), (-1).into(), 0.into(), 1.into(), 5.into()]);
        assert!(parse_lags("0..1000", 10).is_err());
    }
}
