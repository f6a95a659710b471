use std::collections::BTreeSet;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};
use rankone::correlation::{CSV_HEADER, DEFAULT_MAX_STAGE};
use rankone::joint::SERIES_CSV_HEADER;
use rankone::poisson::{BaseMap, FloorSwap, PoissonReport};
use rankone::ratio::{self, Rational};
use rankone::sidon::{check_growth, CnuDescriptor};
use rankone::spectral::{pk_norm, repeated_average, PkBlock, DEFAULT_PAIR_CAP, PK_CSV_HEADER};
use rankone::{
    check_sidon, classify_tensor_powers, cylinder_measure, image_conjunction, mc_estimate,
    verify_41, Construction, ConstructionSpec, CorrelationEngine, CylinderConjunction,
    CylinderEvent, DivergenceScenario, Error, IntPoly, Level, RepulsionScenario,
    Result, SequencePair, WindowRule,
};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{parse_floorset, parse_lags, parse_list, parse_num, parse_rational, Config, RuleSpec};

/// Settings shared by every subcommand.
pub struct Ctx<'a> {
    pub cfg: &'a Config,
    pub seed: u64,
    pub jobs: usize,
    pub max_stage: Option<usize>,
    pub samples: Option<u64>,
}

/// Files to write plus the parameters the run actually used.
#[derive(Default)]
pub struct Outcome {
    pub params: Map<String, Value>,
    pub files: Vec<(String, String)>,
    pub summary: Value,
}

impl Outcome {
    fn param(&mut self, k: &str, v: impl Serialize) {
        self.params.insert(k.into(), serde_json::to_value(v).expect("param serializes"));
    }

    fn json(&mut self, name: &str, v: &impl Serialize) {
        let mut s = serde_json::to_string_pretty(v).expect("report serializes");
        s.push('\n');
        self.files.push((name.into(), s));
    }

    fn csv(&mut self, name: &str, header: &str, rows: impl IntoIterator<Item = String>) {
        let mut s = String::from(header);
        s.push('\n');
        for r in rows {
            s.push_str(&r);
            s.push('\n');
        }
        self.files.push((name.into(), s));
    }
}

/// CLI flag, then `[section] key`, then the default.
fn pick<T: std::str::FromStr>(flag: Option<T>, cfg: &Config, sec: &str, key: &str, default: T) -> Result<T> {
    match (flag, cfg.get(sec, key)) {
        (Some(v), _) => Ok(v),
        (None, Some(v)) => parse_num(key, v),
        (None, None) => Ok(default),
    }
}

fn check_keys(cfg: &Config, sec: &str, allowed: &[&str]) -> Result<()> {
    for k in cfg.section_keys(sec) {
        if !allowed.contains(&k) {
            return Err(Error::InvalidSpec(format!("unknown key `{k}` in [{sec}]")));
        }
    }
    Ok(())
}

fn positive(what: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::InvalidSpec(format!("{what} must be positive")));
    }
    Ok(v)
}

fn required_construction(cfg: &Config) -> Result<Arc<Construction>> {
    let spec = cfg
        .construction_spec()?
        .ok_or_else(|| Error::InvalidSpec("this command needs a schedule in the config".into()))?;
    Ok(Arc::new(Construction::new(spec)?))
}

fn construction_or(cfg: &Config, default: CnuDescriptor) -> Result<(Arc<Construction>, String)> {
    match cfg.construction_spec()? {
        Some(spec) => Ok((Arc::new(Construction::new(spec)?), "config".into())),
        None => {
            let rule = RuleSpec::Cnu(default.clone()).canonical();
            let spec = ConstructionSpec::rule(1, rankone::sidon::CnuRule { desc: default });
            Ok((Arc::new(Construction::new(spec)?), rule))
        }
    }
}

fn big_str(n: &BigInt) -> String {
    n.to_string()
}

pub fn build(ctx: &Ctx) -> Result<Outcome> {
    let mut out = Outcome::default();
    let c = required_construction(ctx.cfg)?;
    let stages = positive("max-stage", ctx.max_stage.unwrap_or(4))?;
    out.param("stages", stages);
    let mut rows = Vec::new();
    for j in 1..=stages {
        let t = c.tower(j)?;
        let mut row = json!({
            "j": j,
            "h": big_str(&t.h),
            "floor_measure": ratio::fmt_ratio(&t.floor_measure),
        });
        if let (Some(p), Some(q)) = (&t.params, &t.offsets) {
            row["r"] = json!(p.r);
            if p.r <= 4096 {
                row["spacers"] = json!(p.spacers.iter().map(big_str).collect::<Vec<_>>());
                row["offsets"] = json!(q.iter().map(big_str).collect::<Vec<_>>());
            }
        }
        rows.push(row);
    }
    let report = json!({ "spec": c.spec().describe(), "towers": rows });
    out.summary = json!({ "stages": stages, "h": rows.last().map(|r| r["h"].clone()) });
    out.json("towers.json", &report);
    Ok(out)
}

pub fn correlate(ctx: &Ctx, lags: Option<String>, eps: Option<String>) -> Result<Outcome> {
    let cfg = ctx.cfg;
    check_keys(cfg, "correlate", &["lags", "a", "b", "eps", "max_lags"])?;
    let mut out = Outcome::default();
    let c = required_construction(cfg)?;
    let max_stage = positive("max-stage", ctx.max_stage.unwrap_or(DEFAULT_MAX_STAGE))?;
    let engine = CorrelationEngine::new(c.clone()).with_max_stage(max_stage);
    let lag_text = lags.or_else(|| cfg.get("correlate", "lags").map(String::from)).unwrap_or_else(|| "-10..=10".into());
    let cap: usize = pick(None, cfg, "correlate", "max_lags", 100_000)?;
    let lag_list = parse_lags(&lag_text, cap)?;
    let eps_text = eps.or_else(|| cfg.get("correlate", "eps").map(String::from)).unwrap_or_else(|| "0".into());
    let eps = parse_rational("eps", &eps_text)?;
    let a = cfg.get("correlate", "a").map(parse_floorset).transpose()?.unwrap_or_else(|| c.x1());
    let b = cfg.get("correlate", "b").map(parse_floorset).transpose()?.unwrap_or_else(|| c.x1());
    out.param("max_stage", max_stage);
    out.param("lags", &lag_text);
    out.param("eps", ratio::fmt_ratio(&eps));
    out.param("a", a.to_string());
    out.param("b", b.to_string());
    let mut rows = Vec::with_capacity(lag_list.len());
    let mut exact = 0usize;
    for n in &lag_list {
        let v = engine.correlation(n, &a, &b, &eps)?;
        exact += usize::from(v.exact);
        rows.push(v.csv_row(n));
    }
    out.summary = json!({ "lags": lag_list.len(), "exact": exact });
    out.csv("correlations.csv", CSV_HEADER, rows);
    Ok(out)
}

pub fn sidon_check(ctx: &Ctx, census: Option<bool>) -> Result<Outcome> {
    let cfg = ctx.cfg;
    check_keys(cfg, "sidon", &["stages", "census", "census_cap"])?;
    let mut out = Outcome::default();
    let c = required_construction(cfg)?;
    let finite = c.max_stage().map_or(4, |m| (m - 1).clamp(1, 4));
    let stages = positive("stages", pick(ctx.max_stage, cfg, "sidon", "stages", finite)?)?;
    let census = pick(census, cfg, "sidon", "census", true)?;
    let cap: u64 = pick(None, cfg, "sidon", "census_cap", 1_000_000)?;
    out.param("stages", stages);
    out.param("census", census);
    out.param("census_cap", cap);
    let verdicts = check_sidon(&c, stages)?;
    let psi = cfg.descriptor().map(|d| d.psi.clone()).unwrap_or_default();
    let growth = check_growth(&c, &psi, stages)?;
    let engine = CorrelationEngine::new(c.clone());
    let mut rows = Vec::new();
    if census {
        for j in 1..=stages {
            let fits = c.height(j + 1)?.to_u64().is_some_and(|h| h <= cap);
            let entry = if !fits {
                json!({ "stage": j, "skipped": "height above census_cap" })
            } else {
                match engine.lag_census(j) {
                    Ok(l) => serde_json::to_value(&l).expect("census serializes"),
                    Err(e @ (Error::NotExact(_) | Error::StageUnavailable(_))) => {
                        json!({ "stage": j, "skipped": e.code() })
                    }
                    Err(e) if e.is_budget() => json!({ "stage": j, "skipped": e.code() }),
                    Err(e) => return Err(e),
                }
            };
            rows.push(entry);
        }
    }
    let all = verdicts.iter().all(|v| v.sidon);
    out.summary = json!({ "sidon": all, "growth": growth.ok });
    out.json(
        "sidon.json",
        &json!({ "sidon": all, "verdicts": verdicts, "growth": growth, "census": rows }),
    );
    Ok(out)
}

pub fn classify(ctx: &Ctx, nu: Option<String>, dmax: Option<u32>) -> Result<Outcome> {
    let cfg = ctx.cfg;
    check_keys(cfg, "classify", &["nu", "dmax"])?;
    let mut out = Outcome::default();
    let nu = match nu.or_else(|| cfg.get("classify", "nu").map(String::from)) {
        Some(v) => parse_rational("nu", &v)?,
        None => cfg
            .descriptor()
            .map(|d| d.nu.clone())
            .ok_or_else(|| Error::InvalidSpec("classify needs --nu or a cnu rule".into()))?,
    };
    if nu < Rational::zero() {
        return Err(Error::InvalidDescriptor("nu is negative".into()));
    }
    let dmax = pick(dmax, cfg, "classify", "dmax", 5)?;
    if dmax == 0 {
        return Err(Error::InvalidSpec("dmax must be positive".into()));
    }
    out.param("nu", ratio::fmt_ratio(&nu));
    out.param("dmax", dmax);
    let report = classify_tensor_powers(&nu, dmax);
    out.summary = json!({ "powers": report.powers.len() });
    out.json("phases.json", &report);
    Ok(out)
}

pub fn verify41(ctx: &Ctx, m: Option<usize>, d: Option<u32>) -> Result<Outcome> {
    let cfg = ctx.cfg;
    check_keys(cfg, "verify-41", &["m", "d"])?;
    let mut out = Outcome::default();
    let default = CnuDescriptor::new(ratio::rat(2, 1), 2)?;
    let (c, source) = construction_or(cfg, default)?;
    let m = positive("m", pick(m, cfg, "verify-41", "m", 4)?)?;
    let d: u32 = pick(d, cfg, "verify-41", "d", 1)?;
    if d == 0 {
        return Err(Error::InvalidSpec("d must be positive".into()));
    }
    let max_stage = ctx.max_stage.unwrap_or(DEFAULT_MAX_STAGE);
    out.param("construction", source);
    out.param("m", m);
    out.param("d", d);
    out.param("max_stage", max_stage);
    let engine = CorrelationEngine::new(c).with_max_stage(max_stage);
    let report = verify_41(&engine, m, d)?;
    out.summary = json!({ "equal": report.equal });
    out.json("verify41.json", &report);
    Ok(out)
}

pub struct PkArgs {
    pub k: Option<usize>,
    pub d: Option<u32>,
    pub p: Option<Vec<u32>>,
    pub cap: Option<usize>,
    pub decompose: bool,
}

pub fn pk_diagnose(ctx: &Ctx, args: PkArgs) -> Result<Outcome> {
    let cfg = ctx.cfg;
    check_keys(cfg, "pk", &["k", "d", "p", "cap", "eps", "decompose", "pair_cap"])?;
    let mut out = Outcome::default();
    let desc = match (&cfg.rule, cfg.descriptor()) {
        (_, Some(d)) => d.clone(),
        (None, None) if cfg.stages.is_empty() => CnuDescriptor::new(ratio::rat(2, 1), 2)?,
        _ => return Err(Error::InvalidSpec("pk-diagnose needs a cnu rule".into())),
    };
    let h1 = cfg.h1.clone().unwrap_or_else(|| BigInt::from(1));
    let c = Arc::new(Construction::new(ConstructionSpec::rule(
        h1,
        rankone::sidon::CnuRule { desc: desc.clone() },
    ))?);
    let k = pick(args.k, cfg, "pk", "k", 2)?;
    let d = pick(args.d, cfg, "pk", "d", 1)?;
    let ps = match (args.p, cfg.get("pk", "p")) {
        (Some(p), _) => p,
        (None, Some(v)) => parse_list("p", v)?,
        (None, None) => vec![1, 2],
    };
    let cap = positive("cap", pick(args.cap, cfg, "pk", "cap", 3)?)?;
    let eps = parse_rational("eps", cfg.get("pk", "eps").unwrap_or("0"))?;
    let decompose = args.decompose || pick(None, cfg, "pk", "decompose", false)?;
    let pair_cap = pick(None, cfg, "pk", "pair_cap", DEFAULT_PAIR_CAP)?;
    let max_stage = ctx.max_stage.unwrap_or(DEFAULT_MAX_STAGE);
    out.param("rule", RuleSpec::Cnu(desc.clone()).canonical());
    for (key, v) in [("k", json!(k)), ("d", json!(d)), ("p", json!(ps)), ("cap", json!(cap))] {
        out.param(key, v);
    }
    out.param("eps", ratio::fmt_ratio(&eps));
    out.param("decompose", decompose);
    out.param("pair_cap", pair_cap);
    out.param("max_stage", max_stage);
    let engine = CorrelationEngine::new(c).with_max_stage(max_stage);
    let block = PkBlock::from_descriptor(&desc, k, cap)?;
    let mut reports = Vec::new();
    for &p in &ps {
        reports.push(pk_norm(&engine, &block, d, p, &eps, decompose, pair_cap)?);
    }
    let avg = repeated_average(&reports).map(|(lo, hi)| {
        json!({ "lo": ratio::fmt_ratio(&lo), "hi": ratio::fmt_ratio(&hi) })
    });
    out.summary = json!({ "reports": reports.len(), "exact": reports.iter().all(|r| r.exact) });
    out.csv("pk.csv", PK_CSV_HEADER, reports.iter().map(|r| r.csv_row()));
    out.json("pk.json", &json!({ "block": block, "reports": reports, "repeated_average": avg }));
    Ok(out)
}

fn parse_event(v: &str) -> Result<CylinderEvent> {
    let (set, k) = v
        .rsplit_once("k=")
        .ok_or_else(|| Error::InvalidSpec(format!("event `{v}` needs k=<count>")))?;
    Ok(CylinderEvent::new(parse_floorset(set.trim())?, parse_num("k", k)?))
}

/// `power(<n>)` or `swap(<stage>,<a>,<b>,<width>)`.
fn parse_map(v: &str) -> Result<BaseMap> {
    let bad = || Error::InvalidSpec(format!("map `{v}`: expected power(n) or swap(stage,a,b,width)"));
    let (name, rest) = v.trim().split_once('(').ok_or_else(bad)?;
    let body = rest.strip_suffix(')').ok_or_else(bad)?;
    match name.trim() {
        "power" => Ok(BaseMap::Power(parse_num("power", body)?)),
        "swap" => {
            let a: Vec<BigInt> = parse_list("swap", body)?;
            if a.len() != 4 {
                return Err(bad());
            }
            let stage = a[0].to_usize().ok_or_else(bad)?;
            Ok(BaseMap::Swap(FloorSwap::new(stage, a[1].clone(), a[2].clone(), a[3].clone())?))
        }
        _ => Err(bad()),
    }
}

pub fn poisson(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    check_keys(cfg, "poisson", &["event", "region", "map", "samples"])?;
    let mut out = Outcome::default();
    let c = required_construction(cfg)?;
    let events = cfg
        .get_all("poisson", "event")
        .into_iter()
        .map(parse_event)
        .collect::<Result<Vec<_>>>()?;
    if events.is_empty() {
        return Err(Error::InvalidSpec("[poisson] needs at least one event".into()));
    }
    let mut conj = CylinderConjunction::new(events);
    let max_stage = ctx.max_stage.unwrap_or(DEFAULT_MAX_STAGE);
    if let Some(m) = cfg.get("poisson", "map") {
        conj = image_conjunction(&c, &conj, &parse_map(m)?, max_stage)?;
        out.param("map", m);
    }
    let samples = pick(ctx.samples, cfg, "poisson", "samples", 0u64)?;
    let region = cfg.get("poisson", "region").map(parse_floorset).transpose()?;
    out.param(
        "events",
        conj.events.iter().map(|e| format!("{} k={}", e.set, e.count)).collect::<Vec<_>>(),
    );
    out.param("samples", samples);
    out.param("seed", ctx.seed);
    out.param("max_stage", max_stage);
    let exact = cylinder_measure(&c, &conj)?;
    let mc = match (samples, &region) {
        (0, _) => None,
        (_, None) => return Err(Error::InvalidSpec("Monte Carlo needs a [poisson] region".into())),
        (n, Some(r)) => {
            out.param("region", r.to_string());
            Some(mc_estimate(&c, &conj, r, n, ctx.seed, ctx.jobs)?)
        }
    };
    let report = PoissonReport::new(&exact, mc);
    out.summary = json!({ "approx": report.approx, "mc": report.mc.as_ref().map(|m| m.estimate) });
    out.json("poisson.json", &report);
    Ok(out)
}

fn poly(what: &str, v: &str) -> Result<IntPoly> {
    Ok(IntPoly::new(parse_list(what, v)?))
}

pub fn diverge(ctx: &Ctx, n_max: Option<i128>, verify: bool) -> Result<Outcome> {
    let cfg = ctx.cfg;
    check_keys(cfg, "diverge", &["p", "q", "h1", "stages", "katok", "rule", "n_max", "verify"])?;
    let mut out = Outcome::default();
    let seqs = match (cfg.get("diverge", "p"), cfg.get("diverge", "q")) {
        (None, None) => SequencePair::default_pair(),
        (Some(p), Some(q)) => SequencePair::new(poly("p", p)?, poly("q", q)?)?,
        _ => return Err(Error::InvalidSpec("[diverge] needs both p and q".into())),
    };
    let h1: i128 = pick(None, cfg, "diverge", "h1", 1)?;
    let stages = positive("stages", pick(ctx.max_stage, cfg, "diverge", "stages", 4)?)?;
    let katok: BTreeSet<usize> = match cfg.get("diverge", "katok") {
        Some(v) => parse_list("katok", v)?.into_iter().collect(),
        None => BTreeSet::new(),
    };
    let rule = match cfg.get("diverge", "rule").unwrap_or("gapped") {
        "gapped" => WindowRule::Gapped,
        "literal" => WindowRule::Literal,
        other => return Err(Error::InvalidSpec(format!("unknown window rule `{other}`"))),
    };
    let verify = verify && pick(None, cfg, "diverge", "verify", true)?;
    let sc = DivergenceScenario::build(seqs, h1, stages, katok, rule)?;
    let last_hi = sc.windows.last().map_or(0, |w| w.hi);
    let n_max = pick(n_max, cfg, "diverge", "n_max", last_hi.min(100_000))?;
    out.param("p", sc.seqs.p.describe());
    out.param("q", sc.seqs.q.describe());
    out.param("h1", h1);
    out.param("stages", stages);
    out.param("katok", &sc.katok);
    out.param("rule", rule);
    out.param("n_max", n_max);
    out.param("verify", verify);
    let checks = if verify { sc.verify_windows(ctx.jobs)? } else { Vec::new() };
    let base = sc.average_series(n_max, Level::Base, ctx.jobs)?;
    let pois = sc.average_series(n_max, Level::Poisson, ctx.jobs)?;
    out.summary = json!({
        "windows": sc.windows.len(),
        "skipped": sc.skipped.len(),
        "verified": checks.iter().all(|c| c.all_hold()),
        "rows": base.len(),
    });
    out.json("scenario.json", &sc);
    out.json("windows.json", &checks);
    out.csv("series_base.csv", SERIES_CSV_HEADER, base.iter().map(|r| r.csv_row()));
    out.csv("series_poisson.csv", SERIES_CSV_HEADER, pois.iter().map(|r| r.csv_row()));
    Ok(out)
}

pub fn repulse(ctx: &Ctx, windows: Option<usize>, n_max: Option<String>) -> Result<Outcome> {
    let cfg = ctx.cfg;
    check_keys(cfg, "repulse", &["windows", "n_max"])?;
    let mut out = Outcome::default();
    let windows = positive("windows", pick(windows, cfg, "repulse", "windows", 3)?)?;
    let sc = RepulsionScenario::default_c1(windows + 1)?;
    let c = sc.construction().clone();
    let n_max = match n_max.or_else(|| cfg.get("repulse", "n_max").map(String::from)) {
        Some(v) => parse_num::<BigInt>("n_max", &v)?,
        None => c.height(windows + 1)?,
    };
    out.param("scenario", "cnu(nu=1, base=2), h1 = 2, E = 1:0, RE = 1:1");
    out.param("windows", windows);
    out.param("n_max", n_max.to_string());
    let report = sc.repulsion_summability(&n_max)?;
    let maxima: Vec<(usize, f64)> =
        report.window_maxima(&c)?.into_iter().filter(|(j, _)| *j <= windows).collect();
    let strictly_decreasing = maxima.windows(2).all(|w| w[1].1 < w[0].1);
    out.summary = json!({
        "bound_holds": report.bound_holds,
        "within_product": report.within_product,
        "strictly_decreasing": strictly_decreasing,
    });
    let rows = report.rows.iter().map(|r| {
        format!(
            "{},{},{},{},{:.12e}",
            r.n,
            ratio::fmt_ratio(&r.overlap),
            ratio::fmt_ratio(&r.value.coeff),
            ratio::fmt_ratio(&r.value.exponent),
            r.value.approx()
        )
    });
    out.csv("repulse.csv", "n,overlap,coeff,exponent,approx", rows.collect::<Vec<_>>());
    out.json(
        "repulse.json",
        &json!({
            "report": report,
            "window_maxima": maxima.iter().map(|(j, v)| json!({ "j": j, "approx": v })).collect::<Vec<_>>(),
            "strictly_decreasing": strictly_decreasing,
        }),
    );
    Ok(out)
}
