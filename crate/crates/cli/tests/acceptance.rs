//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankone::joint::StageWindow;
use rankone::ratio::{self, rat, Rational};
use rankone::sidon::{CnuDescriptor, CnuRule, Psi, SidonConstantRule, SidonProfileRule};
use rankone::spectral::{indicator_support_check, lemma_disjointness_check, pk_norm, PkBlock, DEFAULT_PAIR_CAP};
use rankone::{
    brute_force_oracle, check_sidon, classify_tensor_powers, cylinder_measure, generate_cnu,
    mc_estimate, verify_41, Construction, ConstructionSpec, CorrelationEngine,
    CylinderConjunction, CylinderEvent, DivergenceScenario, ExactExp, FloorSet,
    IntersectionQuery, Level, RepulsionScenario, StageParams,
};

type Verdict = (bool, String);
type Criterion = (&'static str, fn() -> Verdict);

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn shared(spec: ConstructionSpec) -> Arc<Construction> {
    Arc::new(Construction::new(spec).expect("valid construction"))
}

fn sidon_specs() -> Vec<(&'static str, Arc<Construction>)> {
    let psi = Psi::default();
    let c1 = CnuDescriptor::new(rat(1, 1), 2).unwrap();
    vec![
        ("sidon r=3", shared(ConstructionSpec::rule(1, SidonConstantRule { r: 3, psi: psi.clone() }))),
        ("C(1) base 2", shared(generate_cnu(&c1, 5).unwrap())),
        ("profile 2,3,4", shared(ConstructionSpec::rule(1, SidonProfileRule { rs: vec![2, 3, 4], psi }))),
    ]
}

fn product_identity() -> Verdict {
    let mut checked = 0;
    let mut times = Vec::new();
    for (name, c) in sidon_specs() {
        let t = Instant::now();
        if check_sidon(&c, 4).unwrap().iter().any(|v| !v.sidon) {
            return (false, format!("{name} is not Sidon"));
        }
        let e = CorrelationEngine::new(c);
        for m in 1..=5 {
            for d in 1..=2 {
                let rep = match verify_41(&e, m, d) {
                    Ok(r) => r,
                    Err(err) => return (false, format!("{name} m={m} d={d}: {err}")),
                };
                if !rep.equal {
                    return (false, format!("{name} m={m} d={d}: {} != {}", rep.lhs, rep.rhs));
                }
                checked += 1;
            }
        }
        times.push(format!("{name} {:.1}s", t.elapsed().as_secs_f64()));
    }
    (true, format!("{checked} exact equalities, m <= 5, d in {{1,2}} ({})", times.join(", ")))
}

fn random_schedule(rng: &mut ChaCha8Rng) -> ConstructionSpec {
    loop {
        let h1: i64 = rng.random_range(1..=3);
        let mut h = h1;
        let mut stages = Vec::new();
        for _ in 0..3 {
            let r = rng.random_range(2..=4);
            let s: Vec<i64> = (0..r).map(|_| rng.random_range(0..=h.min(9))).collect();
            h = r as i64 * h + s.iter().sum::<i64>();
            stages.push(StageParams::new(s));
        }
        let spec = ConstructionSpec::explicit(h1, stages);
        if h <= 10_000 && spec.validate().is_ok() {
            return spec;
        }
    }
}

fn random_floorset(rng: &mut ChaCha8Rng, c: &Construction) -> FloorSet {
    let stage = rng.random_range(1..=2);
    let h: i64 = c.height(stage).unwrap().try_into().unwrap();
    let ivs: Vec<(BigInt, BigInt)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let a = rng.random_range(0..h);
            (a.into(), rng.random_range(a + 1..=h).into())
        })
        .collect();
    FloorSet::from_intervals(stage, ivs)
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0u64;
    for spec_ix in 0..100 {
        let c = shared(random_schedule(&mut rng));
        let e = CorrelationEngine::new(c.clone()).with_max_stage(4);
        let (a, b) = (random_floorset(&mut rng, &c), random_floorset(&mut rng, &c));
        let h3: i64 = c.height(3).unwrap().try_into().unwrap();
        for n in 1 - h3..h3 {
            let n = BigInt::from(n);
            let lo = e.lower_bound_at(&IntersectionQuery::pair(n.clone(), &a, &b), 4).unwrap();
            let oracle = brute_force_oracle(&c, 4, &n, &a, &b).unwrap();
            if lo != oracle {
                return (false, format!("spec {spec_ix}, n={n}: engine {lo} vs oracle {oracle}"));
            }
            compared += 1;
        }
    }
    (true, format!("100 specs, {compared} lags, all equal"))
}

fn census() -> Verdict {
    let mut rows = Vec::new();
    for (name, c) in sidon_specs() {
        let e = CorrelationEngine::new(c);
        for j in 1..=3 {
            let l = match e.lag_census(j) {
                Ok(l) => l,
                Err(err) => return (false, format!("{name} j={j}: {err}")),
            };
            if l.found != l.expected {
                return (false, format!("{name} j={j}: found {} expected {}", l.found, l.expected));
            }
            rows.push(format!("{name} j={j}: {}", l.found));
        }
    }
    (true, rows.join("; "))
}

fn phase_table() -> Verdict {
    use rankone::sidon::{Recurrence::*, Spectrum::*};
    let check = |nu: Rational, dmax: u32, want: &dyn Fn(u32) -> (rankone::sidon::Recurrence, rankone::sidon::Spectrum)| {
        let rep = classify_tensor_powers(&nu, dmax);
        rep.powers
            .iter()
            .all(|p| (p.recurrence, p.spectrum) == want(p.d))
    };
    let c2 = check(rat(2, 1), 8, &|d| match d {
        1 | 2 => (Conservative, Singular),
        3 => (Conservative, AbsolutelyContinuous),
        _ => (Dissipative, AbsolutelyContinuous),
    });
    let c5 = check(rat(5, 1), 10, &|d| match d {
        1..=3 => (Conservative, Singular),
        4..=6 => (Conservative, AbsolutelyContinuous),
        _ => (Dissipative, AbsolutelyContinuous),
    });
    let pattern = (2..=5).all(|n: u32| {
        let rep = classify_tensor_powers(&Rational::from_integer((2 * n - 2).into()), n + 1);
        rep.get(n).unwrap().spectrum == Singular
            && rep.get(n + 1).unwrap().spectrum == AbsolutelyContinuous
    });
    (c2 && c5 && pattern, format!("nu=2 {c2}, nu=5 {c5}, nu=2n-2 (n=2..5) {pattern}"))
}

fn section_three() -> Verdict {
    let mut failures = Vec::new();
    let mut checks = 0;
    let psi = Psi::default();
    let mut instances = vec![(
        "sidon r=2",
        shared(ConstructionSpec::rule(1, SidonConstantRule { r: 2, psi: psi.clone() })),
    )];
    instances.extend(sidon_specs());
    for (name, c) in instances {
        let e = CorrelationEngine::new(c);
        for j in 1..=3 {
            match lemma_disjointness_check(&e, j) {
                Ok(rep) if rep.holds => {}
                Ok(rep) => failures.push(format!("{name} j={j}: lemma {} violations", rep.violations.len())),
                Err(err) => failures.push(format!("{name} j={j}: {err}")),
            }
            for d in 1..=2 {
                checks += 1;
                match indicator_support_check(&e, j, d) {
                    Ok(rep) if rep.passes => {}
                    Ok(rep) => failures.push(format!(
                        "{name} j={j} d={d}: values_01={} support {}",
                        rep.values_01,
                        ratio::fmt_ratio(&rep.support_measure)
                    )),
                    Err(err) => failures.push(format!("{name} j={j} d={d}: {err}")),
                }
            }
        }
    }
    let desc = CnuDescriptor::new(rat(2, 1), 2).unwrap();
    let e = CorrelationEngine::new(shared(ConstructionSpec::rule(1, CnuRule { desc: desc.clone() })));
    let block = PkBlock::from_descriptor(&desc, 1, 3).unwrap();
    let pk = pk_norm(&e, &block, 2, 2, &Rational::zero(), false, DEFAULT_PAIR_CAP).unwrap();
    let closed = !pk.cross_terms_vanish || (pk.exact && pk.dist_lo == pk.closed_form);
    if !closed {
        failures.push(format!("P_k(S^2): {} vs closed form {}", pk.dist_lo, pk.closed_form));
    }
    let mut detail = format!(
        "{checks} support checks; P_k(S^2) on truncated C(2) block ({} of {} stages): precondition {}, {} = {}",
        block.n_eff,
        block.n_k,
        pk.cross_terms_vanish,
        ratio::fmt_ratio(&pk.dist_lo),
        ratio::fmt_ratio(&pk.closed_form)
    );
    if !failures.is_empty() {
        detail = format!("{detail}; failures: {}", failures.join("; "));
    }
    (failures.is_empty() && pk.cross_terms_vanish, detail)
}

fn divergence() -> Verdict {
    let sc = DivergenceScenario::default_scenario().unwrap();
    let mu_a = sc.measure_a();
    let mut notes = vec![format!("{} windows", sc.windows.len())];
    let checks = sc.verify_windows(jobs()).unwrap();
    let (even, odd): (Vec<_>, Vec<_>) = checks.iter().partition(|c| c.even);
    let count = |v: &[&rankone::joint::WindowCheck]| v.iter().map(|c| c.checked).sum::<u64>();
    let identities = checks.iter().all(|c| c.all_hold());
    notes.push(format!("equality on {} even-window indices, disjointness on {} odd", count(&even), count(&odd)));

    let w = |j: usize| sc.windows.iter().find(|w| w.j == j).cloned();
    let (Some(w2), Some(w3)) = (w(2), w(3)) else {
        return (false, "stages 2 and 3 have no windows".into());
    };
    let rows = sc.average_series(w3.hi, Level::Base, jobs()).unwrap();
    let avg = |n: i128| rows[(n - 1) as usize].running_exact.clone().unwrap();
    let hi = (w2.lo..=w2.hi).map(avg).max().unwrap();
    let lo = (w3.lo..=w3.hi).map(avg).min().unwrap();
    let high_ok = hi >= &mu_a * rat(4, 5);
    let low_ok = lo <= &mu_a * rat(1, 5);
    notes.push(format!(
        "max avg on even block {} ({}), min on odd block {} ({})",
        ratio::fmt_ratio(&hi),
        ratio::to_f64(&hi),
        ratio::fmt_ratio(&lo),
        ratio::to_f64(&lo)
    ));

    let poisson_at = |win: &StageWindow, n: i128| {
        let want = ExactExp::new(Rational::one(), if win.even() { mu_a.clone() } else { &mu_a * rat(2, 1) });
        sc.poisson_term(n).unwrap() == want
    };
    let mut poisson_checked = 0u64;
    let mut poisson_ok = true;
    for win in &sc.windows {
        let len = win.hi - win.lo + 1;
        let step = (len / 4096).max(1);
        let mut ns: BTreeSet<i128> = (win.lo..=win.hi).step_by(step as usize).collect();
        ns.insert(win.hi);
        for n in ns {
            poisson_checked += 1;
            poisson_ok &= poisson_at(win, n);
        }
    }
    notes.push(format!("Poisson terms symbolic at {poisson_checked} window indices"));
    (identities && high_ok && low_ok && poisson_ok, notes.join("; "))
}

fn measure(c: &Construction, s: &FloorSet) -> Rational {
    Rational::from_integer(s.len()) * c.floor_measure(s.stage()).unwrap()
}

/// `∏ e^{-μ_i} μ_i^{k_i} / k_i!` computed directly.
fn independent_product(c: &Construction, events: &[CylinderEvent]) -> ExactExp {
    let mut coeff = Rational::one();
    let mut exponent = Rational::zero();
    for e in events {
        let m = measure(c, &e.set);
        let fact: BigInt = (1..=e.count).map(BigInt::from).product();
        coeff *= ratio::pow(&m, e.count) / Rational::from_integer(fact);
        exponent += m;
    }
    ExactExp::new(coeff, exponent)
}

fn poisson_calculus() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let c = shared(random_schedule(&mut rng));
        let stage = rng.random_range(1..=3);
        let h: i64 = c.height(stage).unwrap().try_into().unwrap();
        let mut cuts: Vec<i64> = (0..rng.random_range(2..=6)).map(|_| rng.random_range(0..=h)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let mut events = Vec::new();
        for w in cuts.windows(2) {
            if rng.random_bool(0.8) {
                let set = FloorSet::from_intervals(stage, vec![(w[0].into(), w[1].into())]);
                events.push(CylinderEvent::new(set, rng.random_range(0..=3)));
            }
        }
        if events.is_empty() {
            continue;
        }
        let got = cylinder_measure(&c, &CylinderConjunction::new(events.clone())).unwrap();
        let want = independent_product(&c, &events);
        if got != want {
            return (false, format!("trial {trial}: {got:?} vs {want:?}"));
        }
    }

    let c = shared(ConstructionSpec::explicit(
        1,
        vec![StageParams::new([2, 4, 8]), StageParams::new([0, 40])],
    ));
    let fs = |s: usize, a: i64, b: i64| FloorSet::from_intervals(s, vec![(a.into(), b.into())]);
    let conjs = [
        vec![CylinderEvent::new(fs(1, 0, 1), 1), CylinderEvent::new(fs(2, 3, 5), 0)],
        vec![CylinderEvent::new(fs(2, 0, 4), 2)],
        vec![CylinderEvent::new(fs(2, 0, 2), 0), CylinderEvent::new(fs(2, 5, 9), 1)],
        vec![CylinderEvent::new(fs(2, 1, 17), 5)],
    ];
    let region = fs(2, 0, 17);
    let mut inside = 0;
    let samples = 100_000;
    for run in 0..40u64 {
        let conj = CylinderConjunction::new(conjs[(run % 4) as usize].clone());
        let exact = cylinder_measure(&c, &conj).unwrap().approx();
        let mc = mc_estimate(&c, &conj, &region, samples, 1000 + run, jobs()).unwrap();
        let sigma = (exact * (1.0 - exact) / samples as f64).sqrt();
        if (mc.estimate - exact).abs() <= 4.0 * sigma {
            inside += 1;
        }
    }
    (inside >= 38, format!("20 conjunctions symbolic; {inside}/40 Monte Carlo runs within 4 sigma"))
}

fn repulsion() -> Verdict {
    let windows = 3;
    let sc = RepulsionScenario::default_c1(windows + 1).unwrap();
    let c = sc.construction().clone();
    let n_max = c.height(windows + 1).unwrap();
    let rep = sc.repulsion_summability(&n_max).unwrap();

    // lags where the orbit of U misses U must carry no repulsion at all
    let off_support_zero = (0..=3000i64).filter(|n| BigInt::from(*n) <= n_max).all(|n| {
        let n = BigInt::from(n);
        !sc.overlap(&n).unwrap().is_zero() || sc.repulsion_measure(&n).unwrap().coeff.is_zero()
    });
    let maxima: Vec<(usize, f64)> = rep
        .window_maxima(&c)
        .unwrap()
        .into_iter()
        .filter(|(j, _)| *j <= windows)
        .collect();
    let decreasing = maxima.windows(2).all(|w| w[1].1 < w[0].1);
    let rs: Vec<usize> = (1..=windows).map(|j| c.params(j).unwrap().r).collect();
    let detail = format!(
        "C = {}, bound {} (off-support zero {}); sum overlap^4 = {} <= product {}: {}; window maxima {:?} with r = {:?}, strictly decreasing {}",
        ratio::fmt_ratio(&rep.fitted_const),
        rep.bound_holds,
        off_support_zero,
        ratio::fmt_ratio(&rep.overlap4_sum),
        ratio::fmt_ratio(&rep.product_bound),
        rep.within_product,
        maxima,
        rs,
        decreasing
    );
    (
        rep.bound_holds && off_support_zero && rep.within_product && rep.fitted_const.is_positive() && decreasing,
        detail,
    )
}

const DET_CONFIG: &str = "\
h1 = 1
stage 1: r=3 s=2,4,8
stage 2: r=2 s=0,40
stage 3: r=2 s=1,200

[correlate]
lags = -40..=40

[poisson]
event = 1:0 k=1
event = 2:3..5 k=0
region = 2:0..17

[diverge]
stages = 3
";

fn run_all(dir: &Path, out: &str) -> Result<(), String> {
    let runs: [(&str, &[&str]); 9] = [
        ("c.cfg", &["build"]),
        ("c.cfg", &["correlate"]),
        ("c.cfg", &["sidon-check"]),
        ("c.cfg", &["classify", "--nu", "5/2"]),
        ("c.cfg", &["verify-41", "--m", "3", "--d", "2"]),
        ("cnu.cfg", &["pk-diagnose"]),
        ("c.cfg", &["poisson", "--samples", "30000", "--jobs", "2"]),
        ("c.cfg", &["diverge"]),
        ("cnu.cfg", &["repulse", "--windows", "2"]),
    ];
    for (cfg, args) in runs {
        let sub = dir.join(out).join(args[0]);
        let status = Command::new(env!("CARGO_BIN_EXE_rankone"))
            .current_dir(dir)
            .args(["--config", cfg, "--seed", "5", "--out", sub.to_str().unwrap()])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{}: {}", args[0], String::from_utf8_lossy(&status.stderr)));
        }
    }
    Ok(())
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.cfg"), DET_CONFIG).unwrap();
    fs::write(tmp.path().join("cnu.cfg"), "rule = cnu(nu=2, base=2)\n\n[pk]\ncap = 2\np = 1,2\n").unwrap();
    for out in ["a", "b"] {
        if let Err(e) = run_all(tmp.path(), out) {
            return (false, e);
        }
    }
    let mut files = 0;
    for sub in fs::read_dir(tmp.path().join("a")).unwrap() {
        let sub = sub.unwrap().path();
        for f in fs::read_dir(&sub).unwrap() {
            let f = f.unwrap().path();
            let twin = tmp.path().join("b").join(sub.file_name().unwrap()).join(f.file_name().unwrap());
            if fs::read(&f).unwrap() != fs::read(&twin).unwrap_or_default() {
                return (false, format!("{} differs", f.display()));
            }
            files += 1;
        }
    }
    (files > 9, format!("9 subcommands, {files} files byte-identical"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("product identity", product_identity),
        ("oracle equivalence", oracle_equivalence),
        ("lag census", census),
        ("phase table", phase_table),
        ("disjointness machinery", section_three),
        ("divergent averages", divergence),
        ("Poisson calculus", poisson_calculus),
        ("repulsion", repulsion),
        ("determinism", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = f();
        failed += usize::from(!pass);
        println!(
            "criterion {} ({name}): {} [{:.1}s] {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
