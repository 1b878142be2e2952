//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Criteria 1-3 are property suites. Criteria 4-9 read the default desk
//! experiment, which is run twice so the second run doubles as the
//! determinism check.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use pelican::harness::{ExperimentConfig, ExperimentReport, Pipeline, HEADLINE};
use pelican::inversion::{AdversaryKind, Strategy};
use pelican::personalize::PersonalizationMethod;
use pelican::seqnet::load_model;

use common::Check;

struct Outcome {
    id: u8,
    name: &'static str,
    result: Check,
    elapsed: Duration,
}

fn within(limit: Duration, elapsed: Duration, r: Check) -> Check {
    let r = r?;
    if elapsed > limit {
        return Err(format!("{r}, but took {:.0}s (limit {:.0}s)", elapsed.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(r)
}

fn timed(id: u8, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let r = f();
    let elapsed = start.elapsed();
    let result = match limit {
        Some(l) => within(l, elapsed, r),
        None => r,
    };
    let o = Outcome { id, name, result, elapsed };
    report(&o);
    o
}

fn report(o: &Outcome) {
    let (tag, detail) = match &o.result {
        Ok(s) => ("PASS", s),
        Err(s) => ("FAIL", s),
    };
    println!("criterion {} {tag} {} [{:.1}s]: {detail}", o.id, o.name, o.elapsed.as_secs_f64());
}

fn all(checks: &[fn() -> Check]) -> Check {
    let mut parts = Vec::new();
    for c in checks {
        parts.push(c()?);
    }
    Ok(parts.join("; "))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn share(hits: usize, of: usize) -> f64 {
    hits as f64 / of.max(1) as f64
}

fn attack_efficacy(r: &ExperimentReport, attack_seconds: f64) -> Check {
    let (_, _, prior) = HEADLINE;
    let cell = |s| r.cell(AdversaryKind::A1, s, prior, 1.0).ok_or(format!("no A1 {s:?} cell at T=1"));
    let (tb, bf, gd) = (cell(Strategy::TimeBased)?, cell(Strategy::BruteForce)?, cell(Strategy::Gradient)?);
    let top3 = |c: &pelican::harness::CellSummary| c.at(3).ok_or("top-3 not configured".to_string());
    let (t3, b3, g3) = (top3(tb)?, top3(bf)?, top3(gd)?);
    let base = tb.baseline_at(3).ok_or("no baseline")?;
    let speedup = bf.runtime_seconds / tb.runtime_seconds;
    let detail = format!(
        "TB top-3 {t3:.2}% vs baseline {base:.2}%, BF {b3:.2}%, gradient {g3:.2}%, speedup {speedup:.1}x, stages {attack_seconds:.0}s"
    );
    ensure(t3 >= 2.0 * base, || format!("TB below twice the baseline: {detail}"))?;
    ensure((t3 - b3).abs() <= 5.0, || format!("TB not within 5 points of BF: {detail}"))?;
    ensure(speedup >= 5.0, || format!("speedup under 5x: {detail}"))?;
    ensure(g3 < t3, || format!("gradient not below TB: {detail}"))?;
    ensure(attack_seconds < 20.0 * 60.0, || format!("over 20 min: {detail}"))?;
    Ok(detail)
}

fn personalization_benefit(r: &ExperimentReport) -> Check {
    let users: Vec<&str> = r
        .personalization
        .iter()
        .filter(|p| p.method == PersonalizationMethod::Reuse)
        .map(|p| p.user.as_str())
        .collect();
    let better = users
        .iter()
        .filter(|u| {
            let fe = r.personal(u, PersonalizationMethod::TlFe);
            let reuse = r.personal(u, PersonalizationMethod::Reuse);
            matches!((fe, reuse), (Some(f), Some(g)) if f.test_accuracy[0] > g.test_accuracy[0])
        })
        .count();
    let gap = |u: &str, m| r.updates.iter().find(|o| o.user == u && o.method == m).map(|o| o.initial_gap());
    let wider = users
        .iter()
        .filter(|u| matches!(
            (gap(u, PersonalizationMethod::PersonalLstm), gap(u, PersonalizationMethod::TlFe)),
            (Some(p), Some(f)) if p > f
        ))
        .count();
    let detail = format!(
        "TL_FE beats Reuse on {better}/{n}, PersonalLSTM gap exceeds TL_FE on {wider}/{n} at 2 weeks",
        n = users.len()
    );
    ensure(!users.is_empty(), || "no personalization rows".into())?;
    ensure(share(better, users.len()) >= 0.7 && share(wider, users.len()) >= 0.7, || detail.clone())?;
    Ok(detail)
}

fn defense_efficacy(r: &ExperimentReport) -> Check {
    let a = r.analysis.as_ref().ok_or("no analysis")?;
    let (adv, strat, prior) = HEADLINE;
    let mut sweep: Vec<(f64, f64)> = r
        .config
        .attack
        .temperatures
        .iter()
        .filter_map(|&t| Some((t, r.cell(adv, strat, prior, t)?.at(1)?)))
        .collect();
    sweep.sort_by(|x, y| y.0.total_cmp(&x.0));
    let rises = sweep.windows(2).filter(|w| w[1].1 > w[0].1).count();
    let shown: Vec<String> = sweep.iter().map(|(t, v)| format!("T={t}: {v:.2}%")).collect();
    let drop = a
        .leakage
        .iter()
        .find(|l| (l.adversary, l.strategy, l.prior) == HEADLINE && l.temperature == 0.05)
        .and_then(|l| l.relative_reduction)
        .ok_or("no leakage row at T=0.05")?;
    let detail = format!("relative drop at T=0.05 {drop:.1}%, sweep [{}]", shown.join(", "));
    ensure(drop >= 30.0, || format!("drop under 30%: {detail}"))?;
    ensure(a.service_preserved, || format!("service accuracy changed: {detail}"))?;
    ensure(rises <= 1, || format!("{rises} non-monotone steps: {detail}"))?;
    Ok(detail)
}

fn predictability_correlation(r: &ExperimentReport) -> Check {
    let c = r
        .analysis
        .as_ref()
        .and_then(|a| a.correlations.predictability.as_ref())
        .ok_or("no predictability study")?;
    let detail = format!("r = {:.3}, permutation p = {:.4} over {} users", c.r, c.p_value, c.n);
    ensure(c.n >= 20 && c.r >= 0.3 && c.p_value <= 0.05, || detail.clone())?;
    Ok(detail)
}

fn phase_costs(r: &ExperimentReport) -> Check {
    let c = r.analysis.as_ref().and_then(|a| a.phase_costs.as_ref()).ok_or("no phase costs")?;
    let detail = format!(
        "general {:.1}s CPU vs slowest personalization {:.2}s CPU, ratio {:.1}",
        c.general_cpu_seconds, c.max_personalization_cpu_seconds, c.ratio
    );
    ensure(c.ratio >= 10.0, || detail.clone())?;
    Ok(detail)
}

fn report_csvs(root: &Path) -> Vec<String> {
    let mut v = vec!["reports/attack.csv".to_string()];
    if let Ok(entries) = fs::read_dir(root.join("reports/plots")) {
        let mut plots: Vec<String> =
            entries.flatten().map(|e| format!("reports/plots/{}", e.file_name().to_string_lossy())).collect();
        plots.sort();
        v.extend(plots);
    }
    v
}

fn determinism(first: &Pipeline, a: &Path, b: &Path, total: [Duration; 2]) -> Check {
    let files = report_csvs(a);
    for f in &files {
        let x = fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, || format!("{f} differs between the two runs"))?;
    }
    let general = first.general().ok_or("no general model")?;
    let users = first.users().ok_or("no users")?;
    let mut models = 0;
    for u in users {
        let pairs: Vec<_> = u.test_windows.iter().map(|w| (w.prev2, w.prev1)).collect();
        for &m in &first.cfg.methods {
            let mem = first.personal_model(&u.user_id, m).ok_or("missing model")?;
            let disk = load_model(a.join(format!("models/{}_{m}.json", u.user_id))).map_err(|e| e.to_string())?;
            let (x, y) = (mem.forward(&general.vocab, &pairs, 1.0), disk.forward(&general.vocab, &pairs, 1.0));
            let (x, y) = (x.map_err(|e| e.to_string())?, y.map_err(|e| e.to_string())?);
            ensure(x == y, || format!("{} {m} forward changed after reload", u.user_id))?;
            models += 1;
        }
    }
    let slowest = total[0].max(total[1]).as_secs_f64();
    let detail = format!(
        "{} CSVs byte-identical, {models} models round-trip exactly, slowest run {slowest:.0}s",
        files.len()
    );
    ensure(slowest <= 30.0 * 60.0, || format!("over 30 min: {detail}"))?;
    Ok(detail)
}

fn run_desk(dir: &Path) -> (Result<Pipeline, String>, Duration) {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::desk();
    cfg.output_dir = Some(dir.to_path_buf());
    let p = Pipeline::new(cfg).and_then(|mut p| p.run_all().map(|_| p));
    (p.map_err(|e| e.to_string()), start.elapsed())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut outcomes = vec![
        timed(1, "gradient correctness", Some(Duration::from_secs(120)), common::gradient_check),
        timed(2, "temperature properties", None, || {
            all(&[common::softmax_population, common::handle_rankings, common::one_hot_at_low_temperature])
        }),
        timed(3, "attack oracle equivalence", Some(Duration::from_secs(300)), common::oracle_equivalence),
    ];

    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let (first, t1) = run_desk(a.path());
    let (second, t2) = run_desk(b.path());
    let stage = |p: &Pipeline, names: &[&str]| -> f64 {
        names.iter().filter_map(|n| p.report.stage_seconds.get(*n)).sum()
    };

    type Criterion<'a> = (u8, &'static str, Box<dyn FnOnce(&Pipeline) -> Check + 'a>);
    let desk: Vec<Criterion> = vec![
        (4, "attack efficacy", Box::new(|p| {
            attack_efficacy(&p.report, stage(p, &["synth", "train-general", "personalize", "defend-eval"]))
        })),
        (5, "personalization benefit", Box::new(|p| personalization_benefit(&p.report))),
        (6, "defense efficacy", Box::new(|p| defense_efficacy(&p.report))),
        (7, "predictability correlation", Box::new(|p| predictability_correlation(&p.report))),
        (8, "phase-cost ordering", Box::new(|p| phase_costs(&p.report))),
        (9, "determinism and serialization", Box::new(|p| determinism(p, a.path(), b.path(), [t1, t2]))),
    ];
    for (id, name, check) in desk {
        let o = match (&first, &second) {
            (Ok(p), Ok(_)) => timed(id, name, None, || check(p)),
            (Err(e), _) | (_, Err(e)) => timed(id, name, None, || Err(format!("desk run failed: {e}"))),
        };
        outcomes.push(o);
    }

    let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
