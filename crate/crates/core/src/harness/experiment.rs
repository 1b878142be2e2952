//! End-to-end experiment: phases, attack grid, defense sweep and reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attack::{attack_user, AttackRow, CollapseRow, GridSpec, ServiceRow, UserAttack};
use super::config::ExperimentConfig;
use super::metrics::{correlate, leakage_reduction, Correlation};
use super::phases::{
    phase_initial_training, phase_personalize, prepare_user, update_study, user_seed, Cost, GeneralInfo,
    GeneralModel, TopK, UpdateOutcome, UserData,
};
use crate::error::{Error, Result};
use crate::inversion::{write_attack_csv, AdversaryKind, AttackReport, PriorMode, Strategy};
use crate::personalize::{PersonalizationMethod, PersonalizeConfig};
use crate::seqnet::{load_model, load_model_for, save_model, SeqModel};
use crate::synth::{generate_cohort, generate_user, ingest_csv, write_csv_file, CohortRole};
use crate::trace::{DomainVocab, Trace};

/// Synthetic traces of one experiment.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub contributors: Vec<Trace>,
    pub targets: Vec<Trace>,
    /// Extra targets of the predictability study.
    pub study: Vec<Trace>,
}

/// Predictability assigned to each study user, evenly spaced.
pub fn study_levels(cfg: &ExperimentConfig) -> Vec<f64> {
    let Some(s) = &cfg.study else { return Vec::new() };
    let (lo, hi) = s.predictability;
    (0..s.n_users)
        .map(|i| lo + (hi - lo) * i as f64 / (s.n_users - 1) as f64)
        .collect()
}

pub fn synthesize(cfg: &ExperimentConfig) -> Result<Cohort> {
    let (contributors, targets) = generate_cohort(&cfg.cohort)?;
    let spec = &cfg.cohort;
    let study = study_levels(cfg)
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut profile = spec.sample_profile(CohortRole::Target, spec.n_targets + i);
            profile.user_id = format!("s{i:03}");
            profile.predictability = p;
            generate_user(&profile, spec.weeks, spec.start_date)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        contributors,
        targets,
        study,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalRow {
    pub user: String,
    pub method: PersonalizationMethod,
    pub mobility_degree: usize,
    pub train_windows: usize,
    pub test_windows: usize,
    pub train_accuracy: TopK,
    pub test_accuracy: TopK,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub user: String,
    pub predictability: f64,
    pub mobility_degree: usize,
    pub model_top1: f64,
    pub attack_top1: f64,
}

/// Pooled accuracy of one (adversary, strategy, prior, temperature) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub adversary: AdversaryKind,
    pub strategy: Strategy,
    pub prior: PriorMode,
    pub temperature: f64,
    pub white_box: bool,
    pub users: usize,
    pub trials: usize,
    /// `(k, accuracy)` per configured k.
    pub accuracy: Vec<(usize, f64)>,
    /// Expected accuracy of a uniform guess among each user's candidates.
    pub random_baseline: Vec<(usize, f64)>,
    pub queries: u64,
    pub runtime_seconds: f64,
}

impl CellSummary {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.accuracy.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }

    pub fn baseline_at(&self, k: usize) -> Option<f64> {
        self.random_baseline.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub adversary: AdversaryKind,
    pub strategy: Strategy,
    pub prior: PriorMode,
    pub temperature: f64,
    pub undefended_top1: f64,
    pub defended_top1: f64,
    pub absolute_drop: f64,
    /// Relative reduction in percent; absent when nothing leaked undefended.
    pub relative_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub temperature: f64,
    pub windows: usize,
    pub mean_fraction: f64,
    pub min_fraction: f64,
    /// Share of windows where at least 90% of candidate scores hit an extreme.
    pub windows_at_90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCosts {
    pub general_cpu_seconds: f64,
    pub max_personalization_cpu_seconds: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    /// Distinct locations per target against headline attack top-1.
    pub mobility: Option<Correlation>,
    /// Personal-model test top-1 per target against headline attack top-1.
    pub model_accuracy: Option<Correlation>,
    /// The same over the predictability-study users.
    pub predictability: Option<Correlation>,
}

/// Figures derived from the raw rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub cells: Vec<CellSummary>,
    pub leakage: Vec<LeakageRow>,
    /// Every user's service top-k through the handle is bit-identical across temperatures.
    pub service_preserved: bool,
    pub collapse: Vec<CollapseSummary>,
    /// Brute-force over time-based wall clock per adversary at temperature 1.
    pub speedups: Vec<(AdversaryKind, f64)>,
    pub phase_costs: Option<PhaseCosts>,
    pub correlations: Correlations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub general: Option<GeneralInfo>,
    pub personalization: Vec<PersonalRow>,
    pub attacks: Vec<AttackRow>,
    pub service: Vec<ServiceRow>,
    pub collapse: Vec<CollapseRow>,
    pub updates: Vec<UpdateOutcome>,
    pub study: Vec<StudyRow>,
    pub analysis: Option<Analysis>,
    /// Wall-clock seconds per completed stage.
    pub stage_seconds: BTreeMap<String, f64>,
    /// Set when a phase failed and the report is partial.
    pub error: Option<String>,
}

impl ExperimentReport {
    pub fn new(config: ExperimentConfig) -> Self {
        ExperimentReport {
            config,
            general: None,
            personalization: Vec::new(),
            attacks: Vec::new(),
            service: Vec::new(),
            collapse: Vec::new(),
            updates: Vec::new(),
            study: Vec::new(),
            analysis: None,
            stage_seconds: BTreeMap::new(),
            error: None,
        }
    }

    pub fn cell(&self, adversary: AdversaryKind, strategy: Strategy, prior: PriorMode, temperature: f64) -> Option<&CellSummary> {
        self.analysis.as_ref()?.cells.iter().find(|c| {
            c.adversary == adversary && c.strategy == strategy && c.prior == prior && c.temperature == temperature
        })
    }

    pub fn personal(&self, user: &str, method: PersonalizationMethod) -> Option<&PersonalRow> {
        self.personalization.iter().find(|r| r.user == user && r.method == method)
    }
}

/// The cell used for the headline and correlation figures.
pub const HEADLINE: (AdversaryKind, Strategy, PriorMode) = (AdversaryKind::A1, Strategy::TimeBased, PriorMode::True);

fn summarize_cells(report: &ExperimentReport) -> Vec<CellSummary> {
    let k_values = &report.config.attack.k_values;
    let candidates: BTreeMap<(String, u64), usize> = report
        .service
        .iter()
        .map(|s| ((s.user.clone(), s.temperature.to_bits()), s.candidates))
        .collect();
    let mut groups: Vec<((AdversaryKind, Strategy, PriorMode, u64), Vec<&AttackRow>)> = Vec::new();
    for r in &report.attacks {
        let key = (r.adversary, r.strategy, r.prior, r.temperature.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((adversary, strategy, prior, t), rows)| {
            let trials: usize = rows.iter().map(|r| r.trials).sum();
            let accuracy = k_values
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let hits: usize = rows.iter().map(|r| r.hits[i]).sum();
                    (k, 100.0 * hits as f64 / trials.max(1) as f64)
                })
                .collect();
            let random_baseline = k_values
                .iter()
                .map(|&k| {
                    let mut acc = 0.0;
                    for r in &rows {
                        let c = candidates.get(&(r.user.clone(), t)).copied().unwrap_or(1).max(1);
                        acc += r.trials as f64 * 100.0 * k.min(c) as f64 / c as f64;
                    }
                    (k, acc / trials.max(1) as f64)
                })
                .collect();
            CellSummary {
                adversary,
                strategy,
                prior,
                temperature: f64::from_bits(t),
                white_box: rows.iter().any(|r| r.white_box),
                users: rows.len(),
                trials,
                accuracy,
                random_baseline,
                queries: rows.iter().map(|r| r.queries).sum(),
                runtime_seconds: rows.iter().map(|r| r.runtime_seconds).sum(),
            }
        })
        .collect()
}

/// Fills `report.analysis` from the raw rows.
pub fn analyze(report: &mut ExperimentReport) -> Result<()> {
    let cells = summarize_cells(report);
    let undefended = |c: &CellSummary| {
        cells.iter().find(|u| {
            u.adversary == c.adversary && u.strategy == c.strategy && u.prior == c.prior && u.temperature == 1.0
        })
    };
    let leakage = cells
        .iter()
        .filter(|c| c.temperature != 1.0)
        .filter_map(|c| {
            let u = undefended(c)?;
            let (before, after) = (u.at(1)?, c.at(1)?);
            Some(LeakageRow {
                adversary: c.adversary,
                strategy: c.strategy,
                prior: c.prior,
                temperature: c.temperature,
                undefended_top1: before,
                defended_top1: after,
                absolute_drop: before - after,
                relative_reduction: leakage_reduction(before, after).ok(),
            })
        })
        .collect();

    let mut service_preserved = true;
    for s in &report.service {
        if let Some(base) = report.service.iter().find(|b| b.user == s.user && b.temperature == 1.0) {
            let same = s.accuracy.iter().zip(&base.accuracy).all(|(a, b)| a.to_bits() == b.to_bits());
            service_preserved &= same;
        }
    }

    let mut temps: Vec<f64> = report.collapse.iter().map(|c| c.temperature).collect();
    temps.dedup();
    temps.sort_by(|a, b| b.total_cmp(a));
    temps.dedup();
    let collapse = temps
        .into_iter()
        .map(|t| {
            let f: Vec<f64> = report
                .collapse
                .iter()
                .filter(|c| c.temperature == t)
                .flat_map(|c| c.fractions.iter().copied())
                .collect();
            let n = f.len().max(1) as f64;
            CollapseSummary {
                temperature: t,
                windows: f.len(),
                mean_fraction: f.iter().sum::<f64>() / n,
                min_fraction: f.iter().copied().fold(f64::INFINITY, f64::min),
                windows_at_90: f.iter().filter(|&&v| v >= 0.9).count() as f64 / n,
            }
        })
        .collect();

    let mut speedups = Vec::new();
    for &adv in &report.config.attack.adversaries {
        let rt = |s: Strategy| {
            cells
                .iter()
                .find(|c| c.adversary == adv && c.strategy == s && c.temperature == 1.0)
                .map(|c| c.runtime_seconds)
        };
        if let (Some(bf), Some(tb)) = (rt(Strategy::BruteForce), rt(Strategy::TimeBased)) {
            if tb > 0.0 {
                speedups.push((adv, bf / tb));
            }
        }
    }

    let phase_costs = report.general.as_ref().and_then(|g| {
        let max = report
            .personalization
            .iter()
            .map(|r| r.cost.cpu_seconds)
            .fold(f64::NEG_INFINITY, f64::max);
        (max > 0.0).then(|| PhaseCosts {
            general_cpu_seconds: g.cost.cpu_seconds,
            max_personalization_cpu_seconds: max,
            ratio: g.cost.cpu_seconds / max,
        })
    });

    let resamples = report.config.permutation_resamples;
    let seed = report.config.seeds.permutation;
    let (hk, hs, hp) = HEADLINE;
    let method = report.config.attack.method;
    let mut mobility = (Vec::new(), Vec::new());
    let mut model_acc = (Vec::new(), Vec::new());
    for r in report.attacks.iter().filter(|r| {
        r.adversary == hk && r.strategy == hs && r.prior == hp && r.temperature == 1.0 && r.trials > 0
    }) {
        if let Some(p) = report.personal(&r.user, method) {
            mobility.0.push(p.mobility_degree as f64);
            mobility.1.push(r.accuracy(0));
            model_acc.0.push(p.test_accuracy[0]);
            model_acc.1.push(r.accuracy(0));
        }
    }
    let study_x: Vec<f64> = report.study.iter().map(|s| s.model_top1).collect();
    let study_y: Vec<f64> = report.study.iter().map(|s| s.attack_top1).collect();
    let correlations = Correlations {
        mobility: correlate(&mobility.0, &mobility.1, resamples, seed).ok(),
        model_accuracy: correlate(&model_acc.0, &model_acc.1, resamples, seed).ok(),
        predictability: correlate(&study_x, &study_y, resamples, seed).ok(),
    };

    report.analysis = Some(Analysis {
        cells,
        leakage,
        service_preserved,
        collapse,
        speedups,
        phase_costs,
        correlations,
    });
    Ok(())
}

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.json"))
    }

    pub fn personal_model(&self, user: &str, method: PersonalizationMethod) -> PathBuf {
        self.model(&format!("{user}_{}", method.name()))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("reports").join("plots").join(format!("{name}.csv"))
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join("reports").join("stages").join(format!("{name}.json"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

/// Writes `summary.json` and the long-format plot tables.
pub fn write_report(layout: &Layout, report: &ExperimentReport) -> Result<()> {
    write_json(&layout.report("summary.json"), report)?;
    let Some(a) = &report.analysis else { return Ok(()) };

    let mut w = csv_writer(&layout.plot("attack_cells"))?;
    w.write_record(["adversary", "strategy", "prior", "temperature", "white_box", "k", "accuracy", "random_baseline", "trials", "queries"])?;
    for c in &a.cells {
        for (k, acc) in &c.accuracy {
            w.write_record([
                c.adversary.to_string(),
                c.strategy.name().to_string(),
                c.prior.name().to_string(),
                c.temperature.to_string(),
                c.white_box.to_string(),
                k.to_string(),
                f6(*acc),
                f6(c.baseline_at(*k).unwrap_or(f64::NAN)),
                c.trials.to_string(),
                c.queries.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv_writer(&layout.plot("temperature_sweep"))?;
    w.write_record(["adversary", "strategy", "prior", "temperature", "attack_top1", "attack_top3", "absolute_drop", "relative_reduction", "service_top1", "service_top3", "collapse_fraction"])?;
    for c in &a.cells {
        let lk = a.leakage.iter().find(|l| {
            l.adversary == c.adversary && l.strategy == c.strategy && l.prior == c.prior && l.temperature == c.temperature
        });
        let service: Vec<&ServiceRow> = report.service.iter().filter(|s| s.temperature == c.temperature).collect();
        let mean = |i: usize| service.iter().map(|s| s.accuracy[i]).sum::<f64>() / service.len().max(1) as f64;
        let collapse = a.collapse.iter().find(|s| s.temperature == c.temperature);
        w.write_record([
            c.adversary.to_string(),
            c.strategy.name().to_string(),
            c.prior.name().to_string(),
            c.temperature.to_string(),
            f6(c.at(1).unwrap_or(f64::NAN)),
            f6(c.at(3).unwrap_or(f64::NAN)),
            lk.map_or_else(|| f6(0.0), |l| f6(l.absolute_drop)),
            lk.and_then(|l| l.relative_reduction).map_or_else(|| "".into(), f6),
            f6(mean(0)),
            f6(mean(2)),
            collapse.map_or_else(String::new, |s| f6(s.mean_fraction)),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&layout.plot("personalization"))?;
    w.write_record(["user", "method", "mobility_degree", "train_windows", "test_windows", "train_top1", "train_top2", "train_top3", "test_top1", "test_top2", "test_top3"])?;
    for r in &report.personalization {
        let mut rec = vec![
            r.user.clone(),
            r.method.name().to_string(),
            r.mobility_degree.to_string(),
            r.train_windows.to_string(),
            r.test_windows.to_string(),
        ];
        rec.extend(r.train_accuracy.iter().chain(&r.test_accuracy).map(|v| f6(*v)));
        w.write_record(rec)?;
    }
    w.flush()?;

    let mut w = csv_writer(&layout.plot("predictability"))?;
    w.write_record(["user", "predictability", "mobility_degree", "model_top1", "attack_top1"])?;
    for s in &report.study {
        w.write_record([
            s.user.clone(),
            f6(s.predictability),
            s.mobility_degree.to_string(),
            f6(s.model_top1),
            f6(s.attack_top1),
        ])?;
    }
    w.flush()?;

    let mut w = csv_writer(&layout.plot("update"))?;
    w.write_record(["user", "method", "stage", "windows", "train_top1", "test_top1", "test_top3", "gap_top1"])?;
    for u in &report.updates {
        for (stage, n, tr, te) in [
            ("initial", u.initial_windows, u.initial_train, u.initial_test),
            ("updated", u.updated_windows, u.updated_train, u.updated_test),
        ] {
            w.write_record([
                u.user.clone(),
                u.method.name().to_string(),
                stage.to_string(),
                n.to_string(),
                f6(tr[0]),
                f6(te[0]),
                f6(te[2]),
                f6(tr[0] - te[0]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_attack_reports(layout: &Layout, reports: &[AttackReport], vocab: &DomainVocab) -> Result<()> {
    let path = layout.report("attack.csv");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_attack_csv(reports, vocab, fs::File::create(path)?)
}

fn personalize_cfg(cfg: &ExperimentConfig, user_index: usize) -> PersonalizeConfig {
    let mut p = cfg.personalize.clone();
    p.train.seed = user_seed(cfg.seeds.personalize, user_index);
    p
}

/// Pipeline state shared by the CLI stages and the full run.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: Option<Layout>,
    pub report: ExperimentReport,
    cohort: Option<Cohort>,
    general: Option<GeneralModel>,
    users: Option<Vec<UserData>>,
    personal: BTreeMap<(String, PersonalizationMethod), SeqModel>,
    attack_reports: Vec<AttackReport>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.output_dir.clone().map(Layout::new);
        Ok(Pipeline {
            report: ExperimentReport::new(cfg.clone()),
            cfg,
            layout,
            cohort: None,
            general: None,
            users: None,
            personal: BTreeMap::new(),
            attack_reports: Vec::new(),
        })
    }

    pub fn general(&self) -> Option<&GeneralModel> {
        self.general.as_ref()
    }

    pub fn users(&self) -> Option<&[UserData]> {
        self.users.as_deref()
    }

    pub fn personal_model(&self, user: &str, method: PersonalizationMethod) -> Option<&SeqModel> {
        self.personal.get(&(user.to_string(), method))
    }

    pub fn attack_reports(&self) -> &[AttackReport] {
        &self.attack_reports
    }

    /// Generates the cohort, or reads it back from `data/` when present.
    pub fn cohort(&mut self) -> Result<&Cohort> {
        if self.cohort.is_none() {
            let on_disk = self.layout.as_ref().map(|l| l.data("contributors.csv")).filter(|p| p.exists());
            let cohort = match (&self.layout, on_disk) {
                (Some(l), Some(_)) => {
                    let study = l.data("study.csv");
                    Cohort {
                        contributors: ingest_csv(&l.data("contributors.csv"))?,
                        targets: ingest_csv(&l.data("targets.csv"))?,
                        study: if study.exists() { ingest_csv(&study)? } else { Vec::new() },
                    }
                }
                _ => synthesize(&self.cfg)?,
            };
            self.cohort = Some(cohort);
        }
        Ok(self.cohort.as_ref().expect("just set"))
    }

    pub fn stage_synth(&mut self) -> Result<()> {
        let cohort = synthesize(&self.cfg)?;
        if let Some(l) = &self.layout {
            fs::create_dir_all(l.root.join("data"))?;
            write_csv_file(&cohort.contributors, &l.data("contributors.csv"))?;
            write_csv_file(&cohort.targets, &l.data("targets.csv"))?;
            if !cohort.study.is_empty() {
                write_csv_file(&cohort.study, &l.data("study.csv"))?;
            }
        }
        info!(
            "synthesized {} contributors, {} targets, {} study users",
            cohort.contributors.len(),
            cohort.targets.len(),
            cohort.study.len()
        );
        self.cohort = Some(cohort);
        Ok(())
    }

    pub fn stage_general(&mut self) -> Result<()> {
        let contributors = self.cohort()?.contributors.clone();
        let g = phase_initial_training(&contributors, &self.cfg)?;
        info!(
            "general model: {} locations, test top-1 {:.2}%, {:.1}s CPU",
            g.info.locations, g.info.test_accuracy[0], g.info.cost.cpu_seconds
        );
        if let Some(l) = &self.layout {
            write_json(&l.model("vocab"), &g.vocab)?;
            save_model(&g.model, l.model("general"))?;
            write_json(&l.stage("general"), &g.info)?;
        }
        self.report.general = Some(g.info.clone());
        self.general = Some(g);
        self.users = None;
        Ok(())
    }

    fn ensure_general(&mut self) -> Result<()> {
        if self.general.is_some() {
            return Ok(());
        }
        let Some(l) = &self.layout else {
            return self.stage_general();
        };
        if !l.model("general").exists() {
            return self.stage_general();
        }
        let vocab: DomainVocab = read_json(&l.model("vocab"))?;
        let model = load_model_for(l.model("general"), &vocab)?;
        let info: GeneralInfo = read_json(&l.stage("general"))?;
        if info.fingerprint != model.fingerprint() {
            return Err(Error::contract("general model on disk does not match its stage record"));
        }
        self.report.general = Some(info.clone());
        self.general = Some(GeneralModel { vocab, model, info });
        Ok(())
    }

    fn ensure_users(&mut self) -> Result<()> {
        self.ensure_general()?;
        if self.users.is_none() {
            let vocab = self.general.as_ref().expect("ensured").vocab.clone();
            let frac = self.cfg.train_fraction;
            let targets = self.cohort()?.targets.clone();
            let users = targets
                .iter()
                .map(|t| prepare_user(t, &vocab, frac))
                .collect::<Result<Vec<_>>>()?;
            self.users = Some(users);
        }
        Ok(())
    }

    pub fn stage_personalize(&mut self) -> Result<()> {
        self.ensure_users()?;
        let general = self.general.as_ref().expect("ensured");
        let users = self.users.as_ref().expect("ensured");
        let jobs: Vec<(usize, PersonalizationMethod)> = (0..users.len())
            .flat_map(|i| self.cfg.methods.iter().map(move |&m| (i, m)))
            .collect();
        let cfg = &self.cfg;
        let results = jobs
            .par_iter()
            .map(|&(i, m)| phase_personalize(general, &users[i], m, &personalize_cfg(cfg, i)))
            .collect::<Result<Vec<_>>>()?;
        self.report.personalization.clear();
        for (p, &(i, _)) in results.into_iter().zip(&jobs) {
            let u = &users[i];
            self.report.personalization.push(PersonalRow {
                user: p.user_id.clone(),
                method: p.method,
                mobility_degree: u.mobility_degree,
                train_windows: u.train_windows.len(),
                test_windows: u.test_windows.len(),
                train_accuracy: p.train_accuracy,
                test_accuracy: p.test_accuracy,
                cost: p.cost,
            });
            if let Some(l) = &self.layout {
                save_model(&p.model, l.personal_model(&p.user_id, p.method))?;
            }
            self.personal.insert((p.user_id, p.method), p.model);
        }
        if let Some(l) = &self.layout {
            write_json(&l.stage("personalize"), &self.report.personalization)?;
        }
        Ok(())
    }

    fn ensure_personal(&mut self, method: PersonalizationMethod) -> Result<()> {
        self.ensure_users()?;
        let ids: Vec<String> = self.users.as_ref().expect("ensured").iter().map(|u| u.user_id.clone()).collect();
        if ids.iter().all(|u| self.personal.contains_key(&(u.clone(), method))) {
            return Ok(());
        }
        let on_disk = self
            .layout
            .as_ref()
            .is_some_and(|l| ids.iter().all(|u| l.personal_model(u, method).exists()) && l.stage("personalize").exists());
        if !on_disk {
            return self.stage_personalize();
        }
        let l = self.layout.clone().expect("checked");
        let general = self.general.as_ref().expect("ensured");
        for u in ids {
            let m = load_model(l.personal_model(&u, method))?;
            m.check_vocab(&general.vocab)?;
            self.personal.insert((u, method), m);
        }
        if self.report.personalization.is_empty() {
            self.report.personalization = read_json(&l.stage("personalize"))?;
        }
        Ok(())
    }

    /// Runs the attack grid against every target's deployed model at `temperatures`.
    pub fn stage_attack(&mut self, temperatures: &[f64], stage_name: &str) -> Result<()> {
        let method = self.cfg.attack.method;
        self.ensure_personal(method)?;
        let general = self.general.as_ref().expect("ensured");
        let users = self.users.as_ref().expect("ensured");
        let a = &self.cfg.attack;
        let spec = GridSpec {
            settings: a,
            adversaries: &a.adversaries,
            strategies: &a.strategies,
            sweep_strategies: &a.sweep_strategies,
            priors: &a.priors,
            temperatures,
            seeds: &self.cfg.seeds,
            collapse: true,
        };
        let personal = &self.personal;
        let results: Vec<UserAttack> = users
            .par_iter()
            .enumerate()
            .map(|(i, u)| {
                let model = &personal[&(u.user_id.clone(), method)];
                attack_user(&spec, &general.vocab, u, i, model)
            })
            .collect::<Result<_>>()?;
        self.report.attacks.clear();
        self.report.service.clear();
        self.report.collapse.clear();
        self.attack_reports.clear();
        for r in results {
            self.report.attacks.extend(r.rows);
            self.report.service.extend(r.service);
            self.report.collapse.extend(r.collapse);
            self.attack_reports.extend(r.reports);
        }
        if let Some(l) = &self.layout {
            write_attack_reports(l, &self.attack_reports, &general.vocab)?;
            write_json(
                &l.stage(stage_name),
                &(&self.report.attacks, &self.report.service, &self.report.collapse),
            )?;
        }
        Ok(())
    }

    pub fn stage_update(&mut self) -> Result<()> {
        let Some(settings) = self.cfg.update.clone() else {
            return Ok(());
        };
        self.ensure_users()?;
        let general = self.general.as_ref().expect("ensured");
        let users = self.users.as_ref().expect("ensured");
        let jobs: Vec<(usize, PersonalizationMethod)> = (0..users.len())
            .flat_map(|i| settings.methods.iter().map(move |&m| (i, m)))
            .collect();
        let cfg = &self.cfg;
        self.report.updates = jobs
            .par_iter()
            .map(|&(i, m)| update_study(general, &users[i], m, &settings, &personalize_cfg(cfg, i)))
            .collect::<Result<_>>()?;
        if let Some(l) = &self.layout {
            write_json(&l.stage("update"), &self.report.updates)?;
        }
        Ok(())
    }

    /// Personalizes and attacks the predictability-study users.
    pub fn stage_study(&mut self) -> Result<()> {
        let Some(study) = self.cfg.study.clone() else {
            return Ok(());
        };
        self.ensure_general()?;
        let traces = self.cohort()?.study.clone();
        let levels = study_levels(&self.cfg);
        if traces.len() != levels.len() {
            return Err(Error::input(format!(
                "{} study traces for {} configured study users",
                traces.len(),
                levels.len()
            )));
        }
        let general = self.general.as_ref().expect("ensured");
        let cfg = &self.cfg;
        let offset = cfg.cohort.n_targets;
        let spec = GridSpec {
            settings: &cfg.attack,
            adversaries: &[study.adversary],
            strategies: &[study.strategy],
            sweep_strategies: &[],
            priors: &[study.prior],
            temperatures: &[1.0],
            seeds: &cfg.seeds,
            collapse: false,
        };
        self.report.study = traces
            .par_iter()
            .zip(levels)
            .enumerate()
            .map(|(i, (t, level))| -> Result<StudyRow> {
                let u = prepare_user(t, &general.vocab, cfg.train_fraction)?;
                let p = phase_personalize(general, &u, cfg.attack.method, &personalize_cfg(cfg, offset + i))?;
                let att = attack_user(&spec, &general.vocab, &u, offset + i, &p.model)?;
                Ok(StudyRow {
                    user: u.user_id.clone(),
                    predictability: level,
                    mobility_degree: u.mobility_degree,
                    model_top1: p.test_accuracy[0],
                    attack_top1: att.rows[0].accuracy(0),
                })
            })
            .collect::<Result<_>>()?;
        if let Some(l) = &self.layout {
            write_json(&l.stage("study"), &self.report.study)?;
        }
        Ok(())
    }

    /// Merges whatever stage records exist on disk into the report and writes it.
    pub fn stage_report(&mut self) -> Result<()> {
        if let Some(l) = self.layout.clone() {
            if self.report.general.is_none() && l.stage("general").exists() {
                self.report.general = Some(read_json(&l.stage("general"))?);
            }
            if self.report.personalization.is_empty() && l.stage("personalize").exists() {
                self.report.personalization = read_json(&l.stage("personalize"))?;
            }
            if self.report.attacks.is_empty() {
                for name in ["defense", "attack"] {
                    if l.stage(name).exists() {
                        let (a, s, c): (Vec<AttackRow>, Vec<ServiceRow>, Vec<CollapseRow>) = read_json(&l.stage(name))?;
                        self.report.attacks = a;
                        self.report.service = s;
                        self.report.collapse = c;
                        break;
                    }
                }
            }
            if self.report.updates.is_empty() && l.stage("update").exists() {
                self.report.updates = read_json(&l.stage("update"))?;
            }
            if self.report.study.is_empty() && l.stage("study").exists() {
                self.report.study = read_json(&l.stage("study"))?;
            }
        }
        analyze(&mut self.report)?;
        if let Some(l) = &self.layout {
            write_report(l, &self.report)?;
        }
        Ok(())
    }

    fn timed(&mut self, name: &str, stage: impl FnOnce(&mut Self) -> Result<()>) -> Result<()> {
        info!("stage {name}");
        let start = std::time::Instant::now();
        stage(self)?;
        self.report.stage_seconds.insert(name.to_string(), start.elapsed().as_secs_f64());
        Ok(())
    }

    fn flush_partial(&mut self, e: &Error) {
        self.report.error = Some(e.to_string());
        if let Some(l) = &self.layout {
            if let Err(w) = write_json(&l.report("summary.json"), &self.report) {
                log::error!("could not write the partial report: {w}");
            }
        }
    }

    /// Every phase in order; on failure the partial report is flushed.
    pub fn run_all(&mut self) -> Result<()> {
        let temps = self.cfg.attack.temperatures.clone();
        let mut steps = || -> Result<()> {
            self.timed("synth", Pipeline::stage_synth)?;
            self.timed("train-general", Pipeline::stage_general)?;
            self.timed("personalize", Pipeline::stage_personalize)?;
            self.timed("defend-eval", |p| p.stage_attack(&temps, "defense"))?;
            self.timed("update", Pipeline::stage_update)?;
            self.timed("study", Pipeline::stage_study)?;
            self.stage_report()
        };
        let outcome = steps();
        if let Err(e) = &outcome {
            self.flush_partial(e);
        }
        outcome
    }
}

/// Runs the full pipeline and returns its report.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<ExperimentReport> {
    let mut p = Pipeline::new(cfg)?;
    p.run_all()?;
    Ok(p.report)
}
