use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::train::{evaluate, prepare_data, train_seed, Aggregate, EpochRecord, Metrics, PreparedData, SeedReport};
use super::RunConfig;
use crate::baselines::{Generator, GeneratorKind};
use crate::error::{Error, Result};
use crate::par::ExecMode;
use crate::plm::{Adaptation, PlmModel};
use crate::props::{rule_usage_stats, UsageStats};
use crate::tasks::{self, TaskKind, BRIDGE_TARGET};
use crate::theory::{theory_table, TheoryTable};

/// Tasks in the ablation pair.
pub const ABLATION_T: usize = 2;

fn run_seeds(
    cfg: &RunConfig,
    plm: &PlmModel,
    data: &PreparedData,
    mode: ExecMode,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<(SeedReport, Generator)>> {
    cfg.seeds
        .iter()
        .map(|&s| train_seed(cfg, plm, data, s, mode, log))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub n: usize,
    pub k: usize,
    pub tk: usize,
    pub theory: f64,
    /// Test exact match per seed.
    pub scores: Vec<f64>,
    pub score: Aggregate,
    /// For `k = N`: whether every traced selection used all rules.
    pub all_rules_selected: Option<bool>,
    pub seeds: Vec<SeedReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub theory: TheoryTable,
    pub cells: Vec<AblationCell>,
    /// Cells with `k > N`, skipped.
    pub skipped: Vec<(usize, usize)>,
}

impl AblationReport {
    /// Mean test exact match on the theory grid; `None` where skipped.
    pub fn experiment_panel(&self) -> Vec<Vec<Option<f64>>> {
        self.theory
            .ns
            .iter()
            .map(|&n| {
                self.theory
                    .tks
                    .iter()
                    .map(|&tk| self.cells.iter().find(|c| c.n == n && c.tk == tk).map(|c| c.score.mean))
                    .collect()
            })
            .collect()
    }

    /// Both panels side by side: `N,theory Tk=..,...,experiment Tk=..,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N");
        for tk in &self.theory.tks {
            let _ = write!(out, ",theory Tk={tk}");
        }
        for tk in &self.theory.tks {
            let _ = write!(out, ",experiment Tk={tk}");
        }
        out.push('\n');
        for (i, (n, exp)) in self.theory.ns.iter().zip(self.experiment_panel()).enumerate() {
            let _ = write!(out, "{n}");
            for v in &self.theory.cells[i] {
                let _ = write!(out, ",{v:.17}");
            }
            for v in exp {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v:.4}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one ProPS cell per `(N, k)` on the two-task pair and sets the
/// mean test exact match beside `1 − P(N, k, T)`. Cells with `k > N`
/// are skipped.
pub fn run_ablation_kn(
    base: &RunConfig,
    plm: &PlmModel,
    ns: &[usize],
    ks: &[usize],
    mode: ExecMode,
    log: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    let tks: Vec<usize> = ks.iter().map(|k| ABLATION_T * k).collect();
    let theory = theory_table(ns, &tks);
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for (i, &n) in ns.iter().enumerate() {
        for (j, &k) in ks.iter().enumerate() {
            if k > n {
                log(&format!("skipping N={n} k={k}: k exceeds N"));
                skipped.push((n, k));
                continue;
            }
            let cfg = RunConfig {
                generator: GeneratorKind::Props,
                task: TaskKind::Pair,
                n_rules: n,
                k,
                ..base.clone()
            };
            cfg.validate()?;
            let data = prepare_data(&cfg, GeneratorKind::Props)?;
            let runs = run_seeds(&cfg, plm, &data, mode, &mut |_| {})?;
            let all_rules_selected = if k == n {
                let adapt = Adaptation::all(plm.config());
                let mut ok = true;
                for (_, gen) in &runs {
                    let out = evaluate(plm, gen, &adapt, &data.test, mode)?;
                    ok &= out
                        .traces
                        .iter()
                        .flat_map(|(_, t)| t)
                        .all(|t| t.chosen.iter().collect::<BTreeSet<_>>().len() == n);
                }
                Some(ok)
            } else {
                None
            };
            let scores: Vec<f64> = runs.iter().map(|(r, _)| r.test.exact_match).collect();
            log(&format!(
                "N={n} k={k}: theory {:.2}, exact match {scores:?}",
                theory.cells[i][j]
            ));
            cells.push(AblationCell {
                n,
                k,
                tk: tks[j],
                theory: theory.cells[i][j],
                score: Aggregate::of(&scores),
                scores,
                all_rules_selected,
                seeds: runs.into_iter().map(|(r, _)| r).collect(),
            });
        }
    }
    Ok(AblationReport { theory, cells, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationRun {
    pub seed: u64,
    pub usage: UsageStats,
    /// Most frequent first-round rule per task, in `usage.tasks` order.
    pub top_rule: Vec<usize>,
    /// Share of each task's examples routed to its top rule.
    pub concentration: Vec<f64>,
    pub distinct: bool,
    pub separated: bool,
    pub test: Metrics,
    pub report: SeedReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub runs: Vec<SeparationRun>,
    pub successes: usize,
    pub threshold: f64,
}

impl SeparationReport {
    pub fn verdict(&self) -> String {
        format!("{}/{}", self.successes, self.runs.len())
    }

    /// One usage block per seed.
    pub fn to_csv(&self) -> String {
        let n = self
            .runs
            .first()
            .and_then(|r| r.usage.counts.first())
            .map_or(0, Vec::len);
        let mut out = String::from("seed,task");
        for i in 0..n {
            let _ = write!(out, ",rule{i}");
        }
        out.push_str(",top_rule,concentration,entropy\n");
        for r in &self.runs {
            for (t, task) in r.usage.tasks.iter().enumerate() {
                let _ = write!(out, "{},{task}", r.seed);
                for c in &r.usage.counts[t] {
                    let _ = write!(out, ",{c}");
                }
                let _ = writeln!(
                    out,
                    ",{},{:.4},{:.4}",
                    r.top_rule[t], r.concentration[t], r.usage.entropy[t]
                );
            }
        }
        out
    }
}

/// Routing share required of each task's top rule.
pub const SEPARATION_THRESHOLD: f64 = 0.95;

/// Trains ProPS on the four rule-separation tasks (instruction-only
/// conditions) and inspects noise-free rule routing on the test rows.
pub fn run_rule_separation(
    base: &RunConfig,
    plm: &PlmModel,
    mode: ExecMode,
    log: &mut dyn FnMut(&EpochRecord),
) -> Result<SeparationReport> {
    let cfg = RunConfig {
        generator: GeneratorKind::Props,
        task: TaskKind::RuleSep,
        ..base.clone()
    };
    cfg.validate()?;
    let data = prepare_data(&cfg, GeneratorKind::Props)?;
    let adapt = Adaptation::all(plm.config());
    let mut runs = Vec::new();
    for (report, gen) in run_seeds(&cfg, plm, &data, mode, log)? {
        let out = evaluate(plm, &gen, &adapt, &data.test, mode)?;
        let usage = rule_usage_stats(
            cfg.n_rules,
            out.traces
                .iter()
                .flat_map(|(task, ts)| ts.iter().map(move |t| (task.as_str(), t))),
        );
        let mut first = vec![vec![0usize; cfg.n_rules]; usage.tasks.len()];
        for (task, ts) in &out.traces {
            let row = usage.tasks.iter().position(|t| t == task).expect("task counted");
            if let Some(&r) = ts.iter().find(|t| t.layer == 0).and_then(|t| t.chosen.first()) {
                first[row][r] += 1;
            }
        }
        let top_rule: Vec<usize> = first
            .iter()
            .map(|row| {
                (0..row.len())
                    .max_by_key(|&i| (row[i], std::cmp::Reverse(i)))
                    .unwrap_or(0)
            })
            .collect();
        let concentration: Vec<f64> = first
            .iter()
            .zip(&top_rule)
            .map(|(row, &r)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[r] as f64 / total as f64
                }
            })
            .collect();
        let distinct = top_rule.iter().collect::<BTreeSet<_>>().len() == top_rule.len();
        let separated = distinct && concentration.iter().all(|&c| c >= SEPARATION_THRESHOLD);
        runs.push(SeparationRun {
            seed: report.seed,
            usage,
            top_rule,
            concentration,
            distinct,
            separated,
            test: out.metrics,
            report,
        });
    }
    Ok(SeparationReport {
        successes: runs.iter().filter(|r| r.separated).count(),
        runs,
        threshold: SEPARATION_THRESHOLD,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRow {
    pub n_bridges: usize,
    pub pairs: Vec<String>,
    /// Target rows in the training split.
    pub target_train_rows: usize,
    pub exact_match: Aggregate,
    pub token_accuracy: Aggregate,
    pub delta_exact_match: f64,
    pub delta_token_accuracy: f64,
    pub seeds: Vec<SeedReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub target: String,
    pub rows: Vec<BridgeRow>,
}

impl BridgeReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("bridges,pairs,target_train_rows,em_mean,em_std,tok_mean,tok_std,delta_em,delta_tok\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:+.4},{:+.4}",
                r.n_bridges,
                r.pairs.join(" "),
                r.target_train_rows,
                r.exact_match.mean,
                r.exact_match.std,
                r.token_accuracy.mean,
                r.token_accuracy.std,
                r.delta_exact_match,
                r.delta_token_accuracy
            );
        }
        out
    }
}

/// Target-pair scores with 0, 2 and 3 bridge pairs added to training.
/// Deltas are relative to the no-bridge row.
pub fn run_bridge(base: &RunConfig, plm: &PlmModel, mode: ExecMode, log: &mut dyn FnMut(&str)) -> Result<BridgeReport> {
    let target = format!("{}-{}", BRIDGE_TARGET.0, BRIDGE_TARGET.1);
    let adapt = Adaptation::all(plm.config());
    let mut rows: Vec<BridgeRow> = Vec::new();
    for n_bridges in [0, 2, 3] {
        let cfg = RunConfig {
            task: TaskKind::Bridge,
            n_bridges,
            ..base.clone()
        };
        cfg.validate()?;
        let ds = tasks::build_dataset(&cfg.task_spec())?;
        let pairs: Vec<String> = tasks::bridge_tasks(&tasks::Languages::new(cfg.world_seed), n_bridges)?
            .into_iter()
            .map(|t| t.id)
            .collect();
        let target_train_rows = ds.train.iter().chain(&ds.valid).filter(|e| e.task_id == target).count();
        if let Some(first) = rows.first() {
            if target_train_rows < first.target_train_rows {
                return Err(Error::Contract(format!(
                    "{n_bridges} bridges removed target rows ({target_train_rows} < {})",
                    first.target_train_rows
                )));
            }
        }
        let mut data = prepare_data(&cfg, cfg.generator)?;
        data.test.retain(|e| e.task_id == target);
        let mut ems = Vec::new();
        let mut toks = Vec::new();
        let mut seeds = Vec::new();
        for (report, gen) in run_seeds(&cfg, plm, &data, mode, &mut |_| {})? {
            let m = evaluate(plm, &gen, &adapt, &data.test, mode)?.metrics;
            ems.push(m.exact_match);
            toks.push(m.token_accuracy);
            seeds.push(report);
        }
        let exact_match = Aggregate::of(&ems);
        let token_accuracy = Aggregate::of(&toks);
        let (d_em, d_tok) = match rows.first() {
            Some(b) => (
                exact_match.mean - b.exact_match.mean,
                token_accuracy.mean - b.token_accuracy.mean,
            ),
            None => (0.0, 0.0),
        };
        log(&format!(
            "{n_bridges} bridges: target exact match {:.4}, token accuracy {:.4}",
            exact_match.mean, token_accuracy.mean
        ));
        rows.push(BridgeRow {
            n_bridges,
            pairs,
            target_train_rows,
            exact_match,
            token_accuracy,
            delta_exact_match: d_em,
            delta_token_accuracy: d_tok,
            seeds,
        });
    }
    Ok(BridgeReport { target, rows })
}
