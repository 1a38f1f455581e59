use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::SelectionTrace;

/// Per-task rule usage over a set of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub tasks: Vec<String>,
    /// `counts[task][rule]`: hard selections.
    pub counts: Vec<Vec<usize>>,
    /// Shannon entropy (nats) of each task's normalized usage.
    pub entropy: Vec<f64>,
    /// Jaccard overlap of the sets of first-round (top-1) rules per task pair.
    pub jaccard: Vec<Vec<f64>>,
}

/// Counts hard selections per task and rule. `traces` pairs a task id with
/// each trace.
pub fn rule_usage_stats<'a>(
    n_rules: usize,
    traces: impl IntoIterator<Item = (&'a str, &'a SelectionTrace)>,
) -> UsageStats {
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut top1: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for (task, t) in traces {
        let row = counts.entry(task.to_string()).or_insert_with(|| vec![0; n_rules]);
        for &r in &t.chosen {
            row[r] += 1;
        }
        if let Some(&r) = t.chosen.first() {
            top1.entry(task.to_string()).or_default().insert(r);
        }
    }
    let tasks: Vec<String> = counts.keys().cloned().collect();
    let entropy = counts
        .values()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                return 0.0;
            }
            row.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    let empty = BTreeSet::new();
    let jaccard = tasks
        .iter()
        .map(|a| {
            tasks
                .iter()
                .map(|b| {
                    let (sa, sb) = (top1.get(a).unwrap_or(&empty), top1.get(b).unwrap_or(&empty));
                    let union = sa.union(sb).count();
                    if union == 0 {
                        0.0
                    } else {
                        sa.intersection(sb).count() as f64 / union as f64
                    }
                })
                .collect()
        })
        .collect();
    UsageStats {
        tasks,
        counts: counts.into_values().collect(),
        entropy,
        jaccard,
    }
}

impl UsageStats {
    /// CSV table: `task,rule0,...,entropy`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let n = self.counts.first().map_or(0, Vec::len);
        let mut header = vec!["task".to_string()];
        header.extend((0..n).map(|r| format!("rule{r}")));
        header.push("entropy".into());
        w.write_record(&header).expect("in-memory write");
        for ((t, row), e) in self.tasks.iter().zip(&self.counts).zip(&self.entropy) {
            let mut rec = vec![t.clone()];
            rec.extend(row.iter().map(usize::to_string));
            rec.push(format!("{e:.4}"));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// One exported selection record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run_id: String,
    pub task_id: String,
    pub example_id: u64,
    pub layer: usize,
    pub condition: String,
    pub chosen: Vec<usize>,
    pub context: usize,
}

/// JSON-lines export of traces.
pub fn trace_records(run_id: &str, task_id: &str, example_id: u64, traces: &[SelectionTrace]) -> Vec<String> {
    traces
        .iter()
        .map(|t| {
            serde_json::to_string(&TraceRecord {
                run_id: run_id.to_string(),
                task_id: task_id.to_string(),
                example_id,
                layer: t.layer,
                condition: t.condition.clone(),
                chosen: t.chosen.clone(),
                context: t.context,
            })
            .expect("record serializes")
        })
        .collect()
}
