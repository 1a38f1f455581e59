//! Synthetic datasets: a SCAN-style command language with compositional
//! splits, permutation-language transduction with bridge configurations,
//! and the conditioning text attached to every example.

mod scan;
mod transduction;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condenc::{CondLimits, Condition, ConditionKind, ConditionSet, Vocab};
use crate::error::{Error, Result};

pub use scan::{
    all_commands, gen_scan_split, scan_conditions, scan_interpret, SplitKind, SplitSpec, ACTIONS, CONJUNCTIONS,
    COUNTERS, DIRECTIONS, INSTRUCTION, ISOLATION_SHARE, MAX_ACTIONS, MODIFIERS, PRIMITIVES,
};
pub use transduction::{
    ablation_tasks, bridge_tasks, composition_instructions, content_words, gen_multitask_transduction,
    gen_summarization, payload_token, payload_tokens, rule_sep_tasks, BridgeSpec, InstructionVariant, Languages,
    TransductionSpec, TransductionTask, BRIDGE_TARGET, LANGUAGE_NAMES, PAYLOAD_SIZE, SPAN_CLOSE, SPAN_OPEN, STOPWORDS,
    SUMMARY_INSTRUCTION, SUMMARY_LABELS,
};

/// Separator between written-out conditions and the source.
pub const SEP: &str = "§";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondText {
    pub name: String,
    pub kind: ConditionKind,
    pub text: String,
}

impl CondText {
    pub fn instruction(text: &str) -> Self {
        Self {
            name: "instruction".into(),
            kind: ConditionKind::Instruction,
            text: text.into(),
        }
    }

    pub fn metadata(name: &str, text: &str) -> Self {
        Self {
            name: name.into(),
            kind: ConditionKind::Metadata,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub task_id: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub conditions: Vec<CondText>,
}

/// Tokenized condition set of an example, instruction first.
pub fn attach_conditions(ex: &Example, vocab: &Vocab, limits: &CondLimits) -> Result<ConditionSet> {
    let conds = ex
        .conditions
        .iter()
        .map(|c| Condition::from_text(c.name.clone(), c.kind, &c.text, vocab, limits))
        .collect::<Result<Vec<_>>>()?;
    ConditionSet::new(conds)
}

/// Every token any generator can emit, in a fixed order.
pub fn universe() -> Vec<String> {
    let langs = Languages::new(0);
    let mut words: Vec<String> = payload_tokens();
    words.extend(langs.all_pairs().iter().map(TransductionTask::marker));
    words.extend(LANGUAGE_NAMES.iter().map(|s| s.to_string()));
    let fixed = PRIMITIVES
        .iter()
        .chain(&DIRECTIONS)
        .chain(&MODIFIERS)
        .chain(&COUNTERS)
        .chain(&CONJUNCTIONS)
        .chain(&ACTIONS)
        .chain(&SUMMARY_LABELS)
        .chain(&[SPAN_OPEN, SPAN_CLOSE, SEP]);
    words.extend(fixed.map(|s| s.to_string()));
    let mut texts = vec![
        INSTRUCTION.to_string(),
        SUMMARY_INSTRUCTION.to_string(),
        "translate to".to_string(),
    ];
    for v in [InstructionVariant::Simple, InstructionVariant::Detailed] {
        let (support, target) = composition_instructions(v);
        texts.extend(support.iter().map(|s| s.to_string()));
        texts.push(target.to_string());
    }
    for t in &texts {
        for w in t.split_whitespace() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    }
    words
}

pub fn universe_vocab() -> Vocab {
    Vocab::from_list(universe())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ScanAddPrimitive,
    ScanLength,
    ScanRandom,
    Transduction,
    RuleSep,
    /// The en-fr / fr-en pair of the k-vs-N ablation.
    Pair,
    Bridge,
    Summarization,
}

/// Flat description of a dataset. For the transduction kinds `n_train`
/// and `n_test` count rows per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub primitive: String,
    pub max_train_len: usize,
    /// SCAN only: longest action sequence kept, zero for no limit.
    pub max_actions: usize,
    pub n_bridges: usize,
    pub few_shot: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fixes the languages; must match the one used for pretraining.
    pub world_seed: u64,
    pub data_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::ScanAddPrimitive,
            n_train: 1000,
            n_valid: 100,
            n_test: 500,
            primitive: "jump".into(),
            max_train_len: 22,
            max_actions: 0,
            n_bridges: 0,
            few_shot: 50,
            min_len: 3,
            max_len: 8,
            world_seed: 7,
            data_seed: 11,
        }
    }
}

impl TaskSpec {
    pub fn hash(&self) -> String {
        spec_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of the JSON form.
pub fn spec_hash<T: Serialize>(spec: &T) -> String {
    let json = serde_json::to_vec(spec).expect("serializable");
    let digest = Sha256::digest(&json);
    digest[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

fn split_valid(mut train: Vec<Example>, n_valid: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    if n_valid >= train.len() {
        return Err(Error::Generation(format!(
            "validation size {n_valid} leaves no training rows out of {}",
            train.len()
        )));
    }
    let valid = train.split_off(train.len() - n_valid);
    Ok((train, valid))
}

/// Interleaves per-task rows so a tail split takes from every task.
fn interleave(rows: Vec<Example>) -> Vec<Example> {
    let mut groups: Vec<(String, std::collections::VecDeque<Example>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(id, _)| *id == r.task_id) {
            Some((_, q)) => q.push_back(r),
            None => groups.push((r.task_id.clone(), [r].into())),
        }
    }
    let mut out = Vec::new();
    while groups.iter().any(|(_, q)| !q.is_empty()) {
        for (_, q) in groups.iter_mut() {
            out.extend(q.pop_front());
        }
    }
    out
}

pub fn build_dataset(spec: &TaskSpec) -> Result<Dataset> {
    let langs = Languages::new(spec.world_seed);
    let scan = |kind: SplitKind| -> Result<Dataset> {
        let (train, test) = gen_scan_split(&SplitSpec {
            kind,
            seed: spec.data_seed,
            n_train: spec.n_train + spec.n_valid,
            n_test: spec.n_test,
            max_actions: spec.max_actions,
        })?;
        let (train, valid) = split_valid(train, spec.n_valid)?;
        Ok(Dataset { train, valid, test })
    };
    let trans = |tasks: Vec<TransductionTask>, bridge: Option<BridgeSpec>| -> Result<Dataset> {
        let per_task_valid = spec.n_valid.div_ceil(tasks.len().max(1));
        let (train, test) = gen_multitask_transduction(
            &tasks,
            &TransductionSpec {
                n_per_pair: spec.n_train + per_task_valid,
                n_eval: spec.n_test,
                min_len: spec.min_len,
                max_len: spec.max_len,
                bridge,
                seed: spec.data_seed,
            },
        )?;
        let (train, valid) = split_valid(interleave(train), per_task_valid * tasks.len())?;
        Ok(Dataset { train, valid, test })
    };
    match spec.kind {
        TaskKind::ScanAddPrimitive => scan(SplitKind::AddPrimitive {
            primitive: spec.primitive.clone(),
        }),
        TaskKind::ScanLength => scan(SplitKind::Length {
            max_train_len: spec.max_train_len,
        }),
        TaskKind::ScanRandom => scan(SplitKind::Random),
        TaskKind::Transduction => trans(langs.all_pairs(), None),
        TaskKind::RuleSep => trans(rule_sep_tasks(&langs), None),
        TaskKind::Pair => trans(ablation_tasks(&langs), None),
        TaskKind::Bridge => {
            let target = format!("{}-{}", BRIDGE_TARGET.0, BRIDGE_TARGET.1);
            trans(
                bridge_tasks(&langs, spec.n_bridges)?,
                Some(BridgeSpec {
                    target,
                    few_shot: spec.few_shot,
                }),
            )
        }
        TaskKind::Summarization => {
            let rows = gen_summarization(&langs, spec.n_train + spec.n_valid + spec.n_test, spec.data_seed)?;
            let (rest, test) = split_valid(rows, spec.n_test)?;
            let (train, valid) = split_valid(rest, spec.n_valid)?;
            Ok(Dataset { train, valid, test })
        }
    }
}

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.contains(['\t', '\n', ';', '=']) {
        return Err(Error::Parse(format!("{what} `{s}` contains a reserved character")));
    }
    Ok(())
}

/// `task_id \t src \t tgt \t name=text;name=text`, preceded by a
/// `# spec_hash=` header line.
pub fn to_tsv(examples: &[Example], hash: &str) -> Result<String> {
    let mut out = format!("# spec_hash={hash}\n");
    for ex in examples {
        check_field(&ex.task_id, "task id")?;
        let conds = ex
            .conditions
            .iter()
            .map(|c| {
                check_field(&c.name, "condition name")?;
                check_field(&c.text, "condition text")?;
                Ok(format!("{}={}", c.name, c.text))
            })
            .collect::<Result<Vec<_>>>()?;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            ex.task_id,
            ex.src.join(" "),
            ex.tgt.join(" "),
            conds.join(";")
        );
    }
    Ok(out)
}

/// Parses [`to_tsv`] output into `(spec hash, examples)`.
pub fn from_tsv(text: &str) -> Result<(String, Vec<Example>)> {
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# spec_hash="))
        .ok_or_else(|| Error::Parse("missing `# spec_hash=` header".into()))?
        .to_string();
    let examples = lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Parse(format!(
                    "line {}: expected 4 columns, got {}",
                    i + 2,
                    cols.len()
                )));
            }
            let conditions = cols[3]
                .split(';')
                .filter(|c| !c.is_empty())
                .map(|c| {
                    let (name, text) = c
                        .split_once('=')
                        .ok_or_else(|| Error::Parse(format!("line {}: condition `{c}` lacks `=`", i + 2)))?;
                    Ok(if name == "instruction" {
                        CondText::instruction(text)
                    } else {
                        CondText::metadata(name, text)
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let words = |s: &str| s.split_whitespace().map(String::from).collect();
            Ok(Example {
                task_id: cols[0].to_string(),
                src: words(cols[1]),
                tgt: words(cols[2]),
                conditions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((hash, examples))
}

impl Dataset {
    /// Writes `train.tsv`, `valid.tsv` and `test.tsv` under `dir`.
    pub fn write_dir(&self, dir: &Path, hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, rows) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            std::fs::write(dir.join(format!("{name}.tsv")), to_tsv(rows, hash)?)?;
        }
        Ok(())
    }
}
