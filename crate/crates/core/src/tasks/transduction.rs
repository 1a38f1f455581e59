//! Permutation "languages" over a shared payload vocabulary, multi-task
//! transduction between them, and a marked-span summarization analog.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CondText, Example};
use crate::error::{Error, Result};
use crate::rng;

pub const PAYLOAD_SIZE: usize = 32;
pub const LANGUAGE_NAMES: [&str; 4] = ["en", "fr", "de", "es"];

pub fn payload_token(i: usize) -> String {
    format!("p{i:02}")
}

pub fn payload_tokens() -> Vec<String> {
    (0..PAYLOAD_SIZE).map(payload_token).collect()
}

fn payload_index(tok: &str) -> Option<usize> {
    let i: usize = tok.strip_prefix('p')?.parse().ok()?;
    (i < PAYLOAD_SIZE && tok.len() == 3).then_some(i)
}

/// Each language writes payload symbol `x` as `payload[perm[x]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Languages {
    pub names: Vec<String>,
    pub perms: Vec<Vec<usize>>,
}

impl Languages {
    pub fn new(world_seed: u64) -> Self {
        let mut r = rng::stream(world_seed, &[0x1a]);
        let perms = LANGUAGE_NAMES
            .iter()
            .map(|_| {
                let mut p: Vec<usize> = (0..PAYLOAD_SIZE).collect();
                p.shuffle(&mut r);
                p
            })
            .collect();
        Self {
            names: LANGUAGE_NAMES.iter().map(|s| s.to_string()).collect(),
            perms,
        }
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("unknown language `{name}`")))
    }

    pub fn task(&self, source: &str, target: &str) -> Result<TransductionTask> {
        let (s, t) = (self.index(source)?, self.index(target)?);
        Ok(TransductionTask {
            id: format!("{source}-{target}"),
            source: source.to_string(),
            target: target.to_string(),
            pi_s: self.perms[s].clone(),
            pi_t: self.perms[t].clone(),
        })
    }

    /// Every directed pair between distinct languages.
    pub fn all_pairs(&self) -> Vec<TransductionTask> {
        let mut out = Vec::new();
        for s in &self.names {
            for t in &self.names {
                if s != t {
                    out.push(self.task(s, t).expect("known names"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransductionTask {
    pub id: String,
    pub source: String,
    pub target: String,
    pub pi_s: Vec<usize>,
    pub pi_t: Vec<usize>,
}

impl TransductionTask {
    pub fn instruction(&self) -> String {
        format!("translate {} to {}", self.source, self.target)
    }

    /// Marker announcing this mapping in the pretraining mixture.
    pub fn marker(&self) -> String {
        format!("@{}", self.id)
    }

    fn inverse_s(&self, y: usize) -> usize {
        self.pi_s.iter().position(|&v| v == y).expect("bijection")
    }

    /// `π_t(π_s⁻¹(tok))`.
    pub fn map_token(&self, tok: &str) -> Result<String> {
        let y = payload_index(tok).ok_or_else(|| Error::Contract(format!("`{tok}` is not a payload token")))?;
        Ok(payload_token(self.pi_t[self.inverse_s(y)]))
    }

    /// Image of every payload token in payload order.
    pub fn image(&self) -> Vec<String> {
        (0..PAYLOAD_SIZE)
            .map(|i| payload_token(self.pi_t[self.inverse_s(i)]))
            .collect()
    }

    /// A source sentence in language `s` from an underlying symbol string.
    fn render_source(&self, xs: &[usize]) -> Vec<String> {
        xs.iter().map(|&x| payload_token(self.pi_s[x])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeSpec {
    /// Task id kept out of full training.
    pub target: String,
    /// Training examples of the target still allowed.
    pub few_shot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransductionSpec {
    pub n_per_pair: usize,
    pub n_eval: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub bridge: Option<BridgeSpec>,
    pub seed: u64,
}

fn sample_symbols<R: Rng>(r: &mut R, min_len: usize, max_len: usize) -> Vec<usize> {
    let n = r.gen_range(min_len..=max_len);
    (0..n).map(|_| r.gen_range(0..PAYLOAD_SIZE)).collect()
}

/// Returns `(train, eval)`. Every task contributes `n_per_pair` training
/// rows (the bridge target only its few-shot budget) and `n_eval` eval
/// rows; no (task, source) pair occurs in both.
pub fn gen_multitask_transduction(
    tasks: &[TransductionTask],
    spec: &TransductionSpec,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let mut ids = BTreeSet::new();
    for t in tasks {
        if !ids.insert(t.id.as_str()) {
            return Err(Error::Config(format!("duplicate task id `{}`", t.id)));
        }
    }
    if let Some(b) = &spec.bridge {
        if !ids.contains(b.target.as_str()) {
            return Err(Error::Config(format!(
                "bridge target `{}` is not among the tasks",
                b.target
            )));
        }
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "need 1 <= min_len <= max_len, got {}..{}",
            spec.min_len, spec.max_len
        )));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (ti, task) in tasks.iter().enumerate() {
        let mut r = rng::stream(spec.seed, &[0x7d, ti as u64]);
        let n_train = match &spec.bridge {
            Some(b) if b.target == task.id => b.few_shot,
            _ => spec.n_per_pair,
        };
        let mut seen = HashSet::new();
        let mut draw = |r: &mut rand_chacha::ChaCha8Rng| {
            for _ in 0..10_000 {
                let xs = sample_symbols(r, spec.min_len, spec.max_len);
                if seen.insert(xs.clone()) {
                    return Ok(xs);
                }
            }
            Err(Error::Generation(format!(
                "could not draw distinct sentences for `{}`",
                task.id
            )))
        };
        let mut rows = |n: usize, out: &mut Vec<Example>, r: &mut rand_chacha::ChaCha8Rng| -> Result<()> {
            for _ in 0..n {
                let xs = draw(r)?;
                out.push(Example {
                    task_id: task.id.clone(),
                    src: task.render_source(&xs),
                    tgt: xs.iter().map(|&x| payload_token(task.pi_t[x])).collect(),
                    conditions: vec![CondText::instruction(&task.instruction())],
                });
            }
            Ok(())
        };
        rows(spec.n_eval, &mut eval, &mut r)?;
        rows(n_train, &mut train, &mut r)?;
    }
    Ok((train, eval))
}

/// Four directed pairs for the rule-separation experiment.
pub fn rule_sep_tasks(langs: &Languages) -> Vec<TransductionTask> {
    [("en", "fr"), ("fr", "de"), ("de", "es"), ("es", "en")]
        .iter()
        .map(|(s, t)| langs.task(s, t).expect("known names"))
        .collect()
}

/// The two mutually inverse pairs used by the k-vs-N ablation.
pub fn ablation_tasks(langs: &Languages) -> Vec<TransductionTask> {
    [("en", "fr"), ("fr", "en")]
        .iter()
        .map(|(s, t)| langs.task(s, t).expect("known names"))
        .collect()
}

pub const BRIDGE_TARGET: (&str, &str) = ("en", "fr");

/// Training pairs of the bridge experiment with `n_bridges` in {0, 2, 3}:
/// the target (few-shot), a base pair, and the bridge pairs.
pub fn bridge_tasks(langs: &Languages, n_bridges: usize) -> Result<Vec<TransductionTask>> {
    let bridges = [("en", "de"), ("de", "fr"), ("es", "fr")];
    if !matches!(n_bridges, 0 | 2 | 3) {
        return Err(Error::Config(format!(
            "bridge count must be 0, 2 or 3, got {n_bridges}"
        )));
    }
    let mut pairs = vec![BRIDGE_TARGET, ("fr", "en")];
    pairs.extend_from_slice(&bridges[..n_bridges]);
    pairs.iter().map(|(s, t)| langs.task(s, t)).collect()
}

pub const SUMMARY_INSTRUCTION: &str = "summarize marked span";
pub const SUMMARY_LABELS: [&str; 2] = ["span", "lead"];
pub const SPAN_OPEN: &str = "[";
pub const SPAN_CLOSE: &str = "]";

/// Marked-span summarization analog. The `outlet` tag names the output
/// language; the `label` tag picks the whole span or its first two tokens.
/// Sources are written in the first language.
pub fn gen_summarization(langs: &Languages, n: usize, seed: u64) -> Result<Vec<Example>> {
    let mut r = rng::stream(seed, &[0x5a]);
    let src_lang = &langs.names[0];
    (0..n)
        .map(|i| {
            let outlet = &langs.names[1 + i % (langs.names.len() - 1)];
            let label = SUMMARY_LABELS[r.gen_range(0..SUMMARY_LABELS.len())];
            let task = langs.task(src_lang, outlet)?;
            let xs = sample_symbols(&mut r, 6, 10);
            let span_len = r.gen_range(2..=4);
            let start = r.gen_range(0..=xs.len() - span_len);
            let mut src = task.render_source(&xs[..start]);
            src.push(SPAN_OPEN.into());
            src.extend(task.render_source(&xs[start..start + span_len]));
            src.push(SPAN_CLOSE.into());
            src.extend(task.render_source(&xs[start + span_len..]));
            let keep = if label == "lead" { 2 } else { span_len };
            let tgt = xs[start..start + keep]
                .iter()
                .map(|&x| payload_token(task.pi_t[x]))
                .collect();
            Ok(Example {
                task_id: format!("sum-{outlet}"),
                src,
                tgt,
                conditions: vec![
                    CondText::instruction(SUMMARY_INSTRUCTION),
                    CondText::metadata("outlet", outlet),
                    CondText::metadata("label", label),
                ],
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionVariant {
    Simple,
    Detailed,
}

pub const STOPWORDS: [&str; 8] = ["to", "from", "of", "in", "and", "the", "into", "then"];

/// Support-task instructions and the composed target instruction.
pub fn composition_instructions(variant: InstructionVariant) -> (Vec<&'static str>, &'static str) {
    match variant {
        InstructionVariant::Simple => (
            vec!["translate en to fr", "summarize marked span"],
            "summarize en into fr",
        ),
        InstructionVariant::Detailed => (
            vec!["translate text from en to fr", "summarize marked span of text in en"],
            "summarize marked span of text from en then translate to fr",
        ),
    }
}

pub fn content_words(text: &str) -> BTreeSet<&str> {
    text.split_whitespace().filter(|w| !STOPWORDS.contains(w)).collect()
}
