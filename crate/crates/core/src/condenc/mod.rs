//! Condition encoder: textual conditions to token embeddings, a pooled
//! condition vector per condition, and the stacked condition matrix.

mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Graph, Tensor, Var};
use crate::params::ParamSet;
use crate::plm::PAD;

pub use vocab::{clip_pad, tokenize, Vocab, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    Instruction,
    Metadata,
    Input,
}

/// Per-kind clip length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondLimits {
    pub instruction: usize,
    pub metadata: usize,
    pub input: usize,
}

impl Default for CondLimits {
    fn default() -> Self {
        Self {
            instruction: 50,
            metadata: 5,
            input: 64,
        }
    }
}

impl CondLimits {
    pub fn for_kind(&self, kind: ConditionKind) -> usize {
        match kind {
            ConditionKind::Instruction => self.instruction,
            ConditionKind::Metadata => self.metadata,
            ConditionKind::Input => self.input,
        }
    }
}

/// A named condition, stored clipped and padded to `max_t_c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub kind: ConditionKind,
    pub tokens: Vec<u32>,
    pub max_t_c: usize,
}

impl Condition {
    pub fn new(name: impl Into<String>, kind: ConditionKind, ids: &[u32], max_t_c: usize) -> Result<Self> {
        if max_t_c == 0 {
            return Err(Error::Config("condition length limit must be >= 1".into()));
        }
        Ok(Self {
            name: name.into(),
            kind,
            tokens: clip_pad(ids, max_t_c),
            max_t_c,
        })
    }

    pub fn from_text(
        name: impl Into<String>,
        kind: ConditionKind,
        text: &str,
        vocab: &Vocab,
        limits: &CondLimits,
    ) -> Result<Self> {
        Self::new(name, kind, &tokenize(text, vocab), limits.for_kind(kind))
    }

    /// Length of the non-pad prefix. Pads only ever occur at the tail.
    pub fn n_real(&self) -> usize {
        self.tokens.iter().position(|&t| t == PAD).unwrap_or(self.tokens.len())
    }

    pub fn real_tokens(&self) -> &[u32] {
        &self.tokens[..self.n_real()]
    }
}

/// Ordered conditions for one example; the instruction comes first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSet {
    conditions: Vec<Condition>,
}

impl ConditionSet {
    pub fn new(conditions: Vec<Condition>) -> Result<Self> {
        match conditions.first() {
            None => Err(Error::Contract("condition set is empty".into())),
            Some(c) if c.kind != ConditionKind::Instruction => Err(Error::Contract(format!(
                "first condition `{}` is not an instruction",
                c.name
            ))),
            Some(_) => Ok(Self { conditions }),
        }
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn instruction(&self) -> &Condition {
        &self.conditions[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Condition> {
        self.conditions.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// `out_j = max_t a_t·(x_t W_p)_j`
    #[default]
    AttentiveMax,
    /// `out_j = Σ_t a_t·(x_t W_p)_j`
    WeightedSum,
}

/// Indices of the encoder's parameters inside a generator's [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderIdx {
    /// Token embedding `[V, d]`.
    pub emb: usize,
    /// Pooling score vector `[d, 1]`.
    pub w: usize,
    /// Pooling projection `[d, d]`.
    pub wp: usize,
}

impl EncoderIdx {
    pub fn param_count(vocab_size: usize, d: usize) -> usize {
        vocab_size * d + d + d * d
    }
}

pub fn add_encoder_params<R: Rng>(
    p: &mut ParamSet,
    prefix: &str,
    vocab_size: usize,
    d: usize,
    rng: &mut R,
) -> EncoderIdx {
    let b = 1.0 / (d as f64).sqrt();
    EncoderIdx {
        emb: p.add(format!("{prefix}.tok_emb"), Tensor::uniform(&[vocab_size, d], b, rng)),
        w: p.add(format!("{prefix}.pool_w"), Tensor::uniform(&[d, 1], b, rng)),
        wp: p.add(format!("{prefix}.pool_proj"), Tensor::uniform(&[d, d], b, rng)),
    }
}

/// Pools an embedded sequence `[T, d]` (pads already removed) into `[1, d]`.
pub fn encode_condition(g: &mut Graph<'_>, x: Var, w: Var, wp: Var, pooling: Pooling) -> Result<Var> {
    let s = g.matmul(x, w)?;
    let a = g.softmax(s, 0)?;
    let proj = g.matmul(x, wp)?;
    let weighted = g.mul_rows_by_col(proj, a)?;
    match pooling {
        Pooling::AttentiveMax => g.max_rows(weighted),
        Pooling::WeightedSum => g.sum_rows(weighted),
    }
}

/// Tensor-level wrapper of [`encode_condition`]. Rows of `seq` whose
/// `valid` flag is false are masked out; at least one row must be valid.
pub fn encode_condition_tensor(
    seq: &Tensor,
    valid: &[bool],
    w: &Tensor,
    wp: &Tensor,
    pooling: Pooling,
) -> Result<Tensor> {
    if valid.len() != seq.rows() {
        return Err(Error::dim(format!(
            "{} mask flags for {} rows",
            valid.len(),
            seq.rows()
        )));
    }
    let rows: Vec<usize> = (0..seq.rows()).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        return Err(Error::EmptyCondition("<tensor>".into()));
    }
    let mut g = Graph::new();
    let (s, w, wp) = (g.frozen(seq), g.frozen(w), g.frozen(wp));
    let x = g.gather_rows(s, &rows)?;
    let out = encode_condition(&mut g, x, w, wp, pooling)?;
    Ok(g.to_tensor(out))
}

/// Token embeddings of a condition's non-pad prefix: `[n_real, d]`.
pub fn embed_real(g: &mut Graph<'_>, emb: Var, c: &Condition) -> Result<Var> {
    let ids: Vec<usize> = c.real_tokens().iter().map(|&t| t as usize).collect();
    if ids.is_empty() {
        return Err(Error::EmptyCondition(c.name.clone()));
    }
    g.gather_rows(emb, &ids)
}

/// Condition matrix `[|C|, d]`, one pooled row per condition in set order.
pub fn build_condition_matrix(
    g: &mut Graph<'_>,
    cs: &ConditionSet,
    enc: &[Var],
    idx: EncoderIdx,
    pooling: Pooling,
) -> Result<Var> {
    let rows = cs
        .iter()
        .map(|c| {
            let x = embed_real(g, enc[idx.emb], c)?;
            encode_condition(g, x, enc[idx.w], enc[idx.wp], pooling)
        })
        .collect::<Result<Vec<Var>>>()?;
    g.concat_rows(&rows)
}

/// Fixed sinusoidal position table `[t, d]`.
pub fn sinusoid(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_requires_leading_instruction() {
        let v = Vocab::from_list(["a".to_string()]);
        let lim = CondLimits::default();
        let ins = Condition::from_text("instruction", ConditionKind::Instruction, "a", &v, &lim).unwrap();
        let meta = Condition::from_text("direction", ConditionKind::Metadata, "a", &v, &lim).unwrap();
        assert!(ConditionSet::new(vec![]).is_err());
        assert!(ConditionSet::new(vec![meta.clone(), ins.clone()]).is_err());
        assert_eq!(ConditionSet::new(vec![ins, meta]).unwrap().len(), 2);
    }

    #[test]
    fn sinusoid_first_row() {
        let s = sinusoid(2, 4);
        assert_eq!(&s[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((s[4] - 1f64.sin()).abs() < 1e-15);
    }
}
