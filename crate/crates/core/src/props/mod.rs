//! The rule-based prompt generator. Each condition sparsely selects `k` of
//! `N` attention-head rules with Gumbel top-k, picks a context condition,
//! and the summed outputs of the selected rules become prompt vectors.

mod stats;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condenc::{self, ConditionSet, EncoderIdx, Pooling};
use crate::error::{Error, Result};
use crate::numkernel::{AttnMask, Graph, Tensor, Var};
use crate::params::ParamSet;
use crate::plm::{Adaptation, PromptVars};
use crate::rng;

pub use stats::{rule_usage_stats, trace_records, TraceRecord, UsageStats};

/// Large finite penalty used to exclude already chosen rules.
const EXCLUDED: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropsConfig {
    pub n_rules: usize,
    pub k: usize,
    pub layers: usize,
    pub tau: f64,
    pub t_p: usize,
    /// Generator width.
    pub d: usize,
    pub ffn_dim: usize,
    pub transition: bool,
    pub pooling: Pooling,
}

impl Default for PropsConfig {
    fn default() -> Self {
        Self {
            n_rules: 8,
            k: 3,
            layers: 2,
            tau: 1.0,
            t_p: 8,
            d: 64,
            ffn_dim: 128,
            transition: true,
            pooling: Pooling::AttentiveMax,
        }
    }
}

impl PropsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.k > self.n_rules {
            return Err(Error::Config(format!(
                "need 1 <= k <= N, got k={} N={}",
                self.k, self.n_rules
            )));
        }
        if self.t_p < 1 || self.layers < 1 || self.d < 1 || self.ffn_dim < 1 {
            return Err(Error::Config(format!(
                "T_P, layers, d and ffn_dim must be >= 1: {self:?}"
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Per-example generation context. Gumbel draws are keyed by
/// `(seed, example_id, layer, condition, purpose)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenCtx {
    pub seed: u64,
    pub example_id: u64,
    pub noise: bool,
}

impl GenCtx {
    pub fn eval(example_id: u64) -> Self {
        Self {
            seed: 0,
            example_id,
            noise: false,
        }
    }

    fn key(&self, layer: usize, cond: usize, purpose: u64) -> [u64; 4] {
        [self.example_id, layer as u64, cond as u64, purpose]
    }

    fn gumbel(&self, key: &[u64; 4], n: usize) -> Vec<f64> {
        if self.noise {
            rng::gumbel_vec(&mut rng::stream(self.seed, key), n)
        } else {
            vec![0.0; n]
        }
    }
}

/// What one condition selected at one generator layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub layer: usize,
    pub condition: String,
    /// Hard-selected rules in selection order.
    pub chosen: Vec<usize>,
    pub soft: Vec<f64>,
    pub context: usize,
    pub context_name: String,
    /// Stream keys of the rule and context Gumbel draws (`None` without noise).
    pub gumbel_keys: Option<[[u64; 4]; 2]>,
}

impl SelectionTrace {
    pub fn hard_mask(&self, n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n];
        for &r in &self.chosen {
            m[r] = 1.0;
        }
        m
    }
}

/// `k` rounds of masked argmax over `scores + noise`. Returns the chosen
/// indices in round order and the summed per-round softmax weights.
pub fn topk_rounds(scores: &[f64], noise: &[f64], k: usize, tau: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = scores.len();
    if k < 1 || k > n {
        return Err(Error::Config(format!("need 1 <= k <= N, got k={k} N={n}")));
    }
    let perturbed: Vec<f64> = scores.iter().zip(noise).map(|(s, e)| s + e).collect();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut soft = vec![0.0; n];
    for _ in 0..k {
        let mut round: Vec<f64> = (0..n)
            .map(|i| (perturbed[i] - if taken[i] { EXCLUDED } else { 0.0 }) / tau)
            .collect();
        let best = argmax_free(&perturbed, &taken);
        crate::numkernel::kernels::softmax_inplace(&mut round);
        soft.iter_mut().zip(&round).for_each(|(a, b)| *a += b);
        taken[best] = true;
        chosen.push(best);
    }
    Ok((chosen, soft))
}

fn argmax_free(x: &[f64], taken: &[bool]) -> usize {
    let mut best = usize::MAX;
    for i in 0..x.len() {
        if !taken[i] && (best == usize::MAX || x[i] > x[best]) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Parameter indices of the rule set inside the generator's [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSetIdx {
    pub enc: EncoderIdx,
    /// Rule embeddings `[N, d]`.
    pub rule_emb: usize,
    /// Selection query projection `[d, d]`.
    pub wq_sel: usize,
    /// Context query/key projections `[d, d]`.
    pub wq_ctx: usize,
    pub wk_ctx: usize,
    /// Per-rule `[W_q, W_k, W_v]`, each `[d, d]`.
    pub heads: Vec<[usize; 3]>,
    pub ln_g: usize,
    pub ln_b: usize,
    pub transition: Option<TransitionIdx>,
    /// Output projection `[d, 2·d_model]`.
    pub wo: usize,
}

/// Parameters of the position-wise transition `h + FFN(LN(h))`.
pub(crate) fn add_transition<R: Rng>(p: &mut ParamSet, prefix: &str, d: usize, ffn: usize, r: &mut R) -> TransitionIdx {
    let (bd, bf) = (1.0 / (d as f64).sqrt(), 1.0 / (ffn as f64).sqrt());
    TransitionIdx {
        ln_g: p.add(format!("{prefix}.ln2.gain"), Tensor::filled(&[d], 1.0)),
        ln_b: p.add(format!("{prefix}.ln2.bias"), Tensor::zeros(&[d])),
        w1: p.add(format!("{prefix}.w1"), Tensor::uniform(&[d, ffn], bd, r)),
        b1: p.add(format!("{prefix}.b1"), Tensor::zeros(&[ffn])),
        w2: p.add(format!("{prefix}.w2"), Tensor::uniform(&[ffn, d], bf, r)),
        b2: p.add(format!("{prefix}.b2"), Tensor::zeros(&[d])),
    }
}

/// `h + FFN(LN(h))`
pub(crate) fn apply_transition(g: &mut Graph<'_>, v: &[Var], t: TransitionIdx, h: Var) -> Result<Var> {
    let x = g.layer_norm(h, v[t.ln_g], v[t.ln_b])?;
    let x = g.linear(x, v[t.w1], Some(v[t.b1]))?;
    let x = g.gelu(x)?;
    let x = g.linear(x, v[t.w2], Some(v[t.b2]))?;
    g.add(h, x)
}

/// A condition's running representation: rows `[len, d]`, of which the
/// first `n_real` are real tokens (the rest are padding, masked as keys).
#[derive(Debug, Clone, Copy)]
pub struct CondState {
    pub x: Var,
    pub len: usize,
    pub n_real: usize,
}

/// Initial per-condition states: token embeddings plus fixed sinusoidal
/// positions. Rows past `n_real` are only materialized for the instruction,
/// up to `min_len_first`, so the prompt rows exist.
pub fn initial_states(
    g: &mut Graph<'_>,
    emb: Var,
    cs: &ConditionSet,
    d: usize,
    min_len_first: usize,
) -> Result<Vec<CondState>> {
    cs.iter()
        .enumerate()
        .map(|(ci, c)| {
            let n_real = c.n_real();
            if n_real == 0 {
                return Err(Error::EmptyCondition(c.name.clone()));
            }
            let len = if ci == 0 { n_real.max(min_len_first) } else { n_real };
            if len > c.tokens.len() {
                return Err(Error::Config(format!(
                    "prompt length {min_len_first} exceeds the clip length {} of `{}`",
                    c.tokens.len(),
                    c.name
                )));
            }
            let ids: Vec<usize> = c.tokens[..len].iter().map(|&t| t as usize).collect();
            let e = g.gather_rows(emb, &ids)?;
            let x = g.add_const(e, &condenc::sinusoid(len, d))?;
            Ok(CondState { x, len, n_real })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PropsGenerator {
    cfg: PropsConfig,
    d_model: usize,
    params: ParamSet,
    idx: RuleSetIdx,
}

impl PropsGenerator {
    pub fn new(cfg: &PropsConfig, vocab_size: usize, d_model: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let b = 1.0 / (d as f64).sqrt();
        let mut r = rng::stream(seed, &[0x9e4]);
        let mut p = ParamSet::new();
        let enc = condenc::add_encoder_params(&mut p, "cond", vocab_size, d, &mut r);
        let rule_emb = p.add("rules.emb", Tensor::uniform(&[cfg.n_rules, d], b, &mut r));
        let wq_sel = p.add("select.wq", Tensor::uniform(&[d, d], b, &mut r));
        let wq_ctx = p.add("context.wq", Tensor::uniform(&[d, d], b, &mut r));
        let wk_ctx = p.add("context.wk", Tensor::uniform(&[d, d], b, &mut r));
        let heads = (0..cfg.n_rules)
            .map(|i| ["wq", "wk", "wv"].map(|n| p.add(format!("rules.{i}.{n}"), Tensor::uniform(&[d, d], b, &mut r))))
            .collect();
        let ln_g = p.add("ln.gain", Tensor::filled(&[d], 1.0));
        let ln_b = p.add("ln.bias", Tensor::zeros(&[d]));
        let transition = cfg
            .transition
            .then(|| add_transition(&mut p, "transition", d, cfg.ffn_dim, &mut r));
        let wo = p.add("out.wo", Tensor::uniform(&[d, 2 * d_model], b, &mut r));
        p.set_requires_grad(true);
        Ok(Self {
            cfg: cfg.clone(),
            d_model,
            params: p,
            idx: RuleSetIdx {
                enc,
                rule_emb,
                wq_sel,
                wq_ctx,
                wk_ctx,
                heads,
                ln_g,
                ln_b,
                transition,
                wo,
            },
        })
    }

    pub fn config(&self) -> &PropsConfig {
        &self.cfg
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn idx(&self) -> &RuleSetIdx {
        &self.idx
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Rule scores `q·Rᵀ` with `q = C⃗·W̄_q`, as a `[1, N]` graph value.
    pub fn rule_scores(&self, g: &mut Graph<'_>, v: &[Var], c_vec: Var) -> Result<Var> {
        let q = g.matmul(c_vec, v[self.idx.wq_sel])?;
        let rt = g.transpose(v[self.idx.rule_emb])?;
        g.matmul(q, rt)
    }

    /// Gumbel top-k selection. Returns chosen rules (round order) and the
    /// straight-through mask `[1, N]` whose forward value is the hard mask.
    pub fn select_rules(
        &self,
        g: &mut Graph<'_>,
        v: &[Var],
        c_vec: Var,
        noise: &[f64],
    ) -> Result<(Vec<usize>, Var, Vec<f64>)> {
        let n = self.cfg.n_rules;
        let s = self.rule_scores(g, v, c_vec)?;
        let (chosen, _) = topk_rounds(g.value(s), noise, self.cfg.k, self.cfg.tau)?;
        let mut taken = vec![false; n];
        let mut soft: Option<Var> = None;
        for &r in &chosen {
            let shift: Vec<f64> = (0..n)
                .map(|i| noise[i] - if taken[i] { EXCLUDED } else { 0.0 })
                .collect();
            let z = g.add_const(s, &shift)?;
            let z = g.scale(z, 1.0 / self.cfg.tau)?;
            let p = g.softmax(z, 1)?;
            soft = Some(match soft {
                Some(acc) => g.add(acc, p)?,
                None => p,
            });
            taken[r] = true;
        }
        let soft = soft.expect("k >= 1");
        let soft_vals = g.value(soft).to_vec();
        let hard: Vec<f64> = taken.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let m = g.straight_through(soft, hard)?;
        Ok((chosen, m, soft_vals))
    }

    /// Context selection over the rows of `e` (`[|C|, d]`). Returns the index
    /// and a straight-through scalar weight whose forward value is one.
    pub fn select_context(
        &self,
        g: &mut Graph<'_>,
        v: &[Var],
        chosen: &[usize],
        e: Var,
        noise: &[f64],
    ) -> Result<(usize, Var)> {
        let rows = g.gather_rows(v[self.idx.rule_emb], chosen)?;
        let q = g.matmul(rows, v[self.idx.wq_ctx])?;
        let keys = g.matmul(e, v[self.idx.wk_ctx])?;
        let qsum = g.sum_rows(q)?;
        let kt = g.transpose(keys)?;
        let score = g.matmul(qsum, kt)?;
        let n = g.shape(score)[1];
        if n == 0 {
            return Err(Error::Contract("empty condition set".into()));
        }
        let perturbed: Vec<f64> = g.value(score).iter().zip(noise).map(|(s, e)| s + e).collect();
        let j = argmax_free(&perturbed, &vec![false; n]);
        let z = g.add_const(score, noise)?;
        let z = g.scale(z, 1.0 / self.cfg.tau)?;
        let p = g.softmax(z, 1)?;
        let mut onehot = vec![0.0; n];
        onehot[j] = 1.0;
        let st = g.straight_through(p, onehot)?;
        let w = g.index(st, j)?;
        Ok((j, w))
    }

    /// Rule application before the output projection: `[c.len, d]`.
    pub fn apply_rules_hidden(
        &self,
        g: &mut Graph<'_>,
        v: &[Var],
        c: CondState,
        ctx: CondState,
        chosen: &[usize],
        m: Var,
    ) -> Result<Var> {
        if chosen.is_empty() {
            return Err(Error::Contract("no rules selected".into()));
        }
        let x = g.concat_rows(&[c.x, ctx.x])?;
        let x = g.layer_norm(x, v[self.idx.ln_g], v[self.idx.ln_b])?;
        let xq = g.slice_rows(x, 0, c.len)?;
        let mut valid = vec![false; c.len + ctx.len];
        valid[..c.n_real].iter_mut().for_each(|b| *b = true);
        valid[c.len..c.len + ctx.n_real].iter_mut().for_each(|b| *b = true);
        let mask = AttnMask::keys(valid);
        let scale = 1.0 / (self.cfg.d as f64).sqrt();
        // Unchosen heads contribute zero forward but still carry the
        // straight-through gradient back to their scores.
        let mut u: Option<Var> = None;
        for r in 0..self.cfg.n_rules {
            let [wq, wk, wv] = self.idx.heads[r];
            let q = g.matmul(xq, v[wq])?;
            let k = g.matmul(x, v[wk])?;
            let val = g.matmul(x, v[wv])?;
            let h = g.attention_ext(q, k, val, None, 1, scale, &mask)?;
            let mr = g.index(m, r)?;
            let h = g.scale_by(h, mr)?;
            u = Some(match u {
                Some(acc) => g.add(acc, h)?,
                None => h,
            });
        }
        let u = u.expect("non-empty");
        match self.idx.transition {
            Some(t) => {
                let h = g.add(c.x, u)?;
                apply_transition(g, v, t, h)
            }
            None => Ok(u),
        }
    }

    /// Tensor-level rule application with a hard mask: `[rows of s_c,
    /// 2·d_model]`. `n_real` counts the leading non-pad rows of each input.
    pub fn apply_rules(
        &self,
        s_c: &Tensor,
        n_real_c: usize,
        s_ctx: &Tensor,
        n_real_ctx: usize,
        chosen: &[usize],
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = self.params.bind_frozen(&mut g);
        let c = CondState {
            x: g.frozen(s_c),
            len: s_c.rows(),
            n_real: n_real_c,
        };
        let ctx = CondState {
            x: g.frozen(s_ctx),
            len: s_ctx.rows(),
            n_real: n_real_ctx,
        };
        let mut hard = vec![0.0; self.cfg.n_rules];
        chosen.iter().for_each(|&r| hard[r] = 1.0);
        let m = g.constant(&[1, self.cfg.n_rules], hard)?;
        let h = self.apply_rules_hidden(&mut g, &v, c, ctx, chosen, m)?;
        let out = g.matmul(h, v[self.idx.wo])?;
        Ok(g.to_tensor(out))
    }

    /// Full generation for one condition set. Returns prompt variables for
    /// every adapted site (one shared pack) and the selection traces.
    pub fn generate(
        &self,
        g: &mut Graph<'_>,
        v: &[Var],
        cs: &ConditionSet,
        adapt: &Adaptation,
        ctx: GenCtx,
    ) -> Result<(PromptVars, Vec<SelectionTrace>)> {
        let cfg = &self.cfg;
        if cfg.t_p > cs.instruction().max_t_c {
            return Err(Error::Config(format!(
                "T_P {} exceeds the instruction clip length {}",
                cfg.t_p,
                cs.instruction().max_t_c
            )));
        }
        let mut states = initial_states(g, v[self.idx.enc.emb], cs, cfg.d, cfg.t_p)?;
        let mut traces = Vec::new();
        let mut out = None;
        for layer in 0..cfg.layers {
            let last = layer + 1 == cfg.layers;
            let e = if layer == 0 {
                condenc::build_condition_matrix(g, cs, v, self.idx.enc, cfg.pooling)?
            } else {
                let rows = states
                    .iter()
                    .map(|s| {
                        let real = g.slice_rows(s.x, 0, s.n_real)?;
                        condenc::encode_condition(g, real, v[self.idx.enc.w], v[self.idx.enc.wp], cfg.pooling)
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.concat_rows(&rows)?
            };
            let n_cond = if last { 1 } else { cs.len() };
            let mut next = Vec::with_capacity(n_cond);
            for ci in 0..n_cond {
                let c_vec = g.slice_rows(e, ci, 1)?;
                let rkey = ctx.key(layer, ci, 0);
                let ckey = ctx.key(layer, ci, 1);
                let (chosen, m, soft) = self.select_rules(g, v, c_vec, &ctx.gumbel(&rkey, cfg.n_rules))?;
                let (j, w) = self.select_context(g, v, &chosen, e, &ctx.gumbel(&ckey, cs.len()))?;
                let cx = g.scale_by(states[j].x, w)?;
                let ctx_state = CondState { x: cx, ..states[j] };
                let h = self.apply_rules_hidden(g, v, states[ci], ctx_state, &chosen, m)?;
                next.push(CondState { x: h, ..states[ci] });
                traces.push(SelectionTrace {
                    layer,
                    condition: cs.conditions()[ci].name.clone(),
                    chosen,
                    soft,
                    context: j,
                    context_name: cs.conditions()[j].name.clone(),
                    gumbel_keys: ctx.noise.then_some([rkey, ckey]),
                });
            }
            if last {
                out = Some(next[0].x);
            } else {
                states = next;
            }
        }
        let h = out.expect("layers >= 1");
        let rows = g.slice_rows(h, 0, cfg.t_p)?;
        let p = g.matmul(rows, v[self.idx.wo])?;
        let pk = g.slice_cols(p, 0, self.d_model)?;
        let pv = g.slice_cols(p, self.d_model, self.d_model)?;
        Ok((shared_pack(adapt, cfg.t_p, pk, pv), traces))
    }
}

/// The same `(P_k, P_v)` at every adapted site and layer.
pub fn shared_pack(adapt: &Adaptation, t_p: usize, pk: Var, pv: Var) -> PromptVars {
    let slots: BTreeMap<_, _> = adapt.sites().into_iter().map(|k| (k, (pk, pv))).collect();
    PromptVars { t_p, slots }
}
