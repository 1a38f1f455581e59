//! Alternative prompt generators behind the same interface as the rule
//! generator: unconditional prefixes (optionally with the conditions
//! written into the input) and transformer-layer conditional generators
//! that use every head without selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condenc::ConditionSet;
use crate::error::{Error, Result};
use crate::numkernel::{AttnMask, Graph, Tensor, Var};
use crate::params::ParamSet;
use crate::plm::{Adaptation, PlmConfig, PromptVars, Site};
use crate::props::{self, CondState, GenCtx, PropsConfig, PropsGenerator, SelectionTrace, TransitionIdx};
use crate::rng;

/// Hidden width of the prefix reparametrization network.
pub const PREFIX_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Prefix,
    PrefixPp,
    TrsfP,
    STrsfP,
    Props,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 5] = [
        GeneratorKind::Prefix,
        GeneratorKind::PrefixPp,
        GeneratorKind::TrsfP,
        GeneratorKind::STrsfP,
        GeneratorKind::Props,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::Prefix => "prefix",
            GeneratorKind::PrefixPp => "prefix_pp",
            GeneratorKind::TrsfP => "trsf_p",
            GeneratorKind::STrsfP => "s_trsf_p",
            GeneratorKind::Props => "props",
        }
    }

    pub fn is_conditional(self) -> bool {
        matches!(
            self,
            GeneratorKind::TrsfP | GeneratorKind::STrsfP | GeneratorKind::Props
        )
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneratorKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown generator `{s}` (expected prefix|prefix_pp|trsf_p|s_trsf_p|props)"
            ))
        })
    }
}

/// Writes the conditions in front of the source, each followed by `sep`.
/// On overflow the source tail is dropped; the conditions are never cut.
pub fn prefixpp_prepare(src: &[u32], cs: Option<&ConditionSet>, sep: u32, max_src_len: usize) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    if let Some(cs) = cs {
        for c in cs.iter() {
            out.extend_from_slice(c.real_tokens());
            out.push(sep);
        }
    }
    if out.len() > max_src_len {
        return Err(Error::Config(format!(
            "conditions alone take {} tokens, more than the {max_src_len} allowed",
            out.len()
        )));
    }
    let room = max_src_len - out.len();
    out.extend(src.iter().take(room));
    Ok(out)
}

#[derive(Debug, Clone)]
struct PrefixSite {
    site: Site,
    /// One `[T_P, 2·d_model]` matrix per adapted layer.
    raw: Vec<(usize, usize)>,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Unconditional prompts: per site and layer a learned matrix passed
/// through a small tanh network shared within the site.
#[derive(Debug, Clone)]
pub struct PrefixGenerator {
    t_p: usize,
    d_model: usize,
    params: ParamSet,
    sites: Vec<PrefixSite>,
}

impl PrefixGenerator {
    pub fn new(t_p: usize, plm: &PlmConfig, adapt: &Adaptation, seed: u64) -> Result<Self> {
        if t_p == 0 {
            return Err(Error::Config("T_P must be >= 1".into()));
        }
        adapt.validate(plm)?;
        let w = 2 * plm.d_model;
        let mut r = rng::stream(seed, &[0x9f]);
        let mut p = ParamSet::new();
        let mut sites = Vec::new();
        for site in Site::ALL {
            let name = site.as_str();
            let raw = adapt
                .layers_for(site)
                .iter()
                .map(|&l| {
                    (
                        l,
                        p.add(format!("prefix.{name}.{l}"), Tensor::uniform(&[t_p, w], 1.0, &mut r)),
                    )
                })
                .collect();
            let (bw, bh) = (1.0 / (w as f64).sqrt(), 1.0 / (PREFIX_HIDDEN as f64).sqrt());
            sites.push(PrefixSite {
                site,
                raw,
                w1: p.add(
                    format!("prefix.{name}.w1"),
                    Tensor::uniform(&[w, PREFIX_HIDDEN], bw, &mut r),
                ),
                b1: p.add(format!("prefix.{name}.b1"), Tensor::zeros(&[PREFIX_HIDDEN])),
                w2: p.add(
                    format!("prefix.{name}.w2"),
                    Tensor::uniform(&[PREFIX_HIDDEN, w], bh, &mut r),
                ),
                b2: p.add(format!("prefix.{name}.b2"), Tensor::zeros(&[w])),
            });
        }
        p.set_requires_grad(true);
        Ok(Self {
            t_p,
            d_model: plm.d_model,
            params: p,
            sites,
        })
    }

    pub fn generate(&self, g: &mut Graph<'_>, v: &[Var]) -> Result<PromptVars> {
        let mut slots = BTreeMap::new();
        for s in &self.sites {
            for &(layer, raw) in &s.raw {
                let h = g.linear(v[raw], v[s.w1], Some(v[s.b1]))?;
                let h = g.tanh(h)?;
                let p = g.linear(h, v[s.w2], Some(v[s.b2]))?;
                let pk = g.slice_cols(p, 0, self.d_model)?;
                let pv = g.slice_cols(p, self.d_model, self.d_model)?;
                slots.insert((s.site, layer), (pk, pv));
            }
        }
        Ok(PromptVars { t_p: self.t_p, slots })
    }
}

/// Parameter indices of one transformer-layer prompt block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrsfBlockIdx {
    pub emb: usize,
    pub heads: Vec<[usize; 3]>,
    /// Merge of the concatenated heads, `[N·d, d]`.
    pub merge: usize,
    pub ln_g: usize,
    pub ln_b: usize,
    pub transition: Option<TransitionIdx>,
    pub wo: usize,
}

fn add_block<R: Rng>(
    p: &mut ParamSet,
    prefix: &str,
    cfg: &PropsConfig,
    vocab_size: usize,
    d_model: usize,
    r: &mut R,
) -> TrsfBlockIdx {
    let d = cfg.d;
    let b = 1.0 / (d as f64).sqrt();
    let emb = p.add(format!("{prefix}.tok_emb"), Tensor::uniform(&[vocab_size, d], b, r));
    let heads = (0..cfg.n_rules)
        .map(|i| ["wq", "wk", "wv"].map(|n| p.add(format!("{prefix}.heads.{i}.{n}"), Tensor::uniform(&[d, d], b, r))))
        .collect();
    let bm = 1.0 / ((cfg.n_rules * d) as f64).sqrt();
    let merge = p.add(format!("{prefix}.merge"), Tensor::uniform(&[cfg.n_rules * d, d], bm, r));
    let ln_g = p.add(format!("{prefix}.ln.gain"), Tensor::filled(&[d], 1.0));
    let ln_b = p.add(format!("{prefix}.ln.bias"), Tensor::zeros(&[d]));
    let transition = cfg
        .transition
        .then(|| props::add_transition(p, &format!("{prefix}.transition"), d, cfg.ffn_dim, r));
    let wo = p.add(format!("{prefix}.wo"), Tensor::uniform(&[d, 2 * d_model], b, r));
    TrsfBlockIdx {
        emb,
        heads,
        merge,
        ln_g,
        ln_b,
        transition,
        wo,
    }
}

/// Transformer-layer conditional generator. Every condition attends over
/// all conditions of the example with all heads; head outputs are
/// concatenated and merged. `shared` uses one block for every site,
/// otherwise each site owns a block.
#[derive(Debug, Clone)]
pub struct TrsfGenerator {
    cfg: PropsConfig,
    d_model: usize,
    shared: bool,
    params: ParamSet,
    blocks: Vec<TrsfBlockIdx>,
}

impl TrsfGenerator {
    pub fn new(cfg: &PropsConfig, vocab_size: usize, d_model: usize, shared: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[0x75]);
        let mut p = ParamSet::new();
        let blocks = if shared {
            vec![add_block(&mut p, "shared", cfg, vocab_size, d_model, &mut r)]
        } else {
            Site::ALL
                .iter()
                .map(|s| add_block(&mut p, s.as_str(), cfg, vocab_size, d_model, &mut r))
                .collect()
        };
        p.set_requires_grad(true);
        Ok(Self {
            cfg: cfg.clone(),
            d_model,
            shared,
            params: p,
            blocks,
        })
    }

    pub fn blocks(&self) -> &[TrsfBlockIdx] {
        &self.blocks
    }

    fn layer(&self, g: &mut Graph<'_>, v: &[Var], b: &TrsfBlockIdx, states: &[CondState], ci: usize) -> Result<Var> {
        let all: Vec<Var> = states.iter().map(|s| s.x).collect();
        let x = g.concat_rows(&all)?;
        let x = g.layer_norm(x, v[b.ln_g], v[b.ln_b])?;
        let offset: usize = states[..ci].iter().map(|s| s.len).sum();
        let c = states[ci];
        let xq = g.slice_rows(x, offset, c.len)?;
        let valid: Vec<bool> = states
            .iter()
            .flat_map(|s| (0..s.len).map(move |i| i < s.n_real))
            .collect();
        let mask = AttnMask::keys(valid);
        let scale = 1.0 / (self.cfg.d as f64).sqrt();
        let heads = b
            .heads
            .iter()
            .map(|&[wq, wk, wv]| {
                let q = g.matmul(xq, v[wq])?;
                let k = g.matmul(x, v[wk])?;
                let val = g.matmul(x, v[wv])?;
                g.attention_ext(q, k, val, None, 1, scale, &mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_cols(&heads)?;
        let u = g.matmul(cat, v[b.merge])?;
        match b.transition {
            Some(t) => {
                let h = g.add(c.x, u)?;
                props::apply_transition(g, v, t, h)
            }
            None => Ok(u),
        }
    }

    fn block_prompt(&self, g: &mut Graph<'_>, v: &[Var], b: &TrsfBlockIdx, cs: &ConditionSet) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let mut states = props::initial_states(g, v[b.emb], cs, cfg.d, cfg.t_p)?;
        for layer in 0..cfg.layers {
            let last = layer + 1 == cfg.layers;
            let n = if last { 1 } else { states.len() };
            let next = (0..n)
                .map(|ci| {
                    let h = self.layer(g, v, b, &states, ci)?;
                    Ok(CondState { x: h, ..states[ci] })
                })
                .collect::<Result<Vec<_>>>()?;
            if last {
                let rows = g.slice_rows(next[0].x, 0, cfg.t_p)?;
                let p = g.matmul(rows, v[b.wo])?;
                let pk = g.slice_cols(p, 0, self.d_model)?;
                let pv = g.slice_cols(p, self.d_model, self.d_model)?;
                return Ok((pk, pv));
            }
            states = next;
        }
        unreachable!("layers >= 1 is validated")
    }

    pub fn generate(&self, g: &mut Graph<'_>, v: &[Var], cs: &ConditionSet, adapt: &Adaptation) -> Result<PromptVars> {
        if self.cfg.t_p > cs.instruction().max_t_c {
            return Err(Error::Config(format!(
                "T_P {} exceeds the instruction clip length {}",
                self.cfg.t_p,
                cs.instruction().max_t_c
            )));
        }
        if self.shared {
            let (pk, pv) = self.block_prompt(g, v, &self.blocks[0], cs)?;
            return Ok(props::shared_pack(adapt, self.cfg.t_p, pk, pv));
        }
        let mut slots = BTreeMap::new();
        for (site, b) in Site::ALL.iter().zip(&self.blocks) {
            let (pk, pv) = self.block_prompt(g, v, b, cs)?;
            for &l in adapt.layers_for(*site) {
                slots.insert((*site, l), (pk, pv));
            }
        }
        Ok(PromptVars {
            t_p: self.cfg.t_p,
            slots,
        })
    }
}

/// Any prompt generator.
#[derive(Debug, Clone)]
pub enum Generator {
    Prefix(PrefixGenerator),
    PrefixPp(PrefixGenerator),
    TrsfP(TrsfGenerator),
    STrsfP(TrsfGenerator),
    Props(PropsGenerator),
}

impl Generator {
    pub fn new(
        kind: GeneratorKind,
        cfg: &PropsConfig,
        vocab_size: usize,
        plm: &PlmConfig,
        adapt: &Adaptation,
        seed: u64,
    ) -> Result<Self> {
        Ok(match kind {
            GeneratorKind::Prefix => Generator::Prefix(PrefixGenerator::new(cfg.t_p, plm, adapt, seed)?),
            GeneratorKind::PrefixPp => Generator::PrefixPp(PrefixGenerator::new(cfg.t_p, plm, adapt, seed)?),
            GeneratorKind::TrsfP => Generator::TrsfP(TrsfGenerator::new(cfg, vocab_size, plm.d_model, false, seed)?),
            GeneratorKind::STrsfP => Generator::STrsfP(TrsfGenerator::new(cfg, vocab_size, plm.d_model, true, seed)?),
            GeneratorKind::Props => Generator::Props(PropsGenerator::new(cfg, vocab_size, plm.d_model, seed)?),
        })
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::Prefix(_) => GeneratorKind::Prefix,
            Generator::PrefixPp(_) => GeneratorKind::PrefixPp,
            Generator::TrsfP(_) => GeneratorKind::TrsfP,
            Generator::STrsfP(_) => GeneratorKind::STrsfP,
            Generator::Props(_) => GeneratorKind::Props,
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Generator::Prefix(g) | Generator::PrefixPp(g) => &g.params,
            Generator::TrsfP(g) | Generator::STrsfP(g) => &g.params,
            Generator::Props(g) => g.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Generator::Prefix(g) | Generator::PrefixPp(g) => &mut g.params,
            Generator::TrsfP(g) | Generator::STrsfP(g) => &mut g.params,
            Generator::Props(g) => g.params_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    /// Builds prompts for one example. Only the rule generator returns
    /// selection traces.
    pub fn generate(
        &self,
        g: &mut Graph<'_>,
        v: &[Var],
        cs: &ConditionSet,
        adapt: &Adaptation,
        ctx: GenCtx,
    ) -> Result<(PromptVars, Vec<SelectionTrace>)> {
        match self {
            Generator::Prefix(p) | Generator::PrefixPp(p) => Ok((p.generate(g, v)?, Vec::new())),
            Generator::TrsfP(t) | Generator::STrsfP(t) => Ok((t.generate(g, v, cs, adapt)?, Vec::new())),
            Generator::Props(p) => p.generate(g, v, cs, adapt, ctx),
        }
    }

    /// Source tokens as the frozen model should see them.
    pub fn prepare_src(&self, src: &[u32], cs: &ConditionSet, sep: u32, max_src_len: usize) -> Result<Vec<u32>> {
        match self {
            Generator::PrefixPp(_) => prefixpp_prepare(src, Some(cs), sep, max_src_len),
            _ => Ok(src[..src.len().min(max_src_len)].to_vec()),
        }
    }
}
