//! A small encoder–decoder transformer that plays the frozen pretrained
//! model. Every attention site accepts prompt key/value rows prepended to
//! its keys and values.

mod forward;
mod infer;
mod pretrain;
mod prompted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numkernel::{Tensor, Var};
use crate::params::ParamSet;
use crate::rng;

pub use forward::{forward, forward_graph, PlmVars};
pub use infer::{decode_greedy, encode_only, DecodeState};
pub use pretrain::{
    pretrain, pretrain_corpus, random_bijections, token_accuracy, Bijection, CorpusSpec, PretrainConfig,
    PretrainExample, PretrainReport,
};
pub use prompted::{gate_alpha, gated_form, prompted_attention, PromptedAttention};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for PlmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 128,
            max_len: 64,
        }
    }
}

impl PlmConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.ffn_dim,
            self.max_len,
        ];
        if fields.iter().any(|&f| f == 0) {
            return Err(Error::Config(format!("every model field must be >= 1: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count (see README for the breakdown).
    pub fn param_count(&self) -> usize {
        let (v, d, f, t) = (self.vocab_size, self.d_model, self.ffn_dim, self.max_len);
        let attn = 4 * d * d + 4 * d;
        let ffn = 2 * d * f + f + d;
        let ln = 2 * d;
        let enc_layer = 2 * ln + attn + ffn;
        let dec_layer = 3 * ln + 2 * attn + ffn;
        v * d + t * d + self.n_enc_layers * enc_layer + self.n_dec_layers * dec_layer + 2 * ln + d * v + v
    }
}

/// One of the three attention sites a prompt can target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    EncSelf,
    DecSelf,
    Cross,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncSelf, Site::DecSelf, Site::Cross];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::EncSelf => "enc_self",
            Site::DecSelf => "dec_self",
            Site::Cross => "cross",
        }
    }
}

/// Which layers receive prompts. Encoder layers get `enc_self`; decoder
/// layers get `dec_self` and `cross`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adaptation {
    pub enc_layers: Vec<usize>,
    pub dec_layers: Vec<usize>,
}

impl Adaptation {
    pub fn all(cfg: &PlmConfig) -> Self {
        Self {
            enc_layers: (0..cfg.n_enc_layers).collect(),
            dec_layers: (0..cfg.n_dec_layers).collect(),
        }
    }

    /// `(site, layer)` pairs in canonical order.
    pub fn sites(&self) -> Vec<(Site, usize)> {
        let mut out: Vec<(Site, usize)> = self.enc_layers.iter().map(|&l| (Site::EncSelf, l)).collect();
        out.extend(self.dec_layers.iter().map(|&l| (Site::DecSelf, l)));
        out.extend(self.dec_layers.iter().map(|&l| (Site::Cross, l)));
        out
    }

    pub fn layers_for(&self, site: Site) -> &[usize] {
        match site {
            Site::EncSelf => &self.enc_layers,
            Site::DecSelf | Site::Cross => &self.dec_layers,
        }
    }

    pub fn validate(&self, cfg: &PlmConfig) -> Result<()> {
        if self.enc_layers.iter().any(|&l| l >= cfg.n_enc_layers)
            || self.dec_layers.iter().any(|&l| l >= cfg.n_dec_layers)
        {
            return Err(Error::Config(format!("adapted layers {self:?} exceed the model depth")));
        }
        Ok(())
    }
}

/// Prompt key/value pairs per `(site, layer)`, generic over tensors or graph
/// variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSlots<T> {
    pub t_p: usize,
    pub slots: BTreeMap<(Site, usize), (T, T)>,
}

impl<T> PromptSlots<T> {
    pub fn empty() -> Self {
        Self {
            t_p: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn get(&self, site: Site, layer: usize) -> Option<&(T, T)> {
        self.slots.get(&(site, layer))
    }
}

/// Concrete prompts: `P_k`, `P_v` of shape `[T_P, d_model]` per site.
pub type PromptPack = PromptSlots<Tensor>;
/// Prompts as graph variables.
pub type PromptVars = PromptSlots<Var>;

impl PromptPack {
    /// Checks that slots exactly match `adapt` and carry `[t_p, d_model]` tensors.
    pub fn validate(&self, cfg: &PlmConfig, adapt: &Adaptation) -> Result<()> {
        if self.t_p == 0 {
            return if self.slots.is_empty() {
                Ok(())
            } else {
                Err(Error::Contract("T_P = 0 prompt pack with slots".into()))
            };
        }
        let want = adapt.sites();
        let have: Vec<(Site, usize)> = self.slots.keys().copied().collect();
        let mut want_sorted = want.clone();
        want_sorted.sort();
        if have != want_sorted {
            return Err(Error::Contract(format!(
                "prompt sites {have:?} do not match adapted sites {want_sorted:?}"
            )));
        }
        self.validate_shapes(cfg)
    }

    /// Checks tensor shapes only, for packs covering any subset of sites.
    pub fn validate_shapes(&self, cfg: &PlmConfig) -> Result<()> {
        for (k, (pk, pv)) in &self.slots {
            for t in [pk, pv] {
                if t.shape() != [self.t_p, cfg.d_model] {
                    return Err(Error::dim(format!(
                        "prompt {k:?} has shape {:?}, expected [{}, {}]",
                        t.shape(),
                        self.t_p,
                        cfg.d_model
                    )));
                }
            }
        }
        Ok(())
    }
}

impl PromptVars {
    /// Reads the graph values back into a [`PromptPack`].
    pub fn to_pack(&self, g: &crate::numkernel::Graph<'_>) -> PromptPack {
        PromptSlots {
            t_p: self.t_p,
            slots: self
                .slots
                .iter()
                .map(|(k, (a, b))| (*k, (g.to_tensor(*a), g.to_tensor(*b))))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross_attn: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub out_w: usize,
    pub out_b: usize,
}

/// Builds the parameter set in canonical order. `init` is called with
/// `(shape, fan_in)` for weight matrices; layer-norm gains start at one and
/// biases at zero.
fn build_layout(cfg: &PlmConfig, mut init: impl FnMut(&[usize], usize) -> Tensor) -> (ParamSet, Layout) {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ffn_dim);
    let mut p = ParamSet::new();
    let ln = |p: &mut ParamSet, name: &str| LnIdx {
        g: p.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
        b: p.add(format!("{name}.bias"), Tensor::zeros(&[d])),
    };
    let tok_emb = p.add("tok_emb", init(&[v, d], d));
    let pos_emb = p.add("pos_emb", init(&[cfg.max_len, d], d));
    let attn = |p: &mut ParamSet, name: &str, init: &mut dyn FnMut(&[usize], usize) -> Tensor| AttnIdx {
        wq: p.add(format!("{name}.wq"), init(&[d, d], d)),
        bq: p.add(format!("{name}.bq"), Tensor::zeros(&[d])),
        wk: p.add(format!("{name}.wk"), init(&[d, d], d)),
        bk: p.add(format!("{name}.bk"), Tensor::zeros(&[d])),
        wv: p.add(format!("{name}.wv"), init(&[d, d], d)),
        bv: p.add(format!("{name}.bv"), Tensor::zeros(&[d])),
        wo: p.add(format!("{name}.wo"), init(&[d, d], d)),
        bo: p.add(format!("{name}.bo"), Tensor::zeros(&[d])),
    };
    let ffn = |p: &mut ParamSet, name: &str, init: &mut dyn FnMut(&[usize], usize) -> Tensor| FfnIdx {
        w1: p.add(format!("{name}.w1"), init(&[d, f], d)),
        b1: p.add(format!("{name}.b1"), Tensor::zeros(&[f])),
        w2: p.add(format!("{name}.w2"), init(&[f, d], f)),
        b2: p.add(format!("{name}.b2"), Tensor::zeros(&[d])),
    };
    let mut enc = Vec::new();
    for l in 0..cfg.n_enc_layers {
        let n = format!("enc.{l}");
        let ln1 = ln(&mut p, &format!("{n}.ln1"));
        let a = attn(&mut p, &format!("{n}.attn"), &mut init);
        let ln2 = ln(&mut p, &format!("{n}.ln2"));
        let ff = ffn(&mut p, &format!("{n}.ffn"), &mut init);
        enc.push(EncLayerIdx {
            ln1,
            attn: a,
            ln2,
            ffn: ff,
        });
    }
    let enc_ln = ln(&mut p, "enc.ln_final");
    let mut dec = Vec::new();
    for l in 0..cfg.n_dec_layers {
        let n = format!("dec.{l}");
        let ln1 = ln(&mut p, &format!("{n}.ln1"));
        let sa = attn(&mut p, &format!("{n}.self_attn"), &mut init);
        let ln2 = ln(&mut p, &format!("{n}.ln2"));
        let ca = attn(&mut p, &format!("{n}.cross_attn"), &mut init);
        let ln3 = ln(&mut p, &format!("{n}.ln3"));
        let ff = ffn(&mut p, &format!("{n}.ffn"), &mut init);
        dec.push(DecLayerIdx {
            ln1,
            self_attn: sa,
            ln2,
            cross_attn: ca,
            ln3,
            ffn: ff,
        });
    }
    let dec_ln = ln(&mut p, "dec.ln_final");
    let out_w = p.add("out.w", init(&[d, v], d));
    let out_b = p.add("out.b", Tensor::zeros(&[v]));
    (
        p,
        Layout {
            tok_emb,
            pos_emb,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
        },
    )
}

#[derive(Debug, Clone)]
pub struct PlmModel {
    config: PlmConfig,
    params: ParamSet,
    layout: Layout,
    frozen: bool,
    fingerprint: u64,
}

/// Builds a model with weights drawn from `U(±1/√fan_in)`.
pub fn build_plm(cfg: &PlmConfig, seed: u64) -> Result<PlmModel> {
    cfg.validate()?;
    let mut r = rng::stream(seed, &[0x706c6d]);
    let (params, layout) = build_layout(cfg, |shape, fan_in| {
        Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut r)
    });
    let fingerprint = params.fingerprint();
    Ok(PlmModel {
        config: cfg.clone(),
        params,
        layout,
        frozen: false,
        fingerprint,
    })
}

impl PlmModel {
    /// Rebuilds a model from stored parameters; names and shapes must match
    /// the canonical layout for `cfg`.
    pub fn from_params(cfg: &PlmConfig, stored: ParamSet, frozen: bool) -> Result<Self> {
        cfg.validate()?;
        let (mut params, layout) = build_layout(cfg, |shape, _| Tensor::zeros(shape));
        params.assign_from(&stored)?;
        let fingerprint = params.fingerprint();
        Ok(Self {
            config: cfg.clone(),
            params,
            layout,
            frozen,
            fingerprint,
        })
    }

    pub fn config(&self) -> &PlmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Fingerprint recorded at build/freeze/load time.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Fingerprint recomputed from the current parameter bytes.
    pub fn current_fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.params.set_requires_grad(false);
        self.fingerprint = self.params.fingerprint();
    }

    /// Mutable access for training; refused once frozen.
    pub(crate) fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(Error::FrozenViolation);
        }
        Ok(&mut self.params)
    }

    pub(crate) fn refresh_fingerprint(&mut self) {
        self.fingerprint = self.params.fingerprint();
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.save_tagged(path, None)
    }

    /// Saves with an optional free-form tag stored in the metadata.
    pub fn save_tagged(&self, path: &std::path::Path, tag: Option<&str>) -> Result<()> {
        let c = &self.config;
        let mut meta = BTreeMap::new();
        for (k, v) in [
            ("vocab_size", c.vocab_size),
            ("d_model", c.d_model),
            ("n_heads", c.n_heads),
            ("n_enc_layers", c.n_enc_layers),
            ("n_dec_layers", c.n_dec_layers),
            ("ffn_dim", c.ffn_dim),
            ("max_len", c.max_len),
        ] {
            meta.insert(k.to_string(), v.to_string());
        }
        meta.insert("frozen".into(), self.frozen.to_string());
        if let Some(t) = tag {
            meta.insert("tag".into(), t.to_string());
        }
        checkpoint::save(path, "plm", &meta, &self.params)
    }

    /// Loads a checkpoint written by [`PlmModel::save`]; the payload
    /// fingerprint is verified on read.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(Self::load_tagged(path)?.0)
    }

    /// Like [`PlmModel::load`], also returning the stored tag.
    pub fn load_tagged(path: &std::path::Path) -> Result<(Self, Option<String>)> {
        let ck = checkpoint::load(path)?;
        if ck.kind != "plm" {
            return Err(Error::integrity(
                "header",
                format!("kind `{}` is not a model checkpoint", ck.kind),
            ));
        }
        let field = |k: &str| -> Result<usize> {
            ck.meta
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::integrity("meta", format!("missing or invalid `{k}`")))
        };
        let cfg = PlmConfig {
            vocab_size: field("vocab_size")?,
            d_model: field("d_model")?,
            n_heads: field("n_heads")?,
            n_enc_layers: field("n_enc_layers")?,
            n_dec_layers: field("n_dec_layers")?,
            ffn_dim: field("ffn_dim")?,
            max_len: field("max_len")?,
        };
        let frozen = ck.meta.get("frozen").map(String::as_str) == Some("true");
        let tag = ck.meta.get("tag").cloned();
        let mut m = Self::from_params(&cfg, ck.params, false)?;
        if frozen {
            m.freeze();
        }
        Ok((m, tag))
    }

    pub fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::Vocabulary {
                id,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }
}
