//! Graph-free inference with a key/value cache for greedy decoding.

use super::{AttnIdx, FfnIdx, LnIdx, PlmModel, PromptPack, Site, BOS, EOS};
use crate::error::{Error, Result};
use crate::numkernel::kernels::{self, AttnDims, AttnMask};

struct Weights<'m> {
    model: &'m PlmModel,
}

impl Weights<'_> {
    fn p(&self, i: usize) -> &[f64] {
        self.model.params().tensor(i).data()
    }

    fn d(&self) -> usize {
        self.model.config().d_model
    }

    fn linear(&self, x: &[f64], w: usize, b: usize) -> Vec<f64> {
        let wt = self.model.params().tensor(w);
        let (k, n) = (wt.rows(), wt.cols());
        let mut out = kernels::matmul(x, wt.data(), x.len() / k, k, n);
        kernels::add_row_bias(&mut out, self.p(b));
        out
    }

    fn ln(&self, x: &[f64], idx: LnIdx) -> Vec<f64> {
        kernels::layer_norm(x, self.p(idx.g), self.p(idx.b)).0
    }

    fn ffn(&self, x: &[f64], idx: FfnIdx) -> Vec<f64> {
        let mut h = self.linear(x, idx.w1, idx.b1);
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.linear(&h, idx.w2, idx.b2)
    }

    fn embed(&self, ids: &[u32], start: usize) -> Vec<f64> {
        let d = self.d();
        let lay = self.model.layout();
        let (tok, pos) = (self.p(lay.tok_emb), self.p(lay.pos_emb));
        let mut out = Vec::with_capacity(ids.len() * d);
        for (t, &id) in ids.iter().enumerate() {
            let r = id as usize * d;
            let pr = (start + t) * d;
            out.extend((0..d).map(|j| tok[r + j] + pos[pr + j]));
        }
        out
    }

    fn attend(
        &self,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        prompt: Option<&(crate::numkernel::Tensor, crate::numkernel::Tensor)>,
        mask: &AttnMask,
    ) -> Vec<f64> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let dims = AttnDims {
            tq: q.len() / d,
            tk: k.len() / d,
            tp: prompt.map_or(0, |p| p.0.rows()),
            dqk: d,
            dv: d,
            heads: cfg.n_heads,
        };
        let scale = 1.0 / (cfg.d_head() as f64).sqrt();
        kernels::attention_forward(
            q,
            k,
            v,
            prompt.map(|p| p.0.data()),
            prompt.map(|p| p.1.data()),
            dims,
            scale,
            mask,
        )
        .0
    }

    fn attn_block(
        &self,
        xq: &[f64],
        xkv: &[f64],
        idx: AttnIdx,
        prompt: Option<&(crate::numkernel::Tensor, crate::numkernel::Tensor)>,
        mask: &AttnMask,
    ) -> Vec<f64> {
        let q = self.linear(xq, idx.wq, idx.bq);
        let k = self.linear(xkv, idx.wk, idx.bk);
        let v = self.linear(xkv, idx.wv, idx.bv);
        let a = self.attend(&q, &k, &v, prompt, mask);
        self.linear(&a, idx.wo, idx.bo)
    }
}

fn slot<'p>(
    prompts: Option<&'p PromptPack>,
    site: Site,
    layer: usize,
) -> Option<&'p (crate::numkernel::Tensor, crate::numkernel::Tensor)> {
    prompts.filter(|p| p.t_p > 0).and_then(|p| p.get(site, layer))
}

fn add_into(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

/// Encoder memory `[src.len() + 1, d_model]` after the final layer norm.
pub fn encode_only(model: &PlmModel, src: &[u32], prompts: Option<&PromptPack>) -> Result<Vec<f64>> {
    model.check_tokens(src)?;
    if src.len() + 1 > model.config().max_len {
        return Err(Error::dim(format!("source of {} tokens exceeds max_len", src.len())));
    }
    if let Some(p) = prompts {
        p.validate_shapes(model.config())?;
    }
    let w = Weights { model };
    let lay = model.layout();
    let mut ids = src.to_vec();
    ids.push(EOS);
    let mut x = w.embed(&ids, 0);
    let none = AttnMask::none();
    for (l, li) in lay.enc.iter().enumerate() {
        let h = w.ln(&x, li.ln1);
        let a = w.attn_block(&h, &h, li.attn, slot(prompts, Site::EncSelf, l), &none);
        add_into(&mut x, &a);
        let h = w.ln(&x, li.ln2);
        let f = w.ffn(&h, li.ffn);
        add_into(&mut x, &f);
    }
    Ok(w.ln(&x, lay.enc_ln))
}

/// Incremental decoder state: per-layer cached self-attention keys/values
/// and cross-attention keys/values over the encoder memory.
pub struct DecodeState<'m> {
    model: &'m PlmModel,
    prompts: Option<&'m PromptPack>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
    pos: usize,
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m PlmModel, src: &[u32], prompts: Option<&'m PromptPack>) -> Result<Self> {
        let mem = encode_only(model, src, prompts)?;
        let w = Weights { model };
        let lay = model.layout();
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for li in &lay.dec {
            cross_k.push(w.linear(&mem, li.cross_attn.wk, li.cross_attn.bk));
            cross_v.push(w.linear(&mem, li.cross_attn.wv, li.cross_attn.bv));
        }
        let n = lay.dec.len();
        Ok(Self {
            model,
            prompts,
            self_k: vec![Vec::new(); n],
            self_v: vec![Vec::new(); n],
            cross_k,
            cross_v,
            pos: 0,
        })
    }

    /// Feeds one decoder token and returns next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f64>> {
        self.model.check_tokens(&[token])?;
        if self.pos >= self.model.config().max_len {
            return Err(Error::Generation(format!(
                "decoder position {} reaches max_len",
                self.pos
            )));
        }
        let w = Weights { model: self.model };
        let lay = self.model.layout();
        let none = AttnMask::none();
        let mut y = w.embed(&[token], self.pos);
        for (l, li) in lay.dec.iter().enumerate() {
            let h = w.ln(&y, li.ln1);
            let sa = li.self_attn;
            let q = w.linear(&h, sa.wq, sa.bq);
            self.self_k[l].extend(w.linear(&h, sa.wk, sa.bk));
            self.self_v[l].extend(w.linear(&h, sa.wv, sa.bv));
            let a = w.attend(
                &q,
                &self.self_k[l],
                &self.self_v[l],
                slot(self.prompts, Site::DecSelf, l),
                &none,
            );
            add_into(&mut y, &w.linear(&a, sa.wo, sa.bo));

            let h = w.ln(&y, li.ln2);
            let ca = li.cross_attn;
            let q = w.linear(&h, ca.wq, ca.bq);
            let a = w.attend(
                &q,
                &self.cross_k[l],
                &self.cross_v[l],
                slot(self.prompts, Site::Cross, l),
                &none,
            );
            add_into(&mut y, &w.linear(&a, ca.wo, ca.bo));

            let h = w.ln(&y, li.ln3);
            add_into(&mut y, &w.ffn(&h, li.ffn));
        }
        self.pos += 1;
        let y = w.ln(&y, lay.dec_ln);
        Ok(w.linear(&y, lay.out_w, lay.out_b))
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. The returned sequence includes the end token when one
/// was produced within `max_len` steps.
pub fn decode_greedy(model: &PlmModel, src: &[u32], prompts: Option<&PromptPack>, max_len: usize) -> Result<Vec<u32>> {
    let mut st = DecodeState::new(model, src, prompts)?;
    let limit = max_len.min(model.config().max_len);
    let mut out = Vec::new();
    let mut tok = BOS;
    while out.len() < limit {
        let logits = st.step(tok)?;
        tok = argmax(&logits) as u32;
        out.push(tok);
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}
