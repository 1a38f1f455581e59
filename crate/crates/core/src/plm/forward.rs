use super::{AttnIdx, FfnIdx, LnIdx, PlmModel, PromptVars, Site};
use crate::error::{Error, Result};
use crate::numkernel::{AttnMask, Graph, Tensor, Var};

/// Model parameters bound into a graph. Frozen models bind as untracked
/// constants so no gradient buffer is ever produced for them.
#[derive(Debug, Clone)]
pub struct PlmVars {
    pub vars: Vec<Var>,
}

impl PlmVars {
    pub fn bind<'a>(model: &'a PlmModel, g: &mut Graph<'a>) -> Self {
        let vars = if model.is_frozen() {
            model.params().bind_frozen(g)
        } else {
            model.params().bind(g)
        };
        Self { vars }
    }

    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }
}

struct Ctx<'m> {
    model: &'m PlmModel,
    pv: &'m PlmVars,
    prompts: Option<&'m PromptVars>,
}

impl Ctx<'_> {
    fn ln(&self, g: &mut Graph<'_>, x: Var, idx: LnIdx) -> Result<Var> {
        g.layer_norm(x, self.pv.at(idx.g), self.pv.at(idx.b))
    }

    fn ffn(&self, g: &mut Graph<'_>, x: Var, idx: FfnIdx) -> Result<Var> {
        let h = g.linear(x, self.pv.at(idx.w1), Some(self.pv.at(idx.b1)))?;
        let h = g.gelu(h)?;
        g.linear(h, self.pv.at(idx.w2), Some(self.pv.at(idx.b2)))
    }

    #[allow(clippy::too_many_arguments)]
    fn attn(
        &self,
        g: &mut Graph<'_>,
        xq: Var,
        xkv: Var,
        idx: AttnIdx,
        site: Site,
        layer: usize,
        mask: &AttnMask,
    ) -> Result<Var> {
        let cfg = self.model.config();
        let q = g.linear(xq, self.pv.at(idx.wq), Some(self.pv.at(idx.bq)))?;
        let k = g.linear(xkv, self.pv.at(idx.wk), Some(self.pv.at(idx.bk)))?;
        let v = g.linear(xkv, self.pv.at(idx.wv), Some(self.pv.at(idx.bv)))?;
        let prompt = self
            .prompts
            .filter(|p| p.t_p > 0)
            .and_then(|p| p.get(site, layer).copied());
        let scale = 1.0 / (cfg.d_head() as f64).sqrt();
        let a = g.attention_ext(q, k, v, prompt, cfg.n_heads, scale, mask)?;
        g.linear(a, self.pv.at(idx.wo), Some(self.pv.at(idx.bo)))
    }

    fn embed(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<Var> {
        let lay = self.model.layout();
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..ids.len()).collect();
        let t = g.gather_rows(self.pv.at(lay.tok_emb), &idx)?;
        let p = g.gather_rows(self.pv.at(lay.pos_emb), &pos)?;
        g.add(t, p)
    }
}

fn check_inputs(model: &PlmModel, src: &[u32], dec_in: &[u32]) -> Result<()> {
    let max = model.config().max_len;
    model.check_tokens(src)?;
    model.check_tokens(dec_in)?;
    if src.len() + 1 > max {
        return Err(Error::dim(format!(
            "source of {} tokens plus end marker exceeds max_len {max}",
            src.len()
        )));
    }
    if dec_in.is_empty() || dec_in.len() > max {
        return Err(Error::dim(format!(
            "decoder input of {} tokens (max_len {max})",
            dec_in.len()
        )));
    }
    Ok(())
}

/// Builds the teacher-forced forward pass into `g` and returns decoder
/// logits `[dec_in.len(), vocab]`. The encoder sees `src` followed by the
/// end token; `dec_in` normally starts with the begin token.
pub fn forward_graph(
    g: &mut Graph<'_>,
    model: &PlmModel,
    pv: &PlmVars,
    src: &[u32],
    dec_in: &[u32],
    prompts: Option<&PromptVars>,
) -> Result<Var> {
    check_inputs(model, src, dec_in)?;
    let ctx = Ctx { model, pv, prompts };
    let lay = model.layout();

    let mut enc_ids = src.to_vec();
    enc_ids.push(super::EOS);
    let mut x = ctx.embed(g, &enc_ids)?;
    let none = AttnMask::none();
    for (l, li) in lay.enc.iter().enumerate() {
        let h = ctx.ln(g, x, li.ln1)?;
        let a = ctx.attn(g, h, h, li.attn, Site::EncSelf, l, &none)?;
        x = g.add(x, a)?;
        let h = ctx.ln(g, x, li.ln2)?;
        let f = ctx.ffn(g, h, li.ffn)?;
        x = g.add(x, f)?;
    }
    let mem = ctx.ln(g, x, lay.enc_ln)?;

    let mut y = ctx.embed(g, dec_in)?;
    let causal = AttnMask::causal();
    for (l, li) in lay.dec.iter().enumerate() {
        let h = ctx.ln(g, y, li.ln1)?;
        let a = ctx.attn(g, h, h, li.self_attn, Site::DecSelf, l, &causal)?;
        y = g.add(y, a)?;
        let h = ctx.ln(g, y, li.ln2)?;
        let c = ctx.attn(g, h, mem, li.cross_attn, Site::Cross, l, &none)?;
        y = g.add(y, c)?;
        let h = ctx.ln(g, y, li.ln3)?;
        let f = ctx.ffn(g, h, li.ffn)?;
        y = g.add(y, f)?;
    }
    let y = ctx.ln(g, y, lay.dec_ln)?;
    g.linear(y, pv.at(lay.out_w), Some(pv.at(lay.out_b)))
}

/// Convenience wrapper: forward without gradients, returning the logits.
pub fn forward(model: &PlmModel, src: &[u32], dec_in: &[u32], prompts: Option<&super::PromptPack>) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = PlmVars {
        vars: model.params().bind_frozen(&mut g),
    };
    let pvars = match prompts {
        Some(p) => {
            p.validate_shapes(model.config())?;
            let mut slots = std::collections::BTreeMap::new();
            for (k, (a, b)) in &p.slots {
                slots.insert(*k, (g.frozen(a), g.frozen(b)));
            }
            Some(PromptVars { t_p: p.t_p, slots })
        }
        None => None,
    };
    let logits = forward_graph(&mut g, model, &pv, src, dec_in, pvars.as_ref())?;
    Ok(g.to_tensor(logits))
}
