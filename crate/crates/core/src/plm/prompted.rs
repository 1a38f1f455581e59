use crate::error::{Error, Result};
use crate::numkernel::kernels::{self, AttnDims, AttnMask};
use crate::numkernel::Tensor;

/// Output of [`prompted_attention`].
#[derive(Debug, Clone)]
pub struct PromptedAttention {
    pub out: Tensor,
    /// Softmax mass on the prompt slots, one value per query.
    pub alpha: Vec<f64>,
}

fn single_head(
    q: &Tensor,
    k: Option<&Tensor>,
    v: Option<&Tensor>,
    p: Option<(&Tensor, &Tensor)>,
    scale: f64,
) -> Vec<f64> {
    let tk = k.map_or(0, Tensor::rows);
    let tp = p.map_or(0, |(pk, _)| pk.rows());
    let dv = v.or(p.map(|(_, pv)| pv)).map(Tensor::cols).unwrap_or(0);
    let dims = AttnDims {
        tq: q.rows(),
        tk,
        tp,
        dqk: q.cols(),
        dv,
        heads: 1,
    };
    kernels::attention_forward(
        q.data(),
        k.map_or(&[][..], Tensor::data),
        v.map_or(&[][..], Tensor::data),
        p.map(|(pk, _)| pk.data()),
        p.map(|(_, pv)| pv.data()),
        dims,
        scale,
        &AttnMask::none(),
    )
    .0
}

fn check(q: &Tensor, k: &Tensor, v: &Tensor, prompt: Option<(&Tensor, &Tensor)>) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::dim(format!(
            "Q {:?} / K {:?} / V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some((pk, pv)) = prompt {
        if pk.cols() != k.cols() || pv.cols() != v.cols() || pk.rows() != pv.rows() {
            return Err(Error::dim(format!(
                "prompt keys {:?} / values {:?} vs keys {:?} / values {:?}",
                pk.shape(),
                pv.shape(),
                k.shape(),
                v.shape()
            )));
        }
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gate per query: `Σ exp(q·P_k) / (Σ exp(q·P_k) + Σ exp(q·K))`, computed
/// independently of the concatenated softmax.
pub fn gate_alpha(q: &Tensor, k: &Tensor, pk: Option<&Tensor>, scale: f64) -> Vec<f64> {
    (0..q.rows())
        .map(|i| {
            let Some(pk) = pk else { return 0.0 };
            let qi = q.row(i);
            let sp = (0..pk.rows()).map(|s| scale * kernels::dot(qi, pk.row(s)));
            let sk = (0..k.rows()).map(|j| scale * kernels::dot(qi, k.row(j)));
            let (lp, lk) = (log_sum_exp(sp), log_sum_exp(sk));
            // sigmoid(lp - lk)
            1.0 / (1.0 + (lk - lp).exp())
        })
        .collect()
}

/// Decomposed form `alpha·Attn(Q,P_k,P_v) + (1−alpha)·Attn(Q,K,V)`.
pub fn gated_form(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    prompt: Option<(&Tensor, &Tensor)>,
    scale: f64,
) -> Result<Tensor> {
    check(q, k, v, prompt)?;
    let base = single_head(q, Some(k), Some(v), None, scale);
    let Some((pk, pv)) = prompt else {
        return Tensor::new(vec![q.rows(), v.cols()], base);
    };
    let on_prompt = single_head(q, None, None, Some((pk, pv)), scale);
    let alpha = gate_alpha(q, k, Some(pk), scale);
    let dv = v.cols();
    let out = (0..q.rows() * dv)
        .map(|n| {
            let a = alpha[n / dv];
            a * on_prompt[n] + (1.0 - a) * base[n]
        })
        .collect();
    Tensor::new(vec![q.rows(), dv], out)
}

/// Single-head attention over `[P_k ‖ K]` / `[P_v ‖ V]`. `prompt = None`
/// is the `T_P = 0` case. With `verify`, the gated decomposition is
/// recomputed and must agree within `1e-9`.
pub fn prompted_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    prompt: Option<(&Tensor, &Tensor)>,
    scale: f64,
    verify: bool,
) -> Result<PromptedAttention> {
    check(q, k, v, prompt)?;
    let data = single_head(q, Some(k), Some(v), prompt, scale);
    let out = Tensor::new(vec![q.rows(), v.cols()], data)?;
    let alpha = gate_alpha(q, k, prompt.map(|p| p.0), scale);
    if verify {
        let alt = gated_form(q, k, v, prompt, scale)?;
        let diff = out.max_abs_diff(&alt);
        if !(diff < 1e-9) {
            return Err(Error::Contract(format!(
                "concatenated and gated attention differ by {diff:e}"
            )));
        }
    }
    Ok(PromptedAttention { out, alpha })
}
