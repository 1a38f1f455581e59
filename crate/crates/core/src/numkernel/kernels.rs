//! Slice-level numeric kernels shared by the autodiff graph and the
//! graph-free inference path. All matrices are row-major.

pub const LN_EPS: f64 = 1e-5;

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k,n] += aᵀ · g` for `a[m,k]`, `g[m,n]`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m,k] += g · bᵀ` for `g[m,n]`, `b[k,n]`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            *o += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        row.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
    }
}

/// In-place numerically stable softmax over a contiguous slice.
pub fn softmax_inplace(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise layer norm. Returns `(y, xhat, rstd)`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Which keys a query may attend to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttnMask {
    /// Query `i` sees key `j` only if `j <= i + causal_offset`.
    pub causal: bool,
    pub causal_offset: usize,
    /// Per-key validity; `None` means every key is valid.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        Self {
            causal: true,
            ..Self::default()
        }
    }

    pub fn keys(valid: Vec<bool>) -> Self {
        Self {
            key_valid: Some(valid),
            ..Self::default()
        }
    }

    #[inline]
    pub fn visible(&self, query: usize, key: usize) -> bool {
        if self.causal && key > query + self.causal_offset {
            return false;
        }
        match &self.key_valid {
            Some(v) => v[key],
            None => true,
        }
    }
}

/// Shapes for a (multi-head) attention call with optional prompt slots.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub tq: usize,
    pub tk: usize,
    pub tp: usize,
    pub dqk: usize,
    pub dv: usize,
    pub heads: usize,
}

/// Multi-head attention over `[prompt ‖ keys]`. Heads split the feature
/// columns into contiguous blocks. Returns `(out[tq,dv], probs[heads,tq,tp+tk])`.
/// Prompt slots are visible to every query; the mask applies to `keys` only.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    pk: Option<&[f64]>,
    pv: Option<&[f64]>,
    dims: AttnDims,
    scale: f64,
    mask: &AttnMask,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        tq,
        tk,
        tp,
        dqk,
        dv,
        heads,
    } = dims;
    let hq = dqk / heads;
    let hv = dv / heads;
    let width = tp + tk;
    let mut out = vec![0.0; tq * dv];
    let mut probs = vec![0.0; heads * tq * width];
    let mut scores = vec![0.0; width];
    let mut valid = vec![false; width];
    for h in 0..heads {
        let qo = h * hq;
        let vo = h * hv;
        for i in 0..tq {
            let qrow = &q[i * dqk + qo..i * dqk + qo + hq];
            let mut max = f64::NEG_INFINITY;
            for s in 0..width {
                let (ok, krow) = if s < tp {
                    (true, &pk.unwrap()[s * dqk + qo..s * dqk + qo + hq])
                } else {
                    let j = s - tp;
                    (mask.visible(i, j), &k[j * dqk + qo..j * dqk + qo + hq])
                };
                valid[s] = ok;
                if ok {
                    let sc = scale * dot(qrow, krow);
                    scores[s] = sc;
                    if sc > max {
                        max = sc;
                    }
                }
            }
            let mut sum = 0.0;
            for s in 0..width {
                if valid[s] {
                    scores[s] = (scores[s] - max).exp();
                    sum += scores[s];
                } else {
                    scores[s] = 0.0;
                }
            }
            let prow = &mut probs[(h * tq + i) * width..(h * tq + i + 1) * width];
            let orow = &mut out[i * dv + vo..i * dv + vo + hv];
            for s in 0..width {
                let p = scores[s] / sum;
                prow[s] = p;
                if p == 0.0 {
                    continue;
                }
                let vrow = if s < tp {
                    &pv.unwrap()[s * dv + vo..s * dv + vo + hv]
                } else {
                    let j = s - tp;
                    &v[j * dv + vo..j * dv + vo + hv]
                };
                for (o, &x) in orow.iter_mut().zip(vrow) {
                    *o += p * x;
                }
            }
        }
    }
    (out, probs)
}

/// Gradient buffers for [`attention_backward`].
pub struct AttnGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dpk: Vec<f64>,
    pub dpv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    pk: Option<&[f64]>,
    pv: Option<&[f64]>,
    probs: &[f64],
    dout: &[f64],
    dims: AttnDims,
    scale: f64,
) -> AttnGrads {
    let AttnDims {
        tq,
        tk,
        tp,
        dqk,
        dv,
        heads,
    } = dims;
    let hq = dqk / heads;
    let hv = dv / heads;
    let width = tp + tk;
    let mut g = AttnGrads {
        dq: vec![0.0; tq * dqk],
        dk: vec![0.0; tk * dqk],
        dv: vec![0.0; tk * dv],
        dpk: vec![0.0; tp * dqk],
        dpv: vec![0.0; tp * dv],
    };
    let mut dp = vec![0.0; width];
    for h in 0..heads {
        let qo = h * hq;
        let vo = h * hv;
        for i in 0..tq {
            let prow = &probs[(h * tq + i) * width..(h * tq + i + 1) * width];
            let dorow = &dout[i * dv + vo..i * dv + vo + hv];
            let mut acc = 0.0;
            for s in 0..width {
                if prow[s] == 0.0 {
                    dp[s] = 0.0;
                    continue;
                }
                let (vrow, dvrow) = if s < tp {
                    (
                        &pv.unwrap()[s * dv + vo..s * dv + vo + hv],
                        &mut g.dpv[s * dv + vo..s * dv + vo + hv],
                    )
                } else {
                    let j = s - tp;
                    (
                        &v[j * dv + vo..j * dv + vo + hv],
                        &mut g.dv[j * dv + vo..j * dv + vo + hv],
                    )
                };
                dp[s] = dot(dorow, vrow);
                acc += prow[s] * dp[s];
                for (d, &o) in dvrow.iter_mut().zip(dorow) {
                    *d += prow[s] * o;
                }
            }
            let qrow = &q[i * dqk + qo..i * dqk + qo + hq];
            for s in 0..width {
                if prow[s] == 0.0 {
                    continue;
                }
                let ds = prow[s] * (dp[s] - acc) * scale;
                let (krow, dkrow) = if s < tp {
                    (
                        &pk.unwrap()[s * dqk + qo..s * dqk + qo + hq],
                        &mut g.dpk[s * dqk + qo..s * dqk + qo + hq],
                    )
                } else {
                    let j = s - tp;
                    (
                        &k[j * dqk + qo..j * dqk + qo + hq],
                        &mut g.dk[j * dqk + qo..j * dqk + qo + hq],
                    )
                };
                for (d, &x) in dkrow.iter_mut().zip(qrow) {
                    *d += ds * x;
                }
                let dqrow = &mut g.dq[i * dqk + qo..i * dqk + qo + hq];
                for (d, &x) in dqrow.iter_mut().zip(krow) {
                    *d += ds * x;
                }
            }
        }
    }
    g
}
