//! Central finite-difference checking of graph gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttnMask, Graph, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a|, |b|)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-8_f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares autodiff against central differences for a scalar function of
/// `inputs`. `max_coords` caps the number of sampled coordinates (`None`
/// checks all of them).
pub fn check<'a, F>(f: F, inputs: &[Tensor], max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    check_impl(f, inputs, max_coords, seed, false)
}

/// [`check`] on graphs with relaxed straight-through selection, for
/// functions that contain hard top-k choices.
pub fn check_relaxed<'a, F>(f: F, inputs: &[Tensor], max_coords: Option<usize>, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    check_impl(f, inputs, max_coords, seed, true)
}

fn check_impl<'a, F>(
    f: F,
    inputs: &[Tensor],
    max_coords: Option<usize>,
    seed: u64,
    relaxed: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let tracked: Vec<Tensor> = inputs.iter().cloned().map(Tensor::with_grad).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new().with_relaxed_selection(relaxed);
        let vars = tracked
            .iter()
            .map(|t| g.input(t.shape(), t.data().to_vec(), true))
            .collect::<Result<Vec<Var>>>()?;
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(&tracked)
            .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]))
            .collect()
    };

    let mut coords: Vec<(usize, usize)> = tracked
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if let Some(cap) = max_coords {
        if coords.len() > cap {
            coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            coords.truncate(cap);
        }
    }

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut perturbed = tracked.clone();
        perturbed[which].data_mut()[coord] += delta;
        let mut g = Graph::new().with_relaxed_selection(relaxed);
        let vars = perturbed
            .iter()
            .map(|t| g.input(t.shape(), t.data().to_vec(), false))
            .collect::<Result<Vec<Var>>>()?;
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport::default();
    for (i, j) in coords {
        let plus = eval(i, j, FD_STEP)?;
        let minus = eval(i, j, -FD_STEP)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[i][j];
        let e = rel_err(a, numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((i, j, a, numeric));
        }
    }
    Ok(report)
}

pub type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<'_>, &[Var]) -> Result<Var>);

fn weighted_sum(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    // fixed random projection so gradients are not trivially uniform
    let n = g.value(y).len();
    let w = Tensor::uniform(&[n], 1.0, &mut crate::rng::stream(seed, &[9]));
    let wv = g.constant(g.shape(y).to_vec().as_slice(), w.into_data())?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

/// Named scalar functions covering every differentiable graph op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
        ("transpose", vec![vec![3, 4]], |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y, 2)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(v[0], v[1])?;
            let y = g.mul(a, s)?;
            weighted_sum(g, y, 3)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 4)
        }),
        ("scale_by", vec![vec![3, 2], vec![1]], |g, v| {
            let y = g.scale_by(v[0], v[1])?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 5)
        }),
        ("mul_rows_by_col", vec![vec![3, 2], vec![3, 1]], |g, v| {
            let y = g.mul_rows_by_col(v[0], v[1])?;
            weighted_sum(g, y, 6)
        }),
        ("gelu", vec![vec![2, 5]], |g, v| {
            let y = g.gelu(v[0])?;
            weighted_sum(g, y, 7)
        }),
        ("tanh", vec![vec![2, 5]], |g, v| {
            let y = g.tanh(v[0])?;
            weighted_sum(g, y, 8)
        }),
        ("softmax_last", vec![vec![3, 5]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y, 9)
        }),
        ("softmax_first", vec![vec![4, 3]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            weighted_sum(g, y, 10)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, 11)
        }),
        ("attention", vec![vec![3, 4], vec![5, 4], vec![5, 3]], |g, v| {
            let y = g.attention(v[0], v[1], v[2], 0.5)?;
            weighted_sum(g, y, 12)
        }),
        (
            "prompted_multihead_attention_causal",
            vec![vec![4, 6], vec![4, 6], vec![4, 6], vec![2, 6], vec![2, 6]],
            |g, v| {
                let y = g.attention_ext(v[0], v[1], v[2], Some((v[3], v[4])), 2, 0.4, &AttnMask::causal())?;
                weighted_sum(g, y, 13)
            },
        ),
        ("cross_entropy", vec![vec![3, 5]], |g, v| {
            g.cross_entropy(v[0], &[1, 4, 0])
        }),
        ("gather_rows", vec![vec![5, 3]], |g, v| {
            let y = g.gather_rows(v[0], &[4, 1, 4])?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 14)
        }),
        ("concat_slice", vec![vec![2, 3], vec![3, 3]], |g, v| {
            let c = g.concat_rows(&[v[0], v[1]])?;
            let s = g.slice_rows(c, 1, 3)?;
            let cc = g.concat_cols(&[s, s])?;
            let y = g.slice_cols(cc, 2, 3)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, 15)
        }),
        ("sum_rows_max_rows", vec![vec![4, 3]], |g, v| {
            let a = g.sum_rows(v[0])?;
            let b = g.max_rows(v[0])?;
            let y = g.mul(a, b)?;
            weighted_sum(g, y, 16)
        }),
        ("index_reshape", vec![vec![2, 3]], |g, v| {
            let r = g.reshape(v[0], &[3, 2])?;
            let i = g.index(r, 4)?;
            let y = g.scale_by(r, i)?;
            weighted_sum(g, y, 17)
        }),
    ]
}

/// Worst relative error per op over `trials` random draws of its inputs.
pub fn check_ops(trials: u64) -> Result<Vec<(&'static str, f64)>> {
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                let inputs: Vec<Tensor> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let seed = trial * 97 + i as u64 * 13 + 1;
                        Tensor::uniform(s, 2.0, &mut crate::rng::stream(seed, &[s.len() as u64]))
                    })
                    .collect();
                worst = worst.max(check(f, &inputs, None, trial)?.max_rel_err);
            }
            Ok((name, worst))
        })
        .collect()
}
