use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{forward_graph, PlmModel, PlmVars, BOS, EOS};
use crate::error::{Error, Result};
use crate::numkernel::Graph;
use crate::optim::{Adam, OptimConfig};
use crate::par::{self, ExecMode};
use crate::params::{self, ParamGrads};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl PretrainExample {
    /// `([BOS] + tgt, tgt + [EOS])`
    pub fn teacher_forcing(tgt: &[u32]) -> (Vec<u32>, Vec<usize>) {
        let mut dec_in = Vec::with_capacity(tgt.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(tgt);
        let mut targets: Vec<usize> = tgt.iter().map(|&t| t as usize).collect();
        targets.push(EOS as usize);
        (dec_in, targets)
    }
}

/// A token bijection over the payload announced by a marker token.
/// `image[i]` is the image of `payload[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bijection {
    pub marker: u32,
    pub image: Vec<u32>,
}

/// One random bijection per marker.
pub fn random_bijections(payload: &[u32], markers: &[u32], seed: u64) -> Vec<Bijection> {
    let mut r = rng::stream(seed, &[0xb1]);
    markers
        .iter()
        .map(|&marker| {
            let mut image = payload.to_vec();
            image.shuffle(&mut r);
            Bijection { marker, image }
        })
        .collect()
}

/// Synthetic pretraining mixture: half plain copy, half one of the
/// bijections with its marker at the source start. Held-out examples are
/// copies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Tokens that may appear in payloads.
    pub payload: Vec<u32>,
    pub maps: Vec<Bijection>,
    /// Extra tokens that appear only in copy examples.
    pub copy_only: Vec<u32>,
    pub n_train: usize,
    pub n_heldout: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

/// Returns `(train, held-out)`, both alternating copy and bijection examples.
pub fn pretrain_corpus(spec: &CorpusSpec) -> Result<(Vec<PretrainExample>, Vec<PretrainExample>)> {
    if spec.payload.is_empty() || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "pretraining corpus needs payload tokens and 1 <= min_len <= max_len, got {} tokens, {}..{}",
            spec.payload.len(),
            spec.min_len,
            spec.max_len
        )));
    }
    if let Some(b) = spec.maps.iter().find(|b| b.image.len() != spec.payload.len()) {
        return Err(Error::Config(format!(
            "bijection for marker {} has {} images for {} payload tokens",
            b.marker,
            b.image.len(),
            spec.payload.len()
        )));
    }
    let pos: std::collections::HashMap<u32, usize> = spec.payload.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let copy_pool: Vec<u32> = spec.payload.iter().chain(&spec.copy_only).copied().collect();
    let sample = |r: &mut rand_chacha::ChaCha8Rng, pool: &[u32]| -> Vec<u32> {
        let n = r.gen_range(spec.min_len..=spec.max_len);
        (0..n).map(|_| pool[r.gen_range(0..pool.len())]).collect()
    };
    let draw = |r: &mut rand_chacha::ChaCha8Rng, i: usize| {
        if i % 2 == 0 || spec.maps.is_empty() {
            let x = sample(r, &copy_pool);
            PretrainExample { src: x.clone(), tgt: x }
        } else {
            let b = &spec.maps[r.gen_range(0..spec.maps.len())];
            let x = sample(r, &spec.payload);
            let tgt = x.iter().map(|t| b.image[pos[t]]).collect();
            let mut src = vec![b.marker];
            src.extend(x);
            PretrainExample { src, tgt }
        }
    };
    let mut r = rng::stream(spec.seed, &[0xc0]);
    let train = (0..spec.n_train).map(|i| draw(&mut r, i)).collect();
    let mut r = rng::stream(spec.seed, &[0xc1]);
    let heldout = (0..spec.n_heldout).map(|i| draw(&mut r, i)).collect();
    Ok((train, heldout))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub target_accuracy: f64,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 16,
            target_accuracy: 0.98,
            optim: OptimConfig {
                lr: 2e-3,
                ..OptimConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub heldout_accuracy: Vec<f64>,
    pub reached_target: bool,
}

fn example_grads(model: &PlmModel, ex: &PretrainExample) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new();
    let pv = PlmVars::bind(model, &mut g);
    let (dec_in, targets) = PretrainExample::teacher_forcing(&ex.tgt);
    let logits = forward_graph(&mut g, model, &pv, &ex.src, &dec_in, None)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), params::collect_grads(model.params(), &pv.vars, &grads)))
}

/// Teacher-forced token accuracy over targets including the end token.
pub fn token_accuracy(model: &PlmModel, data: &[PretrainExample], mode: ExecMode) -> Result<f64> {
    let per: Vec<Result<(usize, usize)>> = par::map(mode, data, |_, ex| {
        let (dec_in, targets) = PretrainExample::teacher_forcing(&ex.tgt);
        let logits = super::forward(model, &ex.src, &dec_in, None)?;
        let hits = targets
            .iter()
            .enumerate()
            .filter(|(t, &y)| {
                let row = logits.row(*t);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == y
            })
            .count();
        Ok((hits, targets.len()))
    });
    let (mut hit, mut tot) = (0, 0);
    for r in per {
        let (h, t) = r?;
        hit += h;
        tot += t;
    }
    Ok(if tot == 0 { 0.0 } else { hit as f64 / tot as f64 })
}

/// Trains until held-out accuracy reaches the target or epochs run out.
pub fn pretrain(
    model: &mut PlmModel,
    train: &[PretrainExample],
    heldout: &[PretrainExample],
    cfg: &PretrainConfig,
    mode: ExecMode,
) -> Result<PretrainReport> {
    if model.is_frozen() {
        return Err(Error::FrozenViolation);
    }
    if train.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("empty pretraining corpus or zero batch size".into()));
    }
    model.params_mut()?.set_requires_grad(true);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = Adam::new(cfg.optim.clone(), model.params(), steps_per_epoch * cfg.max_epochs);
    let mut report = PretrainReport {
        epochs: 0,
        train_loss: Vec::new(),
        heldout_accuracy: Vec::new(),
        reached_target: false,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[0x5e, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&PretrainExample> = batch.iter().map(|&i| &train[i]).collect();
            let m: &PlmModel = model;
            let results = par::map(mode, &items, |_, ex| example_grads(m, ex));
            let mut acc = params::zero_grads(model.params());
            for r in results {
                let (l, gr) = r?;
                if !l.is_finite() {
                    return Err(Error::NonFinite("pretraining loss"));
                }
                loss_sum += l;
                params::add_grads(&mut acc, &gr);
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|x| *x *= inv);
            opt.step(model.params_mut()?, &acc);
        }
        report.train_loss.push(loss_sum / train.len() as f64);
        let acc = token_accuracy(model, heldout, mode)?;
        report.heldout_accuracy.push(acc);
        report.epochs = epoch + 1;
        if acc >= cfg.target_accuracy {
            report.reached_target = true;
            break;
        }
    }
    model.refresh_fingerprint();
    Ok(report)
}
