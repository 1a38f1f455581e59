use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::baselines::{Generator, GeneratorKind};
use crate::checkpoint;
use crate::condenc::{ConditionSet, Vocab};
use crate::error::{Error, Result};
use crate::numkernel::Graph;
use crate::optim::Adam;
use crate::par::{self, ExecMode};
use crate::params::{self, ParamGrads, ParamSet};
use crate::plm::{self, forward_graph, Adaptation, PlmModel, PlmVars, PretrainExample, PromptPack, EOS};
use crate::props::{GenCtx, SelectionTrace};
use crate::rng;
use crate::tasks::{self, Example};

/// An example in token ids, ready for the frozen model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepared {
    pub id: u64,
    pub task_id: String,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub cs: ConditionSet,
}

pub fn prepare(cfg: &RunConfig, examples: &[Example], vocab: &Vocab, kind: GeneratorKind) -> Result<Vec<Prepared>> {
    let limits = cfg.limits();
    let sep = vocab.id(tasks::SEP);
    let max_len = cfg.plm_max_len;
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let cs = tasks::attach_conditions(ex, vocab, &limits)?;
            let raw: Vec<u32> = ex.src.iter().map(|w| vocab.id(w)).collect();
            let src = match kind {
                GeneratorKind::PrefixPp => crate::baselines::prefixpp_prepare(&raw, Some(&cs), sep, max_len - 1)?,
                _ => raw[..raw.len().min(max_len - 1)].to_vec(),
            };
            let tgt: Vec<u32> = ex.tgt.iter().map(|w| vocab.id(w)).collect();
            if tgt.len() + 1 > max_len {
                return Err(Error::Config(format!(
                    "target of {} tokens does not fit max_len {max_len}",
                    tgt.len()
                )));
            }
            Ok(Prepared {
                id: i as u64,
                task_id: ex.task_id.clone(),
                src,
                tgt,
                cs,
            })
        })
        .collect()
}

/// Prompts for one example with selection noise off.
pub fn eval_prompts(gen: &Generator, ex: &Prepared, adapt: &Adaptation) -> Result<(PromptPack, Vec<SelectionTrace>)> {
    let mut g = Graph::new();
    let v = gen.params().bind_frozen(&mut g);
    let (pv, traces) = gen.generate(&mut g, &v, &ex.cs, adapt, GenCtx::eval(ex.id))?;
    Ok((pv.to_pack(&g), traces))
}

pub struct StepOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    pub traces: Vec<SelectionTrace>,
}

/// Loss and generator gradients for one example through the frozen model.
/// Fails if any gradient reaches the frozen parameters.
pub fn example_step(
    plm: &PlmModel,
    gen: &Generator,
    adapt: &Adaptation,
    ex: &Prepared,
    ctx: GenCtx,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let gv = gen.params().bind(&mut g);
    let (prompts, traces) = gen.generate(&mut g, &gv, &ex.cs, adapt, ctx)?;
    let mv = PlmVars::bind(plm, &mut g);
    let (dec_in, targets) = PretrainExample::teacher_forcing(&ex.tgt);
    let logits = forward_graph(&mut g, plm, &mv, &ex.src, &dec_in, Some(&prompts))?;
    let loss = g.cross_entropy(logits, &targets)?;
    let grads = g.backward(loss)?;
    if mv.vars.iter().any(|&x| grads.get(x).is_some()) {
        return Err(Error::Contract("gradient reached the frozen model".into()));
    }
    Ok(StepOutput {
        loss: g.scalar(loss),
        grads: params::collect_grads(gen.params(), &gv, &grads),
        traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub loss: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub task_id: String,
    /// Greedy output, end token included when produced.
    pub output: Vec<u32>,
    pub exact: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
    pub traces: Vec<(String, Vec<SelectionTrace>)>,
}

fn mean_ce(logits: &crate::numkernel::Tensor, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / targets.len() as f64
}

/// Scores a decoded sequence against a target without its end token:
/// `(exact, matching positions, target positions)`, the end token counted
/// as a position.
pub fn score_sequence(output: &[u32], tgt: &[u32]) -> (bool, usize, usize) {
    let gold: Vec<u32> = tgt.iter().copied().chain([EOS]).collect();
    let hits = gold.iter().zip(output).filter(|(a, b)| a == b).count();
    (output == gold.as_slice(), hits, gold.len())
}

/// Greedy decoding with noise-free prompts: exact sequence match, token
/// accuracy over target positions (end token included) and teacher-forced
/// loss.
pub fn evaluate(
    plm: &PlmModel,
    gen: &Generator,
    adapt: &Adaptation,
    data: &[Prepared],
    mode: ExecMode,
) -> Result<EvalOutput> {
    let per = par::map(mode, data, |_, ex| -> Result<_> {
        let (pack, traces) = eval_prompts(gen, ex, adapt)?;
        let (dec_in, targets) = PretrainExample::teacher_forcing(&ex.tgt);
        let logits = plm::forward(plm, &ex.src, &dec_in, Some(&pack))?;
        let loss = mean_ce(&logits, &targets);
        let output = plm::decode_greedy(plm, &ex.src, Some(&pack), plm.config().max_len)?;
        let (exact, hits, total) = score_sequence(&output, &ex.tgt);
        Ok((
            loss,
            hits,
            total,
            Prediction {
                id: ex.id,
                task_id: ex.task_id.clone(),
                output,
                exact,
            },
            traces,
        ))
    });
    let mut m = Metrics::default();
    let (mut hit, mut tot, mut exact) = (0usize, 0usize, 0usize);
    let mut predictions = Vec::with_capacity(data.len());
    let mut traces = Vec::with_capacity(data.len());
    for r in per {
        let (loss, h, t, p, tr) = r?;
        m.loss += loss;
        hit += h;
        tot += t;
        exact += usize::from(p.exact);
        traces.push((p.task_id.clone(), tr));
        predictions.push(p);
    }
    m.n = data.len();
    if m.n > 0 {
        m.loss /= m.n as f64;
        m.exact_match = exact as f64 / m.n as f64;
        m.token_accuracy = hit as f64 / tot as f64;
    }
    Ok(EvalOutput {
        metrics: m,
        predictions,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Metrics,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub param_count: usize,
    pub first_step_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test: Metrics,
    pub plm_fingerprint_before: String,
    pub plm_fingerprint_after: String,
    pub seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub generator: GeneratorKind,
    pub seeds: Vec<SeedReport>,
    pub exact_match: Aggregate,
    pub token_accuracy: Aggregate,
    pub seconds: f64,
}

impl RunReport {
    pub fn new(config_hash: String, generator: GeneratorKind, seeds: Vec<SeedReport>, seconds: f64) -> Self {
        let em: Vec<f64> = seeds.iter().map(|s| s.test.exact_match).collect();
        let ta: Vec<f64> = seeds.iter().map(|s| s.test.token_accuracy).collect();
        Self {
            config_hash,
            generator,
            exact_match: Aggregate::of(&em),
            token_accuracy: Aggregate::of(&ta),
            seeds,
            seconds,
        }
    }

    /// Metrics only, without timings or paths: equal for equal runs.
    pub fn metrics_fingerprint(&self) -> String {
        let strip: Vec<_> = self
            .seeds
            .iter()
            .map(|s| {
                let epochs: Vec<_> = s
                    .epochs
                    .iter()
                    .map(|e| (e.epoch, e.train_loss.to_bits(), e.valid))
                    .collect();
                (s.seed, s.first_step_loss.to_bits(), epochs, s.best_epoch, s.test)
            })
            .collect();
        tasks::spec_hash(&strip)
    }
}

/// Prepared splits for one generator kind.
pub struct PreparedData {
    pub train: Vec<Prepared>,
    pub valid: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

pub fn prepare_data(cfg: &RunConfig, kind: GeneratorKind) -> Result<PreparedData> {
    let ds = tasks::build_dataset(&cfg.task_spec())?;
    let vocab = tasks::universe_vocab();
    let mut valid = prepare(cfg, &ds.valid, &vocab, kind)?;
    if cfg.max_valid > 0 {
        valid.truncate(cfg.max_valid);
    }
    Ok(PreparedData {
        train: prepare(cfg, &ds.train, &vocab, kind)?,
        valid,
        test: prepare(cfg, &ds.test, &vocab, kind)?,
    })
}

pub fn new_generator(cfg: &RunConfig, plm: &PlmModel, seed: u64) -> Result<Generator> {
    Generator::new(
        cfg.generator,
        &cfg.props_config(),
        plm.config().vocab_size,
        plm.config(),
        &Adaptation::all(plm.config()),
        seed,
    )
}

fn better(a: &Metrics, b: &Metrics) -> bool {
    a.exact_match > b.exact_match || (a.exact_match == b.exact_match && a.loss < b.loss)
}

/// Trains one seed. Only generator parameters move; the model fingerprint
/// is checked after every epoch. Returns the best-validation generator.
pub fn train_seed(
    cfg: &RunConfig,
    plm: &PlmModel,
    data: &PreparedData,
    seed: u64,
    mode: ExecMode,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(SeedReport, Generator)> {
    if !plm.is_frozen() {
        return Err(Error::Contract(
            "the pretrained model must be frozen before adaptation".into(),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let start = Instant::now();
    let before = plm.current_fingerprint();
    let adapt = Adaptation::all(plm.config());
    let mut gen = new_generator(cfg, plm, seed)?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let mut opt = Adam::new(cfg.optim(), gen.params(), steps_per_epoch * cfg.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(Metrics, usize, ParamSet)> = None;
    let mut epochs = Vec::new();
    let mut first_step_loss = f64::NAN;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng::stream(seed, &[0x0e, epoch as u64]));
        let noise_seed = rng::stream_id(&[seed, epoch as u64]);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&Prepared> = batch.iter().map(|&i| &data.train[i]).collect();
            let g: &Generator = &gen;
            let outs = par::map(mode, &items, |_, ex| {
                let ctx = GenCtx {
                    seed: noise_seed,
                    example_id: ex.id,
                    noise: true,
                };
                example_step(plm, g, &adapt, ex, ctx)
            });
            let mut acc = params::zero_grads(gen.params());
            let mut batch_loss = 0.0;
            for o in outs {
                let o = o?;
                batch_loss += o.loss;
                params::add_grads(&mut acc, &o.grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    last_stable: step.saturating_sub(1),
                });
            }
            if step == 0 {
                first_step_loss = batch_loss / batch.len() as f64;
            }
            loss_sum += batch_loss;
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|x| *x *= inv);
            opt.step(gen.params_mut(), &acc);
            step += 1;
        }
        let valid = evaluate(plm, &gen, &adapt, &data.valid, mode)?.metrics;
        if plm.current_fingerprint() != before {
            return Err(Error::Contract(
                "frozen model parameters changed during training".into(),
            ));
        }
        let rec = EpochRecord {
            seed,
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            valid,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        epochs.push(rec);
        if best.as_ref().is_none_or(|(m, _, _)| better(&valid, m)) {
            best = Some((valid, epoch, gen.params().clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    gen.params_mut().assign_from(&best_params)?;
    let test = evaluate(plm, &gen, &adapt, &data.test, mode)?.metrics;
    let after = plm.current_fingerprint();
    Ok((
        SeedReport {
            seed,
            param_count: gen.param_count(),
            first_step_loss,
            epochs,
            best_epoch,
            test,
            plm_fingerprint_before: format!("{before:016x}"),
            plm_fingerprint_after: format!("{after:016x}"),
            seconds: start.elapsed().as_secs_f64(),
            checkpoint: None,
        },
        gen,
    ))
}

pub fn save_generator(path: &Path, gen: &Generator, cfg: &RunConfig, seed: u64) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("generator".to_string(), gen.kind().to_string());
    meta.insert("config_hash".to_string(), cfg.hash());
    meta.insert("seed".to_string(), seed.to_string());
    checkpoint::save(path, "generator", &meta, gen.params())
}

pub fn load_generator(path: &Path, cfg: &RunConfig, plm: &PlmModel) -> Result<Generator> {
    let ck = checkpoint::load(path)?;
    if ck.kind != "generator" {
        return Err(Error::Integrity {
            section: "header".into(),
            detail: format!("kind `{}` is not a generator checkpoint", ck.kind),
        });
    }
    let kind: GeneratorKind = ck
        .meta
        .get("generator")
        .ok_or_else(|| Error::Integrity {
            section: "meta".into(),
            detail: "missing `generator`".into(),
        })?
        .parse()?;
    let cfg = RunConfig {
        generator: kind,
        ..cfg.clone()
    };
    let mut gen = new_generator(&cfg, plm, 0)?;
    gen.params_mut().assign_from(&ck.params)?;
    Ok(gen)
}

/// Line-delimited JSON sink.
pub struct JsonLines {
    file: Option<std::fs::File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            file: Some(std::fs::File::create(path)?),
        })
    }

    pub fn discard() -> Self {
        Self { file: None }
    }

    pub fn write<T: Serialize>(&mut self, kind: &str, value: &T) -> Result<()> {
        if let Some(f) = &mut self.file {
            let mut v = serde_json::to_value(value).map_err(|e| Error::Parse(e.to_string()))?;
            if let serde_json::Value::Object(m) = &mut v {
                m.insert("record".into(), kind.into());
            }
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Trains every configured seed, writing per-epoch records and a summary
/// to `out_dir/metrics.jsonl` and the best generator of each seed to
/// `out_dir/generator_seed<s>.ckpt` when `out_dir` is set.
pub fn train(cfg: &RunConfig, plm: &PlmModel, mode: ExecMode, write: bool) -> Result<RunReport> {
    let start = Instant::now();
    let data = prepare_data(cfg, cfg.generator)?;
    let mut sink = if write {
        JsonLines::create(&cfg.out_dir.join("metrics.jsonl"))?
    } else {
        JsonLines::discard()
    };
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let mut err = None;
        let (mut rep, gen) = train_seed(cfg, plm, &data, seed, mode, &mut |r| {
            if let Err(e) = sink.write("epoch", r) {
                err.get_or_insert(e);
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        if write {
            let path = cfg.out_dir.join(format!("generator_seed{seed}.ckpt"));
            save_generator(&path, &gen, cfg, seed)?;
            rep.checkpoint = Some(path);
        }
        seeds.push(rep);
    }
    let report = RunReport::new(cfg.hash(), cfg.generator, seeds, start.elapsed().as_secs_f64());
    sink.write("summary", &report)?;
    Ok(report)
}

/// Finite-difference check of the end-to-end loss (generator through the
/// frozen model) over `coords` sampled generator coordinates. Selection is
/// relaxed so the loss is smooth in every coordinate.
pub fn gradcheck_end_to_end(
    plm: &PlmModel,
    gen: &Generator,
    adapt: &Adaptation,
    ex: &Prepared,
    ctx: GenCtx,
    coords: usize,
    seed: u64,
) -> Result<crate::numkernel::gradcheck::GradCheckReport> {
    let inputs = gen.params().tensors().to_vec();
    let (dec_in, targets) = PretrainExample::teacher_forcing(&ex.tgt);
    crate::numkernel::gradcheck::check_relaxed(
        |g, v| {
            let (prompts, _) = gen.generate(g, v, &ex.cs, adapt, ctx)?;
            let mv = PlmVars::bind(plm, g);
            let logits = forward_graph(g, plm, &mv, &ex.src, &dec_in, Some(&prompts))?;
            g.cross_entropy(logits, &targets)
        },
        &inputs,
        Some(coords),
        seed,
    )
}
