//! The frozen model every experiment shares: vocabulary, pretraining
//! mixture, and the on-disk cache.

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::condenc::Vocab;
use crate::error::{Error, Result};
use crate::par::ExecMode;
use crate::plm::{self, build_plm, Bijection, CorpusSpec, PlmModel, PretrainExample, PretrainReport};
use crate::tasks::{self, Languages};

/// Pretraining corpus: copy over every task token, plus one marker-announced
/// bijection per directed language pair.
pub fn corpus_spec(cfg: &RunConfig, vocab: &Vocab) -> CorpusSpec {
    let payload: Vec<u32> = tasks::payload_tokens().iter().map(|t| vocab.id(t)).collect();
    let pairs = Languages::new(cfg.world_seed).all_pairs();
    let maps = pairs
        .iter()
        .map(|t| Bijection {
            marker: vocab.id(&t.marker()),
            image: t.image().iter().map(|s| vocab.id(s)).collect(),
        })
        .collect();
    let markers: Vec<String> = pairs.iter().map(|t| t.marker()).collect();
    let copy_only = vocab
        .tokens()
        .iter()
        .enumerate()
        .skip(plm::EOS as usize + 1)
        .filter(|(_, t)| !payload.contains(&vocab.id(t)) && !markers.contains(t) && t.as_str() != tasks::SEP)
        .map(|(i, _)| i as u32)
        .collect();
    CorpusSpec {
        payload,
        maps,
        copy_only,
        n_train: cfg.pretrain_n_train,
        n_heldout: cfg.pretrain_n_heldout,
        min_len: cfg.pretrain_min_len,
        max_len: cfg.pretrain_max_len,
        seed: cfg.plm_seed,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlmSummary {
    pub fingerprint: String,
    pub param_count: usize,
    pub pretrain: Option<PretrainReport>,
    /// Held-out teacher-forced token accuracy on copy rows.
    pub copy_accuracy: f64,
    /// The same on marker-announced bijection rows.
    pub bijection_accuracy: f64,
    pub from_cache: bool,
}

/// Pretrains and freezes a fresh model.
pub fn pretrain_plm(cfg: &RunConfig, mode: ExecMode) -> Result<(PlmModel, PlmSummary)> {
    let vocab = tasks::universe_vocab();
    let spec = corpus_spec(cfg, &vocab);
    let (train, heldout) = plm::pretrain_corpus(&spec)?;
    let mut model = build_plm(&cfg.plm_config(), cfg.plm_seed)?;
    let report = plm::pretrain(&mut model, &train, &heldout, &cfg.pretrain_config(), mode)?;
    model.freeze();
    let summary = summarize(&model, &heldout, Some(report), false, mode)?;
    Ok((model, summary))
}

fn summarize(
    model: &PlmModel,
    heldout: &[PretrainExample],
    pretrain: Option<PretrainReport>,
    from_cache: bool,
    mode: ExecMode,
) -> Result<PlmSummary> {
    let (copy, maps): (Vec<PretrainExample>, Vec<PretrainExample>) =
        heldout.iter().cloned().partition(|e| e.src == e.tgt);
    Ok(PlmSummary {
        fingerprint: format!("{:016x}", model.fingerprint()),
        param_count: model.param_count(),
        pretrain,
        copy_accuracy: plm::token_accuracy(model, &copy, mode)?,
        bijection_accuracy: plm::token_accuracy(model, &maps, mode)?,
        from_cache,
    })
}

/// Loads the cached model at `cfg.plm_path` when its tag matches the
/// pretraining settings, otherwise pretrains and writes the cache.
pub fn load_or_pretrain(cfg: &RunConfig, mode: ExecMode) -> Result<(PlmModel, PlmSummary)> {
    let tag = cfg.plm_hash();
    if cfg.plm_path.exists() {
        let (model, stored) = PlmModel::load_tagged(&cfg.plm_path)?;
        if stored.as_deref() == Some(tag.as_str()) {
            if !model.is_frozen() {
                return Err(Error::Contract(format!(
                    "cached model {} is not frozen",
                    cfg.plm_path.display()
                )));
            }
            let vocab = tasks::universe_vocab();
            let spec = corpus_spec(cfg, &vocab);
            let (_, heldout) = plm::pretrain_corpus(&spec)?;
            let summary = summarize(&model, &heldout, None, true, mode)?;
            return Ok((model, summary));
        }
    }
    let (model, summary) = pretrain_plm(cfg, mode)?;
    model.save_tagged(&cfg.plm_path, Some(&tag))?;
    Ok((model, summary))
}

/// Loads a frozen model, refusing anything unfrozen or mismatched.
pub fn load_frozen(cfg: &RunConfig) -> Result<PlmModel> {
    if !cfg.plm_path.exists() {
        return Err(Error::Contract(format!(
            "no pretrained model at {}; run pretrain-plm first",
            cfg.plm_path.display()
        )));
    }
    let (model, _) = PlmModel::load_tagged(&cfg.plm_path)?;
    if !model.is_frozen() {
        return Err(Error::Contract(format!(
            "model at {} is not frozen",
            cfg.plm_path.display()
        )));
    }
    if model.config() != &cfg.plm_config() {
        return Err(Error::Contract(format!(
            "model at {} does not match the configured architecture",
            cfg.plm_path.display()
        )));
    }
    Ok(model)
}
