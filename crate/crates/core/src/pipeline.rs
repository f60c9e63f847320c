//! Glue shared by the command-line tools and tests: dataset preparation,
//! model construction and a full training run.

use crate::config::RunConfig;
use crate::data::{make_split, synth_dataset, Dataset, SplitIndices, Vocabulary};
use crate::error::{Error, Result};
use crate::objective::{fit, Checkpoint, Model, StepRecord, TrainData};

/// Dataset with its split and the vocabulary of the training captions.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitIndices,
    pub vocab: Vocabulary,
}

pub fn synthetic(cfg: &RunConfig) -> Result<Dataset> {
    Ok(synth_dataset(&cfg.synth)?.0)
}

pub fn needs_text(cfg: &RunConfig) -> bool {
    cfg.use_global || cfg.use_local
}

pub fn prepare(cfg: &RunConfig, dataset: Dataset) -> Result<Prepared> {
    if dataset.num_domains() < 2 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs at least 2 domains, dataset has {}",
            dataset.num_domains()
        )));
    }
    let split = make_split(&dataset, cfg.target_domain, cfg.few_shot_k, cfg.seed)?;
    let vocab = Vocabulary::build(
        split
            .train
            .iter()
            .flat_map(|&i| dataset.samples[i].captions.iter().map(String::as_str)),
    );
    Ok(Prepared {
        dataset,
        split,
        vocab,
    })
}

pub fn build_model(cfg: &RunConfig, prepared: &Prepared) -> Result<Model> {
    Model::new(
        cfg,
        prepared.dataset.feature_dim,
        prepared.dataset.num_classes(),
        prepared.vocab.len(),
    )
}

pub fn checkpoint(model: &Model, prepared: &Prepared, step: usize) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        vocab: prepared.vocab.clone(),
        class_names: prepared.dataset.classes.clone(),
        domain_names: prepared.dataset.domains.clone(),
        step,
    }
}

/// Builds and trains a model on `prepared`, calling `on_step` after every
/// step.
pub fn train(
    cfg: &RunConfig,
    prepared: &Prepared,
    on_step: impl FnMut(&StepRecord, &Model) -> Result<()>,
) -> Result<(Model, Vec<StepRecord>)> {
    let mut model = build_model(cfg, prepared)?;
    let data = TrainData::new(
        &prepared.dataset,
        &prepared.split,
        &prepared.vocab,
        cfg.max_caption_len,
        needs_text(cfg),
    )?;
    let log = fit(&mut model, &data, on_step)?;
    Ok((model, log))
}
