use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::AdamState;
use super::losses::LossBreakdown;
use super::model::{BatchItem, Model};
use crate::data::{tokenize, Dataset, SplitIndices, Vocabulary};
use crate::encoders::Mode;
use crate::error::{Error, Result};
use crate::numgrad::Tape;

/// Training pools per source domain plus every sample's tokenized captions.
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub pools: Vec<Vec<usize>>,
    pub tokens: Vec<Vec<Vec<u32>>>,
}

impl<'a> TrainData<'a> {
    pub fn new(
        dataset: &'a Dataset,
        split: &SplitIndices,
        vocab: &Vocabulary,
        max_len: usize,
        need_text: bool,
    ) -> Result<Self> {
        let tokens: Vec<Vec<Vec<u32>>> = dataset
            .samples
            .iter()
            .map(|s| {
                s.captions
                    .iter()
                    .map(|c| tokenize(c, vocab, max_len))
                    .filter(|t| !t.is_empty())
                    .collect()
            })
            .collect();
        if need_text {
            if let Some(&bad) = split.train.iter().find(|&&i| tokens[i].is_empty()) {
                return Err(Error::Data(format!(
                    "training sample {bad} has no non-empty caption"
                )));
            }
        }
        let pools: Vec<Vec<usize>> = split
            .train_by_domain(dataset)
            .into_iter()
            .filter(|p| !p.is_empty())
            .collect();
        if pools.is_empty() {
            return Err(Error::Config(
                "no training samples in the source domains".into(),
            ));
        }
        Ok(Self {
            dataset,
            pools,
            tokens,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// Accuracy of the main classifier on this step's batch, before the update.
    pub batch_accuracy: f64,
}

/// Single forward, backward and Adam update. Running batch-norm statistics
/// are updated after the parameter update.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    items: &[BatchItem<'_>],
    seed: u64,
) -> Result<(LossBreakdown, f64)> {
    let tape = Tape::new();
    let out = model.forward_batch(&tape, items, Mode::Train, seed)?;
    if !out.breakdown.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss, aborting: {:?}",
            out.breakdown
        )));
    }
    let correct = out
        .predictions
        .iter()
        .zip(items)
        .filter(|(p, it)| **p == it.sample.label)
        .count();
    tape.backward(out.losses.total, &mut model.store)?;
    adam.update(&mut model.store);
    model.update_running(&out);
    Ok((out.breakdown, correct as f64 / items.len() as f64))
}

/// Deterministic batch sampler: `batch_per_domain` distinct indices from
/// every pool, a uniformly chosen caption per sample, and a dropout seed.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    per_domain: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, per_domain: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c_0000_0001),
            per_domain,
        }
    }

    /// `(sample index, caption index)` pairs and the step seed.
    pub fn next(&mut self, data: &TrainData<'_>) -> (Vec<(usize, usize)>, u64) {
        let mut picks = Vec::new();
        for pool in &data.pools {
            for &i in pool.choose_multiple(&mut self.rng, self.per_domain.min(pool.len())) {
                let n = data.tokens[i].len().max(1);
                picks.push((i, self.rng.gen_range(0..n)));
            }
        }
        (picks, self.rng.gen())
    }
}

const EMPTY: &[u32] = &[];

pub fn batch_items<'a>(data: &'a TrainData<'a>, picks: &[(usize, usize)]) -> Vec<BatchItem<'a>> {
    picks
        .iter()
        .map(|&(i, c)| BatchItem {
            sample: &data.dataset.samples[i],
            tokens: data.tokens[i].get(c).map_or(EMPTY, Vec::as_slice),
        })
        .collect()
}

/// Runs `model.config.steps` training steps. `on_step` sees every record
/// together with the updated model.
pub fn fit(
    model: &mut Model,
    data: &TrainData<'_>,
    mut on_step: impl FnMut(&StepRecord, &Model) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let cfg = model.config.clone();
    let mut adam = AdamState::new(&model.store, cfg.lr);
    let mut sampler = BatchSampler::new(cfg.seed, cfg.batch_per_domain);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let (picks, seed) = sampler.next(data);
        let items = batch_items(data, &picks);
        let (losses, batch_accuracy) =
            train_step(model, &mut adam, &items, seed).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                other => other,
            })?;
        let record = StepRecord {
            step,
            losses,
            batch_accuracy,
        };
        on_step(&record, model)?;
        log.push(record);
    }
    Ok(log)
}

/// Top-1 accuracy of the image branch on `indices`.
pub fn accuracy(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in indices.chunks(64) {
        let samples: Vec<_> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
        let preds = model.predict(&samples)?;
        correct += preds
            .iter()
            .zip(&samples)
            .filter(|(p, s)| **p == s.label)
            .count();
    }
    Ok(correct as f64 / indices.len() as f64)
}
