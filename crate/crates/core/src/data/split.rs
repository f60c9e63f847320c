use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Leave-one-domain-out protocol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DgSplit {
    pub sources: Vec<usize>,
    pub target: usize,
    pub few_shot_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub split: DgSplit,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Non-fatal problems, e.g. few-shot cells with fewer than k samples.
    pub warnings: Vec<String>,
}

impl SplitIndices {
    /// Training indices grouped by source domain, in `split.sources` order.
    pub fn train_by_domain(&self, dataset: &Dataset) -> Vec<Vec<usize>> {
        self.split
            .sources
            .iter()
            .map(|&d| {
                self.train
                    .iter()
                    .copied()
                    .filter(|&i| dataset.samples[i].domain == d)
                    .collect()
            })
            .collect()
    }
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Sources are every domain except `target`. Within each source domain the
/// samples are shuffled and split 80/20 into train/val; with `few_shot_k`
/// each (class, source domain) cell is first cut down to `k` random samples.
pub fn make_split(
    dataset: &Dataset,
    target: usize,
    few_shot_k: Option<usize>,
    seed: u64,
) -> Result<SplitIndices> {
    if target >= dataset.num_domains() {
        return Err(Error::Config(format!(
            "target domain {target} does not exist ({} domains)",
            dataset.num_domains()
        )));
    }
    if few_shot_k == Some(0) {
        return Err(Error::Config("few_shot_k must be at least 1".into()));
    }
    let sources: Vec<usize> = (0..dataset.num_domains())
        .filter(|&d| d != target)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());

    for &domain in &sources {
        let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in dataset.indices_in_domain(domain) {
            cells.entry(dataset.samples[i].label).or_default().push(i);
        }
        let mut pool = Vec::new();
        for class in 0..dataset.num_classes() {
            let mut cell = cells.remove(&class).unwrap_or_default();
            if let Some(k) = few_shot_k {
                if cell.len() < k {
                    warnings.push(format!(
                        "class '{}' in domain '{}' has {} samples, fewer than k={k}; keeping all",
                        dataset.classes[class],
                        dataset.domains[domain],
                        cell.len()
                    ));
                } else {
                    cell.shuffle(&mut rng);
                    cell.truncate(k);
                    cell.sort_unstable();
                }
            }
            pool.extend(cell);
        }
        pool.shuffle(&mut rng);
        let n_train = ((pool.len() as f64) * TRAIN_FRACTION).round() as usize;
        let n_train = if pool.is_empty() {
            0
        } else {
            n_train.clamp(1, pool.len())
        };
        let (tr, va) = pool.split_at(n_train);
        train.extend_from_slice(tr);
        val.extend_from_slice(va);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(SplitIndices {
        split: DgSplit {
            sources,
            target,
            few_shot_k,
        },
        train,
        val,
        test: dataset.indices_in_domain(target),
        warnings,
    })
}
