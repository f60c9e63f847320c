use super::{Dataset, SplitIndices};
use crate::error::Result;
use crate::objective::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainAccuracy {
    pub domain: usize,
    pub correct: usize,
    pub total: usize,
}

impl DomainAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Top-1 accuracy of the image-branch classifier on the held-out domain.
/// Only the visual adapter and the main classifier are evaluated.
pub fn evaluate(model: &Model, split: &SplitIndices, dataset: &Dataset) -> Result<DomainAccuracy> {
    let mut correct = 0;
    for chunk in split.test.chunks(64) {
        let samples: Vec<_> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
        let preds = model.predict(&samples)?;
        correct += preds
            .iter()
            .zip(&samples)
            .filter(|(p, s)| **p == s.label)
            .count();
    }
    Ok(DomainAccuracy {
        domain: split.split.target,
        correct,
        total: split.test.len(),
    })
}

/// Nearest-centroid reference classifier on `x_g`.
///
/// Class centroids are estimated on the training indices, the target
/// samples are assigned to the closest centroid. With `center_domains`
/// every domain's mean feature is subtracted first, which removes a
/// constant per-domain offset.
pub fn centroid_oracle(dataset: &Dataset, split: &SplitIndices, center_domains: bool) -> f64 {
    let d = dataset.feature_dim;
    let mut domain_mean = vec![vec![0.0; d]; dataset.num_domains()];
    if center_domains {
        for (k, mean) in domain_mean.iter_mut().enumerate() {
            let idx = dataset.indices_in_domain(k);
            for &i in &idx {
                mean.iter_mut()
                    .zip(dataset.samples[i].x_g.data())
                    .for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= idx.len().max(1) as f64);
        }
    }
    let feature = |i: usize| -> Vec<f64> {
        let s = &dataset.samples[i];
        s.x_g
            .data()
            .iter()
            .zip(&domain_mean[s.domain])
            .map(|(x, m)| x - m)
            .collect()
    };
    let classes = dataset.num_classes();
    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for &i in &split.train {
        let y = dataset.samples[i].label;
        centroids[y]
            .iter_mut()
            .zip(feature(i))
            .for_each(|(c, x)| *c += x);
        counts[y] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    if split.test.is_empty() {
        return 0.0;
    }
    let correct = split
        .test
        .iter()
        .filter(|&&i| {
            let f = feature(i);
            let dist: Vec<f64> = centroids
                .iter()
                .map(|c| {
                    -c.iter()
                        .zip(&f)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            crate::encoders::argmax(&dist) == dataset.samples[i].label
        })
        .count();
    correct as f64 / split.test.len() as f64
}
