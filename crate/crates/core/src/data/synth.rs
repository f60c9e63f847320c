//! Synthetic multi-domain generator.
//!
//! Each class owns `attributes_per_class` latent attribute vectors and each
//! attribute is named by an (adjective, part) word pair. A patch is either
//! an object patch showing one of the class attributes or a background
//! patch; every patch of a domain is shifted by the domain offset, and
//! background patches may additionally carry a class-dependent tint that
//! changes from domain to domain. Captions list the attribute word pairs
//! of the sample's class and never mention the domain.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use super::{DType, Dataset, SampleFeatures, Vocabulary};
use crate::error::{Error, Result};
use crate::numgrad::Tensor;

const ADJECTIVES: &[&str] = &[
    "red",
    "blue",
    "yellow",
    "black",
    "white",
    "brown",
    "grey",
    "orange",
    "green",
    "olive",
    "buff",
    "crimson",
    "rufous",
    "pale",
    "dark",
    "spotted",
    "striped",
    "iridescent",
    "pink",
    "purple",
    "golden",
    "speckled",
    "tawny",
    "slate",
];
const PARTS: &[&str] = &[
    "crown", "wing", "breast", "tail", "bill", "throat", "nape", "belly", "back", "eye", "leg",
    "rump",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub domains: usize,
    pub attributes_per_class: usize,
    pub samples_per_cell: usize,
    pub feature_dim: usize,
    pub grid_side: usize,
    /// Standard deviation of the per-coordinate patch noise.
    pub noise: f64,
    /// Norm of each domain offset.
    pub domain_shift: f64,
    /// Dimension of the subspace the domain offsets share; 0 draws each
    /// offset in the full feature space.
    pub style_dim: usize,
    /// Norm of the class-by-domain background tint.
    pub tint: f64,
    /// Probability that a patch shows an attribute rather than background.
    pub object_fraction: f64,
    pub captions_per_sample: usize,
    /// Draw attribute vectors from an orthonormal set (needs
    /// `classes × attributes_per_class ≤ feature_dim`).
    pub orthogonal_attributes: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            domains: 4,
            attributes_per_class: 3,
            samples_per_cell: 40,
            feature_dim: 16,
            grid_side: 7,
            noise: 0.5,
            domain_shift: 2.0,
            style_dim: 2,
            tint: 1.0,
            object_fraction: 0.5,
            captions_per_sample: 3,
            orthogonal_attributes: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic generator: {m}")));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.domains < 2 {
            return bad("need at least 2 domains");
        }
        if self.attributes_per_class == 0
            || self.samples_per_cell == 0
            || self.captions_per_sample == 0
        {
            return bad("attribute, sample and caption counts must be positive");
        }
        if self.feature_dim == 0 || self.grid_side == 0 {
            return bad("feature dimension and grid side must be positive");
        }
        if self.attributes_per_class > PARTS.len() {
            return bad("too many attributes per class");
        }
        if !(0.0..=1.0).contains(&self.object_fraction) {
            return bad("object_fraction must lie in [0, 1]");
        }
        if ![self.noise, self.domain_shift, self.tint]
            .iter()
            .all(|x| x.is_finite() && *x >= 0.0)
        {
            return bad("noise, domain_shift and tint must be finite and non-negative");
        }
        if self.style_dim > self.feature_dim {
            return bad("style_dim must not exceed feature_dim");
        }
        if self.orthogonal_attributes && self.classes * self.attributes_per_class > self.feature_dim
        {
            return bad("orthogonal attributes need classes × attributes ≤ feature_dim");
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn with_norm(mut v: Vec<f64>, norm: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= norm / n);
    }
    v
}

/// Word pair naming attribute `a` of class `c`.
pub fn attribute_words(c: usize, a: usize, attributes_per_class: usize) -> (String, String) {
    let k = c * attributes_per_class + a;
    let adj = if k < ADJECTIVES.len() {
        ADJECTIVES[k].to_string()
    } else {
        format!("hue{k}")
    };
    (adj, PARTS[a].to_string())
}

fn caption(rng: &mut ChaCha8Rng, c: usize, cfg: &SynthConfig) -> String {
    let mut attrs: Vec<usize> = (0..cfg.attributes_per_class).collect();
    attrs.shuffle(rng);
    let keep = rng.gen_range(1..=attrs.len());
    let phrases: Vec<String> = attrs[..keep]
        .iter()
        .map(|&a| {
            let (adj, part) = attribute_words(c, a, cfg.attributes_per_class);
            format!("a {adj} {part}")
        })
        .collect();
    match phrases.len() {
        1 => format!("this bird has {}.", phrases[0]),
        n => format!(
            "this bird has {} and {}.",
            phrases[..n - 1].join(", "),
            phrases[n - 1]
        ),
    }
}

/// Generates a dataset with `samples_per_cell` samples for every
/// (class, domain) pair, plus the vocabulary of all caption words.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<(Dataset, Vocabulary)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let m = cfg.grid_side * cfg.grid_side;

    let attributes: Vec<Vec<Vec<f64>>> = if cfg.orthogonal_attributes {
        (0..cfg.classes)
            .map(|c| {
                (0..cfg.attributes_per_class)
                    .map(|a| {
                        let mut e = vec![0.0; d];
                        e[c * cfg.attributes_per_class + a] = 1.0;
                        e
                    })
                    .collect()
            })
            .collect()
    } else {
        (0..cfg.classes)
            .map(|_| {
                (0..cfg.attributes_per_class)
                    .map(|_| with_norm(gaussian(&mut rng, d), 1.0))
                    .collect()
            })
            .collect()
    };
    let offsets: Vec<Vec<f64>> = if cfg.style_dim == 0 {
        (0..cfg.domains)
            .map(|_| with_norm(gaussian(&mut rng, d), cfg.domain_shift))
            .collect()
    } else {
        let basis: Vec<Vec<f64>> = (0..cfg.style_dim).map(|_| gaussian(&mut rng, d)).collect();
        (0..cfg.domains)
            .map(|_| {
                let coef = gaussian(&mut rng, cfg.style_dim);
                let v = (0..d)
                    .map(|j| basis.iter().zip(&coef).map(|(b, c)| b[j] * c).sum())
                    .collect();
                with_norm(v, cfg.domain_shift)
            })
            .collect()
    };
    let background = with_norm(gaussian(&mut rng, d), 1.0);
    let tints: Vec<Vec<Vec<f64>>> = (0..cfg.domains)
        .map(|_| {
            (0..cfg.classes)
                .map(|_| with_norm(gaussian(&mut rng, d), cfg.tint))
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(cfg.classes * cfg.domains * cfg.samples_per_cell);
    for domain in 0..cfg.domains {
        for label in 0..cfg.classes {
            for _ in 0..cfg.samples_per_cell {
                let mut x_l = vec![0.0; m * d];
                for p in 0..m {
                    let patch = &mut x_l[p * d..(p + 1) * d];
                    if rng.gen_bool(cfg.object_fraction) {
                        let a = rng.gen_range(0..cfg.attributes_per_class);
                        let strength = 1.0 + 0.2 * rng.sample::<f64, _>(StandardNormal);
                        for (x, v) in patch.iter_mut().zip(&attributes[label][a]) {
                            *x = strength * v;
                        }
                    } else {
                        for ((x, b), t) in
                            patch.iter_mut().zip(&background).zip(&tints[domain][label])
                        {
                            *x = b + t;
                        }
                    }
                    for (x, o) in patch.iter_mut().zip(&offsets[domain]) {
                        *x += o + cfg.noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let x_l = Tensor::new(&[m, d], x_l).expect("shape matches");
                let x_g = mean_rows(&x_l);
                let captions = (0..cfg.captions_per_sample)
                    .map(|_| caption(&mut rng, label, cfg))
                    .collect();
                samples.push(SampleFeatures {
                    x_g,
                    x_l,
                    captions,
                    label,
                    domain,
                });
            }
        }
    }

    let mut words: Vec<String> = ["this", "bird", "has", "a", "and"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for c in 0..cfg.classes {
        for a in 0..cfg.attributes_per_class {
            let (adj, part) = attribute_words(c, a, cfg.attributes_per_class);
            words.push(adj);
            words.push(part);
        }
    }
    let dataset = Dataset {
        classes: (0..cfg.classes).map(|c| format!("class{c}")).collect(),
        domains: (0..cfg.domains).map(|k| format!("domain{k}")).collect(),
        grid_side: cfg.grid_side,
        feature_dim: d,
        dtype: DType::F64,
        samples,
        manifest: Value::Null,
    };
    Ok((dataset, Vocabulary::from_words(words)))
}

pub(crate) fn mean_rows(x: &Tensor) -> Tensor {
    let (m, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; d];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    Tensor::new(&[d], out).expect("shape matches")
}
