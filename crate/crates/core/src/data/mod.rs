//! Feature ingestion, captions, DG splits and the synthetic generator.

mod archive;
mod eval;
mod split;
mod synth;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use archive::{Archive, ArchiveError, DType, NamedTensor, MAGIC, VERSION};
pub use eval::{centroid_oracle, evaluate, DomainAccuracy};
pub use split::{make_split, DgSplit, SplitIndices};
pub use synth::{attribute_words, synth_dataset, SynthConfig};
pub use vocab::{split_words, tokenize, Vocabulary, PAD_TOKEN, UNK_TOKEN};

use crate::error::{Error, Result};
use crate::numgrad::Tensor;

/// One image: pooled feature, patch grid, captions, label and domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleFeatures {
    /// `[d]`
    pub x_g: Tensor,
    /// `[M × d]`
    pub x_l: Tensor,
    pub captions: Vec<String>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub grid_side: usize,
    pub feature_dim: usize,
    pub dtype: DType,
    pub samples: Vec<SampleFeatures>,
    /// Free-form exporter manifest, carried through unchanged.
    pub manifest: Value,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    label: usize,
    domain: usize,
    captions: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    classes: Vec<String>,
    domains: Vec<String>,
    grid_side: usize,
    feature_dim: usize,
    captions: Vec<String>,
    samples: Vec<SampleMeta>,
    #[serde(default)]
    manifest: Value,
}

impl Dataset {
    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices_in_domain(&self, domain: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].domain == domain)
            .collect()
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.domains.is_empty() {
            return Err(Error::Data(
                "dataset needs at least one class and one domain".into(),
            ));
        }
        if self.grid_side == 0 || self.feature_dim == 0 {
            return Err(Error::Data(
                "grid side and feature dimension must be positive".into(),
            ));
        }
        let (m, d) = (self.num_patches(), self.feature_dim);
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes() {
                return Err(Error::Data(format!(
                    "sample {i}: label {} out of range ({} classes)",
                    s.label,
                    self.num_classes()
                )));
            }
            if s.domain >= self.num_domains() {
                return Err(Error::Data(format!(
                    "sample {i}: domain {} out of range ({} domains)",
                    s.domain,
                    self.num_domains()
                )));
            }
            if s.x_g.shape() != [d] {
                return Err(Error::Data(format!(
                    "x_g/{i}: shape {:?}, expected [{d}]",
                    s.x_g.shape()
                )));
            }
            if s.x_l.shape() != [m, d] {
                return Err(Error::Data(format!(
                    "x_l/{i}: shape {:?}, expected [{m}, {d}]",
                    s.x_l.shape()
                )));
            }
            if !s.x_g.all_finite() || !s.x_l.all_finite() {
                return Err(Error::Data(format!("sample {i}: non-finite features")));
            }
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let mut table: Vec<String> = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        let samples = self
            .samples
            .iter()
            .map(|s| SampleMeta {
                label: s.label,
                domain: s.domain,
                captions: s
                    .captions
                    .iter()
                    .map(|c| {
                        *lookup.entry(c.clone()).or_insert_with(|| {
                            table.push(c.clone());
                            table.len() - 1
                        })
                    })
                    .collect(),
            })
            .collect();
        let meta = DatasetMeta {
            classes: self.classes.clone(),
            domains: self.domains.clone(),
            grid_side: self.grid_side,
            feature_dim: self.feature_dim,
            captions: table,
            samples,
            manifest: self.manifest.clone(),
        };
        let mut archive = Archive::new(serde_json::to_value(meta).expect("metadata serializes"));
        for (i, s) in self.samples.iter().enumerate() {
            archive.push(format!("x_g/{i}"), self.dtype, s.x_g.clone());
            archive.push(format!("x_l/{i}"), self.dtype, s.x_l.clone());
        }
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| Error::Data(format!("dataset header: {e}")))?;
        let (m, d) = (meta.grid_side * meta.grid_side, meta.feature_dim);
        let dtype = archive
            .tensors
            .first()
            .map(|t| t.dtype)
            .unwrap_or(DType::F64);
        let mut samples = Vec::with_capacity(meta.samples.len());
        for (i, s) in meta.samples.into_iter().enumerate() {
            let x_g = archive.expect(&format!("x_g/{i}"), &[d])?.clone();
            let x_l = archive.expect(&format!("x_l/{i}"), &[m, d])?.clone();
            let captions = s
                .captions
                .iter()
                .map(|&c| {
                    meta.captions.get(c).cloned().ok_or_else(|| {
                        Error::Data(format!("sample {i}: caption index {c} out of range"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(SampleFeatures {
                x_g,
                x_l,
                captions,
                label: s.label,
                domain: s.domain,
            });
        }
        if archive.tensors.len() != 2 * samples.len() {
            return Err(Error::Data(format!(
                "archive holds {} tensors for {} samples",
                archive.tensors.len(),
                samples.len()
            )));
        }
        if archive.tensors.iter().any(|t| t.dtype != dtype) {
            return Err(Error::Data("mixed payload dtypes".into()));
        }
        let ds = Self {
            classes: meta.classes,
            domains: meta.domains,
            grid_side: meta.grid_side,
            feature_dim: meta.feature_dim,
            dtype,
            samples,
            manifest: meta.manifest,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_archive().to_bytes()
    }
}

pub fn load_archive(path: &Path) -> Result<Dataset> {
    let archive = Archive::read(path)?;
    Dataset::from_archive(&archive).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_archive(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.to_archive().write(path)
}
