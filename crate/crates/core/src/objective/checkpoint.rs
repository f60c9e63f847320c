//! Model checkpoints in the tensor archive format: every parameter and
//! running batch-norm statistic as a named `f64` tensor, with the resolved
//! configuration, vocabulary and label names in the header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::config::RunConfig;
use crate::data::{Archive, DType, Vocabulary};
use crate::encoders::GcnEncoder;
use crate::error::{Error, Result};
use crate::numgrad::Tensor;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    /// Training step at which the checkpoint was taken.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    step: usize,
    feature_dim: usize,
    config: BTreeMap<String, String>,
    vocab: Vec<String>,
    classes: Vec<String>,
    domains: Vec<String>,
    /// Parameter name → shape, in tensor order.
    manifest: Vec<(String, Vec<usize>)>,
}

const KIND: &str = "checkpoint";

fn bn_names(prefix: &str, gcn: &GcnEncoder) -> Vec<(String, String)> {
    (0..gcn.layers.len())
        .map(|l| {
            (
                format!("bn/{prefix}/{l}/running_mean"),
                format!("bn/{prefix}/{l}/running_var"),
            )
        })
        .collect()
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let m = &self.model;
        let store = &m.store;
        let manifest = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.get(id).shape().to_vec()))
            .collect();
        let meta = Meta {
            kind: KIND.into(),
            step: self.step,
            feature_dim: m.feature_dim,
            config: m.config.to_map(),
            vocab: self.vocab.words().to_vec(),
            classes: self.class_names.clone(),
            domains: self.domain_names.clone(),
            manifest,
        };
        let mut archive = Archive::new(serde_json::to_value(meta).expect("metadata serializes"));
        for id in store.ids() {
            let mut t = store.get(id).clone();
            t.requires_grad = false;
            t.grad = None;
            archive.push(store.name(id), DType::F64, t);
        }
        for (prefix, gcn) in [("visual", &m.visual_gcn), ("text", &m.text_gcn)] {
            for ((mean_name, var_name), layer) in bn_names(prefix, gcn).into_iter().zip(&gcn.layers)
            {
                archive.push(
                    mean_name,
                    DType::F64,
                    Tensor::vector(layer.norm.running_mean.clone()),
                );
                archive.push(
                    var_name,
                    DType::F64,
                    Tensor::vector(layer.norm.running_var.clone()),
                );
            }
        }
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta: Meta = serde_json::from_value(archive.meta.clone())
            .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        if meta.kind != KIND {
            return Err(Error::Data(format!(
                "archive kind is '{}', expected a checkpoint",
                meta.kind
            )));
        }
        let config = RunConfig::from_map(&meta.config)?;
        let vocab = Vocabulary::from_table(&meta.vocab)
            .ok_or_else(|| Error::Data("checkpoint vocabulary is malformed".into()))?;
        let mut model = Model::new(&config, meta.feature_dim, meta.classes.len(), vocab.len())?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != meta.manifest.len() {
            return Err(Error::Data(format!(
                "checkpoint lists {} parameters, model has {}",
                meta.manifest.len(),
                ids.len()
            )));
        }
        for id in ids {
            let name = model.store.name(id).to_string();
            let shape = model.store.get(id).shape().to_vec();
            let stored = archive.expect(&name, &shape)?;
            model
                .store
                .get_mut(id)
                .data_mut()
                .copy_from_slice(stored.data());
        }
        for prefix in ["visual", "text"] {
            let gcn = if prefix == "visual" {
                &mut model.visual_gcn
            } else {
                &mut model.text_gcn
            };
            for ((mean_name, var_name), l) in bn_names(prefix, gcn).into_iter().zip(0..) {
                let width = gcn.layers[l].norm.running_mean.len();
                gcn.layers[l].norm.running_mean =
                    archive.expect(&mean_name, &[width])?.data().to_vec();
                gcn.layers[l].norm.running_var =
                    archive.expect(&var_name, &[width])?.data().to_vec();
            }
        }
        Ok(Self {
            model,
            vocab,
            class_names: meta.classes,
            domain_names: meta.domains,
            step: meta.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        Self::from_archive(&archive)
    }
}
