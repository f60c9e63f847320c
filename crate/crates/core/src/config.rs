//! Run configuration: a flat `key = value` text format.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! documented default (see [`RunConfig::KEYS`]); unknown keys are
//! rejected and every value is range-checked before any work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::matching::HingeConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_h: f64,
    pub lambda_aux: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_h: 0.1,
            lambda_aux: 0.1,
            lambda_p: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub k_v: usize,
    pub k_t: usize,
    pub n_v: usize,
    pub n_t: usize,
    pub d_g: usize,
    pub d_t: usize,
    pub proj_dim: usize,
    pub adapter_dim: usize,
    pub dropout: f64,
    pub margin: f64,
    pub weights: LossWeights,
    pub lr: f64,
    pub steps: usize,
    pub batch_per_domain: usize,
    pub max_caption_len: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub target_domain: usize,
    pub few_shot_k: Option<usize>,
    pub use_global: bool,
    pub use_local: bool,
    pub use_gv_classifier: bool,
    pub dmon_on_text: bool,
    pub share_cluster_projection: bool,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_v: 8,
            k_t: 3,
            n_v: 5,
            n_t: 3,
            d_g: 64,
            d_t: 64,
            proj_dim: 64,
            adapter_dim: 32,
            dropout: 0.5,
            margin: 1.0,
            weights: LossWeights::default(),
            lr: 5e-5,
            steps: 5000,
            batch_per_domain: 8,
            max_caption_len: 32,
            checkpoint_every: 0,
            seed: 0,
            target_domain: 0,
            few_shot_k: None,
            use_global: true,
            use_local: true,
            use_gv_classifier: true,
            dmon_on_text: true,
            share_cluster_projection: false,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small configuration for finite-difference checks: every width at
    /// most 8 and a batch of two samples.
    pub fn tiny() -> Self {
        let mut cfg = Self {
            k_v: 3,
            k_t: 2,
            n_v: 3,
            n_t: 2,
            d_g: 6,
            d_t: 5,
            proj_dim: 4,
            adapter_dim: 5,
            batch_per_domain: 1,
            steps: 1,
            ..Self::default()
        };
        cfg.weights.lambda_p = 1.0;
        cfg.synth = SynthConfig {
            classes: 3,
            domains: 3,
            attributes_per_class: 2,
            samples_per_cell: 2,
            feature_dim: 6,
            grid_side: 3,
            captions_per_sample: 1,
            ..SynthConfig::default()
        };
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!(
            "{key}: expected a boolean, got '{other}'"
        ))),
    }
}

impl RunConfig {
    /// Every recognized key with a one-line description.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("k_v", "neighbours per node in the visual k-NN graph"),
        ("k_t", "neighbours per node in the textual k-NN graph"),
        ("n_v", "visual clusters per image"),
        ("n_t", "textual clusters per caption (must not exceed n_v)"),
        ("d_g", "GCN hidden and output width"),
        ("d_t", "word embedding width"),
        ("proj_dim", "width of the shared alignment space"),
        (
            "adapter_dim",
            "width of the trainable patch adapter, 0 disables it",
        ),
        (
            "dropout",
            "dropout on GCN node outputs before readout, in [0, 1)",
        ),
        ("margin", "hinge margin epsilon"),
        ("lambda_d", "weight of the clustering loss"),
        ("lambda_h", "weight of the hinge loss"),
        ("lambda_aux", "weight of the matched-cluster classifier"),
        (
            "lambda_p",
            "optional standalone weight of the matching loss",
        ),
        ("lr", "Adam learning rate"),
        ("steps", "training steps"),
        (
            "batch_per_domain",
            "samples drawn from each source domain per step",
        ),
        ("max_caption_len", "maximum caption length in tokens"),
        (
            "checkpoint_every",
            "checkpoint interval in steps, 0 for final only",
        ),
        (
            "seed",
            "seed for initialization, splits, batching and dropout",
        ),
        ("target_domain", "held-out domain index"),
        (
            "few_shot_k",
            "samples kept per class and source domain, 0 for all",
        ),
        (
            "use_global",
            "enable the global alignment loss and its classifier",
        ),
        (
            "use_local",
            "enable the clustering, matching and hinge losses",
        ),
        (
            "use_gv_classifier",
            "enable the classifier on the visual graph readout",
        ),
        (
            "dmon_on_text",
            "apply the clustering loss to the textual graph too",
        ),
        (
            "share_cluster_projection",
            "one projection for both cluster modalities",
        ),
        ("synth_classes", "synthetic: number of classes"),
        ("synth_domains", "synthetic: number of domains"),
        ("synth_attributes", "synthetic: attributes per class"),
        ("synth_samples", "synthetic: samples per class and domain"),
        ("synth_feature_dim", "synthetic: patch feature width"),
        ("synth_grid_side", "synthetic: patches per grid side"),
        ("synth_noise", "synthetic: patch noise standard deviation"),
        (
            "synth_domain_shift",
            "synthetic: norm of the domain offsets",
        ),
        (
            "synth_style_dim",
            "synthetic: dimension of the domain offset subspace, 0 for full",
        ),
        (
            "synth_tint",
            "synthetic: norm of the class-by-domain background tint",
        ),
        (
            "synth_object_fraction",
            "synthetic: probability of an attribute patch",
        ),
        ("synth_captions", "synthetic: captions per sample"),
        ("synth_seed", "synthetic: generator seed"),
    ];

    pub fn hinge(&self) -> HingeConfig {
        HingeConfig {
            margin: self.margin,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "k_v" => self.k_v = parse(key, value)?,
            "k_t" => self.k_t = parse(key, value)?,
            "n_v" => self.n_v = parse(key, value)?,
            "n_t" => self.n_t = parse(key, value)?,
            "d_g" => self.d_g = parse(key, value)?,
            "d_t" => self.d_t = parse(key, value)?,
            "proj_dim" => self.proj_dim = parse(key, value)?,
            "adapter_dim" => self.adapter_dim = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "lambda_d" => self.weights.lambda_d = parse(key, value)?,
            "lambda_h" => self.weights.lambda_h = parse(key, value)?,
            "lambda_aux" => self.weights.lambda_aux = parse(key, value)?,
            "lambda_p" => self.weights.lambda_p = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_per_domain" => self.batch_per_domain = parse(key, value)?,
            "max_caption_len" => self.max_caption_len = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "target_domain" => self.target_domain = parse(key, value)?,
            "few_shot_k" => {
                let k: usize = parse(key, value)?;
                self.few_shot_k = (k > 0).then_some(k);
            }
            "use_global" => self.use_global = parse_bool(key, value)?,
            "use_local" => self.use_local = parse_bool(key, value)?,
            "use_gv_classifier" => self.use_gv_classifier = parse_bool(key, value)?,
            "dmon_on_text" => self.dmon_on_text = parse_bool(key, value)?,
            "share_cluster_projection" => self.share_cluster_projection = parse_bool(key, value)?,
            "synth_classes" => self.synth.classes = parse(key, value)?,
            "synth_domains" => self.synth.domains = parse(key, value)?,
            "synth_attributes" => self.synth.attributes_per_class = parse(key, value)?,
            "synth_samples" => self.synth.samples_per_cell = parse(key, value)?,
            "synth_feature_dim" => self.synth.feature_dim = parse(key, value)?,
            "synth_grid_side" => self.synth.grid_side = parse(key, value)?,
            "synth_noise" => self.synth.noise = parse(key, value)?,
            "synth_domain_shift" => self.synth.domain_shift = parse(key, value)?,
            "synth_style_dim" => self.synth.style_dim = parse(key, value)?,
            "synth_tint" => self.synth.tint = parse(key, value)?,
            "synth_object_fraction" => self.synth.object_fraction = parse(key, value)?,
            "synth_captions" => self.synth.captions_per_sample = parse(key, value)?,
            "synth_seed" => self.synth.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let b = |x: bool| x.to_string();
        let s = &self.synth;
        [
            ("k_v", self.k_v.to_string()),
            ("k_t", self.k_t.to_string()),
            ("n_v", self.n_v.to_string()),
            ("n_t", self.n_t.to_string()),
            ("d_g", self.d_g.to_string()),
            ("d_t", self.d_t.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("adapter_dim", self.adapter_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("margin", self.margin.to_string()),
            ("lambda_d", self.weights.lambda_d.to_string()),
            ("lambda_h", self.weights.lambda_h.to_string()),
            ("lambda_aux", self.weights.lambda_aux.to_string()),
            ("lambda_p", self.weights.lambda_p.to_string()),
            ("lr", self.lr.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_per_domain", self.batch_per_domain.to_string()),
            ("max_caption_len", self.max_caption_len.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("seed", self.seed.to_string()),
            ("target_domain", self.target_domain.to_string()),
            ("few_shot_k", self.few_shot_k.unwrap_or(0).to_string()),
            ("use_global", b(self.use_global)),
            ("use_local", b(self.use_local)),
            ("use_gv_classifier", b(self.use_gv_classifier)),
            ("dmon_on_text", b(self.dmon_on_text)),
            ("share_cluster_projection", b(self.share_cluster_projection)),
            ("synth_classes", s.classes.to_string()),
            ("synth_domains", s.domains.to_string()),
            ("synth_attributes", s.attributes_per_class.to_string()),
            ("synth_samples", s.samples_per_cell.to_string()),
            ("synth_feature_dim", s.feature_dim.to_string()),
            ("synth_grid_side", s.grid_side.to_string()),
            ("synth_noise", s.noise.to_string()),
            ("synth_domain_shift", s.domain_shift.to_string()),
            ("synth_style_dim", s.style_dim.to_string()),
            ("synth_tint", s.tint.to_string()),
            ("synth_object_fraction", s.object_fraction.to_string()),
            ("synth_captions", s.captions_per_sample.to_string()),
            ("synth_seed", s.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every key in [`RunConfig::KEYS`] order, re-readable by
    /// [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let map = self.to_map();
        let mut out = String::new();
        for (key, _) in Self::KEYS {
            writeln!(out, "{key} = {}", map[*key]).expect("write to string");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("k_v", self.k_v),
            ("k_t", self.k_t),
            ("n_v", self.n_v),
            ("n_t", self.n_t),
            ("d_g", self.d_g),
            ("d_t", self.d_t),
            ("proj_dim", self.proj_dim),
            ("batch_per_domain", self.batch_per_domain),
            ("max_caption_len", self.max_caption_len),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.n_t > self.n_v {
            return fail(format!(
                "n_t ({}) must not exceed n_v ({}) for an injective matching",
                self.n_t, self.n_v
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        for (name, v) in [
            ("margin", self.margin),
            ("lambda_d", self.weights.lambda_d),
            ("lambda_h", self.weights.lambda_h),
            ("lambda_aux", self.weights.lambda_aux),
            ("lambda_p", self.weights.lambda_p),
            ("lr", self.lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        self.synth.validate()
    }
}
