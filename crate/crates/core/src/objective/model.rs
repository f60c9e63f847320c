use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{global_alignment, mean_cross_entropy, LossBreakdown};
use crate::clustering::{aggregate_clusters, dmon_loss, ClusterHead, ClusterSet, Modality};
use crate::config::RunConfig;
use crate::data::SampleFeatures;
use crate::encoders::{
    argmax, BnStats, Classifier, EmbeddingTable, GcnEncoder, Linear, Mode, ProjectionHead,
};
use crate::error::{Error, Result};
use crate::graphs::{knn_graph, modularity_inputs, Graph};
use crate::matching::{
    hinge_loss, matched_mean_distance, min_cross_distance, pairwise_match_loss, MatchResult,
};
use crate::numgrad::{ParamId, ParamStore, Tape, Tensor, Var};

/// Every learnable component. All parameters exist regardless of which
/// losses are enabled, so checkpoints share one layout.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub feature_dim: usize,
    pub classes: usize,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub adapter: Option<Linear>,
    pub visual_gcn: GcnEncoder,
    pub text_gcn: GcnEncoder,
    pub embedding: EmbeddingTable,
    pub proj_x: ProjectionHead,
    pub proj_v: ProjectionHead,
    pub proj_t: ProjectionHead,
    pub proj_cluster_v: ProjectionHead,
    /// `None` when both modalities share `proj_cluster_v`.
    pub proj_cluster_t: Option<ProjectionHead>,
    pub cluster_v: ClusterHead,
    pub cluster_t: ClusterHead,
    pub cls_main: Classifier,
    pub cls_gv: Classifier,
    pub cls_aux_global: Classifier,
    pub cls_aux_local: Classifier,
}

/// One training example with the caption chosen for this step.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub sample: &'a SampleFeatures,
    pub tokens: &'a [u32],
}

/// Tape handles of every loss term (zero constants for disabled terms).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_c: Var,
    pub l_global: Var,
    pub l_d: Var,
    pub l_h: Var,
    pub l_p: Var,
    pub l_aux_global: Var,
    pub l_aux_local: Var,
    pub l_gv_cls: Var,
    pub l_local: Var,
    pub total: Var,
}

impl LossVars {
    pub fn get(&self, term: &str) -> Option<Var> {
        Some(match term {
            "l_c" => self.l_c,
            "l_global" => self.l_global,
            "l_d" => self.l_d,
            "l_h" => self.l_h,
            "l_p" => self.l_p,
            "l_aux_global" => self.l_aux_global,
            "l_aux_local" => self.l_aux_local,
            "l_gv_cls" => self.l_gv_cls,
            "l_local" => self.l_local,
            "total" => self.total,
            _ => return None,
        })
    }
}

/// Per-sample local-branch details kept for inspection.
#[derive(Clone, Debug)]
pub struct LocalDetail {
    pub visual_assignment: Tensor,
    pub text_assignment: Tensor,
    pub matching: MatchResult,
}

pub struct ForwardOutput {
    pub losses: LossVars,
    pub breakdown: LossBreakdown,
    pub predictions: Vec<usize>,
    pub visual_bn: Vec<Option<BnStats>>,
    pub text_bn: Vec<Option<BnStats>>,
    pub local: Vec<LocalDetail>,
    /// Hash of every discrete choice made: graph edges, matchings and the
    /// selected negatives.
    pub structure: u64,
}

fn zero(tape: &Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn stack(tape: &Tape, scalars: &[Var]) -> Result<Var> {
    let rows: Vec<Var> = scalars
        .iter()
        .map(|&s| tape.reshape(s, &[1, 1]))
        .collect::<std::result::Result<_, _>>()?;
    Ok(tape.reshape(tape.concat_rows(&rows)?, &[scalars.len()])?)
}

impl Model {
    pub fn new(
        config: &RunConfig,
        feature_dim: usize,
        classes: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 || classes < 2 || vocab_size < 2 {
            return Err(Error::Config(format!(
                "model needs feature_dim ≥ 1, ≥ 2 classes and a vocabulary; got {feature_dim}, {classes}, {vocab_size}"
            )));
        }
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut store = ParamStore::new();
        let adapter = (c.adapter_dim > 0)
            .then(|| Linear::new(&mut store, "adapter", feature_dim, c.adapter_dim, &mut rng));
        let vdim = if c.adapter_dim > 0 {
            c.adapter_dim
        } else {
            feature_dim
        };
        if c.share_cluster_projection && vdim != c.d_t {
            return Err(Error::Config(format!(
                "share_cluster_projection needs equal visual ({vdim}) and word ({}) widths",
                c.d_t
            )));
        }
        let visual_gcn = GcnEncoder::new(&mut store, "visual", vdim, c.d_g, c.dropout, &mut rng);
        let embedding = EmbeddingTable::new(&mut store, "words", vocab_size, c.d_t, &mut rng);
        let text_gcn = GcnEncoder::new(&mut store, "text", c.d_t, c.d_g, c.dropout, &mut rng);
        let proj_x = ProjectionHead::new(&mut store, "proj_x", vdim, c.proj_dim, &mut rng);
        let proj_v = ProjectionHead::new(&mut store, "proj_v", c.d_g, c.proj_dim, &mut rng);
        let proj_t = ProjectionHead::new(&mut store, "proj_t", c.d_g, c.proj_dim, &mut rng);
        let cluster_v = ClusterHead::new(&mut store, "cluster_v", c.d_g, c.n_v, &mut rng);
        let cluster_t = ClusterHead::new(&mut store, "cluster_t", c.d_g, c.n_t, &mut rng);
        let proj_cluster_v =
            ProjectionHead::new(&mut store, "proj_cluster_v", vdim, c.proj_dim, &mut rng);
        let proj_cluster_t = (!c.share_cluster_projection).then(|| {
            ProjectionHead::new(&mut store, "proj_cluster_t", c.d_t, c.proj_dim, &mut rng)
        });
        let cls_main = Classifier::new(&mut store, "cls_main", vdim, classes, &mut rng);
        let cls_gv = Classifier::new(&mut store, "cls_gv", c.d_g, classes, &mut rng);
        let cls_aux_global =
            Classifier::new(&mut store, "cls_aux_global", c.proj_dim, classes, &mut rng);
        let cls_aux_local =
            Classifier::new(&mut store, "cls_aux_local", c.proj_dim, classes, &mut rng);
        Ok(Self {
            config: c.clone(),
            feature_dim,
            classes,
            vocab_size,
            store,
            adapter,
            visual_gcn,
            text_gcn,
            embedding,
            proj_x,
            proj_v,
            proj_t,
            proj_cluster_v,
            proj_cluster_t,
            cluster_v,
            cluster_t,
            cls_main,
            cls_gv,
            cls_aux_global,
            cls_aux_local,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.adapter
            .as_ref()
            .map_or(self.feature_dim, |a| a.out_dim)
    }

    /// Parameters of the encoders and heads that only the caption path uses.
    pub fn text_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding.table];
        ids.extend(self.text_gcn.params());
        ids.extend(self.proj_t.0.params());
        ids.extend(self.cluster_t.params());
        if let Some(p) = &self.proj_cluster_t {
            ids.extend(p.0.params());
        }
        ids
    }

    fn text_cluster_proj(&self) -> &ProjectionHead {
        self.proj_cluster_t.as_ref().unwrap_or(&self.proj_cluster_v)
    }

    /// Adapted patch features per sample and the pooled `[B × d]` global
    /// features fed to the main classifier.
    fn visual_features(&self, tape: &Tape, samples: &[&SampleFeatures]) -> Result<(Vec<Var>, Var)> {
        for s in samples {
            if s.x_l.cols() != self.feature_dim {
                return Err(Error::Config(format!(
                    "sample features have width {}, model expects {}",
                    s.x_l.cols(),
                    self.feature_dim
                )));
            }
        }
        match &self.adapter {
            None => {
                let nodes = samples
                    .iter()
                    .map(|s| tape.constant(s.x_l.clone()))
                    .collect();
                let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.x_g.data().to_vec()).collect();
                Ok((nodes, tape.constant(Tensor::from_rows(&rows)?)))
            }
            Some(adapter) => {
                let raw: Vec<Var> = samples
                    .iter()
                    .map(|s| tape.constant(s.x_l.clone()))
                    .collect();
                let all = if raw.len() == 1 {
                    raw[0]
                } else {
                    tape.concat_rows(&raw)?
                };
                let pre = adapter.forward(tape, &self.store, all)?;
                let adapted = tape.relu(pre);
                let mut nodes = Vec::with_capacity(samples.len());
                let mut pooled = Vec::with_capacity(samples.len());
                let mut start = 0;
                for s in samples {
                    let end = start + s.x_l.rows();
                    let block = if samples.len() == 1 {
                        adapted
                    } else {
                        tape.slice_rows(adapted, start, end)?
                    };
                    pooled.push(tape.reshape(tape.mean_rows(block)?, &[1, adapter.out_dim])?);
                    nodes.push(block);
                    start = end;
                }
                let x_g = if pooled.len() == 1 {
                    pooled[0]
                } else {
                    tape.concat_rows(&pooled)?
                };
                Ok((nodes, x_g))
            }
        }
    }

    /// Pooled (adapted) image features `[B × visual_dim]` seen by the main
    /// classifier.
    pub fn image_features(&self, samples: &[&SampleFeatures]) -> Result<Tensor> {
        let tape = Tape::new();
        let (_, x_g) = self.visual_features(&tape, samples)?;
        Ok((*tape.value(x_g)).clone())
    }

    /// Predicted class of each sample from the image branch alone.
    pub fn predict(&self, samples: &[&SampleFeatures]) -> Result<Vec<usize>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let (_, x_g) = self.visual_features(&tape, samples)?;
        let probs = tape.value(self.cls_main.forward_rows(&tape, &self.store, x_g)?);
        Ok((0..samples.len()).map(|b| argmax(probs.row(b))).collect())
    }

    /// Single-sample forward; the hinge term is skipped.
    pub fn forward_sample(
        &self,
        tape: &Tape,
        item: BatchItem<'_>,
        mode: Mode,
        seed: u64,
    ) -> Result<ForwardOutput> {
        self.forward_batch(tape, &[item], mode, seed)
    }

    /// Records every enabled loss term for `items` on `tape`. `seed` drives
    /// dropout, so equal seeds give identical outputs.
    pub fn forward_batch(
        &self,
        tape: &Tape,
        items: &[BatchItem<'_>],
        mode: Mode,
        seed: u64,
    ) -> Result<ForwardOutput> {
        if items.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let cfg = &self.config;
        let w = cfg.weights;
        let store = &self.store;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hasher = DefaultHasher::new();
        let b_len = items.len();
        let samples: Vec<&SampleFeatures> = items.iter().map(|i| i.sample).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Data(format!(
                "label {bad} outside {} classes",
                self.classes
            )));
        }

        let (nodes, x_g) = self.visual_features(tape, &samples)?;
        let probs = self.cls_main.forward_rows(tape, store, x_g)?;
        let predictions = {
            let p = tape.value(probs);
            (0..b_len).map(|b| argmax(p.row(b))).collect()
        };
        let l_c = mean_cross_entropy(tape, probs, &labels)?;

        let need_visual = cfg.use_global || cfg.use_local || cfg.use_gv_classifier;
        let need_text = cfg.use_global || cfg.use_local;

        let mut visual_bn = Vec::new();
        let mut text_bn = Vec::new();
        let mut visual_graphs = Vec::new();
        let mut visual_out = None;
        if need_visual {
            for &n in &nodes {
                let g = knn_graph(&tape.value(n), cfg.k_v)?;
                g.edges().hash(&mut hasher);
                visual_graphs.push(g);
            }
            let refs: Vec<&Graph> = visual_graphs.iter().collect();
            let out = self
                .visual_gcn
                .forward_batch(tape, store, &refs, &nodes, mode, &mut rng)?;
            visual_bn = out.bn_stats.clone();
            visual_out = Some(out);
        }

        let mut words = Vec::new();
        let mut text_graphs = Vec::new();
        let mut text_out = None;
        if need_text {
            for (b, item) in items.iter().enumerate() {
                let t = self
                    .embedding
                    .embed(tape, store, item.tokens, cfg.max_caption_len)
                    .map_err(|e| Error::Data(format!("batch item {b}: {e}")))?;
                let g = knn_graph(&tape.value(t), cfg.k_t)?;
                g.edges().hash(&mut hasher);
                text_graphs.push(g);
                words.push(t);
            }
            let refs: Vec<&Graph> = text_graphs.iter().collect();
            let out = self
                .text_gcn
                .forward_batch(tape, store, &refs, &words, mode, &mut rng)?;
            text_bn = out.bn_stats.clone();
            text_out = Some(out);
        }

        let l_gv_cls = match (&visual_out, cfg.use_gv_classifier) {
            (Some(v), true) => {
                let p = self.cls_gv.forward_rows(tape, store, v.graph_repr)?;
                mean_cross_entropy(tape, p, &labels)?
            }
            _ => zero(tape),
        };

        let (l_global, l_aux_global) = match (&visual_out, &text_out, cfg.use_global) {
            (Some(v), Some(t), true) => {
                let g = global_alignment(
                    tape,
                    store,
                    x_g,
                    v.graph_repr,
                    t.graph_repr,
                    [&self.proj_x, &self.proj_v, &self.proj_t],
                )?;
                let p = self.cls_aux_global.forward_rows(tape, store, g.p_x)?;
                (
                    tape.mean(g.per_sample),
                    mean_cross_entropy(tape, p, &labels)?,
                )
            }
            _ => (zero(tape), zero(tape)),
        };

        let mut local = Vec::new();
        let mut hinge_skipped = false;
        let (l_d, l_h, l_p, l_aux_local, l_local) = match (&visual_out, &text_out, cfg.use_local) {
            (Some(v), Some(t), true) => {
                let ca_v = self.cluster_v.assign(tape, store, v.node_repr)?;
                let ca_t = self.cluster_t.assign(tape, store, t.node_repr)?;
                let mut cv = Vec::with_capacity(b_len);
                let mut ct = Vec::with_capacity(b_len);
                let mut d_terms = Vec::with_capacity(b_len);
                for b in 0..b_len {
                    let av = tape.slice_rows(ca_v, v.offsets[b], v.offsets[b + 1])?;
                    let at = tape.slice_rows(ca_t, t.offsets[b], t.offsets[b + 1])?;
                    let mut ld = dmon_loss(tape, av, &modularity_inputs(&visual_graphs[b])?)?.total;
                    if cfg.dmon_on_text {
                        let lt = dmon_loss(tape, at, &modularity_inputs(&text_graphs[b])?)?.total;
                        ld = tape.add(ld, lt)?;
                    }
                    d_terms.push(ld);
                    let fv = aggregate_clusters(
                        tape,
                        store,
                        av,
                        nodes[b],
                        &self.proj_cluster_v,
                        cfg.n_v,
                    )?;
                    let ft = aggregate_clusters(
                        tape,
                        store,
                        at,
                        words[b],
                        self.text_cluster_proj(),
                        cfg.n_t,
                    )?;
                    cv.push(ClusterSet {
                        assignment: av,
                        features: fv,
                        modality: Modality::Visual,
                        clusters: cfg.n_v,
                    });
                    ct.push(ClusterSet {
                        assignment: at,
                        features: ft,
                        modality: Modality::Textual,
                        clusters: cfg.n_t,
                    });
                }

                let mut p_terms = Vec::with_capacity(b_len);
                let mut aux_terms = Vec::with_capacity(b_len);
                for b in 0..b_len {
                    let (lp, m) = pairwise_match_loss(tape, &cv[b], &ct[b])?;
                    m.mu.hash(&mut hasher);
                    let matched = tape.gather_rows(cv[b].features, &m.mu)?;
                    let pooled = tape.reshape(tape.mean_rows(matched)?, &[1, cfg.proj_dim])?;
                    let p = self.cls_aux_local.forward_rows(tape, store, pooled)?;
                    aux_terms.push(mean_cross_entropy(tape, p, &labels[b..=b])?);
                    p_terms.push(lp);
                    local.push(LocalDetail {
                        visual_assignment: (*tape.value(cv[b].assignment)).clone(),
                        text_assignment: (*tape.value(ct[b].assignment)).clone(),
                        matching: m,
                    });
                }

                let h_terms = if b_len < 2 {
                    hinge_skipped = true;
                    Vec::new()
                } else {
                    let values: Vec<(Tensor, Tensor)> = (0..b_len)
                        .map(|b| {
                            (
                                (*tape.value(cv[b].features)).clone(),
                                (*tape.value(ct[b].features)).clone(),
                            )
                        })
                        .collect();
                    // cross[v][t]: matched distance between visual clusters of v and textual clusters of t
                    let mut cross = vec![vec![f64::INFINITY; b_len]; b_len];
                    for (vi, row) in cross.iter_mut().enumerate() {
                        for (ti, cell) in row.iter_mut().enumerate() {
                            if vi != ti {
                                *cell = matched_mean_distance(&values[vi].0, &values[ti].1)?.0;
                            }
                        }
                    }
                    let pick = |f: &dyn Fn(usize) -> f64| -> usize {
                        let mut best = usize::MAX;
                        for j in 0..b_len {
                            if f(j).is_finite() && (best == usize::MAX || f(j) < f(best)) {
                                best = j;
                            }
                        }
                        best
                    };
                    let mut terms = Vec::with_capacity(b_len);
                    for b in 0..b_len {
                        let other_visual = pick(&|j| cross[j][b]);
                        let other_text = pick(&|j| cross[b][j]);
                        (other_visual, other_text).hash(&mut hasher);
                        let (neg_vt, _) = min_cross_distance(tape, &cv[other_visual], &ct[b])?;
                        let (neg_tv, _) = min_cross_distance(tape, &cv[b], &ct[other_text])?;
                        terms.push(hinge_loss(tape, p_terms[b], neg_vt, neg_tv, cfg.hinge())?);
                    }
                    terms
                };

                let l_d = tape.mean(stack(tape, &d_terms)?);
                let l_p = tape.mean(stack(tape, &p_terms)?);
                let l_aux = tape.mean(stack(tape, &aux_terms)?);
                let l_h = if h_terms.is_empty() {
                    zero(tape)
                } else {
                    tape.mean(stack(tape, &h_terms)?)
                };
                let l_local = tape.add_n(&[
                    tape.scale(l_d, w.lambda_d),
                    tape.scale(l_h, w.lambda_h),
                    tape.scale(l_aux, w.lambda_aux),
                    tape.scale(l_p, w.lambda_p),
                ])?;
                (l_d, l_h, l_p, l_aux, l_local)
            }
            _ => (zero(tape), zero(tape), zero(tape), zero(tape), zero(tape)),
        };

        let total = tape.add_n(&[l_c, l_global, l_local, l_gv_cls, l_aux_global])?;
        let losses = LossVars {
            l_c,
            l_global,
            l_d,
            l_h,
            l_p,
            l_aux_global,
            l_aux_local,
            l_gv_cls,
            l_local,
            total,
        };
        let breakdown = LossBreakdown {
            l_c: tape.item(l_c),
            l_global: tape.item(l_global),
            l_d: tape.item(l_d),
            l_h: tape.item(l_h),
            l_p: tape.item(l_p),
            l_aux_global: tape.item(l_aux_global),
            l_aux_local: tape.item(l_aux_local),
            l_gv_cls: tape.item(l_gv_cls),
            l_local: tape.item(l_local),
            total: tape.item(total),
            hinge_skipped,
        };
        Ok(ForwardOutput {
            losses,
            breakdown,
            predictions,
            visual_bn,
            text_bn,
            local,
            structure: hasher.finish(),
        })
    }

    pub fn update_running(&mut self, out: &ForwardOutput) {
        self.visual_gcn.update_running(&out.visual_bn);
        self.text_gcn.update_running(&out.text_bn);
    }
}
