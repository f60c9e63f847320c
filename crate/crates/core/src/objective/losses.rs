use serde::Serialize;

use crate::config::LossWeights;
use crate::encoders::ProjectionHead;
use crate::error::{Error, Result};
use crate::numgrad::{ParamStore, Tape, Tensor, Var};

pub const PROB_FLOOR: f64 = 1e-12;

/// `−Σ y ⊙ log(max(ŷ, 1e-12))` summed over every entry, so a `[B × C]`
/// input yields the batch sum.
pub fn cross_entropy(tape: &Tape, y: &Tensor, y_hat: Var) -> Result<Var> {
    let logp = tape.log(tape.clamp_min(y_hat, PROB_FLOOR))?;
    let picked = tape.mul(logp, tape.constant(y.clone()))?;
    Ok(tape.scale(tape.sum(picked), -1.0))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (b, &y) in labels.iter().enumerate() {
        data[b * classes + y] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data).expect("shape matches")
}

/// Mean cross-entropy of `[B × C]` probabilities against `labels`.
pub fn mean_cross_entropy(tape: &Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.shape(probs)[1];
    let total = cross_entropy(tape, &one_hot(labels, classes), probs)?;
    Ok(tape.scale(total, 1.0 / labels.len() as f64))
}

/// Projected triple `(p_x, p_v, p_t)` and the per-row alignment distance
/// `‖p_x − p_v‖ + ‖p_x − p_t‖` as a `[B]` vector.
pub struct GlobalAlignment {
    pub p_x: Var,
    pub p_v: Var,
    pub p_t: Var,
    pub per_sample: Var,
}

pub fn global_alignment(
    tape: &Tape,
    store: &ParamStore,
    x_g: Var,
    g_v: Var,
    g_t: Var,
    heads: [&ProjectionHead; 3],
) -> Result<GlobalAlignment> {
    let dims = heads.map(|h| h.out_dim());
    if dims[0] != dims[1] || dims[0] != dims[2] {
        return Err(Error::Config(format!(
            "global alignment: projection widths differ {dims:?}"
        )));
    }
    let p_x = heads[0].forward(tape, store, x_g)?;
    let p_v = heads[1].forward(tape, store, g_v)?;
    let p_t = heads[2].forward(tape, store, g_t)?;
    let as_rows = |v: Var| -> Result<Var> {
        let s = tape.shape(v);
        Ok(if s.len() == 1 {
            tape.reshape(v, &[1, s[0]])?
        } else {
            v
        })
    };
    let (rx, rv, rt) = (as_rows(p_x)?, as_rows(p_v)?, as_rows(p_t)?);
    let dv = tape.row_l2_norms(tape.sub(rx, rv)?)?;
    let dt = tape.row_l2_norms(tape.sub(rx, rt)?)?;
    Ok(GlobalAlignment {
        p_x,
        p_v,
        p_t,
        per_sample: tape.add(dv, dt)?,
    })
}

/// Batch mean of [`global_alignment`].
pub fn global_alignment_loss(
    tape: &Tape,
    store: &ParamStore,
    x_g: Var,
    g_v: Var,
    g_t: Var,
    heads: [&ProjectionHead; 3],
) -> Result<Var> {
    let g = global_alignment(tape, store, x_g, g_v, g_t, heads)?;
    Ok(tape.mean(g.per_sample))
}

/// Scalar value of every loss term for one step, each a batch mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_global: f64,
    pub l_d: f64,
    pub l_h: f64,
    pub l_p: f64,
    pub l_aux_global: f64,
    pub l_aux_local: f64,
    pub l_gv_cls: f64,
    pub l_local: f64,
    pub total: f64,
    /// Set when the batch held a single sample and no negatives existed.
    pub hinge_skipped: bool,
}

impl LossBreakdown {
    pub const TERMS: [&'static str; 10] = [
        "l_c",
        "l_global",
        "l_d",
        "l_h",
        "l_p",
        "l_aux_global",
        "l_aux_local",
        "l_gv_cls",
        "l_local",
        "total",
    ];

    pub fn get(&self, term: &str) -> Option<f64> {
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

    /// `λ_d·l_d + λ_h·l_h + λ_aux·l_aux_local + λ_p·l_p`.
    pub fn recompute_local(&self, w: &LossWeights) -> f64 {
        self.l_d * w.lambda_d
            + self.l_h * w.lambda_h
            + self.l_aux_local * w.lambda_aux
            + self.l_p * w.lambda_p
    }

    /// `l_c + l_global + l_local + l_gv_cls + l_aux_global`.
    pub fn recompute_total(&self) -> f64 {
        self.l_c + self.l_global + self.l_local + self.l_gv_cls + self.l_aux_global
    }

    pub fn all_finite(&self) -> bool {
        Self::TERMS
            .iter()
            .all(|t| self.get(t).is_some_and(f64::is_finite))
    }
}
