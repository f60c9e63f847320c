//! Finite-difference validation of every loss term of a full forward pass.
//!
//! Central differences are taken coordinate by coordinate over all model
//! parameters. A coordinate is skipped when either perturbed evaluation
//! takes a different discrete path than the base point: a changed k-NN
//! graph, matching or negative choice, or an input that moved across a
//! kink of relu, selu or a clamp.

use super::losses::LossBreakdown;
use super::model::{BatchItem, Model};
use crate::encoders::Mode;
use crate::error::Result;
use crate::numgrad::{fault, relative_error, Tape};

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-8;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TermReport {
    pub term: &'static str,
    /// Norm-wise relative error over all checked coordinates.
    pub worst: f64,
    /// Parameter tensor with the largest absolute discrepancy.
    pub worst_param: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub terms: Vec<TermReport>,
    pub coordinates: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.worst <= self.tolerance)
    }
}

struct Probe {
    values: [f64; 10],
    structure: u64,
    kinks: u64,
}

fn probe(model: &Model, items: &[BatchItem<'_>], seed: u64) -> Result<Probe> {
    let tape = Tape::new();
    let out = model.forward_batch(&tape, items, Mode::Train, seed)?;
    let b = out.breakdown;
    Ok(Probe {
        values: LossBreakdown::TERMS.map(|t| b.get(t).expect("listed term")),
        structure: out.structure,
        kinks: tape.kink_signature(),
    })
}

/// Checks every term of [`LossBreakdown::TERMS`] on one batch. With
/// `corrupt_adjoint` the analytic gradients are computed with a
/// deliberately wrong matmul adjoint, which must make the check fail.
pub fn check_gradients(
    model: &Model,
    items: &[BatchItem<'_>],
    seed: u64,
    corrupt_adjoint: bool,
) -> Result<GradReport> {
    let tape = Tape::new();
    let out = model.forward_batch(&tape, items, Mode::Train, seed)?;
    let base_structure = out.structure;
    let base_kinks = tape.kink_signature();
    let analytic = |term: &str| {
        let var = out.losses.get(term).expect("listed term");
        if corrupt_adjoint {
            fault::with_corrupted_adjoint(|| tape.gradients(var))
        } else {
            tape.gradients(var)
        }
    };
    let grads = LossBreakdown::TERMS
        .iter()
        .map(|t| analytic(t))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let ids: Vec<_> = model.store.ids().collect();
    let mut probe_model = model.clone();
    let mut numeric: Vec<Vec<Vec<f64>>> =
        vec![Vec::with_capacity(ids.len()); LossBreakdown::TERMS.len()];
    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(ids.len());
    let (mut coordinates, mut skipped) = (0, 0);
    for &id in &ids {
        let n = model.store.get(id).len();
        let mut keep = Vec::new();
        let mut cols = vec![Vec::new(); LossBreakdown::TERMS.len()];
        for i in 0..n {
            coordinates += 1;
            let x = model.store.get(id).data()[i];
            probe_model.store.get_mut(id).data_mut()[i] = x + FD_STEP;
            let up = probe(&probe_model, items, seed)?;
            probe_model.store.get_mut(id).data_mut()[i] = x - FD_STEP;
            let down = probe(&probe_model, items, seed)?;
            probe_model.store.get_mut(id).data_mut()[i] = x;
            let same = |p: &Probe| p.structure == base_structure && p.kinks == base_kinks;
            if !same(&up) || !same(&down) {
                skipped += 1;
                continue;
            }
            keep.push(i);
            for (t, col) in cols.iter_mut().enumerate() {
                col.push((up.values[t] - down.values[t]) / (2.0 * FD_STEP));
            }
        }
        for (t, col) in cols.into_iter().enumerate() {
            numeric[t].push(col);
        }
        kept.push(keep);
    }

    let terms = LossBreakdown::TERMS
        .iter()
        .enumerate()
        .map(|(t, &term)| {
            let (mut a_all, mut n_all) = (Vec::new(), Vec::new());
            let mut worst_abs = -1.0;
            let mut worst_param = String::new();
            for (k, &id) in ids.iter().enumerate() {
                let full = grads[t].param(id);
                let a: Vec<f64> = kept[k]
                    .iter()
                    .map(|&i| full.map_or(0.0, |g| g[i]))
                    .collect();
                let abs: f64 = a
                    .iter()
                    .zip(&numeric[t][k])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if abs > worst_abs {
                    worst_abs = abs;
                    worst_param = model.store.name(id).to_string();
                }
                a_all.extend(a);
                n_all.extend_from_slice(&numeric[t][k]);
            }
            let worst = relative_error(&a_all, &n_all, FD_FLOOR);
            TermReport {
                term,
                worst,
                worst_param,
            }
        })
        .collect();
    Ok(GradReport {
        terms,
        coordinates,
        skipped,
        tolerance: FD_TOLERANCE,
    })
}
