//! DPO, CPO and E-CPOC losses in δ-space, chained to logit-space gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{logistic_curvature, sigmoid, softplus};
use crate::policy::{LogRatio, TabularPolicy};
use crate::prefmodel::{phi_cons, PreferenceDataset, RefStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossKind {
    Dpo,
    Cpo,
    Ecpoc,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::Cpo => "cpo",
            LossKind::Ecpoc => "ecpoc",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(LossKind::Dpo),
            "cpo" => Ok(LossKind::Cpo),
            "ecpoc" | "e-cpoc" => Ok(LossKind::Ecpoc),
            other => Err(Error::usage(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(kind: LossKind, beta: f64, gamma: f64, tau: f64) -> Result<Self> {
        let s = LossSpec { kind, beta, gamma, tau };
        s.validate()?;
        Ok(s)
    }

    pub fn dpo(beta: f64) -> Self {
        LossSpec { kind: LossKind::Dpo, beta, gamma: 0.0, tau: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::usage("beta must be positive and finite"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::usage("gamma must be non-negative and finite"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::usage("tau must be positive"));
        }
        Ok(())
    }

    /// Errors when cached statistics were built with parameters this loss reads.
    pub fn check_dataset(&self, dataset: &PreferenceDataset) -> Result<()> {
        let meta = dataset.ref_meta().ok_or_else(|| Error::usage("dataset has no precomputed reference statistics"))?;
        let stale = match self.kind {
            LossKind::Dpo => false,
            LossKind::Cpo => meta.gamma != self.gamma,
            LossKind::Ecpoc => meta.gamma != self.gamma || meta.tau != self.tau || meta.beta != self.beta,
        };
        if stale {
            return Err(Error::usage(format!(
                "reference statistics were computed with (beta={}, gamma={}, tau={}) but the {} loss needs (beta={}, gamma={}, tau={})",
                meta.beta,
                meta.gamma,
                meta.tau,
                self.kind.name(),
                self.beta,
                self.gamma,
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairLossTerms {
    pub logit_arg: f64,
    pub loss: f64,
    pub weight: f64,
}

/// The sigmoid argument z of the pair's log-likelihood term.
pub fn pair_logit_arg(spec: &LossSpec, delta_theta: LogRatio, rs: &RefStats) -> f64 {
    let base = spec.beta * (delta_theta - rs.delta_ref);
    match spec.kind {
        LossKind::Dpo => base,
        LossKind::Cpo => base - rs.gamma_ref,
        LossKind::Ecpoc => base - rs.psi_cons,
    }
}

pub fn pair_terms(spec: &LossSpec, delta_theta: LogRatio, rs: &RefStats) -> PairLossTerms {
    let z = pair_logit_arg(spec, delta_theta, rs);
    PairLossTerms { logit_arg: z, loss: softplus(-z), weight: sigmoid(-z) }
}

/// Second derivative of the pair loss with respect to δ_θ: β² σ(z)(1-σ(z)).
pub fn pair_curvature(spec: &LossSpec, delta_theta: LogRatio, rs: &RefStats) -> f64 {
    spec.beta * spec.beta * logistic_curvature(pair_logit_arg(spec, delta_theta, rs))
}

fn prepare<'a>(spec: &LossSpec, theta: &TabularPolicy, dataset: &'a PreferenceDataset) -> Result<&'a [RefStats]> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::usage("empty dataset"));
    }
    if theta.space() != dataset.space() {
        return Err(Error::usage("policy and dataset have different response spaces"));
    }
    spec.check_dataset(dataset)?;
    dataset.require_ref_stats()
}

/// Per-pair δ_θ in dataset order.
pub fn pair_deltas(theta: &TabularPolicy, dataset: &PreferenceDataset) -> Vec<LogRatio> {
    dataset.pairs().iter().map(|p| theta.logits()[p.prompt][p.yw] - theta.logits()[p.prompt][p.yl]).collect()
}

/// Weighted mean of softplus(-z) over pairs, weights normalized to sum one.
pub fn dataset_loss(spec: &LossSpec, theta: &TabularPolicy, dataset: &PreferenceDataset) -> Result<f64> {
    let stats = prepare(spec, theta, dataset)?;
    let w = dataset.normalized_weights();
    Ok(pair_deltas(theta, dataset)
        .iter()
        .zip(stats)
        .zip(&w)
        .map(|((&d, rs), w)| w * pair_terms(spec, d, rs).loss)
        .sum())
}

/// Logit-space gradient. ∇ log π(y|x) with respect to logit j is 1{j=y} - π(j|x),
/// so each pair contributes -β w (e_{y_w} - e_{y_l}) to its prompt's row.
pub fn loss_gradient(spec: &LossSpec, theta: &TabularPolicy, dataset: &PreferenceDataset) -> Result<Vec<Vec<f64>>> {
    Ok(loss_and_gradient(spec, theta, dataset)?.1)
}

pub fn loss_and_gradient(
    spec: &LossSpec,
    theta: &TabularPolicy,
    dataset: &PreferenceDataset,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let stats = prepare(spec, theta, dataset)?;
    let w = dataset.normalized_weights();
    let mut grad = theta.space().zeros();
    let mut loss = 0.0;
    for ((p, rs), &wi) in dataset.pairs().iter().zip(stats).zip(&w) {
        let d = theta.logits()[p.prompt][p.yw] - theta.logits()[p.prompt][p.yl];
        let t = pair_terms(spec, d, rs);
        loss += wi * t.loss;
        let g = -spec.beta * wi * t.weight;
        grad[p.prompt][p.yw] += g;
        grad[p.prompt][p.yl] -= g;
    }
    Ok((loss, grad))
}

/// Same as [`loss_and_gradient`] restricted to the pairs in `batch` (indices may repeat).
pub fn batch_loss_and_gradient(
    spec: &LossSpec,
    theta: &TabularPolicy,
    dataset: &PreferenceDataset,
    batch: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let stats = prepare(spec, theta, dataset)?;
    let total: f64 = batch.iter().map(|&i| dataset.pairs()[i].weight).sum();
    let mut grad = theta.space().zeros();
    let mut loss = 0.0;
    for &i in batch {
        let p = &dataset.pairs()[i];
        let wi = p.weight / total;
        let d = theta.logits()[p.prompt][p.yw] - theta.logits()[p.prompt][p.yl];
        let t = pair_terms(spec, d, &stats[i]);
        loss += wi * t.loss;
        let g = -spec.beta * wi * t.weight;
        grad[p.prompt][p.yw] += g;
        grad[p.prompt][p.yl] -= g;
    }
    Ok((loss, grad))
}

/// β→∞ margin-ranking limit of (1/β)·loss. The CPO target uses the pair's own
/// margin γ̃/β, which equals 2γ/β under the constant-margin convention γ̃ = 2γ.
pub fn hinge_limit(kind: LossKind, delta_theta: LogRatio, rs: &RefStats, gamma: f64, beta: f64, tau: f64) -> f64 {
    let target = match kind {
        LossKind::Dpo => rs.delta_ref,
        LossKind::Cpo => rs.delta_ref + rs.gamma_ref / beta,
        LossKind::Ecpoc => rs.delta_ref + phi_cons(rs.delta_ref, gamma, tau),
    };
    (target - delta_theta).max(0.0)
}
