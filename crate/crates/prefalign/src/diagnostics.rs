//! Checkable quantities: assumption violation, the undesirable space 𝒰,
//! γ thresholds, logistic curvature κ₀ and the Loss-to-Delta bridge.

use std::collections::VecDeque;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{pair_logit_arg, LossSpec};
use crate::numeric::logistic_curvature;
use crate::policy::{LogRatio, TabularPolicy};
use crate::prefmodel::{PreferenceDataset, RewardTable};
use crate::solvers::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    Holds,
    Violated,
}

/// Holds iff δ_ref > -Δr*/β; equality counts as violated.
pub fn check_assumption(delta_ref: LogRatio, reward_diff: f64, beta: f64) -> Result<Assumption> {
    if !(reward_diff > 0.0) {
        return Err(Error::usage("reward_diff must be positive: the pair ordering contradicts the reward"));
    }
    if !(beta > 0.0) {
        return Err(Error::usage("beta must be positive"));
    }
    Ok(if delta_ref > -reward_diff / beta { Assumption::Holds } else { Assumption::Violated })
}

/// 𝒰 = {δ < 0 and δ > δ_ref}.
pub fn in_undesirable_space(delta_pi: LogRatio, delta_ref: LogRatio) -> bool {
    delta_pi < 0.0 && delta_pi > delta_ref
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairFlags {
    pub delta_ref_negative: bool,
    pub assumption_violated: bool,
    /// Δr* = 0, so the pair has no preferred orientation and is not classified.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationReport {
    pub pairs: Vec<PairFlags>,
    pub n_pairs: usize,
    pub n_ties: usize,
    pub frac_delta_ref_negative: f64,
    /// Fraction of non-tied pairs violating δ_ref > -Δr*/β.
    pub frac_violated: f64,
    pub delta_ref_mean: f64,
    pub delta_ref_std: f64,
    pub reward_ratio_mean: f64,
}

/// Per-pair assumption check against the true rewards. Each pair is read in
/// its Bradley-Terry-preferred orientation, so a sampled label that disagrees
/// with the reward sign is flipped before checking.
pub fn violation_stats(
    dataset: &PreferenceDataset,
    reference: &TabularPolicy,
    reward: &RewardTable,
    beta: f64,
) -> Result<ViolationReport> {
    if reference.space() != dataset.space() || reward.space() != dataset.space() {
        return Err(Error::usage("dataset, reference and reward have different response spaces"));
    }
    let n = dataset.len();
    let mut flags = Vec::with_capacity(n);
    let mut deltas = Vec::with_capacity(n);
    let mut ratios = Vec::with_capacity(n);
    for p in dataset.pairs() {
        let d = reference.delta(p.prompt, p.yw, p.yl)?;
        let r = reward.diff(p.prompt, p.yw, p.yl);
        deltas.push(d);
        ratios.push(r / beta);
        let (d_pref, r_pref) = if r < 0.0 { (-d, -r) } else { (d, r) };
        let tie = r == 0.0;
        let violated = !tie && check_assumption(d_pref, r_pref, beta)? == Assumption::Violated;
        flags.push(PairFlags { delta_ref_negative: d < 0.0, assumption_violated: violated, tie });
    }
    let n_ties = flags.iter().filter(|f| f.tie).count();
    let classified = n - n_ties;
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(ViolationReport {
        n_pairs: n,
        n_ties,
        frac_delta_ref_negative: flags.iter().filter(|f| f.delta_ref_negative).count() as f64 / n as f64,
        frac_violated: if classified == 0 {
            0.0
        } else {
            flags.iter().filter(|f| f.assumption_violated).count() as f64 / classified as f64
        },
        delta_ref_mean: mean,
        delta_ref_std: var.sqrt(),
        reward_ratio_mean: ratios.iter().sum::<f64>() / n as f64,
        pairs: flags,
    })
}

/// γ* = max over pairs of β max{0, -δ_ref - Δr*/β} / (1/π_ref(y_w) + 1/π_ref(y_l)).
pub fn gamma_star(
    dataset: &PreferenceDataset,
    reference: &TabularPolicy,
    reward: &RewardTable,
    beta: f64,
) -> Result<f64> {
    dataset.check_reference(reference)?;
    if reward.space() != dataset.space() {
        return Err(Error::usage("reward and dataset have different response spaces"));
    }
    let stats = dataset.require_ref_stats()?;
    Ok(dataset.pairs().iter().zip(stats).fold(0.0, |acc: f64, (p, s)| {
        let deficit = (-s.delta_ref - reward.diff(p.prompt, p.yw, p.yl) / beta).max(0.0);
        acc.max(beta * deficit / (1.0 / s.pw + 1.0 / s.pl))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaStarCons {
    /// max over pairs of -δ_ref, possibly negative.
    pub raw: f64,
    /// `raw` floored at zero.
    pub value: f64,
}

pub fn gamma_star_cons(dataset: &PreferenceDataset) -> Result<GammaStarCons> {
    let stats = dataset.require_ref_stats()?;
    let raw = stats.iter().map(|s| -s.delta_ref).fold(f64::NEG_INFINITY, f64::max);
    Ok(GammaStarCons { raw, value: raw.max(0.0) })
}

/// κ₀ = min over pairs of σ(g)(1 - σ(g)) with g the loss margin at δ*.
pub fn kappa0(dataset: &PreferenceDataset, delta_star: &[LogRatio], spec: &LossSpec) -> Result<f64> {
    let stats = dataset.require_ref_stats()?;
    if delta_star.len() != stats.len() {
        return Err(Error::usage("delta_star must have one entry per pair"));
    }
    let mut k = f64::INFINITY;
    for (i, (&d, s)) in delta_star.iter().zip(stats).enumerate() {
        let g = pair_logit_arg(spec, d, s);
        if !g.is_finite() {
            return Err(Error::Degenerate(format!("margin of pair {i} is not finite")));
        }
        k = k.min(logistic_curvature(g));
    }
    if !(k > 0.0) {
        return Err(Error::Degenerate("logistic curvature underflows to zero".into()));
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BridgeCertificate {
    pub eps_loss: f64,
    pub kappa0: f64,
    pub beta: f64,
    pub eps_opt2: f64,
    pub eps_opt: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub eps_approx: f64,
    pub eps_stat: f64,
    pub l_sigma_inv: f64,
    pub combined_bound: f64,
}

impl BridgeCertificate {
    /// Whether ε_loss ≤ β² κ₀ r₀² / (2N) for a caller-chosen curvature radius r₀.
    pub fn self_consistent(&self, r0: f64) -> bool {
        self.eps_loss <= self.beta * self.beta * self.kappa0 * r0 * r0 / (2.0 * self.n as f64)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bridge_certificate(
    eps_loss: f64,
    kappa0: f64,
    beta: f64,
    n: usize,
    eps_approx: f64,
    eps_stat: f64,
    l_sigma_inv: f64,
) -> Result<BridgeCertificate> {
    if !(kappa0 > 0.0) {
        return Err(Error::Degenerate("kappa0 must be positive".into()));
    }
    if !(beta > 0.0) || n == 0 || !(l_sigma_inv > 0.0) {
        return Err(Error::usage("need beta > 0, N >= 1 and L_sigma_inv > 0"));
    }
    if !(eps_loss >= 0.0 && eps_approx >= 0.0 && eps_stat >= 0.0) {
        return Err(Error::usage("error terms must be non-negative"));
    }
    let eps_opt2 = (2.0 * eps_loss / (beta * beta * kappa0)).sqrt();
    let eps_opt = (n as f64).sqrt() * eps_opt2;
    Ok(BridgeCertificate {
        eps_loss,
        kappa0,
        beta,
        eps_opt2,
        eps_opt,
        n,
        eps_approx,
        eps_stat,
        l_sigma_inv,
        combined_bound: eps_approx + eps_opt + l_sigma_inv * eps_stat,
    })
}

/// L_σ⁻¹ = 1 / (β min σ(Δr*)(1 - σ(Δr*))) over dataset pairs.
pub fn inverse_sensitivity(dataset: &PreferenceDataset, reward: &RewardTable, beta: f64) -> Result<f64> {
    let k = dataset
        .pairs()
        .iter()
        .map(|p| logistic_curvature(reward.diff(p.prompt, p.yw, p.yl)))
        .fold(f64::INFINITY, f64::min);
    if !(k > 0.0) {
        return Err(Error::Degenerate("reward gap saturates the sigmoid".into()));
    }
    Ok(1.0 / (beta * k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CpoApproxConstants {
    pub p_min: f64,
    pub r_max: f64,
    pub q0: f64,
    pub r_tilde_max: f64,
    pub regularity_ok: bool,
}

/// q₀ = p_min e^{-2R_max/β}, R̃_max = R_max + γ/q₀, regular iff γ ≤ β q₀/(2e).
pub fn cpo_approx_constants(
    reference: &TabularPolicy,
    dataset: &PreferenceDataset,
    reward: &RewardTable,
    cfg: &SolverConfig,
) -> Result<CpoApproxConstants> {
    if reference.space() != dataset.space() || reward.space() != dataset.space() {
        return Err(Error::usage("dataset, reference and reward have different response spaces"));
    }
    let mut p_min = f64::INFINITY;
    for p in dataset.pairs() {
        let probs = reference.probs(p.prompt);
        p_min = p_min.min(probs[p.yw]).min(probs[p.yl]);
    }
    let r_max = reward.r_max();
    let q0 = p_min * (-2.0 * r_max / cfg.beta).exp();
    Ok(CpoApproxConstants {
        p_min,
        r_max,
        q0,
        r_tilde_max: r_max + cfg.gamma / q0,
        regularity_ok: cfg.gamma <= cfg.beta * q0 / (2.0 * std::f64::consts::E),
    })
}

/// Tilts `policy` at one prompt by exp(ε [1{y = y_w} - 1{y = y_l}]), raising
/// δ(y_w, y_l) by 2ε and leaving every other response ratio unchanged.
pub fn step2_perturbation(
    policy: &TabularPolicy,
    prompt: usize,
    yw: usize,
    yl: usize,
    eps: f64,
) -> Result<TabularPolicy> {
    policy.space().check(prompt, yw)?;
    policy.space().check(prompt, yl)?;
    let mut logits = policy.logits().to_vec();
    logits[prompt][yw] += eps;
    logits[prompt][yl] -= eps;
    TabularPolicy::new(policy.space().clone(), logits)
}

/// Diameter of each prompt's comparison graph over the responses that appear in
/// some pair; `None` when that graph is disconnected or the prompt has no pairs.
pub fn comparison_graph_diameters(dataset: &PreferenceDataset) -> Vec<Option<usize>> {
    let space = dataset.space();
    (0..space.num_prompts())
        .map(|x| {
            let k = space.responses(x);
            let mut adj = vec![Vec::new(); k];
            for p in dataset.pairs().iter().filter(|p| p.prompt == x) {
                adj[p.yw].push(p.yl);
                adj[p.yl].push(p.yw);
            }
            let nodes: Vec<usize> = (0..k).filter(|&v| !adj[v].is_empty()).collect();
            if nodes.is_empty() {
                return None;
            }
            let mut diameter = 0;
            for &s in &nodes {
                let mut dist = vec![usize::MAX; k];
                dist[s] = 0;
                let mut queue = VecDeque::from([s]);
                while let Some(u) = queue.pop_front() {
                    for &v in &adj[u] {
                        if dist[v] == usize::MAX {
                            dist[v] = dist[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                for &v in &nodes {
                    if dist[v] == usize::MAX {
                        return None;
                    }
                    diameter = diameter.max(dist[v]);
                }
            }
            Some(diameter)
        })
        .collect()
}
