//! Brute-force verifiers. Everything here is rebuilt from the defining
//! equations on top of policy and dataset types only, so it can check the
//! solvers and losses without sharing code with them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policy::{ResponseSpace, TabularPolicy};
use crate::prefmodel::{PreferenceDataset, RewardTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Rlhf,
    ConstrainedRlhf,
    DpoLoss,
    CpoLoss,
    EcpocLoss,
}

impl Objective {
    fn maximize(self) -> bool {
        matches!(self, Objective::Rlhf | Objective::ConstrainedRlhf)
    }
}

#[derive(Debug, Clone)]
pub struct Instance<'a> {
    pub reference: &'a TabularPolicy,
    pub reward: &'a RewardTable,
    pub dataset: &'a PreferenceDataset,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearchResult {
    pub best_probs: Vec<Vec<f64>>,
    pub best_logits: Vec<Vec<f64>>,
    pub best_objective: f64,
    pub grid_resolution: usize,
    pub refinement_iters: usize,
}

impl GridSearchResult {
    pub fn policy(&self, space: &ResponseSpace) -> Result<TabularPolicy> {
        TabularPolicy::new(space.clone(), self.best_logits.clone())
    }
}

/// Halvings of the local stencil after the coarse scan. Twelve takes a
/// 200-point grid to a cell of about 1.2e-6 in probability.
pub const REFINEMENT_ITERS: usize = 12;
const MAX_STENCIL_MOVES: usize = 1000;
const MAX_PROMPTS: usize = 2;
const MAX_RESPONSES: usize = 3;

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Per-prompt objective at probability vector `p`, written out from the
/// defining equations.
fn prompt_objective(obj: Objective, inst: &Instance, x: usize, p: &[f64], weight_total: f64) -> f64 {
    let ref_logits = &inst.reference.logits()[x];
    let ref_lse = {
        let m = ref_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + ref_logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    };
    let log_ref: Vec<f64> = ref_logits.iter().map(|l| l - ref_lse).collect();
    let pairs = inst.dataset.pairs().iter().filter(|pr| pr.prompt == x);
    match obj {
        Objective::Rlhf | Objective::ConstrainedRlhf => {
            let mut v = 0.0;
            for (y, &py) in p.iter().enumerate() {
                v += py * inst.reward.get(x, y) - inst.beta * py * (py.ln() - log_ref[y]);
            }
            if obj == Objective::ConstrainedRlhf {
                let total: f64 = pairs.clone().map(|pr| pr.weight).sum();
                for pr in pairs {
                    v += inst.gamma * pr.weight / total * (p[pr.yw].ln() - p[pr.yl].ln());
                }
            }
            v
        }
        Objective::DpoLoss | Objective::CpoLoss | Objective::EcpocLoss => {
            let mut v = 0.0;
            for pr in pairs {
                let delta = p[pr.yw].ln() - p[pr.yl].ln();
                let delta_ref = log_ref[pr.yw] - log_ref[pr.yl];
                let margin = match obj {
                    Objective::DpoLoss => 0.0,
                    Objective::CpoLoss => inst.gamma * ((-log_ref[pr.yw]).exp() + (-log_ref[pr.yl]).exp()),
                    _ => inst.beta * softplus(inst.tau * (inst.gamma - delta_ref)) / inst.tau,
                };
                let z = inst.beta * (delta - delta_ref) - margin;
                v += pr.weight / weight_total * softplus(-z);
            }
            v
        }
    }
}

fn simplex_point(coords: &[f64]) -> Option<Vec<f64>> {
    let last = 1.0 - coords.iter().sum::<f64>();
    if coords.iter().any(|&c| c <= 0.0) || last <= 0.0 {
        return None;
    }
    let mut p = coords.to_vec();
    p.push(last);
    Some(p)
}

/// Exhaustive scan of each prompt's probability simplex at `resolution` points
/// per dimension, then [`REFINEMENT_ITERS`] halvings of a 5-point-per-axis
/// stencil that follows the incumbent until it settles. Ties keep the earliest point in scan order.
pub fn grid_optimum(obj: Objective, inst: &Instance, resolution: usize) -> Result<GridSearchResult> {
    let space = inst.reference.space();
    if space.num_prompts() > MAX_PROMPTS || space.responses_per_prompt().iter().any(|&k| k > MAX_RESPONSES) {
        return Err(Error::usage(format!(
            "grid search budget exceeded: at most {MAX_PROMPTS} prompts with {MAX_RESPONSES} responses"
        )));
    }
    if inst.reward.space() != space || inst.dataset.space() != space {
        return Err(Error::usage("instance components have different response spaces"));
    }
    if resolution < 3 {
        return Err(Error::usage("resolution must be at least 3"));
    }
    let sign = if obj.maximize() { -1.0 } else { 1.0 };
    let weight_total: f64 = inst.dataset.pairs().iter().map(|p| p.weight).sum();
    let n = resolution as f64;

    let mut best_probs = Vec::new();
    let mut best_objective = 0.0;
    for x in 0..space.num_prompts() {
        let k = space.responses(x);
        let f = |p: &[f64]| sign * prompt_objective(obj, inst, x, p, weight_total);
        let mut best: Option<(f64, Vec<f64>)> = None;
        let consider = |coords: &[f64], best: &mut Option<(f64, Vec<f64>)>| {
            if let Some(p) = simplex_point(coords) {
                let v = f(&p);
                if best.as_ref().map_or(true, |(b, _)| v < *b) {
                    *best = Some((v, coords.to_vec()));
                }
            }
        };
        if k == 2 {
            for i in 1..resolution {
                consider(&[i as f64 / n], &mut best);
            }
        } else {
            for i in 1..resolution {
                for j in 1..resolution - i {
                    consider(&[i as f64 / n, j as f64 / n], &mut best);
                }
            }
        }
        let mut h = 1.0 / n;
        for _ in 0..REFINEMENT_ITERS {
            h /= 2.0;
            // Re-centre the stencil until the incumbent stops moving, so long
            // narrow valleys are followed rather than cut off at one cell.
            for _ in 0..MAX_STENCIL_MOVES {
                let center = best.as_ref().expect("grid has interior points").1.clone();
                for a in -2i32..=2 {
                    if k == 2 {
                        consider(&[center[0] + a as f64 * h], &mut best);
                    } else {
                        for b in -2i32..=2 {
                            consider(&[center[0] + a as f64 * h, center[1] + b as f64 * h], &mut best);
                        }
                    }
                }
                if best.as_ref().expect("grid has interior points").1 == center {
                    break;
                }
            }
        }
        let (v, coords) = best.expect("grid has interior points");
        best_objective += sign * v;
        best_probs.push(simplex_point(&coords).expect("incumbent is interior"));
    }
    let best_logits = best_probs.iter().map(|row| row.iter().map(|p| p.ln()).collect()).collect();
    Ok(GridSearchResult {
        best_probs,
        best_logits,
        best_objective,
        grid_resolution: resolution,
        refinement_iters: REFINEMENT_ITERS,
    })
}

/// The objective of [`grid_optimum`] evaluated at an arbitrary policy.
pub fn objective_value(obj: Objective, inst: &Instance, policy: &TabularPolicy) -> Result<f64> {
    if policy.space() != inst.reference.space() {
        return Err(Error::usage("policy has a different response space"));
    }
    let weight_total: f64 = inst.dataset.pairs().iter().map(|p| p.weight).sum();
    Ok((0..policy.space().num_prompts()).map(|x| prompt_objective(obj, inst, x, &policy.probs(x), weight_total)).sum())
}

/// Central differences, one logit at a time.
pub fn finite_diff_gradient<F>(loss_eval: F, theta: &TabularPolicy, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&TabularPolicy) -> Result<f64>,
{
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::usage("h must lie in [1e-8, 1e-4]"));
    }
    let mut grad = Vec::with_capacity(theta.logits().len());
    for (x, row) in theta.logits().iter().enumerate() {
        let mut g = Vec::with_capacity(row.len());
        for j in 0..row.len() {
            let mut plus = theta.logits().to_vec();
            let mut minus = theta.logits().to_vec();
            plus[x][j] += h;
            minus[x][j] -= h;
            let fp = loss_eval(&TabularPolicy::new(theta.space().clone(), plus)?)?;
            let fm = loss_eval(&TabularPolicy::new(theta.space().clone(), minus)?)?;
            g.push((fp - fm) / (2.0 * h));
        }
        grad.push(g);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefmodel::PreferencePair;

    fn one_prompt(
        reference: Vec<f64>,
        reward: Vec<f64>,
        pairs: Vec<PreferencePair>,
    ) -> (TabularPolicy, RewardTable, PreferenceDataset) {
        let space = ResponseSpace::new(vec![reference.len()]).unwrap();
        (
            TabularPolicy::new(space.clone(), vec![reference]).unwrap(),
            RewardTable::new(space.clone(), vec![reward]).unwrap(),
            PreferenceDataset::new(space, pairs).unwrap(),
        )
    }

    #[test]
    fn rlhf_grid_matches_closed_form_by_hand() {
        let (reference, reward, ds) =
            one_prompt(vec![0.2, -0.3, 0.5], vec![1.0, 0.2, -0.4], vec![PreferencePair::new(0, 0, 1)]);
        let inst = Instance { reference: &reference, reward: &reward, dataset: &ds, beta: 0.8, gamma: 0.0, tau: 1.0 };
        let g = grid_optimum(Objective::Rlhf, &inst, 200).unwrap();
        let w: Vec<f64> = (0..3).map(|y| (reference.logits()[0][y] + reward.get(0, y) / 0.8).exp()).collect();
        let s: f64 = w.iter().sum();
        let d_grid = g.best_logits[0][0] - g.best_logits[0][1];
        let d_true = (w[0] / s).ln() - (w[1] / s).ln();
        assert!((d_grid - d_true).abs() < 1e-4, "{d_grid} vs {d_true}");
        let at_best = objective_value(Objective::Rlhf, &inst, &g.policy(reference.space()).unwrap()).unwrap();
        assert!((at_best - g.best_objective).abs() < 1e-12);
    }

    #[test]
    fn one_sided_dpo_runs_to_the_boundary() {
        let (reference, reward, ds) = one_prompt(vec![0.0, 0.0], vec![1.0, 0.0], vec![PreferencePair::new(0, 0, 1)]);
        let inst = Instance { reference: &reference, reward: &reward, dataset: &ds, beta: 1.0, gamma: 0.0, tau: 1.0 };
        let g = grid_optimum(Objective::DpoLoss, &inst, 200).unwrap();
        assert!(g.best_probs[0][0] > 1.0 - 1.0 / 200.0);
    }

    #[test]
    fn budget_guard() {
        let space = ResponseSpace::new(vec![4]).unwrap();
        let reference = TabularPolicy::uniform(space.clone());
        let reward = RewardTable::zeros(space.clone());
        let ds = PreferenceDataset::new(space, vec![PreferencePair::new(0, 0, 1)]).unwrap();
        let inst = Instance { reference: &reference, reward: &reward, dataset: &ds, beta: 1.0, gamma: 0.0, tau: 1.0 };
        assert!(matches!(grid_optimum(Objective::Rlhf, &inst, 50), Err(Error::Usage(_))));
    }

    #[test]
    fn finite_differences_of_quadratic() {
        let space = ResponseSpace::new(vec![3]).unwrap();
        let theta = TabularPolicy::new(space, vec![vec![0.5, -1.0, 2.0]]).unwrap();
        let f = |t: &TabularPolicy| Ok(t.logits()[0].iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum());
        let g = finite_diff_gradient(f, &theta, 1e-5).unwrap();
        for (i, (gi, v)) in g[0].iter().zip(&theta.logits()[0]).enumerate() {
            assert!((gi - 2.0 * (i as f64 + 1.0) * v).abs() < 1e-8);
        }
        assert!(finite_diff_gradient(f, &theta, 1e-2).is_err());
    }

    #[test]
    fn finite_differences_vanish_at_symmetric_point() {
        // both orders of the pair with equal weight: the loss is even in δ
        let (reference, reward, ds) = one_prompt(
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![PreferencePair::new(0, 0, 1), PreferencePair::new(0, 1, 0)],
        );
        let inst = Instance { reference: &reference, reward: &reward, dataset: &ds, beta: 1.0, gamma: 0.0, tau: 1.0 };
        let g = finite_diff_gradient(|t| objective_value(Objective::DpoLoss, &inst, t), &reference, 1e-6).unwrap();
        assert!(g[0].iter().all(|v| v.abs() <= 1e-8));
    }
}
