//! Exact optimal policies: vanilla RLHF, constrained RLHF and the smoothed
//! explicitly constrained RLHF margin.

use serde::{Deserialize, Serialize};

use crate::diagnostics::cpo_approx_constants;
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, softplus, softplus_excess};
use crate::policy::{LogRatio, TabularPolicy};
use crate::prefmodel::{phi_cons, phi_cons_excess, PreferenceDataset, RewardTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iters() -> usize {
    10_000
}

impl SolverConfig {
    pub fn new(beta: f64, gamma: f64, tau: f64) -> Result<Self> {
        let cfg = SolverConfig { beta, gamma, tau, tol: default_tol(), max_iters: default_max_iters() };
        cfg.validate()?;
        Ok(cfg)
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
        if !(self.tol > 0.0) {
            return Err(Error::usage("tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    #[serde(skip)]
    pub policy: TabularPolicy,
    pub iterations: usize,
    /// max |π_{t+1} - π_t| at the final iteration.
    pub residual: f64,
    /// Spread of β log(π/π_ref) - r - c/π across responses, halved, worst prompt.
    pub foc_residual: f64,
    /// Whether γ ≤ β q₀ / (2e) held for this instance.
    pub regularity_ok: bool,
}

fn check_shapes(reference: &TabularPolicy, reward: &RewardTable) -> Result<()> {
    if reference.space() != reward.space() {
        return Err(Error::usage("reference policy and reward table have different response spaces"));
    }
    Ok(())
}

/// π*(y|x) ∝ π_ref(y|x) exp(r(x,y)/β). Logits are returned normalized.
pub fn rlhf_closed_form(reference: &TabularPolicy, reward: &RewardTable, beta: f64) -> Result<TabularPolicy> {
    if !(beta > 0.0) {
        return Err(Error::usage("beta must be positive"));
    }
    check_shapes(reference, reward)?;
    let logits = reference
        .logits()
        .iter()
        .zip(reward.rewards())
        .map(|(l, r)| {
            let row: Vec<f64> = l.iter().zip(r).map(|(l, r)| l + r / beta).collect();
            let z = log_sum_exp(&row);
            row.iter().map(|v| v - z).collect()
        })
        .collect();
    TabularPolicy::new(reference.space().clone(), logits)
}

/// δ_ref + Δr/β.
pub fn rlhf_delta(delta_ref: LogRatio, reward_diff: f64, beta: f64) -> LogRatio {
    delta_ref + reward_diff / beta
}

/// c(x, y) = γ Σ_pairs p(pair|x) (1{y = y_w} - 1{y = y_l}) with p(pair|x)
/// proportional to the pair weights at x.
pub fn constraint_coefficients(dataset: &PreferenceDataset, gamma: f64) -> Vec<Vec<f64>> {
    let space = dataset.space();
    let mut totals = vec![0.0; space.num_prompts()];
    for p in dataset.pairs() {
        totals[p.prompt] += p.weight;
    }
    let mut c: Vec<Vec<f64>> = (0..space.num_prompts()).map(|x| vec![0.0; space.responses(x)]).collect();
    for p in dataset.pairs() {
        let share = gamma * p.weight / totals[p.prompt];
        c[p.prompt][p.yw] += share;
        c[p.prompt][p.yl] -= share;
    }
    c
}

/// Value of the constrained RLHF objective, summed over prompts:
/// Σ_y π r - β Σ_y π log(π/π_ref) + Σ_y c log π.
pub fn constrained_objective(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    reward: &RewardTable,
    dataset: &PreferenceDataset,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_shapes(reference, reward)?;
    check_shapes(policy, reward)?;
    let c = constraint_coefficients(dataset, cfg.gamma);
    let mut total = 0.0;
    for (x, cx) in c.iter().enumerate() {
        let lp = policy.log_probs(x);
        let lr = reference.log_probs(x);
        for y in 0..lp.len() {
            let p = lp[y].exp();
            total += p * reward.get(x, y) - cfg.beta * p * (lp[y] - lr[y]) + cx[y] * lp[y];
        }
    }
    Ok(total)
}

/// Worst per-prompt half-spread of β log(π/π_ref) - r - c/π. Zero exactly when
/// the first-order condition holds for some λ(x).
pub fn foc_residual(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    reward: &RewardTable,
    dataset: &PreferenceDataset,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_shapes(reference, reward)?;
    check_shapes(policy, reward)?;
    let c = constraint_coefficients(dataset, cfg.gamma);
    let mut worst: f64 = 0.0;
    for (x, cx) in c.iter().enumerate() {
        let lp = policy.log_probs(x);
        let lr = reference.log_probs(x);
        let v: Vec<f64> =
            (0..lp.len()).map(|y| cfg.beta * (lp[y] - lr[y]) - reward.get(x, y) - cx[y] / lp[y].exp()).collect();
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        worst = worst.max((hi - lo) / 2.0);
    }
    Ok(worst)
}

const FIXED_POINT_DAMPING: f64 = 0.5;

/// Damped iteration of T(π)(y) ∝ π_ref(y) exp((r(y) + c(y)/π(y))/β), started
/// from the vanilla RLHF solution.
pub fn constrained_rlhf_fixed_point(
    reference: &TabularPolicy,
    reward: &RewardTable,
    dataset: &PreferenceDataset,
    cfg: &SolverConfig,
) -> Result<FixedPointReport> {
    cfg.validate()?;
    check_shapes(reference, reward)?;
    if dataset.space() != reference.space() {
        return Err(Error::usage("dataset and reference policy have different response spaces"));
    }
    let regularity_ok = cpo_approx_constants(reference, dataset, reward, cfg)?.regularity_ok;
    let c = constraint_coefficients(dataset, cfg.gamma);
    let start = rlhf_closed_form(reference, reward, cfg.beta)?;
    let n = reference.space().num_prompts();
    let log_ref: Vec<Vec<f64>> = (0..n).map(|x| reference.log_probs(x)).collect();
    let mut pi: Vec<Vec<f64>> = (0..n).map(|x| start.probs(x)).collect();

    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        residual = 0.0;
        for x in 0..n {
            let t: Vec<f64> =
                (0..pi[x].len()).map(|y| log_ref[x][y] + (reward.get(x, y) + c[x][y] / pi[x][y]) / cfg.beta).collect();
            let z = log_sum_exp(&t);
            for y in 0..t.len() {
                let next = (1.0 - FIXED_POINT_DAMPING) * pi[x][y] + FIXED_POINT_DAMPING * (t[y] - z).exp();
                if !(next > 0.0 && next.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "fixed-point iterate left the open simplex at prompt {x}, response {y}, iteration {iterations}"
                    )));
                }
                residual = residual.max((next - pi[x][y]).abs());
                pi[x][y] = next;
            }
        }
        if residual <= cfg.tol {
            break;
        }
    }
    if residual > cfg.tol {
        return Err(Error::NoConvergence { iterations, residual });
    }
    let policy = TabularPolicy::from_probs(reference.space().clone(), &pi)?;
    let foc = foc_residual(&policy, reference, reward, dataset, cfg)?;
    Ok(FixedPointReport { policy, iterations, residual, foc_residual: foc, regularity_ok })
}

/// δ_ref + Δr/β + γ̃/β: the pairwise condition Δr = β(δ - δ_ref) - γ̃ solved for
/// δ with the margin evaluated at the reference policy.
pub fn cpo_delta(delta_ref: LogRatio, reward_diff: f64, gamma_ref: f64, beta: f64) -> LogRatio {
    delta_ref + (reward_diff + gamma_ref) / beta
}

/// Φ(δ_ref, Δr; γ, τ) = (1/τ) softplus(τ(γ - δ_ref - Δr/β)).
pub fn phi(delta_ref: LogRatio, reward_diff: f64, beta: f64, gamma: f64, tau: f64) -> f64 {
    softplus(tau * (gamma - delta_ref - reward_diff / beta)) / tau
}

/// δ* of the smoothed explicitly constrained RLHF problem: δ_ref + Δr/β + Φ.
pub fn ec_rlhf_delta(delta_ref: LogRatio, reward_diff: f64, cfg: &SolverConfig) -> LogRatio {
    let base = rlhf_delta(delta_ref, reward_diff, cfg.beta);
    base + phi(delta_ref, reward_diff, cfg.beta, cfg.gamma, cfg.tau)
}

/// `ec_rlhf_delta - γ`, evaluated as max(z, 0) - z + excess so it stays
/// positive when the two are too close to distinguish in floating point.
pub fn ec_rlhf_excess_over_gamma(delta_ref: LogRatio, reward_diff: f64, cfg: &SolverConfig) -> f64 {
    let z = cfg.gamma - rlhf_delta(delta_ref, reward_diff, cfg.beta);
    (-z).max(0.0) + softplus_excess(cfg.tau * z) / cfg.tau
}

/// δ* at the E-CPOC optimum: δ_ref + Δr/β + Φ_cons(δ_ref), the worst-case margin.
pub fn ecpoc_delta(delta_ref: LogRatio, reward_diff: f64, cfg: &SolverConfig) -> LogRatio {
    rlhf_delta(delta_ref, reward_diff, cfg.beta) + phi_cons(delta_ref, cfg.gamma, cfg.tau)
}

/// `ecpoc_delta - (γ + Δr/β)` = δ_ref - γ + Φ_cons(δ_ref), evaluated as
/// max(δ_ref - γ, 0) plus the softplus excess so its sign survives rounding.
pub fn ecpoc_excess_over_bound(delta_ref: LogRatio, cfg: &SolverConfig) -> f64 {
    (delta_ref - cfg.gamma).max(0.0) + phi_cons_excess(delta_ref, cfg.gamma, cfg.tau)
}

/// M* = β max{0, γ - δ_ref - Δr/β}.
pub fn effective_margin(delta_ref: LogRatio, reward_diff: f64, beta: f64, gamma: f64) -> f64 {
    beta * (gamma - delta_ref - reward_diff / beta).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ResponseSpace;
    use crate::prefmodel::PreferencePair;
    use proptest::prelude::*;

    fn row_policy(logits: Vec<Vec<f64>>) -> TabularPolicy {
        let space = ResponseSpace::new(logits.iter().map(|r| r.len()).collect()).unwrap();
        TabularPolicy::new(space, logits).unwrap()
    }

    fn row_reward(r: Vec<Vec<f64>>) -> RewardTable {
        let space = ResponseSpace::new(r.iter().map(|r| r.len()).collect()).unwrap();
        RewardTable::new(space, r).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let reference = row_policy(vec![vec![0.3, -0.2, 1.1]]);
        let zero = RewardTable::zeros(reference.space().clone());
        let out = rlhf_closed_form(&reference, &zero, 0.7).unwrap();
        for (a, b) in out.probs(0).iter().zip(reference.probs(0)) {
            assert!((a - b).abs() <= 1e-14);
        }

        let r = row_reward(vec![vec![1.0, -0.5, 0.25]]);
        let out = rlhf_closed_form(&reference, &r, 1e9).unwrap();
        for (a, b) in out.probs(0).iter().zip(reference.probs(0)) {
            assert!((a - b).abs() <= 1e-8);
        }

        let uniform = row_policy(vec![vec![0.0, 0.0]]);
        let out = rlhf_closed_form(&uniform, &row_reward(vec![vec![1.0, 0.0]]), 1.0).unwrap();
        let e = 1f64.exp();
        assert!((out.probs(0)[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((out.probs(0)[1] - 1.0 / (e + 1.0)).abs() < 1e-15);

        assert!(rlhf_closed_form(&uniform, &row_reward(vec![vec![1.0, 0.0]]), 0.0).is_err());
    }

    #[test]
    fn rlhf_delta_examples() {
        assert_eq!(rlhf_delta(-1.0, 0.5, 0.5), 0.0);
        assert_eq!(rlhf_delta(0.37, 0.0, 3.0), 0.37);
    }

    #[test]
    fn coefficients_aggregate_linearly() {
        let space = ResponseSpace::new(vec![3]).unwrap();
        let ds = PreferenceDataset::new(
            space,
            vec![PreferencePair::weighted(0, 0, 1, 1.0), PreferencePair::weighted(0, 1, 2, 3.0)],
        )
        .unwrap();
        let c = constraint_coefficients(&ds, 2.0);
        assert_eq!(c[0], vec![0.5, -0.5 + 1.5, -1.5]);
        assert!((c[0].iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_at_zero_gamma_is_closed_form() {
        let reference = row_policy(vec![vec![0.2, -0.7, 0.4], vec![1.0, 0.0]]);
        let reward = row_reward(vec![vec![0.5, 1.0, -0.3], vec![-0.2, 0.6]]);
        let ds = PreferenceDataset::new(
            reference.space().clone(),
            vec![PreferencePair::new(0, 1, 0), PreferencePair::new(1, 1, 0)],
        )
        .unwrap();
        let cfg = SolverConfig::new(0.8, 0.0, 1.0).unwrap();
        let rep = constrained_rlhf_fixed_point(&reference, &reward, &ds, &cfg).unwrap();
        let cf = rlhf_closed_form(&reference, &reward, 0.8).unwrap();
        for x in 0..2 {
            for (a, b) in rep.policy.probs(x).iter().zip(cf.probs(x)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
        assert!(rep.foc_residual < 1e-9);
    }

    #[test]
    fn fixed_point_satisfies_pairwise_foc() {
        let reference = row_policy(vec![vec![0.4, -0.1]]);
        let reward = row_reward(vec![vec![0.3, 0.0]]);
        let ds = PreferenceDataset::new(reference.space().clone(), vec![PreferencePair::new(0, 0, 1)]).unwrap();
        let cfg = SolverConfig::new(1.0, 0.03, 1.0).unwrap();
        let rep = constrained_rlhf_fixed_point(&reference, &reward, &ds, &cfg).unwrap();
        let p = rep.policy.probs(0);
        let d = rep.policy.delta(0, 0, 1).unwrap();
        let lhs = 0.3 - cfg.beta * (d - 0.5) + cfg.gamma * (1.0 / p[0] + 1.0 / p[1]);
        assert!(lhs.abs() <= 1e-7, "{lhs}");
        assert!(rep.residual <= cfg.tol);
        assert!(rep.regularity_ok);
    }

    #[test]
    fn fixed_point_reports_nonconvergence() {
        let reference = row_policy(vec![vec![0.4, -0.1]]);
        let reward = row_reward(vec![vec![0.3, 0.0]]);
        let ds = PreferenceDataset::new(reference.space().clone(), vec![PreferencePair::new(0, 0, 1)]).unwrap();
        let mut cfg = SolverConfig::new(1.0, 0.05, 1.0).unwrap();
        cfg.max_iters = 2;
        assert!(matches!(
            constrained_rlhf_fixed_point(&reference, &reward, &ds, &cfg),
            Err(Error::NoConvergence { iterations: 2, .. })
        ));
    }

    #[test]
    fn ec_rlhf_asymptotes() {
        let cfg = SolverConfig::new(0.5, 0.3, 1.0).unwrap();
        // δ_ref + Δr/β exceeds γ by 50
        let (dr, r) = (40.0, 0.5 * (cfg.gamma + 50.0 - 40.0));
        assert!((ec_rlhf_delta(dr, r, &cfg) - rlhf_delta(dr, r, cfg.beta)).abs() < 1e-9);
        // and falls short of γ by 50
        let (dr, r) = (-40.0, 0.5 * (cfg.gamma - 50.0 + 40.0));
        assert!((ec_rlhf_delta(dr, r, &cfg) - cfg.gamma).abs() < 1e-9);
    }

    #[test]
    fn effective_margin_examples() {
        assert_eq!(effective_margin(2.0, 0.5, 1.0, 1.0), 0.0);
        assert_eq!(effective_margin(-2.0, 0.0, 1.0, 1.0), 3.0);
    }

    #[test]
    fn smoothed_margin_tends_to_hard_margin() {
        for dr in [-3.0, -1.0, 0.0, 0.5, 2.0] {
            for r in [0.1, 0.5, 1.5] {
                for beta in [0.5, 1.0, 4.0] {
                    let m = effective_margin(dr, r, beta, 1.0);
                    let smooth = beta * phi(dr, r, beta, 1.0, 1e4);
                    assert!((smooth - m).abs() <= 1e-3, "{dr} {r} {beta}: {smooth} vs {m}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn closed_form_delta_matches_eq5(
            l in prop::collection::vec(-3.0f64..3.0, 3),
            r in prop::collection::vec(-2.0f64..2.0, 3),
            beta in 0.1f64..10.0,
        ) {
            let reference = row_policy(vec![l.clone()]);
            let reward = row_reward(vec![r.clone()]);
            let cf = rlhf_closed_form(&reference, &reward, beta).unwrap();
            for (w, lo) in [(0, 1), (1, 2), (2, 0)] {
                let want = rlhf_delta(l[w] - l[lo], r[w] - r[lo], beta);
                prop_assert!((cf.delta(0, w, lo).unwrap() - want).abs() <= 1e-10);
            }
        }

        #[test]
        fn phi_is_monotone(dr in -5.0f64..5.0, r in 0.0f64..3.0, h in 1e-3f64..0.5, tau in 0.5f64..5.0) {
            let (beta, gamma) = (0.7, 0.4);
            prop_assert!(phi(dr + h, r, beta, gamma, tau) <= phi(dr, r, beta, gamma, tau));
            prop_assert!(phi(dr, r + h, beta, gamma, tau) <= phi(dr, r, beta, gamma, tau));
        }

        #[test]
        fn inactive_constraint_tail_bound(dr in 0.0f64..5.0, r in 0.0f64..2.0, gamma in 0.0f64..0.5, tau in 1.0f64..8.0) {
            let cfg = SolverConfig::new(1.0, gamma, tau).unwrap();
            let gap = ec_rlhf_delta(dr, r, &cfg) - rlhf_delta(dr, r, 1.0);
            let bound = (tau * (gamma - dr - r)).exp() / tau;
            prop_assert!(gap >= 0.0 && gap <= bound + 1e-15);
        }

        #[test]
        fn ec_rlhf_exceeds_gamma(dr in -20.0f64..20.0, r in 1e-6f64..5.0, gamma in 0.01f64..2.0, tau in 0.2f64..5.0) {
            let cfg = SolverConfig::new(0.9, gamma, tau).unwrap();
            prop_assert!(ec_rlhf_excess_over_gamma(dr, r, &cfg) > 0.0);
            prop_assert!(ec_rlhf_delta(dr, r, &cfg) >= gamma - 1e-12 * (1.0 + dr.abs()));
        }

        #[test]
        fn ecpoc_exceeds_gamma_plus_reward(dr in -3.0f64..3.0, r in 1e-6f64..5.0, gamma in 0.01f64..2.0, tau in 0.2f64..3.0) {
            let cfg = SolverConfig::new(0.9, gamma, tau).unwrap();
            prop_assert!(ecpoc_delta(dr, r, &cfg) > gamma + r / cfg.beta);
        }

        #[test]
        fn ecpoc_excess_matches_difference(dr in -40.0f64..40.0, r in 0.0f64..5.0, gamma in 0.0f64..2.0, tau in 0.2f64..10.0) {
            let cfg = SolverConfig::new(1.3, gamma, tau).unwrap();
            let e = ecpoc_excess_over_bound(dr, &cfg);
            prop_assert!(e > 0.0);
            let direct = ecpoc_delta(dr, r, &cfg) - (gamma + r / cfg.beta);
            prop_assert!((e - direct).abs() <= 1e-12 * (1.0 + dr.abs() + r));
        }

        #[test]
        fn ecpoc_decomposition(dr in -10.0f64..10.0, r in 0.0f64..5.0) {
            let cfg = SolverConfig::new(0.5, 0.8, 2.0).unwrap();
            let lhs = ecpoc_delta(dr, r, &cfg);
            let rhs = ecpoc_delta(dr, 0.0, &cfg) + r / cfg.beta;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
