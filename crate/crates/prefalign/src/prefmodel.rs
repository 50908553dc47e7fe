//! Ground-truth rewards, Bradley-Terry preferences and preference datasets.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softplus, softplus_excess};
use crate::policy::{LogRatio, ResponseSpace, TabularPolicy};

/// True rewards r*(x, y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardRepr", into = "RewardRepr")]
pub struct RewardTable {
    space: ResponseSpace,
    rewards: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RewardRepr {
    responses_per_prompt: Vec<usize>,
    rewards: Vec<Vec<f64>>,
}

impl TryFrom<RewardRepr> for RewardTable {
    type Error = Error;
    fn try_from(r: RewardRepr) -> Result<Self> {
        RewardTable::new(ResponseSpace::new(r.responses_per_prompt)?, r.rewards)
    }
}

impl From<RewardTable> for RewardRepr {
    fn from(r: RewardTable) -> Self {
        RewardRepr { responses_per_prompt: r.space.responses_per_prompt().to_vec(), rewards: r.rewards }
    }
}

impl RewardTable {
    pub fn new(space: ResponseSpace, rewards: Vec<Vec<f64>>) -> Result<Self> {
        space.check_matrix(&rewards, "rewards")?;
        Ok(RewardTable { space, rewards })
    }

    pub fn zeros(space: ResponseSpace) -> Self {
        let rewards = space.zeros();
        RewardTable { space, rewards }
    }

    pub fn space(&self) -> &ResponseSpace {
        &self.space
    }

    pub fn rewards(&self) -> &[Vec<f64>] {
        &self.rewards
    }

    pub fn get(&self, prompt: usize, response: usize) -> f64 {
        self.rewards[prompt][response]
    }

    /// Δr* = r*(x, y_w) - r*(x, y_l).
    pub fn diff(&self, prompt: usize, yw: usize, yl: usize) -> f64 {
        self.rewards[prompt][yw] - self.rewards[prompt][yl]
    }

    /// R_max = max |r|.
    pub fn r_max(&self) -> f64 {
        self.rewards.iter().flatten().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("rewards serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: usize,
    pub yw: usize,
    pub yl: usize,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl PreferencePair {
    pub fn new(prompt: usize, yw: usize, yl: usize) -> Self {
        PreferencePair { prompt, yw, yl, weight: 1.0 }
    }

    pub fn weighted(prompt: usize, yw: usize, yl: usize, weight: f64) -> Self {
        PreferencePair { prompt, yw, yl, weight }
    }
}

/// Reference quantities cached per pair so training never re-reads π_ref.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefStats {
    pub delta_ref: LogRatio,
    pub pw: f64,
    pub pl: f64,
    /// γ̃_ref = γ (1/π_ref(y_w) + 1/π_ref(y_l)).
    pub gamma_ref: f64,
    /// Ψ_cons = β Φ_cons(δ_ref).
    pub psi_cons: f64,
}

/// Parameters and reference-policy hash the cached [`RefStats`] were built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefMeta {
    pub policy_hash: String,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    #[serde(default)]
    pub constant_margin: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    space: ResponseSpace,
    pairs: Vec<PreferencePair>,
    ref_stats: Option<Vec<RefStats>>,
    ref_meta: Option<RefMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Winner drawn from the Bradley-Terry coin.
    LabeledByBtSample,
    /// Winner is the higher-reward response; ties go to the lower index.
    LabeledByBtMode,
}

impl PreferenceDataset {
    pub fn new(space: ResponseSpace, pairs: Vec<PreferencePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::usage("dataset needs at least one pair"));
        }
        for (i, pr) in pairs.iter().enumerate() {
            space.check(pr.prompt, pr.yw)?;
            space.check(pr.prompt, pr.yl)?;
            if pr.yw == pr.yl {
                return Err(Error::usage(format!("pair {i} has yw == yl")));
            }
            if !(pr.weight > 0.0 && pr.weight.is_finite()) {
                return Err(Error::usage(format!("pair {i} has non-positive weight")));
            }
        }
        Ok(PreferenceDataset { space, pairs, ref_stats: None, ref_meta: None })
    }

    pub fn space(&self) -> &ResponseSpace {
        &self.space
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ref_stats(&self) -> Option<&[RefStats]> {
        self.ref_stats.as_deref()
    }

    pub fn ref_meta(&self) -> Option<&RefMeta> {
        self.ref_meta.as_ref()
    }

    pub fn require_ref_stats(&self) -> Result<&[RefStats]> {
        self.ref_stats.as_deref().ok_or_else(|| Error::usage("dataset has no precomputed reference statistics"))
    }

    /// Errors unless the cached statistics were computed from `reference`.
    pub fn check_reference(&self, reference: &TabularPolicy) -> Result<()> {
        let meta =
            self.ref_meta.as_ref().ok_or_else(|| Error::usage("dataset has no precomputed reference statistics"))?;
        if meta.policy_hash != reference.content_hash() {
            return Err(Error::usage("stale reference statistics: policy hash mismatch"));
        }
        Ok(())
    }

    /// Pair weights scaled to sum to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.pairs.iter().map(|p| p.weight).sum();
        self.pairs.iter().map(|p| p.weight / total).collect()
    }

    /// Replaces every γ̃_ref by the weighted dataset mean (the constant-margin CPO variant).
    pub fn with_constant_margin(&self) -> Result<Self> {
        let stats = self.require_ref_stats()?;
        let w = self.normalized_weights();
        let mean: f64 = stats.iter().zip(&w).map(|(s, w)| s.gamma_ref * w).sum();
        let mut out = self.clone();
        out.ref_stats = Some(stats.iter().map(|s| RefStats { gamma_ref: mean, ..*s }).collect());
        if let Some(m) = out.ref_meta.as_mut() {
            m.constant_margin = true;
        }
        Ok(out)
    }

    /// Copy without cached reference statistics.
    pub fn without_ref_stats(&self) -> Self {
        PreferenceDataset { ref_stats: None, ref_meta: None, ..self.clone() }
    }

    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            responses_per_prompt: &'a [usize],
            #[serde(skip_serializing_if = "Option::is_none")]
            ref_meta: Option<&'a RefMeta>,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            prompt: usize,
            yw: usize,
            yl: usize,
            weight: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            r#ref: Option<&'a RefStats>,
        }
        let mut out = serde_json::to_string(&Header {
            responses_per_prompt: self.space.responses_per_prompt(),
            ref_meta: self.ref_meta.as_ref(),
        })
        .expect("header serializes");
        out.push('\n');
        for (i, p) in self.pairs.iter().enumerate() {
            let line = Line {
                prompt: p.prompt,
                yw: p.yw,
                yl: p.yl,
                weight: p.weight,
                r#ref: self.ref_stats.as_ref().map(|s| &s[i]),
            };
            out.push_str(&serde_json::to_string(&line).expect("pair serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            responses_per_prompt: Vec<usize>,
            ref_meta: Option<RefMeta>,
        }
        #[derive(Deserialize)]
        struct Line {
            prompt: usize,
            yw: usize,
            yl: usize,
            #[serde(default = "unit_weight")]
            weight: f64,
            r#ref: Option<RefStats>,
        }
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::usage("dataset file is empty"))?)?;
        let space = ResponseSpace::new(header.responses_per_prompt)?;
        let mut pairs = Vec::new();
        let mut stats = Vec::new();
        for (i, l) in lines.enumerate() {
            let line: Line =
                serde_json::from_str(l).map_err(|e| Error::usage(format!("dataset line {}: {e}", i + 2)))?;
            pairs.push(PreferencePair::weighted(line.prompt, line.yw, line.yl, line.weight));
            stats.push(line.r#ref);
        }
        let mut ds = PreferenceDataset::new(space, pairs)?;
        let present = stats.iter().filter(|s| s.is_some()).count();
        if present == stats.len() && header.ref_meta.is_some() {
            ds.ref_stats = Some(stats.into_iter().flatten().collect());
            ds.ref_meta = header.ref_meta;
        } else if present != 0 || header.ref_meta.is_some() {
            return Err(Error::usage("reference block must be present on every line together with ref_meta"));
        }
        Ok(ds)
    }
}

/// σ(Δr*), the Bradley-Terry probability that y_w beats y_l.
pub fn bt_probability(reward_diff: f64) -> f64 {
    sigmoid(reward_diff)
}

fn unordered_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect()
}

/// Draws `pairs_per_prompt` distinct unordered pairs per prompt and labels each once.
pub fn sample_dataset(
    reward: &RewardTable,
    pairs_per_prompt: usize,
    rng_seed: u64,
    mode: LabelMode,
) -> Result<PreferenceDataset> {
    sample_dataset_repeated(reward, pairs_per_prompt, 1, rng_seed, mode)
}

/// Like [`sample_dataset`] but labels every drawn pair `repeats` times,
/// which is what [`empirical_stat_error`] needs.
pub fn sample_dataset_repeated(
    reward: &RewardTable,
    pairs_per_prompt: usize,
    repeats: usize,
    rng_seed: u64,
    mode: LabelMode,
) -> Result<PreferenceDataset> {
    if pairs_per_prompt == 0 || repeats == 0 {
        return Err(Error::usage("pairs_per_prompt and repeats must be positive"));
    }
    let space = reward.space().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pairs = Vec::new();
    for x in 0..space.num_prompts() {
        let all = unordered_pairs(space.responses(x));
        if pairs_per_prompt > all.len() {
            return Err(Error::usage(format!(
                "prompt {x} has only {} distinct pairs, {pairs_per_prompt} requested",
                all.len()
            )));
        }
        for idx in sample(&mut rng, all.len(), pairs_per_prompt).into_iter() {
            let (a, b) = all[idx];
            let d = reward.diff(x, a, b);
            for _ in 0..repeats {
                let a_wins = match mode {
                    LabelMode::LabeledByBtSample => rng.gen::<f64>() < bt_probability(d),
                    LabelMode::LabeledByBtMode => d >= 0.0,
                };
                pairs.push(if a_wins { PreferencePair::new(x, a, b) } else { PreferencePair::new(x, b, a) });
            }
        }
    }
    PreferenceDataset::new(space, pairs)
}

/// Infinite-sample limit: every unordered pair in both orders, weighted by its
/// Bradley-Terry probability. Orders whose probability underflows are dropped.
pub fn population_dataset(reward: &RewardTable) -> Result<PreferenceDataset> {
    let space = reward.space().clone();
    let mut pairs = Vec::new();
    for x in 0..space.num_prompts() {
        for (a, b) in unordered_pairs(space.responses(x)) {
            let p = bt_probability(reward.diff(x, a, b));
            if p > 0.0 {
                pairs.push(PreferencePair::weighted(x, a, b, p));
            }
            if 1.0 - p > 0.0 {
                pairs.push(PreferencePair::weighted(x, b, a, 1.0 - p));
            }
        }
    }
    PreferenceDataset::new(space, pairs)
}

/// Φ_cons(δ_ref) = (1/τ) log(1 + exp(τ(γ - δ_ref))).
pub fn phi_cons(delta_ref: LogRatio, gamma: f64, tau: f64) -> f64 {
    softplus(tau * (gamma - delta_ref)) / tau
}

/// Φ_cons(δ_ref) - max(0, γ - δ_ref), computed without cancellation.
pub fn phi_cons_excess(delta_ref: LogRatio, gamma: f64, tau: f64) -> f64 {
    softplus_excess(tau * (gamma - delta_ref)) / tau
}

/// Fills the per-pair reference statistics used by the CPO and E-CPOC losses.
pub fn precompute_ref_stats(
    dataset: &PreferenceDataset,
    reference: &TabularPolicy,
    gamma: f64,
    tau: f64,
    beta: f64,
) -> Result<PreferenceDataset> {
    if reference.space() != dataset.space() {
        return Err(Error::usage("reference policy and dataset have different response spaces"));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) || !(tau > 0.0) || !(beta > 0.0) {
        return Err(Error::usage("need gamma >= 0, tau > 0, beta > 0"));
    }
    let probs: Vec<Vec<f64>> = (0..dataset.space().num_prompts()).map(|x| reference.probs(x)).collect();
    let stats = dataset
        .pairs()
        .iter()
        .map(|p| {
            let delta_ref = reference.logits()[p.prompt][p.yw] - reference.logits()[p.prompt][p.yl];
            let pw = probs[p.prompt][p.yw];
            let pl = probs[p.prompt][p.yl];
            RefStats {
                delta_ref,
                pw,
                pl,
                gamma_ref: gamma * (1.0 / pw + 1.0 / pl),
                psi_cons: beta * phi_cons(delta_ref, gamma, tau),
            }
        })
        .collect();
    let mut out = dataset.clone();
    out.ref_stats = Some(stats);
    out.ref_meta = Some(RefMeta { policy_hash: reference.content_hash(), beta, gamma, tau, constant_margin: false });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatErrorEstimate {
    /// sup over unordered pairs of |empirical win frequency - σ(Δr*)|.
    pub value: f64,
    /// Set when some unordered pair was observed only once.
    pub low_confidence: bool,
    pub unordered_pairs: usize,
    pub min_observations: usize,
}

/// ε̂_stat from repeated labelled observations.
pub fn empirical_stat_error(dataset: &PreferenceDataset, reward: &RewardTable) -> Result<StatErrorEstimate> {
    if reward.space() != dataset.space() {
        return Err(Error::usage("reward table and dataset have different response spaces"));
    }
    // (prompt, a, b) with a < b -> (weight where a won, total weight, count)
    let mut groups: BTreeMap<(usize, usize, usize), (f64, f64, usize)> = BTreeMap::new();
    for p in dataset.pairs() {
        let (a, b) = if p.yw < p.yl { (p.yw, p.yl) } else { (p.yl, p.yw) };
        let g = groups.entry((p.prompt, a, b)).or_insert((0.0, 0.0, 0));
        if p.yw == a {
            g.0 += p.weight;
        }
        g.1 += p.weight;
        g.2 += 1;
    }
    let mut value: f64 = 0.0;
    let mut min_obs = usize::MAX;
    for (&(x, a, b), &(won, total, n)) in &groups {
        value = value.max((won / total - bt_probability(reward.diff(x, a, b))).abs());
        min_obs = min_obs.min(n);
    }
    Ok(StatErrorEstimate {
        value,
        low_confidence: min_obs < 2,
        unordered_pairs: groups.len(),
        min_observations: min_obs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two(r: [f64; 2]) -> RewardTable {
        RewardTable::new(ResponseSpace::new(vec![2]).unwrap(), vec![r.to_vec()]).unwrap()
    }

    #[test]
    fn bt_examples() {
        assert_eq!(bt_probability(0.0), 0.5);
        assert!((bt_probability(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((bt_probability(-(3f64.ln())) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mode_labels_follow_reward_sign() {
        let ds = sample_dataset(&two([1.0, 0.0]), 1, 3, LabelMode::LabeledByBtMode).unwrap();
        assert_eq!(ds.pairs(), &[PreferencePair::new(0, 0, 1)]);
    }

    #[test]
    fn sampling_is_deterministic() {
        let space = ResponseSpace::uniform(5, 4).unwrap();
        let r =
            RewardTable::new(space, (0..5).map(|i| (0..4).map(|j| (i * j) as f64 * 0.1).collect()).collect()).unwrap();
        let a = sample_dataset(&r, 3, 11, LabelMode::LabeledByBtSample).unwrap();
        let b = sample_dataset(&r, 3, 11, LabelMode::LabeledByBtSample).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn too_many_pairs_is_usage_error() {
        assert!(matches!(sample_dataset(&two([0.0, 0.0]), 2, 0, LabelMode::LabeledByBtMode), Err(Error::Usage(_))));
    }

    #[test]
    fn balanced_coin_monte_carlo() {
        let space = ResponseSpace::uniform(10_000, 2).unwrap();
        let r = RewardTable::zeros(space);
        let ds = sample_dataset(&r, 1, 5, LabelMode::LabeledByBtSample).unwrap();
        let frac = ds.pairs().iter().filter(|p| p.yw == 0).count() as f64 / ds.len() as f64;
        assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn ref_stats_examples() {
        let ds =
            PreferenceDataset::new(ResponseSpace::new(vec![3]).unwrap(), vec![PreferencePair::new(0, 0, 2)]).unwrap();
        let reference = TabularPolicy::new(ResponseSpace::new(vec![3]).unwrap(), vec![vec![0.3, -1.0, 0.8]]).unwrap();
        let s = precompute_ref_stats(&ds, &reference, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(s.ref_stats().unwrap()[0].gamma_ref, 0.0);

        for tau in [0.5, 1.0, 7.0] {
            let gamma = 0.4;
            assert!((phi_cons(gamma, gamma, tau) - 2f64.ln() / tau).abs() < 1e-15);
        }
        let gamma = 0.3;
        let d = gamma - 1000.0;
        assert!((phi_cons(d, gamma, 1.0) - (gamma - d)).abs() < 1e-9);
    }

    #[test]
    fn precompute_is_idempotent_and_hash_checked() {
        let space = ResponseSpace::uniform(3, 3).unwrap();
        let reward = RewardTable::new(space.clone(), vec![vec![0.0, 1.0, -1.0]; 3]).unwrap();
        let ds = sample_dataset(&reward, 2, 1, LabelMode::LabeledByBtMode).unwrap();
        let reference = TabularPolicy::new(space.clone(), vec![vec![0.1, -0.4, 0.9]; 3]).unwrap();
        let a = precompute_ref_stats(&ds, &reference, 0.2, 3.0, 0.5).unwrap();
        let b = precompute_ref_stats(&a, &reference, 0.2, 3.0, 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a.check_reference(&reference).is_ok());
        assert!(a.check_reference(&TabularPolicy::uniform(space)).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let space = ResponseSpace::uniform(2, 3).unwrap();
        let reward = RewardTable::new(space.clone(), vec![vec![0.0, 1.0, -1.0], vec![0.5, 0.2, 0.1]]).unwrap();
        let ds = population_dataset(&reward).unwrap();
        let reference = TabularPolicy::new(space, vec![vec![0.1, -0.4, 0.9]; 2]).unwrap();
        let ds = precompute_ref_stats(&ds, &reference, 0.2, 3.0, 0.5).unwrap();
        let back = PreferenceDataset::from_jsonl(&ds.to_jsonl()).unwrap();
        assert_eq!(ds, back);
        let bare = ds.without_ref_stats();
        assert_eq!(PreferenceDataset::from_jsonl(&bare.to_jsonl()).unwrap(), bare);
    }

    #[test]
    fn constant_margin_uses_mean() {
        let space = ResponseSpace::uniform(1, 3).unwrap();
        let ds =
            PreferenceDataset::new(space.clone(), vec![PreferencePair::new(0, 0, 1), PreferencePair::new(0, 2, 1)])
                .unwrap();
        let reference = TabularPolicy::new(space, vec![vec![0.0, 1.0, -1.0]]).unwrap();
        let ds = precompute_ref_stats(&ds, &reference, 0.1, 1.0, 1.0).unwrap();
        let s = ds.ref_stats().unwrap();
        let mean = (s[0].gamma_ref + s[1].gamma_ref) / 2.0;
        let c = ds.with_constant_margin().unwrap();
        assert!(c.ref_stats().unwrap().iter().all(|r| (r.gamma_ref - mean).abs() < 1e-15));
        assert!(c.ref_meta().unwrap().constant_margin);
    }

    #[test]
    fn stat_error_examples() {
        // σ(Δr) = 1 - 1e-9 and every label equals the mode
        let d = ((1.0 - 1e-9) / 1e-9f64).ln();
        let r = two([d, 0.0]);
        let ds = sample_dataset_repeated(&r, 1, 5, 0, LabelMode::LabeledByBtMode).unwrap();
        let e = empirical_stat_error(&ds, &r).unwrap();
        assert!((e.value - 1e-9).abs() < 1e-12);
        assert!(!e.low_confidence);

        let r = two([0.0, 0.0]);
        let ds = sample_dataset(&r, 1, 0, LabelMode::LabeledByBtSample).unwrap();
        let e = empirical_stat_error(&ds, &r).unwrap();
        assert_eq!(e.value, 0.5);
        assert!(e.low_confidence);
    }

    #[test]
    fn stat_error_decays_with_sample_size() {
        let r = two([0.4, 0.0]);
        let mean_err = |n: usize| {
            (0..20)
                .map(|s| {
                    let ds = sample_dataset_repeated(&r, 1, n, s, LabelMode::LabeledByBtSample).unwrap();
                    empirical_stat_error(&ds, &r).unwrap().value
                })
                .sum::<f64>()
                / 20.0
        };
        let e = [mean_err(100), mean_err(1_000), mean_err(10_000)];
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
        // log-log slope over two decades should be near -1/2
        let slope = (e[2].ln() - e[0].ln()) / (10_000f64.ln() - 100f64.ln());
        assert!((slope + 0.5).abs() < 0.2, "{slope}");
    }

    proptest! {
        #[test]
        fn bt_symmetry(z in -50.0f64..50.0) {
            prop_assert!((bt_probability(z) + bt_probability(-z) - 1.0).abs() <= 1e-15);
        }

        #[test]
        fn phi_cons_strictly_dominates_hinge(d in -30.0f64..30.0, gamma in 0.0f64..5.0, tau in 0.1f64..1.0) {
            prop_assert!(phi_cons_excess(d, gamma, tau) > 0.0);
            prop_assert!(phi_cons(d, gamma, tau) >= (gamma - d).max(0.0));
        }
    }
}
