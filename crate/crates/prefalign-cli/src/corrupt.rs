//! Misaligned reference construction: raise the reward-dispreferred response
//! of a seeded subset of pairs until δ_ref sits `depth` below -Δr*/β.

use prefalign::policy::TabularPolicy;
use prefalign::prefmodel::{PreferenceDataset, RewardTable};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionSummary {
    /// Non-tied pairs, the population the fraction applies to.
    pub candidates: usize,
    /// Dataset indices of the shifted pairs, in the order they were shifted.
    pub corrupted_pairs: Vec<usize>,
}

/// The shifted pairs are a prefix of one seeded permutation, so for a fixed
/// seed a larger fraction corrupts a superset of the pairs a smaller one does.
pub fn corrupt_reference(
    base: &TabularPolicy,
    dataset: &PreferenceDataset,
    reward: &RewardTable,
    beta: f64,
    fraction: f64,
    depth: f64,
    seed: u64,
) -> prefalign::Result<(TabularPolicy, CorruptionSummary)> {
    let pairs = dataset.pairs();
    let mut order: Vec<usize> =
        (0..pairs.len()).filter(|&i| reward.diff(pairs[i].prompt, pairs[i].yw, pairs[i].yl) != 0.0).collect();
    let candidates = order.len();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (fraction * candidates as f64).round() as usize;
    order.truncate(k);

    let mut logits = base.logits().to_vec();
    for &i in &order {
        let p = &pairs[i];
        let dr = reward.diff(p.prompt, p.yw, p.yl);
        let (win, lose) = if dr > 0.0 { (p.yw, p.yl) } else { (p.yl, p.yw) };
        logits[p.prompt][lose] = logits[p.prompt][win] + dr.abs() / beta + depth;
    }
    let reference = TabularPolicy::new(base.space().clone(), logits)?;
    Ok((reference, CorruptionSummary { candidates, corrupted_pairs: order }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use prefalign::diagnostics::violation_stats;
    use prefalign::policy::ResponseSpace;
    use prefalign::prefmodel::PreferencePair;

    fn instance(n: usize) -> (TabularPolicy, PreferenceDataset, RewardTable) {
        let space = ResponseSpace::uniform(n, 2).unwrap();
        let rewards = (0..n).map(|x| vec![1.0 + 0.1 * x as f64, 0.0]).collect();
        let reward = RewardTable::new(space.clone(), rewards).unwrap();
        // Alternate label orientation so the canonical flip is exercised.
        let pairs = (0..n)
            .map(|x| if x % 2 == 0 { PreferencePair::new(x, 0, 1) } else { PreferencePair::new(x, 1, 0) })
            .collect();
        let ds = PreferenceDataset::new(space.clone(), pairs).unwrap();
        (TabularPolicy::uniform(space), ds, reward)
    }

    #[test]
    fn zero_fraction_is_identity() {
        let (base, ds, reward) = instance(10);
        let (r, s) = corrupt_reference(&base, &ds, &reward, 1.0, 0.0, 0.5, 9).unwrap();
        assert_eq!(r, base);
        assert!(s.corrupted_pairs.is_empty());
    }

    #[test]
    fn corrupted_pairs_land_at_requested_depth() {
        let (base, ds, reward) = instance(10);
        let beta = 2.0;
        let (r, s) = corrupt_reference(&base, &ds, &reward, beta, 0.4, 0.5, 1).unwrap();
        assert_eq!(s.corrupted_pairs.len(), 4);
        for &i in &s.corrupted_pairs {
            let x = ds.pairs()[i].prompt;
            let dr = reward.diff(x, 0, 1);
            let d = r.delta(x, 0, 1).unwrap();
            assert!((d - (-dr / beta - 0.5)).abs() < 1e-12);
        }
        let rep = violation_stats(&ds, &r, &reward, beta).unwrap();
        assert_eq!(rep.frac_violated, 0.4);
    }

    #[test]
    fn fractions_are_nested() {
        let (base, ds, reward) = instance(20);
        let (_, lo) = corrupt_reference(&base, &ds, &reward, 1.0, 0.2, 0.5, 5).unwrap();
        let (_, hi) = corrupt_reference(&base, &ds, &reward, 1.0, 0.4, 0.5, 5).unwrap();
        assert_eq!(lo.corrupted_pairs[..], hi.corrupted_pairs[..lo.corrupted_pairs.len()]);
    }

    #[test]
    fn ties_are_never_chosen() {
        let space = ResponseSpace::uniform(2, 2).unwrap();
        let reward = RewardTable::new(space.clone(), vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let ds =
            PreferenceDataset::new(space.clone(), vec![PreferencePair::new(0, 0, 1), PreferencePair::new(1, 0, 1)])
                .unwrap();
        let base = TabularPolicy::uniform(space);
        let (_, s) = corrupt_reference(&base, &ds, &reward, 1.0, 1.0, 0.5, 0).unwrap();
        assert_eq!(s.candidates, 1);
        assert_eq!(s.corrupted_pairs, vec![1]);
    }
}
