//! Plain gradient descent on tabular logits with per-step trajectory metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::in_undesirable_space;
use crate::error::{Error, Result};
use crate::losses::{batch_loss_and_gradient, loss_and_gradient, pair_deltas, LossSpec};
use crate::policy::TabularPolicy;
use crate::prefmodel::PreferenceDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    Full,
    Minibatch { size: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    FromRef,
    FromLogits(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub spec: LossSpec,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "full_batch")]
    pub batch: Batch,
    #[serde(default = "from_ref")]
    pub init: Init,
    #[serde(default = "every_step")]
    pub record_every: usize,
    /// Loss at the optimum, if known; fills the `loss_gap` column.
    #[serde(default)]
    pub optimum_loss: Option<f64>,
}

fn full_batch() -> Batch {
    Batch::Full
}

fn from_ref() -> Init {
    Init::FromRef
}

fn every_step() -> usize {
    1
}

impl TrainConfig {
    pub fn new(spec: LossSpec, learning_rate: f64, steps: usize) -> Self {
        TrainConfig {
            spec,
            learning_rate,
            steps,
            batch: Batch::Full,
            init: Init::FromRef,
            record_every: 1,
            optimum_loss: None,
        }
    }

    pub fn validate(&self, n_pairs: usize) -> Result<()> {
        self.spec.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage("learning_rate must be positive"));
        }
        if self.steps == 0 || self.record_every == 0 {
            return Err(Error::usage("steps and record_every must be at least 1"));
        }
        if let Batch::Minibatch { size, .. } = self.batch {
            if size == 0 || size > n_pairs {
                return Err(Error::usage(format!("minibatch size must be in 1..={n_pairs}")));
            }
        }
        Ok(())
    }
}

/// One row of the trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_delta_theta: f64,
    #[serde(rename = "frac_in_U")]
    pub frac_in_u: f64,
    pub pref_acc: f64,
    pub grad_norm: f64,
    pub loss_gap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrajectory {
    pub records: Vec<TrainRecord>,
}

impl TrainTrajectory {
    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    /// CSV with columns `step,loss,mean_delta_theta,frac_in_U,pref_acc,grad_norm,loss_gap`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,mean_delta_theta,frac_in_U,pref_acc,grad_norm,loss_gap\n");
        for r in &self.records {
            let gap = r.loss_gap.map(|g| g.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.loss, r.mean_delta_theta, r.frac_in_u, r.pref_acc, r.grad_norm, gap
            ));
        }
        out
    }
}

/// Dataset-level metrics at `theta`; frac_in_U and accuracy are plain pair counts.
fn record(
    step: usize,
    loss: f64,
    grad: &[Vec<f64>],
    theta: &TabularPolicy,
    dataset: &PreferenceDataset,
    optimum_loss: Option<f64>,
) -> TrainRecord {
    let deltas = pair_deltas(theta, dataset);
    let stats = dataset.ref_stats().expect("checked by caller");
    let n = deltas.len() as f64;
    let in_u = deltas.iter().zip(stats).filter(|(d, s)| in_undesirable_space(**d, s.delta_ref)).count();
    TrainRecord {
        step,
        loss,
        mean_delta_theta: deltas.iter().sum::<f64>() / n,
        frac_in_u: in_u as f64 / n,
        pref_acc: deltas.iter().filter(|&&d| d > 0.0).count() as f64 / n,
        grad_norm: grad.iter().flatten().map(|g| g * g).sum::<f64>().sqrt(),
        loss_gap: optimum_loss.map(|o| loss - o),
    }
}

fn minibatch(n: usize, size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    (0..size).map(|_| rng.gen_range(0..n)).collect()
}

/// Runs `config.steps` gradient steps θ ← θ - η g, recording full-dataset
/// metrics at step 0, every `record_every` steps and at the final step.
pub fn train(
    config: &TrainConfig,
    dataset: &PreferenceDataset,
    reference: &TabularPolicy,
) -> Result<(TabularPolicy, TrainTrajectory)> {
    config.validate(dataset.len())?;
    dataset.check_reference(reference)?;
    let mut theta = match &config.init {
        Init::FromRef => reference.clone(),
        Init::FromLogits(l) => TabularPolicy::new(reference.space().clone(), l.clone())?,
    };
    let mut traj = TrainTrajectory::default();
    for step in 0..=config.steps {
        let (loss, grad) = loss_and_gradient(&config.spec, &theta, dataset)?;
        let finite = loss.is_finite() && grad.iter().flatten().all(|g| g.is_finite());
        if !finite {
            return Err(Error::TrainAborted {
                step,
                reason: "non-finite loss or gradient".into(),
                last_good: traj.records.last().cloned().map(Box::new),
            });
        }
        if step % config.record_every == 0 || step == config.steps {
            traj.records.push(record(step, loss, &grad, &theta, dataset, config.optimum_loss));
        }
        if step == config.steps {
            break;
        }
        let grad = match config.batch {
            Batch::Full => grad,
            Batch::Minibatch { size, seed } => {
                let idx = minibatch(dataset.len(), size, seed, step);
                batch_loss_and_gradient(&config.spec, &theta, dataset, &idx)?.1
            }
        };
        let logits: Vec<Vec<f64>> = theta
            .logits()
            .iter()
            .zip(&grad)
            .map(|(row, g)| row.iter().zip(g).map(|(l, g)| l - config.learning_rate * g).collect())
            .collect();
        theta = TabularPolicy::new(theta.space().clone(), logits).map_err(|_| Error::TrainAborted {
            step: step + 1,
            reason: "non-finite logits after update".into(),
            last_good: traj.records.last().cloned().map(Box::new),
        })?;
    }
    Ok((theta, traj))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub peak_frac_in_u: f64,
    pub peak_step: usize,
    pub final_frac_in_u: f64,
}

/// Peak and final frac-in-𝒰; the peak step is the first record attaining the peak.
pub fn trajectory_phase_summary(traj: &TrainTrajectory) -> Result<PhaseSummary> {
    let last = traj.records.last().ok_or_else(|| Error::usage("empty trajectory"))?;
    let mut peak = &traj.records[0];
    for r in &traj.records {
        if r.frac_in_u > peak.frac_in_u {
            peak = r;
        }
    }
    Ok(PhaseSummary { peak_frac_in_u: peak.frac_in_u, peak_step: peak.step, final_frac_in_u: last.frac_in_u })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{dataset_loss, LossKind};
    use crate::policy::ResponseSpace;
    use crate::prefmodel::{precompute_ref_stats, PreferencePair};

    fn violating(gamma: f64) -> (TabularPolicy, PreferenceDataset) {
        // 4 prompts, half with δ_ref = -8 (the reward gap is 0.5 and β = 1)
        let space = ResponseSpace::uniform(4, 2).unwrap();
        let logits = vec![vec![-4.0, 4.0], vec![1.0, 0.0], vec![-4.0, 4.0], vec![0.5, 0.0]];
        let reference = TabularPolicy::new(space.clone(), logits).unwrap();
        let ds = PreferenceDataset::new(space, (0..4).map(|x| PreferencePair::new(x, 0, 1)).collect()).unwrap();
        (reference.clone(), precompute_ref_stats(&ds, &reference, gamma, 1.0, 1.0).unwrap())
    }

    #[test]
    fn step_zero_from_reference() {
        let (reference, ds) = violating(0.0);
        let cfg = TrainConfig::new(LossSpec::dpo(1.0), 0.1, 3);
        let (_, traj) = train(&cfg, &ds, &reference).unwrap();
        assert_eq!(traj.records[0].frac_in_u, 0.0);
        assert_eq!(traj.records[0].step, 0);
        assert_eq!(traj.records.len(), 4);
        let d0 = (-8.0 * 2.0 + 1.0 + 0.5) / 4.0;
        assert!((traj.records[0].mean_delta_theta - d0).abs() < 1e-15);
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let (reference, ds) = violating(0.0);
        let mut cfg = TrainConfig::new(LossSpec::dpo(1.0), 0.5, 50);
        cfg.batch = Batch::Minibatch { size: 2, seed: 9 };
        let a = train(&cfg, &ds, &reference).unwrap();
        let b = train(&cfg, &ds, &reference).unwrap();
        assert_eq!(a.1.to_csv(), b.1.to_csv());
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn dpo_loss_decreases_on_well_posed_instance() {
        let space = ResponseSpace::uniform(3, 3).unwrap();
        let reference = TabularPolicy::new(space.clone(), vec![vec![0.5, 0.0, -0.5]; 3]).unwrap();
        let ds = PreferenceDataset::new(
            space,
            vec![PreferencePair::new(0, 0, 1), PreferencePair::new(1, 1, 2), PreferencePair::new(2, 0, 2)],
        )
        .unwrap();
        let ds = precompute_ref_stats(&ds, &reference, 0.0, 1.0, 1.0).unwrap();
        // each pair term is (β²/4)-smooth in δ and δ moves by twice the logit step
        let cfg = TrainConfig::new(LossSpec::dpo(1.0), 0.5, 200);
        let (_, traj) = train(&cfg, &ds, &reference).unwrap();
        for w in traj.records.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
        assert_eq!(traj.records[0].frac_in_u, 0.0);
    }

    #[test]
    fn cpo_escapes_where_dpo_stalls() {
        let (reference, ds0) = violating(0.0);
        let dpo = TrainConfig { record_every: 100, ..TrainConfig::new(LossSpec::dpo(1.0), 1.0, 2000) };
        let (_, tdpo) = train(&dpo, &ds0, &reference).unwrap();
        let sd = trajectory_phase_summary(&tdpo).unwrap();
        assert!(sd.final_frac_in_u >= 0.5);

        let reward = crate::prefmodel::RewardTable::new(reference.space().clone(), vec![vec![0.5, 0.0]; 4]).unwrap();
        let g = crate::diagnostics::gamma_star(&ds0, &reference, &reward, 1.0).unwrap();
        let (_, ds) = violating(1.01 * g);
        let spec = LossSpec::new(LossKind::Cpo, 1.0, 1.01 * g, 1.0).unwrap();
        let cpo = TrainConfig::new(spec, 1.0, 2000);
        let (_, tcpo) = train(&cpo, &ds, &reference).unwrap();
        let sc = trajectory_phase_summary(&tcpo).unwrap();
        assert_eq!(sc.final_frac_in_u, 0.0);
        assert_eq!(tcpo.last().unwrap().pref_acc, 1.0);
        assert!(sc.peak_frac_in_u > 0.0 && sd.peak_frac_in_u > 0.0);
    }

    #[test]
    fn margins_stay_fixed_during_training() {
        let (reference, ds) = violating(0.2);
        let before = ds.ref_stats().unwrap().to_vec();
        let spec = LossSpec::new(LossKind::Cpo, 1.0, 0.2, 1.0).unwrap();
        let (theta, _) = train(&TrainConfig::new(spec, 0.3, 20), &ds, &reference).unwrap();
        assert_eq!(ds.ref_stats().unwrap(), &before[..]);
        assert!(dataset_loss(&spec, &theta, &ds).unwrap() < dataset_loss(&spec, &reference, &ds).unwrap());
    }

    #[test]
    fn phase_summary_of_flat_trajectory() {
        let rec = |step| TrainRecord {
            step,
            loss: 1.0,
            mean_delta_theta: 0.0,
            frac_in_u: 0.0,
            pref_acc: 0.0,
            grad_norm: 0.0,
            loss_gap: None,
        };
        let s = trajectory_phase_summary(&TrainTrajectory { records: vec![rec(0), rec(1)] }).unwrap();
        assert_eq!(s.peak_frac_in_u, 0.0);
        assert_eq!(s.peak_step, 0);
        assert!(trajectory_phase_summary(&TrainTrajectory::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let (reference, ds) = violating(0.0);
        let mut cfg = TrainConfig::new(LossSpec::dpo(1.0), 0.1, 0);
        assert!(train(&cfg, &ds, &reference).is_err());
        cfg.steps = 1;
        cfg.batch = Batch::Minibatch { size: 5, seed: 0 };
        assert!(train(&cfg, &ds, &reference).is_err());
    }

    #[test]
    fn divergence_aborts_with_last_record() {
        let (reference, ds) = violating(0.0);
        let mut cfg = TrainConfig::new(LossSpec::dpo(1.0), 0.1, 5);
        cfg.init = Init::FromLogits(vec![vec![-1e308, 1e308], vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        match train(&cfg, &ds, &reference) {
            Err(Error::TrainAborted { step: 0, last_good, .. }) => assert!(last_good.is_none()),
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
