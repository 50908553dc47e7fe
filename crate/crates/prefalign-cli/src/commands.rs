use prefalign::diagnostics::{
    bridge_certificate, comparison_graph_diameters, cpo_approx_constants, gamma_star, gamma_star_cons,
    inverse_sensitivity, kappa0, violation_stats,
};
use prefalign::losses::{hinge_limit, pair_deltas, pair_terms, LossKind, LossSpec};
use prefalign::oracles::{grid_optimum, Instance, Objective};
use prefalign::policy::{ResponseSpace, TabularPolicy};
use prefalign::prefmodel::{
    empirical_stat_error, population_dataset, precompute_ref_stats, sample_dataset_repeated, PreferenceDataset,
    RewardTable,
};
use prefalign::solvers::{constrained_rlhf_fixed_point, SolverConfig};
use prefalign::trainer::{train, trajectory_phase_summary, Init, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::artifacts::{load_inputs, read_policy, OutDir, BASE_REFERENCE, DATASET, REFERENCE, REWARD};
use crate::config::{generation_hash, BaseReference, DatasetSpec, Loaded, RewardSpec, SolveSection};
use crate::corrupt::corrupt_reference;
use crate::error::CliError;

const GRID_RESOLUTION: usize = 200;
const FOC_CERTIFICATE_TOL: f64 = 1e-6;

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("report serializes");
    b.push(b'\n');
    b
}

fn read_text(loaded: &Loaded, path: &std::path::Path, field: &str) -> Result<String, CliError> {
    let full = loaded.resolve(path);
    std::fs::read_to_string(&full)
        .map_err(|e| CliError::validation(format!("config field `{field}`: {}: {e}", full.display())))
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Seeds {
    reward: u64,
    reference: u64,
    dataset: u64,
    corruption: u64,
}

fn seeds(loaded: &Loaded) -> Seeds {
    let c = &loaded.config;
    let s = c.seed;
    Seeds {
        reward: match c.reward {
            RewardSpec::Random { seed: Some(k), .. } => k,
            _ => s,
        },
        reference: match c.reference.base {
            BaseReference::Random { seed: Some(k), .. } => k,
            _ => s.wrapping_add(1),
        },
        dataset: match c.dataset {
            DatasetSpec::Sampled { seed: Some(k), .. } => k,
            _ => s.wrapping_add(2),
        },
        corruption: c.reference.corruption.as_ref().and_then(|k| k.seed).unwrap_or(s.wrapping_add(3)),
    }
}

pub fn generate(loaded: &Loaded, out: &mut OutDir) -> Result<Value, CliError> {
    let c = &loaded.config;
    let seeds = seeds(loaded);

    let reward = match &c.reward {
        RewardSpec::File { path } => RewardTable::from_json(&read_text(loaded, path, "reward.file.path")?)
            .map_err(|e| CliError::from(e).context("reward.file.path"))?,
        RewardSpec::Random { low, high, .. } => {
            let sp = c.space.as_ref().expect("validated");
            let space =
                ResponseSpace::uniform(sp.prompts, sp.responses).map_err(|e| CliError::from(e).context("space"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seeds.reward);
            let rows =
                (0..sp.prompts).map(|_| (0..sp.responses).map(|_| rng.gen_range(*low..*high)).collect()).collect();
            RewardTable::new(space, rows)?
        }
    };
    let space = reward.space().clone();
    if let Some(sp) = &c.space {
        if space != ResponseSpace::uniform(sp.prompts, sp.responses).map_err(|e| CliError::from(e).context("space"))? {
            return Err(CliError::validation("config field `space` disagrees with the reward file"));
        }
    }

    let dataset = match &c.dataset {
        DatasetSpec::Sampled { pairs_per_prompt, repeats, label_mode, .. } => {
            sample_dataset_repeated(&reward, *pairs_per_prompt, *repeats, seeds.dataset, *label_mode)
                .map_err(|e| CliError::from(e).context("dataset.sampled"))?
        }
        DatasetSpec::Population => population_dataset(&reward)?,
        DatasetSpec::File { path } => {
            let ds = PreferenceDataset::from_jsonl(&read_text(loaded, path, "dataset.file.path")?)
                .map_err(|e| CliError::from(e).context("dataset.file.path"))?;
            if ds.space() != &space {
                return Err(CliError::validation(
                    "config field `dataset.file.path`: response space differs from the reward",
                ));
            }
            ds.without_ref_stats()
        }
    };

    let (base, base_bytes) = match &c.reference.base {
        BaseReference::File { path } => {
            let text = read_text(loaded, path, "reference.base.file.path")?;
            let p =
                TabularPolicy::from_json(&text).map_err(|e| CliError::from(e).context("reference.base.file.path"))?;
            if p.space() != &space {
                return Err(CliError::validation(
                    "config field `reference.base.file.path`: response space differs from the reward",
                ));
            }
            (p, text.into_bytes())
        }
        other => {
            let logits: Vec<Vec<f64>> = match other {
                BaseReference::Uniform => (0..space.num_prompts()).map(|x| vec![0.0; space.responses(x)]).collect(),
                BaseReference::Random { scale, .. } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seeds.reference);
                    (0..space.num_prompts())
                        .map(|x| (0..space.responses(x)).map(|_| scale * rng.gen_range(-1.0..=1.0)).collect())
                        .collect()
                }
                BaseReference::Aligned { scale } => {
                    reward.rewards().iter().map(|row| row.iter().map(|r| scale * r).collect()).collect()
                }
                BaseReference::File { .. } => unreachable!(),
            };
            let p =
                TabularPolicy::new(space.clone(), logits).map_err(|e| CliError::from(e).context("reference.base"))?;
            let bytes = p.to_json().into_bytes();
            (p, bytes)
        }
    };

    let (reference, reference_bytes, corruption) = match &c.reference.corruption {
        Some(k) if k.fraction > 0.0 => {
            let (r, summary) =
                corrupt_reference(&base, &dataset, &reward, c.beta, k.fraction, k.depth, seeds.corruption)?;
            let bytes = r.to_json().into_bytes();
            (r, bytes, Some(summary))
        }
        _ => (base.clone(), base_bytes.clone(), None),
    };

    let dataset = precompute_ref_stats(&dataset, &reference, c.gamma, c.tau, c.beta)?;
    let violation = violation_stats(&dataset, &reference, &reward, c.beta)?;

    out.write(REWARD, reward.to_json().as_bytes())?;
    out.write(BASE_REFERENCE, &base_bytes)?;
    out.write(REFERENCE, &reference_bytes)?;
    out.write(DATASET, dataset.to_jsonl().as_bytes())?;

    Ok(json!({
        "generation_hash": generation_hash(c),
        "seeds": seeds,
        "n_pairs": dataset.len(),
        "corruption": corruption.map(|s| json!({
            "fraction": c.reference.corruption.as_ref().map(|k| k.fraction),
            "depth": c.reference.corruption.as_ref().map(|k| k.depth),
            "candidates": s.candidates,
            "corrupted_pairs": s.corrupted_pairs,
        })),
        "constructed_violation_fraction": violation.frac_violated,
    }))
}

fn loss_dataset(
    dataset: &PreferenceDataset,
    reference: &TabularPolicy,
    gamma: f64,
    tau: f64,
    beta: f64,
) -> Result<PreferenceDataset, CliError> {
    Ok(precompute_ref_stats(&dataset.without_ref_stats(), reference, gamma, tau, beta)?)
}

pub fn solve(loaded: &Loaded, out: &mut OutDir) -> Result<Value, CliError> {
    let c = &loaded.config;
    let inputs = load_inputs(out, &generation_hash(c))?;
    let s = c.solve.clone().unwrap_or_default();
    let SolveSection { tol, max_iters } = s;
    let cfg = SolverConfig { tol, max_iters, ..SolverConfig::new(c.beta, c.gamma, c.tau)? };
    let rep = constrained_rlhf_fixed_point(&inputs.reference, &inputs.reward, &inputs.dataset, &cfg)?;
    out.write("solved_policy.json", rep.policy.to_json().as_bytes())?;
    out.write(
        "solve_report.json",
        &pretty(&json!({
            "iterations": rep.iterations,
            "residual": rep.residual,
            "foc_residual": rep.foc_residual,
        })),
    )?;
    Ok(json!({
        "gamma": c.gamma,
        "regularity_ok": rep.regularity_ok,
        "foc_certified": rep.foc_residual <= FOC_CERTIFICATE_TOL,
    }))
}

pub fn train_cmd(loaded: &Loaded, out: &mut OutDir) -> Result<Value, CliError> {
    let c = &loaded.config;
    let t = c.train.as_ref().ok_or_else(|| CliError::validation("config has no `train` section"))?;
    let inputs = load_inputs(out, &generation_hash(c))?;
    let gamma_for = |kind: LossKind| -> Result<f64, CliError> {
        Ok(match (kind, t.gamma_star_multiple) {
            (LossKind::Dpo, _) => 0.0,
            (_, None) => c.gamma,
            (LossKind::Cpo, Some(m)) => m * gamma_star(&inputs.dataset, &inputs.reference, &inputs.reward, c.beta)?,
            (LossKind::Ecpoc, Some(m)) => m * gamma_star_cons(&inputs.dataset)?.value,
        })
    };
    let runs: Vec<Result<_, CliError>> = t
        .losses
        .par_iter()
        .map(|&kind| {
            let gamma = gamma_for(kind)?;
            let ds = loss_dataset(&inputs.dataset, &inputs.reference, gamma, c.tau, c.beta)?;
            let spec = LossSpec::new(kind, c.beta, gamma, c.tau).map_err(|e| CliError::from(e).context("train"))?;
            let cfg = TrainConfig {
                batch: t.batch.clone(),
                init: Init::FromRef,
                record_every: t.record_every,
                ..TrainConfig::new(spec, t.learning_rate, t.steps)
            };
            let (policy, traj) =
                train(&cfg, &ds, &inputs.reference).map_err(|e| CliError::from(e).context(kind.name()))?;
            let phases = trajectory_phase_summary(&traj)?;
            Ok((kind, gamma, policy, traj, phases))
        })
        .collect();
    let mut details = serde_json::Map::new();
    for run in runs {
        let (kind, gamma, policy, traj, phases) = run?;
        out.write(&format!("policy_{}.json", kind.name()), policy.to_json().as_bytes())?;
        out.write(&format!("trajectory_{}.csv", kind.name()), traj.to_csv().as_bytes())?;
        details.insert(kind.name().to_string(), json!({ "gamma": gamma, "final": traj.last(), "phases": phases }));
    }
    Ok(Value::Object(details))
}

fn numeric_or_null<T: Serialize>(r: prefalign::Result<T>) -> Result<Value, CliError> {
    match r {
        Ok(v) => Ok(json!({ "value": v })),
        Err(e) if e.is_numeric() => Ok(json!({ "value": null, "error": e.to_string() })),
        Err(e) => Err(e.into()),
    }
}

fn objective(kind: LossKind) -> Objective {
    match kind {
        LossKind::Dpo => Objective::DpoLoss,
        LossKind::Cpo => Objective::CpoLoss,
        LossKind::Ecpoc => Objective::EcpocLoss,
    }
}

/// δ* per pair from grid search of the loss over the policy class.
fn grid_delta_star(
    kind: LossKind,
    reference: &TabularPolicy,
    reward: &RewardTable,
    dataset: &PreferenceDataset,
    beta: f64,
    gamma: f64,
    tau: f64,
) -> prefalign::Result<Vec<f64>> {
    let inst = Instance { reference, reward, dataset, beta, gamma, tau };
    let g = grid_optimum(objective(kind), &inst, GRID_RESOLUTION)?;
    Ok(pair_deltas(&g.policy(dataset.space())?, dataset))
}

pub fn diagnose(loaded: &Loaded, out: &mut OutDir) -> Result<Value, CliError> {
    let c = &loaded.config;
    let inputs = load_inputs(out, &generation_hash(c))?;
    let (reference, reward, ds) = (&inputs.reference, &inputs.reward, &inputs.dataset);
    let violation = violation_stats(ds, reference, reward, c.beta)?;
    let cfg = SolverConfig::new(c.beta, c.gamma, c.tau)?;

    let dpo_ds = loss_dataset(ds, reference, 0.0, c.tau, c.beta)?;
    let trained = out.path("policy_dpo.json");
    let (provenance, delta_star) = if trained.is_file() {
        let p = read_policy(out, &trained, "policy_dpo.json")?;
        ("converged_training", Ok(pair_deltas(&p, &dpo_ds)))
    } else {
        match grid_delta_star(LossKind::Dpo, reference, reward, &dpo_ds, c.beta, 0.0, c.tau) {
            Err(prefalign::Error::Usage(m)) => ("unavailable", Err(prefalign::Error::Usage(m))),
            r => ("grid_search", r),
        }
    };
    let kappa = match delta_star {
        Ok(d) => numeric_or_null(kappa0(&dpo_ds, &d, &LossSpec::dpo(c.beta)))?,
        Err(e) => json!({ "value": null, "error": e.to_string() }),
    };

    let report = json!({
        "violation": violation,
        "gamma_star": gamma_star(ds, reference, reward, c.beta)?,
        "gamma_star_cons": gamma_star_cons(ds)?,
        "cpo_approx": cpo_approx_constants(reference, ds, reward, &cfg)?,
        "l_sigma_inv": numeric_or_null(inverse_sensitivity(ds, reward, c.beta))?,
        "stat_error": empirical_stat_error(ds, reward)?,
        "comparison_graph_diameters": comparison_graph_diameters(ds),
        "kappa0": { "loss": LossKind::Dpo, "provenance": provenance, "result": kappa },
    });
    out.write("diagnose_report.json", &pretty(&report))?;
    Ok(json!({ "frac_violated": violation.frac_violated }))
}

#[derive(Debug, Clone, Serialize)]
struct LimitsRow {
    loss: &'static str,
    beta: f64,
    max_abs_gap: f64,
    mean_abs_gap: f64,
}

pub fn limits(loaded: &Loaded, out: &mut OutDir) -> Result<Value, CliError> {
    let c = &loaded.config;
    let l = c.limits.clone().unwrap_or_default();
    let inputs = load_inputs(out, &generation_hash(c))?;
    let points = l.delta_theta.values();
    let jobs: Vec<(LossKind, f64)> = l.losses.iter().flat_map(|&k| l.betas.iter().map(move |&b| (k, b))).collect();
    let rows: Vec<Result<LimitsRow, CliError>> = jobs
        .par_iter()
        .map(|&(kind, beta)| {
            let gamma = if kind == LossKind::Dpo { 0.0 } else { c.gamma };
            let spec = LossSpec::new(kind, beta, gamma, c.tau)?;
            let ds = loss_dataset(&inputs.dataset, &inputs.reference, gamma, c.tau, beta)?;
            let stats = ds.require_ref_stats()?;
            let mut max: f64 = 0.0;
            let mut sum = 0.0;
            for rs in stats {
                for &d in &points {
                    let gap =
                        (pair_terms(&spec, d, rs).loss / beta - hinge_limit(kind, d, rs, gamma, beta, c.tau)).abs();
                    max = max.max(gap);
                    sum += gap;
                }
            }
            Ok(LimitsRow {
                loss: kind.name(),
                beta,
                max_abs_gap: max,
                mean_abs_gap: sum / (stats.len() * points.len()) as f64,
            })
        })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut n = 0;
    for r in rows {
        w.serialize(r?).map_err(|e| CliError::validation(format!("limits.csv: {e}")))?;
        n += 1;
    }
    let bytes = w.into_inner().map_err(|e| CliError::validation(format!("limits.csv: {e}")))?;
    out.write("limits.csv", &bytes)?;
    Ok(json!({ "rows": n, "grid_points": points.len() }))
}

pub fn bridge(loaded: &Loaded, out: &mut OutDir) -> Result<Value, CliError> {
    let c = &loaded.config;
    let b = c.bridge.as_ref().ok_or_else(|| CliError::validation("config has no `bridge` section"))?;
    let inputs = load_inputs(out, &generation_hash(c))?;
    let gamma = if b.loss == LossKind::Dpo { 0.0 } else { c.gamma };
    let spec = LossSpec::new(b.loss, c.beta, gamma, c.tau)?;
    let ds = loss_dataset(&inputs.dataset, &inputs.reference, gamma, c.tau, c.beta)?;
    let (provenance, delta_star) = match &b.delta_star_policy {
        Some(p) => {
            let policy = read_policy(out, &loaded.resolve(p), &p.display().to_string())?;
            if policy.space() != ds.space() {
                return Err(CliError::validation("config field `bridge.delta_star_policy`: response space differs"));
            }
            ("policy_file", pair_deltas(&policy, &ds))
        }
        None => (
            "grid_search",
            grid_delta_star(b.loss, &inputs.reference, &inputs.reward, &ds, c.beta, gamma, c.tau).map_err(|e| {
                CliError::from(e).context("bridge (set delta_star_policy for instances beyond the grid budget)")
            })?,
        ),
    };
    let k0 = kappa0(&ds, &delta_star, &spec)?;
    let stat = empirical_stat_error(&ds, &inputs.reward)?;
    let l_inv = inverse_sensitivity(&ds, &inputs.reward, c.beta)?;
    let cert = bridge_certificate(b.eps_loss, k0, c.beta, ds.len(), b.eps_approx, stat.value, l_inv)?;
    out.write("bridge_certificate.json", &pretty(&cert))?;
    Ok(json!({
        "loss": b.loss,
        "delta_star_provenance": provenance,
        "r0": b.r0,
        "self_consistent": cert.self_consistent(b.r0),
        "stat_error_low_confidence": stat.low_confidence,
    }))
}

pub fn run(name: &str, loaded: &Loaded, out_root: &std::path::Path) -> Result<(), CliError> {
    let mut out = OutDir::create(out_root)?;
    let details = match name {
        "generate" => generate(loaded, &mut out)?,
        "solve" => solve(loaded, &mut out)?,
        "train" => train_cmd(loaded, &mut out)?,
        "diagnose" => diagnose(loaded, &mut out)?,
        "limits" => limits(loaded, &mut out)?,
        "bridge" => bridge(loaded, &mut out)?,
        other => return Err(CliError::validation(format!("unknown subcommand {other}"))),
    };
    out.finish(name, &loaded.hash, loaded.config.seed, details)
}
