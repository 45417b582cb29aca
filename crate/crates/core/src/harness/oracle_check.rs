//! Batteries of oracle comparisons on seeded random instances: analytic vs
//! finite-difference gradients, descent vs closed form, and the optimal
//! policy as a classifier.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::eval::classification_accuracy;
use crate::losses::{loss_and_grad, loss_value, Batch, BatchSource, LossKind};
use crate::model::{derive_seed, seeded_rng, LabRng, ProbTable, ReferencePolicy, TabularPolicy, World};
use crate::oracle::{
    effective_beta, finite_diff_grad, max_relative_error, minimize_expected_loss, optimal_policy, total_variation,
    ExpectedLossSpec,
};
use crate::preference::GoldenPreferenceModel;

pub const FD_EPS: f64 = 1e-5;

fn random_logits(n: usize, scale: f64, rng: &mut LabRng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_batch(p: usize, r: usize, n: usize, rng: &mut LabRng) -> Result<Batch> {
    let triples: Vec<_> = (0..n)
        .map(|_| {
            let x = rng.random_range(0..p);
            let y1 = rng.random_range(0..r);
            let y2 = (y1 + rng.random_range(1..r)) % r;
            (x, y1, y2)
        })
        .collect();
    Batch::from_triples(&triples, BatchSource::Dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientRow {
    pub instance: usize,
    pub loss: String,
    pub policy: String,
    pub n_prompts: usize,
    pub n_responses: usize,
    pub max_rel_err: f64,
}

/// Analytic vs central-difference gradients for every loss on `n`
/// instances with `P <= 4`, `R <= 6`, for full and low-rank policies.
pub fn gradient_check(n: usize, seed: u64) -> Result<Vec<GradientRow>> {
    let mut rows = Vec::new();
    for i in 0..n {
        let mut rng = seeded_rng(derive_seed(seed, i as u64));
        let p = rng.random_range(1..=4);
        let r = rng.random_range(2..=6);
        let reference = ReferencePolicy::from_logits(p, r, &random_logits(p * r, 1.0, &mut rng))?;
        let k = rng.random_range(1..=p.min(r));
        let policies = [
            ("full".to_string(), TabularPolicy::from_logits(p, r, random_logits(p * r, 1.5, &mut rng))?),
            (
                format!("rank-{k}"),
                TabularPolicy::from_factors(
                    p,
                    r,
                    k,
                    random_logits(p * r, 1.0, &mut rng),
                    random_logits(p * k, 1.0, &mut rng),
                    random_logits(k * r, 1.0, &mut rng),
                )?,
            ),
        ];
        let batch = random_batch(p, r, 8, &mut rng)?;
        let beta = rng.random_range(0.05..2.0);
        for (name, pol) in &policies {
            for kind in [LossKind::IpoEq1, LossKind::IpoAppB, LossKind::Dpo, LossKind::Bo2] {
                let analytic = loss_and_grad(pol, &reference, &batch, kind, beta)?.gradient;
                let mut probe = pol.clone();
                let numeric = finite_diff_grad(
                    |theta| {
                        probe.set_params(theta)?;
                        loss_value(&probe, &reference, &batch, kind, beta)
                    },
                    pol.params(),
                    FD_EPS,
                )?;
                rows.push(GradientRow {
                    instance: i,
                    loss: kind.name().to_string(),
                    policy: name.clone(),
                    n_prompts: p,
                    n_responses: r,
                    max_rel_err: max_relative_error(&analytic, &numeric),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormRow {
    pub instance: usize,
    pub loss: String,
    pub beta: f64,
    pub prompt: usize,
    pub tv: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Expected-loss descent vs the closed-form optimum on `n` full-support
/// instances, alternating the two IPO parameterizations.
pub fn closed_form_check(n: usize, seed: u64) -> Result<Vec<ClosedFormRow>> {
    let mut rows = Vec::new();
    for i in 0..n {
        let mut rng = seeded_rng(derive_seed(seed, 0x10_000 + i as u64));
        let p = rng.random_range(1..=3);
        let r = rng.random_range(2..=5);
        let world = World::new(p, r, i as u64)?;
        let gm = GoldenPreferenceModel::random(&world, rng.random_range(0.5..3.0), rng.random())?;
        let reference = ReferencePolicy::from_logits(p, r, &random_logits(p * r, 1.0, &mut rng))?;
        let mu_logits = random_logits(p * r, 1.0, &mut rng);
        let mu = ProbTable::from_distribution(&ReferencePolicy::from_logits(p, r, &mu_logits)?);
        let (kind, beta) = if i % 2 == 0 {
            (LossKind::IpoAppB, rng.random_range(0.3..1.0))
        } else {
            (LossKind::IpoEq1, rng.random_range(1.0..3.0))
        };
        let spec = ExpectedLossSpec::new(kind, beta, mu.clone(), &world, gm.clone())?;
        let closed = optimal_policy(&reference, &gm, &mu, effective_beta(kind, beta)?)?;
        let fit = minimize_expected_loss(&spec, &reference, &TabularPolicy::from_reference(&reference), 1e-11, 100_000)?;
        for (x, tv) in total_variation(&fit.policy, &closed)?.into_iter().enumerate() {
            rows.push(ClosedFormRow {
                instance: i,
                loss: kind.name().to_string(),
                beta,
                prompt: x,
                tv,
                converged: fit.converged,
                iterations: fit.iterations,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierRow {
    pub instance: usize,
    pub n_prompts: usize,
    pub n_responses: usize,
    pub n_pairs: usize,
    pub accuracy: f64,
}

/// Exhaustive accuracy of the closed-form optimal policy, used as a
/// classifier, over every ordered pair of distinct responses.
pub fn optimal_classifier_check(n: usize, seed: u64) -> Result<Vec<ClassifierRow>> {
    let mut rows = Vec::new();
    for i in 0..n {
        let mut rng = seeded_rng(derive_seed(seed, 0x20_000 + i as u64));
        let p = rng.random_range(1..=8);
        let r = rng.random_range(2..=16);
        let world = World::new(p, r, i as u64)?;
        let gm = GoldenPreferenceModel::random(&world, rng.random_range(0.5..3.0), rng.random())?;
        let reference = ReferencePolicy::from_logits(p, r, &random_logits(p * r, 2.0, &mut rng))?;
        let mu = ProbTable::from_distribution(&ReferencePolicy::from_logits(p, r, &random_logits(p * r, 1.0, &mut rng))?);
        let pi = optimal_policy(&reference, &gm, &mu, rng.random_range(0.05..1.0))?;
        let pairs: Vec<_> = (0..p)
            .flat_map(|x| (0..r).flat_map(move |a| (0..r).filter(move |&b| b != a).map(move |b| (x, a, b))))
            .collect();
        rows.push(ClassifierRow {
            instance: i,
            n_prompts: p,
            n_responses: r,
            n_pairs: pairs.len(),
            accuracy: classification_accuracy(&pi, &reference, &pairs, &gm)?,
        });
    }
    Ok(rows)
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Summary of the three batteries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSummary {
    pub gradient_max_rel_err: f64,
    pub closed_form_max_tv: f64,
    pub all_converged: bool,
    pub classifier_min_accuracy: f64,
    pub pass: bool,
}

/// Runs all batteries and writes `gradient_check.csv`,
/// `closed_form_tv.csv`, `optimal_classifier.csv` and `summary.json`.
pub fn oracle_check(dir: &Path, n_instances: usize, seed: u64) -> Result<(OracleSummary, Vec<PathBuf>)> {
    let grads = gradient_check(n_instances, seed)?;
    let tvs = closed_form_check(n_instances.max(10), seed)?;
    let cls = optimal_classifier_check(n_instances, seed)?;
    let summary = OracleSummary {
        gradient_max_rel_err: grads.iter().fold(0.0, |m, r| m.max(r.max_rel_err)),
        closed_form_max_tv: tvs.iter().fold(0.0, |m, r| m.max(r.tv)),
        all_converged: tvs.iter().all(|r| r.converged),
        classifier_min_accuracy: cls.iter().fold(1.0, |m, r| m.min(r.accuracy)),
        pass: false,
    };
    let summary = OracleSummary {
        pass: summary.gradient_max_rel_err < 1e-6 && summary.closed_form_max_tv < 1e-4 && summary.classifier_min_accuracy == 1.0,
        ..summary
    };
    fs::create_dir_all(dir)?;
    let paths_csv = [
        dir.join("gradient_check.csv"),
        dir.join("closed_form_tv.csv"),
        dir.join("optimal_classifier.csv"),
    ];
    write_csv(&grads, &paths_csv[0])?;
    write_csv(&tvs, &paths_csv[1])?;
    write_csv(&cls, &paths_csv[2])?;
    let mut paths = paths_csv.to_vec();
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n")?;
    paths.push(p);
    Ok((summary, paths))
}
