//! Running one experiment spec inside a lab, and the tandem check.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataset::{from_stream, make_policy_pair, shuffle_stream, PreferenceDataset};
use crate::error::{Error, Result};
use crate::model::{derive_seed, seeded_rng, ProbTable};
use crate::preference::{LabelMode, PairJudge};
use crate::train::{run, DatasetCursor, RunData, RunRecord, Runner, SamplingMode, SamplingSource};

use super::spec::{DatasetRecipe, ExperimentSpec, GeneratorSpec, JudgeKind, Lab};

const SHUFFLE_STREAM: u64 = 0x5F1E;
const PAIR_STREAM: u64 = 0x9A12;

/// Identifier of a run, stable across re-runs of the same spec.
pub fn run_id(spec: &ExperimentSpec) -> String {
    let t = &spec.train;
    let mut id = format!("{}-{}", spec.name, method_name(spec));
    id.push_str(&format!("-lr{}-b{}-n{}-s{}", t.learning_rate, t.beta, t.steps, t.seed));
    if let Some(k) = t.rank {
        id.push_str(&format!("-r{k}"));
    }
    id
}

/// Sampling mode, data recipe and loss, e.g. `offline-shuffled1-ipo-appb`.
pub fn method_name(spec: &ExperimentSpec) -> String {
    let loss = spec.train.loss.name();
    match (&spec.train.mode, &spec.data) {
        (SamplingMode::Online, _) => match spec.judge {
            JudgeKind::Proxy => format!("online-{loss}"),
            JudgeKind::Golden => format!("online-golden-judge-{loss}"),
        },
        (SamplingMode::Offline, Some(DatasetRecipe::Golden)) => format!("offline-golden-{loss}"),
        (SamplingMode::Offline, Some(DatasetRecipe::OnlineStream { level })) => format!("offline-stream-s{level}-{loss}"),
        (SamplingMode::Offline, Some(DatasetRecipe::PolicyPair { a, b, .. })) => {
            format!("offline-{}-vs-{}-{loss}", generator_name(a), generator_name(b))
        }
        (SamplingMode::Offline, None) => format!("offline-{loss}"),
    }
}

fn generator_name(g: &GeneratorSpec) -> String {
    match g {
        GeneratorSpec::Sft => "sft".into(),
        GeneratorSpec::Online => "online".into(),
        GeneratorSpec::OnlineAt { step } => format!("online{step}"),
        GeneratorSpec::GoldenBest { eps } => format!("best{eps}"),
    }
}

/// The online counterpart of an offline spec (same everything, no data).
pub fn online_companion(spec: &ExperimentSpec) -> ExperimentSpec {
    let mut s = spec.clone();
    s.train.mode = SamplingMode::Online;
    s.data = None;
    s
}

/// A finished experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run_id: String,
    pub method: String,
    pub record: RunRecord,
    /// Dataset an offline run consumed.
    pub dataset: Option<PreferenceDataset>,
    /// The online run an offline recipe was derived from, if any.
    pub companion: Option<RunRecord>,
}

fn judge<'a>(spec: &ExperimentSpec, lab: &'a Lab) -> &'a (dyn PairJudge + Sync) {
    match spec.judge {
        JudgeKind::Proxy => lab.proxy(),
        JudgeKind::Golden => &lab.gm,
    }
}

fn run_online(spec: &ExperimentSpec, lab: &Lab) -> Result<RunRecord> {
    run(
        &lab.world,
        &lab.sft,
        &spec.train,
        RunData::Online { judge: judge(spec, lab) },
        &lab.evaluator,
        &run_id(spec),
    )
}

/// Materializes an offline recipe, running the online companion when the
/// recipe needs it.
pub fn resolve_dataset(spec: &ExperimentSpec, lab: &Lab) -> Result<(PreferenceDataset, Option<RunRecord>)> {
    let recipe = spec
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("offline experiment without a data recipe".into()))?;
    match recipe {
        DatasetRecipe::Golden => Ok((lab.d_golden.clone(), None)),
        DatasetRecipe::OnlineStream { level } => {
            let online = run_online(&online_companion(spec), lab)?;
            let ds = from_stream(&online)?;
            let ds = if *level == 0.0 {
                ds
            } else {
                let seed = derive_seed(spec.train.seed, SHUFFLE_STREAM);
                shuffle_stream(&ds, *level, &mut seeded_rng(seed), seed)?
            };
            Ok((ds, Some(online)))
        }
        DatasetRecipe::PolicyPair { a, b, n } => {
            let uses_online = |g: &GeneratorSpec| matches!(g, GeneratorSpec::Online | GeneratorSpec::OnlineAt { .. });
            let needs_online = uses_online(a) || uses_online(b);
            let online = if needs_online {
                Some(run_online(&online_companion(spec), lab)?)
            } else {
                None
            };
            let table = |g: &GeneratorSpec| -> Result<ProbTable> {
                match g {
                    GeneratorSpec::Sft => Ok(lab.sft.table().clone()),
                    GeneratorSpec::Online => Ok(ProbTable::from_distribution(
                        &online.as_ref().expect("online run resolved above").final_policy,
                    )),
                    GeneratorSpec::OnlineAt { step } => {
                        let rec = online.as_ref().expect("online run resolved above");
                        let ck = rec
                            .checkpoints
                            .iter()
                            .rev()
                            .find(|c| c.step <= *step)
                            .ok_or_else(|| Error::Config(format!("no online checkpoint at or before step {step}")))?;
                        let mut policy = spec.train.init_policy(&lab.sft)?;
                        policy.set_params(&ck.params)?;
                        Ok(ProbTable::from_distribution(&policy))
                    }
                    GeneratorSpec::GoldenBest { eps } => lab.golden_best(*eps),
                }
            };
            let (ta, tb) = (table(a)?, table(b)?);
            let seed = derive_seed(spec.train.seed, PAIR_STREAM);
            let ds = make_policy_pair(
                &lab.world,
                &lab.gm,
                (&ta, generator_name(a).as_str()),
                (&tb, generator_name(b).as_str()),
                *n,
                &mut seeded_rng(seed),
                LabelMode::Bernoulli,
                seed,
            )?;
            Ok((ds, online))
        }
    }
}

/// Runs `spec` in an already-built lab.
pub fn run_in_lab(spec: &ExperimentSpec, lab: &Lab) -> Result<ExperimentOutcome> {
    spec.validate()?;
    if spec.lab_spec().hash() != lab.world_hash {
        return Err(Error::Config("spec and lab describe different worlds".into()));
    }
    let id = run_id(spec);
    let method = method_name(spec);
    match spec.train.mode {
        SamplingMode::Online => Ok(ExperimentOutcome {
            record: run_online(spec, lab)?,
            run_id: id,
            method,
            dataset: None,
            companion: None,
        }),
        SamplingMode::Offline => {
            let (ds, companion) = resolve_dataset(spec, lab)?;
            let record = run(&lab.world, &lab.sft, &spec.train, RunData::Offline { dataset: &ds }, &lab.evaluator, &id)?;
            Ok(ExperimentOutcome {
                run_id: id,
                method,
                record,
                dataset: Some(ds),
                companion,
            })
        }
    }
}

/// Builds the lab and runs the spec.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(Lab, ExperimentOutcome)> {
    spec.validate()?;
    let lab = Lab::build(&spec.lab_spec())?;
    let out = run_in_lab(spec, &lab)?;
    Ok((lab, out))
}

/// Writes the run directory plus `spec.toml` (and `dataset.jsonl` for
/// offline runs) under `dir/<run_id>`.
pub fn write_outcome(spec: &ExperimentSpec, out: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let run_dir = dir.join(&out.run_id);
    let mut paths = out.record.save(&run_dir)?;
    let spec_path = run_dir.join("spec.toml");
    fs::write(&spec_path, spec.to_toml()?)?;
    paths.push(spec_path);
    if let Some(ds) = &out.dataset {
        let p = run_dir.join("dataset.jsonl");
        ds.save(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// How the replayed stream is altered before the offline pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Perturbation {
    None,
    /// Remove the batch consumed at this zero-based step.
    DeleteBatch { index: usize },
    Shuffle { level: f64, seed: u64 },
}

/// Outcome of replaying an online stream offline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TandemReport {
    pub perturbation: Perturbation,
    pub steps: usize,
    /// `max |theta_online - theta_offline|` after each step.
    pub per_step_max_diff: Vec<f64>,
    pub max_diff: f64,
    /// 1-based step at which the trajectories first differ.
    pub first_divergent_step: Option<usize>,
    pub final_win_rate_online: f64,
    pub final_win_rate_offline: f64,
    pub final_kl_online: f64,
    pub final_kl_offline: f64,
    pub pass: bool,
}

impl TandemReport {
    pub fn summary_line(&self) -> String {
        match self.first_divergent_step {
            None => format!("PASS max_diff={} steps={}", self.max_diff, self.steps),
            Some(s) => format!("FAIL first_divergent_step={s} max_diff={:.3e} steps={}", self.max_diff, self.steps),
        }
    }
}

/// Runs `spec` online step by step, then replays its stream offline from
/// the same initialization and optimizer state and compares parameters
/// after every step.
pub fn tandem_check(spec: &ExperimentSpec, lab: &Lab, perturbation: Perturbation) -> Result<TandemReport> {
    let online_spec = online_companion(spec);
    online_spec.validate()?;
    let cfg = online_spec.train.clone();
    let init = cfg.init_policy(&lab.sft)?;

    let mut online = Runner::new(&lab.world, &lab.sft, cfg.clone(), SamplingSource::Online { judge: judge(spec, lab) }, init.clone())?;
    let mut trajectory = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        online.step()?;
        trajectory.push(online.policy().params().to_vec());
    }
    let record = RunRecord::for_stream("tandem", online.stream().to_vec());
    let ds = from_stream(&record)?;
    let ds = match perturbation {
        Perturbation::None => ds,
        Perturbation::DeleteBatch { index } => ds.without_batch(index)?,
        Perturbation::Shuffle { level, seed } => shuffle_stream(&ds, level, &mut seeded_rng(seed), seed)?,
    };

    let mut off_cfg = cfg.clone();
    off_cfg.mode = SamplingMode::Offline;
    let mut offline = Runner::new(&lab.world, &lab.sft, off_cfg, SamplingSource::Offline(DatasetCursor::new(&ds)?), init)?;
    let mut per_step = Vec::with_capacity(cfg.steps);
    let mut first = None;
    for (i, theta) in trajectory.iter().enumerate() {
        offline.step()?;
        let d = theta
            .iter()
            .zip(offline.policy().params())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if d != 0.0 && first.is_none() {
            first = Some(i + 1);
        }
        per_step.push(d);
    }
    let max_diff = per_step.iter().fold(0.0f64, |m, &d| m.max(d));
    let on = lab.evaluator.evaluate(online.policy(), &lab.sft, cfg.steps as u64)?;
    let off = lab.evaluator.evaluate(offline.policy(), &lab.sft, cfg.steps as u64)?;
    Ok(TandemReport {
        perturbation,
        steps: cfg.steps,
        per_step_max_diff: per_step,
        max_diff,
        first_divergent_step: first,
        final_win_rate_online: on.win_rate,
        final_win_rate_offline: off.win_rate,
        final_kl_online: on.kl,
        final_kl_offline: off.kl,
        pass: first.is_none(),
    })
}
