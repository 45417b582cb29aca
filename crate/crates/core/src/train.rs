//! Online and offline policy optimization over one shared update path.
//!
//! The two modes differ only in where a step's batch comes from: online
//! steps sample pairs from the current policy and label them with a judge,
//! offline steps read the next slice of a fixed dataset. Every batch a run
//! consumes is recorded in order, so replaying an online stream offline from
//! the same initialization walks the exact same parameter trajectory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledPair, PreferenceDataset};
use crate::error::{input, Error, Result};
use crate::eval::Evaluator;
use crate::losses::{loss_and_grad, Batch, BatchSource, LossKind, LossReport};
use crate::model::{
    derive_seed, sample_categorical, seeded_rng, LabRng, PromptId, ReferencePolicy, ResponseDistribution, TabularPolicy,
    World,
};
use crate::preference::PairJudge;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    #[default]
    Online,
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub mode: SamplingMode,
    pub learning_rate: f64,
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_cadence: usize,
    pub optimizer: Optimizer,
    /// Low-rank factorization rank; `None` trains the full logit table.
    pub rank: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::IpoAppB,
            mode: SamplingMode::Online,
            learning_rate: 20.0,
            beta: 0.1,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            eval_cadence: 50,
            optimizer: Optimizer::Sgd,
            rank: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad("beta must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_cadence == 0 {
            return bad("eval_cadence must be positive");
        }
        if self.rank == Some(0) {
            return bad("rank must be positive");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        Ok(())
    }

    /// Initial policy: the reference itself, or its low-rank counterpart.
    pub fn init_policy(&self, reference: &ReferencePolicy) -> Result<TabularPolicy> {
        match self.rank {
            None => Ok(TabularPolicy::from_reference(reference)),
            Some(k) => TabularPolicy::low_rank_at_reference(reference, k, derive_seed(self.seed, INIT_STREAM)),
        }
    }
}

const INIT_STREAM: u64 = 0x1417;
const SAMPLE_STREAM: u64 = 0x5A3F;

/// First and second moment buffers; untouched by SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn updates(&self) -> u64 {
        self.t
    }

    fn apply(&mut self, opt: Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match opt {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// The one update implementation both modes go through. Empty batches
/// leave parameters and optimizer state untouched and return `None`.
pub fn apply_update(
    policy: &mut TabularPolicy,
    reference: &ReferencePolicy,
    batch: &Batch,
    config: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<Option<LossReport>> {
    if batch.is_empty() {
        return Ok(None);
    }
    let report = loss_and_grad(policy, reference, batch, config.loss, config.beta)?;
    state.apply(config.optimizer, config.learning_rate, policy.params_mut(), &report.gradient);
    Ok(Some(report))
}

/// Sequential reader over a dataset with wraparound epochs.
///
/// Datasets carrying batch boundaries are replayed batch by batch
/// (including empty batches); others are cut into `batch_size` slices.
#[derive(Debug, Clone)]
pub struct DatasetCursor<'a> {
    dataset: &'a PreferenceDataset,
    ranges: Option<Vec<std::ops::Range<usize>>>,
    position: usize,
    consumed: usize,
    epoch: usize,
}

impl<'a> DatasetCursor<'a> {
    pub fn new(dataset: &'a PreferenceDataset) -> Result<Self> {
        if dataset.is_empty() {
            return input("offline training needs a non-empty dataset");
        }
        Ok(DatasetCursor {
            dataset,
            ranges: dataset.batch_ranges(),
            position: 0,
            consumed: 0,
            epoch: 0,
        })
    }

    /// Completed passes over the dataset.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Examples consumed divided by dataset size.
    pub fn epoch_fraction(&self) -> f64 {
        self.consumed as f64 / self.dataset.len() as f64
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<LabeledPair> {
        let ex = self.dataset.examples();
        match &self.ranges {
            Some(ranges) => {
                let r = ranges[self.position].clone();
                self.consumed += r.len();
                self.position += 1;
                if self.position == ranges.len() {
                    self.position = 0;
                    self.epoch += 1;
                }
                ex[r].to_vec()
            }
            None => {
                let mut out = Vec::with_capacity(batch_size);
                for _ in 0..batch_size {
                    out.push(ex[self.position]);
                    self.position += 1;
                    if self.position == ex.len() {
                        self.position = 0;
                        self.epoch += 1;
                    }
                }
                self.consumed += batch_size;
                out
            }
        }
    }
}

/// Where a run's batches come from.
pub enum SamplingSource<'a> {
    /// Pairs drawn from the current policy, labeled by `judge`.
    Online { judge: &'a (dyn PairJudge + Sync) },
    Offline(DatasetCursor<'a>),
}

impl SamplingSource<'_> {
    fn mode(&self) -> SamplingMode {
        match self {
            SamplingSource::Online { .. } => SamplingMode::Online,
            SamplingSource::Offline(_) => SamplingMode::Offline,
        }
    }
}

/// Draws `batch_size` prompts, samples two responses per prompt from the
/// policy, and labels them; degenerate pairs are dropped and counted.
pub fn sample_online_batch(
    policy: &TabularPolicy,
    judge: &(dyn PairJudge + Sync),
    world: &World,
    batch_size: usize,
    rng: &mut LabRng,
) -> Result<(Batch, usize)> {
    let mut rows: std::collections::HashMap<PromptId, Vec<f64>> = std::collections::HashMap::new();
    let mut examples = Vec::with_capacity(batch_size);
    let mut degenerate = 0;
    for _ in 0..batch_size {
        let x = world.sample_prompt(rng);
        let row = match rows.entry(x) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(policy.probs(x)?),
        };
        let y1 = sample_categorical(row, rng);
        let y2 = sample_categorical(row, rng);
        if y1 == y2 {
            degenerate += 1;
            continue;
        }
        let j = judge.judge(x, y1, y2, rng)?;
        examples.push(LabeledPair {
            prompt: x,
            winner: j.winner,
            loser: j.loser,
            label_margin: j.margin,
        });
    }
    Ok((Batch::new(examples, BatchSource::Online)?, degenerate))
}

/// What one step did.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub batch: Batch,
    /// `None` when the batch was empty and the step skipped.
    pub report: Option<LossReport>,
    pub degenerate_pairs: usize,
}

/// A run advanced one step at a time.
pub struct Runner<'a> {
    world: &'a World,
    reference: &'a ReferencePolicy,
    config: TrainConfig,
    source: SamplingSource<'a>,
    policy: TabularPolicy,
    state: OptimizerState,
    rng: LabRng,
    step: usize,
    stream: Vec<Batch>,
    degenerate_pairs: usize,
    skipped_steps: usize,
}

impl<'a> Runner<'a> {
    pub fn new(
        world: &'a World,
        reference: &'a ReferencePolicy,
        config: TrainConfig,
        source: SamplingSource<'a>,
        init: TabularPolicy,
    ) -> Result<Self> {
        config.validate()?;
        if source.mode() != config.mode {
            return Err(Error::Config(format!(
                "config asks for {:?} training but the sampling source is {:?}",
                config.mode,
                source.mode()
            )));
        }
        if init.n_prompts() != reference.n_prompts() || init.n_responses() != reference.n_responses() {
            return input("initial policy and reference shapes differ");
        }
        if world.n_prompts != reference.n_prompts() || world.n_responses != reference.n_responses() {
            return input("world and reference shapes differ");
        }
        let state = OptimizerState::new(init.n_params());
        let rng = seeded_rng(derive_seed(config.seed, SAMPLE_STREAM));
        Ok(Runner {
            world,
            reference,
            config,
            source,
            policy: init,
            state,
            rng,
            step: 0,
            stream: Vec::new(),
            degenerate_pairs: 0,
            skipped_steps: 0,
        })
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.policy
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn stream(&self) -> &[Batch] {
        &self.stream
    }

    /// Epoch fraction of an offline cursor; zero online.
    pub fn epoch(&self) -> f64 {
        match &self.source {
            SamplingSource::Offline(c) => c.epoch_fraction(),
            SamplingSource::Online { .. } => 0.0,
        }
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let (batch, degenerate) = match &mut self.source {
            SamplingSource::Online { judge } => {
                sample_online_batch(&self.policy, *judge, self.world, self.config.batch_size, &mut self.rng)?
            }
            SamplingSource::Offline(cursor) => {
                (Batch::new(cursor.next_batch(self.config.batch_size), BatchSource::Dataset)?, 0)
            }
        };
        let report = apply_update(&mut self.policy, self.reference, &batch, &self.config, &mut self.state)?;
        if report.is_none() {
            self.skipped_steps += 1;
        }
        self.degenerate_pairs += degenerate;
        self.step += 1;
        self.stream.push(batch.clone());
        Ok(StepOutcome {
            batch,
            report,
            degenerate_pairs: degenerate,
        })
    }

    fn into_parts(self) -> (TabularPolicy, Vec<Batch>, usize, usize) {
        (self.policy, self.stream, self.degenerate_pairs, self.skipped_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub params: Vec<f64>,
}

/// One evaluation row. `loss` is the mean batch loss since the previous
/// row (NaN at step 0 and when every step in between was skipped);
/// `mean_margin` is measured on the evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub kl: f64,
    pub win_rate: f64,
    pub cls_acc: f64,
    pub win_logprob_delta: f64,
    pub mean_margin: f64,
    pub epoch: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: TrainConfig,
    pub checkpoints: Vec<Checkpoint>,
    /// Batches in consumption order; the online generated dataset when
    /// online.
    pub stream: Vec<Batch>,
    pub metrics: Vec<MetricsRow>,
    pub degenerate_pairs: usize,
    pub skipped_steps: usize,
    pub final_policy: TabularPolicy,
}

impl RunRecord {
    /// A bare record around a stream, for stream-only consumers.
    pub fn for_stream(run_id: &str, stream: Vec<Batch>) -> Self {
        let (p, r) = stream
            .iter()
            .flat_map(|b| &b.examples)
            .fold((1, 2), |(p, r), e| (p.max(e.prompt + 1), r.max(e.winner.max(e.loser) + 1)));
        RunRecord {
            run_id: run_id.to_string(),
            config: TrainConfig::default(),
            checkpoints: Vec::new(),
            stream,
            metrics: Vec::new(),
            degenerate_pairs: 0,
            skipped_steps: 0,
            final_policy: TabularPolicy::uniform(p, r),
        }
    }

    pub fn peak_win_rate(&self) -> f64 {
        self.metrics.iter().map(|m| m.win_rate).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_metrics(&self) -> Option<&MetricsRow> {
        self.metrics.last()
    }

    /// Writes `config.json`, `metrics.csv`, `stream.jsonl`,
    /// `checkpoints.jsonl` and `policy.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();

        let cfg_path = dir.join("config.json");
        let snapshot = serde_json::json!({
            "run_id": self.run_id,
            "config": self.config,
            "degenerate_pairs": self.degenerate_pairs,
            "skipped_steps": self.skipped_steps,
        });
        fs::write(&cfg_path, serde_json::to_string_pretty(&snapshot)? + "\n")?;
        written.push(cfg_path);

        let metrics_path = dir.join("metrics.csv");
        write_metrics_csv(&self.metrics, &metrics_path)?;
        written.push(metrics_path);

        let stream_path = dir.join("stream.jsonl");
        let mut out = BufWriter::new(fs::File::create(&stream_path)?);
        for b in &self.stream {
            serde_json::to_writer(&mut out, b)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        written.push(stream_path);

        let ck_path = dir.join("checkpoints.jsonl");
        let mut out = BufWriter::new(fs::File::create(&ck_path)?);
        for c in &self.checkpoints {
            serde_json::to_writer(&mut out, c)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        written.push(ck_path);

        let policy_path = dir.join("policy.json");
        fs::write(&policy_path, serde_json::to_string(&self.final_policy)? + "\n")?;
        written.push(policy_path);
        Ok(written)
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Inputs that distinguish the two modes at the `run` level.
pub enum RunData<'a> {
    Online { judge: &'a (dyn PairJudge + Sync) },
    Offline { dataset: &'a PreferenceDataset },
}

/// Executes `config.steps` steps, evaluating and checkpointing every
/// `eval_cadence` steps (step 0 included).
pub fn run(
    world: &World,
    reference: &ReferencePolicy,
    config: &TrainConfig,
    data: RunData<'_>,
    evaluator: &Evaluator,
    run_id: &str,
) -> Result<RunRecord> {
    let source = match data {
        RunData::Online { judge } => SamplingSource::Online { judge },
        RunData::Offline { dataset } => SamplingSource::Offline(DatasetCursor::new(dataset)?),
    };
    let init = config.init_policy(reference)?;
    let mut runner = Runner::new(world, reference, config.clone(), source, init)?;
    let mut checkpoints = Vec::new();
    let mut metrics = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    let mut record_eval = |runner: &Runner, loss: f64| -> Result<()> {
        let step = runner.step_count();
        let snap = evaluator.evaluate(runner.policy(), reference, step as u64)?;
        let mean_margin = mean_eval_margin(runner.policy(), reference, evaluator)?;
        checkpoints.push(Checkpoint {
            step,
            params: runner.policy().params().to_vec(),
        });
        metrics.push(MetricsRow {
            step,
            loss,
            kl: snap.kl,
            win_rate: snap.win_rate,
            cls_acc: snap.cls_acc,
            win_logprob_delta: snap.win_logprob_delta,
            mean_margin,
            epoch: runner.epoch(),
        });
        Ok(())
    };

    record_eval(&runner, f64::NAN)?;
    for _ in 0..config.steps {
        let out = runner.step()?;
        if let Some(r) = out.report {
            loss_sum += r.value;
            loss_n += 1;
        }
        if runner.step_count() % config.eval_cadence == 0 {
            let loss = if loss_n == 0 { f64::NAN } else { loss_sum / loss_n as f64 };
            record_eval(&runner, loss)?;
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    let (final_policy, stream, degenerate_pairs, skipped_steps) = runner.into_parts();
    Ok(RunRecord {
        run_id: run_id.to_string(),
        config: config.clone(),
        checkpoints,
        stream,
        metrics,
        degenerate_pairs,
        skipped_steps,
        final_policy,
    })
}

fn mean_eval_margin(policy: &TabularPolicy, reference: &ReferencePolicy, evaluator: &Evaluator) -> Result<f64> {
    let pairs = evaluator.cls_pairs();
    let mut s = 0.0;
    for &(x, w, l) in pairs {
        s += crate::losses::logratio_margin(policy, reference, x, w, l)?;
    }
    Ok(s / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::eval::EvalConfig;
    use crate::preference::{GoldenPreferenceModel, ProxyPreferenceModel};

    struct Fixture {
        world: World,
        reference: ReferencePolicy,
        gm: GoldenPreferenceModel,
        evaluator: Evaluator,
    }

    fn fixture() -> Fixture {
        let world = World::new(4, 5, 0).unwrap();
        let reference = ReferencePolicy::from_logits(4, 5, &(0..20).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>()).unwrap();
        let gm = GoldenPreferenceModel::random(&world, 3.0, 5).unwrap();
        let eval_set = crate::dataset::make_golden(
            &world,
            &gm,
            &reference,
            64,
            &mut seeded_rng(9),
            crate::preference::LabelMode::Argmax,
            9,
        )
        .unwrap();
        let evaluator = Evaluator::new(world.clone(), gm.clone(), reference.clone(), eval_set, EvalConfig::default()).unwrap();
        Fixture {
            world,
            reference,
            gm,
            evaluator,
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            steps: 40,
            batch_size: 8,
            eval_cadence: 10,
            learning_rate: 5.0,
            ..Default::default()
        }
    }

    #[test]
    fn cursor_counts_epochs() {
        let ex: Vec<_> = (0..6)
            .map(|i| LabeledPair {
                prompt: 0,
                winner: i % 2,
                loser: 1 - i % 2,
                label_margin: 0.0,
            })
            .collect();
        let ds = PreferenceDataset::new(ex, Provenance::Golden { seed: 0 }, None).unwrap();
        let mut c = DatasetCursor::new(&ds).unwrap();
        c.next_batch(3);
        assert_eq!(c.epoch(), 0);
        c.next_batch(3);
        assert_eq!(c.epoch(), 1);
        assert_eq!(c.epoch_fraction(), 1.0);
        let b = c.next_batch(4);
        assert_eq!(b[0], ds.examples()[0]);
    }

    #[test]
    fn cursor_replays_recorded_boundaries_including_empty() {
        let ex: Vec<_> = (0..3)
            .map(|i| LabeledPair {
                prompt: i,
                winner: 0,
                loser: 1,
                label_margin: 0.0,
            })
            .collect();
        let ds = PreferenceDataset::new(ex, Provenance::Golden { seed: 0 }, Some(vec![2, 0, 1])).unwrap();
        let mut c = DatasetCursor::new(&ds).unwrap();
        assert_eq!(c.next_batch(99).len(), 2);
        assert!(c.next_batch(99).is_empty());
        assert_eq!(c.next_batch(99)[0].prompt, 2);
        assert_eq!(c.epoch(), 1);
    }

    #[test]
    fn point_mass_policy_yields_empty_batches() {
        let f = fixture();
        let judge = f.gm.clone();
        let mut logits = vec![-800.0; 20];
        for x in 0..4 {
            logits[x * 5] = 0.0;
        }
        let init = TabularPolicy::from_logits(4, 5, logits).unwrap();
        let before = init.params().to_vec();
        let mut runner = Runner::new(&f.world, &f.reference, small_config(), SamplingSource::Online { judge: &judge }, init).unwrap();
        let out = runner.step().unwrap();
        assert!(out.batch.is_empty() && out.report.is_none());
        assert_eq!(out.degenerate_pairs, 8);
        assert_eq!(runner.policy().params(), &before[..]);
        assert_eq!(runner.stream().len(), 1);
    }

    #[test]
    fn online_step_uses_the_analytic_batch_gradient() {
        let f = fixture();
        let judge = f.gm.clone();
        let cfg = TrainConfig {
            loss: LossKind::IpoEq1,
            ..small_config()
        };
        let init = cfg.init_policy(&f.reference).unwrap();
        let mut runner = Runner::new(&f.world, &f.reference, cfg.clone(), SamplingSource::Online { judge: &judge }, init.clone()).unwrap();
        let out = runner.step().unwrap();
        let expect = loss_and_grad(&init, &f.reference, &out.batch, cfg.loss, cfg.beta).unwrap();
        assert_eq!(out.report.unwrap().gradient, expect.gradient);
        for ((p, p0), g) in runner.policy().params().iter().zip(init.params()).zip(&expect.gradient) {
            assert_eq!(*p, p0 - cfg.learning_rate * g);
        }
    }

    #[test]
    fn runs_are_deterministic_and_sized() {
        let f = fixture();
        let judge = ProxyPreferenceModel::pointwise(4, 5, f.gm.utilities.clone(), 0.0).unwrap();
        let cfg = small_config();
        let a = run(&f.world, &f.reference, &cfg, RunData::Online { judge: &judge }, &f.evaluator, "a").unwrap();
        let b = run(&f.world, &f.reference, &cfg, RunData::Online { judge: &judge }, &f.evaluator, "a").unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.metrics.len(), 40 / 10 + 1);
        assert_eq!(a.checkpoints.len(), 5);
        assert_eq!(a.stream.len(), 40);
        assert!(a.metrics[0].kl.abs() < 1e-12);
        assert_eq!(a.metrics[0].cls_acc, 0.5);
        assert!(a.metrics.iter().all(|m| m.kl >= -1e-12));
    }

    #[test]
    fn zero_steps_records_only_the_initial_checkpoint() {
        let f = fixture();
        let judge = f.gm.clone();
        let cfg = TrainConfig { steps: 0, ..small_config() };
        let r = run(&f.world, &f.reference, &cfg, RunData::Online { judge: &judge }, &f.evaluator, "z").unwrap();
        assert_eq!(r.metrics.len(), 1);
        assert_eq!(r.checkpoints.len(), 1);
        assert_eq!(r.final_policy, TabularPolicy::from_reference(&f.reference));
        assert!((r.metrics[0].win_rate - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mode_mismatch_is_a_config_error() {
        let f = fixture();
        let judge = f.gm.clone();
        let cfg = TrainConfig {
            mode: SamplingMode::Offline,
            ..small_config()
        };
        let err = run(&f.world, &f.reference, &cfg, RunData::Online { judge: &judge }, &f.evaluator, "x").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn offline_replay_of_online_stream_is_exact() {
        let f = fixture();
        let judge = ProxyPreferenceModel::pointwise(4, 5, f.gm.utilities.clone(), 0.2).unwrap();
        for opt in [Optimizer::Sgd, Optimizer::adam()] {
            let cfg = TrainConfig {
                optimizer: opt,
                learning_rate: if opt == Optimizer::Sgd { 5.0 } else { 0.05 },
                ..small_config()
            };
            let online = run(&f.world, &f.reference, &cfg, RunData::Online { judge: &judge }, &f.evaluator, "on").unwrap();
            let ds = crate::dataset::from_stream(&online).unwrap();
            let off_cfg = TrainConfig {
                mode: SamplingMode::Offline,
                ..cfg
            };
            let offline = run(&f.world, &f.reference, &off_cfg, RunData::Offline { dataset: &ds }, &f.evaluator, "off").unwrap();
            assert_eq!(online.checkpoints, offline.checkpoints);
            assert_eq!(online.final_policy, offline.final_policy);
        }
    }

    #[test]
    fn online_training_beats_sft_on_a_wide_gap_world() {
        let f = fixture();
        let judge = f.gm.clone();
        let cfg = TrainConfig {
            steps: 200,
            ..small_config()
        };
        let r = run(&f.world, &f.reference, &cfg, RunData::Online { judge: &judge }, &f.evaluator, "g").unwrap();
        assert!(r.final_metrics().unwrap().win_rate > 0.5);
    }

    #[test]
    fn repeated_single_example_loss_decreases() {
        let f = fixture();
        let ds = PreferenceDataset::new(
            vec![LabeledPair {
                prompt: 1,
                winner: 2,
                loser: 4,
                label_margin: 0.0,
            }],
            Provenance::Golden { seed: 0 },
            None,
        )
        .unwrap();
        let cfg = TrainConfig {
            loss: LossKind::IpoEq1,
            mode: SamplingMode::Offline,
            learning_rate: 0.01,
            batch_size: 1,
            ..small_config()
        };
        let init = cfg.init_policy(&f.reference).unwrap();
        let mut runner = Runner::new(&f.world, &f.reference, cfg, SamplingSource::Offline(DatasetCursor::new(&ds).unwrap()), init).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let v = runner.step().unwrap().report.unwrap().value;
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn save_writes_every_artifact() {
        let f = fixture();
        let judge = f.gm.clone();
        let r = run(&f.world, &f.reference, &small_config(), RunData::Online { judge: &judge }, &f.evaluator, "s").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = r.save(dir.path()).unwrap();
        assert_eq!(paths.len(), 5);
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("step,loss,kl,win_rate,cls_acc,win_logprob_delta,mean_margin,epoch"));
        let lines = fs::read_to_string(dir.path().join("stream.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 40);
    }
}
