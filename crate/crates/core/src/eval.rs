//! Measurement procedures: KL to the reference (exact and sampled), golden
//! win rate, policy-as-classifier accuracies, stream accuracy, and trade-off
//! curve assembly.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceDataset;
use crate::error::{input, Error, Result};
use crate::model::{
    derive_seed, sample_categorical, seeded_rng, LabRng, PromptId, ReferencePolicy, ResponseDistribution,
    ResponseId, TabularPolicy, World,
};
use crate::preference::{judge_agreement, GoldenPreferenceModel, PairJudge, PreferenceJudgment};
use crate::train::RunRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WinMode {
    /// Mean golden preference probability.
    #[default]
    Soft,
    /// Mean indicator of the golden argmax, ties 0.5.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    #[default]
    Exact,
    Sampled,
}

/// How a policy is measured during and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Prompts drawn per sampled win-rate or KL estimate.
    pub n_eval_prompts: usize,
    pub win_mode: WinMode,
    pub kl_mode: KlMode,
    /// Enumerate every prompt and response pair instead of sampling.
    pub exhaustive: bool,
    /// Pairs subsampled from the evaluation dataset for classification
    /// accuracy.
    pub cls_subsample: usize,
    /// Size of the golden-labeled SFT pair set built for evaluation.
    pub eval_set_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_eval_prompts: 256,
            win_mode: WinMode::Soft,
            kl_mode: KlMode::Exact,
            exhaustive: true,
            cls_subsample: 256,
            eval_set_size: 512,
            seed: 0,
        }
    }
}

/// `KL(pi(.|x) || ref(.|x))`; zero-probability terms contribute nothing.
pub fn prompt_kl(probs: &[f64], reference: &ReferencePolicy, x: PromptId) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(y, &p)| p * (p.ln() - reference.log_prob(x, y)))
        .sum()
}

fn check_shapes<P: ResponseDistribution + ?Sized>(policy: &P, reference: &ReferencePolicy) -> Result<()> {
    if policy.n_prompts() != reference.n_prompts() || policy.n_responses() != reference.n_responses() {
        return input("policy and reference shapes differ");
    }
    Ok(())
}

/// Exact KL to the reference, weighted by the prompt distribution.
pub fn exact_kl<P: ResponseDistribution + ?Sized>(
    policy: &P,
    reference: &ReferencePolicy,
    prompt_dist: &[f64],
) -> Result<f64> {
    check_shapes(policy, reference)?;
    if prompt_dist.len() != policy.n_prompts() {
        return input("prompt distribution length differs from the policy");
    }
    let mut kl = 0.0;
    for (x, &w) in prompt_dist.iter().enumerate() {
        if w > 0.0 {
            kl += w * prompt_kl(&policy.row(x)?, reference, x);
        }
    }
    Ok(kl)
}

/// Monte Carlo KL estimate: subsample prompts, draw a response from the
/// policy for each, and sum the analytic per-step KLs along it. With atomic
/// responses the trajectory has one step, so each term is the full
/// per-prompt KL.
pub fn sampled_kl<P: ResponseDistribution + ?Sized>(
    policy: &P,
    reference: &ReferencePolicy,
    world: &World,
    n_prompts: usize,
    rng: &mut LabRng,
) -> Result<f64> {
    check_shapes(policy, reference)?;
    if n_prompts == 0 {
        return input("sampled KL needs at least one prompt");
    }
    let mut total = 0.0;
    for _ in 0..n_prompts {
        let x = world.sample_prompt(rng);
        let probs = policy.row(x)?;
        // the drawn response fixes the trajectory; one step for atomic arms
        let _y = sample_categorical(&probs, rng);
        total += prompt_kl(&probs, reference, x);
    }
    Ok(total / n_prompts as f64)
}

/// The sampled estimator with each prompt visited exactly once.
pub fn stratified_kl<P: ResponseDistribution + ?Sized>(policy: &P, reference: &ReferencePolicy) -> Result<f64> {
    check_shapes(policy, reference)?;
    let n = policy.n_prompts();
    let mut total = 0.0;
    for x in 0..n {
        total += prompt_kl(&policy.row(x)?, reference, x);
    }
    Ok(total / n as f64)
}

#[inline]
fn pair_score(gm: &GoldenPreferenceModel, x: PromptId, y: ResponseId, yb: ResponseId, mode: WinMode) -> f64 {
    match mode {
        WinMode::Soft => gm.pref_unchecked(x, y, yb),
        WinMode::Hard => match gm.prefers_first(x, y, yb) {
            Some(true) => 1.0,
            Some(false) => 0.0,
            None => 0.5,
        },
    }
}

/// Win rate of `policy` against `baseline` by full enumeration over
/// prompts (weighted by the prompt distribution) and response pairs.
pub fn exhaustive_win_rate<P, B>(policy: &P, baseline: &B, gm: &GoldenPreferenceModel, world: &World, mode: WinMode) -> Result<f64>
where
    P: ResponseDistribution + ?Sized,
    B: ResponseDistribution + ?Sized,
{
    let mut total = 0.0;
    for (x, &w) in world.prompt_dist.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let pi = policy.row(x)?;
        let pb = baseline.row(x)?;
        let mut s = 0.0;
        for (y, &p) in pi.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let inner: f64 = pb
                .iter()
                .enumerate()
                .map(|(yb, &q)| if q == 0.0 { 0.0 } else { q * pair_score(gm, x, y, yb, mode) })
                .sum();
            s += p * inner;
        }
        total += w * s;
    }
    Ok(total)
}

/// Golden win rate against a fixed baseline, by sampling or enumeration.
pub fn win_rate<P, B>(
    policy: &P,
    baseline: &B,
    gm: &GoldenPreferenceModel,
    world: &World,
    cfg: &EvalConfig,
    rng: &mut LabRng,
) -> Result<f64>
where
    P: ResponseDistribution + ?Sized,
    B: ResponseDistribution + ?Sized,
{
    if cfg.exhaustive {
        return exhaustive_win_rate(policy, baseline, gm, world, cfg.win_mode);
    }
    if cfg.n_eval_prompts == 0 {
        return input("n_eval_prompts must be at least 1");
    }
    let mut total = 0.0;
    for _ in 0..cfg.n_eval_prompts {
        let x = world.sample_prompt(rng);
        let y = policy.sample(x, rng)?;
        let yb = baseline.sample(x, rng)?;
        total += pair_score(gm, x, y, yb, cfg.win_mode);
    }
    Ok(total / cfg.n_eval_prompts as f64)
}

/// Policy-as-classifier score:
/// `log(pi(y1)/pi(y2)) - log(pi_sft(y1)/pi_sft(y2))` at prompt `x`.
pub fn classifier_score(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    x: PromptId,
    y1: ResponseId,
    y2: ResponseId,
) -> Result<f64> {
    crate::losses::logratio_margin(policy, reference, x, y1, y2)
}

/// Adapts a policy and its reference into a [`PairJudge`].
pub struct PolicyClassifier<'a> {
    pub policy: &'a TabularPolicy,
    pub reference: &'a ReferencePolicy,
}

impl PairJudge for PolicyClassifier<'_> {
    fn judge(&self, x: PromptId, y1: ResponseId, y2: ResponseId, rng: &mut LabRng) -> Result<PreferenceJudgment> {
        let f = classifier_score(self.policy, self.reference, x, y1, y2)?;
        let (first, tie) = if f == 0.0 { (rng.random::<bool>(), true) } else { (f > 0.0, false) };
        let (winner, loser) = if first { (y1, y2) } else { (y2, y1) };
        Ok(PreferenceJudgment {
            winner,
            loser,
            margin: f,
            tie_broken: tie,
        })
    }
}

/// A judge that ignores the pair and flips a fair coin.
pub struct CoinFlipJudge;

impl PairJudge for CoinFlipJudge {
    fn judge(&self, _x: PromptId, y1: ResponseId, y2: ResponseId, rng: &mut LabRng) -> Result<PreferenceJudgment> {
        let first = rng.random::<bool>();
        let (winner, loser) = if first { (y1, y2) } else { (y2, y1) };
        Ok(PreferenceJudgment {
            winner,
            loser,
            margin: 0.0,
            tie_broken: true,
        })
    }
}

/// Fraction of pairs whose classifier sign matches the golden argmax.
/// `f = 0` counts one half; golden ties are excluded.
pub fn classification_accuracy(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    pairs: &[(PromptId, ResponseId, ResponseId)],
    gm: &GoldenPreferenceModel,
) -> Result<f64> {
    if pairs.is_empty() {
        return input("classification accuracy needs at least one pair");
    }
    let (mut hits, mut n) = (0.0, 0usize);
    for &(x, y1, y2) in pairs {
        let f = classifier_score(policy, reference, x, y1, y2)?;
        let Some(golden_first) = gm.prefers_first(x, y1, y2) else {
            continue;
        };
        n += 1;
        hits += if f == 0.0 {
            0.5
        } else if (f > 0.0) == golden_first {
            1.0
        } else {
            0.0
        };
    }
    if n == 0 {
        return Err(Error::UndefinedAccuracy("every pair is a golden tie".into()));
    }
    Ok(hits / n as f64)
}

/// Deterministic subsample of a dataset's pairs (all of them when `n`
/// exceeds its size), kept in dataset order.
pub fn subsample_pairs(ds: &PreferenceDataset, n: usize, rng: &mut LabRng) -> Vec<(PromptId, ResponseId, ResponseId)> {
    let triples = ds.triples();
    if n >= triples.len() {
        return triples;
    }
    let mut idx = sample_indices(rng, triples.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| triples[i]).collect()
}

/// An accuracy estimate with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub accuracy: f64,
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl AccuracyEstimate {
    fn new(hits: f64, n: usize) -> Self {
        let p = hits / n as f64;
        let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
        AccuracyEstimate {
            accuracy: p,
            n,
            ci_low: (p - half).max(0.0),
            ci_high: (p + half).min(1.0),
        }
    }
}

/// Classifier accuracy on pairs the policy draws itself. Degenerate draws
/// are redrawn; golden ties are redrawn as well since they carry no label.
pub fn self_classification_accuracy(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    gm: &GoldenPreferenceModel,
    world: &World,
    n_pairs: usize,
    rng: &mut LabRng,
) -> Result<AccuracyEstimate> {
    if n_pairs == 0 {
        return input("n_pairs must be at least 1");
    }
    let mut hits = 0.0;
    for _ in 0..n_pairs {
        let x = world.sample_prompt(rng);
        let probs = policy.probs(x)?;
        let mut drawn = None;
        for _ in 0..crate::dataset::RESAMPLE_CAP {
            let a = sample_categorical(&probs, rng);
            let b = sample_categorical(&probs, rng);
            if a != b && gm.prefers_first(x, a, b).is_some() {
                drawn = Some((a, b));
                break;
            }
        }
        let (a, b) = drawn.ok_or_else(|| {
            Error::Construction(format!(
                "policy at prompt {x} is too concentrated to draw a decidable pair"
            ))
        })?;
        let f = classifier_score(policy, reference, x, a, b)?;
        let golden_first = gm.prefers_first(x, a, b).expect("ties were redrawn");
        hits += if f == 0.0 {
            0.5
        } else if (f > 0.0) == golden_first {
            1.0
        } else {
            0.0
        };
    }
    Ok(AccuracyEstimate::new(hits, n_pairs))
}

/// Accuracy of a judge on stream pairs near one position of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamAccuracy {
    /// Training step whose batch holds the window center.
    pub step: usize,
    pub accuracy: f64,
    pub n: usize,
    /// Set when the window had to be clipped at a stream boundary.
    pub truncated: bool,
}

/// Judge accuracy against golden at `n_checkpoints` evenly spaced positions
/// of a run's stream, over a window of `window` pairs around each.
pub fn stream_accuracy<J: PairJudge + ?Sized>(
    judge: &J,
    run: &RunRecord,
    gm: &GoldenPreferenceModel,
    n_checkpoints: usize,
    window: usize,
    rng: &mut LabRng,
) -> Result<Vec<StreamAccuracy>> {
    let mut flat = Vec::new();
    for (i, b) in run.stream.iter().enumerate() {
        for e in &b.examples {
            flat.push((i + 1, (e.prompt, e.winner, e.loser)));
        }
    }
    if flat.is_empty() {
        return input("run has no recorded stream pairs");
    }
    if n_checkpoints == 0 || window == 0 {
        return input("n_checkpoints and window must be positive");
    }
    let n = flat.len();
    let mut out = Vec::with_capacity(n_checkpoints);
    for c in 0..n_checkpoints {
        let center = if n_checkpoints == 1 {
            n / 2
        } else {
            (c as f64 * (n - 1) as f64 / (n_checkpoints - 1) as f64).round() as usize
        };
        let half = window / 2;
        let lo = center as isize - half as isize;
        let hi = lo + window as isize;
        let truncated = lo < 0 || hi > n as isize;
        let (lo, hi) = (lo.max(0) as usize, (hi.min(n as isize)) as usize);
        let pairs: Vec<_> = flat[lo..hi].iter().map(|p| p.1).collect();
        let tally = judge_agreement(judge, &pairs, gm, rng)?;
        out.push(StreamAccuracy {
            step: flat[center].0,
            accuracy: if tally.n == 0 { f64::NAN } else { tally.accuracy() },
            n: tally.n,
            truncated,
        });
    }
    Ok(out)
}

/// Mean `log pi(y_w|x) - log pi_sft(y_w|x)` over a dataset.
pub fn winning_logprob_delta(policy: &TabularPolicy, reference: &ReferencePolicy, ds: &PreferenceDataset) -> Result<f64> {
    if ds.is_empty() {
        return input("winning log-prob delta needs a non-empty dataset");
    }
    let mut total = 0.0;
    for e in ds.examples() {
        total += policy.log_prob(e.prompt, e.winner)? - reference.log_prob(e.prompt, e.winner);
    }
    Ok(total / ds.len() as f64)
}

/// One (KL, win rate) observation of a policy during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub run_id: String,
    pub tag: String,
    pub step: usize,
    pub kl: f64,
    pub win_rate: f64,
}

/// Flattens every evaluated step of every run into trade-off points.
pub fn tradeoff_curve<'a, I>(runs: I) -> Vec<TradeoffPoint>
where
    I: IntoIterator<Item = (&'a str, &'a RunRecord)>,
{
    let mut out = Vec::new();
    for (tag, run) in runs {
        for m in &run.metrics {
            out.push(TradeoffPoint {
                run_id: run.run_id.clone(),
                tag: tag.to_string(),
                step: m.step,
                kl: m.kl,
                win_rate: m.win_rate,
            });
        }
    }
    out
}

/// Snapshot of the evaluation battery for one policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub kl: f64,
    pub win_rate: f64,
    pub cls_acc: f64,
    pub win_logprob_delta: f64,
}

/// Frozen evaluation context shared by every checkpoint of a run.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub world: World,
    pub gm: GoldenPreferenceModel,
    /// Fixed win-rate baseline (the SFT policy).
    pub baseline: ReferencePolicy,
    /// Pairs for classification accuracy and winning log-prob tracking.
    pub eval_set: PreferenceDataset,
    pub config: EvalConfig,
    cls_pairs: Vec<(PromptId, ResponseId, ResponseId)>,
}

impl Evaluator {
    pub fn new(
        world: World,
        gm: GoldenPreferenceModel,
        baseline: ReferencePolicy,
        eval_set: PreferenceDataset,
        config: EvalConfig,
    ) -> Result<Self> {
        if eval_set.is_empty() {
            return input("evaluation set must be non-empty");
        }
        let mut rng = seeded_rng(derive_seed(config.seed, 0xC1A55));
        let cls_pairs = subsample_pairs(&eval_set, config.cls_subsample.max(1), &mut rng);
        Ok(Evaluator {
            world,
            gm,
            baseline,
            eval_set,
            config,
            cls_pairs,
        })
    }

    pub fn cls_pairs(&self) -> &[(PromptId, ResponseId, ResponseId)] {
        &self.cls_pairs
    }

    /// Runs the battery; `salt` decorrelates sampled estimates across steps.
    pub fn evaluate(&self, policy: &TabularPolicy, reference: &ReferencePolicy, salt: u64) -> Result<EvalSnapshot> {
        let mut rng = seeded_rng(derive_seed(self.config.seed, salt));
        let kl = match self.config.kl_mode {
            KlMode::Exact => exact_kl(policy, reference, &self.world.prompt_dist)?,
            KlMode::Sampled => sampled_kl(policy, reference, &self.world, self.config.n_eval_prompts.max(1), &mut rng)?,
        };
        let win = win_rate(policy, &self.baseline, &self.gm, &self.world, &self.config, &mut rng)?;
        let cls_acc = classification_accuracy(policy, reference, &self.cls_pairs, &self.gm).unwrap_or(f64::NAN);
        let wl = winning_logprob_delta(policy, reference, &self.eval_set)?;
        Ok(EvalSnapshot {
            kl,
            win_rate: win,
            cls_acc,
            win_logprob_delta: wl,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProbTable;
    use crate::preference::ProxyPreferenceModel;

    #[test]
    fn kl_zero_for_identical_policies() {
        let reference = ReferencePolicy::from_logits(2, 3, &[0.2, 0.1, -0.3, 1.0, 0.0, 0.5]).unwrap();
        let pol = TabularPolicy::from_reference(&reference);
        let kl = exact_kl(&pol, &reference, &[0.5, 0.5]).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_two_arm_value() {
        let reference = ReferencePolicy::uniform(1, 2);
        let pol = ProbTable::new(1, 2, vec![0.8, 0.2]).unwrap();
        let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((exact_kl(&pol, &reference, &[1.0]).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.19274).abs() < 1e-5);
    }

    #[test]
    fn kl_ignores_zero_probability_terms() {
        let reference = ReferencePolicy::uniform(1, 3);
        let pol = ProbTable::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((exact_kl(&pol, &reference, &[1.0]).unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn stratified_estimator_equals_exact_for_uniform_prompts() {
        let world = World::new(4, 3, 0).unwrap();
        let reference = ReferencePolicy::uniform(4, 3);
        let pol = TabularPolicy::from_logits(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = stratified_kl(&pol, &reference).unwrap();
        let b = exact_kl(&pol, &reference, &world.prompt_dist).unwrap();
        assert!((a - b).abs() < 1e-12);
        let mut rng = seeded_rng(0);
        assert_eq!(sampled_kl(&reference, &reference, &world, 10, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn self_win_rate_is_one_half_when_enumerated() {
        let world = World::new(3, 4, 0).unwrap();
        let gm = GoldenPreferenceModel::random(&world, 2.0, 1).unwrap();
        let pol = TabularPolicy::from_logits(3, 4, (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let w = exhaustive_win_rate(&pol, &pol, &gm, &world, WinMode::Soft).unwrap();
        assert!((w - 0.5).abs() < 1e-15);
        let h = exhaustive_win_rate(&pol, &pol, &gm, &world, WinMode::Hard).unwrap();
        assert!((h - 0.5).abs() < 1e-15);
    }

    #[test]
    fn point_mass_win_rate() {
        let world = World::new(1, 3, 0).unwrap();
        let gm = GoldenPreferenceModel::new(1, 3, vec![2.0, 0.5, -1.0]).unwrap();
        let best = ProbTable::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let worst = ProbTable::new(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let cfg = EvalConfig {
            exhaustive: false,
            n_eval_prompts: 50,
            ..Default::default()
        };
        let w = win_rate(&best, &worst, &gm, &world, &cfg, &mut seeded_rng(0)).unwrap();
        assert!((w - crate::preference::sigmoid(3.0)).abs() < 1e-12);
    }

    #[test]
    fn classifier_score_identities() {
        let reference = ReferencePolicy::from_logits(1, 3, &[0.3, -0.1, 0.0]).unwrap();
        let at_ref = TabularPolicy::from_reference(&reference);
        assert_eq!(classifier_score(&at_ref, &reference, 0, 0, 2).unwrap(), 0.0);
        let pol = TabularPolicy::from_logits(1, 3, vec![1.3, 0.1, -2.0]).unwrap();
        let f = classifier_score(&pol, &reference, 0, 0, 2).unwrap();
        assert_eq!(f, -classifier_score(&pol, &reference, 0, 2, 0).unwrap());
        let h = crate::losses::logratio_margin(&pol, &reference, 0, 0, 2).unwrap();
        assert!((f - h).abs() < 1e-12);
    }

    #[test]
    fn accuracy_at_reference_is_one_half() {
        let world = World::new(2, 4, 0).unwrap();
        let gm = GoldenPreferenceModel::random(&world, 1.0, 2).unwrap();
        let reference = ReferencePolicy::from_logits(2, 4, &[0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 1.0, -1.0]).unwrap();
        let pol = TabularPolicy::from_reference(&reference);
        let pairs: Vec<_> = (0..2).flat_map(|x| (0..4).flat_map(move |a| (0..4).filter(move |&b| b != a).map(move |b| (x, a, b)))).collect();
        assert_eq!(classification_accuracy(&pol, &reference, &pairs, &gm).unwrap(), 0.5);
        let est = self_classification_accuracy(&pol, &reference, &gm, &world, 200, &mut seeded_rng(1)).unwrap();
        assert_eq!(est.accuracy, 0.5);
    }

    #[test]
    fn golden_judge_stream_accuracy_is_perfect() {
        use crate::dataset::LabeledPair;
        use crate::losses::{Batch, BatchSource};
        let world = World::new(2, 4, 0).unwrap();
        let gm = GoldenPreferenceModel::random(&world, 1.0, 3).unwrap();
        let mut rng = seeded_rng(2);
        let stream: Vec<Batch> = (0..20)
            .map(|_| {
                let ex = (0..4)
                    .map(|_| {
                        let x = rng.random_range(0..2);
                        let a = rng.random_range(0..4);
                        let b = (a + rng.random_range(1..4)) % 4;
                        LabeledPair { prompt: x, winner: a, loser: b, label_margin: 0.0 }
                    })
                    .collect();
                Batch::new(ex, BatchSource::Online).unwrap()
            })
            .collect();
        let run = RunRecord::for_stream("s", stream);
        let acc = stream_accuracy(&gm, &run, &gm, 5, 16, &mut rng).unwrap();
        assert_eq!(acc.len(), 5);
        assert!(acc.iter().all(|a| a.accuracy == 1.0));
        assert!(acc[0].truncated && acc[4].truncated && !acc[2].truncated);

        let coin = stream_accuracy(&CoinFlipJudge, &run, &gm, 1, 80, &mut rng).unwrap();
        assert!((coin[0].accuracy - 0.5).abs() < 0.25);
        let pm = ProxyPreferenceModel::pointwise(2, 4, gm.utilities.clone(), 0.0).unwrap();
        let acc = stream_accuracy(&pm, &run, &gm, 3, 10, &mut rng).unwrap();
        assert!(acc.iter().all(|a| a.accuracy == 1.0));
    }

    #[test]
    fn winning_logprob_delta_signs() {
        use crate::dataset::{LabeledPair, Provenance};
        let reference = ReferencePolicy::uniform(1, 3);
        let ds = PreferenceDataset::new(
            vec![LabeledPair { prompt: 0, winner: 1, loser: 0, label_margin: 0.0 }],
            Provenance::Golden { seed: 0 },
            None,
        )
        .unwrap();
        let at_ref = TabularPolicy::from_reference(&reference);
        assert!(winning_logprob_delta(&at_ref, &reference, &ds).unwrap().abs() < 1e-15);
        let peaked = TabularPolicy::from_logits(1, 3, vec![-30.0, 0.0, -30.0]).unwrap();
        assert!(winning_logprob_delta(&peaked, &reference, &ds).unwrap() > 0.0);
    }
}
