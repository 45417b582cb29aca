//! Contrastive (IPO, DPO) and best-of-two losses over tabular policies, with
//! closed-form gradients through the softmax.
//!
//! Every contrastive loss is a function of the reference-relative margin
//!
//! ```text
//! h = [log pi(y_w|x) - log pi_sft(y_w|x)] - [log pi(y_l|x) - log pi_sft(y_l|x)]
//! ```
//!
//! whose derivative with respect to the logits of prompt `x` is `+1` at
//! `y_w`, `-1` at `y_l`, and zero elsewhere (the softmax normalizer cancels).

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledPair;
use crate::error::{input, Result};
use crate::model::{log_softmax, PromptId, ReferencePolicy, ResponseId, TabularPolicy};
use crate::preference::{sigmoid, softplus};

/// Loss family used by a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum LossKind {
    /// `(h - beta/2)^2`.
    #[default]
    #[serde(rename = "ipo-eq1")]
    IpoEq1,
    /// `(beta*h - 1/2)^2`.
    #[serde(rename = "ipo-appb")]
    IpoAppB,
    /// `log(1 + exp(-beta*h))`.
    #[serde(rename = "dpo")]
    Dpo,
    /// `-log pi(y_w|x)`; no reference policy involved.
    #[serde(rename = "bo2")]
    Bo2,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::IpoEq1 => "ipo-eq1",
            LossKind::IpoAppB => "ipo-appb",
            LossKind::Dpo => "dpo",
            LossKind::Bo2 => "bo2",
        }
    }

    pub fn is_contrastive(self) -> bool {
        !matches!(self, LossKind::Bo2)
    }

    /// Per-example contrastive loss as a function of the margin `h`.
    pub fn contrastive_value(self, beta: f64, h: f64) -> f64 {
        match self {
            LossKind::IpoEq1 => {
                let z = h - 0.5 * beta;
                z * z
            }
            LossKind::IpoAppB => {
                let z = beta * h - 0.5;
                z * z
            }
            LossKind::Dpo => softplus(-beta * h),
            LossKind::Bo2 => f64::NAN,
        }
    }

    /// Derivative of [`Self::contrastive_value`] with respect to `h`.
    pub fn contrastive_slope(self, beta: f64, h: f64) -> f64 {
        match self {
            LossKind::IpoEq1 => 2.0 * (h - 0.5 * beta),
            LossKind::IpoAppB => 2.0 * beta * (beta * h - 0.5),
            LossKind::Dpo => -beta * sigmoid(-beta * h),
            LossKind::Bo2 => f64::NAN,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipo-eq1" | "ipo" => Ok(LossKind::IpoEq1),
            "ipo-appb" => Ok(LossKind::IpoAppB),
            "dpo" => Ok(LossKind::Dpo),
            "bo2" => Ok(LossKind::Bo2),
            other => input(format!("unknown loss kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSource {
    Online,
    Dataset,
}

/// Labeled pairs consumed by one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub examples: Vec<LabeledPair>,
    pub source: BatchSource,
}

impl Batch {
    pub fn new(examples: Vec<LabeledPair>, source: BatchSource) -> Result<Self> {
        if let Some(i) = examples.iter().position(|e| e.winner == e.loser) {
            return input(format!("batch example {i} compares a response with itself"));
        }
        Ok(Batch { examples, source })
    }

    pub fn from_triples(triples: &[(PromptId, ResponseId, ResponseId)], source: BatchSource) -> Result<Self> {
        Self::new(
            triples
                .iter()
                .map(|&(x, w, l)| LabeledPair {
                    prompt: x,
                    winner: w,
                    loser: l,
                    label_margin: 0.0,
                })
                .collect(),
            source,
        )
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Loss value, parameter gradient and batch diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Same layout as [`TabularPolicy::params`].
    pub gradient: Vec<f64>,
    /// Mean reference-relative margin `h` over the batch.
    pub mean_margin: f64,
    /// Mean `log pi(y_w|x) - log pi_sft(y_w|x)` over the batch.
    pub win_logprob_delta: f64,
}

fn check_ids(policy: &TabularPolicy, x: PromptId, y1: ResponseId, y2: ResponseId) -> Result<()> {
    if x >= policy.n_prompts() || y1 >= policy.n_responses() || y2 >= policy.n_responses() {
        return input(format!("ids (x={x}, y1={y1}, y2={y2}) out of range"));
    }
    Ok(())
}

/// Reference-relative log-ratio margin of `y_w` over `y_l`.
pub fn logratio_margin(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    x: PromptId,
    y_w: ResponseId,
    y_l: ResponseId,
) -> Result<f64> {
    check_ids(policy, x, y_w, y_l)?;
    let logits = policy.logits_row(x);
    Ok(margin_from_logits(&logits, reference, x, y_w, y_l))
}

/// The softmax normalizer cancels in `h`, so it is computed from raw logit
/// differences; this keeps `h` exactly zero when the policy logits are the
/// reference log-probabilities.
#[inline]
fn margin_from_logits(logits: &[f64], reference: &ReferencePolicy, x: PromptId, y_w: ResponseId, y_l: ResponseId) -> f64 {
    (logits[y_w] - logits[y_l]) - (reference.log_prob(x, y_w) - reference.log_prob(x, y_l))
}

fn check_batch(policy: &TabularPolicy, reference: Option<&ReferencePolicy>, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return input("loss needs a non-empty batch");
    }
    if let Some(r) = reference {
        if r.table().n_prompts != policy.n_prompts() || r.table().n_responses != policy.n_responses() {
            return input("reference shape does not match policy");
        }
    }
    for e in &batch.examples {
        check_ids(policy, e.prompt, e.winner, e.loser)?;
    }
    Ok(())
}

/// Contrastive loss of the given kind, averaged over the batch.
pub fn contrastive_loss_and_grad(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    batch: &Batch,
    beta: f64,
    kind: LossKind,
) -> Result<LossReport> {
    if !kind.is_contrastive() {
        return input(format!("{} is not a contrastive loss", kind.name()));
    }
    if !(beta > 0.0) {
        return input("beta must be positive");
    }
    check_batch(policy, Some(reference), batch)?;
    let r = policy.n_responses();
    let n = batch.len() as f64;
    let mut logit_grad = vec![0.0; policy.n_prompts() * r];
    let (mut value, mut margin_sum, mut win_sum) = (0.0, 0.0, 0.0);
    let mut cache = RowCache::default();
    for e in &batch.examples {
        let (logits, lp) = cache.get(policy, e.prompt);
        let h = margin_from_logits(logits, reference, e.prompt, e.winner, e.loser);
        let dw = lp[e.winner] - reference.log_prob(e.prompt, e.winner);
        value += kind.contrastive_value(beta, h);
        let g = kind.contrastive_slope(beta, h) / n;
        logit_grad[e.prompt * r + e.winner] += g;
        logit_grad[e.prompt * r + e.loser] -= g;
        margin_sum += h;
        win_sum += dw;
    }
    Ok(LossReport {
        value: value / n,
        gradient: policy.pull_back(&logit_grad),
        mean_margin: margin_sum / n,
        win_logprob_delta: win_sum / n,
    })
}

/// IPO loss in its main-text parameterization, `(h - beta/2)^2`.
pub fn ipo_loss_and_grad(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    batch: &Batch,
    beta: f64,
) -> Result<LossReport> {
    contrastive_loss_and_grad(policy, reference, batch, beta, LossKind::IpoEq1)
}

/// Negative log-likelihood of the winners.
///
/// `reference` feeds only the reported margin diagnostics.
pub fn bo2_loss_and_grad(policy: &TabularPolicy, reference: &ReferencePolicy, batch: &Batch) -> Result<LossReport> {
    check_batch(policy, Some(reference), batch)?;
    let r = policy.n_responses();
    let n = batch.len() as f64;
    let mut logit_grad = vec![0.0; policy.n_prompts() * r];
    let (mut value, mut margin_sum, mut win_sum) = (0.0, 0.0, 0.0);
    let mut cache = RowCache::default();
    for e in &batch.examples {
        let (logits, lp) = cache.get(policy, e.prompt);
        value -= lp[e.winner];
        let row = &mut logit_grad[e.prompt * r..(e.prompt + 1) * r];
        for (g, l) in row.iter_mut().zip(lp) {
            *g += l.exp() / n;
        }
        row[e.winner] -= 1.0 / n;
        margin_sum += margin_from_logits(logits, reference, e.prompt, e.winner, e.loser);
        win_sum += lp[e.winner] - reference.log_prob(e.prompt, e.winner);
    }
    Ok(LossReport {
        value: value / n,
        gradient: policy.pull_back(&logit_grad),
        mean_margin: margin_sum / n,
        win_logprob_delta: win_sum / n,
    })
}

/// Dispatches on `kind`; `beta` is ignored for Bo2.
pub fn loss_and_grad(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    batch: &Batch,
    kind: LossKind,
    beta: f64,
) -> Result<LossReport> {
    match kind {
        LossKind::Bo2 => bo2_loss_and_grad(policy, reference, batch),
        _ => contrastive_loss_and_grad(policy, reference, batch, beta, kind),
    }
}

/// Loss value only, for finite-difference checks and line searches.
pub fn loss_value(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    batch: &Batch,
    kind: LossKind,
    beta: f64,
) -> Result<f64> {
    check_batch(policy, Some(reference), batch)?;
    let n = batch.len() as f64;
    let mut cache = RowCache::default();
    let mut value = 0.0;
    for e in &batch.examples {
        let (logits, lp) = cache.get(policy, e.prompt);
        value += match kind {
            LossKind::Bo2 => -lp[e.winner],
            _ => kind.contrastive_value(beta, margin_from_logits(logits, reference, e.prompt, e.winner, e.loser)),
        };
    }
    Ok(value / n)
}

/// Memoizes `(logits, log-softmax)` rows within one batch evaluation.
#[derive(Default)]
struct RowCache {
    rows: std::collections::HashMap<PromptId, (Vec<f64>, Vec<f64>)>,
}

impl RowCache {
    fn get(&mut self, policy: &TabularPolicy, x: PromptId) -> (&[f64], &[f64]) {
        let (l, lp) = self.rows.entry(x).or_insert_with(|| {
            let logits = policy.logits_row(x);
            let lp = log_softmax(&logits);
            (logits, lp)
        });
        (l, lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{seeded_rng, ReferencePolicy};
    use rand::Rng;

    fn triple_batch(t: &[(usize, usize, usize)]) -> Batch {
        Batch::from_triples(t, BatchSource::Dataset).unwrap()
    }

    fn random_reference(p: usize, r: usize, seed: u64) -> ReferencePolicy {
        let mut rng = seeded_rng(seed);
        let logits: Vec<f64> = (0..p * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        ReferencePolicy::from_logits(p, r, &logits).unwrap()
    }

    #[test]
    fn margin_zero_at_reference_and_antisymmetric() {
        let reference = random_reference(2, 4, 1);
        let at_ref = TabularPolicy::from_reference(&reference);
        assert_eq!(logratio_margin(&at_ref, &reference, 1, 0, 3).unwrap(), 0.0);
        let pol = TabularPolicy::from_logits(2, 4, vec![0.3, -0.2, 1.0, 0.0, 0.5, 0.5, -1.0, 2.0]).unwrap();
        let a = logratio_margin(&pol, &reference, 1, 2, 3).unwrap();
        let b = logratio_margin(&pol, &reference, 1, 3, 2).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn margin_is_one_for_e_scaled_ratio() {
        let reference = ReferencePolicy::uniform(1, 3);
        // pi(0)/pi(1) = e while the reference ratio is 1
        let pol = TabularPolicy::from_logits(1, 3, vec![1.0, 0.0, 0.4]).unwrap();
        assert!((logratio_margin(&pol, &reference, 0, 0, 1).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn values_at_reference() {
        let reference = random_reference(2, 5, 2);
        let pol = TabularPolicy::from_reference(&reference);
        let batch = triple_batch(&[(0, 1, 2), (1, 4, 0), (1, 3, 2)]);
        let ipo = ipo_loss_and_grad(&pol, &reference, &batch, 0.1).unwrap();
        assert!((ipo.value - 0.0025).abs() < 1e-15);
        let dpo = contrastive_loss_and_grad(&pol, &reference, &batch, 0.7, LossKind::Dpo).unwrap();
        assert!((dpo.value - std::f64::consts::LN_2).abs() < 1e-14);
        let appb = contrastive_loss_and_grad(&pol, &reference, &batch, 3.0, LossKind::IpoAppB).unwrap();
        assert!((appb.value - 0.25).abs() < 1e-14);
    }

    #[test]
    fn bo2_on_uniform_and_point_mass() {
        let reference = ReferencePolicy::uniform(1, 4);
        let uniform = TabularPolicy::uniform(1, 4);
        let batch = triple_batch(&[(0, 2, 1), (0, 2, 3)]);
        let v = bo2_loss_and_grad(&uniform, &reference, &batch).unwrap().value;
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let peaked = TabularPolicy::from_logits(1, 4, vec![-40.0, -40.0, 0.0, -40.0]).unwrap();
        assert!(bo2_loss_and_grad(&peaked, &reference, &batch).unwrap().value < 1e-16);
    }

    #[test]
    fn ipo_minimizer_contributes_no_gradient() {
        let reference = ReferencePolicy::uniform(1, 3);
        let beta = 0.4;
        let pol = TabularPolicy::from_logits(1, 3, vec![0.2, 0.0, 0.0]).unwrap();
        let batch = triple_batch(&[(0, 0, 1)]);
        let rep = ipo_loss_and_grad(&pol, &reference, &batch, beta).unwrap();
        assert!(rep.value < 1e-30);
        assert!(rep.gradient.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn eq1_and_appb_coincide_at_unit_beta() {
        let mut rng = seeded_rng(12);
        for _ in 0..20 {
            let reference = random_reference(3, 4, rng.random());
            let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let pol = TabularPolicy::from_logits(3, 4, logits).unwrap();
            let triples: Vec<_> = (0..6)
                .map(|_| {
                    let x = rng.random_range(0..3);
                    let w = rng.random_range(0..4);
                    (x, w, (w + rng.random_range(1..4)) % 4)
                })
                .collect();
            let batch = triple_batch(&triples);
            let a = contrastive_loss_and_grad(&pol, &reference, &batch, 1.0, LossKind::IpoEq1).unwrap();
            let b = contrastive_loss_and_grad(&pol, &reference, &batch, 1.0, LossKind::IpoAppB).unwrap();
            assert!((a.value - b.value).abs() < 1e-12);
            for (u, v) in a.gradient.iter().zip(&b.gradient) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let reference = ReferencePolicy::uniform(1, 3);
        let pol = TabularPolicy::uniform(1, 3);
        let empty = Batch::new(vec![], BatchSource::Online).unwrap();
        assert!(ipo_loss_and_grad(&pol, &reference, &empty, 0.1).is_err());
        let b = triple_batch(&[(0, 0, 1)]);
        assert!(ipo_loss_and_grad(&pol, &reference, &b, 0.0).is_err());
        assert!(contrastive_loss_and_grad(&pol, &reference, &b, 0.1, LossKind::Bo2).is_err());
        assert!("slic".parse::<LossKind>().is_err());
        assert!(Batch::from_triples(&[(0, 1, 1)], BatchSource::Online).is_err());
    }

    #[test]
    fn loss_value_matches_report() {
        let reference = random_reference(2, 3, 4);
        let pol = TabularPolicy::from_logits(2, 3, vec![0.1, 0.9, -0.3, 0.0, 1.0, 2.0]).unwrap();
        let batch = triple_batch(&[(0, 1, 2), (1, 0, 2)]);
        for kind in [LossKind::IpoEq1, LossKind::IpoAppB, LossKind::Dpo, LossKind::Bo2] {
            let rep = loss_and_grad(&pol, &reference, &batch, kind, 0.3).unwrap();
            let v = loss_value(&pol, &reference, &batch, kind, 0.3).unwrap();
            assert!((rep.value - v).abs() < 1e-15);
        }
    }
}
