//! Golden (ground-truth) and proxy (learned) preference models.
//!
//! The golden model is Bradley–Terry over per-prompt latent utilities. The
//! proxy is fitted on golden-labeled pairs with the order-randomized
//! likelihood and judges pairs by the sign of `r(x,y1,y2) - r(x,y2,y1)`,
//! which cancels any positional bias.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceDataset;
use crate::error::{input, Error, Result};
use crate::model::{seeded_rng, LabRng, PromptId, ResponseId, World};

/// Logistic function with the usual two-branch evaluation.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log sigmoid(z)` without overflow.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// How a golden label is drawn from the preference probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Winner drawn with the golden probability.
    #[default]
    Bernoulli,
    /// Higher-probability side wins; exact ties go to a seeded coin.
    Argmax,
}

/// Outcome of comparing two responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceJudgment {
    pub winner: ResponseId,
    pub loser: ResponseId,
    /// Score difference the decision was based on.
    pub margin: f64,
    /// Set when the decision came from a coin flip.
    pub tie_broken: bool,
}

impl PreferenceJudgment {
    fn decide(y1: ResponseId, y2: ResponseId, first_wins: bool, margin: f64, tie_broken: bool) -> Self {
        let (winner, loser) = if first_wins { (y1, y2) } else { (y2, y1) };
        PreferenceJudgment {
            winner,
            loser,
            margin,
            tie_broken,
        }
    }
}

/// Anything that can decide which of two responses is preferred.
pub trait PairJudge {
    fn judge(&self, x: PromptId, y1: ResponseId, y2: ResponseId, rng: &mut LabRng) -> Result<PreferenceJudgment>;
}

/// Bradley–Terry ground truth: `p(y1 > y2 | x) = sigmoid(u(x,y1) - u(x,y2))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenPreferenceModel {
    pub n_prompts: usize,
    pub n_responses: usize,
    /// Row-major `[P x R]` utilities.
    pub utilities: Vec<f64>,
}

impl GoldenPreferenceModel {
    pub fn new(n_prompts: usize, n_responses: usize, utilities: Vec<f64>) -> Result<Self> {
        if utilities.len() != n_prompts * n_responses {
            return input("utility table has the wrong number of entries");
        }
        if utilities.iter().any(|u| !u.is_finite()) {
            return input("utilities must be finite");
        }
        Ok(GoldenPreferenceModel {
            n_prompts,
            n_responses,
            utilities,
        })
    }

    /// Utilities drawn i.i.d. from `N(0, scale^2)`.
    pub fn random(world: &World, scale: f64, seed: u64) -> Result<Self> {
        if !(scale >= 0.0) {
            return input("utility scale must be nonnegative");
        }
        let mut rng = seeded_rng(seed);
        let utilities = (0..world.n_prompts * world.n_responses)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self::new(world.n_prompts, world.n_responses, utilities)
    }

    fn check(&self, x: PromptId, y1: ResponseId, y2: ResponseId) -> Result<()> {
        if x >= self.n_prompts || y1 >= self.n_responses || y2 >= self.n_responses {
            return input(format!("ids (x={x}, y1={y1}, y2={y2}) out of range"));
        }
        Ok(())
    }

    #[inline]
    pub fn utility(&self, x: PromptId, y: ResponseId) -> f64 {
        self.utilities[x * self.n_responses + y]
    }

    /// Preference probability without bounds checks.
    ///
    /// Evaluated on the nonnegative-gap branch and complemented otherwise, so
    /// `pref(y1,y2) + pref(y2,y1) == 1` holds exactly in floating point.
    #[inline]
    pub fn pref_unchecked(&self, x: PromptId, y1: ResponseId, y2: ResponseId) -> f64 {
        let d = self.utility(x, y1) - self.utility(x, y2);
        if d >= 0.0 {
            1.0 / (1.0 + (-d).exp())
        } else {
            1.0 - 1.0 / (1.0 + d.exp())
        }
    }

    pub fn pref(&self, x: PromptId, y1: ResponseId, y2: ResponseId) -> Result<f64> {
        self.check(x, y1, y2)?;
        Ok(self.pref_unchecked(x, y1, y2))
    }

    /// `Some(true)` when `y1` has strictly higher utility, `None` on a tie.
    #[inline]
    pub fn prefers_first(&self, x: PromptId, y1: ResponseId, y2: ResponseId) -> Option<bool> {
        let (a, b) = (self.utility(x, y1), self.utility(x, y2));
        if a == b {
            None
        } else {
            Some(a > b)
        }
    }

    /// Draws a golden label for the pair.
    pub fn sample_label(
        &self,
        x: PromptId,
        y1: ResponseId,
        y2: ResponseId,
        rng: &mut LabRng,
        mode: LabelMode,
    ) -> Result<PreferenceJudgment> {
        let p = self.pref(x, y1, y2)?;
        let margin = p - (1.0 - p);
        Ok(match mode {
            LabelMode::Bernoulli => {
                let u: f64 = rng.random();
                PreferenceJudgment::decide(y1, y2, u < p, margin, false)
            }
            LabelMode::Argmax => match self.prefers_first(x, y1, y2) {
                Some(first) => PreferenceJudgment::decide(y1, y2, first, margin, false),
                None => PreferenceJudgment::decide(y1, y2, rng.random::<bool>(), margin, true),
            },
        })
    }

    /// Probability that `y` beats a draw from `mu` at prompt `x`; the self
    /// pair contributes 0.5.
    pub fn win_against(&self, x: PromptId, y: ResponseId, mu: &[f64]) -> f64 {
        mu.iter()
            .enumerate()
            .map(|(yp, &m)| if m == 0.0 { 0.0 } else { m * self.pref_unchecked(x, y, yp) })
            .sum()
    }
}

impl PairJudge for GoldenPreferenceModel {
    /// Golden argmax judgment.
    fn judge(&self, x: PromptId, y1: ResponseId, y2: ResponseId, rng: &mut LabRng) -> Result<PreferenceJudgment> {
        self.sample_label(x, y1, y2, rng, LabelMode::Argmax)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyMode {
    /// `r = sigmoid(u(x,y1) - u(x,y2) + b)`.
    #[default]
    PointwiseUtility,
    /// `r = sigmoid(t(x,y1,y2) + b)` with a free table entry per ordered pair.
    PairwiseTable,
}

/// Learned preference model with an explicit positional bias `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyPreferenceModel {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub mode: ProxyMode,
    /// `[P x R]` utilities or `[P x R x R]` pair scores, row-major.
    pub params: Vec<f64>,
    pub position_bias: f64,
}

impl ProxyPreferenceModel {
    pub fn zeros(n_prompts: usize, n_responses: usize, mode: ProxyMode) -> Self {
        let n = match mode {
            ProxyMode::PointwiseUtility => n_prompts * n_responses,
            ProxyMode::PairwiseTable => n_prompts * n_responses * n_responses,
        };
        ProxyPreferenceModel {
            n_prompts,
            n_responses,
            mode,
            params: vec![0.0; n],
            position_bias: 0.0,
        }
    }

    pub fn pointwise(n_prompts: usize, n_responses: usize, utilities: Vec<f64>, position_bias: f64) -> Result<Self> {
        if utilities.len() != n_prompts * n_responses {
            return input("utility table has the wrong number of entries");
        }
        Ok(ProxyPreferenceModel {
            n_prompts,
            n_responses,
            mode: ProxyMode::PointwiseUtility,
            params: utilities,
            position_bias,
        })
    }

    pub fn pairwise(n_prompts: usize, n_responses: usize, table: Vec<f64>, position_bias: f64) -> Result<Self> {
        if table.len() != n_prompts * n_responses * n_responses {
            return input("pair table has the wrong number of entries");
        }
        Ok(ProxyPreferenceModel {
            n_prompts,
            n_responses,
            mode: ProxyMode::PairwiseTable,
            params: table,
            position_bias,
        })
    }

    fn check(&self, x: PromptId, y1: ResponseId, y2: ResponseId) -> Result<()> {
        if x >= self.n_prompts || y1 >= self.n_responses || y2 >= self.n_responses {
            return input(format!("ids (x={x}, y1={y1}, y2={y2}) out of range"));
        }
        Ok(())
    }

    /// Pre-bias logit for the ordered pair.
    #[inline]
    fn score(&self, x: PromptId, y1: ResponseId, y2: ResponseId) -> f64 {
        let r = self.n_responses;
        match self.mode {
            ProxyMode::PointwiseUtility => self.params[x * r + y1] - self.params[x * r + y2],
            ProxyMode::PairwiseTable => self.params[(x * r + y1) * r + y2],
        }
    }

    /// Raw prediction `r(x, y1, y2)` in `(0, 1)`.
    pub fn raw(&self, x: PromptId, y1: ResponseId, y2: ResponseId) -> Result<f64> {
        self.check(x, y1, y2)?;
        Ok(sigmoid(self.score(x, y1, y2) + self.position_bias))
    }

    /// Sign-difference judgment: `y1` wins iff `r(x,y1,y2) > r(x,y2,y1)`.
    ///
    /// The sign is read from the score difference, which the logistic link
    /// preserves, so saturated predictions never masquerade as ties.
    pub fn judge_pair(&self, x: PromptId, y1: ResponseId, y2: ResponseId, rng: &mut LabRng) -> Result<PreferenceJudgment> {
        self.check(x, y1, y2)?;
        let s12 = self.score(x, y1, y2);
        let s21 = self.score(x, y2, y1);
        let b = self.position_bias;
        let margin = sigmoid(s12 + b) - sigmoid(s21 + b);
        Ok(if s12 == s21 {
            PreferenceJudgment::decide(y1, y2, rng.random::<bool>(), margin, true)
        } else {
            PreferenceJudgment::decide(y1, y2, s12 > s21, margin, false)
        })
    }

    fn param_inf_norm(&self) -> f64 {
        self.params
            .iter()
            .chain(std::iter::once(&self.position_bias))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

impl PairJudge for ProxyPreferenceModel {
    fn judge(&self, x: PromptId, y1: ResponseId, y2: ResponseId, rng: &mut LabRng) -> Result<PreferenceJudgment> {
        self.judge_pair(x, y1, y2, rng)
    }
}

/// Hyper-parameters for [`train_proxy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyTrainConfig {
    pub mode: ProxyMode,
    pub learning_rate: f64,
    pub steps: usize,
    /// L2 coefficient on all parameters including the bias.
    pub l2: f64,
    pub seed: u64,
    /// Training stops (flagged) when any parameter exceeds this in magnitude.
    pub param_cap: f64,
    /// `None` for full-batch ascent.
    pub minibatch: Option<usize>,
    /// Steps between training-accuracy trace entries.
    pub trace_every: usize,
}

impl Default for ProxyTrainConfig {
    fn default() -> Self {
        ProxyTrainConfig {
            mode: ProxyMode::PointwiseUtility,
            learning_rate: 1.0,
            steps: 500,
            l2: 1e-3,
            seed: 0,
            param_cap: 1e3,
            minibatch: None,
            trace_every: 10,
        }
    }
}

/// Result of [`train_proxy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyFit {
    pub model: ProxyPreferenceModel,
    /// `(step, training accuracy)`; ties count one half.
    pub accuracy_trace: Vec<(usize, f64)>,
    /// Regularized objective (to be maximized) after each step.
    pub objective_trace: Vec<f64>,
    pub steps_run: usize,
    /// Set when the parameter cap stopped training.
    pub diverged: bool,
}

/// Order-randomized log-likelihood minus `l2 * ||params||^2`, averaged over
/// `indices`.
pub fn proxy_objective(model: &ProxyPreferenceModel, dataset: &PreferenceDataset, l2: f64) -> f64 {
    let ex = dataset.examples();
    let ll: f64 = ex
        .iter()
        .map(|e| {
            let a = model.score(e.prompt, e.winner, e.loser) + model.position_bias;
            let c = model.score(e.prompt, e.loser, e.winner) + model.position_bias;
            0.5 * log_sigmoid(a) + 0.5 * log_sigmoid(-c)
        })
        .sum::<f64>()
        / ex.len() as f64;
    let sq: f64 = model.params.iter().map(|v| v * v).sum::<f64>() + model.position_bias * model.position_bias;
    ll - l2 * sq
}

fn proxy_gradient(model: &ProxyPreferenceModel, dataset: &PreferenceDataset, idx: &[usize], l2: f64) -> (Vec<f64>, f64) {
    let r = model.n_responses;
    let mut g = vec![0.0; model.params.len()];
    let mut gb = 0.0;
    let ex = dataset.examples();
    let scale = 1.0 / idx.len() as f64;
    for &i in idx {
        let e = &ex[i];
        let a = model.score(e.prompt, e.winner, e.loser) + model.position_bias;
        let c = model.score(e.prompt, e.loser, e.winner) + model.position_bias;
        let da = 0.5 * (1.0 - sigmoid(a));
        let dc = -0.5 * sigmoid(c);
        gb += (da + dc) * scale;
        match model.mode {
            ProxyMode::PointwiseUtility => {
                // a = d + b, c = -d + b with d = u_w - u_l
                let dd = (da - dc) * scale;
                g[e.prompt * r + e.winner] += dd;
                g[e.prompt * r + e.loser] -= dd;
            }
            ProxyMode::PairwiseTable => {
                g[(e.prompt * r + e.winner) * r + e.loser] += da * scale;
                g[(e.prompt * r + e.loser) * r + e.winner] += dc * scale;
            }
        }
    }
    for (gi, p) in g.iter_mut().zip(&model.params) {
        *gi -= 2.0 * l2 * p;
    }
    gb -= 2.0 * l2 * model.position_bias;
    (g, gb)
}

fn training_accuracy(model: &ProxyPreferenceModel, dataset: &PreferenceDataset) -> f64 {
    let ex = dataset.examples();
    let hits: f64 = ex
        .iter()
        .map(|e| {
            let s12 = model.score(e.prompt, e.winner, e.loser);
            let s21 = model.score(e.prompt, e.loser, e.winner);
            if s12 > s21 {
                1.0
            } else if s12 == s21 {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    hits / ex.len() as f64
}

/// Fits a proxy by gradient ascent on the order-randomized likelihood.
///
/// Deterministic given the config seed. With `minibatch = None` every step
/// uses the full dataset.
pub fn train_proxy(world: &World, dataset: &PreferenceDataset, config: &ProxyTrainConfig) -> Result<ProxyFit> {
    if dataset.is_empty() {
        return input("cannot train a proxy on an empty dataset");
    }
    if !(config.learning_rate > 0.0) || !(config.l2 >= 0.0) || !(config.param_cap > 0.0) {
        return Err(Error::Config("proxy learning rate and cap must be positive, l2 nonnegative".into()));
    }
    for e in dataset.examples() {
        world.check_pair(e.prompt, e.winner, e.loser)?;
    }
    let mut model = ProxyPreferenceModel::zeros(world.n_prompts, world.n_responses, config.mode);
    let mut rng = seeded_rng(config.seed);
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let trace_every = config.trace_every.max(1);
    let mut fit = ProxyFit {
        model: model.clone(),
        accuracy_trace: vec![(0, training_accuracy(&model, dataset))],
        objective_trace: Vec::with_capacity(config.steps),
        steps_run: 0,
        diverged: false,
    };
    let all: Vec<usize> = (0..n).collect();
    for step in 1..=config.steps {
        let idx: &[usize] = match config.minibatch {
            None => &all,
            Some(mb) => {
                let mb = mb.clamp(1, n);
                if cursor + mb > n {
                    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                    cursor = 0;
                }
                cursor += mb;
                &order[cursor - mb..cursor]
            }
        };
        let (g, gb) = proxy_gradient(&model, dataset, idx, config.l2);
        for (p, gi) in model.params.iter_mut().zip(&g) {
            *p += config.learning_rate * gi;
        }
        model.position_bias += config.learning_rate * gb;
        fit.steps_run = step;
        fit.objective_trace.push(proxy_objective(&model, dataset, config.l2));
        if step % trace_every == 0 || step == config.steps {
            fit.accuracy_trace.push((step, training_accuracy(&model, dataset)));
        }
        if model.param_inf_norm() > config.param_cap {
            fit.diverged = true;
            if fit.accuracy_trace.last().map(|t| t.0) != Some(step) {
                fit.accuracy_trace.push((step, training_accuracy(&model, dataset)));
            }
            break;
        }
    }
    fit.model = model;
    Ok(fit)
}

/// Agreement tally between a judge and the golden argmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub correct: f64,
    /// Pairs counted (golden ties excluded).
    pub n: usize,
}

impl Agreement {
    pub fn accuracy(&self) -> f64 {
        self.correct / self.n as f64
    }
}

/// Fraction of pairs on which `judge` agrees with the golden argmax; golden
/// ties are excluded from the denominator.
pub fn judge_agreement<J: PairJudge + ?Sized>(
    judge: &J,
    pairs: &[(PromptId, ResponseId, ResponseId)],
    gm: &GoldenPreferenceModel,
    rng: &mut LabRng,
) -> Result<Agreement> {
    let mut tally = Agreement { correct: 0.0, n: 0 };
    for &(x, y1, y2) in pairs {
        gm.check(x, y1, y2)?;
        let Some(golden_first) = gm.prefers_first(x, y1, y2) else {
            continue;
        };
        let j = judge.judge(x, y1, y2, rng)?;
        tally.n += 1;
        if (j.winner == y1) == golden_first {
            tally.correct += 1.0;
        }
    }
    Ok(tally)
}

/// Accuracy of the proxy's sign-difference judgments against golden.
pub fn proxy_accuracy(
    pm: &ProxyPreferenceModel,
    pairs: &[(PromptId, ResponseId, ResponseId)],
    gm: &GoldenPreferenceModel,
    rng: &mut LabRng,
) -> Result<f64> {
    if pairs.is_empty() {
        return input("accuracy needs at least one pair");
    }
    let tally = judge_agreement(pm, pairs, gm, rng)?;
    if tally.n == 0 {
        return Err(Error::UndefinedAccuracy("every pair is a golden tie".into()));
    }
    Ok(tally.accuracy())
}
