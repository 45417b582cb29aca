//! Independent ground truth: the closed-form minimizer of the offline IPO
//! objective, exact expected losses by enumeration, a line-search descent
//! used as a convergence oracle, and central finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::eval::{exhaustive_win_rate, WinMode};
use crate::losses::LossKind;
use crate::model::{log_softmax, PromptId, ProbTable, ReferencePolicy, ResponseDistribution, TabularPolicy, World};
use crate::preference::GoldenPreferenceModel;

/// Largest `P * R^2` an enumeration may touch.
pub const ENUMERATION_CAP: usize = 1_000_000;

/// Behavior entries below this are treated as unsupported.
pub const SUPPORT_EPS: f64 = f64::EPSILON;

/// `p(y > mu | x)` for every response; the self-pair contributes 0.5.
pub fn win_probabilities(gm: &GoldenPreferenceModel, x: PromptId, mu_row: &[f64]) -> Vec<f64> {
    (0..mu_row.len()).map(|y| gm.win_against(x, y, mu_row)).collect()
}

/// Temperature in the closed form for a given loss parameterization.
///
/// `(beta*h - 1/2)^2` is minimized by `pi_sft * exp(p / beta)`; the
/// main-text form `(h - beta/2)^2` targets a margin of `beta/2` instead of
/// `1/(2 beta)`, which is the same objective at temperature `1/beta`.
pub fn effective_beta(kind: LossKind, beta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return input("beta must be positive");
    }
    match kind {
        LossKind::IpoAppB => Ok(beta),
        LossKind::IpoEq1 => Ok(1.0 / beta),
        other => input(format!("no closed form for {}", other.name())),
    }
}

/// `pi*(y|x) ∝ pi_sft(y|x) exp(p(y > mu | x) / beta)`, as a full-mode
/// policy whose rows are the exact normalized probabilities' logs.
pub fn optimal_policy<M: ResponseDistribution + ?Sized>(
    reference: &ReferencePolicy,
    gm: &GoldenPreferenceModel,
    mu: &M,
    beta: f64,
) -> Result<TabularPolicy> {
    if !(beta > 0.0) {
        return input("beta must be positive");
    }
    let (p, r) = (reference.n_prompts(), reference.n_responses());
    if mu.n_prompts() != p || mu.n_responses() != r || gm.n_prompts != p || gm.n_responses != r {
        return input("reference, golden model and behavior shapes differ");
    }
    let mut logits = Vec::with_capacity(p * r);
    for x in 0..p {
        let wins = win_probabilities(gm, x, &mu.row(x)?);
        let z: Vec<f64> = (0..r).map(|y| reference.log_prob(x, y) + wins[y] / beta).collect();
        // store normalized log-probabilities so the logits are exact
        logits.extend(log_softmax(&z));
    }
    TabularPolicy::from_logits(p, r, logits)
}

/// Minimizer of the expected best-of-two loss: the distribution of
/// winners of pairs drawn from `mu` (conditioned on distinct responses).
pub fn bo2_optimal_distribution<M: ResponseDistribution + ?Sized>(
    gm: &GoldenPreferenceModel,
    mu: &M,
) -> Result<ProbTable> {
    let (p, r) = (mu.n_prompts(), mu.n_responses());
    let mut probs = Vec::with_capacity(p * r);
    for x in 0..p {
        let row = mu.row(x)?;
        let mut w = vec![0.0; r];
        for y in 0..r {
            for yp in 0..r {
                if y != yp {
                    w[y] += row[y] * row[yp] * gm.pref_unchecked(x, y, yp);
                }
            }
        }
        let z: f64 = w.iter().sum();
        if z <= 0.0 {
            return Err(Error::Support(format!("behavior at prompt {x} cannot draw two distinct responses")));
        }
        probs.extend(w.iter().map(|v| v / z));
    }
    ProbTable::new(p, r, probs)
}

/// Behavior, labels and loss defining an expected offline objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedLossSpec {
    pub kind: LossKind,
    pub beta: f64,
    pub mu: ProbTable,
    pub prompt_dist: Vec<f64>,
    pub gm: GoldenPreferenceModel,
}

impl ExpectedLossSpec {
    pub fn new(kind: LossKind, beta: f64, mu: ProbTable, world: &World, gm: GoldenPreferenceModel) -> Result<Self> {
        if mu.n_prompts != world.n_prompts || mu.n_responses != world.n_responses {
            return input("behavior table does not match the world");
        }
        if gm.n_prompts != world.n_prompts || gm.n_responses != world.n_responses {
            return input("golden model does not match the world");
        }
        if kind.is_contrastive() && !(beta > 0.0) {
            return input("beta must be positive");
        }
        let spec = ExpectedLossSpec {
            kind,
            beta,
            mu,
            prompt_dist: world.prompt_dist.clone(),
            gm,
        };
        spec.check_capacity()?;
        Ok(spec)
    }

    fn check_capacity(&self) -> Result<()> {
        let terms = self.mu.n_prompts.saturating_mul(self.mu.n_responses.saturating_mul(self.mu.n_responses));
        if terms > ENUMERATION_CAP {
            return Err(Error::Capacity(format!("{terms} terms exceed the cap of {ENUMERATION_CAP}")));
        }
        Ok(())
    }

    /// `support[x * R + y]` is true where `mu(y|x)` is usable.
    pub fn support(&self) -> Vec<bool> {
        self.mu.probs.iter().map(|&m| m >= SUPPORT_EPS).collect()
    }

    /// Prompts where the behavior has mass on at least two responses.
    pub fn active_prompts(&self) -> Vec<PromptId> {
        let r = self.mu.n_responses;
        (0..self.mu.n_prompts)
            .filter(|&x| self.prompt_dist[x] > 0.0 && self.mu.probs[x * r..(x + 1) * r].iter().filter(|&&m| m >= SUPPORT_EPS).count() >= 2)
            .collect()
    }

    /// Pair weights at prompt `x`: `mu(y) mu(y')` over distinct supported
    /// responses, normalized to sum to one.
    fn pair_weights(&self, x: PromptId) -> Option<Vec<(usize, usize, f64)>> {
        let r = self.mu.n_responses;
        let row = self.mu.row_slice(x);
        let mut out = Vec::new();
        let mut z = 0.0;
        for y in 0..r {
            if row[y] < SUPPORT_EPS {
                continue;
            }
            for yp in 0..r {
                if yp == y || row[yp] < SUPPORT_EPS {
                    continue;
                }
                let w = row[y] * row[yp];
                z += w;
                out.push((y, yp, w));
            }
        }
        if z == 0.0 {
            return None;
        }
        for t in &mut out {
            t.2 /= z;
        }
        Some(out)
    }
}

fn check_policy(policy: &TabularPolicy, reference: &ReferencePolicy, spec: &ExpectedLossSpec) -> Result<()> {
    let (p, r) = (spec.mu.n_prompts, spec.mu.n_responses);
    if policy.n_prompts() != p || policy.n_responses() != r || reference.n_prompts() != p || reference.n_responses() != r {
        return input("policy, reference and spec shapes differ");
    }
    Ok(())
}

/// Exact expected loss and its parameter gradient.
///
/// Prompts are weighted by the prompt distribution; each draws an ordered
/// pair of distinct responses from `mu` and the golden model labels the
/// first as winner with probability `pref(x, y, y')`.
pub fn expected_loss_and_grad(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    spec: &ExpectedLossSpec,
) -> Result<(f64, Vec<f64>)> {
    check_policy(policy, reference, spec)?;
    spec.check_capacity()?;
    let r = spec.mu.n_responses;
    let mut value = 0.0;
    let mut logit_grad = vec![0.0; spec.mu.n_prompts * r];
    for x in 0..spec.mu.n_prompts {
        let px = spec.prompt_dist[x];
        if px == 0.0 {
            continue;
        }
        let Some(pairs) = spec.pair_weights(x) else { continue };
        let logits = policy.logits_row(x);
        let lp = log_softmax(&logits);
        let g = &mut logit_grad[x * r..(x + 1) * r];
        for (y, yp, w) in pairs {
            let q = spec.gm.pref_unchecked(x, y, yp);
            for (win, lose, pw) in [(y, yp, q), (yp, y, 1.0 - q)] {
                let wt = px * w * pw;
                if wt == 0.0 {
                    continue;
                }
                match spec.kind {
                    LossKind::Bo2 => {
                        value -= wt * lp[win];
                        for (gi, l) in g.iter_mut().zip(&lp) {
                            *gi += wt * l.exp();
                        }
                        g[win] -= wt;
                    }
                    kind => {
                        let h = (logits[win] - logits[lose])
                            - (reference.log_prob(x, win) - reference.log_prob(x, lose));
                        value += wt * kind.contrastive_value(spec.beta, h);
                        let s = wt * kind.contrastive_slope(spec.beta, h);
                        g[win] += s;
                        g[lose] -= s;
                    }
                }
            }
        }
    }
    Ok((value, policy.pull_back(&logit_grad)))
}

pub fn expected_loss(policy: &TabularPolicy, reference: &ReferencePolicy, spec: &ExpectedLossSpec) -> Result<f64> {
    Ok(expected_loss_and_grad(policy, reference, spec)?.0)
}

/// Outcome of [`minimize_expected_loss`]. Non-convergence is reported, not
/// raised.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeReport {
    pub policy: TabularPolicy,
    pub iterations: usize,
    pub grad_inf_norm: f64,
    pub loss: f64,
    pub converged: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Full-batch gradient descent with Armijo backtracking until the gradient
/// infinity norm drops below `tol`. Trial steps start from the
/// Barzilai–Borwein estimate of the previous iteration.
pub fn minimize_expected_loss(
    spec: &ExpectedLossSpec,
    reference: &ReferencePolicy,
    init: &TabularPolicy,
    tol: f64,
    max_iter: usize,
) -> Result<MinimizeReport> {
    if !(tol > 0.0) {
        return input("tol must be positive");
    }
    let mut policy = init.clone();
    let (mut f, mut g) = expected_loss_and_grad(&policy, reference, spec)?;
    let mut step = 1.0;
    let mut iterations = 0;
    while inf_norm(&g) >= tol && iterations < max_iter {
        let x0 = policy.params().to_vec();
        let gg: f64 = g.iter().map(|v| v * v).sum();
        let g_norm = inf_norm(&g);
        let mut t = step;
        let mut accepted = None;
        for _ in 0..80 {
            let trial: Vec<f64> = x0.iter().zip(&g).map(|(p, gi)| p - t * gi).collect();
            policy.set_params(&trial)?;
            let (f_new, g_new) = expected_loss_and_grad(&policy, reference, spec)?;
            // near the minimum the loss stops resolving progress; the
            // gradient still does
            let flat = (f_new - f).abs() <= 4.0 * f64::EPSILON * f.abs().max(1e-300);
            if f_new <= f - 1e-4 * t * gg || (flat && inf_norm(&g_new) < g_norm) {
                accepted = Some((f_new, g_new));
                break;
            }
            t *= 0.5;
        }
        let Some((f_new, g_new)) = accepted else {
            policy.set_params(&x0)?;
            break;
        };
        // Barzilai–Borwein step for the next trial
        let (mut sy, mut ss) = (0.0, 0.0);
        for i in 0..g.len() {
            let s = policy.params()[i] - x0[i];
            sy += s * (g_new[i] - g[i]);
            ss += s * s;
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-8, 1e8) } else { t * 2.0 };
        f = f_new;
        g = g_new;
        iterations += 1;
    }
    let grad_inf_norm = inf_norm(&g);
    Ok(MinimizeReport {
        policy,
        iterations,
        grad_inf_norm,
        loss: f,
        converged: grad_inf_norm < tol,
    })
}

/// Central differences `(L(p + e_i eps) - L(p - e_i eps)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return input("eps must be positive");
    }
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss(&p)?;
        p[i] = orig - eps;
        let down = loss(&p)?;
        p[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// `max |a - n| / max(|a|_inf, |n|_inf)`, guarded against all-zero
/// gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = inf_norm(analytic).max(inf_norm(numeric)).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Per-prompt total variation between two distributions.
pub fn total_variation<A, B>(a: &A, b: &B) -> Result<Vec<f64>>
where
    A: ResponseDistribution + ?Sized,
    B: ResponseDistribution + ?Sized,
{
    if a.n_prompts() != b.n_prompts() || a.n_responses() != b.n_responses() {
        return input("distribution shapes differ");
    }
    (0..a.n_prompts())
        .map(|x| {
            let (ra, rb) = (a.row(x)?, b.row(x)?);
            Ok(0.5 * ra.iter().zip(&rb).map(|(p, q)| (p - q).abs()).sum::<f64>())
        })
        .collect()
}

/// Side-by-side comparison of the descent solution and the naive closed
/// form when the behavior lacks full support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncatedSupportReport {
    pub tv_per_prompt: Vec<f64>,
    /// Probability mass on responses `mu` never draws, averaged over prompts.
    pub unsupported_mass_descent: f64,
    pub unsupported_mass_closed_form: f64,
    /// Golden win rates against the reference.
    pub win_rate_descent: f64,
    pub win_rate_closed_form: f64,
    pub win_rate_behavior: f64,
    pub converged: bool,
}

pub fn truncated_support_report(
    spec: &ExpectedLossSpec,
    reference: &ReferencePolicy,
    world: &World,
    tol: f64,
    max_iter: usize,
) -> Result<TruncatedSupportReport> {
    let tau = effective_beta(spec.kind, spec.beta)?;
    let closed = optimal_policy(reference, &spec.gm, &spec.mu, tau)?;
    let init = TabularPolicy::from_reference(reference);
    let fit = minimize_expected_loss(spec, reference, &init, tol, max_iter)?;
    let support = spec.support();
    let r = spec.mu.n_responses;
    let unsupported = |pol: &TabularPolicy| -> Result<f64> {
        let mut s = 0.0;
        for x in 0..pol.n_prompts() {
            let row = pol.probs(x)?;
            s += (0..r).filter(|&y| !support[x * r + y]).map(|y| row[y]).sum::<f64>();
        }
        Ok(s / pol.n_prompts() as f64)
    };
    Ok(TruncatedSupportReport {
        tv_per_prompt: total_variation(&fit.policy, &closed)?,
        unsupported_mass_descent: unsupported(&fit.policy)?,
        unsupported_mass_closed_form: unsupported(&closed)?,
        win_rate_descent: exhaustive_win_rate(&fit.policy, reference, &spec.gm, world, WinMode::Soft)?,
        win_rate_closed_form: exhaustive_win_rate(&closed, reference, &spec.gm, world, WinMode::Soft)?,
        win_rate_behavior: exhaustive_win_rate(&spec.mu, reference, &spec.gm, world, WinMode::Soft)?,
        converged: fit.converged,
    })
}
