//! Synthetic world, softmax policies, the SFT reference, and sampling
//! primitives.
//!
//! Responses are atomic arms: a prompt `x` has `R` candidate responses and a
//! policy is a categorical distribution over them. Everything is `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::PreferenceDataset;
use crate::error::{input, Error, Result};

pub type PromptId = usize;
pub type ResponseId = usize;

/// Deterministic generator used for every stochastic operation.
pub type LabRng = ChaCha8Rng;

/// Support floor every reference policy entry must respect.
pub const REF_SUPPORT_FLOOR: f64 = 1e-9;

/// Row-sum tolerance for probability tables.
pub const ROW_SUM_TOL: f64 = 1e-12;

pub fn seeded_rng(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a parent seed and a stream label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Log-softmax with the same stabilization as [`softmax`].
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - m - lse).collect()
}

/// Draws an index from a categorical distribution by inverting the CDF.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> ResponseId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Anything that assigns a categorical distribution over responses to every
/// prompt.
pub trait ResponseDistribution {
    fn n_prompts(&self) -> usize;
    fn n_responses(&self) -> usize;
    /// Probability row for prompt `x`.
    fn row(&self, x: PromptId) -> Result<Vec<f64>>;

    fn sample(&self, x: PromptId, rng: &mut LabRng) -> Result<ResponseId> {
        Ok(sample_categorical(&self.row(x)?, rng))
    }
}

fn check_prompt(x: PromptId, n_prompts: usize) -> Result<()> {
    if x >= n_prompts {
        return input(format!("prompt id {x} out of range (P = {n_prompts})"));
    }
    Ok(())
}

fn check_response(y: ResponseId, n_responses: usize) -> Result<()> {
    if y >= n_responses {
        return input(format!("response id {y} out of range (R = {n_responses})"));
    }
    Ok(())
}

/// Finite prompt/response universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub prompt_dist: Vec<f64>,
    pub seed: u64,
}

impl World {
    /// World with a uniform prompt distribution.
    pub fn new(n_prompts: usize, n_responses: usize, seed: u64) -> Result<Self> {
        let dist = vec![1.0 / n_prompts.max(1) as f64; n_prompts];
        Self::with_prompt_dist(n_responses, dist, seed)
    }

    pub fn with_prompt_dist(n_responses: usize, prompt_dist: Vec<f64>, seed: u64) -> Result<Self> {
        let world = World {
            n_prompts: prompt_dist.len(),
            n_responses,
            prompt_dist,
            seed,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 {
            return input("world needs at least one prompt");
        }
        if self.n_responses < 2 {
            return input("world needs at least two responses per prompt");
        }
        if self.prompt_dist.len() != self.n_prompts {
            return input("prompt_dist length must equal n_prompts");
        }
        if self.prompt_dist.iter().any(|&p| !(p >= 0.0)) {
            return input("prompt_dist entries must be nonnegative");
        }
        let total: f64 = self.prompt_dist.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return input(format!("prompt_dist sums to {total}, not 1"));
        }
        Ok(())
    }

    pub fn check_prompt(&self, x: PromptId) -> Result<()> {
        check_prompt(x, self.n_prompts)
    }

    pub fn check_pair(&self, x: PromptId, y1: ResponseId, y2: ResponseId) -> Result<()> {
        check_prompt(x, self.n_prompts)?;
        check_response(y1, self.n_responses)?;
        check_response(y2, self.n_responses)
    }

    pub fn sample_prompt(&self, rng: &mut LabRng) -> PromptId {
        sample_categorical(&self.prompt_dist, rng)
    }
}

/// A dense `[P x R]` table of probabilities with no support requirement.
///
/// Used for behavior policies, which may legitimately have zero entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbTable {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub probs: Vec<f64>,
}

impl ProbTable {
    pub fn new(n_prompts: usize, n_responses: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_prompts * n_responses {
            return input("probability table has the wrong number of entries");
        }
        for x in 0..n_prompts {
            let row = &probs[x * n_responses..(x + 1) * n_responses];
            if row.iter().any(|&p| !(p >= 0.0)) {
                return input(format!("negative or NaN probability at prompt {x}"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return input(format!("row {x} sums to {s}, not 1"));
            }
        }
        Ok(ProbTable {
            n_prompts,
            n_responses,
            probs,
        })
    }

    /// Materializes any response distribution into a table.
    pub fn from_distribution<D: ResponseDistribution + ?Sized>(dist: &D) -> Self {
        let mut probs = Vec::with_capacity(dist.n_prompts() * dist.n_responses());
        for x in 0..dist.n_prompts() {
            probs.extend(dist.row(x).expect("prompt in range"));
        }
        ProbTable {
            n_prompts: dist.n_prompts(),
            n_responses: dist.n_responses(),
            probs,
        }
    }

    #[inline]
    pub fn row_slice(&self, x: PromptId) -> &[f64] {
        &self.probs[x * self.n_responses..(x + 1) * self.n_responses]
    }

    #[inline]
    pub fn get(&self, x: PromptId, y: ResponseId) -> f64 {
        self.probs[x * self.n_responses + y]
    }

    /// True when every entry at prompt `x` is strictly positive.
    pub fn has_full_support(&self, x: PromptId) -> bool {
        self.row_slice(x).iter().all(|&p| p > 0.0)
    }
}

impl ResponseDistribution for ProbTable {
    fn n_prompts(&self) -> usize {
        self.n_prompts
    }
    fn n_responses(&self) -> usize {
        self.n_responses
    }
    fn row(&self, x: PromptId) -> Result<Vec<f64>> {
        check_prompt(x, self.n_prompts)?;
        Ok(self.row_slice(x).to_vec())
    }
}

/// The SFT reference policy. Every entry is at least [`REF_SUPPORT_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbTable", into = "ProbTable")]
pub struct ReferencePolicy {
    table: ProbTable,
    #[serde(skip)]
    log_probs: Vec<f64>,
}

impl TryFrom<ProbTable> for ReferencePolicy {
    type Error = Error;
    fn try_from(table: ProbTable) -> Result<Self> {
        ReferencePolicy::new(table)
    }
}

impl From<ReferencePolicy> for ProbTable {
    fn from(r: ReferencePolicy) -> Self {
        r.table
    }
}

impl ReferencePolicy {
    pub fn new(table: ProbTable) -> Result<Self> {
        let table = ProbTable::new(table.n_prompts, table.n_responses, table.probs)?;
        if let Some(i) = table.probs.iter().position(|&p| p < REF_SUPPORT_FLOOR) {
            return Err(Error::Support(format!(
                "reference entry (x={}, y={}) = {} is below the support floor {}",
                i / table.n_responses,
                i % table.n_responses,
                table.probs[i],
                REF_SUPPORT_FLOOR
            )));
        }
        let log_probs = table.probs.iter().map(|p| p.ln()).collect();
        Ok(ReferencePolicy { table, log_probs })
    }

    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        let p = 1.0 / n_responses as f64;
        Self::new(ProbTable {
            n_prompts,
            n_responses,
            probs: vec![p; n_prompts * n_responses],
        })
        .expect("uniform table is valid")
    }

    /// Reference policy given by per-prompt softmax of `logits`.
    pub fn from_logits(n_prompts: usize, n_responses: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != n_prompts * n_responses {
            return input("logit table has the wrong number of entries");
        }
        let probs = logits.chunks(n_responses).flat_map(softmax).collect();
        Self::new(ProbTable {
            n_prompts,
            n_responses,
            probs,
        })
    }

    pub fn table(&self) -> &ProbTable {
        &self.table
    }

    #[inline]
    pub fn prob(&self, x: PromptId, y: ResponseId) -> f64 {
        self.table.get(x, y)
    }

    #[inline]
    pub fn log_prob(&self, x: PromptId, y: ResponseId) -> f64 {
        self.log_probs[x * self.table.n_responses + y]
    }

    pub fn row_slice(&self, x: PromptId) -> &[f64] {
        self.table.row_slice(x)
    }
}

impl ResponseDistribution for ReferencePolicy {
    fn n_prompts(&self) -> usize {
        self.table.n_prompts
    }
    fn n_responses(&self) -> usize {
        self.table.n_responses
    }
    fn row(&self, x: PromptId) -> Result<Vec<f64>> {
        self.table.row(x)
    }
}

/// Parameterization of a [`TabularPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PolicyMode {
    /// One free logit per (prompt, response).
    Full,
    /// Logits `base + A·B` with `A: [P x rank]`, `B: [rank x R]`.
    LowRank { rank: usize },
}

/// Softmax policy over responses, per prompt.
///
/// Effective logits are `base + params` in full mode and `base + A·B` in
/// low-rank mode. `base` is frozen; only `theta` is trained. `theta` stores
/// the full logit table row-major, or `A` followed by `B`, both row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRecord", into = "PolicyRecord")]
pub struct TabularPolicy {
    n_prompts: usize,
    n_responses: usize,
    mode: PolicyMode,
    base: Vec<f64>,
    theta: Vec<f64>,
}

impl TabularPolicy {
    /// Full-mode policy with the given logit table (row-major `[P x R]`).
    pub fn from_logits(n_prompts: usize, n_responses: usize, logits: Vec<f64>) -> Result<Self> {
        if n_prompts == 0 || n_responses == 0 {
            return input("policy dimensions must be positive");
        }
        if logits.len() != n_prompts * n_responses {
            return input("logit table has the wrong number of entries");
        }
        Ok(TabularPolicy {
            n_prompts,
            n_responses,
            mode: PolicyMode::Full,
            base: vec![0.0; n_prompts * n_responses],
            theta: logits,
        })
    }

    /// Full-mode policy with all-zero logits (uniform rows).
    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self::from_logits(n_prompts, n_responses, vec![0.0; n_prompts * n_responses])
            .expect("dimensions are positive")
    }

    /// Full-mode policy whose probabilities equal the reference.
    pub fn from_reference(reference: &ReferencePolicy) -> Self {
        let t = reference.table();
        let logits = t.probs.iter().map(|p| p.ln()).collect();
        Self::from_logits(t.n_prompts, t.n_responses, logits).expect("reference shape is valid")
    }

    /// Low-rank policy with explicit factors and frozen base logits.
    pub fn from_factors(
        n_prompts: usize,
        n_responses: usize,
        rank: usize,
        base: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
    ) -> Result<Self> {
        if rank == 0 {
            return input("rank must be positive");
        }
        if base.len() != n_prompts * n_responses
            || a.len() != n_prompts * rank
            || b.len() != rank * n_responses
        {
            return input("factor shapes do not match (P, R, rank)");
        }
        let mut theta = a;
        theta.extend(b);
        Ok(TabularPolicy {
            n_prompts,
            n_responses,
            mode: PolicyMode::LowRank { rank },
            base,
            theta,
        })
    }

    /// Low-rank policy that starts exactly at `reference`.
    ///
    /// `B` is drawn from a seeded standard normal scaled by `1/sqrt(rank)`
    /// and `A` starts at zero, so the initial effective logits equal
    /// `log reference`.
    pub fn low_rank_at_reference(reference: &ReferencePolicy, rank: usize, seed: u64) -> Result<Self> {
        let t = reference.table();
        let (p, r) = (t.n_prompts, t.n_responses);
        let base = t.probs.iter().map(|q| q.ln()).collect();
        let mut rng = seeded_rng(seed);
        let scale = 1.0 / (rank.max(1) as f64).sqrt();
        let b = (0..rank * r)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self::from_factors(p, r, rank, base, vec![0.0; p * rank], b)
    }

    /// Exact low-rank factorization of a full-mode policy using
    /// `rank = min(P, R)`: an identity factor on the short side.
    pub fn exact_low_rank(&self) -> Result<Self> {
        let (p, r) = (self.n_prompts, self.n_responses);
        let logits = self.logit_table();
        let k = p.min(r);
        let (a, b) = if p <= r {
            let mut eye = vec![0.0; p * p];
            for i in 0..p {
                eye[i * p + i] = 1.0;
            }
            (eye, logits)
        } else {
            let mut eye = vec![0.0; r * r];
            for i in 0..r {
                eye[i * r + i] = 1.0;
            }
            (logits, eye)
        };
        Self::from_factors(p, r, k, vec![0.0; p * r], a, b)
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn mode(&self) -> PolicyMode {
        self.mode
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// Trainable parameters (flat).
    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.theta.len() {
            return input("parameter vector has the wrong length");
        }
        self.theta.copy_from_slice(params);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// Effective logits for prompt `x` (no bounds check beyond slicing).
    pub fn logits_row(&self, x: PromptId) -> Vec<f64> {
        let r = self.n_responses;
        let base = &self.base[x * r..(x + 1) * r];
        match self.mode {
            PolicyMode::Full => base
                .iter()
                .zip(&self.theta[x * r..(x + 1) * r])
                .map(|(b, t)| b + t)
                .collect(),
            PolicyMode::LowRank { rank } => {
                let (a, bmat) = self.theta.split_at(self.n_prompts * rank);
                let arow = &a[x * rank..(x + 1) * rank];
                (0..r)
                    .map(|y| {
                        let mut s = base[y];
                        for (k, &av) in arow.iter().enumerate() {
                            s += av * bmat[k * r + y];
                        }
                        s
                    })
                    .collect()
            }
        }
    }

    /// Full `[P x R]` effective logit table.
    pub fn logit_table(&self) -> Vec<f64> {
        (0..self.n_prompts).flat_map(|x| self.logits_row(x)).collect()
    }

    pub fn probs(&self, x: PromptId) -> Result<Vec<f64>> {
        check_prompt(x, self.n_prompts)?;
        Ok(softmax(&self.logits_row(x)))
    }

    pub fn log_probs(&self, x: PromptId) -> Result<Vec<f64>> {
        check_prompt(x, self.n_prompts)?;
        Ok(log_softmax(&self.logits_row(x)))
    }

    pub fn log_prob(&self, x: PromptId, y: ResponseId) -> Result<f64> {
        check_response(y, self.n_responses)?;
        Ok(self.log_probs(x)?[y])
    }

    pub fn sample_response(&self, x: PromptId, rng: &mut LabRng) -> Result<ResponseId> {
        Ok(sample_categorical(&self.probs(x)?, rng))
    }

    /// Maps a gradient with respect to the effective logit table
    /// (`[P x R]`, row-major) onto the trainable parameters.
    pub fn pull_back(&self, logit_grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(logit_grad.len(), self.n_prompts * self.n_responses);
        match self.mode {
            PolicyMode::Full => logit_grad.to_vec(),
            PolicyMode::LowRank { rank } => {
                let (p, r) = (self.n_prompts, self.n_responses);
                let (a, b) = self.theta.split_at(p * rank);
                let mut out = vec![0.0; self.theta.len()];
                let (ga, gb) = out.split_at_mut(p * rank);
                for x in 0..p {
                    let grow = &logit_grad[x * r..(x + 1) * r];
                    if grow.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    for k in 0..rank {
                        // dL/dA[x,k] = sum_y G[x,y] B[k,y]
                        let brow = &b[k * r..(k + 1) * r];
                        ga[x * rank + k] = grow.iter().zip(brow).map(|(g, bv)| g * bv).sum();
                        // dL/dB[k,y] += A[x,k] G[x,y]
                        let av = a[x * rank + k];
                        if av != 0.0 {
                            for y in 0..r {
                                gb[k * r + y] += av * grow[y];
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

impl ResponseDistribution for TabularPolicy {
    fn n_prompts(&self) -> usize {
        self.n_prompts
    }
    fn n_responses(&self) -> usize {
        self.n_responses
    }
    fn row(&self, x: PromptId) -> Result<Vec<f64>> {
        self.probs(x)
    }
}

/// On-disk form of [`TabularPolicy`]: tables as row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRecord {
    n_prompts: usize,
    n_responses: usize,
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<Vec<f64>>>,
}

fn to_rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks(cols.max(1)).map(<[f64]>::to_vec).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, n_rows: usize, n_cols: usize, what: &str) -> Result<Vec<f64>> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != n_cols) {
        return input(format!("{what} must be a [{n_rows} x {n_cols}] table"));
    }
    Ok(rows.into_iter().flatten().collect())
}

impl From<TabularPolicy> for PolicyRecord {
    fn from(p: TabularPolicy) -> Self {
        let has_base = p.base.iter().any(|&v| v != 0.0);
        let base = has_base.then(|| to_rows(&p.base, p.n_responses));
        match p.mode {
            PolicyMode::Full => PolicyRecord {
                n_prompts: p.n_prompts,
                n_responses: p.n_responses,
                mode: "full".into(),
                rank: None,
                base,
                logits: Some(to_rows(&p.theta, p.n_responses)),
                a: None,
                b: None,
            },
            PolicyMode::LowRank { rank } => {
                let (a, b) = p.theta.split_at(p.n_prompts * rank);
                PolicyRecord {
                    n_prompts: p.n_prompts,
                    n_responses: p.n_responses,
                    mode: "low-rank".into(),
                    rank: Some(rank),
                    base,
                    logits: None,
                    a: Some(to_rows(a, rank)),
                    b: Some(to_rows(b, p.n_responses)),
                }
            }
        }
    }
}

impl TryFrom<PolicyRecord> for TabularPolicy {
    type Error = Error;
    fn try_from(rec: PolicyRecord) -> Result<Self> {
        let (p, r) = (rec.n_prompts, rec.n_responses);
        let base = match rec.base {
            Some(rows) => from_rows(rows, p, r, "base")?,
            None => vec![0.0; p * r],
        };
        match rec.mode.as_str() {
            "full" => {
                let logits = from_rows(rec.logits.ok_or_else(|| Error::Input("missing logits".into()))?, p, r, "logits")?;
                let mut pol = TabularPolicy::from_logits(p, r, logits)?;
                pol.base = base;
                Ok(pol)
            }
            "low-rank" => {
                let k = rec.rank.ok_or_else(|| Error::Input("missing rank".into()))?;
                let a = from_rows(rec.a.ok_or_else(|| Error::Input("missing a".into()))?, p, k, "a")?;
                let b = from_rows(rec.b.ok_or_else(|| Error::Input("missing b".into()))?, k, r, "b")?;
                TabularPolicy::from_factors(p, r, k, base, a, b)
            }
            other => input(format!("unknown policy mode {other:?}")),
        }
    }
}

/// Per-prompt smoothed frequencies of observed `(prompt, response)` pairs:
/// `(count + alpha) / (total + alpha * R)`. No support check is applied, so
/// `alpha = 0` can yield point masses.
pub fn smoothed_frequencies<I>(world: &World, observations: I, alpha: f64) -> Result<ProbTable>
where
    I: IntoIterator<Item = (PromptId, ResponseId)>,
{
    if !(alpha >= 0.0) {
        return input("smoothing must be nonnegative");
    }
    let (p, r) = (world.n_prompts, world.n_responses);
    let mut counts = vec![0.0f64; p * r];
    let mut any = false;
    for (x, y) in observations {
        check_prompt(x, p)?;
        check_response(y, r)?;
        counts[x * r + y] += 1.0;
        any = true;
    }
    if !any {
        return input("cannot fit SFT on an empty dataset");
    }
    let mut probs = vec![0.0; p * r];
    for x in 0..p {
        let row = &counts[x * r..(x + 1) * r];
        let total: f64 = row.iter().sum();
        let denom = total + alpha * r as f64;
        if denom == 0.0 {
            return Err(Error::Support(format!(
                "prompt {x} has no observations and smoothing is zero"
            )));
        }
        for y in 0..r {
            probs[x * r + y] = (row[y] + alpha) / denom;
        }
    }
    Ok(ProbTable {
        n_prompts: p,
        n_responses: r,
        probs,
    })
}

/// Fits the SFT reference by treating both responses of every pair as
/// targets, with additive smoothing `alpha`.
///
/// Entries below [`REF_SUPPORT_FLOOR`] after smoothing are raised to the
/// floor and the row renormalized. A zero count with `alpha = 0` is a
/// support violation.
pub fn fit_sft(world: &World, dataset: &PreferenceDataset, alpha: f64) -> Result<ReferencePolicy> {
    if dataset.is_empty() {
        return input("cannot fit SFT on an empty dataset");
    }
    let observations = dataset
        .examples()
        .iter()
        .flat_map(|ex| [(ex.prompt, ex.winner), (ex.prompt, ex.loser)]);
    let mut table = smoothed_frequencies(world, observations, alpha)?;
    let r = table.n_responses;
    for x in 0..table.n_prompts {
        let row = &mut table.probs[x * r..(x + 1) * r];
        if let Some(y) = row.iter().position(|&v| v == 0.0) {
            return Err(Error::Support(format!(
                "response {y} at prompt {x} was never observed and smoothing is zero"
            )));
        }
        if row.iter().any(|&v| v < REF_SUPPORT_FLOOR) {
            for v in row.iter_mut() {
                *v = v.max(REF_SUPPORT_FLOOR);
            }
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    ReferencePolicy::new(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabeledPair, PreferenceDataset, Provenance};

    fn ds(pairs: &[(usize, usize, usize)]) -> PreferenceDataset {
        PreferenceDataset::new(
            pairs
                .iter()
                .map(|&(x, w, l)| LabeledPair {
                    prompt: x,
                    winner: w,
                    loser: l,
                    label_margin: 0.0,
                })
                .collect(),
            Provenance::Golden { seed: 0 },
            None,
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_uniform_probs() {
        let pol = TabularPolicy::uniform(2, 4);
        assert_eq!(pol.probs(1).unwrap(), vec![0.25; 4]);
        assert!((pol.log_prob(0, 2).unwrap() + 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn analytic_two_arm_softmax() {
        let pol = TabularPolicy::from_logits(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let p = pol.probs(0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert!((pol.log_prob(0, 0).unwrap() - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let pol = TabularPolicy::from_logits(1, 2, vec![1000.0, 0.0]).unwrap();
        let p = pol.probs(0).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300);
        assert!(pol.log_prob(0, 1).unwrap().is_finite());
    }

    #[test]
    fn out_of_range_ids_are_input_errors() {
        let pol = TabularPolicy::uniform(2, 3);
        assert!(matches!(pol.probs(2), Err(Error::Input(_))));
        assert!(matches!(pol.log_prob(0, 3), Err(Error::Input(_))));
    }

    #[test]
    fn point_mass_always_sampled() {
        let pol = TabularPolicy::from_logits(1, 4, vec![-1e4, -1e4, 0.0, -1e4]).unwrap();
        let mut rng = seeded_rng(3);
        assert!((0..1000).all(|_| pol.sample_response(0, &mut rng).unwrap() == 2));
    }

    #[test]
    fn uniform_sampling_frequencies_within_four_sigma() {
        let r = 5;
        let n = 100_000;
        let pol = TabularPolicy::uniform(1, r);
        let mut rng = seeded_rng(11);
        let mut counts = vec![0usize; r];
        for _ in 0..n {
            counts[pol.sample_response(0, &mut rng).unwrap()] += 1;
        }
        let p = 1.0 / r as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let pol = TabularPolicy::from_logits(1, 3, vec![0.1, 0.5, -0.2]).unwrap();
        let draw = |seed| {
            let mut rng = seeded_rng(seed);
            (0..200).map(|_| pol.sample_response(0, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn world_rejects_bad_shapes() {
        assert!(World::new(0, 3, 0).is_err());
        assert!(World::new(2, 1, 0).is_err());
        assert!(World::with_prompt_dist(2, vec![0.3, 0.3], 0).is_err());
        assert!(World::with_prompt_dist(2, vec![0.25, 0.75], 0).is_ok());
    }

    #[test]
    fn sft_point_mass_without_smoothing() {
        let world = World::new(1, 4, 0).unwrap();
        let t = smoothed_frequencies(&world, vec![(0, 3); 7], 0.0).unwrap();
        assert_eq!(t.row_slice(0), &[0.0, 0.0, 0.0, 1.0]);
        let d = ds(&[(0, 3, 1)]);
        assert!(matches!(fit_sft(&world, &d, 0.0), Err(Error::Support(_))));
    }

    #[test]
    fn sft_laplace_smoothing() {
        let world = World::new(1, 2, 0).unwrap();
        let t = smoothed_frequencies(&world, vec![(0, 0), (0, 0)], 1.0).unwrap();
        assert!((t.get(0, 0) - 0.75).abs() < 1e-15);
        assert!((t.get(0, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sft_uniform_counts_give_uniform_rows() {
        let world = World::new(2, 2, 0).unwrap();
        let d = ds(&[(0, 0, 1), (1, 1, 0), (1, 0, 1)]);
        for alpha in [0.0, 0.5, 3.0] {
            let r = fit_sft(&world, &d, alpha).unwrap();
            for x in 0..2 {
                assert!((r.prob(x, 0) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exact_factorization_reproduces_full_policy() {
        for (p, r) in [(3, 5), (5, 3), (4, 4)] {
            let logits: Vec<f64> = (0..p * r).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.4).collect();
            let full = TabularPolicy::from_logits(p, r, logits).unwrap();
            let low = full.exact_low_rank().unwrap();
            assert_eq!(low.mode(), PolicyMode::LowRank { rank: p.min(r) });
            for x in 0..p {
                let a = full.probs(x).unwrap();
                let b = low.probs(x).unwrap();
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn low_rank_starts_at_reference() {
        let reference = ReferencePolicy::from_logits(3, 4, &[0.3, -0.1, 0.9, 0.0, 1.0, 2.0, -1.0, 0.5, 0.0, 0.0, 0.1, -0.4]).unwrap();
        let pol = TabularPolicy::low_rank_at_reference(&reference, 2, 5).unwrap();
        for x in 0..3 {
            let p = pol.probs(x).unwrap();
            for (y, py) in p.iter().enumerate() {
                assert!((py - reference.prob(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let reference = ReferencePolicy::uniform(2, 3);
        let low = TabularPolicy::low_rank_at_reference(&reference, 2, 1).unwrap();
        let full = TabularPolicy::from_logits(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.25, 1.5]).unwrap();
        for pol in [low, full] {
            let s = serde_json::to_string(&pol).unwrap();
            let back: TabularPolicy = serde_json::from_str(&s).unwrap();
            assert_eq!(back, pol);
            assert_eq!(serde_json::to_string(&back).unwrap(), s);
        }
    }

    #[test]
    fn reference_rejects_entries_below_floor() {
        let t = ProbTable::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(ReferencePolicy::new(t), Err(Error::Support(_))));
    }
}
