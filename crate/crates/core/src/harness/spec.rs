//! Experiment configuration and the shared fixture ("lab") it resolves to.
//!
//! A lab is everything upstream of policy training: the world, the golden
//! model, the base behavior that produced the initial data, the SFT
//! reference fitted on that data, the golden-labeled proxy training set,
//! the proxy itself, and the evaluation set. Two specs with equal lab
//! sections produce the same lab and the same world hash.

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{make_golden, PreferenceDataset};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, Evaluator};
use crate::model::{derive_seed, fit_sft, seeded_rng, ProbTable, ReferencePolicy, World};
use crate::preference::{train_proxy, GoldenPreferenceModel, LabelMode, ProxyFit, ProxyPreferenceModel, ProxyTrainConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_prompts: 64,
            n_responses: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoldenSpec {
    /// Standard deviation of the i.i.d. normal utilities.
    pub utility_scale: f64,
    pub seed: u64,
}

impl Default for GoldenSpec {
    fn default() -> Self {
        GoldenSpec {
            utility_scale: 2.0,
            seed: 1,
        }
    }
}

/// How the SFT reference comes about: a base behavior with normal logits,
/// partially aligned with the golden utilities, generates `n_initial`
/// pairs, and the SFT is fitted on them with additive smoothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSpec {
    /// Standard deviation of the base behavior's logits; larger is more
    /// skewed.
    pub behavior_scale: f64,
    /// Correlation between base logits and golden utilities, in [-1, 1].
    pub alignment: f64,
    pub n_initial: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SftSpec {
    fn default() -> Self {
        SftSpec {
            behavior_scale: 1.5,
            alignment: 0.0,
            n_initial: 4096,
            alpha: 1.0,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxySpec {
    /// Size of the golden-labeled SFT pair set the proxy learns from.
    pub n_golden: usize,
    pub label_mode: LabelMode,
    pub train: ProxyTrainConfig,
    pub seed: u64,
}

impl Default for ProxySpec {
    fn default() -> Self {
        ProxySpec {
            n_golden: 500,
            label_mode: LabelMode::Bernoulli,
            train: ProxyTrainConfig {
                learning_rate: 2.0,
                steps: 300,
                l2: 1e-3,
                ..Default::default()
            },
            seed: 3,
        }
    }
}

/// Which judge labels online pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeKind {
    #[default]
    Proxy,
    Golden,
}

/// A response generator that can be named in a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum GeneratorSpec {
    Sft,
    /// The final policy of the spec's online run.
    Online,
    /// The online run's last checkpoint at or before `step`.
    OnlineAt { step: usize },
    /// `1 - eps` on the golden-best response of each prompt, the rest
    /// spread uniformly.
    GoldenBest { eps: f64 },
}

/// Dataset an offline run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DatasetRecipe {
    /// The proxy's own training set.
    Golden,
    /// The recorded stream of the matching online run, shuffled at `level`.
    OnlineStream { level: f64 },
    /// Golden-labeled pairs with one response from each generator.
    PolicyPair { a: GeneratorSpec, b: GeneratorSpec, n: usize },
}

/// Complete description of one training experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub name: String,
    pub world: WorldSpec,
    pub golden: GoldenSpec,
    pub sft: SftSpec,
    pub proxy: ProxySpec,
    pub judge: JudgeKind,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Required exactly when `train.mode` is offline.
    pub data: Option<DatasetRecipe>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "default".into(),
            world: WorldSpec::default(),
            golden: GoldenSpec::default(),
            sft: SftSpec::default(),
            proxy: ProxySpec::default(),
            judge: JudgeKind::Proxy,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: None,
            output_dir: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.world.n_prompts == 0 || self.world.n_responses < 2 {
            return bad("world needs at least one prompt and two responses".into());
        }
        if !(-1.0..=1.0).contains(&self.sft.alignment) {
            return bad("sft.alignment must lie in [-1, 1]".into());
        }
        if self.sft.n_initial == 0 || self.proxy.n_golden == 0 || self.eval.eval_set_size == 0 {
            return bad("dataset sizes must be positive".into());
        }
        match (self.train.mode, &self.data) {
            (crate::train::SamplingMode::Offline, None) => bad("offline training needs a [data] recipe".into()),
            (crate::train::SamplingMode::Online, Some(_)) => bad("online training takes no [data] recipe".into()),
            (_, Some(DatasetRecipe::OnlineStream { level })) if !(0.0..=1.0).contains(level) => {
                bad(format!("shuffle level {level} outside [0, 1]"))
            }
            (_, Some(DatasetRecipe::PolicyPair { n: 0, .. })) => bad("policy-pair datasets need n > 0".into()),
            _ => Ok(()),
        }
    }

    /// The sections that determine the lab.
    pub fn lab_spec(&self) -> LabSpec {
        LabSpec {
            world: self.world.clone(),
            golden: self.golden.clone(),
            sft: self.sft.clone(),
            proxy: self.proxy.clone(),
            eval: self.eval.clone(),
        }
    }
}

/// Lab-determining sections of an [`ExperimentSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSpec {
    pub world: WorldSpec,
    pub golden: GoldenSpec,
    pub sft: SftSpec,
    pub proxy: ProxySpec,
    pub eval: EvalConfig,
}

impl LabSpec {
    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("lab spec serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// The shared fixture every run of an experiment family trains in.
#[derive(Debug, Clone)]
pub struct Lab {
    pub spec: LabSpec,
    pub world_hash: String,
    pub world: World,
    pub gm: GoldenPreferenceModel,
    pub behavior: ProbTable,
    pub d_initial: PreferenceDataset,
    pub sft: ReferencePolicy,
    pub d_golden: PreferenceDataset,
    pub proxy_fit: ProxyFit,
    pub evaluator: Evaluator,
}

fn base_behavior(world: &World, gm: &GoldenPreferenceModel, spec: &SftSpec) -> Result<ProbTable> {
    let mut rng = seeded_rng(spec.seed);
    let r = world.n_responses;
    let (a, b) = (spec.alignment, (1.0 - spec.alignment * spec.alignment).sqrt());
    let mut probs = Vec::with_capacity(world.n_prompts * r);
    for x in 0..world.n_prompts {
        let u = &gm.utilities[x * r..(x + 1) * r];
        let mean = u.iter().sum::<f64>() / r as f64;
        let sd = (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r as f64).sqrt();
        let logits: Vec<f64> = u
            .iter()
            .map(|&ui| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let zu = if sd > 0.0 { (ui - mean) / sd } else { 0.0 };
                spec.behavior_scale * (a * zu + b * z)
            })
            .collect();
        probs.extend(crate::model::softmax(&logits));
    }
    ProbTable::new(world.n_prompts, r, probs)
}

impl Lab {
    pub fn build(spec: &LabSpec) -> Result<Self> {
        let world = World::new(spec.world.n_prompts, spec.world.n_responses, spec.world.seed)?;
        let gm = GoldenPreferenceModel::random(&world, spec.golden.utility_scale, spec.golden.seed)?;
        let behavior = base_behavior(&world, &gm, &spec.sft)?;
        let mut rng = seeded_rng(derive_seed(spec.sft.seed, 1));
        let d_initial = make_golden(&world, &gm, &behavior, spec.sft.n_initial, &mut rng, LabelMode::Bernoulli, spec.sft.seed)?;
        let sft = fit_sft(&world, &d_initial, spec.sft.alpha)?;
        let mut rng = seeded_rng(spec.proxy.seed);
        let d_golden = make_golden(&world, &gm, &sft, spec.proxy.n_golden, &mut rng, spec.proxy.label_mode, spec.proxy.seed)?;
        let proxy_fit = train_proxy(&world, &d_golden, &spec.proxy.train)?;
        let mut rng = seeded_rng(derive_seed(spec.eval.seed, 0xE5E7));
        let eval_set = make_golden(&world, &gm, &sft, spec.eval.eval_set_size, &mut rng, LabelMode::Argmax, spec.eval.seed)?;
        let evaluator = Evaluator::new(world.clone(), gm.clone(), sft.clone(), eval_set, spec.eval.clone())?;
        Ok(Lab {
            world_hash: spec.hash(),
            spec: spec.clone(),
            world,
            gm,
            behavior,
            d_initial,
            sft,
            d_golden,
            proxy_fit,
            evaluator,
        })
    }

    pub fn proxy(&self) -> &ProxyPreferenceModel {
        &self.proxy_fit.model
    }

    /// `1 - eps` on each prompt's golden-best response, `eps` spread over
    /// the rest.
    pub fn golden_best(&self, eps: f64) -> Result<ProbTable> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!("eps {eps} outside [0, 1)")));
        }
        let (p, r) = (self.world.n_prompts, self.world.n_responses);
        let mut probs = vec![eps / (r - 1) as f64; p * r];
        for x in 0..p {
            let best = (0..r)
                .max_by(|&a, &b| self.gm.utility(x, a).total_cmp(&self.gm.utility(x, b)))
                .expect("r >= 2");
            probs[x * r + best] = 1.0 - eps;
        }
        ProbTable::new(p, r, probs)
    }
}
