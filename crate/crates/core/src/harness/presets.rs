//! Hypothesis presets: fixed bundles of runs, each emitting the CSVs of
//! the figure it mirrors.
//!
//! | preset   | runs                                                        | outputs |
//! |----------|-------------------------------------------------------------|---------|
//! | H1       | online, offline on D_golden, offline on the shuffled stream | `fig3_tradeoff.csv`, `shuffle_levels.csv` |
//! | H2       | offline on D_golden vs online-vs-online pairs; truncated-support instance | `fig4_tradeoff.csv`, `fig4_truncated.csv` |
//! | H3       | one online and one offline run per seed, classifier batteries | `fig5_stream_accuracy.csv`, `fig6_accuracy_vs_win.csv`, `fig7_accuracy_logprob.csv` |
//! | H4       | H1's online/offline pair under Bo2 and IPO                  | `fig8_tradeoff.csv` |
//! | H5       | online / offline / tandem per policy rank                   | `fig9_best_by_rank.csv`, `fig10_tradeoff_by_rank.csv` |
//! | ablation | offline on four pair-generation recipes                     | `fig11_ablation.csv`, `fig11_tradeoff.csv` |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{exhaustive_win_rate, stream_accuracy, PolicyClassifier, WinMode};
use crate::losses::LossKind;
use crate::model::{derive_seed, seeded_rng};
use crate::oracle::{effective_beta, optimal_policy};
use crate::train::SamplingMode;

use super::experiment::ExperimentOutcome;
use super::report::{pearson, report, spearman, write_report};
use super::spec::{DatasetRecipe, ExperimentSpec, GeneratorSpec, Lab};
use super::sweep::{run_pooled, write_pooled, write_summary, PooledRow, RunStatus, SweepReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    H1,
    H2,
    H3,
    H4,
    H5,
    Ablation,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::H1, Preset::H2, Preset::H3, Preset::H4, Preset::H5, Preset::Ablation];
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::H1 => "h1",
            Preset::H2 => "h2",
            Preset::H3 => "h3",
            Preset::H4 => "h4",
            Preset::H5 => "h5",
            Preset::Ablation => "ablation",
        };
        f.write_str(s)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}; expected one of h1..h5, ablation")))
    }
}

/// Knobs shared by all presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresetOptions {
    /// World, proxy and default hyper-parameters.
    pub base: ExperimentSpec,
    pub seeds: Vec<u64>,
    /// Learning-rate grid crossed with every arm; empty keeps the base.
    pub learning_rate: Vec<f64>,
    pub beta: Vec<f64>,
    /// Shuffle levels for the H1 level scan.
    pub shuffle_levels: Vec<f64>,
    /// Policy ranks for H5; `0` stands for the full table.
    pub ranks: Vec<usize>,
    /// The H2 instance where the offline data cover little of the SFT
    /// support.
    pub truncated: ExperimentSpec,
    pub quantile: f64,
    /// Windows and window size for the H3 stream-accuracy trace.
    pub stream_checkpoints: usize,
    pub stream_window: usize,
}

/// The shipped truncated-support instance: an SFT that under-weights the
/// golden-best responses, and offline pairs drawn from a near-deterministic
/// golden-best policy.
pub fn truncated_instance() -> ExperimentSpec {
    let mut s = ExperimentSpec {
        name: "truncated".into(),
        ..Default::default()
    };
    s.sft.alignment = -0.6;
    s.train.mode = SamplingMode::Offline;
    let g = GeneratorSpec::GoldenBest { eps: 0.02 };
    s.data = Some(DatasetRecipe::PolicyPair { a: g.clone(), b: g, n: 4096 });
    s
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            base: ExperimentSpec::default(),
            seeds: vec![0, 1, 2],
            learning_rate: vec![],
            beta: vec![],
            shuffle_levels: vec![0.0, 0.25, 0.5, 1.0],
            ranks: vec![1, 2, 4, 8, 0],
            truncated: truncated_instance(),
            quantile: super::report::DEFAULT_QUANTILE,
            stream_checkpoints: 20,
            stream_window: 256,
        }
    }
}

impl PresetOptions {
    pub fn from_toml(text: &str) -> Result<Self> {
        let o: PresetOptions = toml::from_str(text)?;
        o.base.validate()?;
        Ok(o)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// `arm` crossed with the lr, beta and seed grids.
    fn grid(&self, arm: &ExperimentSpec) -> Vec<ExperimentSpec> {
        let t = &arm.train;
        let lrs = if self.learning_rate.is_empty() { vec![t.learning_rate] } else { self.learning_rate.clone() };
        let betas = if self.beta.is_empty() { vec![t.beta] } else { self.beta.clone() };
        let mut out = Vec::new();
        for &lr in &lrs {
            for &beta in &betas {
                for &seed in &self.seeds {
                    let mut s = arm.clone();
                    s.train.learning_rate = lr;
                    s.train.beta = beta;
                    s.train.seed = seed;
                    out.push(s);
                }
            }
        }
        out
    }
}

fn online(base: &ExperimentSpec) -> ExperimentSpec {
    let mut s = base.clone();
    s.train.mode = SamplingMode::Online;
    s.data = None;
    s
}

fn offline(base: &ExperimentSpec, recipe: DatasetRecipe) -> ExperimentSpec {
    let mut s = base.clone();
    s.train.mode = SamplingMode::Offline;
    s.data = Some(recipe);
    s
}

/// What a preset produced.
#[derive(Debug, Clone)]
pub struct PresetReport {
    pub preset: Preset,
    pub world_hash: String,
    pub runs: Vec<RunStatus>,
    pub rows: Vec<PooledRow>,
    /// Headline numbers, also written to `summary.json`.
    pub results: serde_json::Value,
    pub paths: Vec<PathBuf>,
}

impl PresetReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok).count()
    }
}

fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Collects CSVs in memory and writes them when an output directory is set.
struct Outputs<'a> {
    dir: Option<&'a Path>,
    paths: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        if let Some(d) = self.dir {
            fs::create_dir_all(d)?;
            let p = d.join(name);
            write_csv(rows, &p)?;
            self.paths.push(p);
        }
        Ok(())
    }

    fn pooled(&mut self, name: &str, rows: &[PooledRow]) -> Result<()> {
        if let Some(d) = self.dir {
            fs::create_dir_all(d)?;
            let p = d.join(name);
            write_pooled(rows, &p)?;
            self.paths.push(p);
        }
        Ok(())
    }
}

fn quantiles_json(rows: &[PooledRow], q: f64) -> Result<serde_json::Value> {
    if rows.is_empty() {
        return Ok(serde_json::Value::Null);
    }
    Ok(serde_json::to_value(report(rows, q)?)?)
}

fn ok_outcomes(rep: &SweepReport) -> impl Iterator<Item = &ExperimentOutcome> {
    rep.outcomes.iter().flatten()
}

/// Runs `preset`. Individual run failures are recorded in the report; only
/// lab construction and output errors abort.
pub fn run_preset(preset: Preset, opts: &PresetOptions, out_dir: Option<&Path>) -> Result<PresetReport> {
    opts.base.validate()?;
    if opts.seeds.is_empty() {
        return Err(Error::Config("preset needs at least one seed".into()));
    }
    let lab = Lab::build(&opts.base.lab_spec())?;
    let mut out = Outputs { dir: out_dir, paths: Vec::new() };
    let (runs, rows, results) = match preset {
        Preset::H1 => h1(opts, &lab, &mut out)?,
        Preset::H2 => h2(opts, &lab, &mut out)?,
        Preset::H3 => h3(opts, &lab, &mut out)?,
        Preset::H4 => h4(opts, &lab, &mut out)?,
        Preset::H5 => h5(opts, &lab, &mut out)?,
        Preset::Ablation => ablation(opts, &lab, &mut out)?,
    };
    let mut paths = out.paths;
    if let Some(d) = out_dir {
        let p = d.join("summary.json");
        let extra = json!({ "preset": preset.to_string(), "results": results.clone() });
        write_summary(&p, &lab.world_hash, &runs, &paths, extra)?;
        paths.push(p);
    }
    Ok(PresetReport {
        preset,
        world_hash: lab.world_hash,
        runs,
        rows,
        results,
        paths,
    })
}

type PresetOutput = (Vec<RunStatus>, Vec<PooledRow>, serde_json::Value);

#[derive(Serialize)]
struct LevelRow {
    seed: u64,
    level: f64,
    peak_win_rate: f64,
    final_win_rate: f64,
    final_kl: f64,
}

fn h1(opts: &PresetOptions, lab: &Lab, out: &mut Outputs) -> Result<PresetOutput> {
    let b = &opts.base;
    let mut specs = opts.grid(&online(b));
    specs.extend(opts.grid(&offline(b, DatasetRecipe::Golden)));
    specs.extend(opts.grid(&offline(b, DatasetRecipe::OnlineStream { level: 1.0 })));
    let main = run_pooled(&specs, lab, None)?;
    out.pooled("fig3_tradeoff.csv", &main.rows)?;

    // Shuffle-level scan at the base hyper-parameters, plus the exact
    // replay check at level 0.
    let level_specs: Vec<ExperimentSpec> = opts
        .seeds
        .iter()
        .flat_map(|&seed| {
            opts.shuffle_levels.iter().map(move |&level| {
                let mut s = offline(b, DatasetRecipe::OnlineStream { level });
                s.train.seed = seed;
                s
            })
        })
        .collect();
    let levels = run_pooled(&level_specs, lab, None)?;
    let mut level_rows = Vec::new();
    let mut replay_exact = Vec::new();
    for (spec, o) in level_specs.iter().zip(&levels.outcomes) {
        let Some(o) = o else { continue };
        let level = match spec.data {
            Some(DatasetRecipe::OnlineStream { level }) => level,
            _ => unreachable!("level specs are stream recipes"),
        };
        let last = o.record.final_metrics().expect("runs evaluate at step 0");
        level_rows.push(LevelRow {
            seed: spec.train.seed,
            level,
            peak_win_rate: o.record.peak_win_rate(),
            final_win_rate: last.win_rate,
            final_kl: last.kl,
        });
        if level == 0.0 {
            let c = o.companion.as_ref().expect("stream recipes keep their online run");
            let same_curve = c.metrics.iter().zip(&o.record.metrics).all(|(a, b)| a.win_rate == b.win_rate && a.kl == b.kl);
            replay_exact.push(c.final_policy == o.record.final_policy && same_curve);
        }
    }
    out.csv("shuffle_levels.csv", &level_rows)?;
    let xs: Vec<f64> = level_rows.iter().map(|r| r.level).collect();
    let ys: Vec<f64> = level_rows.iter().map(|r| r.final_win_rate).collect();

    let results = json!({
        "quantiles": quantiles_json(&main.rows, opts.quantile)?,
        "per_seed": h1_per_seed(&specs, &main),
        "level0_replay_exact": replay_exact,
        "shuffle_spearman": spearman(&xs, &ys),
    });
    let mut runs = main.runs;
    runs.extend(levels.runs);
    Ok((runs, main.rows, results))
}

/// Online peak and offline finals for each seed at the base hyper-parameters.
fn h1_per_seed(specs: &[ExperimentSpec], rep: &SweepReport) -> serde_json::Value {
    let mut v = Vec::new();
    for (s, o) in specs.iter().zip(&rep.outcomes) {
        if let Some(o) = o {
            let last = o.record.final_metrics().expect("runs evaluate at step 0");
            v.push(json!({
                "method": o.method,
                "seed": s.train.seed,
                "lr": s.train.learning_rate,
                "beta": s.train.beta,
                "peak_win_rate": o.record.peak_win_rate(),
                "final_win_rate": last.win_rate,
                "final_kl": last.kl,
            }));
        }
    }
    serde_json::Value::Array(v)
}

#[derive(Serialize)]
struct TruncatedRow {
    seed: u64,
    generator_win_rate: f64,
    closed_form_win_rate: f64,
    offline_peak_win_rate: f64,
    offline_final_win_rate: f64,
    gap: f64,
    within_0_10: bool,
}

fn h2(opts: &PresetOptions, lab: &Lab, out: &mut Outputs) -> Result<PresetOutput> {
    let b = &opts.base;
    let n = b.proxy.n_golden;
    let mut specs = opts.grid(&online(b));
    specs.extend(opts.grid(&offline(b, DatasetRecipe::Golden)));
    specs.extend(opts.grid(&offline(
        b,
        DatasetRecipe::PolicyPair {
            a: GeneratorSpec::Online,
            b: GeneratorSpec::Online,
            n,
        },
    )));
    let main = run_pooled(&specs, lab, None)?;
    out.pooled("fig4_tradeoff.csv", &main.rows)?;

    let t = &opts.truncated;
    t.validate()?;
    let eps = match &t.data {
        Some(DatasetRecipe::PolicyPair { a: GeneratorSpec::GoldenBest { eps }, .. }) => *eps,
        _ => return Err(Error::Config("the truncated instance must draw pairs from a golden-best generator".into())),
    };
    let tlab = Lab::build(&t.lab_spec())?;
    let generator = tlab.golden_best(eps)?;
    let gen_win = exhaustive_win_rate(&generator, &tlab.sft, &tlab.gm, &tlab.world, WinMode::Soft)?;
    let tau = effective_beta(t.train.loss, t.train.beta)?;
    let closed = optimal_policy(&tlab.sft, &tlab.gm, &generator, tau)?;
    let closed_win = exhaustive_win_rate(&closed, &tlab.sft, &tlab.gm, &tlab.world, WinMode::Soft)?;
    let tspecs: Vec<ExperimentSpec> = opts
        .seeds
        .iter()
        .map(|&seed| {
            let mut s = t.clone();
            s.train.seed = seed;
            s
        })
        .collect();
    let trep = run_pooled(&tspecs, &tlab, None)?;
    let mut trows = Vec::new();
    for (s, o) in tspecs.iter().zip(&trep.outcomes) {
        let Some(o) = o else { continue };
        let peak = o.record.peak_win_rate();
        trows.push(TruncatedRow {
            seed: s.train.seed,
            generator_win_rate: gen_win,
            closed_form_win_rate: closed_win,
            offline_peak_win_rate: peak,
            offline_final_win_rate: o.record.final_metrics().map_or(f64::NAN, |m| m.win_rate),
            gap: gen_win - peak,
            within_0_10: peak >= gen_win - 0.10,
        });
    }
    out.csv("fig4_truncated.csv", &trows)?;
    let results = json!({
        "quantiles": quantiles_json(&main.rows, opts.quantile)?,
        "truncated": {
            "world_hash": tlab.world_hash,
            "generator_win_rate": gen_win,
            "closed_form_win_rate": closed_win,
            "offline_peak_win_rates": trows.iter().map(|r| r.offline_peak_win_rate).collect::<Vec<_>>(),
            "any_within_0_10": trows.iter().any(|r| r.within_0_10),
        },
    });
    let mut runs = main.runs;
    runs.extend(trep.runs);
    Ok((runs, main.rows, results))
}

#[derive(Serialize)]
struct StreamRow {
    seed: u64,
    judge: String,
    step: usize,
    accuracy: f64,
    n: usize,
}

#[derive(Serialize)]
struct ClsRow {
    seed: u64,
    method: String,
    step: usize,
    kl: f64,
    cls_acc: f64,
    win_rate: f64,
    win_logprob_delta: f64,
}

fn h3(opts: &PresetOptions, lab: &Lab, out: &mut Outputs) -> Result<PresetOutput> {
    let b = &opts.base;
    let mut specs = Vec::new();
    for &seed in &opts.seeds {
        for arm in [online(b), offline(b, DatasetRecipe::Golden)] {
            let mut s = arm;
            s.train.seed = seed;
            specs.push(s);
        }
    }
    let rep = run_pooled(&specs, lab, None)?;
    let mut stream_rows = Vec::new();
    let mut cls_rows = Vec::new();
    for (pair_specs, pair) in specs.chunks(2).zip(rep.outcomes.chunks(2)) {
        let seed = pair_specs[0].train.seed;
        for o in pair.iter().flatten() {
            for m in &o.record.metrics {
                cls_rows.push(ClsRow {
                    seed,
                    method: o.method.clone(),
                    step: m.step,
                    kl: m.kl,
                    cls_acc: m.cls_acc,
                    win_rate: m.win_rate,
                    win_logprob_delta: m.win_logprob_delta,
                });
            }
        }
        let (Some(on), Some(off)) = (&pair[0], &pair[1]) else { continue };
        let on_clf = PolicyClassifier {
            policy: &on.record.final_policy,
            reference: &lab.sft,
        };
        let off_clf = PolicyClassifier {
            policy: &off.record.final_policy,
            reference: &lab.sft,
        };
        let judges: [(&str, &dyn crate::preference::PairJudge); 3] =
            [("proxy", lab.proxy()), ("online-policy", &on_clf), ("offline-policy", &off_clf)];
        for (name, j) in judges {
            let mut rng = seeded_rng(derive_seed(seed, 0x57A6));
            for a in stream_accuracy(j, &on.record, &lab.gm, opts.stream_checkpoints, opts.stream_window, &mut rng)? {
                stream_rows.push(StreamRow {
                    seed,
                    judge: name.into(),
                    step: a.step,
                    accuracy: a.accuracy,
                    n: a.n,
                });
            }
        }
    }
    out.csv("fig5_stream_accuracy.csv", &stream_rows)?;
    // Step 0 is the SFT point shared by every run; keep it out of the
    // correlation.
    let trained: Vec<&ClsRow> = cls_rows.iter().filter(|r| r.step > 0).collect();
    let acc: Vec<f64> = trained.iter().map(|r| r.cls_acc).collect();
    let win: Vec<f64> = trained.iter().map(|r| r.win_rate).collect();
    let corr = pearson(&acc, &win);
    out.csv("fig6_accuracy_vs_win.csv", &cls_rows)?;
    out.csv("fig7_accuracy_logprob.csv", &cls_rows)?;
    let mean_final = |method_prefix: &str, f: fn(&crate::train::MetricsRow) -> f64| {
        let v: Vec<f64> = ok_outcomes(&rep)
            .filter(|o| o.method.starts_with(method_prefix))
            .filter_map(|o| o.record.final_metrics().map(f))
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let results = json!({
        "accuracy_win_pearson": corr,
        "n_points": acc.len(),
        "final_cls_acc": {
            "online": mean_final("online", |m| m.cls_acc),
            "offline": mean_final("offline", |m| m.cls_acc),
        },
        "final_win_rate": {
            "online": mean_final("online", |m| m.win_rate),
            "offline": mean_final("offline", |m| m.win_rate),
        },
    });
    Ok((rep.runs, rep.rows, results))
}

fn h4(opts: &PresetOptions, lab: &Lab, out: &mut Outputs) -> Result<PresetOutput> {
    let mut specs = Vec::new();
    for loss in [LossKind::Bo2, opts.base.train.loss] {
        let mut b = opts.base.clone();
        b.train.loss = loss;
        specs.extend(opts.grid(&online(&b)));
        specs.extend(opts.grid(&offline(&b, DatasetRecipe::Golden)));
    }
    let rep = run_pooled(&specs, lab, None)?;
    out.pooled("fig8_tradeoff.csv", &rep.rows)?;
    let results = json!({ "quantiles": quantiles_json(&rep.rows, opts.quantile)? });
    Ok((rep.runs, rep.rows, results))
}

#[derive(Serialize)]
struct RankRow {
    rank: String,
    method: String,
    n_runs: usize,
    win_rate: f64,
    normalized: f64,
}

fn h5(opts: &PresetOptions, lab: &Lab, out: &mut Outputs) -> Result<PresetOutput> {
    let mut specs = Vec::new();
    for &k in &opts.ranks {
        let mut b = opts.base.clone();
        b.train.rank = (k > 0).then_some(k);
        specs.extend(opts.grid(&online(&b)));
        specs.extend(opts.grid(&offline(&b, DatasetRecipe::Golden)));
        specs.extend(opts.grid(&offline(&b, DatasetRecipe::OnlineStream { level: 1.0 })));
    }
    let rep = run_pooled(&specs, lab, None)?;
    out.pooled("fig10_tradeoff_by_rank.csv", &rep.rows)?;
    let mut table = Vec::new();
    if !rep.rows.is_empty() {
        let q = report(&rep.rows, opts.quantile)?;
        for r in &q {
            let base = q
                .iter()
                .find(|o| o.rank == r.rank && o.method.starts_with("online-"))
                .map(|o| o.win_rate);
            table.push(RankRow {
                rank: r.rank.clone(),
                method: r.method.clone(),
                n_runs: r.n_runs,
                win_rate: r.win_rate,
                normalized: base.map_or(f64::NAN, |w| r.win_rate / w),
            });
        }
    }
    out.csv("fig9_best_by_rank.csv", &table)?;
    let results = json!({ "best_by_rank": table.iter().map(|r| json!({
        "rank": r.rank, "method": r.method, "win_rate": r.win_rate, "normalized": r.normalized,
    })).collect::<Vec<_>>() });
    Ok((rep.runs, rep.rows, results))
}

#[derive(Serialize)]
struct AblationRow {
    seed: u64,
    dataset: String,
    peak_win_rate: f64,
    final_win_rate: f64,
    final_kl: f64,
}

fn ablation(opts: &PresetOptions, lab: &Lab, out: &mut Outputs) -> Result<PresetOutput> {
    let b = &opts.base;
    let n = b.proxy.n_golden;
    let early = GeneratorSpec::OnlineAt { step: b.train.steps / 5 };
    let recipes = [
        DatasetRecipe::Golden,
        DatasetRecipe::PolicyPair { a: GeneratorSpec::Online, b: GeneratorSpec::Online, n },
        DatasetRecipe::PolicyPair { a: GeneratorSpec::Sft, b: early.clone(), n },
        DatasetRecipe::PolicyPair { a: early, b: GeneratorSpec::Online, n },
    ];
    let mut specs = Vec::new();
    for r in recipes {
        specs.extend(opts.grid(&offline(b, r)));
    }
    let rep = run_pooled(&specs, lab, None)?;
    out.pooled("fig11_tradeoff.csv", &rep.rows)?;
    let mut rows = Vec::new();
    for (s, o) in specs.iter().zip(&rep.outcomes) {
        let Some(o) = o else { continue };
        let last = o.record.final_metrics().expect("runs evaluate at step 0");
        rows.push(AblationRow {
            seed: s.train.seed,
            dataset: o.method.clone(),
            peak_win_rate: o.record.peak_win_rate(),
            final_win_rate: last.win_rate,
            final_kl: last.kl,
        });
    }
    out.csv("fig11_ablation.csv", &rows)?;
    let results = json!({ "quantiles": quantiles_json(&rep.rows, opts.quantile)? });
    Ok((rep.runs, rep.rows, results))
}

/// Writes a report over pooled CSV files, refusing mixed worlds.
pub fn report_files(inputs: &[PathBuf], q: f64, out: &Path) -> Result<Vec<PathBuf>> {
    let mut rows = Vec::new();
    for p in inputs {
        rows.extend(super::sweep::read_pooled(p)?);
    }
    let table = report(&rows, q)?;
    write_report(&table, out)?;
    Ok(vec![out.to_path_buf()])
}
