//! Hyper-parameter sweeps and the pooled trade-off table.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::experiment::{method_name, run_id, run_in_lab, write_outcome, ExperimentOutcome};
use super::spec::{ExperimentSpec, Lab};

/// Environment variable holding the worker count for parallel runs.
pub const WORKERS_ENV: &str = "GOODHART_WORKERS";

/// A base spec and the grids to cross it with. An empty grid keeps the
/// base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub base: ExperimentSpec,
    pub learning_rate: Vec<f64>,
    pub beta: Vec<f64>,
    pub steps: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn or_base<T: Clone>(grid: &[T], base: T) -> Vec<T> {
    if grid.is_empty() {
        vec![base]
    } else {
        grid.to_vec()
    }
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SweepSpec = toml::from_str(text)?;
        s.base.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Grid points in lexicographic (lr, beta, steps, seed) order.
    pub fn points(&self) -> Vec<ExperimentSpec> {
        let t = &self.base.train;
        let mut out = Vec::new();
        for &lr in &or_base(&self.learning_rate, t.learning_rate) {
            for &beta in &or_base(&self.beta, t.beta) {
                for &steps in &or_base(&self.steps, t.steps) {
                    for &seed in &or_base(&self.seeds, t.seed) {
                        let mut s = self.base.clone();
                        s.train.learning_rate = lr;
                        s.train.beta = beta;
                        s.train.steps = steps;
                        s.train.seed = seed;
                        out.push(s);
                    }
                }
            }
        }
        out
    }
}

/// Hyper-parameter tag carried by every pooled row.
pub fn tag(spec: &ExperimentSpec) -> String {
    let t = &spec.train;
    format!("lr={};beta={};steps={};seed={}", t.learning_rate, t.beta, t.steps, t.seed)
}

pub fn rank_label(spec: &ExperimentSpec) -> String {
    spec.train.rank.map_or_else(|| "full".to_string(), |k| k.to_string())
}

/// One row of `tradeoff.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub world_hash: String,
    pub method: String,
    pub rank: String,
    pub run_id: String,
    pub tag: String,
    pub step: usize,
    pub kl: f64,
    pub win_rate: f64,
}

pub fn pooled_rows(world_hash: &str, spec: &ExperimentSpec, out: &ExperimentOutcome) -> Vec<PooledRow> {
    out.record
        .metrics
        .iter()
        .map(|m| PooledRow {
            world_hash: world_hash.to_string(),
            method: out.method.clone(),
            rank: rank_label(spec),
            run_id: out.run_id.clone(),
            tag: tag(spec),
            step: m.step,
            kl: m.kl,
            win_rate: m.win_rate,
        })
        .collect()
}

pub fn write_pooled(rows: &[PooledRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pooled(path: &Path) -> Result<Vec<PooledRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config(format!("{WORKERS_ENV} must be positive")));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

/// Runs every spec in `lab` on the worker pool. Results come back in input
/// order whatever the scheduling.
pub fn run_all(specs: &[ExperimentSpec], lab: &Lab) -> Result<Vec<Result<ExperimentOutcome>>> {
    let pool = pool()?;
    Ok(pool.install(|| specs.par_iter().map(|s| run_in_lab(s, lab)).collect()))
}

/// Outcome of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStatus {
    pub run_id: String,
    pub method: String,
    pub tag: String,
    pub ok: bool,
    pub error: Option<String>,
    pub peak_win_rate: Option<f64>,
    pub final_win_rate: Option<f64>,
    pub final_kl: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub world_hash: String,
    pub runs: Vec<RunStatus>,
    pub rows: Vec<PooledRow>,
    pub outcomes: Vec<Option<ExperimentOutcome>>,
    pub paths: Vec<PathBuf>,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| !r.ok).count()
    }
}

/// Runs `specs` (all of which must share `lab`'s world) and pools their
/// curves. Failed runs are recorded and skipped. With `out_dir`, writes
/// one directory per successful run plus `tradeoff.csv`.
pub fn run_pooled(specs: &[ExperimentSpec], lab: &Lab, out_dir: Option<&Path>) -> Result<SweepReport> {
    for s in specs {
        if s.lab_spec().hash() != lab.world_hash {
            return Err(Error::Config(format!("run {} belongs to a different world", run_id(s))));
        }
    }
    let results = run_all(specs, lab)?;
    let mut runs = Vec::with_capacity(specs.len());
    let mut rows = Vec::new();
    let mut outcomes = Vec::with_capacity(specs.len());
    let mut paths = Vec::new();
    for (spec, res) in specs.iter().zip(results) {
        match res {
            Ok(out) => {
                let last = out.record.final_metrics();
                runs.push(RunStatus {
                    run_id: out.run_id.clone(),
                    method: out.method.clone(),
                    tag: tag(spec),
                    ok: true,
                    error: None,
                    peak_win_rate: Some(out.record.peak_win_rate()),
                    final_win_rate: last.map(|m| m.win_rate),
                    final_kl: last.map(|m| m.kl),
                });
                rows.extend(pooled_rows(&lab.world_hash, spec, &out));
                if let Some(dir) = out_dir {
                    paths.extend(write_outcome(spec, &out, &dir.join("runs"))?);
                }
                outcomes.push(Some(out));
            }
            Err(e) => {
                runs.push(RunStatus {
                    run_id: run_id(spec),
                    method: method_name(spec),
                    tag: tag(spec),
                    ok: false,
                    error: Some(e.to_string()),
                    peak_win_rate: None,
                    final_win_rate: None,
                    final_kl: None,
                });
                outcomes.push(None);
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let p = dir.join("tradeoff.csv");
        write_pooled(&rows, &p)?;
        paths.push(p);
    }
    Ok(SweepReport {
        world_hash: lab.world_hash.clone(),
        runs,
        rows,
        outcomes,
        paths,
    })
}

/// Builds the lab for `spec.base` and runs the whole grid.
pub fn run_sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepReport> {
    spec.base.validate()?;
    let lab = Lab::build(&spec.base.lab_spec())?;
    let mut report = run_pooled(&spec.points(), &lab, out_dir)?;
    if let Some(dir) = out_dir {
        let p = dir.join("summary.json");
        write_summary(&p, &report.world_hash, &report.runs, &report.paths, serde_json::Value::Null)?;
        report.paths.push(p);
    }
    Ok(report)
}

/// Machine-readable status of one invocation.
pub fn write_summary(path: &Path, world_hash: &str, runs: &[RunStatus], paths: &[PathBuf], extra: serde_json::Value) -> Result<()> {
    let failed = runs.iter().filter(|r| !r.ok).count();
    let v = serde_json::json!({
        "status": if failed == 0 { "ok" } else { "failed" },
        "world_hash": world_hash,
        "n_runs": runs.len(),
        "n_failed": failed,
        "runs": runs,
        "outputs": paths,
        "results": extra,
    });
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentSpec {
        let mut s = ExperimentSpec::default();
        s.world.n_prompts = 4;
        s.world.n_responses = 5;
        s.sft.n_initial = 200;
        s.proxy.n_golden = 60;
        s.eval.eval_set_size = 32;
        s.eval.cls_subsample = 32;
        s.train.steps = 40;
        s.train.batch_size = 8;
        s.train.eval_cadence = 10;
        s.train.learning_rate = 5.0;
        s
    }

    #[test]
    fn grid_is_cartesian_and_ordered() {
        let sw = SweepSpec {
            base: small(),
            learning_rate: vec![1.0, 2.0, 3.0],
            beta: vec![0.1, 0.5, 1.0],
            steps: vec![10, 20],
            seeds: vec![],
        };
        let pts = sw.points();
        assert_eq!(pts.len(), 18);
        assert_eq!(pts[0].train.learning_rate, 1.0);
        assert_eq!(pts[1].train.steps, 20);
        assert_eq!(pts[17].train.beta, 1.0);
        let tags: std::collections::BTreeSet<_> = pts.iter().map(tag).collect();
        assert_eq!(tags.len(), 18);
    }

    #[test]
    fn one_point_sweep_equals_a_single_run() {
        let sw = SweepSpec {
            base: small(),
            ..Default::default()
        };
        let rep = run_sweep(&sw, None).unwrap();
        let (_, single) = super::super::run_experiment(&sw.base).unwrap();
        // Step-0 loss is NaN, so compare serialized forms.
        let got = serde_json::to_string(&rep.outcomes[0].as_ref().unwrap().record).unwrap();
        assert_eq!(got, serde_json::to_string(&single.record).unwrap());
        assert_eq!(rep.rows.len(), single.record.metrics.len());
    }

    #[test]
    fn failures_are_recorded_and_the_rest_still_run() {
        let base = small();
        let lab = Lab::build(&base.lab_spec()).unwrap();
        let mut bad = base.clone();
        bad.train.rank = Some(0);
        let rep = run_pooled(&[base.clone(), bad], &lab, None).unwrap();
        assert_eq!(rep.failures(), 1);
        assert!(rep.runs[0].ok && !rep.runs[1].ok);
        assert!(!rep.rows.is_empty());
    }

    #[test]
    fn pooled_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let sw = SweepSpec {
            base: small(),
            seeds: vec![0, 1],
            ..Default::default()
        };
        let rep = run_sweep(&sw, Some(dir.path())).unwrap();
        let back = read_pooled(&dir.path().join("tradeoff.csv")).unwrap();
        assert_eq!(back.len(), rep.rows.len());
        assert!(back.iter().all(|r| r.world_hash == rep.world_hash));
    }
}
