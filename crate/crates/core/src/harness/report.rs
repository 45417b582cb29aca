//! Quantile summaries over pooled curves, and the small statistics the
//! presets report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::sweep::PooledRow;

/// Default quantile for "best achievable" summaries.
pub const DEFAULT_QUANTILE: f64 = 0.9;

/// Linear-interpolation quantile (R type 7) of `values`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Input(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// One line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub method: String,
    pub rank: String,
    pub n_runs: usize,
    pub n_points: usize,
    pub quantile: f64,
    pub win_rate: f64,
}

fn check_single_world(rows: &[PooledRow]) -> Result<()> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Input("empty pool".into()))?;
    if let Some(other) = rows.iter().find(|r| r.world_hash != first.world_hash) {
        return Err(Error::Config(format!(
            "pool mixes worlds {} and {}",
            first.world_hash, other.world_hash
        )));
    }
    Ok(())
}

/// Per `(method, rank)`, the `q`-quantile of win rates over every step of
/// every run in the pool.
pub fn report(rows: &[PooledRow], q: f64) -> Result<Vec<QuantileRow>> {
    check_single_world(rows)?;
    type Group<'a> = (Vec<f64>, BTreeSet<&'a str>);
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.method.clone(), r.rank.clone())).or_default();
        g.0.push(r.win_rate);
        g.1.insert(&r.run_id);
    }
    groups
        .into_iter()
        .map(|((method, rank), (wins, ids))| {
            Ok(QuantileRow {
                method,
                rank,
                n_runs: ids.len(),
                n_points: wins.len(),
                quantile: q,
                win_rate: quantile(&wins, q)?,
            })
        })
        .collect()
}

pub fn write_report(rows: &[QuantileRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `q`-quantile of win rates of `method` in each KL bin `[edges[i], edges[i+1])`;
/// `None` for empty bins.
pub fn binned_quantiles(rows: &[PooledRow], method: &str, edges: &[f64], q: f64) -> Result<Vec<Option<f64>>> {
    check_single_world(rows)?;
    edges
        .windows(2)
        .map(|w| {
            let wins: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.kl >= w[0] && r.kl < w[1])
                .map(|r| r.win_rate)
                .collect();
            if wins.is_empty() {
                Ok(None)
            } else {
                quantile(&wins, q).map(Some)
            }
        })
        .collect()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}
