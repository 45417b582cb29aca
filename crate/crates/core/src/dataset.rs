//! Pairwise preference datasets and the constructions that produce them:
//! golden-labeled data from a behavior policy, recorded online streams, their
//! shuffled variants, and policy-pair ablations.
//!
//! On disk a dataset is JSON lines: one metadata header followed by one
//! record per example, in dataset order.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::model::{LabRng, PromptId, ResponseDistribution, ResponseId, World};
use crate::preference::{GoldenPreferenceModel, LabelMode};
use crate::train::RunRecord;

/// Attempts allowed to draw a non-degenerate pair for one example.
pub const RESAMPLE_CAP: usize = 10_000;

/// One labeled comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub prompt: PromptId,
    pub winner: ResponseId,
    pub loser: ResponseId,
    pub label_margin: f64,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Golden {
        seed: u64,
    },
    OnlineStream {
        run_id: String,
    },
    Shuffled {
        run_id: String,
        level: f64,
        seed: u64,
        /// Window size in batches the level resolved to.
        window: usize,
    },
    PolicyPair {
        gen_a: String,
        gen_b: String,
        seed: u64,
    },
}

/// Ordered sequence of labeled pairs. Order is meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    examples: Vec<LabeledPair>,
    provenance: Provenance,
    /// Sizes of the recorded batches, in order, for stream-derived data.
    /// Zero entries mark steps whose batch was entirely degenerate.
    batch_sizes: Option<Vec<usize>>,
}

impl PreferenceDataset {
    pub fn new(examples: Vec<LabeledPair>, provenance: Provenance, batch_sizes: Option<Vec<usize>>) -> Result<Self> {
        if let Some(i) = examples.iter().position(|e| e.winner == e.loser) {
            return input(format!("example {i} compares a response with itself"));
        }
        if let Some(sizes) = &batch_sizes {
            if sizes.iter().sum::<usize>() != examples.len() {
                return input("batch sizes do not add up to the number of examples");
            }
        }
        Ok(PreferenceDataset {
            examples,
            provenance,
            batch_sizes,
        })
    }

    pub fn examples(&self) -> &[LabeledPair] {
        &self.examples
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn batch_sizes(&self) -> Option<&[usize]> {
        self.batch_sizes.as_deref()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `(x, y_w, y_l)` triples, in order.
    pub fn triples(&self) -> Vec<(PromptId, ResponseId, ResponseId)> {
        self.examples.iter().map(|e| (e.prompt, e.winner, e.loser)).collect()
    }

    /// Recorded batches as index ranges into `examples`.
    pub fn batch_ranges(&self) -> Option<Vec<std::ops::Range<usize>>> {
        let sizes = self.batch_sizes.as_ref()?;
        let mut start = 0;
        Some(
            sizes
                .iter()
                .map(|&s| {
                    let r = start..start + s;
                    start += s;
                    r
                })
                .collect(),
        )
    }

    /// Copy with the batch at `index` removed.
    pub fn without_batch(&self, index: usize) -> Result<Self> {
        let ranges = self
            .batch_ranges()
            .ok_or_else(|| Error::Input("dataset has no batch structure".into()))?;
        if index >= ranges.len() {
            return input(format!("batch index {index} out of range"));
        }
        let mut examples = Vec::with_capacity(self.len());
        let mut sizes = Vec::with_capacity(ranges.len() - 1);
        for (i, r) in ranges.into_iter().enumerate() {
            if i != index {
                sizes.push(r.len());
                examples.extend_from_slice(&self.examples[r]);
            }
        }
        Self::new(examples, self.provenance.clone(), Some(sizes))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            provenance: &self.provenance,
            n_examples: self.examples.len(),
            batch_sizes: self.batch_sizes.as_deref(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let batch_of = self.batch_index_per_example();
        for (i, e) in self.examples.iter().enumerate() {
            let rec = Record {
                x: e.prompt,
                y_w: e.winner,
                y_l: e.loser,
                label_margin: e.label_margin,
                batch_index: batch_of.as_ref().map(|b| b[i]),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Input("dataset file is empty".into()))??;
        let header: OwnedHeader = serde_json::from_str(&header_line)?;
        let mut examples = Vec::with_capacity(header.n_examples);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            examples.push(LabeledPair {
                prompt: rec.x,
                winner: rec.y_w,
                loser: rec.y_l,
                label_margin: rec.label_margin,
            });
        }
        if examples.len() != header.n_examples {
            return input(format!(
                "header declares {} examples, found {}",
                header.n_examples,
                examples.len()
            ));
        }
        Self::new(examples, header.provenance, header.batch_sizes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    fn batch_index_per_example(&self) -> Option<Vec<usize>> {
        let sizes = self.batch_sizes.as_ref()?;
        Some(sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat_n(b, s)).collect())
    }
}

#[derive(Serialize)]
struct Header<'a> {
    provenance: &'a Provenance,
    n_examples: usize,
    batch_sizes: Option<&'a [usize]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OwnedHeader {
    provenance: Provenance,
    n_examples: usize,
    batch_sizes: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    x: PromptId,
    y_w: ResponseId,
    y_l: ResponseId,
    label_margin: f64,
    batch_index: Option<usize>,
}

fn draw_distinct<F>(x: PromptId, mut draw: F) -> Result<(ResponseId, ResponseId)>
where
    F: FnMut() -> Result<(ResponseId, ResponseId)>,
{
    for _ in 0..RESAMPLE_CAP {
        let (a, b) = draw()?;
        if a != b {
            return Ok((a, b));
        }
    }
    Err(Error::Construction(format!(
        "could not draw two distinct responses at prompt {x} within {RESAMPLE_CAP} attempts"
    )))
}

/// Golden-labeled pairs with both responses drawn from `behavior`.
///
/// Degenerate draws (`y == y'`) are redrawn at the same prompt.
pub fn make_golden<B: ResponseDistribution + ?Sized>(
    world: &World,
    gm: &GoldenPreferenceModel,
    behavior: &B,
    n_examples: usize,
    rng: &mut LabRng,
    label_mode: LabelMode,
    seed_tag: u64,
) -> Result<PreferenceDataset> {
    if n_examples == 0 {
        return input("n_examples must be at least 1");
    }
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let x = world.sample_prompt(rng);
        let row = behavior.row(x)?;
        let (y1, y2) = draw_distinct(x, || {
            let a = crate::model::sample_categorical(&row, rng);
            let b = crate::model::sample_categorical(&row, rng);
            Ok((a, b))
        })?;
        let j = gm.sample_label(x, y1, y2, rng, label_mode)?;
        examples.push(LabeledPair {
            prompt: x,
            winner: j.winner,
            loser: j.loser,
            label_margin: j.margin,
        });
    }
    PreferenceDataset::new(examples, Provenance::Golden { seed: seed_tag }, None)
}

/// Flattens an online run's recorded batches, in order.
pub fn from_stream(run: &RunRecord) -> Result<PreferenceDataset> {
    if run.stream.is_empty() {
        return input("run has no recorded stream");
    }
    let mut examples = Vec::new();
    let mut sizes = Vec::with_capacity(run.stream.len());
    for batch in &run.stream {
        sizes.push(batch.examples.len());
        examples.extend(batch.examples.iter().map(|c| LabeledPair {
            prompt: c.prompt,
            winner: c.winner,
            loser: c.loser,
            label_margin: c.label_margin,
        }));
    }
    if examples.is_empty() {
        return input("run stream contains no labeled pairs");
    }
    PreferenceDataset::new(
        examples,
        Provenance::OnlineStream {
            run_id: run.run_id.clone(),
        },
        Some(sizes),
    )
}

/// Window size (in batches) for shuffle level `s` over `t` batches.
pub fn shuffle_window(level: f64, t: usize) -> usize {
    ((level * t as f64).ceil() as usize).max(1)
}

/// Windowed shuffle at batch granularity.
///
/// Batches are split into contiguous windows of `max(1, ceil(s * T))` and
/// each window is permuted uniformly. `s = 0` is the identity and `s = 1` a
/// uniform permutation of all batches. Datasets without batch structure are
/// treated as single-example batches.
pub fn shuffle_stream(ds: &PreferenceDataset, level: f64, rng: &mut LabRng, seed_tag: u64) -> Result<PreferenceDataset> {
    if !(0.0..=1.0).contains(&level) {
        return input(format!("shuffle level {level} outside [0, 1]"));
    }
    let ranges = ds
        .batch_ranges()
        .unwrap_or_else(|| (0..ds.len()).map(|i| i..i + 1).collect());
    let t = ranges.len();
    let w = shuffle_window(level, t);
    let mut order: Vec<usize> = (0..t).collect();
    for chunk in order.chunks_mut(w) {
        chunk.shuffle(rng);
    }
    let mut examples = Vec::with_capacity(ds.len());
    let mut sizes = Vec::with_capacity(t);
    for &b in &order {
        let r = ranges[b].clone();
        sizes.push(r.len());
        examples.extend_from_slice(&ds.examples()[r]);
    }
    let run_id = match ds.provenance() {
        Provenance::OnlineStream { run_id } | Provenance::Shuffled { run_id, .. } => run_id.clone(),
        _ => String::from("-"),
    };
    PreferenceDataset::new(
        examples,
        Provenance::Shuffled {
            run_id,
            level,
            seed: seed_tag,
            window: w,
        },
        ds.batch_sizes().map(|_| sizes),
    )
}

/// Pairs with one response from each generator, golden-labeled.
///
/// Which generator fills the first slot is a fair coin per example.
#[allow(clippy::too_many_arguments)]
pub fn make_policy_pair<A, B>(
    world: &World,
    gm: &GoldenPreferenceModel,
    gen_a: (&A, &str),
    gen_b: (&B, &str),
    n_examples: usize,
    rng: &mut LabRng,
    label_mode: LabelMode,
    seed_tag: u64,
) -> Result<PreferenceDataset>
where
    A: ResponseDistribution + ?Sized,
    B: ResponseDistribution + ?Sized,
{
    if n_examples == 0 {
        return input("n_examples must be at least 1");
    }
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let x = world.sample_prompt(rng);
        let row_a = gen_a.0.row(x)?;
        let row_b = gen_b.0.row(x)?;
        let (y1, y2) = draw_distinct(x, || {
            let a = crate::model::sample_categorical(&row_a, rng);
            let b = crate::model::sample_categorical(&row_b, rng);
            Ok(if rng.random::<bool>() { (a, b) } else { (b, a) })
        })?;
        let j = gm.sample_label(x, y1, y2, rng, label_mode)?;
        examples.push(LabeledPair {
            prompt: x,
            winner: j.winner,
            loser: j.loser,
            label_margin: j.margin,
        });
    }
    PreferenceDataset::new(
        examples,
        Provenance::PolicyPair {
            gen_a: gen_a.1.to_string(),
            gen_b: gen_b.1.to_string(),
            seed: seed_tag,
        },
        None,
    )
}
