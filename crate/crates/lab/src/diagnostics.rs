//! Per-row similarity against conditional probability, and same-class
//! collision rates by similarity rank.

use std::path::Path;

use hardneg_core::encoder::forward;
use hardneg_core::sampler::tilt_form_fit;
use hardneg_core::{DistributionKind, EmbeddingBatch, EncoderParams, Matrix, NegativeDistribution};

use crate::config::TrainConfig;
use crate::train::negative_distribution;
use crate::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct RankedEntry {
    pub row: usize,
    /// 0 for the most similar allowed column.
    pub rank: usize,
    pub column: usize,
    pub similarity: f64,
    pub probability: f64,
    /// Fitted column weight `w_j` of the tilt form `P(j|i) ~ exp(s_ij / eps) w_j`.
    pub column_weight: f64,
    pub same_class: Option<bool>,
}

/// Allowed entries of every row, sorted by decreasing similarity (ties by
/// column index).
pub fn ranked_entries(
    batch: &EmbeddingBatch,
    dist: &NegativeDistribution,
    column_weights: &[f64],
    labels: Option<&[usize]>,
) -> Vec<RankedEntry> {
    let sims = batch.similarities();
    let n = batch.len();
    let mut out = Vec::new();
    for i in 0..n {
        let mut cols: Vec<usize> = (0..n).filter(|&j| batch.is_allowed(i, j)).collect();
        cols.sort_by(|&x, &y| sims[(i, y)].total_cmp(&sims[(i, x)]).then(x.cmp(&y)));
        for (rank, &j) in cols.iter().enumerate() {
            out.push(RankedEntry {
                row: i,
                rank,
                column: j,
                similarity: sims[(i, j)],
                probability: dist.row(i)[j],
                column_weight: column_weights[j],
                same_class: labels.map(|l| l[i] == l[j]),
            });
        }
    }
    out
}

/// Fraction of adjacent pairs within a row whose probability does not
/// increase as similarity decreases.
pub fn monotone_fraction(entries: &[RankedEntry]) -> f64 {
    fraction_non_increasing(entries, 0.0, |e| e.probability)
}

/// Same as [`monotone_fraction`] after dividing out the column weights.
pub fn adjusted_monotone_fraction(entries: &[RankedEntry]) -> f64 {
    // the slack absorbs rounding when adjacent similarities tie
    fraction_non_increasing(entries, 1e-9, |e| e.probability / e.column_weight)
}

fn fraction_non_increasing(entries: &[RankedEntry], rel_slack: f64, key: impl Fn(&RankedEntry) -> f64) -> f64 {
    let mut pairs = 0usize;
    let mut ok = 0usize;
    for w in entries.windows(2) {
        if w[0].row == w[1].row {
            pairs += 1;
            if key(&w[1]) <= key(&w[0]) * (1.0 + rel_slack) {
                ok += 1;
            }
        }
    }
    if pairs == 0 {
        1.0
    } else {
        ok as f64 / pairs as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRate {
    pub rank: usize,
    pub same_class_rate: f64,
    pub count: usize,
}

/// Same-class fraction at each similarity rank, over rows with labels.
pub fn same_class_by_rank(entries: &[RankedEntry]) -> Vec<RankRate> {
    let max_rank = entries.iter().map(|e| e.rank + 1).max().unwrap_or(0);
    let mut hits = vec![0usize; max_rank];
    let mut counts = vec![0usize; max_rank];
    for e in entries {
        if let Some(same) = e.same_class {
            counts[e.rank] += 1;
            hits[e.rank] += usize::from(same);
        }
    }
    (0..max_rank)
        .filter(|&r| counts[r] > 0)
        .map(|r| RankRate {
            rank: r,
            same_class_rate: hits[r] as f64 / counts[r] as f64,
            count: counts[r],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub entries: Vec<RankedEntry>,
    pub by_rank: Vec<RankRate>,
    pub monotone_fraction: f64,
    pub adjusted_monotone_fraction: f64,
}

/// Column weights of the run's sampler on this batch: fitted for the OT
/// conditional, uniform otherwise.
fn column_weights(
    batch: &EmbeddingBatch,
    dist: &NegativeDistribution,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, HarnessError> {
    let n = batch.len();
    match cfg.sampler {
        DistributionKind::EntropicOt { epsilon } => Ok(tilt_form_fit(batch, dist, epsilon)?.column_weights),
        _ => Ok(vec![1.0 / n as f64; n]),
    }
}

/// Embeds `inputs` as one batch and compares similarities with the run's
/// negative distribution.
pub fn diagnose(
    params: &EncoderParams,
    inputs: &Matrix,
    cfg: &TrainConfig,
    labels: Option<&[usize]>,
) -> Result<Diagnostics, HarnessError> {
    if labels.is_some_and(|l| l.len() != inputs.rows()) {
        return Err(HarnessError::Config("one label per diagnostic row is required".into()));
    }
    let (batch, _) = forward(params, inputs)?;
    let dist = negative_distribution(&batch, cfg, None)?;
    let weights = column_weights(&batch, &dist, cfg)?;
    let entries = ranked_entries(&batch, &dist, &weights, labels);
    Ok(Diagnostics {
        by_rank: same_class_by_rank(&entries),
        monotone_fraction: monotone_fraction(&entries),
        adjusted_monotone_fraction: adjusted_monotone_fraction(&entries),
        entries,
    })
}

pub const SIMILARITY_FILE: &str = "similarity_vs_probability.csv";
pub const RANK_FILE: &str = "same_class_by_rank.csv";

/// Writes [`SIMILARITY_FILE`] and [`RANK_FILE`] into `dir`.
pub fn dump_diagnostics(
    params: &EncoderParams,
    inputs: &Matrix,
    cfg: &TrainConfig,
    labels: Option<&[usize]>,
    dir: &Path,
) -> Result<Diagnostics, HarnessError> {
    let d = diagnose(params, inputs, cfg, labels)?;
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(SIMILARITY_FILE)).map_err(crate::io::csv_error)?;
    w.write_record([
        "row",
        "rank",
        "column",
        "similarity",
        "probability",
        "column_weight",
        "same_class",
    ])
    .map_err(crate::io::csv_error)?;
    for e in &d.entries {
        let same = match e.same_class {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        w.write_record([
            e.row.to_string(),
            e.rank.to_string(),
            e.column.to_string(),
            format!("{:?}", e.similarity),
            format!("{:?}", e.probability),
            format!("{:?}", e.column_weight),
            same.to_string(),
        ])
        .map_err(crate::io::csv_error)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(RANK_FILE)).map_err(crate::io::csv_error)?;
    w.write_record(["rank", "same_class_rate", "count"])
        .map_err(crate::io::csv_error)?;
    for r in &d.by_rank {
        w.write_record([
            r.rank.to_string(),
            format!("{:?}", r.same_class_rate),
            r.count.to_string(),
        ])
        .map_err(crate::io::csv_error)?;
    }
    w.flush()?;
    Ok(d)
}
