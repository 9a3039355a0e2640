//! Machine-readable report bundle: score histograms, the transition-matrix
//! heatmap, per-dataset selection proportions, the diversity-score
//! distribution, and the cross-rater overlap table.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use crate::corpus::Corpus;
use crate::curation::CuratedRow;
use crate::consensus::TransitionEstimate;
use crate::rater::ScoreRow;
use crate::NUM_SCORE_CLASSES;

use super::{Pipeline, PipelineError};

pub(crate) struct ReportInputs {
    pub corpus: Corpus,
    pub raw: Vec<ScoreRow>,
    pub curated: Option<Vec<CuratedRow>>,
    pub transition: Option<TransitionEstimate>,
    pub diversity: Option<Vec<(String, f64)>>,
    pub selection: Option<Vec<SelectionMetaRow>>,
    pub compare: Option<Vec<ScoreRow>>,
    pub seed: u64,
}

/// The per-line metadata read back from a selected-subset file.
pub(crate) struct SelectionMetaRow {
    pub dataset: String,
}

#[derive(Deserialize)]
struct SelectedLineIn {
    dataset: String,
}

pub(crate) fn read_selection_meta(path: &Path) -> std::io::Result<Vec<SelectionMetaRow>> {
    let file = fs::File::open(path)?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SelectedLineIn = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        rows.push(SelectionMetaRow {
            dataset: parsed.dataset,
        });
    }
    Ok(rows)
}

/// Everything the `report` stage writes, assembled in memory first.
pub struct ReportBundle {
    pub summary: serde_json::Value,
    csvs: Vec<(String, String)>,
}

impl ReportBundle {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut file = fs::File::create(dir.join("report.json"))?;
        writeln!(
            file,
            "{}",
            serde_json::to_string_pretty(&self.summary).expect("report serialisation")
        )?;
        for (name, body) in &self.csvs {
            fs::write(dir.join(name), body)?;
        }
        Ok(())
    }
}

fn score_histogram<'a>(scores: impl Iterator<Item = &'a u8>) -> Vec<usize> {
    let mut hist = vec![0usize; NUM_SCORE_CLASSES];
    for &score in scores {
        hist[(score as usize).min(NUM_SCORE_CLASSES - 1)] += 1;
    }
    hist
}

fn histogram_csv(hist: &[usize]) -> String {
    let mut out = String::from("score,count\n");
    for (score, count) in hist.iter().enumerate() {
        out.push_str(&format!("{score},{count}\n"));
    }
    out
}

pub(crate) fn write_transition_csv(path: &Path, t: &[Vec<f64>]) -> std::io::Result<()> {
    fs::write(path, transition_csv(t))
}

fn transition_csv(t: &[Vec<f64>]) -> String {
    let k = t.len();
    let mut out = String::from("true\\observed");
    for j in 0..k {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for (i, row) in t.iter().enumerate() {
        out.push_str(&i.to_string());
        for value in row {
            out.push_str(&format!(",{value:.6}"));
        }
        out.push('\n');
    }
    out
}

fn diversity_histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = 0.0f64;
    let hi = 2.0f64;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let bin = (((v - lo) / width) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// Cross-tab of two score files joined by id: `overlap[a][b]` counts ids
/// rated `a` by the primary rater and `b` by the comparison rater.
fn overlap_table(primary: &[ScoreRow], other: &[ScoreRow]) -> Vec<Vec<usize>> {
    let mut by_id: std::collections::HashMap<&str, u8> = std::collections::HashMap::new();
    for row in other {
        by_id.insert(row.id.as_str(), row.score);
    }
    let mut table = vec![vec![0usize; NUM_SCORE_CLASSES]; NUM_SCORE_CLASSES];
    for row in primary {
        if let Some(&theirs) = by_id.get(row.id.as_str()) {
            table[row.score as usize][theirs as usize] += 1;
        }
    }
    table
}

pub(crate) fn build(pipeline: &Pipeline) -> Result<ReportBundle, PipelineError> {
    let inputs = pipeline.report_inputs()?;
    let mut csvs: Vec<(String, String)> = Vec::new();

    let raw_hist = score_histogram(inputs.raw.iter().map(|r| &r.score));
    csvs.push(("hist_raw.csv".into(), histogram_csv(&raw_hist)));

    let curated_hist = inputs.curated.as_ref().map(|rows| {
        let hist = score_histogram(rows.iter().map(|r| &r.curated));
        csvs.push(("hist_curated.csv".into(), histogram_csv(&hist)));
        hist
    });

    if let Some(estimate) = &inputs.transition {
        csvs.push(("transition.csv".into(), transition_csv(&estimate.t)));
    }

    let diversity_summary = inputs.diversity.as_ref().map(|rows| {
        let values: Vec<f64> = rows.iter().map(|(_, v)| *v).collect();
        let hist = diversity_histogram(&values, 20);
        let mut csv = String::from("bin_low,bin_high,count\n");
        for (lo, hi, count) in &hist {
            csv.push_str(&format!("{lo:.3},{hi:.3},{count}\n"));
        }
        csvs.push(("diversity_hist.csv".into(), csv));
        let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        serde_json::json!({"mean": mean, "min": min, "max": max, "count": values.len()})
    });

    let selection_summary = inputs.selection.as_ref().map(|rows| {
        let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
        for row in rows {
            *counts.entry(row.dataset.as_str()).or_default() += 1;
        }
        let total = rows.len().max(1);
        let mut csv = String::from("dataset,count,share\n");
        let shares: Vec<serde_json::Value> = counts
            .iter()
            .map(|(dataset, count)| {
                let share = *count as f64 / total as f64;
                csv.push_str(&format!("{dataset},{count},{share:.4}\n"));
                serde_json::json!({"dataset": dataset, "count": count, "share": share})
            })
            .collect();
        csvs.push(("dataset_proportions.csv".into(), csv));
        serde_json::json!({"selected": rows.len(), "proportions": shares})
    });

    let overlap_summary = inputs.compare.as_ref().map(|other| {
        let table = overlap_table(&inputs.raw, other);
        let mut csv = String::from("primary\\compare");
        for j in 0..NUM_SCORE_CLASSES {
            csv.push_str(&format!(",{j}"));
        }
        csv.push('\n');
        for (i, row) in table.iter().enumerate() {
            csv.push_str(&i.to_string());
            for count in row {
                csv.push_str(&format!(",{count}"));
            }
            csv.push('\n');
        }
        csvs.push(("overlap.csv".into(), csv));
        let agree: usize = (0..NUM_SCORE_CLASSES).map(|i| table[i][i]).sum();
        let both_top = table[NUM_SCORE_CLASSES - 1][NUM_SCORE_CLASSES - 1];
        serde_json::json!({
            "table": table,
            "agreements": agree,
            "both_rated_5": both_top,
        })
    });

    let unrated = inputs
        .raw
        .iter()
        .filter(|r| r.status == crate::rater::ScoreStatus::Unrated)
        .count();
    let corrected = inputs.curated.as_ref().map(|rows| {
        rows.iter().filter(|r| r.curated != r.original).count()
    });

    let summary = serde_json::json!({
        "samples": inputs.corpus.len(),
        "seed": inputs.seed,
        "raw_histogram": raw_hist,
        "curated_histogram": curated_hist,
        "unrated": unrated,
        "corrected": corrected,
        "transition": inputs.transition.as_ref().map(|e| serde_json::json!({
            "T": e.t, "p": e.p, "residual": e.residual, "converged": e.converged,
        })),
        "diversity": diversity_summary,
        "selection": selection_summary,
        "overlap": overlap_summary,
    });

    Ok(ReportBundle { summary, csvs })
}
