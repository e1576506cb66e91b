//! Metric-report documents: JSON + TSV emission, loading, aggregate tables
//! and pairwise win rates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use celldiff_core::data::Dataset;
use celldiff_core::denoiser::Condition;
use celldiff_core::eval::{Metric, MetricReport};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// `context:perturbation`, with `@dose` appended when present.
pub fn condition_label(ds: &Dataset, c: &Condition) -> String {
    let pert = c.perturbation.map(|p| ds.perturbations[p].as_str()).unwrap_or("null");
    match c.dose {
        Some(d) => format!("{}:{}@{}", ds.contexts[c.context], pert, ds.doses[d]),
        None => format!("{}:{}", ds.contexts[c.context], pert),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub condition: String,
    pub values: BTreeMap<String, Option<f64>>,
    pub n_de_true: usize,
    pub n_de_pred: usize,
}

impl PerturbationRow {
    pub fn value(&self, m: Metric) -> Option<f64> {
        self.values.get(m.name()).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub source: String,
    pub split: String,
    /// Mean of each metric over the perturbations where it is defined.
    pub metrics: BTreeMap<String, Option<f64>>,
    /// Per metric, perturbations where it was undefined.
    pub undefined: BTreeMap<String, usize>,
    pub effect_size: Option<f64>,
    /// Conditions in the truth with no prediction.
    pub skipped: Vec<String>,
    pub per_perturbation: Vec<PerturbationRow>,
}

impl ReportDoc {
    pub fn new(source: &str, split: &str, ds: &Dataset, report: &MetricReport, skipped: Vec<String>) -> Self {
        let metrics = Metric::ALL.iter().map(|m| (m.name().to_string(), report.mean(*m))).collect();
        let undefined = Metric::ALL.iter().map(|m| (m.name().to_string(), report.skipped(*m))).collect();
        let per_perturbation = report
            .per_perturbation
            .iter()
            .map(|row| PerturbationRow {
                condition: condition_label(ds, &row.condition),
                values: Metric::ALL.iter().map(|m| (m.name().to_string(), row.get(*m))).collect(),
                n_de_true: row.n_de_true,
                n_de_pred: row.n_de_pred,
            })
            .collect();
        Self {
            source: source.to_string(),
            split: split.to_string(),
            metrics,
            undefined,
            effect_size: report.effect_size,
            skipped,
            per_perturbation,
        }
    }

    pub fn metric(&self, m: Metric) -> Option<f64> {
        self.metrics.get(m.name()).copied().flatten()
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::format(path, e.line(), e.to_string()))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NaN".into())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Histogram bin width for `-log10(p_adj)` scores.
pub const SCORE_BIN: f64 = 1.0;

/// Writes `<source>.report.json`, `.per_perturbation.tsv`, `.scores.tsv`
/// and `.histogram.tsv` into `dir`; returns the JSON path.
pub fn write_report(dir: &Path, doc: &ReportDoc, report: &MetricReport, ds: &Dataset) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let json_path = dir.join(format!("{}.report.json", doc.source));
    let json = serde_json::to_string_pretty(doc).map_err(|e| CliError::Config(e.to_string()))?;
    write(&json_path, &(json + "\n"))?;

    let mut tsv = String::from("condition");
    for m in Metric::ALL {
        tsv.push('\t');
        tsv.push_str(m.name());
    }
    tsv.push_str("\tn_de_true\tn_de_pred\n");
    for row in &doc.per_perturbation {
        tsv.push_str(&row.condition);
        for m in Metric::ALL {
            tsv.push('\t');
            tsv.push_str(&fmt_opt(row.value(m)));
        }
        let _ = writeln!(tsv, "\t{}\t{}", row.n_de_true, row.n_de_pred);
    }
    write(&dir.join(format!("{}.per_perturbation.tsv", doc.source)), &tsv)?;

    let mut scores = String::from("condition\tgene\tde_true\tscore_true\tscore_pred\n");
    let mut hist: BTreeMap<usize, [usize; 4]> = BTreeMap::new();
    let threshold = -celldiff_core::eval::de::SIGNIFICANCE.log10();
    for (row, doc_row) in report.per_perturbation.iter().zip(&doc.per_perturbation) {
        let labels: Vec<bool> = row.scores_true.iter().map(|&s| s > threshold).collect();
        for (g, ((st, sp), de)) in row.scores_true.iter().zip(&row.scores_pred).zip(&labels).enumerate() {
            let _ = writeln!(scores, "{}\t{}\t{}\t{:.6}\t{:.6}", doc_row.condition, ds.genes[g], *de as u8, st, sp);
            let offset = if *de { 0 } else { 1 };
            hist.entry((st / SCORE_BIN) as usize).or_default()[offset] += 1;
            hist.entry((sp / SCORE_BIN) as usize).or_default()[2 + offset] += 1;
        }
    }
    write(&dir.join(format!("{}.scores.tsv", doc.source)), &scores)?;
    let mut h = String::from("bin_lo\tbin_hi\ttrue_de\ttrue_non_de\tpred_on_de\tpred_on_non_de\n");
    for (bin, c) in hist {
        let lo = bin as f64 * SCORE_BIN;
        let _ = writeln!(h, "{lo}\t{}\t{}\t{}\t{}\t{}", lo + SCORE_BIN, c[0], c[1], c[2], c[3]);
    }
    write(&dir.join(format!("{}.histogram.tsv", doc.source)), &h)?;
    Ok(json_path)
}

/// One row per source with every aggregate metric: the data behind a radar plot.
pub fn aggregate_csv(docs: &[ReportDoc]) -> String {
    let mut out = String::from("method");
    for m in Metric::ALL {
        out.push(',');
        out.push_str(m.name());
    }
    out.push_str(",es\n");
    let mut sorted: Vec<&ReportDoc> = docs.iter().collect();
    sorted.sort_by(|a, b| a.source.cmp(&b.source));
    for d in sorted {
        out.push_str(&d.source);
        for m in Metric::ALL {
            out.push(',');
            out.push_str(&fmt_opt(d.metric(m)));
        }
        let _ = writeln!(out, ",{}", fmt_opt(d.effect_size));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WinRate {
    pub wins: usize,
    /// Conditions where both sides define the metric.
    pub compared: usize,
}

impl WinRate {
    pub fn rate(&self) -> Option<f64> {
        (self.compared > 0).then(|| self.wins as f64 / self.compared as f64)
    }
}

/// Per metric, how often `a` is at least as good as `b` on shared conditions
/// (`≥` for similarity metrics, `≤` for errors).
pub fn win_rates(a: &ReportDoc, b: &ReportDoc) -> BTreeMap<Metric, WinRate> {
    let b_rows: BTreeMap<&str, &PerturbationRow> =
        b.per_perturbation.iter().map(|r| (r.condition.as_str(), r)).collect();
    let mut out = BTreeMap::new();
    for m in Metric::ALL {
        let mut w = WinRate { wins: 0, compared: 0 };
        for ra in &a.per_perturbation {
            let Some(rb) = b_rows.get(ra.condition.as_str()) else { continue };
            let (Some(x), Some(y)) = (ra.value(m), rb.value(m)) else { continue };
            w.compared += 1;
            if (m.is_error() && x <= y) || (!m.is_error() && x >= y) {
                w.wins += 1;
            }
        }
        out.insert(m, w);
    }
    out
}

/// Conditions present in every report, and whether any report had others.
pub fn shared_conditions(docs: &[ReportDoc]) -> (BTreeSet<String>, bool) {
    let sets: Vec<BTreeSet<String>> =
        docs.iter().map(|d| d.per_perturbation.iter().map(|r| r.condition.clone()).collect()).collect();
    let Some(first) = sets.first() else { return (BTreeSet::new(), false) };
    let shared: BTreeSet<String> = sets.iter().skip(1).fold(first.clone(), |acc, s| &acc & s);
    let differs = sets.iter().any(|s| s.len() != shared.len());
    (shared, differs)
}

/// Restricts a report to the given conditions, recomputing the means.
pub fn restrict(doc: &ReportDoc, keep: &BTreeSet<String>) -> ReportDoc {
    let rows: Vec<PerturbationRow> = doc.per_perturbation.iter().filter(|r| keep.contains(&r.condition)).cloned().collect();
    let mut metrics = BTreeMap::new();
    let mut undefined = BTreeMap::new();
    for m in Metric::ALL {
        let (mean, skip) = celldiff_core::eval::metrics::mean_defined(rows.iter().map(|r| r.value(m)));
        metrics.insert(m.name().to_string(), mean);
        undefined.insert(m.name().to_string(), skip);
    }
    let t: Vec<usize> = rows.iter().map(|r| r.n_de_true).collect();
    let p: Vec<usize> = rows.iter().map(|r| r.n_de_pred).collect();
    ReportDoc {
        metrics,
        undefined,
        effect_size: celldiff_core::eval::de::effect_size_corr(&t, &p),
        per_perturbation: rows,
        ..doc.clone()
    }
}

/// Markdown summary: aggregate table sorted by method, then win rates for each ordered pair.
pub fn render_markdown(docs: &[ReportDoc]) -> String {
    let (shared, differs) = shared_conditions(docs);
    let docs: Vec<ReportDoc> = docs.iter().map(|d| restrict(d, &shared)).collect();
    let mut out = String::from("# Evaluation summary\n\n");
    if differs {
        let _ = writeln!(out, "Reports cover different conditions; using the {} shared ones.\n", shared.len());
    }
    out.push_str("| method |");
    for m in Metric::ALL {
        let _ = write!(out, " {} |", m.name());
    }
    out.push_str(" es |\n|---|");
    for _ in 0..=Metric::ALL.len() {
        out.push_str("---|");
    }
    out.push('\n');
    let mut sorted: Vec<&ReportDoc> = docs.iter().collect();
    sorted.sort_by(|a, b| a.source.cmp(&b.source));
    for d in &sorted {
        let _ = write!(out, "| {} |", d.source);
        for m in Metric::ALL {
            let _ = write!(out, " {} |", fmt_opt(d.metric(m)));
        }
        let _ = writeln!(out, " {} |", fmt_opt(d.effect_size));
    }
    if sorted.len() > 1 {
        out.push_str("\n## Win rates\n\nFraction of conditions where the first method is at least as good as the second.\n\n");
        out.push_str("| pair |");
        for m in Metric::ALL {
            let _ = write!(out, " {} |", m.name());
        }
        out.push_str("\n|---|");
        for _ in Metric::ALL {
            out.push_str("---|");
        }
        out.push('\n');
        for a in &sorted {
            for b in &sorted {
                if a.source == b.source {
                    continue;
                }
                let w = win_rates(a, b);
                let _ = write!(out, "| {} vs {} |", a.source, b.source);
                for m in Metric::ALL {
                    let _ = write!(out, " {} |", fmt_opt(w[&m].rate()));
                }
                out.push('\n');
            }
        }
    }
    out
}
