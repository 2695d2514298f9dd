use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConditionResult, HarnessError};
use crate::analysis::{NmccType, RiskCategory};
use crate::bleu::{BleuScore, GainRow};
use crate::config::{json_diff, PipelineConfig};
use crate::corpus::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub size: usize,
    pub condition_hash: String,
    pub snapshot: serde_json::Value,
    pub mean_bleu: f64,
    pub completion: f64,
    /// (test_id, error) for every sentence without a scored translation.
    pub failures: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub size: usize,
    pub output_zh: Option<String>,
    pub bleu: Option<BleuScore>,
    pub a1: NmccType,
    pub a2: BTreeSet<RiskCategory>,
    pub hit_ids: Vec<String>,
}

/// One test sentence across every swept size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRow {
    pub test_id: String,
    pub cells: Vec<CellResult>,
}

impl SentenceRow {
    pub fn cell(&self, size: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.size == size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub config: PipelineConfig,
    pub kb_digest: String,
    pub test_digest: String,
    /// False when any condition is incomplete.
    pub valid: bool,
    pub rows: Vec<GainRow>,
    pub conditions: Vec<ConditionSummary>,
    pub per_sentence: Vec<SentenceRow>,
}

impl SweepReport {
    pub(super) fn assemble(
        cfg: &PipelineConfig,
        test: &Corpus,
        kb: &Corpus,
        rows: Vec<GainRow>,
        conditions: &[ConditionResult],
    ) -> Self {
        let per_sentence = test
            .pairs
            .iter()
            .enumerate()
            .map(|(i, pair)| SentenceRow {
                test_id: pair.id.clone(),
                cells: conditions
                    .iter()
                    .map(|c| {
                        let s = &c.sentences[i];
                        CellResult {
                            size: c.size,
                            output_zh: s.output_zh.clone(),
                            bleu: s.bleu.clone(),
                            a1: s.a1,
                            a2: s.a2.clone(),
                            hit_ids: s.hits.iter().map(|h| h.pair_id.clone()).collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        let summaries: Vec<ConditionSummary> = conditions
            .iter()
            .map(|c| ConditionSummary {
                size: c.size,
                condition_hash: c.condition_hash.clone(),
                snapshot: c.snapshot.clone(),
                mean_bleu: c.mean_bleu,
                completion: c.completion,
                failures: c
                    .sentences
                    .iter()
                    .filter_map(|s| s.error.as_ref().map(|e| (s.test_id.clone(), e.clone())))
                    .collect(),
            })
            .collect();
        SweepReport {
            config_hash: cfg.hash(),
            config: cfg.clone(),
            kb_digest: kb.digest(),
            test_digest: test.digest(),
            valid: conditions.iter().all(ConditionResult::is_complete),
            rows,
            conditions: summaries,
            per_sentence,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.conditions.iter().map(|c| c.size).collect()
    }

    pub fn row(&self, test_id: &str) -> Option<&SentenceRow> {
        self.per_sentence.iter().find(|r| r.test_id == test_id)
    }
}

/// Checks that condition snapshots differ only in the knowledge-base size.
/// Returns the offending paths otherwise.
pub fn verify_control(report: &SweepReport) -> Result<(), Vec<String>> {
    let Some(first) = report.conditions.first() else {
        return Ok(());
    };
    let mut bad: Vec<String> = report
        .conditions
        .iter()
        .skip(1)
        .flat_map(|c| json_diff(&first.snapshot, &c.snapshot))
        .filter(|p| p != "kb_size")
        .collect();
    bad.sort();
    bad.dedup();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}

/// Resolves the configured case selection against a report: empty ids mean
/// the first two sentences, empty sizes mean {0, 200, 2000} where swept, or
/// every swept size if none of those were.
pub fn default_case_selection(report: &SweepReport) -> (Vec<String>, Vec<usize>) {
    let cases = &report.config.cases;
    let ids = if cases.ids.is_empty() {
        report.per_sentence.iter().take(2).map(|r| r.test_id.clone()).collect()
    } else {
        cases.ids.clone()
    };
    let swept = report.sizes();
    let sizes = if !cases.sizes.is_empty() {
        cases.sizes.clone()
    } else {
        let preferred: Vec<usize> = [0, 200, 2000].into_iter().filter(|s| swept.contains(s)).collect();
        if preferred.len() > 1 {
            preferred
        } else {
            swept
        }
    };
    (ids, sizes)
}

/// One three-column table per sentence: size, BLEU, output.
pub fn case_report(report: &SweepReport, ids: &[String], sizes: &[usize]) -> Result<String, HarnessError> {
    let mut out = String::new();
    for id in ids {
        let row = report
            .row(id)
            .ok_or_else(|| HarnessError::UnknownCase(format!("test id {id}")))?;
        let _ = writeln!(out, "### {id}\n");
        out.push_str("| RAG size | BLEU | Target-language output (Chinese) |\n");
        out.push_str("|---|---|---|\n");
        for &size in sizes {
            let cell = row
                .cell(size)
                .ok_or_else(|| HarnessError::UnknownCase(format!("size {size}")))?;
            let bleu = cell
                .bleu
                .as_ref()
                .map_or_else(|| "—".to_string(), |b| format!("{:.2}", b.score));
            let text = cell.output_zh.as_deref().unwrap_or("(no output)").replace('|', "\\|");
            let _ = writeln!(out, "| RAG={size} | {bleu} | {text} |");
        }
        out.push('\n');
    }
    Ok(out)
}

fn size_label(size: usize) -> String {
    if size == 0 {
        "0 (RAG disabled)".to_string()
    } else {
        size.to_string()
    }
}

fn abs_cell(row: &GainRow) -> String {
    row.abs_gain.map_or_else(|| "—".to_string(), |g| format!("{g:+.2}"))
}

fn rel_cell(row: &GainRow) -> String {
    row.rel_gain_pct
        .map_or_else(|| "—".to_string(), |g| format!("{g:+.1}%"))
}

pub fn table1_markdown(rows: &[GainRow], config_hash: &str) -> String {
    let mut out = String::new();
    out.push_str("| RAG size | Average BLEU | Absolute gain vs. baseline (RAG disabled) | Relative gain vs. baseline (RAG disabled, %) |\n");
    out.push_str("|---|---|---|---|\n");
    for row in rows {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {} | {} |",
            size_label(row.size),
            row.mean_bleu,
            abs_cell(row),
            rel_cell(row)
        );
    }
    let _ = writeln!(out, "\nconfig_hash: {config_hash}");
    out
}

pub fn table1_csv(rows: &[GainRow], config_hash: &str) -> String {
    let mut out = String::from("rag_size,average_bleu,absolute_gain,relative_gain_pct,config_hash\n");
    for row in rows {
        let abs = row.abs_gain.map(|g| format!("{g:+.2}")).unwrap_or_default();
        let rel = row.rel_gain_pct.map(|g| format!("{g:+.1}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.2},{abs},{rel},{config_hash}", row.size, row.mean_bleu);
    }
    out
}

fn scores_jsonl(report: &SweepReport) -> String {
    let mut out = String::new();
    for row in &report.per_sentence {
        for cell in &row.cells {
            let line = serde_json::json!({
                "kind": "sentence",
                "test_id": row.test_id,
                "size": cell.size,
                "score": cell.bleu.as_ref().map(|b| b.score),
                "precisions": cell.bleu.as_ref().map(|b| b.precisions),
                "bp": cell.bleu.as_ref().map(|b| b.bp),
                "hyp_len": cell.bleu.as_ref().map(|b| b.hyp_len),
                "ref_len": cell.bleu.as_ref().map(|b| b.ref_len),
                "epsilon": report.config.smoothing_epsilon,
                "config_hash": report.config_hash,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
    }
    for c in &report.conditions {
        let line = serde_json::json!({
            "kind": "summary",
            "size": c.size,
            "mean_bleu": c.mean_bleu,
            "completion": c.completion,
            "epsilon": report.config.smoothing_epsilon,
            "config_hash": report.config_hash,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// Writes report.json, table1.md, table1.csv, cases.md and scores.jsonl.
pub fn write_artifacts(report: &SweepReport, dir: &Path) -> Result<(), HarnessError> {
    let io = |e: std::io::Error| HarnessError::Io(e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Io(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json + "\n").map_err(io)?;
    std::fs::write(
        dir.join("table1.md"),
        table1_markdown(&report.rows, &report.config_hash),
    )
    .map_err(io)?;
    std::fs::write(dir.join("table1.csv"), table1_csv(&report.rows, &report.config_hash)).map_err(io)?;
    let (ids, sizes) = default_case_selection(report);
    let cases = format!(
        "config_hash: {}\n\n{}",
        report.config_hash,
        case_report(report, &ids, &sizes)?
    );
    std::fs::write(dir.join("cases.md"), cases).map_err(io)?;
    std::fs::write(dir.join("scores.jsonl"), scores_jsonl(report)).map_err(io)?;
    Ok(())
}
