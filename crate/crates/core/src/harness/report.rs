//! Report emission: CSV artifacts and a markdown summary table.
//!
//! `results.csv` holds one row per (model, test domain);
//! `episode_accuracies.csv` persists every per-episode accuracy so each
//! aggregate is recomputable; `coefficients.csv` holds the mixture
//! coefficient statistics of the weighted ensemble.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::eval::EvalResult;

pub const RESULTS_CSV: &str = "results.csv";
pub const COEFFICIENTS_CSV: &str = "coefficients.csv";
pub const EPISODES_CSV: &str = "episode_accuracies.csv";
pub const REPORT_MD: &str = "report.md";

pub fn results_csv(results: &[EvalResult]) -> String {
    let mut out = String::from(
        "model,train_domains,test_domain,n_way,k_shot,queries,episodes,mean_acc,ci95\n",
    );
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{:.6}\n",
            r.model,
            r.train_domains,
            r.test_domain,
            r.n_way,
            r.k_shot,
            r.queries,
            r.episodes,
            r.mean_acc,
            r.ci95
        ));
    }
    out
}

/// Coefficient rows come from the transductive mixture when it was
/// evaluated, otherwise from the non-transductive one.
pub fn coefficients_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("test_domain,learner,weight_mean,weight_std,episodes\n");
    let mut domains: Vec<&str> = results.iter().map(|r| r.test_domain.as_str()).collect();
    domains.dedup();
    for domain in domains {
        let source = results
            .iter()
            .find(|r| {
                r.test_domain == domain && r.model == "mxml_trans" && r.coefficients.is_some()
            })
            .or_else(|| {
                results
                    .iter()
                    .find(|r| r.test_domain == domain && r.coefficients.is_some())
            });
        if let Some(r) = source {
            for stat in r.coefficients.as_ref().expect("filtered on is_some") {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{}\n",
                    domain, stat.learner, stat.mean, stat.std, r.episodes
                ));
            }
        }
    }
    out
}

pub fn episode_accuracies_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("model,train_domains,test_domain,episode,accuracy\n");
    for r in results {
        for (i, acc) in r.per_episode.iter().enumerate() {
            // Full round-trip precision, so every aggregate is exactly
            // recomputable from this file.
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.model, r.train_domains, r.test_domain, i, acc
            ));
        }
    }
    out
}

/// Markdown table: one row per (model, train domains), one column per
/// meta-test domain, cells `mean (ci)`.
pub fn report_markdown(results: &[EvalResult]) -> String {
    let mut domains: Vec<&str> = Vec::new();
    for r in results {
        if !domains.contains(&r.test_domain.as_str()) {
            domains.push(&r.test_domain);
        }
    }
    let mut rows: Vec<(String, String)> = Vec::new();
    for r in results {
        let key = (r.model.clone(), r.train_domains.clone());
        if !rows.contains(&key) {
            rows.push(key);
        }
    }

    let mut out = String::from("# Evaluation summary\n\n");
    out.push_str("Accuracy percent, 95% confidence half-width in parentheses.\n\n");
    out.push_str("| model | meta-train |");
    for d in &domains {
        out.push_str(&format!(" {d} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(domains.len()));
    out.push('\n');
    for (model, train) in &rows {
        out.push_str(&format!("| {model} | {train} |"));
        for d in &domains {
            let cell = results
                .iter()
                .find(|r| &r.model == model && &r.train_domains == train && r.test_domain == *d)
                .map(|r| format!(" {:.2} ({:.2}) |", r.mean_acc, r.ci95))
                .unwrap_or_else(|| " - |".to_string());
            out.push_str(&cell);
        }
        out.push('\n');
    }
    out
}

/// Write all report artifacts into the output directory.
pub fn emit_report(results: &[EvalResult], out_dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::invalid("emit_report", "no evaluation results"));
    }
    let write = |name: &str, content: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(RESULTS_CSV, results_csv(results))?;
    write(COEFFICIENTS_CSV, coefficients_csv(results))?;
    write(EPISODES_CSV, episode_accuracies_csv(results))?;
    write(REPORT_MD, report_markdown(results))?;
    Ok(())
}

/// Parsed row of `results.csv` (for verification and the `report`
/// subcommand).
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub model: String,
    pub train_domains: String,
    pub test_domain: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

pub fn parse_results_csv(text: &str, origin: &str) -> Result<Vec<ResultsRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "model,train_domains,test_domain,n_way,k_shot,queries,episodes,mean_acc,ci95" {
        return Err(Error::malformed(
            origin,
            format!("unknown header '{header}'"),
        ));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::malformed(origin, format!("line {}: bad row", i + 2)));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::malformed(origin, format!("line {}: bad integer '{s}'", i + 2)))
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::malformed(origin, format!("line {}: bad float '{s}'", i + 2)))
        };
        rows.push(ResultsRow {
            model: f[0].to_string(),
            train_domains: f[1].to_string(),
            test_domain: f[2].to_string(),
            n_way: parse_usize(f[3])?,
            k_shot: parse_usize(f[4])?,
            queries: parse_usize(f[5])?,
            episodes: parse_usize(f[6])?,
            mean_acc: parse_f64(f[7])?,
            ci95: parse_f64(f[8])?,
        });
    }
    Ok(rows)
}
