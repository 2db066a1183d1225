//! Word-level evaluation metrics and reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::model::ProminenceModel;

pub const PROBABILITY_CLAMP: f64 = 1e-6;

/// Sample Pearson correlation.
pub fn pearson(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} predictions, {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Metric("need at least two values".into()));
    }
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_t = target.iter().sum::<f64>() / n;
    let (mut cov, mut var_p, mut var_t) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mean_p, t - mean_t);
        cov += dp * dt;
        var_p += dp * dp;
        var_t += dt * dt;
    }
    if var_p == 0.0 || var_t == 0.0 || !(var_p * var_t).is_finite() {
        let which = if var_p == 0.0 { "predictions" } else { "targets" };
        return Err(Error::UndefinedCorrelation(format!("{which} are constant")));
    }
    Ok((cov / (var_p.sqrt() * var_t.sqrt())).clamp(-1.0, 1.0))
}

/// Mean binary cross-entropy between predicted probabilities (clamped to
/// `[1e-6, 1 - 1e-6]`) and target probabilities.
pub fn bce_metric(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Metric(format!(
            "length mismatch: {} predictions, {} targets",
            pred.len(),
            target.len()
        )));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub pearson: f64,
    pub bce: f64,
    pub word_count: usize,
    pub utterance_count: usize,
    /// Utterances without targets, excluded from the metrics.
    pub skipped: Vec<String>,
}

/// Word prominence predictions for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtterancePrediction {
    pub id: String,
    pub tokens: Vec<String>,
    pub prominence: Vec<f64>,
}

pub fn predict(model: &ProminenceModel, examples: &[Example]) -> Result<Vec<UtterancePrediction>> {
    examples
        .par_iter()
        .map(|example| {
            let output = model.forward(example.mel.mapv(f64::from).view(), &example.spans)?;
            Ok(UtterancePrediction {
                id: example.id.clone(),
                tokens: example.spans.iter().map(|s| s.token.clone()).collect(),
                prominence: output.word_prominence(),
            })
        })
        .collect()
}

/// Pools predictions and targets over all words of the annotated examples.
pub fn pooled(predictions: &[UtterancePrediction], examples: &[Example]) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let (mut pred, mut target, mut skipped) = (Vec::new(), Vec::new(), Vec::new());
    for (p, example) in predictions.iter().zip(examples) {
        match &example.targets {
            Some(t) => {
                pred.extend_from_slice(&p.prominence);
                target.extend_from_slice(t);
            }
            None => skipped.push(example.id.clone()),
        }
    }
    (pred, target, skipped)
}

/// Runs inference over every example and scores the pooled word population.
pub fn evaluate(model: &ProminenceModel, examples: &[Example], dataset_id: &str) -> Result<EvalReport> {
    let predictions = predict(model, examples)?;
    let (pred, target, skipped) = pooled(&predictions, examples);
    for id in &skipped {
        log::warn!("utterance `{id}` has no targets; skipped");
    }
    if pred.is_empty() {
        return Err(Error::Metric(format!("no annotated words in `{dataset_id}`")));
    }
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        pearson: pearson(&pred, &target)?,
        bce: bce_metric(&pred, &target)?,
        word_count: pred.len(),
        utterance_count: examples.len() - skipped.len(),
        skipped,
    })
}

/// One table row: a system name and its report on each dataset (in column
/// order). `None` cells, or a missing BCE for systems without probabilistic
/// output, render as `--`.
#[derive(Debug, Clone)]
pub struct TableRow {
    pub system: String,
    pub cells: Vec<Option<(f64, Option<f64>)>>,
}

/// Plain-text table with a PC and BCE column per dataset.
pub fn render_table(datasets: &[&str], rows: &[TableRow]) -> String {
    let name_width = rows.iter().map(|r| r.system.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:name_width$}", "");
    for d in datasets {
        let _ = write!(out, " | {d:^15}");
    }
    out.push('\n');
    let _ = write!(out, "{:name_width$}", "Model");
    for _ in datasets {
        let _ = write!(out, " | {:>7} {:>7}", "PC", "BCE");
    }
    out.push('\n');
    out.push_str(&"-".repeat(name_width + datasets.len() * 18));
    out.push('\n');
    let cell = |v: Option<f64>| v.map_or("--".to_string(), |v| format!("{v:.3}"));
    for row in rows {
        let _ = write!(out, "{:name_width$}", row.system);
        for c in 0..datasets.len() {
            let (pc, bce) = match row.cells.get(c).copied().flatten() {
                Some((pc, bce)) => (Some(pc), bce),
                None => (None, None),
            };
            let _ = write!(out, " | {:>7} {:>7}", cell(pc), cell(bce));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        let t = [0.1, 0.5, 0.2, 0.9];
        assert!((pearson(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = t.iter().map(|x| 3.0 * x + 2.0).collect();
        assert!((pearson(&scaled, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 0.5]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(matches!(pearson(&[1.0], &[1.0]), Err(Error::Metric(_))));
        assert!(pearson(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn bce_examples() {
        let half = bce_metric(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_metric(&[0.9], &[1.0]).unwrap() + 0.9f64.ln()).abs() < 1e-12);
        let perfect = bce_metric(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!(perfect > 0.0 && perfect < 2e-6);
        assert!(bce_metric(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn table_layout() {
        let rows = [
            TableRow {
                system: "Proposed".into(),
                cells: vec![Some((0.675, Some(0.337))), Some((0.534, Some(0.358)))],
            },
            TableRow {
                system: "Wavelet".into(),
                cells: vec![Some((0.529, None)), None],
            },
        ];
        let text = render_table(&["Buckeye", "LibriTTS"], &rows);
        assert!(text.contains("0.675   0.337"));
        assert!(text.contains("Wavelet  |   0.529      --"));
        assert_eq!(text.lines().count(), 5);
    }
}
