//! Crowdsourced binary emphasis annotations.
//!
//! Each annotator marks every word of an utterance as emphasized (1) or not
//! (0). The prominence of a word is the mean of its emphasis labels, i.e. the
//! parameter of the Bernoulli variable the labels are drawn from.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOT_BATCH_SIZE: usize = 20;
/// Batches with this many over-marked utterances fail the bot filter.
pub const BOT_OVERMARKED_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub annotator_id: String,
    pub utterance_id: String,
    pub labels: Vec<u8>,
    /// Batch the record was collected in, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_id: Option<String>,
}

impl AnnotationRecord {
    pub fn new(annotator: impl Into<String>, utterance: impl Into<String>, labels: Vec<u8>) -> Self {
        Self {
            annotator_id: annotator.into(),
            utterance_id: utterance.into(),
            labels,
            batch_id: None,
        }
    }

    pub fn emphasized(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// More than two thirds of the words marked as emphasized.
    pub fn is_overmarked(&self) -> bool {
        !self.labels.is_empty() && 3 * self.emphasized() > 2 * self.labels.len()
    }
}

/// One annotator's labels inside an annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileAnnotation {
    pub annotator: String,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<String>,
}

/// All annotations of one utterance, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub utterance_id: String,
    pub annotations: Vec<FileAnnotation>,
}

impl AnnotationFile {
    pub fn records(&self) -> Vec<AnnotationRecord> {
        self.annotations
            .iter()
            .map(|a| AnnotationRecord {
                annotator_id: a.annotator.clone(),
                utterance_id: self.utterance_id.clone(),
                labels: a.labels.clone(),
                batch_id: a.batch.clone(),
            })
            .collect()
    }

    /// Groups records by utterance into files, sorted by utterance id.
    pub fn from_records(records: &[AnnotationRecord]) -> Vec<AnnotationFile> {
        let mut grouped: BTreeMap<&str, Vec<FileAnnotation>> = BTreeMap::new();
        for r in records {
            grouped.entry(&r.utterance_id).or_default().push(FileAnnotation {
                annotator: r.annotator_id.clone(),
                labels: r.labels.clone(),
                batch: r.batch_id.clone(),
            });
        }
        grouped
            .into_iter()
            .map(|(utterance_id, annotations)| AnnotationFile {
                utterance_id: utterance_id.to_string(),
                annotations,
            })
            .collect()
    }
}

/// Parses and validates an annotation file: binary labels of equal length.
pub fn parse_annotation_file(bytes: &[u8]) -> Result<AnnotationFile> {
    let file: AnnotationFile = serde_json::from_slice(bytes)?;
    let mut length = None;
    for annotation in &file.annotations {
        if annotation.labels.iter().any(|&l| l > 1) {
            return Err(Error::format(
                "annotation file",
                format!("non-binary label from `{}`", annotation.annotator),
            ));
        }
        match length {
            None => length = Some(annotation.labels.len()),
            Some(n) if n != annotation.labels.len() => {
                return Err(Error::format(
                    "annotation file",
                    format!("label length mismatch in `{}`", file.utterance_id),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProminenceTarget {
    pub utterance_id: String,
    pub prominence: Vec<f64>,
    pub annotator_count: usize,
}

impl ProminenceTarget {
    /// Number of annotators that marked each word (exact).
    pub fn counts(&self) -> Vec<usize> {
        self.prominence
            .iter()
            .map(|p| (p * self.annotator_count as f64).round() as usize)
            .collect()
    }
}

/// Averages the binary labels of every record of one utterance.
pub fn aggregate_prominence(records: &[AnnotationRecord]) -> Result<ProminenceTarget> {
    let first = records
        .first()
        .ok_or_else(|| Error::Aggregation("no annotation records".into()))?;
    let words = first.labels.len();
    let mut counts = vec![0usize; words];
    for record in records {
        if record.utterance_id != first.utterance_id {
            return Err(Error::Aggregation(format!(
                "records span utterances `{}` and `{}`",
                first.utterance_id, record.utterance_id
            )));
        }
        if record.labels.len() != words {
            return Err(Error::Aggregation(format!(
                "label length {} differs from {words} for `{}`",
                record.labels.len(),
                record.utterance_id
            )));
        }
        for (count, &label) in counts.iter_mut().zip(&record.labels) {
            if label > 1 {
                return Err(Error::Aggregation(format!("non-binary label {label}")));
            }
            *count += label as usize;
        }
    }
    let n = records.len();
    Ok(ProminenceTarget {
        utterance_id: first.utterance_id.clone(),
        prominence: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        annotator_count: n,
    })
}

/// Aggregates all records, one target per utterance, sorted by utterance id.
pub fn aggregate_all(records: &[AnnotationRecord]) -> Result<Vec<ProminenceTarget>> {
    let mut grouped: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.utterance_id).or_default().push(r.clone());
    }
    grouped.values().map(|group| aggregate_prominence(group)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BotVerdict {
    Pass,
    Fail,
}

/// Flags a batch of 20 utterances from one annotator as automated if at least
/// eight of them have more than 2/3 of their words marked as emphasized.
pub fn bot_filter(batch: &[AnnotationRecord]) -> Result<BotVerdict> {
    if batch.len() != BOT_BATCH_SIZE {
        return Err(Error::Batch(format!(
            "expected {BOT_BATCH_SIZE} records, got {}",
            batch.len()
        )));
    }
    if batch.iter().any(|r| r.annotator_id != batch[0].annotator_id) {
        return Err(Error::Batch("batch mixes annotators".into()));
    }
    let overmarked = batch.iter().filter(|r| r.is_overmarked()).count();
    Ok(if overmarked >= BOT_OVERMARKED_LIMIT {
        BotVerdict::Fail
    } else {
        BotVerdict::Pass
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub blocked_annotators: Vec<String>,
    pub batches_checked: usize,
    /// Records that belonged to no complete batch and were not checked.
    pub unchecked_records: usize,
}

/// Applies the bot filter to every batch and drops all records of annotators
/// with a failing batch.
///
/// Records carrying a `batch_id` are grouped by it. Records without one are
/// chunked per annotator, in input order, into consecutive batches of 20;
/// a trailing partial chunk is kept but not checked.
pub fn filter_bots(records: &[AnnotationRecord]) -> Result<(Vec<AnnotationRecord>, FilterReport)> {
    let mut batches: BTreeMap<(String, String), Vec<AnnotationRecord>> = BTreeMap::new();
    let mut loose: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        match &r.batch_id {
            Some(batch) => batches
                .entry((r.annotator_id.clone(), batch.clone()))
                .or_default()
                .push(r.clone()),
            None => loose.entry(&r.annotator_id).or_default().push(r.clone()),
        }
    }
    let mut report = FilterReport::default();
    let mut blocked = BTreeSet::new();
    let mut check = |annotator: &str, batch: &[AnnotationRecord], report: &mut FilterReport| -> Result<()> {
        if batch.len() != BOT_BATCH_SIZE {
            report.unchecked_records += batch.len();
            return Ok(());
        }
        report.batches_checked += 1;
        if bot_filter(batch)? == BotVerdict::Fail {
            blocked.insert(annotator.to_string());
        }
        Ok(())
    };
    for ((annotator, _), batch) in &batches {
        check(annotator, batch, &mut report)?;
    }
    for (annotator, list) in &loose {
        for chunk in list.chunks(BOT_BATCH_SIZE) {
            check(annotator, chunk, &mut report)?;
        }
    }
    report.blocked_annotators = blocked.iter().cloned().collect();
    let kept = records
        .iter()
        .filter(|r| !blocked.contains(&r.annotator_id))
        .cloned()
        .collect();
    Ok((kept, report))
}

/// Two-rater Cohen's kappa over the concatenated labels of the utterances both
/// annotators labeled.
///
/// Returns 0 when chance agreement is 1 (both raters used a single class).
pub fn cohen_kappa(a: &[AnnotationRecord], b: &[AnnotationRecord]) -> Result<f64> {
    let b_by_utterance: HashMap<&str, &AnnotationRecord> = b.iter().map(|r| (r.utterance_id.as_str(), r)).collect();
    let mut pairs: Vec<(&[u8], &[u8])> = Vec::new();
    let mut shared: Vec<&AnnotationRecord> = a
        .iter()
        .filter(|r| b_by_utterance.contains_key(r.utterance_id.as_str()))
        .collect();
    shared.sort_by(|x, y| x.utterance_id.cmp(&y.utterance_id));
    for ra in shared {
        let rb = b_by_utterance[ra.utterance_id.as_str()];
        if ra.labels.len() != rb.labels.len() {
            return Err(Error::Aggregation(format!(
                "label length mismatch on `{}`",
                ra.utterance_id
            )));
        }
        pairs.push((&ra.labels, &rb.labels));
    }
    if pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    Ok(kappa_from_labels(
        pairs.iter().flat_map(|(x, y)| x.iter().copied().zip(y.iter().copied())),
    ))
}

fn kappa_from_labels(labels: impl Iterator<Item = (u8, u8)>) -> f64 {
    let (mut n, mut agree, mut a1, mut b1) = (0usize, 0usize, 0usize, 0usize);
    for (x, y) in labels {
        n += 1;
        agree += usize::from(x == y);
        a1 += x as usize;
        b1 += y as usize;
    }
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let observed = agree as f64 / n;
    let (pa, pb) = (a1 as f64 / n, b1 as f64 / n);
    let expected = pa * pb + (1.0 - pa) * (1.0 - pb);
    if expected >= 1.0 {
        return 0.0;
    }
    (observed - expected) / (1.0 - expected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaSummary {
    /// Mean over annotator pairs with at least one shared utterance.
    pub uniform_mean: f64,
    /// Mean weighted by the number of shared words per pair.
    pub overlap_weighted_mean: f64,
    pub pair_count: usize,
}

/// Average pairwise kappa over all annotators with overlapping utterances.
pub fn pairwise_kappa(records: &[AnnotationRecord]) -> Result<KappaSummary> {
    let mut by_annotator: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    let mut by_utterance: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        by_annotator.entry(&r.annotator_id).or_default().push(r.clone());
        by_utterance.entry(&r.utterance_id).or_default().insert(&r.annotator_id);
    }
    let mut pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
    for annotators in by_utterance.values() {
        let list: Vec<&str> = annotators.iter().copied().collect();
        for (i, a) in list.iter().enumerate() {
            for b in &list[i + 1..] {
                pairs.insert((a, b));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoOverlap);
    }
    let (mut sum, mut weighted, mut weights) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        let (ra, rb) = (&by_annotator[a], &by_annotator[b]);
        let kappa = cohen_kappa(ra, rb)?;
        let shared: BTreeSet<&str> = rb.iter().map(|r| r.utterance_id.as_str()).collect();
        let words: usize = ra
            .iter()
            .filter(|r| shared.contains(r.utterance_id.as_str()))
            .map(|r| r.labels.len())
            .sum();
        sum += kappa;
        weighted += kappa * words as f64;
        weights += words as f64;
    }
    Ok(KappaSummary {
        uniform_mean: sum / pairs.len() as f64,
        overlap_weighted_mean: if weights > 0.0 { weighted / weights } else { 0.0 },
        pair_count: pairs.len(),
    })
}

/// One row of the aggregate prominence CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub utterance_id: String,
    pub word_index: usize,
    pub token: String,
    pub prominence: f64,
    pub annotator_count: usize,
}

/// Writes targets as CSV rows `(utterance_id, word_index, token, prominence,
/// annotator_count)`. `tokens` maps utterance ids to their words; missing
/// entries leave the token column empty.
pub fn write_targets_csv<W: Write>(
    writer: W,
    targets: &[ProminenceTarget],
    tokens: &HashMap<String, Vec<String>>,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for target in targets {
        let words = tokens.get(&target.utterance_id);
        for (i, &p) in target.prominence.iter().enumerate() {
            csv.serialize(TargetRow {
                utterance_id: target.utterance_id.clone(),
                word_index: i,
                token: words.and_then(|w| w.get(i)).cloned().unwrap_or_default(),
                prominence: p,
                annotator_count: target.annotator_count,
            })?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Reads targets from CSV. Rows of an utterance must be contiguous and
/// numbered from 0 with consecutive word indices.
pub fn read_targets_csv<R: Read>(reader: R) -> Result<Vec<ProminenceTarget>> {
    let mut csv = csv::Reader::from_reader(reader);
    let mut targets: Vec<ProminenceTarget> = Vec::new();
    let mut seen = BTreeSet::new();
    for row in csv.deserialize() {
        let row: TargetRow = row?;
        if !(0.0..=1.0).contains(&row.prominence) || row.annotator_count == 0 {
            return Err(Error::format(
                "target CSV",
                format!("bad row for `{}` word {}", row.utterance_id, row.word_index),
            ));
        }
        match targets.last_mut() {
            Some(last) if last.utterance_id == row.utterance_id => {
                if row.word_index != last.prominence.len() || row.annotator_count != last.annotator_count {
                    return Err(Error::format(
                        "target CSV",
                        format!("rows of `{}` out of order", row.utterance_id),
                    ));
                }
                last.prominence.push(row.prominence);
            }
            _ => {
                if row.word_index != 0 || !seen.insert(row.utterance_id.clone()) {
                    return Err(Error::format(
                        "target CSV",
                        format!("rows of `{}` not contiguous", row.utterance_id),
                    ));
                }
                targets.push(ProminenceTarget {
                    utterance_id: row.utterance_id,
                    prominence: vec![row.prominence],
                    annotator_count: row.annotator_count,
                });
            }
        }
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(annotator: &str, utterance: &str, labels: &[u8]) -> AnnotationRecord {
        AnnotationRecord::new(annotator, utterance, labels.to_vec())
    }

    #[test]
    fn aggregate_examples() {
        let t = aggregate_prominence(&[rec("a", "u", &[1, 0, 0]), rec("b", "u", &[1, 1, 0])]).unwrap();
        assert_eq!(t.prominence, [1.0, 0.5, 0.0]);
        assert_eq!(t.annotator_count, 2);

        let t = aggregate_prominence(&[rec("a", "u", &[0, 1])]).unwrap();
        assert_eq!(t.prominence, [0.0, 1.0]);

        let records: Vec<_> = (0..8).map(|i| rec(&format!("a{i}"), "u", &[0, 0, 0, 1])).collect();
        assert_eq!(aggregate_prominence(&records).unwrap().prominence[3], 1.0);
    }

    #[test]
    fn aggregate_rejects_mismatch() {
        assert!(matches!(
            aggregate_prominence(&[rec("a", "u", &[1, 0]), rec("b", "u", &[1])]),
            Err(Error::Aggregation(_))
        ));
        assert!(aggregate_prominence(&[]).is_err());
    }

    fn batch(overmarked: usize) -> Vec<AnnotationRecord> {
        (0..20)
            .map(|i| {
                let labels: Vec<u8> = if i < overmarked {
                    vec![1, 1, 1, 1, 1, 1, 1, 0, 0]
                } else {
                    vec![0, 1, 0, 0, 0, 0, 0, 0, 0]
                };
                rec("w", &format!("u{i}"), &labels)
            })
            .collect()
    }

    #[test]
    fn bot_filter_threshold() {
        assert_eq!(bot_filter(&batch(8)).unwrap(), BotVerdict::Fail);
        assert_eq!(bot_filter(&batch(7)).unwrap(), BotVerdict::Pass);
        let zeros: Vec<_> = (0..20).map(|i| rec("w", &format!("u{i}"), &[0, 0, 0])).collect();
        assert_eq!(bot_filter(&zeros).unwrap(), BotVerdict::Pass);
        assert!(matches!(bot_filter(&batch(8)[..19]), Err(Error::Batch(_))));
    }

    #[test]
    fn exactly_two_thirds_is_not_overmarked() {
        assert!(!rec("w", "u", &[1, 1, 0]).is_overmarked());
        assert!(rec("w", "u", &[1, 1, 1]).is_overmarked());
    }

    #[test]
    fn kappa_examples() {
        let a = [rec("a", "u", &[1, 0, 1, 0])];
        let b = [rec("b", "u", &[1, 0, 0, 1])];
        assert_eq!(cohen_kappa(&a, &b).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&a, &a).unwrap(), 1.0);
        let c = [rec("c", "u", &[0, 1, 0, 1])];
        assert_eq!(cohen_kappa(&a, &c).unwrap(), -1.0);
        let flat = [rec("d", "u", &[0, 0, 0, 0])];
        assert_eq!(cohen_kappa(&flat, &flat).unwrap(), 0.0);
        let other = [rec("e", "v", &[0, 1])];
        assert!(matches!(cohen_kappa(&a, &other), Err(Error::NoOverlap)));
    }

    #[test]
    fn pairwise_reports_both_means() {
        let records = vec![
            rec("a", "u1", &[1, 0, 1, 0]),
            rec("b", "u1", &[1, 0, 1, 0]),
            rec("a", "u2", &[1, 0]),
            rec("c", "u2", &[0, 1]),
            rec("c", "u3", &[1, 1, 0, 0, 1, 0, 1, 0]),
            rec("b", "u3", &[1, 1, 0, 0, 1, 0, 1, 0]),
        ];
        let summary = pairwise_kappa(&records).unwrap();
        assert_eq!(summary.pair_count, 3);
        assert!((summary.uniform_mean - (1.0 - 1.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!((summary.overlap_weighted_mean - (4.0 - 2.0 + 8.0) / 14.0).abs() < 1e-12);
    }

    #[test]
    fn filter_bots_drops_all_records_of_failing_annotator() {
        let mut records = batch(8);
        records.push(rec("w", "extra", &[0, 0]));
        records.extend((0..20).map(|i| rec("h", &format!("u{i}"), &[0, 1, 0])));
        let (kept, report) = filter_bots(&records).unwrap();
        assert_eq!(report.blocked_annotators, ["w"]);
        assert_eq!(report.batches_checked, 2);
        assert_eq!(report.unchecked_records, 1);
        assert!(kept.iter().all(|r| r.annotator_id == "h"));
        assert_eq!(kept.len(), 20);
    }

    #[test]
    fn csv_roundtrip() {
        let targets = vec![
            ProminenceTarget {
                utterance_id: "a".into(),
                prominence: vec![0.25, 1.0],
                annotator_count: 4,
            },
            ProminenceTarget {
                utterance_id: "b".into(),
                prominence: vec![0.0],
                annotator_count: 1,
            },
        ];
        let tokens = HashMap::from([("a".to_string(), vec!["hi".to_string(), "there".to_string()])]);
        let mut out = Vec::new();
        write_targets_csv(&mut out, &targets, &tokens).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert!(text.starts_with("utterance_id,word_index,token,prominence,annotator_count\n"));
        assert!(text.contains("a,1,there,1.0,4"));
        assert_eq!(read_targets_csv(out.as_slice()).unwrap(), targets);
    }

    #[test]
    fn annotation_file_validation() {
        let ok = br#"{"utterance_id":"u","annotations":[{"annotator":"a","labels":[0,1]},{"annotator":"b","labels":[1,1]}]}"#;
        let file = parse_annotation_file(ok).unwrap();
        assert_eq!(file.records().len(), 2);
        let bad = br#"{"utterance_id":"u","annotations":[{"annotator":"a","labels":[0,2]}]}"#;
        assert!(parse_annotation_file(bad).is_err());
        let ragged =
            br#"{"utterance_id":"u","annotations":[{"annotator":"a","labels":[0]},{"annotator":"b","labels":[1,1]}]}"#;
        assert!(parse_annotation_file(ragged).is_err());
    }
}
