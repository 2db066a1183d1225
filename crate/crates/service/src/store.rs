//! Annotation store: an in-memory state rebuilt from an append-only JSON-lines
//! event log. Every mutation is appended and flushed before it is applied.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use prominence::annotations::{
    aggregate_all, bot_filter, write_targets_csv, AnnotationFile, AnnotationRecord, BotVerdict, BOT_BATCH_SIZE,
};
use prominence::corpus::Utterance;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ServiceError;

/// Seconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64())
    }
}

/// Clock advanced by hand, for tests and replays.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(seconds: f64) -> Self {
        Self(AtomicU64::new(seconds.to_bits()))
    }

    pub fn advance(&self, seconds: f64) {
        let now = f64::from_bits(self.0.load(Ordering::SeqCst));
        self.0.store((now + seconds).to_bits(), Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::SeqCst))
    }
}

/// Number of utterances that should each reach a given annotation count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedundancyTarget {
    pub utterances: usize,
    pub annotations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub max_batches: usize,
    pub prescreen_attempts: usize,
    /// Correct tone count for each listening-test question.
    pub prescreen_key: Vec<u32>,
    /// Strata filled in catalog order; utterances beyond every stratum get
    /// one annotation.
    pub redundancy: Vec<RedundancyTarget>,
    /// Mixed into completion codes.
    pub completion_secret: String,
    /// Bearer token for `/export`; `None` leaves it open.
    pub admin_token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_batches: 6,
            prescreen_attempts: 3,
            prescreen_key: vec![3, 5, 2],
            redundancy: vec![
                RedundancyTarget {
                    utterances: 453,
                    annotations: 8,
                },
                RedundancyTarget {
                    utterances: 974,
                    annotations: 4,
                },
                RedundancyTarget {
                    utterances: 2259,
                    annotations: 2,
                },
            ],
            completion_secret: "change-me".into(),
            admin_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub tokens: Vec<String>,
    pub audio: PathBuf,
    pub duration_s: f64,
    /// Annotations wanted for this utterance.
    pub target: usize,
}

pub fn catalog(utterances: &[Utterance], redundancy: &[RedundancyTarget]) -> Vec<CatalogEntry> {
    utterances
        .iter()
        .enumerate()
        .map(|(i, u)| CatalogEntry {
            id: u.id.clone(),
            tokens: u.tokens().map(str::to_string).collect(),
            audio: u.audio_ref.clone(),
            duration_s: u.num_samples as f64 / u.sample_rate as f64,
            target: redundancy
                .iter()
                .filter(|r| i < r.utterances)
                .map(|r| r.annotations)
                .max()
                .unwrap_or(1),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchStatus {
    Assigned,
    Completed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmittedUtterance {
    pub utterance_id: String,
    pub labels: Vec<u8>,
    /// Complete plays reported by the client.
    pub plays: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Prescreen {
        annotator: String,
        passed: bool,
        at: f64,
    },
    Assigned {
        batch_id: String,
        annotator: String,
        utterances: Vec<String>,
        at: f64,
    },
    Accepted {
        batch_id: String,
        annotations: Vec<SubmittedUtterance>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_token: Option<String>,
        at: f64,
    },
    Rejected {
        batch_id: String,
        annotations: Vec<SubmittedUtterance>,
        reason: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_token: Option<String>,
        at: f64,
    },
    Blocked {
        annotator: String,
        reason: String,
        at: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorState {
    pub annotator_id: String,
    pub prescreen_passed: bool,
    pub prescreen_failures: usize,
    pub batches_completed: usize,
    pub blocked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub annotator_id: String,
    pub utterances: Vec<String>,
    pub status: BatchStatus,
    pub assigned_at: f64,
    pub annotations: Vec<SubmittedUtterance>,
    /// Client token of the submission that closed the batch.
    pub request_token: Option<String>,
    pub rejection_reason: Option<String>,
}

#[derive(Debug, Default)]
struct State {
    annotators: BTreeMap<String, AnnotatorState>,
    batches: BTreeMap<String, Batch>,
    /// Accepted plus in-flight annotation slots per utterance.
    slots: HashMap<String, usize>,
    next_batch: u64,
}

impl State {
    fn annotator(&mut self, id: &str) -> &mut AnnotatorState {
        self.annotators.entry(id.to_string()).or_insert_with(|| AnnotatorState {
            annotator_id: id.to_string(),
            ..AnnotatorState::default()
        })
    }

    fn release(&mut self, utterances: &[String]) {
        for u in utterances {
            if let Some(n) = self.slots.get_mut(u) {
                *n = n.saturating_sub(1);
            }
        }
    }

    fn apply(&mut self, event: &Event) {
        match event {
            Event::Prescreen { annotator, passed, .. } => {
                let state = self.annotator(annotator);
                if *passed {
                    state.prescreen_passed = true;
                } else {
                    state.prescreen_failures += 1;
                }
            }
            Event::Assigned {
                batch_id,
                annotator,
                utterances,
                at,
            } => {
                for u in utterances {
                    *self.slots.entry(u.clone()).or_default() += 1;
                }
                self.batches.insert(
                    batch_id.clone(),
                    Batch {
                        batch_id: batch_id.clone(),
                        annotator_id: annotator.clone(),
                        utterances: utterances.clone(),
                        status: BatchStatus::Assigned,
                        assigned_at: *at,
                        annotations: Vec::new(),
                        request_token: None,
                        rejection_reason: None,
                    },
                );
                self.next_batch += 1;
            }
            Event::Accepted {
                batch_id,
                annotations,
                request_token,
                ..
            } => {
                if let Some(batch) = self.batches.get_mut(batch_id) {
                    batch.status = BatchStatus::Completed;
                    batch.annotations = annotations.clone();
                    batch.request_token = request_token.clone();
                    let annotator = batch.annotator_id.clone();
                    self.annotator(&annotator).batches_completed += 1;
                }
            }
            Event::Rejected {
                batch_id,
                annotations,
                reason,
                request_token,
                ..
            } => {
                if let Some(batch) = self.batches.get_mut(batch_id) {
                    batch.status = BatchStatus::Rejected;
                    batch.annotations = annotations.clone();
                    batch.request_token = request_token.clone();
                    batch.rejection_reason = Some(reason.clone());
                    let utterances = batch.utterances.clone();
                    self.release(&utterances);
                }
            }
            Event::Blocked { annotator, .. } => {
                self.annotator(annotator).blocked = true;
                // A blocked annotator's accepted work no longer counts.
                let released: Vec<String> = self
                    .batches
                    .values()
                    .filter(|b| &b.annotator_id == annotator && b.status != BatchStatus::Rejected)
                    .flat_map(|b| b.utterances.clone())
                    .collect();
                self.release(&released);
                for batch in self.batches.values_mut() {
                    if &batch.annotator_id == annotator && batch.status == BatchStatus::Assigned {
                        batch.status = BatchStatus::Rejected;
                        batch.rejection_reason = Some("annotator blocked".into());
                    }
                }
            }
        }
    }

    fn open_batch(&self, annotator: &str) -> Option<&Batch> {
        self.batches
            .values()
            .find(|b| b.annotator_id == annotator && b.status == BatchStatus::Assigned)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status")]
pub enum PrescreenOutcome {
    Pass,
    Fail { attempts_left: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status")]
pub enum SubmitOutcome {
    Accepted { completion_code: String },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub annotation_files: Vec<AnnotationFile>,
    pub targets_csv: String,
}

struct Inner {
    state: State,
    log: File,
}

pub struct AnnotationStore {
    config: ServiceConfig,
    catalog: Vec<CatalogEntry>,
    index: HashMap<String, usize>,
    clock: Arc<dyn Clock>,
    log_path: PathBuf,
    inner: Mutex<Inner>,
}

/// Parses a JSON-lines event log. Blank lines are skipped; errors carry the
/// line number.
pub fn parse_events(bytes: &[u8]) -> Result<Vec<Event>, ServiceError> {
    let mut events = Vec::new();
    for (number, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let event =
            serde_json::from_slice(line).map_err(|e| ServiceError::Storage(format!("line {}: {e}", number + 1)))?;
        events.push(event);
    }
    Ok(events)
}

fn read_events(path: &Path) -> Result<Vec<Event>, ServiceError> {
    match std::fs::read(path) {
        Ok(bytes) => parse_events(&bytes).map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

impl AnnotationStore {
    /// Opens (or creates) the log at `log_path` and replays it.
    pub fn open(
        config: ServiceConfig,
        catalog: Vec<CatalogEntry>,
        log_path: impl Into<PathBuf>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let log_path = log_path.into();
        let mut state = State::default();
        for event in read_events(&log_path)? {
            state.apply(&event);
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let index = catalog.iter().enumerate().map(|(i, e)| (e.id.clone(), i)).collect();
        Ok(Self {
            config,
            catalog,
            index,
            clock,
            log_path,
            inner: Mutex::new(Inner { state, log }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn entry(&self, utterance: &str) -> Option<&CatalogEntry> {
        self.index.get(utterance).map(|&i| &self.catalog[i])
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    fn commit(inner: &mut Inner, events: &[Event]) -> Result<(), ServiceError> {
        let mut buffer = Vec::new();
        for event in events {
            serde_json::to_writer(&mut buffer, event).map_err(|e| ServiceError::Storage(e.to_string()))?;
            buffer.push(b'\n');
        }
        inner.log.write_all(&buffer)?;
        inner.log.sync_data()?;
        for event in events {
            inner.state.apply(event);
        }
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn annotator(&self, id: &str) -> Option<AnnotatorState> {
        self.lock().state.annotators.get(id).cloned()
    }

    pub fn batch(&self, id: &str) -> Option<Batch> {
        self.lock().state.batches.get(id).cloned()
    }

    pub fn prescreen(&self, annotator: &str, answers: &[u32]) -> Result<PrescreenOutcome, ServiceError> {
        let mut inner = self.lock();
        let state = inner.state.annotators.get(annotator).cloned().unwrap_or_default();
        if state.blocked {
            return Err(ServiceError::Forbidden(format!("annotator `{annotator}` is blocked")));
        }
        if state.prescreen_passed {
            return Ok(PrescreenOutcome::Pass);
        }
        let now = self.clock.now();
        let passed = answers == self.config.prescreen_key.as_slice();
        let mut events = vec![Event::Prescreen {
            annotator: annotator.into(),
            passed,
            at: now,
        }];
        let failures = state.prescreen_failures + usize::from(!passed);
        if !passed && failures >= self.config.prescreen_attempts {
            events.push(Event::Blocked {
                annotator: annotator.into(),
                reason: format!("failed the listening test {failures} times"),
                at: now,
            });
        }
        Self::commit(&mut inner, &events)?;
        Ok(if passed {
            PrescreenOutcome::Pass
        } else {
            PrescreenOutcome::Fail {
                attempts_left: self.config.prescreen_attempts.saturating_sub(failures),
            }
        })
    }

    /// Returns the annotator's open batch, or assigns a new one.
    pub fn assign_batch(&self, annotator: &str) -> Result<Batch, ServiceError> {
        let mut inner = self.lock();
        let state = inner.state.annotators.get(annotator).cloned().unwrap_or_default();
        if state.blocked {
            return Err(ServiceError::Forbidden(format!("annotator `{annotator}` is blocked")));
        }
        if !state.prescreen_passed {
            return Err(ServiceError::Forbidden(format!(
                "annotator `{annotator}` has not passed the listening test"
            )));
        }
        if let Some(open) = inner.state.open_batch(annotator) {
            return Ok(open.clone());
        }
        if state.batches_completed >= self.config.max_batches {
            return Err(ServiceError::Forbidden(format!(
                "annotator `{annotator}` has completed the maximum of {} batches",
                self.config.max_batches
            )));
        }
        let seen: BTreeSet<&String> = inner
            .state
            .batches
            .values()
            .filter(|b| b.annotator_id == annotator)
            .flat_map(|b| &b.utterances)
            .collect();
        let mut candidates: Vec<(usize, usize, usize)> = self
            .catalog
            .iter()
            .enumerate()
            .filter(|(_, e)| !seen.contains(&e.id))
            .filter_map(|(i, e)| {
                let used = inner.state.slots.get(&e.id).copied().unwrap_or(0);
                (used < e.target).then_some((i, e.target, used))
            })
            .collect();
        if candidates.len() < BOT_BATCH_SIZE {
            return Err(ServiceError::Exhausted);
        }
        // Highest redundancy stratum first, then least-filled, then catalog order.
        candidates.sort_by_key(|&(i, target, used)| (std::cmp::Reverse(target), used, i));
        let utterances: Vec<String> = candidates[..BOT_BATCH_SIZE]
            .iter()
            .map(|&(i, _, _)| self.catalog[i].id.clone())
            .collect();
        let batch_id = format!("b{:06}", inner.state.next_batch);
        let event = Event::Assigned {
            batch_id: batch_id.clone(),
            annotator: annotator.into(),
            utterances,
            at: self.clock.now(),
        };
        Self::commit(&mut inner, &[event])?;
        Ok(inner.state.batches[&batch_id].clone())
    }

    /// Validates and records a batch submission. Resending a closed batch
    /// with the token that closed it returns the original outcome.
    pub fn submit(
        &self,
        annotator: &str,
        batch_id: &str,
        annotations: Vec<SubmittedUtterance>,
        request_token: Option<String>,
    ) -> Result<SubmitOutcome, ServiceError> {
        let mut inner = self.lock();
        let batch = inner
            .state
            .batches
            .get(batch_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("batch `{batch_id}`")))?;
        if batch.annotator_id != annotator {
            return Err(ServiceError::Forbidden(format!(
                "batch `{batch_id}` belongs to another annotator"
            )));
        }
        if batch.status != BatchStatus::Assigned {
            if request_token.is_some() && batch.request_token == request_token {
                return Ok(match batch.status {
                    BatchStatus::Completed => SubmitOutcome::Accepted {
                        completion_code: self.completion_code(batch_id),
                    },
                    _ => SubmitOutcome::Rejected {
                        reason: batch.rejection_reason.unwrap_or_default(),
                    },
                });
            }
            return Err(ServiceError::Conflict(format!(
                "batch `{batch_id}` was already submitted"
            )));
        }

        let submitted: BTreeMap<&str, &SubmittedUtterance> =
            annotations.iter().map(|a| (a.utterance_id.as_str(), a)).collect();
        let expected: BTreeSet<&str> = batch.utterances.iter().map(String::as_str).collect();
        if submitted.len() != annotations.len() || submitted.keys().copied().collect::<BTreeSet<_>>() != expected {
            return Err(ServiceError::Validation(
                "submission must contain each utterance of the batch exactly once".into(),
            ));
        }
        let mut problems = Vec::new();
        let mut audio_seconds = 0.0;
        for a in &annotations {
            let entry = self
                .entry(&a.utterance_id)
                .expect("batch utterances are in the catalog");
            audio_seconds += entry.duration_s;
            if a.labels.len() != entry.tokens.len() {
                problems.push(format!(
                    "`{}`: {} labels for {} words",
                    a.utterance_id,
                    a.labels.len(),
                    entry.tokens.len()
                ));
            }
            if a.labels.iter().any(|&l| l > 1) {
                problems.push(format!("`{}`: labels must be 0 or 1", a.utterance_id));
            }
            if a.plays < 2 {
                problems.push(format!(
                    "`{}`: played {} time(s), at least 2 required",
                    a.utterance_id, a.plays
                ));
            }
        }
        let now = self.clock.now();
        let session = now - batch.assigned_at;
        if session < 2.0 * audio_seconds {
            problems.push(format!(
                "session lasted {session:.1} s, shorter than two plays of the batch audio ({:.1} s)",
                2.0 * audio_seconds
            ));
        }
        if !problems.is_empty() {
            return Err(ServiceError::Validation(problems.join("; ")));
        }

        let records: Vec<AnnotationRecord> = annotations
            .iter()
            .map(|a| AnnotationRecord::new(annotator, a.utterance_id.clone(), a.labels.clone()))
            .collect();
        let verdict = bot_filter(&records).map_err(|e| ServiceError::Validation(e.to_string()))?;
        if verdict == BotVerdict::Fail {
            let reason = "more than 2/3 of words marked in 8 or more utterances".to_string();
            let events = [
                Event::Rejected {
                    batch_id: batch_id.into(),
                    annotations,
                    reason: reason.clone(),
                    request_token,
                    at: now,
                },
                Event::Blocked {
                    annotator: annotator.into(),
                    reason: reason.clone(),
                    at: now,
                },
            ];
            Self::commit(&mut inner, &events)?;
            return Ok(SubmitOutcome::Rejected { reason });
        }
        Self::commit(
            &mut inner,
            &[Event::Accepted {
                batch_id: batch_id.into(),
                annotations,
                request_token,
                at: now,
            }],
        )?;
        Ok(SubmitOutcome::Accepted {
            completion_code: self.completion_code(batch_id),
        })
    }

    pub fn completion_code(&self, batch_id: &str) -> String {
        let digest = Sha256::digest(format!("{}:{batch_id}", self.config.completion_secret));
        hex::encode(&digest[..8])
    }

    /// Accepted records of annotators who are not blocked.
    pub fn accepted_records(&self) -> Vec<AnnotationRecord> {
        let inner = self.lock();
        accepted_records(&inner.state)
    }

    pub fn export(&self) -> Result<Export, ServiceError> {
        let records = self.accepted_records();
        export(&records, &self.catalog)
    }
}

fn accepted_records(state: &State) -> Vec<AnnotationRecord> {
    let blocked: BTreeSet<&String> = state
        .annotators
        .values()
        .filter(|a| a.blocked)
        .map(|a| &a.annotator_id)
        .collect();
    state
        .batches
        .values()
        .filter(|b| b.status == BatchStatus::Completed && !blocked.contains(&b.annotator_id))
        .flat_map(|b| {
            b.annotations.iter().map(|a| AnnotationRecord {
                batch_id: Some(b.batch_id.clone()),
                ..AnnotationRecord::new(b.annotator_id.clone(), a.utterance_id.clone(), a.labels.clone())
            })
        })
        .collect()
}

/// Annotation files and the aggregate CSV for the given records.
pub fn export(records: &[AnnotationRecord], catalog: &[CatalogEntry]) -> Result<Export, ServiceError> {
    let tokens: HashMap<String, Vec<String>> = catalog.iter().map(|e| (e.id.clone(), e.tokens.clone())).collect();
    let targets = aggregate_all(records).map_err(|e| ServiceError::Storage(e.to_string()))?;
    let mut csv = Vec::new();
    write_targets_csv(&mut csv, &targets, &tokens).map_err(|e| ServiceError::Storage(e.to_string()))?;
    Ok(Export {
        annotation_files: AnnotationFile::from_records(records),
        targets_csv: String::from_utf8(csv).expect("csv is utf-8"),
    })
}

/// Replays a log file without a catalog and returns its accepted records.
pub fn replay_records(log_path: &Path) -> Result<Vec<AnnotationRecord>, ServiceError> {
    let mut state = State::default();
    for event in read_events(log_path)? {
        state.apply(&event);
    }
    Ok(accepted_records(&state))
}
