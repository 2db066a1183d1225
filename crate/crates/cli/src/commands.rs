use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use prominence::annotations::{
    aggregate_all, filter_bots, pairwise_kappa, parse_annotation_file, read_targets_csv, write_targets_csv,
    AnnotationRecord, FilterReport, KappaSummary, ProminenceTarget,
};
use prominence::checkpoint::Checkpoint;
use prominence::corpus::{load_corpus, load_entry, partition_ids, ManifestEntry, Partition, Utterance};
use prominence::dataset::{build_examples, Example};
use prominence::evaluation::{evaluate as evaluate_model, pearson, predict, EvalReport};
use prominence::features::{melspectrogram_with, read_wav, FeatureCache};
use prominence::rasch::fit_rasch;
use prominence::training::{train as train_model, write_log};
use prominence::wavelet::{composite_signal, wavelet_prominence};
use prominence_service::store::{catalog, SystemClock};
use prominence_service::AnnotationStore;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{read_error, write_error, CliError};
use crate::{CorpusArgs, Split};

pub fn load_utterances(manifest: &Path) -> Result<Vec<Utterance>, CliError> {
    Ok(load_corpus(manifest)?)
}

pub fn load_targets(path: &Path) -> Result<HashMap<String, ProminenceTarget>, CliError> {
    let file = File::open(path).map_err(|e| read_error(path, e))?;
    let targets = read_targets_csv(file).map_err(|e| read_error(path, e))?;
    Ok(targets.into_iter().map(|t| (t.utterance_id.clone(), t)).collect())
}

/// Features for each utterance, through the cache when one is given.
pub fn load_examples(
    config: &RunConfig,
    utterances: &[Utterance],
    targets: &HashMap<String, ProminenceTarget>,
    cache: Option<&Path>,
) -> Result<Vec<Example>, CliError> {
    if let Some(dir) = cache {
        return Ok(build_examples(
            utterances,
            targets,
            &FeatureCache::new(dir, config.features.clone()),
        )?);
    }
    let examples = utterances
        .par_iter()
        .map(|u| {
            let (audio, rate) = read_wav(&u.audio_ref)?;
            if rate != config.features.sample_rate {
                return Err(prominence::Error::Input(format!(
                    "{}: sample rate {rate} Hz, expected {} Hz",
                    u.audio_ref.display(),
                    config.features.sample_rate
                )));
            }
            let mel = melspectrogram_with(&audio, &config.features)?;
            let target = targets.get(&u.id).map(|t| t.prominence.clone());
            Example::new(u.id.clone(), mel.values, u.words.clone(), target)
        })
        .collect::<prominence::Result<Vec<_>>>()?;
    Ok(examples)
}

/// Annotated examples of a corpus.
pub fn annotated_examples(config: &RunConfig, corpus: &CorpusArgs, targets: &Path) -> Result<Vec<Example>, CliError> {
    let targets = load_targets(targets)?;
    let utterances: Vec<Utterance> = load_utterances(&corpus.manifest)?
        .into_iter()
        .filter(|u| targets.contains_key(&u.id))
        .collect();
    if utterances.is_empty() {
        return Err(CliError::Data("no utterance in the manifest has targets".into()));
    }
    load_examples(config, &utterances, &targets, corpus.cache.as_deref())
}

pub fn select(examples: &[Example], ids: &[String]) -> Vec<Example> {
    let index: HashMap<&str, &Example> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    ids.iter()
        .filter_map(|id| index.get(id.as_str()).map(|&e| e.clone()))
        .collect()
}

pub fn partition(config: &RunConfig, examples: &[Example]) -> Result<Partition, CliError> {
    Ok(partition_ids(
        examples.iter().map(|e| e.id.as_str()),
        config.partition.ratios,
        config.partition.seed,
    )?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| write_error(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| write_error(path, e))
}

fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

/// Provenance sidecar `<artifact>.meta.json`.
pub fn write_meta(artifact: &Path, command: &str, config: &RunConfig, extra: Value) -> Result<(), CliError> {
    let mut meta = json!({ "command": command, "config_hash": config.hash(), "config": config });
    if let (Value::Object(meta), Value::Object(extra)) = (&mut meta, extra) {
        meta.extend(extra);
    }
    write_json(&meta_path(artifact), &meta)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| write_error(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| write_error(path, e))?))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

#[derive(Serialize)]
struct PreparedUtterance<'a> {
    id: &'a str,
    speaker: &'a str,
    frames: usize,
    cache_key: String,
    words: &'a [prominence::corpus::WordSpan],
}

pub fn prepare(config: &RunConfig, manifest: &Path, cache_dir: &Path, out: &Path) -> Result<(), CliError> {
    let utterances = load_utterances(manifest)?;
    let cache = FeatureCache::new(cache_dir, config.features.clone());
    let prepared = utterances
        .par_iter()
        .map(|u| {
            let (audio, rate) = read_wav(&u.audio_ref)?;
            if rate != config.features.sample_rate {
                return Err(prominence::Error::Input(format!(
                    "`{}`: sample rate {rate} Hz, expected {} Hz",
                    u.id, config.features.sample_rate
                )));
            }
            let mel = cache.get_or_compute(&audio)?;
            prominence::corpus::validate_spans(&u.words, mel.frames())?;
            Ok(PreparedUtterance {
                id: &u.id,
                speaker: &u.speaker_id,
                frames: mel.frames(),
                cache_key: cache.key(&audio),
                words: &u.words,
            })
        })
        .collect::<prominence::Result<Vec<_>>>()?;
    let partition = partition_ids(
        utterances.iter().map(|u| u.id.as_str()),
        config.partition.ratios,
        config.partition.seed,
    )?;
    write_json(
        out,
        &json!({
            "config_hash": config.hash(),
            "feature_config_hash": config.features.hash(),
            "partition": partition,
            "utterances": prepared,
        }),
    )?;
    println!("prepared {} utterances into {}", prepared.len(), cache_dir.display());
    Ok(())
}

fn annotation_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| read_error(input, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Data("no annotation files found".into()));
    }
    Ok(files)
}

pub fn read_annotations(inputs: &[PathBuf]) -> Result<(usize, Vec<AnnotationRecord>), CliError> {
    let files = annotation_paths(inputs)?;
    let mut records = Vec::new();
    for path in &files {
        let bytes = fs::read(path).map_err(|e| read_error(path, e))?;
        records.extend(
            parse_annotation_file(&bytes)
                .map_err(|e| read_error(path, e))?
                .records(),
        );
    }
    Ok((files.len(), records))
}

#[derive(Serialize)]
struct RaschSummary {
    heldout_accuracy: f64,
    majority_baseline: f64,
    heldout_cells: usize,
    iterations: usize,
    warning: Option<String>,
}

#[derive(Serialize)]
struct AggregateReport {
    config_hash: String,
    files: usize,
    records: usize,
    kept_records: usize,
    bot_filter: FilterReport,
    kappa: Option<KappaSummary>,
    rasch: Option<RaschSummary>,
    utterances: usize,
    words: usize,
    warnings: Vec<String>,
}

pub fn aggregate(
    config: &RunConfig,
    inputs: &[PathBuf],
    manifest: Option<&Path>,
    out: &Path,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let (files, records) = read_annotations(inputs)?;
    let (kept, bot_filter) = filter_bots(&records)?;
    let mut warnings = Vec::new();
    let kappa = pairwise_kappa(&kept)
        .map_err(|e| warnings.push(format!("kappa: {e}")))
        .ok();
    let rasch = fit_rasch(&kept, config.aggregate.heldout_fraction, config.aggregate.seed)
        .map(|fit| RaschSummary {
            heldout_accuracy: fit.heldout_accuracy,
            majority_baseline: fit.majority_baseline,
            heldout_cells: fit.heldout_cells,
            iterations: fit.iterations,
            warning: fit.warning,
        })
        .map_err(|e| warnings.push(format!("rasch: {e}")))
        .ok();
    let targets = aggregate_all(&kept)?;

    let mut tokens: HashMap<String, Vec<String>> = HashMap::new();
    if let Some(manifest) = manifest {
        for u in load_utterances(manifest)? {
            tokens.insert(u.id.clone(), u.tokens().map(str::to_string).collect());
        }
        for t in &targets {
            match tokens.get(&t.utterance_id) {
                Some(words) if words.len() != t.prominence.len() => {
                    return Err(CliError::Data(format!(
                        "`{}`: {} labels for {} words in the manifest",
                        t.utterance_id,
                        t.prominence.len(),
                        words.len()
                    )))
                }
                None => warnings.push(format!("`{}` is not in the manifest", t.utterance_id)),
                _ => {}
            }
        }
    }
    let mut writer = create(out)?;
    write_targets_csv(&mut writer, &targets, &tokens).map_err(|e| write_error(out, e))?;
    writer.flush().map_err(|e| write_error(out, e))?;
    write_meta(out, "aggregate", config, json!({}))?;

    let report = AggregateReport {
        config_hash: config.hash(),
        files,
        records: records.len(),
        kept_records: kept.len(),
        bot_filter,
        kappa,
        rasch,
        utterances: targets.len(),
        words: targets.iter().map(|t| t.prominence.len()).sum(),
        warnings,
    };
    match report_path {
        Some(path) => write_json(path, &report),
        None => {
            print_json(&report);
            Ok(())
        }
    }
}

pub fn train(
    config: &RunConfig,
    corpus: &CorpusArgs,
    targets: &Path,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<(), CliError> {
    if config.model.input_channels != config.features.num_mels {
        return Err(CliError::Usage(format!(
            "model.input_channels ({}) must equal features.num_mels ({})",
            config.model.input_channels, config.features.num_mels
        )));
    }
    let examples = annotated_examples(config, corpus, targets)?;
    let partition = partition(config, &examples)?;
    let (train_set, valid_set) = (select(&examples, &partition.train), select(&examples, &partition.valid));
    let outcome = train_model(
        &config.model,
        &config.train,
        &train_set,
        &valid_set,
        &config.features.hash(),
    )?;
    let convergence = outcome.convergence_step(prominence::experiments::CONVERGENCE_FRACTION);
    let mut best = outcome.best;
    best.run_config_hash = Some(config.hash());
    create(out)?;
    best.save(out).map_err(|e| write_error(out, e))?;
    write_meta(out, "train", config, json!({ "partition": partition }))?;
    if let Some(path) = log_path {
        let mut writer = create(path)?;
        write_log(&mut writer, &outcome.log).map_err(|e| write_error(path, e))?;
        writer.flush().map_err(|e| write_error(path, e))?;
    }
    print_json(&json!({
        "config_hash": config.hash(),
        "best_step": best.step,
        "validation_pearson": best.validation_pearson,
        "convergence_step": convergence,
        "train": partition.train.len(),
        "valid": partition.valid.len(),
        "test": partition.test.len(),
    }));
    Ok(())
}

pub fn load_checkpoint(config: &RunConfig, path: &Path) -> Result<Checkpoint, CliError> {
    let checkpoint = Checkpoint::load(path).map_err(|e| read_error(path, e))?;
    if checkpoint.feature_config_hash != config.features.hash() {
        return Err(CliError::Data(format!(
            "{} was trained on features {} but the configured features hash to {}",
            path.display(),
            checkpoint.feature_config_hash,
            config.features.hash()
        )));
    }
    Ok(checkpoint)
}

#[derive(Serialize)]
struct EvaluateOutput {
    config_hash: String,
    checkpoint_step: u64,
    checkpoint_config_hash: Option<String>,
    split: String,
    report: EvalReport,
}

pub fn evaluate(
    config: &RunConfig,
    corpus: &CorpusArgs,
    checkpoint: &Path,
    targets: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_checkpoint(config, checkpoint)?;
    let examples = annotated_examples(config, corpus, targets)?;
    let set = match split {
        Split::All => examples,
        _ => {
            let p = partition(config, &examples)?;
            let ids = match split {
                Split::Train => &p.train,
                Split::Valid => &p.valid,
                _ => &p.test,
            };
            select(&examples, ids)
        }
    };
    let split_name = format!("{split:?}").to_lowercase();
    let dataset = corpus
        .manifest
        .file_stem()
        .map_or("corpus".into(), |s| s.to_string_lossy().into_owned());
    let report = evaluate_model(&model.model, &set, &format!("{dataset}:{split_name}"))?;
    let output = EvaluateOutput {
        config_hash: config.hash(),
        checkpoint_step: model.step,
        checkpoint_config_hash: model.run_config_hash,
        split: split_name,
        report,
    };
    match out {
        Some(path) => write_json(path, &output),
        None => {
            print_json(&output);
            Ok(())
        }
    }
}

pub enum InferInput {
    Manifest(PathBuf),
    /// Audio and alignment of a single utterance named after the audio file.
    Pair(PathBuf, PathBuf),
}

#[derive(Serialize)]
struct WordRow<'a> {
    utterance_id: &'a str,
    word_index: usize,
    token: &'a str,
    prominence: f64,
}

pub fn infer(
    config: &RunConfig,
    checkpoint: &Path,
    input: &InferInput,
    cache: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint(config, checkpoint)?;
    let utterances = match input {
        InferInput::Manifest(path) => load_utterances(path)?,
        InferInput::Pair(audio, alignment) => {
            let id = audio
                .file_stem()
                .map_or("utterance".into(), |s| s.to_string_lossy().into_owned());
            let entry = ManifestEntry {
                id,
                speaker: String::new(),
                audio: audio.clone(),
                alignment: alignment.clone(),
                annotations: None,
                transcript: None,
            };
            vec![load_entry(Path::new("."), &entry)?]
        }
    };
    let examples = load_examples(config, &utterances, &HashMap::new(), cache)?;
    let predictions = predict(&model.model, &examples)?;
    let mut csv = csv::Writer::from_writer(create(out)?);
    for p in &predictions {
        for (i, (token, &prominence)) in p.tokens.iter().zip(&p.prominence).enumerate() {
            csv.serialize(WordRow {
                utterance_id: &p.id,
                word_index: i,
                token,
                prominence,
            })
            .map_err(|e| write_error(out, e))?;
        }
    }
    csv.flush().map_err(|e| write_error(out, e))?;
    write_meta(out, "infer", config, json!({ "checkpoint_step": model.step }))?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    utterance_id: &'a str,
    word_index: usize,
    token: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct BaselineReport {
    config_hash: String,
    utterances: usize,
    words: usize,
    annotated_words: usize,
    pearson: Option<f64>,
    warnings: Vec<String>,
}

pub fn baseline(
    config: &RunConfig,
    manifest: &Path,
    targets: Option<&Path>,
    out: &Path,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let utterances = load_utterances(manifest)?;
    let targets = targets.map(load_targets).transpose()?.unwrap_or_default();
    let scored = utterances
        .par_iter()
        .map(|u| {
            let (audio, rate) = read_wav(&u.audio_ref)?;
            if rate != config.features.sample_rate {
                return Err(prominence::Error::Input(format!(
                    "`{}`: sample rate {rate} Hz, expected {} Hz",
                    u.id, config.features.sample_rate
                )));
            }
            let signal = composite_signal(&audio, &u.words, config.baseline)?;
            let scores = wavelet_prominence(&signal, &u.words)?;
            let warnings = signal
                .warnings
                .iter()
                .map(|w| format!("`{}`: {w}", u.id))
                .collect::<Vec<_>>();
            Ok((scores, warnings))
        })
        .collect::<prominence::Result<Vec<_>>>()?;

    let mut csv = csv::Writer::from_writer(create(out)?);
    let (mut pred, mut gold, mut warnings) = (Vec::new(), Vec::new(), Vec::new());
    for (u, (scores, notes)) in utterances.iter().zip(scored) {
        for (i, (span, &score)) in u.words.iter().zip(&scores).enumerate() {
            csv.serialize(ScoreRow {
                utterance_id: &u.id,
                word_index: i,
                token: &span.token,
                score,
            })
            .map_err(|e| write_error(out, e))?;
        }
        if let Some(t) = targets.get(&u.id) {
            if t.prominence.len() != scores.len() {
                return Err(CliError::Data(format!(
                    "`{}`: {} targets for {} words",
                    u.id,
                    t.prominence.len(),
                    scores.len()
                )));
            }
            pred.extend_from_slice(&scores);
            gold.extend_from_slice(&t.prominence);
        }
        warnings.extend(notes);
    }
    csv.flush().map_err(|e| write_error(out, e))?;
    write_meta(out, "baseline", config, json!({}))?;

    let report = BaselineReport {
        config_hash: config.hash(),
        utterances: utterances.len(),
        words: utterances.iter().map(|u| u.words.len()).sum(),
        annotated_words: pred.len(),
        pearson: if pred.is_empty() {
            None
        } else {
            Some(pearson(&pred, &gold)?)
        },
        warnings,
    };
    match report_path {
        Some(path) => write_json(path, &report),
        None => {
            print_json(&report);
            Ok(())
        }
    }
}

pub fn serve(config: &RunConfig, manifest: &Path, log: &Path, address: SocketAddr) -> Result<(), CliError> {
    let utterances = load_utterances(manifest)?;
    let entries = catalog(&utterances, &config.service.redundancy);
    let store = AnnotationStore::open(config.service.clone(), entries, log, Arc::new(SystemClock))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime
        .block_on(prominence_service::serve(address, Arc::new(store)))
        .map_err(|e| CliError::Runtime(format!("serve on {address}: {e}")))
}
