use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use prominence::annotations::{filter_bots, AnnotationRecord};
use prominence::experiments::{
    ablation_grid, plot_curve, redundancy_study, render_ablation, scaling_study, self_training_study, write_jsonl,
    AnnotatedUtterance, StudySettings,
};
use serde::Serialize;
use serde_json::json;

use crate::commands::{
    annotated_examples, load_checkpoint, load_examples, load_utterances, partition, read_annotations, select,
    write_json,
};
use crate::config::{RunConfig, StudyKind};
use crate::error::{write_error, CliError};
use crate::CorpusArgs;

pub struct StudyInputs<'a> {
    pub corpus: &'a CorpusArgs,
    pub targets: Option<&'a Path>,
    pub annotations: &'a [PathBuf],
    pub teacher: Option<&'a Path>,
    pub unlabeled: Option<&'a Path>,
}

fn required<'a>(value: Option<&'a Path>, flag: &str, kind: StudyKind) -> Result<&'a Path, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("the {kind:?} study needs {flag}")))
}

fn jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(|e| write_error(path, e))?);
    write_jsonl(&mut file, items).map_err(|e| write_error(path, e))?;
    file.flush().map_err(|e| write_error(path, e))
}

fn plot(path: &Path, title: &str, x_label: &str, points: Vec<(f64, f64)>) -> Result<(), CliError> {
    if points.is_empty() {
        log::warn!("no successful runs to plot for {}", path.display());
        return Ok(());
    }
    plot_curve(path, title, x_label, &points).map_err(|e| write_error(path, e))
}

pub fn run(config: &RunConfig, inputs: &StudyInputs, out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|e| write_error(out_dir, e))?;
    write_json(
        &out_dir.join("config.json"),
        &json!({ "config_hash": config.hash(), "config": config }),
    )?;
    let study = &config.study;
    let settings = StudySettings {
        model: config.model.clone(),
        train: config.train.clone(),
        seeds: study.seeds.clone(),
        parallelism: study.parallelism.max(1),
        feature_config_hash: config.features.hash(),
    };
    let results = out_dir.join("results.jsonl");

    match study.kind {
        StudyKind::Ablation => {
            let targets = required(inputs.targets, "--targets", study.kind)?;
            let examples = annotated_examples(config, inputs.corpus, targets)?;
            let p = partition(config, &examples)?;
            let cells = ablation_grid(
                &settings,
                &select(&examples, &p.train),
                &select(&examples, &p.valid),
                &select(&examples, &p.test),
            );
            jsonl(&results, &cells)?;
            let table = out_dir.join("ablation.txt");
            fs::write(&table, render_ablation(&cells)).map_err(|e| write_error(&table, e))?;
        }
        StudyKind::Scaling => {
            let targets = required(inputs.targets, "--targets", study.kind)?;
            let examples = annotated_examples(config, inputs.corpus, targets)?;
            let result = scaling_study(&settings, &examples, &study.sizes, study.split_seed)?;
            jsonl(&results, &result.points)?;
            write_json(&out_dir.join("split.json"), &result.split)?;
            let points = result
                .points
                .iter()
                .filter_map(|p| p.pearson.map(|r| (p.size as f64, r)))
                .collect();
            plot(
                &out_dir.join("scaling.svg"),
                "Test Pearson vs. training utterances",
                "utterances",
                points,
            )?;
        }
        StudyKind::Redundancy => {
            if inputs.annotations.is_empty() {
                return Err(CliError::Usage("the Redundancy study needs --annotations".into()));
            }
            let (_, records) = read_annotations(inputs.annotations)?;
            let (kept, _) = filter_bots(&records)?;
            let mut by_utterance: BTreeMap<String, Vec<AnnotationRecord>> = BTreeMap::new();
            for r in kept {
                by_utterance.entry(r.utterance_id.clone()).or_default().push(r);
            }
            let utterances: Vec<_> = load_utterances(&inputs.corpus.manifest)?
                .into_iter()
                .filter(|u| by_utterance.contains_key(&u.id))
                .collect();
            let examples = load_examples(config, &utterances, &HashMap::new(), inputs.corpus.cache.as_deref())?;
            let annotated: Vec<AnnotatedUtterance> = examples
                .into_iter()
                .map(|example| AnnotatedUtterance {
                    records: by_utterance.remove(&example.id).unwrap_or_default(),
                    example,
                })
                .collect();
            let result = redundancy_study(
                &settings,
                &annotated,
                &study.budgets,
                study.eval_count,
                study.split_seed,
            )?;
            jsonl(&results, &result.points)?;
            write_json(
                &out_dir.join("split.json"),
                &json!({ "valid": result.valid, "test": result.test }),
            )?;
            let accuracy = result
                .points
                .iter()
                .filter_map(|p| p.pearson.map(|r| (p.config.annotators as f64, r)))
                .collect();
            plot(
                &out_dir.join("redundancy.svg"),
                "Test Pearson vs. annotators per utterance",
                "annotators",
                accuracy,
            )?;
            let convergence = result
                .points
                .iter()
                .filter_map(|p| p.convergence_step.map(|s| (p.config.annotators as f64, s)))
                .collect();
            plot(
                &out_dir.join("convergence.svg"),
                "Convergence step vs. annotators per utterance",
                "annotators",
                convergence,
            )?;
        }
        StudyKind::SelfTraining => {
            let targets = required(inputs.targets, "--targets", study.kind)?;
            let teacher = load_checkpoint(config, required(inputs.teacher, "--teacher", study.kind)?)?;
            let unlabeled_manifest = required(inputs.unlabeled, "--unlabeled", study.kind)?;
            let examples = annotated_examples(config, inputs.corpus, targets)?;
            let p = partition(config, &examples)?;
            let unlabeled = load_examples(
                config,
                &load_utterances(unlabeled_manifest)?,
                &HashMap::new(),
                inputs.corpus.cache.as_deref(),
            )?;
            let (report, mut student) = self_training_study(
                &teacher,
                &unlabeled,
                &select(&examples, &p.valid),
                &select(&examples, &p.test),
                &config.train,
            )?;
            jsonl(&results, &[report])?;
            student.run_config_hash = Some(config.hash());
            let path = out_dir.join("student.ckpt");
            student.save(&path).map_err(|e| write_error(&path, e))?;
        }
    }
    println!("study results in {}", out_dir.display());
    Ok(())
}
