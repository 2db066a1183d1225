//! Studies: downsampling ablation grid, dataset-size scaling, annotator
//! redundancy at fixed budget, and self-training on pseudo-labels.
//!
//! Every study returns plain serializable results; [`write_jsonl`] and
//! [`plot_curve`] turn them into JSON lines and SVG curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use plotters::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{aggregate_prominence, AnnotationRecord};
use crate::checkpoint::Checkpoint;
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, pearson, predict, EvalReport};
use crate::model::{Location, Method, ModelConfig};
use crate::training::{train, TrainConfig, TrainOutcome};

pub const CONVERGENCE_FRACTION: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Number of training jobs run at once.
    pub parallelism: usize,
    pub feature_config_hash: String,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            parallelism: 1,
            feature_config_hash: crate::features::FeatureConfig::default().hash(),
        }
    }
}

/// Runs independent jobs on `parallelism` worker threads; results keep the
/// job order.
pub fn run_jobs<T, F>(jobs: Vec<F>, parallelism: usize) -> Vec<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    let count = jobs.len();
    let queue: Vec<Mutex<Option<F>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.clamp(1, count.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let job = queue[i].lock().unwrap().take().expect("each job runs once");
                *results[i].lock().unwrap() = Some(job());
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.into_inner().unwrap().expect("job finished"))
        .collect()
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub pearson: Option<f64>,
    pub bce: Option<f64>,
    pub best_step: Option<u64>,
    pub convergence_step: Option<u64>,
    pub error: Option<String>,
}

fn run_seed(
    model: &ModelConfig,
    settings: &StudySettings,
    seed: u64,
    train_set: &[Example],
    valid_set: &[Example],
    eval_set: &[Example],
) -> (SeedResult, Option<TrainOutcome>) {
    let config = TrainConfig {
        seed,
        ..settings.train.clone()
    };
    let outcome = train(model, &config, train_set, valid_set, &settings.feature_config_hash)
        .and_then(|o| evaluate(&o.best.model, eval_set, "eval").map(|r| (o, r)));
    match outcome {
        Ok((outcome, report)) => (
            SeedResult {
                seed,
                pearson: Some(report.pearson),
                bce: Some(report.bce),
                best_step: Some(outcome.best.step),
                convergence_step: outcome.convergence_step(CONVERGENCE_FRACTION),
                error: None,
            },
            Some(outcome),
        ),
        Err(e) => {
            log::warn!("run with seed {seed} failed: {e}");
            (
                SeedResult {
                    seed,
                    pearson: None,
                    bce: None,
                    best_step: None,
                    convergence_step: None,
                    error: Some(e.to_string()),
                },
                None,
            )
        }
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let values: Vec<f64> = values.flatten().collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub location: Location,
    pub method: Method,
    pub runs: Vec<SeedResult>,
    /// Mean over successful seeds; `None` marks a missing cell.
    pub pearson: Option<f64>,
}

/// Trains every (location × method) cell for every seed and evaluates on
/// `eval_set`.
pub fn ablation_grid(
    settings: &StudySettings,
    train_set: &[Example],
    valid_set: &[Example],
    eval_set: &[Example],
) -> Vec<AblationCell> {
    let cells: Vec<(Location, Method)> = Location::ALL
        .iter()
        .flat_map(|&l| Method::ALL.iter().map(move |&m| (l, m)))
        .collect();
    let jobs: Vec<_> = cells
        .iter()
        .flat_map(|&(location, method)| {
            settings.seeds.iter().map(move |&seed| {
                move || {
                    let model = ModelConfig {
                        location,
                        method,
                        ..settings.model.clone()
                    };
                    run_seed(&model, settings, seed, train_set, valid_set, eval_set).0
                }
            })
        })
        .collect();
    let mut results = run_jobs(jobs, settings.parallelism).into_iter();
    cells
        .into_iter()
        .map(|(location, method)| {
            let runs: Vec<SeedResult> = results.by_ref().take(settings.seeds.len()).collect();
            AblationCell {
                location,
                method,
                pearson: mean(runs.iter().map(|r| r.pearson)),
                runs,
            }
        })
        .collect()
}

/// Locations as rows, methods as columns.
pub fn render_ablation(cells: &[AblationCell]) -> String {
    let lookup: BTreeMap<(Location, Method), Option<f64>> =
        cells.iter().map(|c| ((c.location, c.method), c.pearson)).collect();
    let methods = [Method::Average, Method::Center, Method::Max, Method::Sum];
    let mut out = format!("{:<14}", "Location");
    for m in methods {
        let _ = write!(out, " {:>8}", m.to_string());
    }
    out.push('\n');
    for location in [
        Location::Framewise,
        Location::Intermediate,
        Location::Posthoc,
        Location::Prehoc,
    ] {
        let _ = write!(out, "{:<14}", location.to_string());
        for m in methods {
            let value = lookup.get(&(location, m)).copied().flatten();
            let _ = write!(out, " {:>8}", value.map_or("--".into(), |v| format!("{v:.3}")));
        }
        out.push('\n');
    }
    out
}

/// Held-out validation and test sets plus a training pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySplit {
    pub pool: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles ids with `seed`, keeps the first `pool_size` as the training pool
/// and halves the remainder into validation and test.
pub fn study_split(ids: &[String], pool_size: usize, seed: u64) -> Result<StudySplit> {
    let mut ids: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < pool_size + 2 {
        return Err(Error::Study(format!(
            "need at least {} utterances ({pool_size} for training plus validation and test), found {}",
            pool_size + 2,
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = ids.split_off(pool_size);
    let (valid, test) = rest.split_at(rest.len() / 2);
    Ok(StudySplit {
        pool: ids,
        valid: valid.to_vec(),
        test: test.to_vec(),
    })
}

fn select<'a>(examples: &'a [Example], ids: &[String]) -> Vec<Example> {
    let wanted: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut chosen: Vec<(usize, &'a Example)> = examples
        .iter()
        .filter_map(|e| wanted.get(e.id.as_str()).map(|&i| (i, e)))
        .collect();
    chosen.sort_by_key(|(i, _)| *i);
    chosen.into_iter().map(|(_, e)| e.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub size: usize,
    pub runs: Vec<SeedResult>,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub split: StudySplit,
    pub points: Vec<ScalingPoint>,
}

/// Trains on nested subsets of increasing size; each size is a prefix of the
/// shuffled training pool, so smaller sets are subsets of larger ones.
pub fn scaling_study(
    settings: &StudySettings,
    examples: &[Example],
    sizes: &[usize],
    split_seed: u64,
) -> Result<ScalingResult> {
    let annotated: Vec<Example> = examples.iter().filter(|e| e.targets.is_some()).cloned().collect();
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    let max = *sizes.last().ok_or_else(|| Error::Study("no sizes given".into()))?;
    let ids: Vec<String> = annotated.iter().map(|e| e.id.clone()).collect();
    let split = study_split(&ids, max, split_seed)?;
    let valid = select(&annotated, &split.valid);
    let test = select(&annotated, &split.test);
    let subsets: Vec<Vec<Example>> = sizes.iter().map(|&n| select(&annotated, &split.pool[..n])).collect();
    let jobs: Vec<_> = subsets
        .iter()
        .flat_map(|subset| {
            let (valid, test) = (&valid, &test);
            settings
                .seeds
                .iter()
                .map(move |&seed| move || run_seed(&settings.model, settings, seed, subset, valid, test).0)
        })
        .collect();
    let mut results = run_jobs(jobs, settings.parallelism).into_iter();
    let points = sizes
        .iter()
        .map(|&size| {
            let runs: Vec<SeedResult> = results.by_ref().take(settings.seeds.len()).collect();
            ScalingPoint {
                size,
                pearson: mean(runs.iter().map(|r| r.pearson)),
                runs,
            }
        })
        .collect();
    Ok(ScalingResult { split, points })
}

/// An utterance with all of its accepted annotation records.
#[derive(Debug, Clone)]
pub struct AnnotatedUtterance {
    pub example: Example,
    pub records: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub utterances: usize,
    pub annotators: usize,
}

pub const PAPER_BUDGETS: [BudgetConfig; 4] = [
    BudgetConfig {
        utterances: 400,
        annotators: 8,
    },
    BudgetConfig {
        utterances: 800,
        annotators: 4,
    },
    BudgetConfig {
        utterances: 1600,
        annotators: 2,
    },
    BudgetConfig {
        utterances: 3200,
        annotators: 1,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyPoint {
    pub config: BudgetConfig,
    pub utterance_ids: Vec<String>,
    pub runs: Vec<SeedResult>,
    pub pearson: Option<f64>,
    pub convergence_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyResult {
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub points: Vec<RedundancyPoint>,
}

/// Training sets for each budget, with targets averaged over exactly `k`
/// annotators per utterance.
pub fn redundancy_training_sets(
    utterances: &[AnnotatedUtterance],
    budgets: &[BudgetConfig],
    exclude: &BTreeSet<String>,
    seed: u64,
) -> Result<Vec<Vec<Example>>> {
    budgets
        .iter()
        .enumerate()
        .map(|(b, budget)| {
            let k = budget.annotators;
            let mut eligible: Vec<&AnnotatedUtterance> = utterances
                .iter()
                .filter(|u| u.records.len() >= k && !exclude.contains(&u.example.id))
                .collect();
            if eligible.len() < budget.utterances {
                return Err(Error::Study(format!(
                    "budget ({}, {k}) needs {} utterances with at least {k} annotations, found {} (deficit {})",
                    budget.utterances,
                    budget.utterances,
                    eligible.len(),
                    budget.utterances - eligible.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(b as u64));
            eligible.shuffle(&mut rng);
            eligible.truncate(budget.utterances);
            eligible
                .into_iter()
                .map(|u| {
                    let mut records = u.records.clone();
                    records.shuffle(&mut rng);
                    records.truncate(k);
                    let target = aggregate_prominence(&records)?;
                    Example::new(
                        u.example.id.clone(),
                        u.example.mel.clone(),
                        u.example.spans.clone(),
                        Some(target.prominence),
                    )
                })
                .collect()
        })
        .collect()
}

/// Picks `count` evaluation utterances at random while keeping every budget
/// satisfiable from the utterances left over.
fn reserve_evaluation(
    utterances: &[AnnotatedUtterance],
    budgets: &[BudgetConfig],
    count: usize,
    seed: u64,
) -> BTreeSet<String> {
    let mut available: Vec<usize> = budgets
        .iter()
        .map(|b| utterances.iter().filter(|u| u.records.len() >= b.annotators).count())
        .collect();
    let mut order: Vec<&AnnotatedUtterance> = utterances.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut reserved = BTreeSet::new();
    for u in order {
        if reserved.len() == count {
            break;
        }
        let n = u.records.len();
        let affordable = budgets
            .iter()
            .zip(&available)
            .all(|(b, &a)| n < b.annotators || a > b.utterances);
        if affordable {
            for (b, a) in budgets.iter().zip(available.iter_mut()) {
                if n >= b.annotators {
                    *a -= 1;
                }
            }
            reserved.insert(u.example.id.clone());
        }
    }
    reserved
}

/// Fixed-budget trade-off between annotated utterances and annotators per
/// utterance. Validation and test targets use every available annotation.
pub fn redundancy_study(
    settings: &StudySettings,
    utterances: &[AnnotatedUtterance],
    budgets: &[BudgetConfig],
    eval_count: usize,
    split_seed: u64,
) -> Result<RedundancyResult> {
    if eval_count < 2 {
        return Err(Error::Study("need at least two evaluation utterances".into()));
    }
    let reserved = reserve_evaluation(utterances, budgets, eval_count, split_seed);
    if reserved.len() < eval_count {
        return Err(Error::Study(format!(
            "could only reserve {} of {eval_count} evaluation utterances without starving a budget",
            reserved.len()
        )));
    }
    let full_targets = |u: &AnnotatedUtterance| -> Result<Example> {
        let target = aggregate_prominence(&u.records)?;
        Example::new(
            u.example.id.clone(),
            u.example.mel.clone(),
            u.example.spans.clone(),
            Some(target.prominence),
        )
    };
    let eval: Vec<Example> = utterances
        .iter()
        .filter(|u| reserved.contains(&u.example.id))
        .map(full_targets)
        .collect::<Result<_>>()?;
    let (valid, test) = eval.split_at(eval.len() / 2);
    let training = redundancy_training_sets(utterances, budgets, &reserved, split_seed)?;

    let jobs: Vec<_> = training
        .iter()
        .flat_map(|set| {
            settings
                .seeds
                .iter()
                .map(move |&seed| move || run_seed(&settings.model, settings, seed, set, valid, test).0)
        })
        .collect();
    let mut results = run_jobs(jobs, settings.parallelism).into_iter();
    let points = budgets
        .iter()
        .zip(&training)
        .map(|(config, set)| {
            let runs: Vec<SeedResult> = results.by_ref().take(settings.seeds.len()).collect();
            RedundancyPoint {
                config: *config,
                utterance_ids: set.iter().map(|e| e.id.clone()).collect(),
                pearson: mean(runs.iter().map(|r| r.pearson)),
                convergence_step: mean(runs.iter().map(|r| r.convergence_step.map(|s| s as f64))),
                runs,
            }
        })
        .collect();
    Ok(RedundancyResult {
        valid: valid.iter().map(|e| e.id.clone()).collect(),
        test: test.iter().map(|e| e.id.clone()).collect(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainingReport {
    pub teacher: EvalReport,
    pub student: EvalReport,
    /// Correlation between student and teacher predictions on the
    /// pseudo-labeled corpus.
    pub student_teacher_pearson: f64,
    pub pseudo_labeled: usize,
}

/// Labels `unlabeled` with the teacher, trains a student from scratch on the
/// pseudo-labels and compares both on human-annotated `test`.
pub fn self_training_study(
    teacher: &Checkpoint,
    unlabeled: &[Example],
    valid: &[Example],
    test: &[Example],
    train_config: &TrainConfig,
) -> Result<(SelfTrainingReport, Checkpoint)> {
    if unlabeled.is_empty() {
        return Err(Error::Study("unlabeled corpus is empty".into()));
    }
    let labels = predict(&teacher.model, unlabeled)?;
    let pseudo: Vec<Example> = unlabeled
        .iter()
        .zip(&labels)
        .map(|(e, l)| Example::new(e.id.clone(), e.mel.clone(), e.spans.clone(), Some(l.prominence.clone())))
        .collect::<Result<_>>()?;
    let outcome = train(
        &teacher.model.config,
        train_config,
        &pseudo,
        valid,
        &teacher.feature_config_hash,
    )?;
    let student_labels = predict(&outcome.best.model, unlabeled)?;
    let flatten = |p: &[crate::evaluation::UtterancePrediction]| -> Vec<f64> {
        p.iter().flat_map(|u| u.prominence.iter().copied()).collect()
    };
    let report = SelfTrainingReport {
        teacher: evaluate(&teacher.model, test, "test")?,
        student: evaluate(&outcome.best.model, test, "test")?,
        student_teacher_pearson: pearson(&flatten(&student_labels), &flatten(&labels))?,
        pseudo_labeled: pseudo.len(),
    };
    Ok((report, outcome.best))
}

pub fn write_jsonl<W: Write, T: Serialize>(mut writer: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Renders `(x, y)` points as a line chart in SVG.
pub fn plot_curve(path: &Path, title: &str, x_label: &str, points: &[(f64, f64)]) -> Result<()> {
    let plot_error = |e: &dyn std::fmt::Display| Error::Study(format!("plot {}: {e}", path.display()));
    if points.is_empty() {
        return Err(Error::Study("nothing to plot".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    let pad = ((y1 - y0) * 0.1).max(0.01);
    let (x0, x1) = if x0 == x1 { (x0 - 1.0, x1 + 1.0) } else { (x0, x1) };

    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_error(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("Pearson correlation")
        .draw()
        .map_err(|e| plot_error(&e))?;
    chart
        .draw_series(LineSeries::new(points.iter().copied(), &BLUE))
        .map_err(|e| plot_error(&e))?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(|e| plot_error(&e))?;
    root.present().map_err(|e| plot_error(&e))?;
    Ok(())
}
