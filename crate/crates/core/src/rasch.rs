//! One-parameter logistic (Rasch) model of annotator agreement.
//!
//! The probability that annotator `a` marks item `i` (one word of one
//! utterance) as emphasized is `σ(θ_a − b_i)`. Parameters are fit by penalized
//! maximum likelihood on a random 90% of the (annotator, item) cells and
//! scored by thresholded prediction accuracy on the held-out cells.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::AnnotationRecord;
use crate::error::{Error, Result};

/// Gaussian prior precision on θ and b; keeps estimates finite for annotators
/// or items whose labels are all identical.
const PRIOR_PRECISION: f64 = 0.1;
const MAX_ITERATIONS: usize = 500;
const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId {
    pub utterance_id: String,
    pub word_index: usize,
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.utterance_id, self.word_index)
    }
}

/// One observed label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub annotator: String,
    pub item: ItemId,
    pub label: u8,
}

pub fn responses(records: &[AnnotationRecord]) -> Vec<Response> {
    records
        .iter()
        .flat_map(|r| {
            r.labels.iter().enumerate().map(move |(i, &label)| Response {
                annotator: r.annotator_id.clone(),
                item: ItemId {
                    utterance_id: r.utterance_id.clone(),
                    word_index: i,
                },
                label,
            })
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RaschModel {
    pub abilities: BTreeMap<String, f64>,
    pub difficulties: BTreeMap<ItemId, f64>,
}

impl RaschModel {
    /// `σ(θ − b)`; unseen annotators or items take the prior mean 0.
    pub fn probability(&self, annotator: &str, item: &ItemId) -> f64 {
        let theta = self.abilities.get(annotator).copied().unwrap_or(0.0);
        let b = self.difficulties.get(item).copied().unwrap_or(0.0);
        sigmoid(theta - b)
    }

    pub fn predict(&self, annotator: &str, item: &ItemId) -> u8 {
        u8::from(self.probability(annotator, item) > 0.5)
    }

    pub fn accuracy(&self, cells: &[Response]) -> f64 {
        if cells.is_empty() {
            return f64::NAN;
        }
        let correct = cells
            .iter()
            .filter(|r| self.predict(&r.annotator, &r.item) == r.label)
            .count();
        correct as f64 / cells.len() as f64
    }

    /// Adds `c` to every ability and difficulty. Predictions are unchanged.
    pub fn shifted(&self, c: f64) -> RaschModel {
        RaschModel {
            abilities: self.abilities.iter().map(|(k, v)| (k.clone(), v + c)).collect(),
            difficulties: self.difficulties.iter().map(|(k, v)| (k.clone(), v + c)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaschFit {
    pub model: RaschModel,
    pub heldout_accuracy: f64,
    /// Accuracy of always predicting the training set's majority label.
    pub majority_baseline: f64,
    pub heldout_cells: usize,
    pub iterations: usize,
    pub warning: Option<String>,
}

/// Splits labels into training and held-out cells and fits the model.
pub fn fit_rasch(records: &[AnnotationRecord], heldout_fraction: f64, seed: u64) -> Result<RaschFit> {
    if !(0.0..1.0).contains(&heldout_fraction) {
        return Err(Error::Config(format!(
            "heldout fraction {heldout_fraction} not in [0, 1)"
        )));
    }
    let annotators: std::collections::BTreeSet<&str> = records.iter().map(|r| r.annotator_id.as_str()).collect();
    if annotators.len() < 2 {
        return Err(Error::Aggregation("Rasch fit needs at least two annotators".into()));
    }
    let (cells, heldout) = split_cells(records, heldout_fraction, seed);
    let (model, iterations) = fit_responses(&cells);

    let ones = cells.iter().filter(|c| c.label == 1).count();
    let majority = u8::from(2 * ones > cells.len());
    let majority_baseline = if heldout.is_empty() {
        f64::NAN
    } else {
        heldout.iter().filter(|c| c.label == majority).count() as f64 / heldout.len() as f64
    };
    let warning = (ones == 0 || ones == cells.len())
        .then(|| "all training labels identical; parameters are prior-dominated".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(RaschFit {
        heldout_accuracy: model.accuracy(&heldout),
        majority_baseline,
        heldout_cells: heldout.len(),
        iterations,
        model,
        warning,
    })
}

/// Training and held-out cells: a seeded shuffle with the last
/// `round(fraction · n)` cells held out.
pub fn split_cells(records: &[AnnotationRecord], heldout_fraction: f64, seed: u64) -> (Vec<Response>, Vec<Response>) {
    let mut cells = responses(records);
    cells.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let heldout_count = (cells.len() as f64 * heldout_fraction).round() as usize;
    let heldout = cells.split_off(cells.len() - heldout_count);
    (cells, heldout)
}

/// Penalized maximum likelihood by alternating per-parameter Newton steps.
/// The objective is concave, so the iteration converges to the unique optimum.
/// The returned parameters are shifted so that the mean difficulty is 0.
pub fn fit_responses(cells: &[Response]) -> (RaschModel, usize) {
    let mut annotator_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&ItemId, usize> = HashMap::new();
    let mut annotator_names = Vec::new();
    let mut item_names = Vec::new();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let a = *annotator_index.entry(&cell.annotator).or_insert_with(|| {
            annotator_names.push(cell.annotator.clone());
            annotator_names.len() - 1
        });
        let i = *item_index.entry(&cell.item).or_insert_with(|| {
            item_names.push(cell.item.clone());
            item_names.len() - 1
        });
        rows.push((a, i, cell.label as f64));
    }

    let mut theta = vec![0.0; annotator_names.len()];
    let mut b = vec![0.0; item_names.len()];
    let mut iterations = 0;
    for iteration in 1..=MAX_ITERATIONS {
        iterations = iteration;
        let mut max_step: f64 = 0.0;

        let mut grad = vec![0.0; theta.len()];
        let mut hess = vec![0.0; theta.len()];
        for &(a, i, y) in &rows {
            let p = sigmoid(theta[a] - b[i]);
            grad[a] += y - p;
            hess[a] += p * (1.0 - p);
        }
        for a in 0..theta.len() {
            let step = (grad[a] - PRIOR_PRECISION * theta[a]) / (hess[a] + PRIOR_PRECISION);
            theta[a] += step;
            max_step = max_step.max(step.abs());
        }

        let mut grad = vec![0.0; b.len()];
        let mut hess = vec![0.0; b.len()];
        for &(a, i, y) in &rows {
            let p = sigmoid(theta[a] - b[i]);
            grad[i] += p - y;
            hess[i] += p * (1.0 - p);
        }
        for i in 0..b.len() {
            let step = (grad[i] - PRIOR_PRECISION * b[i]) / (hess[i] + PRIOR_PRECISION);
            b[i] += step;
            max_step = max_step.max(step.abs());
        }

        if max_step < TOLERANCE {
            break;
        }
    }

    let mean_b = if b.is_empty() {
        0.0
    } else {
        b.iter().sum::<f64>() / b.len() as f64
    };
    let model = RaschModel {
        abilities: annotator_names
            .into_iter()
            .zip(theta)
            .map(|(name, t)| (name, t - mean_b))
            .collect(),
        difficulties: item_names
            .into_iter()
            .zip(b)
            .map(|(item, d)| (item, d - mean_b))
            .collect(),
    };
    (model, iterations)
}
