//! Model-ready examples: features, word spans and optional targets.

use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;

use crate::annotations::ProminenceTarget;
use crate::corpus::{validate_spans, Utterance, WordSpan};
use crate::error::{Error, Result};
use crate::features::FeatureCache;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    /// `[mel channels × frames]`
    pub mel: Array2<f32>,
    pub spans: Vec<WordSpan>,
    pub targets: Option<Vec<f64>>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        mel: Array2<f32>,
        spans: Vec<WordSpan>,
        targets: Option<Vec<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        validate_spans(&spans, mel.ncols())?;
        if spans.is_empty() {
            return Err(Error::Input(format!("`{id}` has no words")));
        }
        if let Some(t) = &targets {
            if t.len() != spans.len() {
                return Err(Error::Input(format!(
                    "`{id}`: {} targets for {} words",
                    t.len(),
                    spans.len()
                )));
            }
            if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input(format!("`{id}`: target outside [0, 1]")));
            }
        }
        Ok(Self {
            id,
            mel,
            spans,
            targets,
        })
    }

    pub fn frames(&self) -> usize {
        self.mel.ncols()
    }

    pub fn words(&self) -> usize {
        self.spans.len()
    }
}

/// Computes (or loads cached) features for each utterance and attaches the
/// matching targets.
pub fn build_examples(
    utterances: &[Utterance],
    targets: &HashMap<String, ProminenceTarget>,
    cache: &FeatureCache,
) -> Result<Vec<Example>> {
    utterances
        .par_iter()
        .map(|utterance| {
            let mel = cache.load_file(&utterance.audio_ref).map_err(|e| Error::Load {
                utterance: utterance.id.clone(),
                reason: e.to_string(),
            })?;
            let target = targets.get(&utterance.id).map(|t| t.prominence.clone());
            Example::new(utterance.id.clone(), mel.values, utterance.words.clone(), target)
        })
        .collect()
}
