use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{CgcnModel, PropagationId};
use super::tensor::FeatureTensor;
use crate::centrality::CentralitySet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

impl PropagationId {
    /// `J`, `B`, `W`, `A` for single-matrix streams, `J+B+W+A` style otherwise.
    pub fn label(&self) -> String {
        self.streams.iter().map(|s| s.name()).collect::<Vec<_>>().join("+")
    }
}

/// The propagation matrices a model sees for one sample: one entry when the
/// centralities were computed per sequence, one per frame otherwise.
pub fn propagation_for(model: &CgcnModel, sets: &[CentralitySet]) -> Vec<Matrix> {
    sets.iter()
        .map(|set| set.summed_propagation(&model.propagation.streams).matrix().clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamScores {
    pub per_stream: BTreeMap<String, Vec<f64>>,
    pub fused: Vec<f64>,
}

impl StreamScores {
    /// Sums per-stream probability vectors in the order given.
    pub fn fuse(streams: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let classes = streams.first().map(|(_, p)| p.len()).ok_or(Error::EmptyDataset)?;
        let mut fused = vec![0.0; classes];
        let mut per_stream = BTreeMap::new();
        for (label, probs) in streams {
            if probs.len() != classes {
                return Err(Error::StreamClassMismatch(classes, probs.len()));
            }
            for (f, p) in fused.iter_mut().zip(&probs) {
                *f += p;
            }
            per_stream.insert(label, probs);
        }
        Ok(StreamScores { per_stream, fused })
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.fused)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode scores of every model on a batch of samples, fused per sample.
///
/// `x` holds `samples × subjects` rows and `sets[s]` the centralities of
/// sample `s`.
pub fn four_stream_predict(
    x: &FeatureTensor,
    sets: &[&[CentralitySet]],
    models: &mut [CgcnModel],
) -> Result<Vec<StreamScores>> {
    let first = models.first().ok_or(Error::EmptyDataset)?;
    let classes = first.num_classes();
    let subjects = first.config.subjects;
    if let Some(m) = models.iter().find(|m| m.num_classes() != classes) {
        return Err(Error::StreamClassMismatch(classes, m.num_classes()));
    }
    if sets.len() * subjects != x.batch() {
        return Err(Error::DimensionMismatch(format!(
            "{} centrality sets for {} rows of {subjects} subjects",
            sets.len(),
            x.batch()
        )));
    }
    let mut per_model = Vec::with_capacity(models.len());
    for model in models.iter_mut() {
        let mats: Vec<Vec<Matrix>> = sets.iter().map(|s| propagation_for(model, s)).collect();
        let rows: Vec<&[Matrix]> = mats
            .iter()
            .flat_map(|m| std::iter::repeat_n(m.as_slice(), subjects))
            .collect();
        per_model.push((model.propagation.label(), model.predict(x, &rows)?));
    }
    (0..sets.len())
        .map(|s| StreamScores::fuse(per_model.iter().map(|(l, p)| (l.clone(), p[s].clone())).collect()))
        .collect()
}
