//! Loss, optimizer, the epoch loop and top-k evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centrality::CentralitySet;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{propagation_for, softmax, CgcnModel, FeatureTensor, Mode, Param, Rng, StreamScores};

/// `-ln p[label]` and its gradient with respect to the logits, `p - onehot(label)`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= probs.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: probs.len(),
        });
    }
    let loss = -probs[label].ln();
    let mut grad = probs.to_vec();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {learning_rate} must be finite and nonnegative")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {weight_decay} must be finite and nonnegative")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }
}

/// One Nesterov step per parameter:
/// `g = grad + λw; v = μv + g; w -= lr (g + μv)`.
///
/// Velocity buffers are created on first use. Nothing is updated if any
/// gradient is non-finite.
pub fn sgd_nesterov_step(params: &mut [&mut Param], state: &mut OptimizerState) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} velocity buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    for (p, v) in params.iter().zip(&state.velocity) {
        if p.grad.len() != p.value.len() || v.len() != p.value.len() {
            return Err(Error::ShapeMismatch(format!("parameter {}", p.name)));
        }
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let (lr, mu, decay) = (state.learning_rate, state.momentum, state.weight_decay);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        for ((w, &grad), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
            let g = grad + decay * *w;
            *vel = mu * *vel + g;
            *w -= lr * (g + mu * *vel);
        }
    }
    Ok(())
}

/// Step decay: the rate is multiplied by `factor` at each listed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn rate_at(&self, base: f64, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| epoch >= m).count();
        base * self.factor.powi(hits as i32)
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            milestones: vec![30, 50],
            factor: 0.1,
        }
    }
}

/// One training or evaluation example, ready for the network.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    /// `[subjects, channels, frames, joints]`.
    pub features: FeatureTensor,
    /// One set per sequence or one per frame.
    pub centralities: Vec<CentralitySet>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
    pub epochs: Vec<EpochRow>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,top1,top5,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.loss, r.top1, r.top5, r.seconds));
        }
        out
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stacks the samples' features and builds each model's per-row propagation.
fn assemble(samples: &[&Sample]) -> Result<FeatureTensor> {
    let parts: Vec<FeatureTensor> = samples.iter().map(|s| s.features.clone()).collect();
    FeatureTensor::stack(&parts)
}

fn propagation_rows(model: &CgcnModel, samples: &[&Sample]) -> Vec<Vec<Matrix>> {
    samples.iter().map(|s| propagation_for(model, &s.centralities)).collect()
}

fn row_refs(mats: &[Vec<Matrix>], subjects: usize) -> Vec<&[Matrix]> {
    mats.iter()
        .flat_map(|m| std::iter::repeat_n(m.as_slice(), subjects))
        .collect()
}

/// Rank of `label` under descending scores, ties resolved by class index.
pub fn label_rank(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > s || (v == s && c < label))
        .count()
}

/// Models trained side by side on the same batches, each with its own optimizer.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub models: Vec<CgcnModel>,
    pub optimizers: Vec<OptimizerState>,
    pub base_learning_rate: f64,
    pub schedule: Option<StepSchedule>,
    pub seed: u64,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(models: Vec<CgcnModel>, optimizer: OptimizerState, seed: u64) -> Result<Self> {
        let classes = models.first().ok_or(Error::Config("no models to train".into()))?.num_classes();
        if let Some(m) = models.iter().find(|m| m.num_classes() != classes) {
            return Err(Error::StreamClassMismatch(classes, m.num_classes()));
        }
        Ok(Trainer {
            optimizers: vec![optimizer.clone(); models.len()],
            base_learning_rate: optimizer.learning_rate,
            models,
            schedule: None,
            seed,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One pass over `data` in a seeded shuffled order.
    pub fn train_epoch(&mut self, data: &[Sample], batch_size: usize) -> Result<EpochRow> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size < 2 {
            return Err(Error::BatchTooSmall(batch_size));
        }
        let start = Instant::now();
        let epoch = self.epochs_done;
        let lr = match &self.schedule {
            Some(s) => s.rate_at(self.base_learning_rate, epoch),
            None => self.base_learning_rate,
        };
        for opt in &mut self.optimizers {
            opt.learning_rate = lr;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut Rng::seed_from_u64(mix_seed(self.seed, epoch as u64)));
        let classes = self.models[0].num_classes();

        let mut loss_total = 0.0;
        let mut loss_count = 0usize;
        let (mut hit1, mut hit5) = (0usize, 0usize);
        for (batch_index, chunk) in order.chunks(batch_size).enumerate() {
            // BN needs two rows; a trailing singleton joins the previous batch's tail.
            let chunk: Vec<usize> = if chunk.len() < 2 && order.len() >= 2 {
                let mut c = vec![order[order.len() - 2]];
                c.extend_from_slice(chunk);
                c
            } else {
                chunk.to_vec()
            };
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let x = assemble(&samples)?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let salt = ((epoch as u64) << 32) | batch_index as u64;
            let seed = self.seed;
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = self
                .models
                .par_iter_mut()
                .zip(self.optimizers.par_iter_mut())
                .enumerate()
                .map(|(m, (model, opt))| {
                    let mut rng = Rng::seed_from_u64(mix_seed(mix_seed(seed, salt), m as u64 + 1));
                    train_step(model, opt, &x, &samples, &labels, &mut rng)
                })
                .collect();
            let mut fused = vec![vec![0.0; classes]; samples.len()];
            for r in results {
                let (loss, probs) = r?;
                loss_total += loss;
                loss_count += 1;
                for (f, p) in fused.iter_mut().zip(&probs) {
                    f.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                }
            }
            for (scores, &label) in fused.iter().zip(&labels) {
                let rank = label_rank(scores, label);
                hit1 += usize::from(rank < 1);
                hit5 += usize::from(rank < 5);
            }
        }
        self.epochs_done += 1;
        let seen = order.len().max(1) as f64;
        let loss = loss_total / loss_count.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient("loss".into()));
        }
        Ok(EpochRow {
            epoch: epoch + 1,
            loss,
            top1: (hit1 as f64 / seen).min(1.0),
            top5: (hit5 as f64 / seen).min(1.0),
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Forward, mean cross-entropy, backward and one optimizer step on a batch.
/// Returns the batch loss and the train-mode probabilities.
fn train_step(
    model: &mut CgcnModel,
    opt: &mut OptimizerState,
    x: &FeatureTensor,
    samples: &[&Sample],
    labels: &[usize],
    rng: &mut Rng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mats = propagation_rows(model, samples);
    let rows = row_refs(&mats, model.config.subjects);
    model.zero_grad();
    let logits = model.forward_logits(x, &rows, Mode::Train, rng)?;
    let n = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(labels.len());
    for (r, &label) in labels.iter().enumerate() {
        let p = softmax(logits.row(r));
        let (loss, g) = cross_entropy(&p, label)?;
        total += loss;
        for (c, gv) in g.iter().enumerate() {
            grad[(r, c)] = gv / n;
        }
        probs.push(p);
    }
    model.backward(&grad, &rows)?;
    sgd_nesterov_step(&mut model.params_mut(), opt)?;
    Ok((total / n, probs))
}

/// Eval-mode fused scores for every sample, in dataset order.
pub fn predict_dataset(models: &mut [CgcnModel], data: &[Sample], batch_size: usize) -> Result<Vec<StreamScores>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(data.len());
    let refs: Vec<&Sample> = data.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let x = assemble(chunk)?;
        let per_model: Vec<Result<(String, Vec<Vec<f64>>)>> = models
            .par_iter_mut()
            .map(|model| {
                let mats = propagation_rows(model, chunk);
                let rows = row_refs(&mats, model.config.subjects);
                Ok((model.propagation.label(), model.predict(&x, &rows)?))
            })
            .collect();
        let per_model = per_model.into_iter().collect::<Result<Vec<_>>>()?;
        for s in 0..chunk.len() {
            out.push(StreamScores::fuse(
                per_model.iter().map(|(l, p)| (l.clone(), p[s].clone())).collect(),
            )?);
        }
    }
    Ok(out)
}

/// Fraction of samples whose label ranks within the top `k` fused scores.
pub fn evaluate(models: &mut [CgcnModel], data: &[Sample], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let scores = predict_dataset(models, data, 32)?;
    Ok(top_k_accuracy(&scores.iter().map(|s| s.fused.clone()).collect::<Vec<_>>(), &data.iter().map(|s| s.label).collect::<Vec<_>>(), ks))
}

pub fn top_k_accuracy(scores: &[Vec<f64>], labels: &[usize], ks: &[usize]) -> BTreeMap<usize, f64> {
    ks.iter()
        .map(|&k| {
            let hits = scores
                .iter()
                .zip(labels)
                .filter(|(s, &l)| label_rank(s, l) < k)
                .count();
            (k, hits as f64 / labels.len().max(1) as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Param {
        let mut p = Param::new("w", vec![1], vec![value]);
        p.grad = vec![grad];
        p
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = cross_entropy(&[0.5, 0.5], 1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![0.5, -0.5]);
        let (loss, grad) = cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
        assert!(matches!(cross_entropy(&[1.0], 3), Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn nesterov_hand_executed_step() {
        let mut p = param(1.0, 1.0);
        let mut state = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        assert_eq!(state.velocity[0][0], 1.0);
        assert!((p.value[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_and_stationary_cases() {
        let mut p = param(2.0, 0.5);
        let mut state = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        assert_eq!(p.value[0], 2.0 - 0.1 * 0.5);

        let mut p = param(3.0, 0.0);
        let mut state = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        assert_eq!(p.value[0], 3.0);

        let mut p = param(3.0, 0.0);
        let mut state = OptimizerState::new(0.1, 0.9, 1e-4).unwrap();
        sgd_nesterov_step(&mut [&mut p], &mut state).unwrap();
        // With zero velocity and gradient the first step is w·(1 - lr·λ·(1 + μ)).
        assert!((p.value[0] - 3.0 * (1.0 - 0.1 * 1e-4 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = param(1.0, f64::NAN);
        let mut state = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        assert!(matches!(sgd_nesterov_step(&mut [&mut p], &mut state), Err(Error::NonFiniteGradient(_))));
        assert_eq!(p.value[0], 1.0);
    }

    #[test]
    fn top_k_examples() {
        let scores = vec![vec![0.1, 0.7, 0.2], vec![0.5, 0.5, 0.0]];
        let acc = top_k_accuracy(&scores, &[1, 1], &[1, 3]);
        // Second sample ties and loses to the lower index.
        assert_eq!(acc[&1], 0.5);
        assert_eq!(acc[&3], 1.0);
    }

    #[test]
    fn schedule_steps() {
        let s = StepSchedule::default();
        assert_eq!(s.rate_at(0.1, 0), 0.1);
        assert!((s.rate_at(0.1, 30) - 0.01).abs() < 1e-15);
        assert!((s.rate_at(0.1, 55) - 0.001).abs() < 1e-15);
    }
}
