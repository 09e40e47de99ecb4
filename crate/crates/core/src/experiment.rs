//! Dataset preparation, the training driver, evaluation and the stream ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centrality::{assemble_centrality_set, CentralityMode, Stream};
use crate::config::{RunConfig, StreamMode};
use crate::dataio::{augment, diff_features, normalize_length, parse_sequence, read_manifest, SkeletonSequence};
use crate::error::{Error, Result};
use crate::graph::SkeletonTemplate;
use crate::net::{CgcnModel, PropagationId, Rng};
use crate::training::{evaluate, mix_seed, EpochRow, OptimizerState, Sample, TrainReport, Trainer};

/// Parsed sequences of one manifest, all on the same template.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub template_id: String,
    pub template: SkeletonTemplate,
    pub sequences: Vec<SkeletonSequence>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn in_channels(&self) -> usize {
        3 * self.template.dims
    }

    /// Reads the manifest and every sequence it lists.
    pub fn load(manifest: &Path) -> Result<Dataset> {
        let rows = read_manifest(manifest)?;
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let sequences = rows
            .par_iter()
            .map(|(path, label)| {
                let seq = parse_sequence(path)?;
                match seq.label {
                    Some(l) if l != *label => Err(Error::SchemaViolation(format!(
                        "{}: file label {l} disagrees with manifest label {label}",
                        path.display()
                    ))),
                    _ => Ok(SkeletonSequence {
                        label: Some(*label),
                        ..seq
                    }),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_sequences(sequences, manifest.parent())
    }

    pub fn from_sequences(sequences: Vec<SkeletonSequence>, template_dir: Option<&Path>) -> Result<Dataset> {
        let first = sequences.first().ok_or(Error::EmptyDataset)?;
        let template_id = first.template.clone();
        if let Some(s) = sequences.iter().find(|s| s.template != template_id) {
            return Err(Error::SchemaViolation(format!(
                "{} uses template {:?}, dataset uses {template_id:?}",
                s.name, s.template
            )));
        }
        let labels = sequences
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::SchemaViolation(format!("{} has no label", s.name))))
            .collect::<Result<Vec<_>>>()?;
        let template = SkeletonTemplate::resolve(&template_id, template_dir)?;
        Ok(Dataset {
            template_id,
            template,
            sequences,
            labels,
        })
    }
}

/// Digest identifying the inputs of the propagation matrices.
pub fn propagation_hash(template: &SkeletonTemplate, mode: CentralityMode) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(template).expect("template serializes"));
    h.update(format!("{mode:?}").as_bytes());
    hex::encode(h.finalize())
}

/// Length normalization, optional augmentation, centralities and Diff
/// features for every sequence. `epoch` salts the random crop and the
/// augmentation; centralities use the unaugmented clip.
pub fn prepare_samples(data: &Dataset, config: &RunConfig, epoch: Option<usize>) -> Result<Vec<Sample>> {
    let graph = data.template.graph()?;
    let salt = epoch.map_or(u64::MAX, |e| e as u64);
    data.sequences
        .par_iter()
        .zip(&data.labels)
        .enumerate()
        .map(|(i, (seq, &label))| {
            let mut rng = Rng::seed_from_u64(mix_seed(mix_seed(config.seed, salt), i as u64));
            let clip = normalize_length(seq, config.target_frames, config.length_mode, &mut rng);
            let centralities = assemble_centrality_set(&graph, clip.primary(), config.centrality_mode)?;
            let shown = if epoch.is_some() && !config.augment.is_identity() {
                augment(&clip, &mut rng, &config.augment)
            } else {
                clip
            };
            Ok(Sample {
                name: seq.name.clone(),
                features: diff_features(&shown, config.subjects)?,
                centralities,
                label,
            })
        })
        .collect()
}

pub fn build_models(config: &RunConfig, data: &Dataset, num_classes: usize) -> Result<Vec<CgcnModel>> {
    let hash = propagation_hash(&data.template, config.centrality_mode);
    config
        .model_streams()
        .into_iter()
        .map(|streams| {
            let salt = streams.iter().fold(0u64, |acc, s| acc * 5 + *s as u64 + 1);
            let id = PropagationId {
                streams,
                inputs_hash: hash.clone(),
            };
            CgcnModel::new(config.model_config(data.in_channels(), num_classes), id, mix_seed(config.seed, salt))
        })
        .collect()
}

pub fn checkpoint_name(model: &CgcnModel, epoch: Option<usize>) -> String {
    let label = model.propagation.label().replace('+', "");
    match epoch {
        Some(e) => format!("stream_{label}_epoch{e:04}.json"),
        None => format!("stream_{label}.json"),
    }
}

/// Final checkpoints (`stream_<label>.json`) in `dir`, sorted by file name.
pub fn load_checkpoints(dir: &Path) -> Result<Vec<(CgcnModel, Option<serde_json::Value>)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("stream_") && n.ends_with(".json") && !n.contains("_epoch"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::MissingCheckpoint(dir.join("stream_*.json")));
    }
    paths.iter().map(|p| CgcnModel::load(p)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Vec<CgcnModel>,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Where checkpoints and reports are written; nothing is written when absent.
    pub out_dir: Option<&'a Path>,
    /// Record wall time in the report instead of zero.
    pub timing: bool,
}

pub fn num_classes_for(data: &Dataset) -> Result<usize> {
    let classes = data.num_classes();
    if classes == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(classes)
}

/// Trains every model of `config` on `data`.
pub fn train(config: &RunConfig, data: &Dataset, opts: &TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let classes = num_classes_for(data)?;
    let models = build_models(config, data, classes)?;
    let optimizer = OptimizerState::new(config.learning_rate, config.momentum, config.weight_decay)?;
    let mut trainer = Trainer::new(models, optimizer, config.seed)?;
    trainer.schedule = config.lr_schedule.clone();
    let echo = config.to_json_value();
    let ckpt_dir = opts.out_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let reshuffle = !config.augment.is_identity() || matches!(config.length_mode, crate::dataio::LengthMode::RandomCrop);
    let fixed = if reshuffle { None } else { Some(prepare_samples(data, config, None)?) };
    let mut rows: Vec<EpochRow> = Vec::new();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let fresh;
        let samples = match &fixed {
            Some(s) => s,
            None => {
                fresh = prepare_samples(data, config, Some(epoch))?;
                &fresh
            }
        };
        let mut row = trainer.train_epoch(samples, config.batch_size)?;
        row.seconds = if opts.timing { started.elapsed().as_secs_f64() } else { 0.0 };
        log::info!("epoch {} loss {:.6} top1 {:.4}", row.epoch, row.loss, row.top1);
        rows.push(row);
        if let (Some(d), true) = (&ckpt_dir, config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0) {
            for m in &trainer.models {
                m.save(&d.join(checkpoint_name(m, Some(epoch + 1))), Some(&echo))?;
            }
        }
        if let Some(target) = config.stop_at_train_top1 {
            if (epoch + 1) % config.stop_check_every == 0 {
                let clean = match &fixed {
                    Some(s) => evaluate(&mut trainer.models, s, &[1])?,
                    None => evaluate(&mut trainer.models, &prepare_samples(data, config, None)?, &[1])?,
                };
                if clean[&1] >= target {
                    log::info!("train top-1 {} reached {target} after {} epochs", clean[&1], epoch + 1);
                    break;
                }
            }
        }
    }
    let report = TrainReport {
        seed: config.seed,
        config_hash: config.hash(),
        run_config: Some(echo.clone()),
        epochs: rows,
    };
    if let (Some(dir), Some(d)) = (opts.out_dir, &ckpt_dir) {
        for m in &trainer.models {
            m.save(&d.join(checkpoint_name(m, None)), Some(&echo))?;
        }
        write_text(&dir.join("report.csv"), &report.to_csv())?;
        write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(TrainOutcome {
        models: trainer.models,
        report,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub streams: Vec<String>,
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub config_hash: String,
    pub run_config: serde_json::Value,
}

/// Keeps the models whose streams appear in `wanted` (all when `None`).
pub fn select_models(models: Vec<CgcnModel>, wanted: Option<&[Stream]>) -> Result<Vec<CgcnModel>> {
    let Some(wanted) = wanted else {
        return Ok(models);
    };
    let picked: Vec<CgcnModel> = models
        .into_iter()
        .filter(|m| m.propagation.streams.iter().all(|s| wanted.contains(s)))
        .collect();
    for s in wanted {
        if !picked.iter().any(|m| m.propagation.streams.contains(s)) {
            return Err(Error::MissingCheckpoint(PathBuf::from(format!("stream_{s}.json"))));
        }
    }
    Ok(picked)
}

/// Fused top-1/top-5 of `models` on `data` prepared with `config`.
pub fn eval_models(models: &mut [CgcnModel], config: &RunConfig, data: &Dataset) -> Result<EvalReport> {
    let hash = propagation_hash(&data.template, config.centrality_mode);
    if let Some(m) = models.iter().find(|m| m.propagation.inputs_hash != hash) {
        return Err(Error::Config(format!(
            "model {} was trained on different propagation inputs",
            m.propagation.label()
        )));
    }
    let samples = prepare_samples(data, config, None)?;
    let acc = evaluate(models, &samples, &[1, 5])?;
    Ok(EvalReport {
        streams: models.iter().map(|m| m.propagation.label()).collect(),
        samples: samples.len(),
        top1: acc[&1],
        top5: acc[&5],
        config_hash: config.hash(),
        run_config: config.to_json_value(),
    })
}

/// The five stream subsets compared by the ablation, in table order.
pub fn ablation_variants() -> Vec<(&'static str, Vec<Stream>)> {
    use Stream::*;
    vec![
        ("CGCN", vec![J, B, W, A]),
        ("CGCN without J", vec![B, W, A]),
        ("CGCN without B", vec![J, W, A]),
        ("CGCN without W", vec![J, B, A]),
        ("Adjacency only", vec![A]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub streams: String,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub mode: StreamMode,
    pub rows: Vec<AblationRow>,
    pub config_hash: String,
    pub run_config: serde_json::Value,
}

pub const REFERENCE_FOOTNOTE: &str = "Published full-scale reference (NTU-RGB+D cross-view top-1, %), \
shown for layout only and never compared: ST-GCN without adaptive graph 88.3; ST-GCN with adaptive graph 90.8; \
CGCN without J 95.1; CGCN without B 95.9; CGCN without W 95.9; CGCN 96.4.";

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method | Streams | Top-1 (%)[^ref] | Top-5 (%) |\n|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} |\n",
                r.method,
                r.streams,
                100.0 * r.top1,
                100.0 * r.top5
            ));
        }
        out.push_str(&format!("\n[^ref]: {REFERENCE_FOOTNOTE}\n"));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,streams,top1,top5\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.method, r.streams, r.top1, r.top5));
        }
        out
    }
}

/// Evaluates each variant. Four-stream mode reuses one model per stream
/// and fuses the subset; single mode trains one summed model per variant.
pub fn ablate(
    config: &RunConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    trained: Option<Vec<CgcnModel>>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    match config.mode {
        StreamMode::FourStream => {
            let models = match trained {
                Some(m) => m,
                None => {
                    let full = RunConfig {
                        streams: Stream::ALL.to_vec(),
                        ..config.clone()
                    };
                    train(&full, train_data, &TrainOptions::default())?.models
                }
            };
            for (method, streams) in ablation_variants() {
                let mut subset = select_models(models.clone(), Some(&streams))?;
                let r = eval_models(&mut subset, config, eval_data)?;
                rows.push(row(method, &streams, &r));
            }
        }
        StreamMode::Single => {
            if trained.is_some() {
                return Err(Error::Config("single mode ablation retrains every variant".into()));
            }
            for (method, streams) in ablation_variants() {
                let variant = RunConfig {
                    streams: streams.clone(),
                    ..config.clone()
                };
                let mut models = train(&variant, train_data, &TrainOptions::default())?.models;
                let r = eval_models(&mut models, &variant, eval_data)?;
                rows.push(row(method, &streams, &r));
            }
        }
    }
    Ok(AblationTable {
        mode: config.mode,
        rows,
        config_hash: config.hash(),
        run_config: config.to_json_value(),
    })
}

fn row(method: &str, streams: &[Stream], r: &EvalReport) -> AblationRow {
    AblationRow {
        method: method.to_string(),
        streams: streams.iter().map(|s| s.name()).collect::<Vec<_>>().join("+"),
        top1: r.top1,
        top5: r.top5,
    }
}
